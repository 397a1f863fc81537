use crate::mat::Mat;

/// Adaptive-moment update over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. `grads[i]` of `None` is treated as a zero gradient.
    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[Option<&Mat>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step = self.step.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(p.shape(), m.shape(), "parameter shape changed");
            for j in 0..p.data.len() {
                let g = grads[i].map_or(0.0, |g| g.data[j]);
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let step = self.lr * (m.data[j] / c1) / ((v.data[j] / c2).sqrt() + self.eps);
                p.data[j] -= step;
            }
        }
    }
}
