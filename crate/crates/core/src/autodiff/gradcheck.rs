use serde::Serialize;

use super::{Primitive, Tape, Var};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

/// Central-difference check of reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Corrupt this primitive's adjoint in the analytic pass.
    pub fault: Option<Primitive>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCoordinate {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub h: f64,
    pub tol: f64,
    pub passed: bool,
    pub worst: Option<WorstCoordinate>,
    /// Smallest |hinge input| seen in the unperturbed evaluation.
    pub hinge_kink_distance: f64,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        GradCheck { h, tol, fault: None }
    }

    /// Compares the gradient of `build`'s scalar output with respect to every
    /// coordinate of `leaves` against `(f(θ+h) - f(θ-h)) / 2h`.
    ///
    /// The relative error of a coordinate is `|a - n| / max(|a|, |n|, s)` where
    /// `s` is 1e-3 of the largest analytic gradient magnitude, so coordinates whose
    /// true gradient vanishes are judged against the gradient's scale rather than
    /// against finite-difference rounding noise. An all-zero gradient that the
    /// differences confirm has relative error 0.
    pub fn run<T, F>(&self, leaves: &[Mat<T>], build: F) -> Result<GradCheckReport>
    where
        T: Real,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    {
        self.run_mixed(leaves, &build, &build)
    }

    /// Like [`GradCheck::run`], but the differences are taken on tapes of
    /// precision `U` built by `reference`, so a low-precision adjoint can be
    /// judged against a high-precision quotient.
    pub fn run_mixed<T, U, F, G>(&self, leaves: &[Mat<T>], build: F, reference: G) -> Result<GradCheckReport>
    where
        T: Real,
        U: Real,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
        G: Fn(&mut Tape<U>, &[Var]) -> Result<Var>,
    {
        if !(self.h > 0.0) {
            return Err(Error::invalid(format!("finite-difference step must be > 0, got {}", self.h)));
        }
        let eval = |vals: &[Mat<U>]| -> Result<U> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| tape.param(m.clone())).collect();
            let out = reference(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        if let Some(f) = self.fault {
            tape.inject_fault(f);
        }
        let vars: Vec<Var> = leaves.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let hinge_kink_distance = tape.hinge_kink_distance();

        let analytic: Vec<&Mat<T>> = vars
            .iter()
            .map(|v| grads.get(*v).expect("leaf gradient"))
            .collect();
        let scale = analytic
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v.f64().abs())
            .fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);

        let h = U::of(self.h);
        let mut work: Vec<Mat<U>> = leaves.iter().map(|m| m.cast()).collect();
        let mut max_rel_err = 0.0f64;
        let mut worst = None;
        let mut coordinates = 0;
        for li in 0..leaves.len() {
            for ci in 0..leaves[li].len() {
                let orig = work[li].data[ci];
                work[li].data[ci] = orig + h;
                let plus = eval(&work)?;
                work[li].data[ci] = orig - h;
                let minus = eval(&work)?;
                work[li].data[ci] = orig;
                // Use the realized step so rounding of θ±h does not bias the quotient.
                let span = ((orig + h) - (orig - h)).f64();
                let numeric = (plus - minus).f64() / span;
                let a = analytic[li].data[ci].f64();
                let denom = a.abs().max(numeric.abs()).max(floor);
                let err = if a == numeric { 0.0 } else { (a - numeric).abs() / denom };
                coordinates += 1;
                if err > max_rel_err || (worst.is_none() && err.is_nan()) {
                    max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                    worst = Some(WorstCoordinate {
                        leaf: li,
                        index: ci,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(GradCheckReport {
            max_rel_err,
            coordinates,
            h: self.h,
            tol: self.tol,
            passed: max_rel_err <= self.tol,
            worst,
            hinge_kink_distance,
        })
    }
}

/// Shorthand for `GradCheck::new(h, tol).run(leaves, build)`.
pub fn grad_check<T, F>(leaves: &[Mat<T>], build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    GradCheck::new(h, tol).run(leaves, build)
}
