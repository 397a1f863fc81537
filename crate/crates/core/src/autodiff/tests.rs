use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

#[test]
fn record_examples() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Mat::scalar(1.0));
    let b = t.constant(Mat::scalar(2.0));
    let s = t.record("weighted_sum", &[a, b], &[]).unwrap();
    assert_eq!(t.value(s).item(), 3.0);
    let x = t.constant(Mat::scalar(-0.5));
    let h = t.record("hinge", &[x], &[]).unwrap();
    assert_eq!(t.value(h).item(), 0.0);
}

#[test]
fn record_rejects_bad_input() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Mat::row_vector(vec![0.1, 0.2]));
    assert!(matches!(t.record("softmax", &[a], &[]), Err(Error::InvalidArgument(_))));
    assert!(t.record("exp_o", &[a, a], &[1.0]).is_err());
    assert!(t.record("exp_o", &[a], &[]).is_err());
    assert!(t.record("exp_o", &[a], &[-1.0]).is_err());
    let far = t.constant(Mat::row_vector(vec![2.0, 0.0]));
    assert!(t.record("log_o", &[far], &[1.0]).is_err());
    let c = t.constant(Mat::row_vector(vec![0.1, 0.2, 0.3]));
    assert!(t.record("dist", &[a, c], &[1.0]).is_err());
    assert!(t.record("gather", &[a], &[3.0]).is_err());
    assert!("no_such_op".parse::<Primitive>().is_err());
    for p in Primitive::ALL {
        assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let v = t.param(Mat::row_vector(vec![1.0, 2.0]));
    let sq = t.mul(v, v);
    let loss = t.sum(sq);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap().data, vec![2.0, 4.0]);

    // non-scalar output
    assert!(t.backward(sq).is_err());

    // coincident squared distance
    let mut t = Tape::<f64>::new();
    let u = t.param(Mat::row_vector(vec![0.3, -0.2]));
    let w = t.param(Mat::row_vector(vec![0.3, -0.2]));
    let hu = t.exp_map(u, 1.0);
    let hw = t.exp_map(w, 1.0);
    let d = t.sq_dist(hu, hw, 1.0);
    let loss = t.sum(d);
    let g = t.backward(loss).unwrap();
    assert!(g.get(u).unwrap().data.iter().all(|&x| x == 0.0));
    assert!(g.get(w).unwrap().data.iter().all(|&x| x == 0.0));

    // hinge at the kink
    let mut t = Tape::<f64>::new();
    let s = t.param(Mat::scalar(0.0));
    let h = t.hinge(s);
    let g = t.backward(h).unwrap();
    assert_eq!(g.get(s).unwrap().item(), 0.0);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut t = Tape::<f64>::new();
    let a = t.param(Mat::row_vector(vec![1.0, 2.0]));
    let b = t.param(Mat::row_vector(vec![3.0, 4.0]));
    let loss = t.sum(a);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(b).unwrap().data, vec![0.0, 0.0]);
}

#[test]
fn grad_check_examples() {
    let quad = grad_check(
        &[Mat::row_vector(vec![0.7, -1.3, 2.0])],
        |t, v| {
            let sq = t.mul(v[0], v[0]);
            let s = t.sum(sq);
            Ok(t.affine(s, 3.0, 1.0))
        },
        1e-6,
        1e-8,
    )
    .unwrap();
    assert!(quad.passed, "{quad:?}");

    let constant = grad_check(
        &[Mat::row_vector(vec![0.7, -1.3])],
        |t, _| Ok(t.constant(Mat::scalar(5.0))),
        1e-6,
        1e-8,
    )
    .unwrap();
    assert_eq!(constant.max_rel_err, 0.0);
    assert!(constant.passed);

    assert!(grad_check(&[Mat::scalar(1.0)], |t, v| Ok(t.sum(v[0])), 0.0, 1e-4).is_err());
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One scalar loss per primitive, each reducing through a random projection so
/// every output coordinate matters.
fn primitive_losses() -> Vec<(Primitive, usize, Builder)> {
    fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
        let v = t.value(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, v.rows, v.cols, 1.0);
        let w = t.constant(w);
        let p = t.mul(x, w);
        t.sum(p)
    }
    let k = 1.3;
    vec![
        (Primitive::ExpMap, 1, Box::new(move |t, v| {
            let y = t.exp_map(v[0], k);
            Ok(project(t, y, 1))
        })),
        (Primitive::LogMap, 1, Box::new(move |t, v| {
            let y = t.exp_map(v[0], k);
            let z = t.log_map(y, k);
            let z2 = t.mul(z, z);
            Ok(project(t, z2, 2))
        })),
        (Primitive::MobiusScalar, 1, Box::new(move |t, v| {
            let y = t.exp_map(v[0], k);
            let z = t.mobius_scalar(y, 0.5, k);
            Ok(project(t, z, 3))
        })),
        (Primitive::Gyromidpoint, 1, Box::new(move |t, v| {
            let y = t.exp_map(v[0], k);
            let seg = Arc::new(Segments::from_lists(&[vec![0, 1, 2], vec![1, 3], vec![2]]));
            let m = t.gyromidpoint_segments(y, seg, k);
            Ok(project(t, m, 4))
        })),
        (Primitive::Dist, 2, Box::new(move |t, v| {
            let x = t.exp_map(v[0], k);
            let y = t.exp_map(v[1], k);
            let d = t.dist(x, y, k);
            Ok(project(t, d, 5))
        })),
        (Primitive::SqDist, 2, Box::new(move |t, v| {
            let x = t.exp_map(v[0], k);
            let y = t.exp_map(v[1], k);
            let d = t.sq_dist(x, y, k);
            Ok(project(t, d, 6))
        })),
        (Primitive::ConformalFactor, 1, Box::new(move |t, v| {
            let x = t.exp_map(v[0], k);
            let l = t.conformal_factor(x, k);
            Ok(project(t, l, 7))
        })),
        (Primitive::Sigmoid, 1, Box::new(|t, v| {
            let s = t.sigmoid(v[0]);
            Ok(project(t, s, 8))
        })),
        (Primitive::Mul, 2, Box::new(|t, v| {
            let n = t.norm(v[1], 0.0);
            let a = t.mul(v[0], v[1]);
            let b = t.mul(a, n);
            Ok(project(t, b, 9))
        })),
        (Primitive::WeightedSum, 2, Box::new(|t, v| {
            let s = t.weighted_sum(&[(v[0], 0.3), (v[1], -1.7)], 0.2);
            let s2 = t.mul(s, s);
            Ok(project(t, s2, 10))
        })),
        (Primitive::SegmentSum, 1, Box::new(|t, v| {
            let seg = Arc::new(
                Segments::from_lists(&[vec![0, 2], vec![1, 1, 3], vec![]])
                    .with_coeff(vec![0.5, 2.0, -1.0, 0.25, 3.0]),
            );
            let s = t.segment_sum(v[0], seg);
            let s2 = t.mul(s, s);
            Ok(project(t, s2, 11))
        })),
        (Primitive::MatVec, 2, Box::new(|t, v| {
            let m = t.matvec(v[1], v[0]);
            let s = t.sigmoid(m);
            Ok(project(t, s, 12))
        })),
        (Primitive::Norm, 1, Box::new(|t, v| {
            let n = t.norm(v[0], 1.0);
            let q = t.div(v[0], n);
            Ok(project(t, q, 13))
        })),
        (Primitive::Div, 2, Box::new(|t, v| {
            let sq = t.mul(v[1], v[1]);
            let den = t.affine(sq, 1.0, 0.5);
            let q = t.div(v[0], den);
            Ok(project(t, q, 14))
        })),
        (Primitive::Hinge, 2, Box::new(|t, v| {
            let d = t.sub(v[0], v[1]);
            let h = t.hinge(d);
            Ok(project(t, h, 15))
        })),
        (Primitive::Gather, 1, Box::new(|t, v| {
            let g = t.gather(v[0], Arc::new(vec![3, 0, 0, 2]));
            let g2 = t.mul(g, g);
            Ok(project(t, g2, 16))
        })),
        (Primitive::Concat, 2, Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1], v[0]]);
            let c2 = t.mul(c, c);
            Ok(project(t, c2, 17))
        })),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (p, arity, build) in primitive_losses() {
        let mut checked = 0;
        while checked < 20 {
            let leaves: Vec<Mat<f64>> = match (p, arity) {
                (Primitive::MatVec, _) => {
                    vec![rand_mat(&mut rng, 4, 3, 1.0), rand_mat(&mut rng, 5, 3, 1.0)]
                }
                (_, n) => (0..n).map(|_| rand_mat(&mut rng, 4, 3, 1.2)).collect(),
            };
            let report = GradCheck::new(1e-6, 1e-4).run(&leaves, &build).unwrap();
            // Skip draws within 1e-3 of the hinge kink.
            if report.hinge_kink_distance < 1e-3 {
                continue;
            }
            assert!(report.passed, "{p}: {report:?}");
            checked += 1;
        }
    }
}

#[test]
fn fault_injection_is_detected_and_localized() {
    let leaves = vec![Mat::from_vec(2, 2, vec![0.3, -0.4, 0.1, 0.5])];
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let x = t.exp_map(v[0], 1.0);
        let n = t.norm(x, 0.0);
        Ok(t.sum(n))
    };
    let mut check = GradCheck::new(1e-6, 1e-4);
    assert!(check.run(&leaves, build).unwrap().passed);
    check.fault = Some(Primitive::ExpMap);
    let report = check.run(&leaves, build).unwrap();
    assert!(!report.passed);
    assert!(report.worst.is_some());
    assert!((report.max_rel_err - 0.1 / 1.1).abs() < 1e-3);
}

#[test]
fn linearity_on_shared_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = rand_mat(&mut rng, 3, 2, 1.0);
    let run = |alpha: f64, beta: f64| {
        let mut t = Tape::<f64>::new();
        let x = t.param(x0.clone());
        let e = t.exp_map(x, 1.0);
        let l = t.conformal_factor(e, 1.0);
        let f = t.sum(l);
        let sq = t.mul(x, x);
        let g = t.sum(sq);
        let out = t.weighted_sum(&[(f, alpha), (g, beta)], 0.0);
        t.backward(out).unwrap().get(x).unwrap().clone()
    };
    let (a, b) = (0.7, -2.5);
    let combined = run(a, b);
    let f = run(1.0, 0.0);
    let g = run(0.0, 1.0);
    for i in 0..combined.len() {
        let expect = a * f.data[i] + b * g.data[i];
        assert!((combined.data[i] - expect).abs() <= 1e-15 * (1.0 + expect.abs()));
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::<f64>::new();
    let x = t.param(rand_mat(&mut rng, 5, 4, 1.0));
    let e = t.exp_map(x, 1.0);
    let seg = Arc::new(Segments::from_lists(&[vec![0, 1, 2], vec![3, 4], vec![0, 4]]));
    let m = t.gyromidpoint_segments(e, seg, 1.0);
    let l = t.log_map(m, 1.0);
    let s = t.sum(l);
    let g1 = t.backward(s).unwrap();
    let g2 = t.backward(s).unwrap();
    let bits = |g: &GradBuffer<f64>| g.get(x).unwrap().data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1), bits(&g2));
}

#[test]
fn f32_tape_passes_relaxed_check() {
    let leaves = vec![Mat::<f32>::from_vec(3, 2, vec![0.3, -0.4, 0.1, 0.5, -0.2, 0.2])];
    let report = GradCheck::new(1e-2, 1e-2)
        .run(&leaves, |t, v| {
            let x = t.exp_map(v[0], 1.0);
            let seg = Arc::new(Segments::from_lists(&[vec![0, 1], vec![1, 2]]));
            let m = t.gyromidpoint_segments(x, seg, 1.0);
            let y = t.sq_dist(m, m, 1.0);
            let l = t.log_map(m, 1.0);
            let n = t.norm(l, 0.0);
            let s = t.add(n, y);
            Ok(t.sum(s))
        })
        .unwrap();
    assert!(report.passed, "{report:?}");
}
