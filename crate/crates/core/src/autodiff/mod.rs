//! Reverse-mode differentiation over the closed set of row-batched primitives the
//! model needs.
//!
//! Every tape node holds a dense matrix. Geometry primitives act row-wise: an
//! `n × d` input is `n` points or tangent vectors, and per-point scalars (norms,
//! conformal factors, distances) come out as `n × 1` columns. Nodes are appended
//! in evaluation order, so the append order is a valid topological order and
//! `backward` is a single reverse sweep.

mod gradcheck;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{
    arcosh1p, conformal_from_sq, dist_terms, exp_radial, log_radial, mobius_radial, sq_norm,
    Radial, BALL_EPS,
};
use crate::mat::Mat;
use crate::real::Real;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, WorstCoordinate};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recordable primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    ExpMap,
    LogMap,
    MobiusScalar,
    Gyromidpoint,
    Dist,
    SqDist,
    ConformalFactor,
    Sigmoid,
    Mul,
    WeightedSum,
    SegmentSum,
    Gather,
    Concat,
    MatVec,
    Norm,
    Div,
    Hinge,
    Sum,
}

impl Primitive {
    pub const ALL: [Primitive; 18] = [
        Primitive::ExpMap,
        Primitive::LogMap,
        Primitive::MobiusScalar,
        Primitive::Gyromidpoint,
        Primitive::Dist,
        Primitive::SqDist,
        Primitive::ConformalFactor,
        Primitive::Sigmoid,
        Primitive::Mul,
        Primitive::WeightedSum,
        Primitive::SegmentSum,
        Primitive::Gather,
        Primitive::Concat,
        Primitive::MatVec,
        Primitive::Norm,
        Primitive::Div,
        Primitive::Hinge,
        Primitive::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::ExpMap => "exp_o",
            Primitive::LogMap => "log_o",
            Primitive::MobiusScalar => "mobius_scalar",
            Primitive::Gyromidpoint => "gyromidpoint",
            Primitive::Dist => "dist",
            Primitive::SqDist => "sq_dist",
            Primitive::ConformalFactor => "conformal_factor",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Mul => "mul",
            Primitive::WeightedSum => "weighted_sum",
            Primitive::SegmentSum => "segment_sum",
            Primitive::Gather => "gather",
            Primitive::Concat => "concat",
            Primitive::MatVec => "matvec",
            Primitive::Norm => "norm",
            Primitive::Div => "div",
            Primitive::Hinge => "hinge",
            Primitive::Sum => "sum",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown primitive `{s}`")))
    }
}

/// Compressed segment layout: output row `n` sums input rows
/// `index[offsets[n]..offsets[n+1]]`, each scaled by its coefficient (1 when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub coeff: Option<Vec<f64>>,
}

impl Segments {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut index = Vec::new();
        for l in lists {
            index.extend_from_slice(l);
            offsets.push(index.len());
        }
        Segments {
            offsets,
            index,
            coeff: None,
        }
    }

    pub fn with_coeff(mut self, coeff: Vec<f64>) -> Self {
        assert_eq!(coeff.len(), self.index.len());
        self.coeff = Some(coeff);
        self
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn coeff_at<T: Real>(&self, j: usize) -> T {
        self.coeff.as_ref().map_or(T::one(), |c| T::of(c[j]))
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    ExpMap { x: Var, sqrt_k: T },
    LogMap { x: Var, sqrt_k: T },
    Mobius { x: Var, a: T, sqrt_k: T },
    Conformal { x: Var, k: T },
    Dist { x: Var, y: Var, k: T, squared: bool },
    Norm { x: Var },
    Sigmoid { x: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Linear { terms: Vec<(Var, T)> },
    SegmentSum { x: Var, seg: Arc<Segments> },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Concat { parts: Vec<Var> },
    MatVec { w: Var, x: Var },
    Hinge { x: Var },
    Sum { x: Var },
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::ExpMap { .. } => Primitive::ExpMap,
            Op::LogMap { .. } => Primitive::LogMap,
            Op::Mobius { .. } => Primitive::MobiusScalar,
            Op::Conformal { .. } => Primitive::ConformalFactor,
            Op::Dist { squared: false, .. } => Primitive::Dist,
            Op::Dist { squared: true, .. } => Primitive::SqDist,
            Op::Norm { .. } => Primitive::Norm,
            Op::Sigmoid { .. } => Primitive::Sigmoid,
            Op::Mul { .. } => Primitive::Mul,
            Op::Div { .. } => Primitive::Div,
            Op::Linear { .. } => Primitive::WeightedSum,
            Op::SegmentSum { .. } => Primitive::SegmentSum,
            Op::Gather { .. } => Primitive::Gather,
            Op::Concat { .. } => Primitive::Concat,
            Op::MatVec { .. } => Primitive::MatVec,
            Op::Hinge { .. } => Primitive::Hinge,
            Op::Sum { .. } => Primitive::Sum,
        })
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Mat<T>,
    param: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Clone)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
    fault: Option<Primitive>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct GradBuffer<T = f64> {
    grads: Vec<(Var, Mat<T>)>,
}

impl<T: Real> GradBuffer<T> {
    /// Gradient for `leaf`; parameters not on any path to the output hold zeros.
    pub fn get(&self, leaf: Var) -> Option<&Mat<T>> {
        self.grads
            .binary_search_by_key(&leaf, |(v, _)| *v)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Mat<T>)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|(_, g)| g.is_finite())
    }

    pub fn zero(&mut self) {
        for (_, g) in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

fn same_shape<T: Real>(a: &Mat<T>, b: &Mat<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Index of the `b` element paired with `a[i, j]` under the supported broadcasts:
/// equal shapes, an `n × 1` column, or a `1 × 1` scalar.
#[inline]
fn bcast_index(b: (usize, usize), i: usize, j: usize) -> usize {
    match b {
        (1, 1) => 0,
        (_, 1) => i,
        (_, c) => i * c + j,
    }
}

fn check_bcast(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b || b == (1, 1) || (b.1 == 1 && b.0 == a.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "cannot broadcast {b:?} against {a:?}"
        )))
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the adjoint of `primitive` (scaled by 1.1). Diagnostic hook for
    /// checking that gradient checks catch a wrong derivative.
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].param = true;
        v
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    fn radial_rows(&self, x: Var, f: impl Fn(T) -> Radial<T>) -> Mat<T> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for i in 0..xv.rows {
            let row = out.row_mut(i);
            let r = sq_norm(row).sqrt();
            let s = f(r).scale;
            row.iter_mut().for_each(|c| *c = *c * s);
        }
        out
    }

    pub fn exp_map(&mut self, x: Var, k: f64) -> Var {
        let sqrt_k = T::of(k.sqrt());
        let out = self.radial_rows(x, |r| exp_radial(r, sqrt_k));
        self.push(Op::ExpMap { x, sqrt_k }, out)
    }

    pub fn log_map(&mut self, x: Var, k: f64) -> Var {
        let sqrt_k = T::of(k.sqrt());
        let out = self.radial_rows(x, |r| log_radial(r, sqrt_k));
        self.push(Op::LogMap { x, sqrt_k }, out)
    }

    pub fn mobius_scalar(&mut self, x: Var, a: f64, k: f64) -> Var {
        let sqrt_k = T::of(k.sqrt());
        let a = T::of(a);
        let out = self.radial_rows(x, |r| mobius_radial(a, r, sqrt_k));
        self.push(Op::Mobius { x, a, sqrt_k }, out)
    }

    /// Row-wise conformal factor, `n × d → n × 1`.
    pub fn conformal_factor(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        let xv = self.value(x);
        let out = (0..xv.rows)
            .map(|i| conformal_from_sq(sq_norm(xv.row(i)), k))
            .collect();
        self.push(Op::Conformal { x, k }, Mat::column(out))
    }

    fn dist_op(&mut self, x: Var, y: Var, k: f64, squared: bool) -> Var {
        let kt = T::of(k);
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.shape(), yv.shape(), "distance between mismatched batches");
        let out = (0..xv.rows)
            .map(|i| {
                let d = kt.sqrt() * arcosh1p(dist_terms(xv.row(i), yv.row(i), kt).z);
                if squared {
                    d * d
                } else {
                    d
                }
            })
            .collect();
        self.push(Op::Dist { x, y, k: kt, squared }, Mat::column(out))
    }

    /// Row-paired geodesic distance, `n × 1`.
    pub fn dist(&mut self, x: Var, y: Var, k: f64) -> Var {
        self.dist_op(x, y, k, false)
    }

    /// Row-paired squared geodesic distance, `n × 1`.
    pub fn sq_dist(&mut self, x: Var, y: Var, k: f64) -> Var {
        self.dist_op(x, y, k, true)
    }

    /// Row norms; rows with zero norm report `zero_as` and pass no gradient.
    pub fn norm(&mut self, x: Var, zero_as: f64) -> Var {
        let zero_as = T::of(zero_as);
        let xv = self.value(x);
        let out = (0..xv.rows)
            .map(|i| {
                let r = sq_norm(xv.row(i)).sqrt();
                if r == T::zero() {
                    zero_as
                } else {
                    r
                }
            })
            .collect();
        self.push(Op::Norm { x }, Mat::column(out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, out)
    }

    /// Element-wise product; `b` may be the same shape, an `n × 1` column or `1 × 1`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        check_bcast(av.shape(), bv.shape()).expect("mul");
        let mut out = av.clone();
        let bs = bv.shape();
        for i in 0..av.rows {
            for j in 0..av.cols {
                let o = &mut out.data[i * av.cols + j];
                *o = *o * bv.data[bcast_index(bs, i, j)];
            }
        }
        self.push(Op::Mul { a, b }, out)
    }

    /// Element-wise quotient with the same broadcasting as [`Tape::mul`].
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        check_bcast(av.shape(), bv.shape()).expect("div");
        let mut out = av.clone();
        let bs = bv.shape();
        for i in 0..av.rows {
            for j in 0..av.cols {
                let o = &mut out.data[i * av.cols + j];
                *o = *o / bv.data[bcast_index(bs, i, j)];
            }
        }
        self.push(Op::Div { a, b }, out)
    }

    /// `Σ cᵢ xᵢ + shift` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)], shift: f64) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let shape = self.value(terms[0].0).shape();
        let mut out = Mat::from_vec(shape.0, shape.1, vec![T::of(shift); shape.0 * shape.1]);
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, c)| (v, T::of(c))).collect();
        for &(v, c) in &terms {
            let xv = self.value(v);
            assert_eq!(xv.shape(), shape, "weighted_sum shape mismatch");
            for (o, &x) in out.data.iter_mut().zip(&xv.data) {
                *o = *o + c * x;
            }
        }
        self.push(Op::Linear { terms }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)], 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, 1.0), (b, -1.0)], 0.0)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.weighted_sum(&[(x, scale)], shift)
    }

    /// Sparse weighted row sums described by `seg`.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<Segments>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols;
        let mut out = Mat::zeros(seg.len(), cols);
        for n in 0..seg.len() {
            let row = &mut out.data[n * cols..(n + 1) * cols];
            for j in seg.offsets[n]..seg.offsets[n + 1] {
                let c: T = seg.coeff_at(j);
                let src = xv.row(seg.index[j]);
                for (o, &s) in row.iter_mut().zip(src) {
                    *o = *o + c * s;
                }
            }
        }
        self.push(Op::SegmentSum { x, seg }, out)
    }

    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * xv.cols);
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let out = Mat::from_vec(idx.len(), xv.cols, data);
        self.push(Op::Gather { x, idx }, out)
    }

    /// Row-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Mat::from_vec(rows, cols, data),
        )
    }

    /// Applies `w` (`o × i`) to every row of `x` (`n × i`), giving `n × o`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        assert_eq!(wv.cols, xv.cols, "matvec inner dimension mismatch");
        let mut out = Mat::zeros(xv.rows, wv.rows);
        for n in 0..xv.rows {
            let xr = xv.row(n);
            for o in 0..wv.rows {
                out.data[n * wv.rows + o] = wv
                    .row(o)
                    .iter()
                    .zip(xr)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
        self.push(Op::MatVec { w, x }, out)
    }

    /// `max(x, 0)` element-wise; the subgradient at 0 is 0.
    pub fn hinge(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Hinge { x }, out)
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Op::Sum { x }, Mat::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Gyromidpoint of each segment of `x`'s rows, composed from conformal
    /// factors, segment sums, a division and a half Möbius scaling. Segment
    /// coefficients act as the point weights.
    pub fn gyromidpoint_segments(&mut self, x: Var, seg: Arc<Segments>, k: f64) -> Var {
        let lambda = self.conformal_factor(x, k);
        let weighted = self.mul(x, lambda);
        let num = self.segment_sum(weighted, seg.clone());
        let lambda_m1 = self.affine(lambda, 1.0, -1.0);
        let den = self.segment_sum(lambda_m1, seg);
        let inner = self.div(num, den);
        self.mobius_scalar(inner, 0.5, k)
    }

    /// Smallest `|input|` over all recorded hinges (∞ when there are none).
    pub fn hinge_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Hinge { x } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data.iter().map(|v| v.abs().f64()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Generic entry point: records `name` applied to `inputs`, validating arity
    /// and shapes. `args` carries the primitive's constants:
    ///
    /// | primitive | args |
    /// |---|---|
    /// | `exp_o`, `log_o`, `conformal_factor`, `dist`, `sq_dist`, `gyromidpoint` | `[k]` |
    /// | `mobius_scalar` | `[a, k]` |
    /// | `norm` | `[]` or `[zero_as]` |
    /// | `weighted_sum` | one coefficient per input, optionally followed by a shift |
    /// | `gather` | row indices |
    /// | others | `[]` |
    pub fn record(&mut self, name: &str, inputs: &[Var], args: &[f64]) -> Result<Var> {
        let p: Primitive = name.parse()?;
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("input {v:?} is not on this tape")));
            }
        }
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{p} takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        let curvature = |i: usize| -> Result<f64> {
            match args.get(i) {
                Some(&k) if k.is_finite() && k > 0.0 => Ok(k),
                other => Err(Error::invalid(format!(
                    "{p} needs a positive curvature argument, got {other:?}"
                ))),
            }
        };
        Ok(match p {
            Primitive::ExpMap => {
                arity(1)?;
                self.exp_map(inputs[0], curvature(0)?)
            }
            Primitive::LogMap => {
                arity(1)?;
                let k = curvature(0)?;
                let xv = self.value(inputs[0]);
                if (0..xv.rows).any(|i| sq_norm(xv.row(i)).f64() >= k) {
                    return Err(Error::invalid("log_o of a point outside the ball"));
                }
                self.log_map(inputs[0], k)
            }
            Primitive::MobiusScalar => {
                arity(1)?;
                let a = *args
                    .first()
                    .ok_or_else(|| Error::invalid("mobius_scalar needs [a, k]"))?;
                self.mobius_scalar(inputs[0], a, curvature(1)?)
            }
            Primitive::Gyromidpoint => {
                arity(1)?;
                let rows = self.value(inputs[0]).rows;
                if rows == 0 {
                    return Err(Error::invalid("gyromidpoint of an empty point set"));
                }
                let seg = Arc::new(Segments::from_lists(&[(0..rows).collect()]));
                self.gyromidpoint_segments(inputs[0], seg, curvature(0)?)
            }
            Primitive::Dist | Primitive::SqDist => {
                arity(2)?;
                same_shape(self.value(inputs[0]), self.value(inputs[1]), p.name())?;
                self.dist_op(inputs[0], inputs[1], curvature(0)?, p == Primitive::SqDist)
            }
            Primitive::ConformalFactor => {
                arity(1)?;
                self.conformal_factor(inputs[0], curvature(0)?)
            }
            Primitive::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Mul | Primitive::Div => {
                arity(2)?;
                check_bcast(self.value(inputs[0]).shape(), self.value(inputs[1]).shape())?;
                if p == Primitive::Mul {
                    self.mul(inputs[0], inputs[1])
                } else {
                    self.div(inputs[0], inputs[1])
                }
            }
            Primitive::WeightedSum => {
                if inputs.is_empty() {
                    return Err(Error::invalid("weighted_sum needs at least one input"));
                }
                let (coeff, shift) = match args.len() {
                    0 => (vec![1.0; inputs.len()], 0.0),
                    n if n == inputs.len() => (args.to_vec(), 0.0),
                    n if n == inputs.len() + 1 => (args[..n - 1].to_vec(), args[n - 1]),
                    n => {
                        return Err(Error::invalid(format!(
                            "weighted_sum over {} inputs got {n} args",
                            inputs.len()
                        )))
                    }
                };
                for v in &inputs[1..] {
                    same_shape(self.value(inputs[0]), self.value(*v), "weighted_sum")?;
                }
                let terms: Vec<_> = inputs.iter().copied().zip(coeff).collect();
                self.weighted_sum(&terms, shift)
            }
            Primitive::SegmentSum => {
                return Err(Error::invalid(
                    "segment_sum needs a segment layout; use Tape::segment_sum",
                ))
            }
            Primitive::Gather => {
                arity(1)?;
                let rows = self.value(inputs[0]).rows;
                let idx: Vec<usize> = args
                    .iter()
                    .map(|&a| {
                        if a >= 0.0 && a.fract() == 0.0 && (a as usize) < rows {
                            Ok(a as usize)
                        } else {
                            Err(Error::invalid(format!("gather index {a} out of range")))
                        }
                    })
                    .collect::<Result<_>>()?;
                self.gather(inputs[0], Arc::new(idx))
            }
            Primitive::Concat => {
                if inputs.is_empty() {
                    return Err(Error::invalid("concat needs at least one input"));
                }
                let cols = self.value(inputs[0]).cols;
                if inputs.iter().any(|v| self.value(*v).cols != cols) {
                    return Err(Error::invalid("concat column mismatch"));
                }
                self.concat(inputs)
            }
            Primitive::MatVec => {
                arity(2)?;
                if self.value(inputs[0]).cols != self.value(inputs[1]).cols {
                    return Err(Error::invalid("matvec inner dimension mismatch"));
                }
                self.matvec(inputs[0], inputs[1])
            }
            Primitive::Norm => {
                arity(1)?;
                self.norm(inputs[0], args.first().copied().unwrap_or(0.0))
            }
            Primitive::Hinge => {
                arity(1)?;
                self.hinge(inputs[0])
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
        })
    }

    /// Gradients of the scalar `output` with respect to every parameter leaf.
    pub fn backward(&self, output: Var) -> Result<GradBuffer<T>> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Mat::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let scale = match (self.fault, node.op.primitive()) {
                (Some(f), Some(p)) if f == p => T::of(1.1),
                _ => T::one(),
            };
            self.propagate(node, &g, scale, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Mat::zeros(n.value.rows, n.value.cols));
                (Var(i), g)
            })
            .collect();
        Ok(GradBuffer { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, scale: T, grads: &mut [Option<Mat<T>>]) {
        let mut acc = |v: Var, contrib: Mat<T>| {
            let contrib = if scale == T::one() {
                contrib
            } else {
                contrib.map(|x| x * scale)
            };
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::ExpMap { x, sqrt_k } => {
                let s = *sqrt_k;
                acc(*x, self.radial_adjoint(*x, g, |r| exp_radial(r, s)));
            }
            Op::LogMap { x, sqrt_k } => {
                let s = *sqrt_k;
                acc(*x, self.radial_adjoint(*x, g, |r| log_radial(r, s)));
            }
            Op::Mobius { x, a, sqrt_k } => {
                let (a, s) = (*a, *sqrt_k);
                acc(*x, self.radial_adjoint(*x, g, |r| mobius_radial(a, r, s)));
            }
            Op::Conformal { x, k } => {
                let xv = self.value(*x);
                let max_sq = *k * (T::one() - T::of(BALL_EPS)).powi(2);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for i in 0..xv.rows {
                    let row = xv.row(i);
                    let sq = sq_norm(row);
                    if sq >= max_sq {
                        continue;
                    }
                    let lambda = node.value.data[i];
                    let c = g.data[i] * lambda * lambda / *k;
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(row) {
                        *o = c * v;
                    }
                }
                acc(*x, gx);
            }
            Op::Dist { x, y, k, squared } => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                let mut gy = Mat::zeros(yv.rows, yv.cols);
                let kk = *k;
                let four = T::of(4.0);
                for i in 0..xv.rows {
                    let (xr, yr) = (xv.row(i), yv.row(i));
                    let t = dist_terms(xr, yr, kk);
                    let root = (t.z * t.z + T::of(2.0) * t.z).sqrt();
                    // d/dz of the output; guarded at coincidence where dz/dx vanishes.
                    let dout_dz = if t.z < T::of(1e-12) {
                        if *squared {
                            T::of(2.0) * kk
                        } else {
                            T::zero()
                        }
                    } else if *squared {
                        T::of(2.0) * kk * arcosh1p(t.z) / root
                    } else {
                        kk.sqrt() / root
                    };
                    let c = g.data[i] * dout_dz * four * kk / (t.alpha * t.beta);
                    let ax = t.diff_sq / t.alpha;
                    let by = t.diff_sq / t.beta;
                    let (gxr, gyr) = (gx.row_mut(i), gy.row_mut(i));
                    for j in 0..xr.len() {
                        gxr[j] = c * ((xr[j] - yr[j]) + ax * xr[j]);
                    }
                    for j in 0..yr.len() {
                        gyr[j] = c * ((yr[j] - xr[j]) + by * yr[j]);
                    }
                }
                acc(*x, gx);
                acc(*y, gy);
            }
            Op::Norm { x } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for i in 0..xv.rows {
                    let row = xv.row(i);
                    let r = sq_norm(row).sqrt();
                    if r == T::zero() {
                        continue;
                    }
                    let c = g.data[i] / r;
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(row) {
                        *o = c * v;
                    }
                }
                acc(*x, gx);
            }
            Op::Sigmoid { x } => {
                let mut gx = g.clone();
                for (o, &s) in gx.data.iter_mut().zip(&node.value.data) {
                    *o = *o * s * (T::one() - s);
                }
                acc(*x, gx);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bs = bv.shape();
                let mut ga = g.clone();
                let mut gb = Mat::zeros(bv.rows, bv.cols);
                for i in 0..av.rows {
                    for j in 0..av.cols {
                        let e = i * av.cols + j;
                        let bi = bcast_index(bs, i, j);
                        ga.data[e] = g.data[e] * bv.data[bi];
                        gb.data[bi] = gb.data[bi] + g.data[e] * av.data[e];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bs = bv.shape();
                let mut ga = g.clone();
                let mut gb = Mat::zeros(bv.rows, bv.cols);
                for i in 0..av.rows {
                    for j in 0..av.cols {
                        let e = i * av.cols + j;
                        let bi = bcast_index(bs, i, j);
                        ga.data[e] = g.data[e] / bv.data[bi];
                        gb.data[bi] = gb.data[bi] - g.data[e] * node.value.data[e] / bv.data[bi];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Linear { terms } => {
                for &(v, c) in terms {
                    acc(v, g.map(|x| x * c));
                }
            }
            Op::SegmentSum { x, seg } => {
                let xv = self.value(*x);
                let cols = xv.cols;
                let mut gx = Mat::zeros(xv.rows, cols);
                for n in 0..seg.len() {
                    let gr = g.row(n);
                    for j in seg.offsets[n]..seg.offsets[n + 1] {
                        let c: T = seg.coeff_at(j);
                        let dst = gx.row_mut(seg.index[j]);
                        for (o, &v) in dst.iter_mut().zip(gr) {
                            *o = *o + c * v;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for (r, &i) in idx.iter().enumerate() {
                    let gr = g.row(r);
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(gr) {
                        *o = *o + v;
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    acc(
                        p,
                        Mat::from_vec(pv.rows, pv.cols, g.data[start..start + n].to_vec()),
                    );
                    start += n;
                }
            }
            Op::MatVec { w, x } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let mut gw = Mat::zeros(wv.rows, wv.cols);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for n in 0..xv.rows {
                    let gr = g.row(n);
                    let xr = xv.row(n);
                    for o in 0..wv.rows {
                        let go = gr[o];
                        if go == T::zero() {
                            continue;
                        }
                        let wr = wv.row(o);
                        let gxr = &mut gx.data[n * xv.cols..(n + 1) * xv.cols];
                        for c in 0..xv.cols {
                            gxr[c] = gxr[c] + go * wr[c];
                        }
                        let gwr = gw.row_mut(o);
                        for c in 0..xv.cols {
                            gwr[c] = gwr[c] + go * xr[c];
                        }
                    }
                }
                acc(*w, gw);
                acc(*x, gx);
            }
            Op::Hinge { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data.iter_mut().zip(&xv.data) {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                }
                acc(*x, gx);
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                let gv = g.item();
                acc(*x, Mat::from_vec(xv.rows, xv.cols, vec![gv; xv.len()]));
            }
        }
    }

    /// Adjoint of `f(v) = h(‖v‖) v`: `h g + (h'(r)/r)(v·g) v` per row.
    fn radial_adjoint(&self, x: Var, g: &Mat<T>, f: impl Fn(T) -> Radial<T>) -> Mat<T> {
        let xv = self.value(x);
        let mut gx = Mat::zeros(xv.rows, xv.cols);
        for i in 0..xv.rows {
            let v = xv.row(i);
            let gr = g.row(i);
            let r = sq_norm(v).sqrt();
            let rad = f(r);
            let vg = v.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            let c = rad.dscale_over_r * vg;
            for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                *o = rad.scale * gr[j] + c * v[j];
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests;
