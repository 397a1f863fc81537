//! Margin ranking losses, negative sampling and the optimization loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::string_enum;
use crate::real::Real;

mod adam;
mod gradcheck;
mod sampler;
mod trainer;

pub use adam::Adam;
pub use gradcheck::{model_grad_check, ModelGradCheck};
pub use sampler::{sample_negative, NegativeQuery};
pub use trainer::{evaluate_params, train, EpochLog, EvalSplit, TrainOutcome, Trainer};

/// How negatives are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// One uniform candidate per positive.
    Uniform,
    /// Nearest of `n_neg` uniform candidates in the scoring ball.
    #[default]
    Hyperbolic,
}
string_enum!(Sampling { Uniform => "uniform", Hyperbolic => "hyperbolic" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Margin of the ranking hinge, in score units.
    pub margin: f64,
    /// Per side relation margin overrides.
    pub relation_margin: BTreeMap<String, f64>,
    /// Weight of the side-information loss.
    pub alpha: f64,
    /// Candidates per hyperbolic negative draw.
    pub n_neg: usize,
    pub sampling: Sampling,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Interaction triplets per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.1,
            relation_margin: BTreeMap::new(),
            alpha: 0.01,
            n_neg: 20,
            sampling: Sampling::Hyperbolic,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1024,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, x: f64| {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be ≥ 0, got {x}")))
            }
        };
        nonneg("margin", self.margin)?;
        for (r, &m) in &self.relation_margin {
            nonneg(&format!("relation_margin.{r}"), m)?;
        }
        nonneg("alpha", self.alpha)?;
        nonneg("lr", self.lr)?;
        if self.n_neg == 0 {
            return Err(Error::Config("train.n_neg must be ≥ 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("train.eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Margin of relation `name` (the interaction relation uses `margin`).
    pub fn margin_for(&self, name: &str) -> f64 {
        self.relation_margin.get(name).copied().unwrap_or(self.margin)
    }

    /// Candidates actually drawn per negative.
    pub fn effective_n_neg(&self) -> usize {
        match self.sampling {
            Sampling::Uniform => 1,
            Sampling::Hyperbolic => self.n_neg,
        }
    }
}

/// One ranking constraint, global node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub relation: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Hinge on a pair of scores: `max(neg − pos + m, 0)`.
pub fn cf_loss(pos: f64, neg: f64, m: f64) -> f64 {
    (neg - pos + m).max(0.0)
}

/// Sum over side relations of the mean hinge of that relation's
/// `(pos, neg)` score pairs. Relations without pairs contribute 0.
pub fn si_loss(relations: &[Vec<(f64, f64)>], m: f64) -> f64 {
    relations
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| r.iter().map(|&(p, n)| cf_loss(p, n, m)).sum::<f64>() / r.len() as f64)
        .sum()
}

/// Triplets of one relation with its margin.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGroup {
    pub relation: usize,
    pub margin: f64,
    pub triplets: Vec<Triplet>,
}

/// Mean hinge of one group on the tape, `1 × 1`. Scores are negative squared
/// distances in the scoring ball of curvature `k`.
fn group_loss<T: Real>(tape: &mut Tape<T>, emb: Var, group: &TripletGroup, k: f64) -> Var {
    let idx = |f: fn(&Triplet) -> usize| std::sync::Arc::new(group.triplets.iter().map(f).collect::<Vec<_>>());
    let mut ball = |rows| {
        let t = tape.gather(emb, rows);
        tape.exp_map(t, k)
    };
    let a = ball(idx(|t| t.anchor));
    let p = ball(idx(|t| t.positive));
    let n = ball(idx(|t| t.negative));
    let dp = tape.sq_dist(a, p, k);
    let dn = tape.sq_dist(a, n, k);
    // −d²(a,n) − (−d²(a,p)) + m
    let margin = tape.weighted_sum(&[(dp, 1.0), (dn, -1.0)], group.margin);
    let h = tape.hinge(margin);
    tape.mean(h)
}

/// `L_CF + α·L_SI` on the tape from the final tangent embeddings `emb`.
/// `groups[0]` holds the interaction triplets; the rest are side relations.
/// Empty groups contribute 0; an entirely empty batch yields a constant 0.
pub fn batch_loss<T: Real>(tape: &mut Tape<T>, emb: Var, groups: &[TripletGroup], alpha: f64, k: f64) -> Var {
    let mut terms = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        if g.triplets.is_empty() {
            continue;
        }
        let l = group_loss(tape, emb, g, k);
        terms.push((l, if gi == 0 { 1.0 } else { alpha }));
    }
    if terms.is_empty() {
        return tape.constant(Mat::scalar(T::zero()));
    }
    tape.weighted_sum(&terms, 0.0)
}
