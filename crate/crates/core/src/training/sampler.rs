use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::dist_raw;
use crate::mat::Mat;

/// Below this fraction of admissible candidates the pool is enumerated
/// instead of sampled by rejection.
const DENSE_FRACTION: f64 = 0.1;

/// Where negatives for one anchor come from.
#[derive(Debug, Clone)]
pub struct NegativeQuery<'a> {
    pub relation: &'a str,
    /// Global index of the anchor.
    pub anchor: usize,
    /// Candidate pool as a global index range (one node-type block).
    pub pool: Range<usize>,
    /// Train positives of the anchor in this relation (global indices).
    pub positives: &'a BTreeSet<usize>,
}

impl NegativeQuery<'_> {
    fn excluded(&self, c: usize) -> bool {
        c == self.anchor || self.positives.contains(&c)
    }

    fn admissible(&self) -> usize {
        let blocked = self.positives.range(self.pool.clone()).count()
            + usize::from(self.pool.contains(&self.anchor) && !self.positives.contains(&self.anchor));
        self.pool.len() - blocked
    }
}

/// Draws `n_neg` candidates uniformly (with replacement) from the pool minus
/// the anchor's positives and returns the one nearest to the anchor in the
/// scoring ball. Ties keep the earliest draw.
///
/// `ball` holds scoring-ball coordinates for every node (global rows). With
/// `n_neg = 1` no distance is computed.
pub fn sample_negative<R: Rng + ?Sized>(
    query: &NegativeQuery<'_>,
    ball: &Mat,
    k: f64,
    n_neg: usize,
    rng: &mut R,
) -> Result<usize> {
    assert!(n_neg >= 1, "n_neg must be ≥ 1");
    let admissible = query.admissible();
    if admissible == 0 {
        return Err(Error::SamplingExhausted {
            relation: query.relation.to_owned(),
            anchor: query.anchor,
        });
    }
    let dense = (admissible as f64) < DENSE_FRACTION * query.pool.len() as f64;
    let complement: Vec<usize> = if dense {
        query.pool.clone().filter(|&c| !query.excluded(c)).collect()
    } else {
        Vec::new()
    };
    let mut draw = || {
        if dense {
            complement[rng.random_range(0..complement.len())]
        } else {
            loop {
                let c = rng.random_range(query.pool.clone());
                if !query.excluded(c) {
                    break c;
                }
            }
        }
    };
    if n_neg == 1 {
        return Ok(draw());
    }
    let anchor = ball.row(query.anchor);
    let mut best = usize::MAX;
    let mut best_dist = f64::INFINITY;
    for _ in 0..n_neg {
        let c = draw();
        let d = dist_raw(anchor, ball.row(c), k);
        if d < best_dist || best == usize::MAX {
            best_dist = d;
            best = c;
        }
    }
    Ok(best)
}
