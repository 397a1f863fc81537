use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Hcg;
use crate::error::Result;

const TEST_FRACTION: f64 = 0.2;
const VALIDATION_FRACTION: f64 = 0.1;

/// Interaction split over a graph whose side relations stay whole.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    /// Graph with every interaction.
    pub hcg: Hcg,
    /// Optimized training interactions `(user, item)`, local indices.
    pub train: Vec<(usize, usize)>,
    /// Held out from the training portion for early stopping.
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl SplitDataset {
    /// Graph used for message passing during training: side relations plus the
    /// optimized training interactions.
    pub fn train_graph(&self) -> Result<Hcg> {
        self.hcg.with_interactions(self.train.clone())
    }

    /// Training portion before the validation carve-out.
    pub fn train_portion(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<_> = self.train.iter().chain(&self.validation).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Per-user 8:2 train/test split, then 10% of the training portion drawn
/// uniformly as validation. Every user keeps at least one optimized training
/// edge. Deterministic in `seed`.
pub fn split(hcg: &Hcg, seed: u64) -> Result<SplitDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); hcg.num_users()];
    for &(u, i) in hcg.interactions() {
        per_user[u].push(i);
    }

    let mut portion = Vec::new();
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        items.sort_unstable();
        items.shuffle(&mut rng);
        let n = items.len();
        let n_test = ((TEST_FRACTION * n as f64).round() as usize).min(n.saturating_sub(1));
        test.extend(items[..n_test].iter().map(|&i| (u, i)));
        portion.extend(items[n_test..].iter().map(|&i| (u, i)));
    }

    let n_val = (VALIDATION_FRACTION * portion.len() as f64).round() as usize;
    let mut remaining = vec![0usize; hcg.num_users()];
    for &(u, _) in &portion {
        remaining[u] += 1;
    }
    let mut order: Vec<usize> = (0..portion.len()).collect();
    order.shuffle(&mut rng);
    let mut held = vec![false; portion.len()];
    let mut taken = 0;
    for idx in order {
        if taken == n_val {
            break;
        }
        let u = portion[idx].0;
        if remaining[u] > 1 {
            remaining[u] -= 1;
            held[idx] = true;
            taken += 1;
        }
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (e, h) in portion.into_iter().zip(held) {
        if h {
            validation.push(e);
        } else {
            train.push(e);
        }
    }
    test.sort_unstable();
    Ok(SplitDataset {
        hcg: hcg.clone(),
        train,
        validation,
        test,
    })
}
