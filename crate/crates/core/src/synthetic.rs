//! Small generated graphs for tests, diagnostics and trend experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::hcg::{Hcg, Relation, RelationType, SplitDataset};

/// Six nodes, two relations: users {0, 1} each with one item, and categories
/// {0, 1} where category 0 holds both items and category 1 holds item 1.
/// Global order: users 0–1, items 2–3, categories 4–5.
pub fn toy_graph() -> Hcg {
    Hcg::new(
        vec![("user".into(), 2), ("item".into(), 2), ("category".into(), 2)],
        vec![
            Relation {
                kind: RelationType::new("interaction", 0, 1),
                edges: vec![(0, 0), (1, 1)],
            },
            Relation {
                kind: RelationType::new("category", 2, 1),
                edges: vec![(0, 0), (0, 1), (1, 1)],
            },
        ],
    )
    .expect("toy graph is valid")
}

/// Shape of a generated power-law dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawSpec {
    pub users: usize,
    pub items: usize,
    /// Zipf exponent of item popularity.
    pub exponent: f64,
    /// Interactions per user are drawn uniformly from this inclusive range.
    pub per_user: (usize, usize),
    /// Latent clusters shared by users, items and categories.
    pub clusters: usize,
    /// Probability that an interaction stays inside the user's cluster.
    pub affinity: f64,
}

impl Default for PowerLawSpec {
    fn default() -> Self {
        PowerLawSpec {
            users: 500,
            items: 800,
            exponent: 1.1,
            per_user: (8, 40),
            clusters: 10,
            affinity: 0.8,
        }
    }
}

/// Bipartite interactions with Zipf-distributed item popularity and clustered
/// preferences, plus a `category` side relation assigning each item to its
/// cluster. Every user and item has at least one interaction. Deterministic in
/// `seed`.
pub fn power_law_graph(spec: &PowerLawSpec, seed: u64) -> Result<Hcg> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nu, ni, nc) = (spec.users, spec.items, spec.clusters.max(1));
    let cluster_of_item: Vec<usize> = (0..ni).map(|i| i % nc).collect();
    // Zipf weights over a random popularity order
    let mut rank: Vec<usize> = (0..ni).collect();
    for i in (1..ni).rev() {
        rank.swap(i, rng.random_range(0..=i));
    }
    let weight: Vec<f64> = (0..ni).map(|i| ((rank[i] + 1) as f64).powf(-spec.exponent)).collect();
    let cumulative = |items: &[usize]| {
        let mut acc = 0.0;
        items
            .iter()
            .map(|&i| {
                acc += weight[i];
                acc
            })
            .collect::<Vec<f64>>()
    };
    let all: Vec<usize> = (0..ni).collect();
    let by_cluster: Vec<Vec<usize>> = (0..nc)
        .map(|c| all.iter().copied().filter(|&i| cluster_of_item[i] == c).collect())
        .collect();
    let cum_all = cumulative(&all);
    let cum_cluster: Vec<Vec<f64>> = by_cluster.iter().map(|v| cumulative(v)).collect();
    let draw = |rng: &mut ChaCha8Rng, pool: &[usize], cum: &[f64]| {
        let x = rng.random::<f64>() * cum[cum.len() - 1];
        pool[cum.partition_point(|&c| c < x).min(pool.len() - 1)]
    };

    let mut edges = Vec::new();
    for u in 0..nu {
        let c = u % nc;
        let n = rng.random_range(spec.per_user.0..=spec.per_user.1).min(ni);
        let mut chosen = std::collections::BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < n && attempts < 50 * n {
            attempts += 1;
            let i = if rng.random::<f64>() < spec.affinity && !by_cluster[c].is_empty() {
                draw(&mut rng, &by_cluster[c], &cum_cluster[c])
            } else {
                draw(&mut rng, &all, &cum_all)
            };
            chosen.insert(i);
        }
        edges.extend(chosen.into_iter().map(|i| (u, i)));
    }
    // items never drawn get one interaction from a user of their cluster
    let mut seen = vec![false; ni];
    for &(_, i) in &edges {
        seen[i] = true;
    }
    for i in (0..ni).filter(|&i| !seen[i]) {
        let c = cluster_of_item[i];
        let members = nu.saturating_sub(c).div_ceil(nc).max(1);
        let u = (c + nc * rng.random_range(0..members)).min(nu - 1);
        edges.push((u, i));
    }
    Hcg::new(
        vec![("user".into(), nu), ("item".into(), ni), ("category".into(), nc)],
        vec![
            Relation {
                kind: RelationType::new("interaction", 0, 1),
                edges,
            },
            Relation {
                kind: RelationType::new("category", 2, 1),
                edges: (0..ni).map(|i| (cluster_of_item[i], i)).collect(),
            },
        ],
    )
}

/// Split of [`power_law_graph`] with identity raw ids.
pub fn power_law_dataset(spec: &PowerLawSpec, seed: u64) -> Result<SplitDataset> {
    let g = power_law_graph(spec, seed)?;
    crate::hcg::split(&g, seed)
}
