//! Full-ranking top-K evaluation with head/tail item strata.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist_raw, Curvature};
use crate::mat::Mat;
use crate::model::string_enum;

/// Default cut-offs.
pub const DEFAULT_KS: [usize; 2] = [10, 20];
/// Fraction of items (by descending train degree) in the head stratum.
pub const HEAD_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stratum {
    #[serde(rename = "all")]
    All,
    H20,
    T80,
}
string_enum!(Stratum { All => "all", H20 => "H20", T80 => "T80" });

/// Items other than `exclude`, by descending score; ties go to the lower index.
pub fn rank_items(scores: &[f64], exclude: &BTreeSet<usize>) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

fn hits_at_k<'a>(ranked: &'a [usize], relevant: &'a BTreeSet<usize>, k: usize) -> impl Iterator<Item = usize> + 'a {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, i)| relevant.contains(i))
        .map(|(pos, _)| pos)
}

/// `|top-K ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be ≥ 1");
    if relevant.is_empty() {
        return None;
    }
    Some(hits_at_k(ranked, relevant, k).count() as f64 / relevant.len() as f64)
}

fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 2) as f64).log2()
}

/// Binary-relevance NDCG@K; `None` when nothing is relevant.
pub fn ndcg_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be ≥ 1");
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = hits_at_k(ranked, relevant, k).map(discount).sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Some(dcg / idcg)
}

/// `is_head[i]` for every item: the `⌈0.2·|items|⌉` items of highest degree,
/// ties broken toward the lower index.
pub fn head_tail_partition(degrees: &[usize]) -> Vec<bool> {
    let n = degrees.len();
    let head = (HEAD_FRACTION * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| degrees[b].cmp(&degrees[a]).then(a.cmp(&b)));
    let mut is_head = vec![false; n];
    for &i in &order[..head.min(n)] {
        is_head[i] = true;
    }
    is_head
}

/// One user's metric values for one (K, stratum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetric {
    pub user: usize,
    pub k: usize,
    pub stratum: Stratum,
    pub recall: f64,
    pub ndcg: f64,
}

/// Averages over users with at least one relevant item in the stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub stratum: Stratum,
    pub recall: f64,
    pub ndcg: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub ks: Vec<usize>,
    pub rows: Vec<MetricRow>,
    #[serde(default, skip_serializing)]
    pub per_user: Vec<UserMetric>,
}

impl RankingReport {
    pub fn get(&self, k: usize, stratum: Stratum) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k && r.stratum == stratum)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get(k, Stratum::All).map_or(0.0, |r| r.ndcg)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.get(k, Stratum::All).map_or(0.0, |r| r.recall)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `metric,k,stratum,value` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "metric,k,stratum,value")?;
        for r in &self.rows {
            writeln!(out, "recall,{},{},{}", r.k, r.stratum, r.recall)?;
            writeln!(out, "ndcg,{},{},{}", r.k, r.stratum, r.ndcg)?;
        }
        Ok(())
    }

    /// `user,k,stratum,recall,ndcg` rows for users that count toward each average.
    pub fn write_per_user_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "user,k,stratum,recall,ndcg")?;
        for m in &self.per_user {
            writeln!(out, "{},{},{},{},{}", m.user, m.k, m.stratum, m.recall, m.ndcg)?;
        }
        Ok(())
    }
}

/// Inputs of one evaluation pass. Item indices are local to the item block.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    /// Users' scoring-ball coordinates, one row per user.
    pub users: &'a Mat,
    /// Items' scoring-ball coordinates, one row per item.
    pub items: &'a Mat,
    pub k: Curvature,
    /// Items hidden from each user's ranking.
    pub exclude: &'a [BTreeSet<usize>],
    /// Items to retrieve for each user.
    pub relevant: &'a [BTreeSet<usize>],
    /// Head flag per item (see [`head_tail_partition`]).
    pub is_head: &'a [bool],
}

fn user_metrics(ranked: &[usize], relevant: &BTreeSet<usize>, is_head: &[bool], user: usize, ks: &[usize]) -> Vec<UserMetric> {
    let head: BTreeSet<usize> = relevant.iter().copied().filter(|&i| is_head[i]).collect();
    let tail: BTreeSet<usize> = relevant.iter().copied().filter(|&i| !is_head[i]).collect();
    let mut out = Vec::new();
    for &k in ks {
        for (stratum, rel) in [(Stratum::All, relevant), (Stratum::H20, &head), (Stratum::T80, &tail)] {
            if let (Some(recall), Some(ndcg)) = (recall_at_k(ranked, rel, k), ndcg_at_k(ranked, rel, k)) {
                out.push(UserMetric {
                    user,
                    k,
                    stratum,
                    recall,
                    ndcg,
                });
            }
        }
    }
    out
}

/// Ranks every item for every user with a relevant item and averages
/// recall@K and NDCG@K per stratum. Users run in parallel; the result does not
/// depend on the thread count.
pub fn evaluate(input: &EvalInput<'_>, ks: &[usize]) -> Result<RankingReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("cut-offs must be a non-empty list of values ≥ 1"));
    }
    let (nu, ni) = (input.users.rows, input.items.rows);
    if input.exclude.len() != nu || input.relevant.len() != nu || input.is_head.len() != ni {
        return Err(Error::invalid("evaluation inputs disagree on user or item counts"));
    }
    let k = input.k.get();
    let per_user: Vec<UserMetric> = (0..nu)
        .into_par_iter()
        .filter(|&u| !input.relevant[u].is_empty())
        .flat_map_iter(|u| {
            let hu = input.users.row(u);
            let scores: Vec<f64> = (0..ni)
                .map(|i| {
                    let d = dist_raw(hu, input.items.row(i), k);
                    -d * d
                })
                .collect();
            let ranked = rank_items(&scores, &input.exclude[u]);
            user_metrics(&ranked, &input.relevant[u], input.is_head, u, ks)
        })
        .collect();

    let mut rows = Vec::new();
    for &kk in ks {
        for stratum in Stratum::ALL {
            let sel: Vec<&UserMetric> = per_user.iter().filter(|m| m.k == kk && m.stratum == *stratum).collect();
            let n = sel.len();
            let mean = |f: fn(&UserMetric) -> f64| if n == 0 { 0.0 } else { sel.iter().map(|m| f(m)).sum::<f64>() / n as f64 };
            rows.push(MetricRow {
                k: kk,
                stratum: *stratum,
                recall: mean(|m| m.recall),
                ndcg: mean(|m| m.ndcg),
                users: n,
            });
        }
    }
    Ok(RankingReport {
        ks: ks.to_vec(),
        rows,
        per_user,
    })
}

impl FromStr for RankingReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }
}

impl fmt::Display for RankingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "K={:<3} {:<4} recall={:.5} ndcg={:.5} users={}",
                r.k, r.stratum, r.recall, r.ndcg, r.users
            )?;
        }
        Ok(())
    }
}
