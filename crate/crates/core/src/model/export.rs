use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{string_enum, to_ball, Model, ModelParams};
use crate::error::{Error, Result};
use crate::hcg::{Hcg, INTERACTION_REL, ITEM_TYPE};
use crate::mat::Mat;

/// Which embeddings to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Initial embeddings, before graph convolution.
    Initial,
    /// Propagated embeddings used for scoring.
    #[default]
    Final,
}
string_enum!(Stage { Initial => "initial", Final => "final" });

/// Quartile label (1 = least popular … 4 = most popular) for each entry of
/// `degrees`, by rank after sorting on ascending degree with index tie-break.
pub fn popularity_quartiles(degrees: &[usize]) -> Vec<u8> {
    let n = degrees.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (degrees[i], i));
    let mut q = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        q[i] = (rank * 4 / n) as u8 + 1;
    }
    q
}

/// Writes one CSV row per node: raw id, type, popularity quartile (users and
/// items by interaction degree, empty for other types) and the coordinates of
/// the chosen stage in the scoring ball.
pub fn export_embeddings<W: Write>(
    out: &mut W,
    model: &Model,
    graph: &Hcg,
    ids: &[Vec<String>],
    params: &ModelParams,
    stage: Stage,
) -> Result<()> {
    let k = model.config().scoring_curvature;
    let tangent = match stage {
        Stage::Initial => params.embeddings.clone(),
        Stage::Final => model.final_embeddings(params)?,
    };
    let ball: Mat = to_ball(&tangent, k)?;
    let io = |e: std::io::Error| Error::io("<export>", e);

    let mut header = String::from("node_id,type,quartile");
    for j in 0..ball.cols {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (t, nt) in graph.node_types().iter().enumerate() {
        let quartiles = (t <= ITEM_TYPE).then(|| {
            let degrees: Vec<usize> = (0..nt.count)
                .map(|l| graph.degree(INTERACTION_REL, nt.offset + l))
                .collect();
            popularity_quartiles(&degrees)
        });
        for l in 0..nt.count {
            let id = ids.get(t).and_then(|v| v.get(l)).cloned().unwrap_or_else(|| l.to_string());
            let mut line = format!("{id},{}", nt.name);
            match &quartiles {
                Some(q) => line.push_str(&format!(",Q{}", q[l])),
                None => line.push(','),
            }
            for x in ball.row(nt.offset + l) {
                line.push_str(&format!(",{x}"));
            }
            writeln!(out, "{line}").map_err(io)?;
        }
    }
    Ok(())
}
