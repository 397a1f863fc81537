//! Hyperbolic graph convolution over an HCG: embedding initialization,
//! per-subspace neighbor aggregation, multi-space fusion, skip aggregation and
//! distance-based scoring.

mod checkpoint;
mod export;
mod forward;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, exp_o, Curvature, TangentVec};
use crate::hcg::{Hcg, INTERACTION_REL, ITEM_TYPE};
use crate::mat::Mat;

pub use checkpoint::Checkpoint;
pub use export::{export_embeddings, popularity_quartiles, Stage};
pub use forward::{Model, ParamVars};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err($crate::error::Error::Config(format!(
                        "unknown {} `{s}`; expected one of: {}",
                        stringify!($name).to_lowercase(),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}
pub(crate) use string_enum;

/// How per-subspace outputs are combined into one tangent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Interaction subspace only; side relations are ignored.
    None,
    Gate,
    Prior,
    #[default]
    GatePrior,
}
string_enum!(Fusion { None => "none", Gate => "gate", Prior => "prior", GatePrior => "gate_prior" });

impl Fusion {
    pub fn uses_side_information(self) -> bool {
        self != Fusion::None
    }

    pub fn has_gates(self) -> bool {
        matches!(self, Fusion::Gate | Fusion::GatePrior)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Gyromidpoint inside each subspace ball.
    #[default]
    Gyromidpoint,
    /// Mean of tangent vectors at the origin.
    Tangent,
}
string_enum!(Aggregation { Gyromidpoint => "gyromidpoint", Tangent => "tangent" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Uniform,
    /// Half-width `a · x⁻ᵇ` for a node of frequency `x`.
    #[default]
    PowerLaw,
}
string_enum!(Init { Uniform => "uniform", PowerLaw => "power_law" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    /// Curvature of every aggregation subspace without an override.
    pub curvature: Curvature,
    /// Per-relation curvature overrides, keyed by relation name.
    pub relation_curvature: BTreeMap<String, Curvature>,
    pub scoring_curvature: Curvature,
    pub init_scale: f64,
    pub power_law_b: f64,
    pub fusion: Fusion,
    pub aggregation: Aggregation,
    pub init: Init,
    /// Adds the initial embedding to the skip sum.
    pub include_layer0: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 3,
            curvature: Curvature::ONE,
            relation_curvature: BTreeMap::new(),
            scoring_curvature: Curvature::ONE,
            init_scale: 0.1,
            power_law_b: 1.1,
            fusion: Fusion::default(),
            aggregation: Aggregation::default(),
            init: Init::default(),
            include_layer0: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model.dim must be ≥ 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("model.layers must be ≥ 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "model.init_scale must be > 0, got {}",
                self.init_scale
            )));
        }
        if !(self.power_law_b >= 0.0 && self.power_law_b.is_finite()) {
            return Err(Error::Config(format!(
                "model.power_law_b must be ≥ 0, got {}",
                self.power_law_b
            )));
        }
        Ok(())
    }

    pub fn subspace_curvature(&self, relation: &str) -> Curvature {
        self.relation_curvature
            .get(relation)
            .copied()
            .unwrap_or(self.curvature)
    }
}

/// Gate matrix for one (node type, subspace) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParam {
    pub node_type: String,
    pub relation: String,
    /// `d × d`, applied to the unit-normalized initial embedding.
    pub weight: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `|nodes| × d` tangent-space embeddings at the origin.
    pub embeddings: Mat,
    pub gates: Vec<GateParam>,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.embeddings.len() + self.gates.iter().map(|g| g.weight.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.gates.iter().all(|g| g.weight.is_finite())
    }
}

/// Popularity of every node: interaction degree for users and items, total
/// side-relation degree for every other type.
pub fn node_frequencies(graph: &Hcg) -> Vec<usize> {
    (0..graph.num_nodes())
        .map(|n| {
            if graph.node_type_of(n) <= ITEM_TYPE {
                graph.degree(INTERACTION_REL, n)
            } else {
                (1..graph.relations().len()).map(|r| graph.degree(r, n)).sum()
            }
        })
        .collect()
}

/// Half-width of the initialization interval for a node of frequency `x`
/// (clamped to at least 1).
pub fn init_half_width(config: &ModelConfig, x: usize) -> f64 {
    match config.init {
        Init::Uniform => config.init_scale,
        Init::PowerLaw => config.init_scale * (x.max(1) as f64).powf(-config.power_law_b),
    }
}

/// Samples `|frequencies| × d` embeddings coordinate-wise from
/// `Uni(−w, w)` with `w` from [`init_half_width`].
pub fn init_embeddings<R: Rng + ?Sized>(config: &ModelConfig, frequencies: &[usize], rng: &mut R) -> Mat {
    let zeros = frequencies.iter().filter(|&&x| x == 0).count();
    if zeros > 0 && config.init == Init::PowerLaw {
        log::warn!("{zeros} nodes have zero frequency; clamped to 1 for initialization");
    }
    let d = config.dim;
    let mut data = Vec::with_capacity(frequencies.len() * d);
    for &x in frequencies {
        let w = init_half_width(config, x);
        data.extend((0..d).map(|_| rng.random_range(-w..=w)));
    }
    Mat::from_vec(frequencies.len(), d, data)
}

/// Symmetric fan-based uniform initialization of an `n × n` matrix.
pub fn xavier<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let bound = (6.0 / (2 * n) as f64).sqrt();
    Mat::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// `−dist(exp_o(e_i), exp_o(e_j))²` in the scoring ball.
pub fn score(e_i: &[f64], e_j: &[f64], k: Curvature) -> Result<f64> {
    let a = exp_o(&TangentVec(e_i.to_vec()), k);
    let b = exp_o(&TangentVec(e_j.to_vec()), k);
    let d = dist(&a, &b, k)?;
    Ok(-d * d)
}

/// Row-wise exponential map of tangent embeddings into the ball of curvature `k`.
pub fn to_ball(tangent: &Mat, k: Curvature) -> Result<Mat> {
    let mut out = Vec::with_capacity(tangent.len());
    for i in 0..tangent.rows {
        out.extend(exp_o(&TangentVec(tangent.row(i).to_vec()), k).into_coords());
    }
    Ok(Mat::from_vec(tangent.rows, tangent.cols, out))
}
