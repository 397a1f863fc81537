use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, Triplet, TripletGroup};
use crate::autodiff::{GradCheck, GradCheckReport, Primitive, Tape, Var};
use crate::error::{Error, Result};
use crate::hcg::{Hcg, INTERACTION_REL};
use crate::mat::Mat;
use crate::model::{Model, ModelConfig, ModelParams, ParamVars};
use crate::real::Real;
use crate::synthetic::toy_graph;

/// Hinge inputs closer than this to zero make a parameter draw unusable.
const KINK_CLEARANCE: f64 = 1e-3;
const MAX_DRAWS: u64 = 1000;
/// Unusable draws in a row before the embedding half-width is halved.
const DRAWS_PER_SCALE: u64 = 100;

/// Settings of a full-model gradient check on the six-node toy graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradCheck {
    pub model: ModelConfig,
    pub margin: f64,
    pub alpha: f64,
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    /// Half-width of the uniform embedding draw (see [`model_grad_check`]).
    pub scale: f64,
    #[serde(skip)]
    pub fault: Option<Primitive>,
}

impl ModelGradCheck {
    /// Double precision: `h = 1e-6`, tolerance `1e-4`.
    pub fn float64(model: ModelConfig) -> Self {
        ModelGradCheck {
            model,
            margin: 0.1,
            alpha: 0.01,
            seed: 0,
            h: 1e-6,
            tol: 1e-4,
            scale: 0.5,
            fault: None,
        }
    }

    /// Single-precision adjoints: tolerance `1e-2`.
    pub fn float32(model: ModelConfig) -> Self {
        ModelGradCheck {
            tol: 1e-2,
            ..Self::float64(model)
        }
    }
}

/// Every positive paired with the first admissible negative: interaction
/// anchors are users with item negatives, side anchors are the lower node type
/// with negatives of the other type.
fn toy_triplets(graph: &Hcg, model: &Model, margin: f64) -> Vec<TripletGroup> {
    let types = graph.node_types();
    let mut groups = Vec::new();
    for r in model.subspace_relations() {
        let rel = graph.relation(r);
        let (s, d) = (rel.kind.src_type, rel.kind.dst_type);
        let positives = graph.positives(r);
        let pool = types[s.max(d)].offset..types[s.max(d)].offset + types[s.max(d)].count;
        let triplets = rel
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                let (ga, gb) = (graph.global(s, a), graph.global(d, b));
                let (anchor, positive) = if d < s { (gb, ga) } else { (ga, gb) };
                let negative = pool.clone().find(|&c| c != anchor && !positives[anchor].contains(&c))?;
                Some(Triplet {
                    relation: r,
                    anchor,
                    positive,
                    negative,
                })
            })
            .collect();
        groups.push(TripletGroup {
            relation: r,
            margin,
            triplets,
        });
    }
    debug_assert_eq!(groups[0].relation, INTERACTION_REL);
    groups
}

fn leaves(params: &ModelParams) -> Vec<Mat> {
    std::iter::once(params.embeddings.clone())
        .chain(params.gates.iter().map(|g| g.weight.clone()))
        .collect()
}

fn loss_graph<T: Real>(model: &Model, groups: &[TripletGroup], alpha: f64, k: f64, tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let pv = ParamVars {
        embeddings: vars[0],
        gates: vars[1..].to_vec(),
    };
    let emb = model.forward(tape, &pv)?;
    Ok(batch_loss(tape, emb, groups, alpha, k))
}

/// Compares the reverse-mode gradient of the full training loss (propagation,
/// fusion, scoring and both hinge losses) with central differences at random
/// parameters. Parameter draws are repeated until every hinge input is at
/// least 1e-3 from its kink and at least one hinge is active. Every 100
/// unusable draws halve the embedding half-width, which pulls negatives inside
/// the margin. The differences are always taken in double precision; `T` is the
/// precision of the adjoint pass under test.
pub fn model_grad_check<T: Real>(setup: &ModelGradCheck) -> Result<GradCheckReport> {
    let graph = toy_graph();
    let model = Model::new(&graph, setup.model.clone())?;
    let groups = toy_triplets(&graph, &model, setup.margin);
    let k = setup.model.scoring_curvature.get();
    let alpha = setup.alpha;
    let build = |tape: &mut Tape<T>, vars: &[Var]| loss_graph(&model, &groups, alpha, k, tape, vars);
    let reference = |tape: &mut Tape<f64>, vars: &[Var]| loss_graph(&model, &groups, alpha, k, tape, vars);

    for draw in 0..MAX_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed.wrapping_add(draw));
        let mut params = model.init_params(&mut rng);
        let (rows, cols) = params.embeddings.shape();
        let scale = setup.scale / 2f64.powi((draw / DRAWS_PER_SCALE) as i32);
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
        params.embeddings = Mat::from_vec(rows, cols, data);
        let values = leaves(&params);

        let mut tape = Tape::<f64>::new();
        let vars: Vec<_> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = loss_graph(&model, &groups, alpha, k, &mut tape, &vars)?;
        if tape.hinge_kink_distance() < KINK_CLEARANCE || !(tape.value(loss).item() > 0.0) {
            continue;
        }
        let cast: Vec<Mat<T>> = values.iter().map(|m| m.cast()).collect();
        let check = GradCheck {
            h: setup.h,
            tol: setup.tol,
            fault: setup.fault,
        };
        return check.run_mixed(&cast, build, reference);
    }
    Err(Error::invalid(format!(
        "no parameter draw in {MAX_DRAWS} keeps every hinge {KINK_CLEARANCE} away from its kink"
    )))
}
