use std::collections::BTreeSet;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_loss, sample_negative, Adam, NegativeQuery, Sampling, TrainConfig, Triplet, TripletGroup};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{evaluate, head_tail_partition, EvalInput, RankingReport};
use crate::hcg::{Hcg, SplitDataset, INTERACTION_REL, ITEM_TYPE, USER_TYPE};
use crate::mat::Mat;
use crate::model::{to_ball, Model, ModelConfig, ModelParams};

/// Cut-off of the validation metrics that drive early stopping.
const VALIDATION_K: usize = 10;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall: f64,
    #[serde(rename = "val_ndcg@10")]
    pub val_ndcg: f64,
    pub wall_ms: u64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub best_val_recall: f64,
    pub history: Vec<EpochLog>,
    /// Stopped by patience rather than by `max_epochs`.
    pub stopped_early: bool,
}

/// Which held-out interactions to rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Relevant: validation; hidden: train.
    Validation,
    /// Relevant: test; hidden: train and validation.
    Test,
}
crate::model::string_enum!(EvalSplit { Validation => "validation", Test => "test" });

struct EvalSets {
    exclude: Vec<BTreeSet<usize>>,
    relevant: Vec<BTreeSet<usize>>,
    is_head: Vec<bool>,
}

fn eval_sets(dataset: &SplitDataset, split: EvalSplit) -> EvalSets {
    let (nu, ni) = (dataset.hcg.num_users(), dataset.hcg.num_items());
    let mut exclude = vec![BTreeSet::new(); nu];
    let mut relevant = vec![BTreeSet::new(); nu];
    let mut degree = vec![0usize; ni];
    for &(u, i) in &dataset.train {
        exclude[u].insert(i);
        degree[i] += 1;
    }
    let held = match split {
        EvalSplit::Validation => &dataset.validation,
        EvalSplit::Test => {
            for &(u, i) in &dataset.validation {
                exclude[u].insert(i);
            }
            &dataset.test
        }
    };
    for &(u, i) in held {
        relevant[u].insert(i);
    }
    EvalSets {
        exclude,
        relevant,
        is_head: head_tail_partition(&degree),
    }
}

fn block(m: &Mat, rows: Range<usize>) -> Mat {
    let c = m.cols;
    Mat::from_vec(rows.len(), c, m.data[rows.start * c..rows.end * c].to_vec())
}

fn rank(model: &Model, graph: &Hcg, params: &ModelParams, sets: &EvalSets, ks: &[usize]) -> Result<RankingReport> {
    let ball = to_ball(&model.final_embeddings(params)?, model.config().scoring_curvature)?;
    let users = &graph.node_types()[USER_TYPE];
    let items = &graph.node_types()[ITEM_TYPE];
    let u = block(&ball, users.offset..users.offset + users.count);
    let i = block(&ball, items.offset..items.offset + items.count);
    evaluate(
        &EvalInput {
            users: &u,
            items: &i,
            k: model.config().scoring_curvature,
            exclude: &sets.exclude,
            relevant: &sets.relevant,
            is_head: &sets.is_head,
        },
        ks,
    )
}

/// Full-ranking report of `params` on one held-out split.
pub fn evaluate_params(
    dataset: &SplitDataset,
    model: &Model,
    params: &ModelParams,
    split: EvalSplit,
    ks: &[usize],
) -> Result<RankingReport> {
    rank(model, &dataset.hcg, params, &eval_sets(dataset, split), ks)
}

/// Positive edges of one trained relation, with the anchor side chosen per
/// edge at sampling time.
struct RelationPlan {
    relation: usize,
    name: String,
    margin: f64,
    /// Global `(a, b)` endpoints; `a` is the anchor unless `either_anchor`.
    edges: Vec<(usize, usize)>,
    either_anchor: bool,
    pool: Range<usize>,
}

/// Training state bound to one dataset and configuration.
pub struct Trainer<'a> {
    dataset: &'a SplitDataset,
    model: Model,
    config: TrainConfig,
    /// Train positives per relation, indexed by relation then global node.
    positives: Vec<Vec<BTreeSet<usize>>>,
    plans: Vec<RelationPlan>,
    validation: EvalSets,
}

impl<'a> Trainer<'a> {
    /// Validates both configurations and builds the model over the training graph.
    pub fn new(dataset: &'a SplitDataset, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::EmptyGraph("no training interactions".into()));
        }
        let graph = dataset.train_graph()?;
        let model = Model::new(&graph, model_config)?;
        let types = graph.node_types();
        let range = |t: usize| types[t].offset..types[t].offset + types[t].count;

        let mut plans = vec![RelationPlan {
            relation: INTERACTION_REL,
            name: graph.relation(INTERACTION_REL).kind.name.clone(),
            margin: config.margin,
            edges: dataset
                .train
                .iter()
                .map(|&(u, i)| (graph.global(USER_TYPE, u), graph.global(ITEM_TYPE, i)))
                .collect(),
            either_anchor: false,
            pool: range(ITEM_TYPE),
        }];
        if model.config().fusion.uses_side_information() {
            for r in 1..graph.relations().len() {
                let rel = graph.relation(r);
                if rel.edges.is_empty() {
                    continue;
                }
                let (s, d) = (rel.kind.src_type, rel.kind.dst_type);
                let glob = |&(a, b): &(usize, usize)| (graph.global(s, a), graph.global(d, b));
                // heterogeneous: the lower type index anchors, negatives from the other type
                let edges = rel
                    .edges
                    .iter()
                    .map(|e| {
                        let (ga, gb) = glob(e);
                        if d < s {
                            (gb, ga)
                        } else {
                            (ga, gb)
                        }
                    })
                    .collect();
                plans.push(RelationPlan {
                    relation: r,
                    name: rel.kind.name.clone(),
                    margin: config.margin_for(&rel.kind.name),
                    edges,
                    either_anchor: s == d,
                    pool: range(s.max(d)),
                });
            }
        }
        let mut positives = vec![Vec::new(); graph.relations().len()];
        for p in &plans {
            positives[p.relation] = graph.positives(p.relation);
        }
        Ok(Trainer {
            dataset,
            model,
            config,
            positives,
            plans,
            validation: eval_sets(dataset, EvalSplit::Validation),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Positive edges of every trained relation, interaction first.
    #[cfg(test)]
    pub(super) fn plan_edges(&self) -> Vec<Vec<(usize, usize)>> {
        self.plans.iter().map(|p| p.edges.clone()).collect()
    }

    /// Samples one negative per positive of every plan. Each positive draws from
    /// its own stream of `seed`, so the result does not depend on thread count.
    /// Anchors without any admissible negative are skipped.
    pub(super) fn sample_groups(&self, chunks: &[&[(usize, usize)]], ball: Option<&Mat>, seed: u64) -> Vec<TripletGroup> {
        let k = self.model.config().scoring_curvature.get();
        let n_neg = self.config.effective_n_neg();
        let empty = Mat::zeros(0, 0);
        let ball = ball.unwrap_or(&empty);
        self.plans
            .iter()
            .zip(chunks)
            .enumerate()
            .map(|(gi, (plan, chunk))| {
                let triplets: Vec<Triplet> = chunk
                    .par_iter()
                    .enumerate()
                    .filter_map(|(t, &(a, b))| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(((gi as u64) << 40) | t as u64);
                        let (anchor, positive) = if plan.either_anchor && rng.random::<bool>() { (b, a) } else { (a, b) };
                        let query = NegativeQuery {
                            relation: &plan.name,
                            anchor,
                            pool: plan.pool.clone(),
                            positives: &self.positives[plan.relation][anchor],
                        };
                        match sample_negative(&query, ball, k, n_neg, &mut rng) {
                            Ok(negative) => Some(Triplet {
                                relation: plan.relation,
                                anchor,
                                positive,
                                negative,
                            }),
                            Err(_) => None,
                        }
                    })
                    .collect();
                TripletGroup {
                    relation: plan.relation,
                    margin: plan.margin,
                    triplets,
                }
            })
            .collect()
    }

    fn dump(&self, groups: &[TripletGroup]) -> Vec<(String, usize, usize, usize)> {
        let graph = &self.dataset.hcg;
        groups
            .iter()
            .flat_map(|g| {
                let name = graph.relation(g.relation).kind.name.clone();
                g.triplets.iter().map(move |t| (name.clone(), t.anchor, t.positive, t.negative))
            })
            .collect()
    }

    /// One optimizer step on a batch; returns the batch loss.
    fn step(
        &self,
        params: &mut ModelParams,
        adam: &mut Adam,
        chunks: &[&[(usize, usize)]],
        seed: u64,
        at: (usize, usize),
    ) -> Result<f64> {
        let k = self.model.config().scoring_curvature;
        let mut tape = Tape::<f64>::new();
        let vars = self.model.bind(&mut tape, params);
        let emb = self.model.forward(&mut tape, &vars)?;
        let ball = match self.config.sampling {
            Sampling::Hyperbolic if self.config.n_neg > 1 => Some(to_ball(tape.value(emb), k)?),
            _ => None,
        };
        let groups = self.sample_groups(chunks, ball.as_ref(), seed);
        let loss = batch_loss(&mut tape, emb, &groups, self.config.alpha, k.get());
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: at.0,
                batch: at.1,
                triplets: self.dump(&groups),
            });
        }
        let grads = tape.backward(loss)?;
        let leaves = vars.all();
        let g: Vec<Option<&Mat>> = leaves.iter().map(|&v| grads.get(v)).collect();
        let mut refs: Vec<&mut Mat> = std::iter::once(&mut params.embeddings)
            .chain(params.gates.iter_mut().map(|g| &mut g.weight))
            .collect();
        adam.update(&mut refs, &g);
        Ok(value)
    }

    /// Trains until `max_epochs` or until validation NDCG@10 has not improved for
    /// `patience` epochs. `on_epoch` sees every log line as it is produced.
    pub fn run(&self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = self.model.init_params(&mut rng);
        let shapes: Vec<(usize, usize)> = std::iter::once(params.embeddings.shape())
            .chain(params.gates.iter().map(|g| g.weight.shape()))
            .collect();
        let mut adam = Adam::new(&shapes, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        let mut edges: Vec<Vec<(usize, usize)>> = self.plans.iter().map(|p| p.edges.clone()).collect();

        let mut history = Vec::new();
        let mut best = (f64::NEG_INFINITY, 0.0, 0usize, params.clone());
        let mut since_best = 0;
        let mut stopped_early = false;
        for epoch in 1..=cfg.max_epochs {
            let start = Instant::now();
            for e in edges.iter_mut() {
                e.shuffle(&mut rng);
            }
            let n_batches = edges[0].len().div_ceil(cfg.batch_size).max(1);
            let mut total = 0.0;
            for b in 0..n_batches {
                let chunks: Vec<&[(usize, usize)]> = edges
                    .iter()
                    .enumerate()
                    .map(|(gi, e)| {
                        if gi == 0 {
                            &e[(b * cfg.batch_size).min(e.len())..((b + 1) * cfg.batch_size).min(e.len())]
                        } else {
                            &e[b * e.len() / n_batches..(b + 1) * e.len() / n_batches]
                        }
                    })
                    .collect();
                let seed = rng.random::<u64>();
                total += self.step(&mut params, &mut adam, &chunks, seed, (epoch, b))?;
            }
            let report = rank(&self.model, &self.dataset.hcg, &params, &self.validation, &[VALIDATION_K])?;
            let log = EpochLog {
                epoch,
                train_loss: total / n_batches as f64,
                val_recall: report.recall(VALIDATION_K),
                val_ndcg: report.ndcg(VALIDATION_K),
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_epoch(&log);
            if log.val_ndcg > best.0 {
                best = (log.val_ndcg, log.val_recall, epoch, params.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            history.push(log);
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        let (best_val_ndcg, best_val_recall, best_epoch, params) = best;
        Ok(TrainOutcome {
            model: self.model.clone(),
            params,
            best_epoch,
            best_val_ndcg,
            best_val_recall,
            history,
            stopped_early,
        })
    }
}

/// Trains with default logging to the `log` facade.
pub fn train(dataset: &SplitDataset, model_config: ModelConfig, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, model_config, config)?.run(|l| {
        log::info!(
            "epoch {} loss {:.6} val ndcg@10 {:.4} recall@10 {:.4}",
            l.epoch,
            l.train_loss,
            l.val_ndcg,
            l.val_recall
        )
    })
}
