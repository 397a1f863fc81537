use std::sync::Arc;

use rand::Rng;

use super::{init_embeddings, node_frequencies, xavier, Aggregation, Fusion, GateParam, ModelConfig, ModelParams};
use crate::autodiff::{Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::hcg::{Hcg, INTERACTION_REL};
use crate::mat::Mat;
use crate::real::Real;

/// Aggregation subspace for one relation.
#[derive(Debug, Clone)]
struct Subspace {
    relation: usize,
    k: f64,
    /// Participating nodes, ascending global index.
    members: Vec<usize>,
    /// Per member: itself followed by its neighbors in the relation.
    seg: Arc<Segments>,
}

/// Gate evaluation plan for the nodes that take part in two or more subspaces.
#[derive(Debug, Clone)]
struct GatePlan {
    /// Rows of the stacked subspace outputs that need a gate, in stacking order.
    rows: Arc<Vec<usize>>,
    /// Consecutive runs of `rows` sharing a (type, subspace) pair: the nodes of the
    /// run and the gate index.
    blocks: Vec<(Arc<Vec<usize>>, usize)>,
    /// Degree prior per gated row (gate_prior only).
    prior: Option<Vec<f64>>,
    /// Per node: the positions in `rows` that belong to it.
    per_node: Arc<Segments>,
    /// Owning node of each gated row.
    owner: Arc<Vec<usize>>,
}

/// Model bound to a fixed graph: the propagation plan plus the configuration.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    nodes: usize,
    type_names: Vec<String>,
    relation_names: Vec<String>,
    subspaces: Vec<Subspace>,
    /// Maps stacked subspace outputs (or, with gates, outputs followed by gated
    /// rows) onto nodes.
    fuse: Arc<Segments>,
    /// The stacked outputs are already one row per node in node order.
    identity_fusion: bool,
    gate_pairs: Vec<(usize, usize)>,
    gate_plan: Option<GatePlan>,
    frequencies: Vec<usize>,
}

/// Tape handles for the model parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embeddings: Var,
    pub gates: Vec<Var>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        std::iter::once(self.embeddings).chain(self.gates.iter().copied()).collect()
    }
}

impl Model {
    /// Builds the propagation plan over `graph`, the graph used for message
    /// passing (training interactions plus side relations).
    pub fn new(graph: &Hcg, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = graph.num_nodes();
        let relations = graph.relations();
        let active: Vec<usize> = if config.fusion.uses_side_information() {
            (1..relations.len()).filter(|&r| !relations[r].edges.is_empty()).collect()
        } else {
            Vec::new()
        };

        let mut side_member = vec![false; n];
        let mut subspaces = Vec::new();
        let mut side = Vec::new();
        for &r in &active {
            let members: Vec<usize> = (0..n).filter(|&v| graph.degree(r, v) > 0).collect();
            for &v in &members {
                side_member[v] = true;
            }
            side.push((r, members));
        }
        let interaction_members: Vec<usize> = (0..n)
            .filter(|&v| graph.node_type_of(v) <= crate::hcg::ITEM_TYPE || !side_member[v])
            .collect();
        for (r, members) in std::iter::once((INTERACTION_REL, interaction_members)).chain(side) {
            let adj = graph.adjacency(r);
            let lists: Vec<Vec<usize>> = members
                .iter()
                .map(|&v| std::iter::once(v).chain(adj.neighbors(v).iter().copied()).collect())
                .collect();
            let mut seg = Segments::from_lists(&lists);
            if config.aggregation == Aggregation::Tangent {
                let coeff = lists
                    .iter()
                    .flat_map(|l| std::iter::repeat_n(1.0 / l.len() as f64, l.len()))
                    .collect();
                seg = seg.with_coeff(coeff);
            }
            subspaces.push(Subspace {
                relation: r,
                k: config.subspace_curvature(&relations[r].kind.name).get(),
                members,
                seg: Arc::new(seg),
            });
        }

        // rows of the stacked outputs per node: (row, subspace position)
        let mut rows_of: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut row = 0;
        for (si, s) in subspaces.iter().enumerate() {
            for &v in &s.members {
                rows_of[v].push((row, si));
                row += 1;
            }
        }
        let stacked = row;

        let gate_pairs: Vec<(usize, usize)> = if config.fusion.has_gates() {
            subspaces
                .iter()
                .flat_map(|s| {
                    let kind = &relations[s.relation].kind;
                    let mut ts = vec![kind.src_type, kind.dst_type];
                    ts.sort_unstable();
                    ts.dedup();
                    ts.into_iter().map(move |t| (t, s.relation))
                })
                .collect()
        } else {
            Vec::new()
        };

        let degree = |v: usize, si: usize| graph.degree(subspaces[si].relation, v) as f64;
        let prior_weights = |v: usize| -> Vec<f64> {
            let rows = &rows_of[v];
            let total: f64 = rows.iter().map(|&(_, si)| degree(v, si)).sum();
            if total > 0.0 {
                rows.iter().map(|&(_, si)| degree(v, si) / total).collect()
            } else {
                vec![1.0 / rows.len() as f64; rows.len()]
            }
        };

        let multi: Vec<bool> = rows_of.iter().map(|r| r.len() > 1).collect();
        let gated = config.fusion.has_gates() && multi.iter().any(|&m| m);
        let mut gate_plan = None;
        let fuse = if gated {
            // row → gated position, in stacking order
            let mut gate_rows = Vec::new();
            let mut owner = Vec::new();
            let mut pos = vec![usize::MAX; stacked];
            let mut blocks: Vec<(Vec<usize>, usize)> = Vec::new();
            let mut prior = Vec::new();
            let mut row = 0;
            for s in &subspaces {
                for &v in &s.members {
                    if multi[v] {
                        pos[row] = gate_rows.len();
                        gate_rows.push(row);
                        owner.push(v);
                        prior.push(graph.degree(s.relation, v) as f64);
                        let t = graph.node_type_of(v);
                        let gi = gate_pairs
                            .iter()
                            .position(|&p| p == (t, s.relation))
                            .expect("gate pair for every typed member");
                        match blocks.last_mut() {
                            Some((nodes, g)) if *g == gi => nodes.push(v),
                            _ => blocks.push((vec![v], gi)),
                        }
                    }
                    row += 1;
                }
            }
            // nodes whose degrees over all subspaces are zero fall back to a flat prior
            for v in 0..n {
                if multi[v] && rows_of[v].iter().all(|&(r, _)| prior[pos[r]] == 0.0) {
                    for &(r, _) in &rows_of[v] {
                        prior[pos[r]] = 1.0;
                    }
                }
            }
            let per_node: Vec<Vec<usize>> = rows_of
                .iter()
                .map(|rs| if rs.len() > 1 { rs.iter().map(|&(r, _)| pos[r]).collect() } else { Vec::new() })
                .collect();
            let lists: Vec<Vec<usize>> = rows_of
                .iter()
                .map(|rs| match rs.as_slice() {
                    [(r, _)] => vec![*r],
                    _ => rs.iter().map(|&(r, _)| stacked + pos[r]).collect(),
                })
                .collect();
            gate_plan = Some(GatePlan {
                rows: Arc::new(gate_rows),
                blocks: blocks.into_iter().map(|(v, g)| (Arc::new(v), g)).collect(),
                prior: (config.fusion == Fusion::GatePrior).then_some(prior),
                per_node: Arc::new(Segments::from_lists(&per_node)),
                owner: Arc::new(owner),
            });
            Segments::from_lists(&lists)
        } else {
            let lists: Vec<Vec<usize>> = rows_of.iter().map(|rs| rs.iter().map(|&(r, _)| r).collect()).collect();
            let coeff: Vec<f64> = (0..n).flat_map(prior_weights).collect();
            Segments::from_lists(&lists).with_coeff(coeff)
        };
        let identity_fusion = !gated && stacked == n && rows_of.iter().enumerate().all(|(v, r)| r == &[(v, 0)]);

        Ok(Model {
            nodes: n,
            type_names: graph.node_types().iter().map(|t| t.name.clone()).collect(),
            relation_names: relations.iter().map(|r| r.kind.name.clone()).collect(),
            subspaces,
            fuse: Arc::new(fuse),
            identity_fusion,
            gate_pairs,
            gate_plan,
            frequencies: node_frequencies(graph),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes
    }

    /// Node frequencies used by the power-law initializer.
    pub fn frequencies(&self) -> &[usize] {
        &self.frequencies
    }

    /// `(node type, relation)` of every gate matrix, in parameter order.
    pub fn gate_pairs(&self) -> &[(usize, usize)] {
        &self.gate_pairs
    }

    /// Relations that act as aggregation subspaces, in stacking order.
    pub fn subspace_relations(&self) -> Vec<usize> {
        self.subspaces.iter().map(|s| s.relation).collect()
    }

    /// `|nodes| · d + (#gate pairs) · d²`.
    pub fn param_count(&self) -> usize {
        let d = self.config.dim;
        self.nodes * d + self.gate_pairs.len() * d * d
    }

    /// Fresh parameters: embeddings from the configured initializer, then gates.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let embeddings = init_embeddings(&self.config, &self.frequencies, rng);
        let gates = self
            .gate_pairs
            .iter()
            .map(|&(t, r)| GateParam {
                node_type: self.type_names[t].clone(),
                relation: self.relation_names[r].clone(),
                weight: xavier(self.config.dim, rng),
            })
            .collect();
        ModelParams { embeddings, gates }
    }

    /// Checks that `params` fit this model.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let d = self.config.dim;
        if params.embeddings.shape() != (self.nodes, d) {
            return Err(Error::invalid(format!(
                "embeddings are {}x{}, model expects {}x{d}",
                params.embeddings.rows, params.embeddings.cols, self.nodes
            )));
        }
        if params.gates.len() != self.gate_pairs.len() {
            return Err(Error::invalid(format!(
                "{} gate matrices given, model expects {}",
                params.gates.len(),
                self.gate_pairs.len()
            )));
        }
        for (g, &(t, r)) in params.gates.iter().zip(&self.gate_pairs) {
            if g.weight.shape() != (d, d) || g.node_type != self.type_names[t] || g.relation != self.relation_names[r] {
                return Err(Error::invalid(format!(
                    "gate ({}, {}) does not match expected ({}, {}) of size {d}x{d}",
                    g.node_type, g.relation, self.type_names[t], self.relation_names[r]
                )));
            }
        }
        Ok(())
    }

    /// Records the parameters as trainable leaves.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, params: &ModelParams) -> ParamVars {
        ParamVars {
            embeddings: tape.param(params.embeddings.cast()),
            gates: params.gates.iter().map(|g| tape.param(g.weight.cast())).collect(),
        }
    }

    /// Final tangent embeddings of every node (`|nodes| × d`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<Var> {
        let e0 = vars.embeddings;
        if tape.value(e0).shape() != (self.nodes, self.config.dim) || vars.gates.len() != self.gate_pairs.len() {
            return Err(Error::invalid("parameter shapes do not match the model"));
        }
        let gates = self.gate_plan.as_ref().map(|plan| self.gate_weights(tape, vars, plan));

        let mut layers = Vec::with_capacity(self.config.layers + 1);
        if self.config.include_layer0 {
            layers.push(e0);
        }
        let mut prev = e0;
        for _ in 0..self.config.layers {
            let mut balls: Vec<(f64, Var)> = Vec::new();
            let mut outs = Vec::with_capacity(self.subspaces.len());
            for s in &self.subspaces {
                let out = match self.config.aggregation {
                    Aggregation::Gyromidpoint => {
                        let h = match balls.iter().find(|(k, _)| *k == s.k) {
                            Some(&(_, h)) => h,
                            None => {
                                let h = tape.exp_map(prev, s.k);
                                balls.push((s.k, h));
                                h
                            }
                        };
                        let mid = tape.gyromidpoint_segments(h, s.seg.clone(), s.k);
                        tape.log_map(mid, s.k)
                    }
                    Aggregation::Tangent => tape.segment_sum(prev, s.seg.clone()),
                };
                outs.push(out);
            }
            let stacked = if outs.len() == 1 { outs[0] } else { tape.concat(&outs) };
            let fused = match (&gates, &self.gate_plan) {
                (Some(g), Some(plan)) => {
                    let gated_rows = tape.gather(stacked, plan.rows.clone());
                    let weighted = tape.mul(gated_rows, *g);
                    let all = tape.concat(&[stacked, weighted]);
                    tape.segment_sum(all, self.fuse.clone())
                }
                _ if self.identity_fusion => stacked,
                _ => tape.segment_sum(stacked, self.fuse.clone()),
            };
            layers.push(fused);
            prev = fused;
        }
        Ok(if layers.len() == 1 {
            layers[0]
        } else {
            let terms: Vec<(Var, f64)> = layers.iter().map(|&v| (v, 1.0)).collect();
            tape.weighted_sum(&terms, 0.0)
        })
    }

    /// Normalized gate weights for every gated row, computed once per forward
    /// pass from the unit-normalized initial embeddings.
    fn gate_weights<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, plan: &GatePlan) -> Var {
        let e0 = vars.embeddings;
        let zero_rows = {
            let v = tape.value(e0);
            (0..v.rows).filter(|&i| v.row(i).iter().all(|&x| x == T::zero())).count()
        };
        if zero_rows > 0 {
            log::debug!("{zero_rows} zero initial embeddings feed an unnormalized gate input");
        }
        let norm = tape.norm(e0, 1.0);
        let unit = tape.div(e0, norm);
        let parts: Vec<Var> = plan
            .blocks
            .iter()
            .map(|(nodes, gi)| {
                let x = tape.gather(unit, nodes.clone());
                let z = tape.matvec(vars.gates[*gi], x);
                tape.sigmoid(z)
            })
            .collect();
        let mut raw = if parts.len() == 1 { parts[0] } else { tape.concat(&parts) };
        if let Some(prior) = &plan.prior {
            let p = tape.constant(Mat::column(prior.iter().map(|&x| T::of(x)).collect()));
            raw = tape.mul(raw, p);
        }
        let den = tape.segment_sum(raw, plan.per_node.clone());
        let den_rows = tape.gather(den, plan.owner.clone());
        tape.div(raw, den_rows)
    }

    /// Final tangent embeddings evaluated in double precision.
    pub fn final_embeddings(&self, params: &ModelParams) -> Result<Mat> {
        self.check_params(params)?;
        let mut tape = Tape::<f64>::new();
        let vars = self.bind(&mut tape, params);
        let out = self.forward(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// Per-node fusion weights of the first layer, one row per (node, subspace)
    /// in stacking order; for inspection and tests.
    pub fn fusion_weights(&self, params: &ModelParams) -> Result<Vec<(usize, usize, Vec<f64>)>> {
        self.check_params(params)?;
        let d = self.config.dim;
        let mut tape = Tape::<f64>::new();
        let vars = self.bind(&mut tape, params);
        let gates = self.gate_plan.as_ref().map(|plan| (plan, self.gate_weights(&mut tape, &vars, plan)));
        let mut out = Vec::new();
        let mut row = 0;
        for s in &self.subspaces {
            for &v in &s.members {
                let w = match &gates {
                    Some((plan, g)) => match plan.rows.binary_search(&row) {
                        Ok(p) => tape.value(*g).row(p).to_vec(),
                        Err(_) => vec![1.0; d],
                    },
                    None => {
                        let j = (self.fuse.offsets[v]..self.fuse.offsets[v + 1])
                            .find(|&j| self.fuse.index[j] == row)
                            .expect("row belongs to its node");
                        vec![self.fuse.coeff.as_ref().map_or(1.0, |c| c[j]); d]
                    }
                };
                out.push((v, s.relation, w));
                row += 1;
            }
        }
        Ok(out)
    }
}
