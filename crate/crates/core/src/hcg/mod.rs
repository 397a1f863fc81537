//! Heterogeneous collaborative graph: typed node blocks, typed undirected
//! relations and per-relation adjacency.
//!
//! Nodes are numbered globally with one contiguous block per node type. Type 0 is
//! always `user`, type 1 `item`, and relation 0 is the user–item `interaction`
//! relation. Adjacency lists exclude the node itself; the self-loop is added at
//! aggregation time.

mod dataset;
mod geo;
mod ingest;
mod kcore;
mod split;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{fingerprint, DatasetMeta, DatasetStats, ProcessedDataset, RelationStats};
pub use geo::{geo_neighbors, haversine_km, Location, EARTH_RADIUS_KM};
pub use ingest::{ingest, prepare, Ingested, LocationSpec, Manifest, RelationSpec};
pub use kcore::k_core;
pub use split::{split, SplitDataset};

pub const USER: &str = "user";
pub const ITEM: &str = "item";
pub const INTERACTION: &str = "interaction";

pub const USER_TYPE: usize = 0;
pub const ITEM_TYPE: usize = 1;
pub const INTERACTION_REL: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
    /// First global index of this type's block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
}

impl RelationType {
    pub fn new(name: impl Into<String>, src_type: usize, dst_type: usize) -> Self {
        RelationType {
            name: name.into(),
            src_type,
            dst_type,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.src_type == self.dst_type
    }

    pub fn touches(&self, node_type: usize) -> bool {
        self.src_type == node_type || self.dst_type == node_type
    }
}

/// Undirected edges stored as `(src_local, dst_local)` indices into the
/// endpoint types' blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub kind: RelationType,
    pub edges: Vec<(usize, usize)>,
}

/// Compressed adjacency over global node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hcg {
    node_types: Vec<NodeType>,
    relations: Vec<Relation>,
    adjacency: Vec<Adjacency>,
}

impl Hcg {
    /// Builds a graph from per-type node counts and relation edge lists.
    ///
    /// Duplicate edges collapse to one; homogeneous relations are stored with
    /// `src ≤ dst` and drop self-edges.
    pub fn new(types: Vec<(String, usize)>, relations: Vec<Relation>) -> Result<Self> {
        if types.len() < 2 || types[USER_TYPE].0 != USER || types[ITEM_TYPE].0 != ITEM {
            return Err(Error::Schema(
                "node types must start with `user` and `item`".into(),
            ));
        }
        let first = relations.first().map(|r| &r.kind);
        if first != Some(&RelationType::new(INTERACTION, USER_TYPE, ITEM_TYPE)) {
            return Err(Error::Schema(
                "relation 0 must be `interaction` from user to item".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, (name, _)) in types.iter().enumerate() {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate node type `{name}` at {i}")));
            }
        }
        let mut offset = 0;
        let node_types: Vec<NodeType> = types
            .into_iter()
            .map(|(name, count)| {
                let t = NodeType {
                    name,
                    count,
                    offset,
                };
                offset += count;
                t
            })
            .collect();

        let mut names = BTreeSet::new();
        let mut rels = Vec::with_capacity(relations.len());
        for rel in relations {
            let k = &rel.kind;
            if !names.insert(k.name.clone()) {
                return Err(Error::Schema(format!("duplicate relation `{}`", k.name)));
            }
            if k.src_type >= node_types.len() || k.dst_type >= node_types.len() {
                return Err(Error::Schema(format!(
                    "relation `{}` refers to an unknown node type",
                    k.name
                )));
            }
            let (ns, nd) = (node_types[k.src_type].count, node_types[k.dst_type].count);
            let mut set = BTreeSet::new();
            for &(a, b) in &rel.edges {
                if a >= ns || b >= nd {
                    return Err(Error::invalid(format!(
                        "edge ({a}, {b}) out of range in relation `{}`",
                        k.name
                    )));
                }
                if k.is_homogeneous() {
                    if a != b {
                        set.insert((a.min(b), a.max(b)));
                    }
                } else {
                    set.insert((a, b));
                }
            }
            rels.push(Relation {
                kind: rel.kind,
                edges: set.into_iter().collect(),
            });
        }
        let adjacency = rels
            .iter()
            .map(|r| build_adjacency(&node_types, r, offset))
            .collect();
        Ok(Hcg {
            node_types,
            relations: rels,
            adjacency,
        })
    }

    /// Interaction-only graph.
    pub fn bipartite(users: usize, items: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        Hcg::new(
            vec![(USER.into(), users), (ITEM.into(), items)],
            vec![Relation {
                kind: RelationType::new(INTERACTION, USER_TYPE, ITEM_TYPE),
                edges,
            }],
        )
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, rel: usize) -> &Relation {
        &self.relations[rel]
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.kind.name == name)
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t.name == name)
    }

    pub fn adjacency(&self, rel: usize) -> &Adjacency {
        &self.adjacency[rel]
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.iter().map(|t| t.count).sum()
    }

    pub fn num_users(&self) -> usize {
        self.node_types[USER_TYPE].count
    }

    pub fn num_items(&self) -> usize {
        self.node_types[ITEM_TYPE].count
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.relations[INTERACTION_REL].edges
    }

    pub fn global(&self, node_type: usize, local: usize) -> usize {
        self.node_types[node_type].offset + local
    }

    /// φ: global node → node type.
    pub fn node_type_of(&self, global: usize) -> usize {
        self.node_types
            .iter()
            .rposition(|t| t.offset <= global)
            .expect("node index in range")
    }

    pub fn local(&self, global: usize) -> (usize, usize) {
        let t = self.node_type_of(global);
        (t, global - self.node_types[t].offset)
    }

    pub fn degree(&self, rel: usize, global: usize) -> usize {
        self.adjacency[rel].degree(global)
    }

    /// ψ over edges: `(relation, global src, global dst)` for every stored edge.
    pub fn typed_edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.relations.iter().enumerate().flat_map(move |(ri, r)| {
            r.edges.iter().map(move |&(a, b)| {
                (
                    ri,
                    self.global(r.kind.src_type, a),
                    self.global(r.kind.dst_type, b),
                )
            })
        })
    }

    /// Same graph with the interaction relation replaced by `edges`.
    pub fn with_interactions(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut relations = self.relations.clone();
        relations[INTERACTION_REL].edges = edges;
        Hcg::new(
            self.node_types
                .iter()
                .map(|t| (t.name.clone(), t.count))
                .collect(),
            relations,
        )
    }

    /// Same graph restricted to the interaction relation (side relations dropped).
    pub fn without_side_relations(&self) -> Self {
        Hcg {
            node_types: self.node_types.clone(),
            relations: self.relations[..1].to_vec(),
            adjacency: self.adjacency[..1].to_vec(),
        }
    }

    /// Train positives of every anchor in `rel`, keyed by global index.
    pub fn positives(&self, rel: usize) -> Vec<BTreeSet<usize>> {
        let adj = &self.adjacency[rel];
        (0..self.num_nodes())
            .map(|n| adj.neighbors(n).iter().copied().collect())
            .collect()
    }
}

fn build_adjacency(types: &[NodeType], rel: &Relation, n: usize) -> Adjacency {
    let (so, do_) = (types[rel.kind.src_type].offset, types[rel.kind.dst_type].offset);
    let mut deg = vec![0usize; n];
    for &(a, b) in &rel.edges {
        deg[so + a] += 1;
        deg[do_ + b] += 1;
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for d in &deg {
        offsets.push(offsets.last().unwrap() + d);
    }
    let mut fill = offsets[..n].to_vec();
    let mut neighbors = vec![0; offsets[n]];
    for &(a, b) in &rel.edges {
        let (ga, gb) = (so + a, do_ + b);
        neighbors[fill[ga]] = gb;
        fill[ga] += 1;
        neighbors[fill[gb]] = ga;
        fill[gb] += 1;
    }
    for v in 0..n {
        neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
    }
    Adjacency { offsets, neighbors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy() -> Hcg {
        Hcg::new(
            vec![(USER.into(), 3), (ITEM.into(), 3), ("category".into(), 1)],
            vec![
                Relation {
                    kind: RelationType::new(INTERACTION, USER_TYPE, ITEM_TYPE),
                    edges: vec![(0, 0), (0, 1), (1, 1), (2, 2), (0, 0)],
                },
                Relation {
                    kind: RelationType::new("friend", USER_TYPE, USER_TYPE),
                    edges: vec![(0, 1), (1, 0), (2, 2)],
                },
                Relation {
                    kind: RelationType::new("category", 2, ITEM_TYPE),
                    edges: vec![(0, 0), (0, 2)],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn dedup_and_types() {
        let g = toy();
        assert_eq!(g.num_nodes(), 7);
        assert_eq!(g.interactions().len(), 4);
        assert_eq!(g.relation(1).edges, vec![(0, 1)]);
        assert_eq!(g.node_type_of(0), USER_TYPE);
        assert_eq!(g.node_type_of(3), ITEM_TYPE);
        assert_eq!(g.node_type_of(6), 2);
        assert_eq!(g.local(4), (ITEM_TYPE, 1));
        assert_eq!(g.adjacency(0).neighbors(0), &[3, 4]);
        assert_eq!(g.degree(2, 6), 2);
        assert_eq!(g.degree(1, 2), 0);
        assert_eq!(g.typed_edges().count(), 4 + 1 + 2);
    }

    #[test]
    fn schema_violations() {
        let bad = Hcg::new(
            vec![(USER.into(), 1), (ITEM.into(), 1)],
            vec![Relation {
                kind: RelationType::new(INTERACTION, USER_TYPE, 5),
                edges: vec![],
            }],
        );
        assert!(matches!(bad, Err(Error::Schema(_))));
        assert!(Hcg::bipartite(1, 1, vec![(0, 3)]).is_err());
    }

    proptest! {
        #[test]
        fn degrees_match_recount(edges in prop::collection::vec((0usize..30, 0usize..40), 0..400)) {
            let g = Hcg::bipartite(30, 40, edges.clone()).unwrap();
            let uniq: BTreeSet<_> = edges.into_iter().collect();
            for u in 0..30 {
                let n = uniq.iter().filter(|(a, _)| *a == u).count();
                prop_assert_eq!(g.degree(0, u), n);
            }
            for i in 0..40 {
                let n = uniq.iter().filter(|(_, b)| *b == i).count();
                prop_assert_eq!(g.degree(0, 30 + i), n);
            }
        }
    }
}
