use std::collections::VecDeque;

use super::{Hcg, Relation, INTERACTION_REL, ITEM_TYPE, USER_TYPE};
use crate::error::{Error, Result};

/// Iteratively drops users with fewer than `user_core` interactions and items with
/// fewer than `item_core` until no node violates its threshold, then compacts the
/// user and item blocks. Side edges touching a removed node go with it; other
/// node types are kept as they are.
///
/// Returns the reduced graph and, per node type, the old local index of every
/// surviving node in new-index order.
pub fn k_core(hcg: &Hcg, user_core: usize, item_core: usize) -> Result<(Hcg, Vec<Vec<usize>>)> {
    if user_core == 0 || item_core == 0 {
        return Err(Error::invalid("core thresholds must be ≥ 1"));
    }
    let n = hcg.num_nodes();
    let adj = hcg.adjacency(INTERACTION_REL);
    let users = hcg.node_types()[USER_TYPE].clone();
    let items = hcg.node_types()[ITEM_TYPE].clone();
    let threshold = |v: usize| {
        if v < users.offset + users.count {
            user_core
        } else {
            item_core
        }
    };
    let core_nodes = users.offset..items.offset + items.count;

    let mut degree: Vec<usize> = (0..n).map(|v| adj.degree(v)).collect();
    let mut removed = vec![false; n];
    let mut queue: VecDeque<usize> = core_nodes
        .clone()
        .filter(|&v| degree[v] < threshold(v))
        .collect();
    for &v in &queue {
        removed[v] = true;
    }
    while let Some(v) = queue.pop_front() {
        for &w in adj.neighbors(v) {
            if removed[w] {
                continue;
            }
            degree[w] -= 1;
            if degree[w] < threshold(w) {
                removed[w] = true;
                queue.push_back(w);
            }
        }
    }

    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(hcg.node_types().len());
    let mut remap: Vec<Option<usize>> = vec![None; n];
    for t in hcg.node_types() {
        let mut list = Vec::new();
        for local in 0..t.count {
            let g = t.offset + local;
            if !removed[g] {
                remap[g] = Some(list.len());
                list.push(local);
            }
        }
        kept.push(list);
    }
    if kept[USER_TYPE].is_empty() || kept[ITEM_TYPE].is_empty() {
        return Err(Error::EmptyGraph(format!(
            "{user_core}/{item_core}-core filtering"
        )));
    }

    let relations = hcg
        .relations()
        .iter()
        .map(|r| {
            let (so, do_) = (
                hcg.node_types()[r.kind.src_type].offset,
                hcg.node_types()[r.kind.dst_type].offset,
            );
            let edges = r
                .edges
                .iter()
                .filter_map(|&(a, b)| Some((remap[so + a]?, remap[do_ + b]?)))
                .collect();
            Relation {
                kind: r.kind.clone(),
                edges,
            }
        })
        .collect();
    let types = hcg
        .node_types()
        .iter()
        .zip(&kept)
        .map(|(t, k)| (t.name.clone(), k.len()))
        .collect();
    Ok((Hcg::new(types, relations)?, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hcg::RelationType;
    use proptest::prelude::*;

    #[test]
    fn star_user_removed() {
        // user 0 → items 0..3 ; user 1 → item 0 only
        let g = Hcg::bipartite(2, 3, vec![(0, 0), (0, 1), (0, 2), (1, 0)]).unwrap();
        let (core, kept) = k_core(&g, 2, 1).unwrap();
        assert_eq!(kept[USER_TYPE], vec![0]);
        assert_eq!(core.num_users(), 1);
        assert_eq!(core.interactions().len(), 3);
    }

    #[test]
    fn bipartite_cycle_is_fixed() {
        // 3 users, 3 items, each of degree 2 (a 6-cycle)
        let g = Hcg::bipartite(3, 3, vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)]).unwrap();
        let (core, kept) = k_core(&g, 2, 2).unwrap();
        assert_eq!(core, g);
        assert_eq!(kept[USER_TYPE], vec![0, 1, 2]);
    }

    #[test]
    fn cascade_and_side_edges() {
        let g = Hcg::new(
            vec![("user".into(), 3), ("item".into(), 3)],
            vec![
                Relation {
                    kind: RelationType::new("interaction", 0, 1),
                    edges: vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 1)],
                },
                Relation {
                    kind: RelationType::new("friend", 0, 0),
                    edges: vec![(0, 2), (0, 1)],
                },
            ],
        )
        .unwrap();
        // item 2 has degree 1 → removed → user 2 drops to 1 → removed.
        let (core, kept) = k_core(&g, 2, 2).unwrap();
        assert_eq!(kept[USER_TYPE], vec![0, 1]);
        assert_eq!(kept[ITEM_TYPE], vec![0, 1]);
        assert_eq!(core.relation(1).edges, vec![(0, 1)]);
    }

    #[test]
    fn empty_result_is_an_error() {
        let g = Hcg::bipartite(2, 2, vec![(0, 0), (1, 1)]).unwrap();
        assert!(matches!(k_core(&g, 5, 5), Err(Error::EmptyGraph(_))));
        assert!(k_core(&g, 0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn output_is_a_fixpoint(edges in prop::collection::vec((0usize..25, 0usize..25), 10..250), uc in 1usize..5, ic in 1usize..5) {
            let g = Hcg::bipartite(25, 25, edges).unwrap();
            match k_core(&g, uc, ic) {
                Ok((core, _)) => {
                    let (again, kept) = k_core(&core, uc, ic).unwrap();
                    prop_assert_eq!(&again, &core);
                    prop_assert_eq!(kept[0].len(), core.num_users());
                    for u in 0..core.num_users() {
                        prop_assert!(core.degree(0, u) >= uc);
                    }
                    for i in 0..core.num_items() {
                        prop_assert!(core.degree(0, core.num_users() + i) >= ic);
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::EmptyGraph(_))),
            }
        }
    }
}
