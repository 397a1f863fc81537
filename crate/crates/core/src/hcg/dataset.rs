use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hcg, Relation, RelationType, SplitDataset, INTERACTION_REL, ITEM_TYPE, USER_TYPE};
use crate::error::{Error, Result};

const META: &str = "meta.json";
const STATS: &str = "stats.json";
const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNodeType {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRelation {
    pub name: String,
    pub src_type: String,
    pub dst_type: String,
}

/// Schema of a processed dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub node_types: Vec<MetaNodeType>,
    pub relations: Vec<MetaRelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub name: String,
    pub a_type: String,
    pub b_type: String,
    pub a_count: usize,
    pub b_count: usize,
    pub edges: usize,
}

/// Node, edge and density summary written as `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// interactions / (users · items)
    pub density: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub relations: Vec<RelationStats>,
}

/// A split dataset together with the raw identifiers of its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedDataset {
    pub split: SplitDataset,
    pub ids: Vec<Vec<String>>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn edges_tsv(edges: &[(usize, usize)]) -> String {
    let mut s = String::with_capacity(edges.len() * 12);
    for (a, b) in edges {
        let _ = writeln!(s, "{a}\t{b}");
    }
    s
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let mut it = l.split('\t').map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
                _ => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected two indices".into(),
                }),
            }
        })
        .collect()
}

fn remap_path(dir: &Path, type_name: &str) -> PathBuf {
    dir.join("remap").join(format!("{type_name}.tsv"))
}

fn relation_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("relations").join(format!("{name}.tsv"))
}

fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("split").join(format!("{name}.tsv"))
}

impl ProcessedDataset {
    pub fn meta(&self) -> DatasetMeta {
        let g = &self.split.hcg;
        let tname = |t: usize| g.node_types()[t].name.clone();
        DatasetMeta {
            node_types: g
                .node_types()
                .iter()
                .map(|t| MetaNodeType {
                    name: t.name.clone(),
                    count: t.count,
                })
                .collect(),
            relations: g
                .relations()
                .iter()
                .map(|r| MetaRelation {
                    name: r.kind.name.clone(),
                    src_type: tname(r.kind.src_type),
                    dst_type: tname(r.kind.dst_type),
                })
                .collect(),
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let g = &self.split.hcg;
        let (users, items) = (g.num_users(), g.num_items());
        let interactions = g.interactions().len();
        DatasetStats {
            users,
            items,
            interactions,
            density: interactions as f64 / (users as f64 * items as f64),
            train: self.split.train.len(),
            validation: self.split.validation.len(),
            test: self.split.test.len(),
            relations: g.relations()[1..]
                .iter()
                .map(|r| {
                    let (a, b) = (&g.node_types()[r.kind.src_type], &g.node_types()[r.kind.dst_type]);
                    RelationStats {
                        name: r.kind.name.clone(),
                        a_type: a.name.clone(),
                        b_type: b.name.clone(),
                        a_count: a.count,
                        b_count: b.count,
                        edges: r.edges.len(),
                    }
                })
                .collect(),
        }
    }

    /// Writes `meta.json`, `stats.json`, `remap/<type>.tsv`,
    /// `relations/<name>.tsv` (side relations) and `split/{train,validation,test}.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let g = &self.split.hcg;
        write_file(&dir.join(META), &to_json(&self.meta()))?;
        write_file(&dir.join(STATS), &to_json(&self.stats()))?;
        for (t, ids) in g.node_types().iter().zip(&self.ids) {
            let mut s = String::new();
            for (i, id) in ids.iter().enumerate() {
                let _ = writeln!(s, "{i}\t{id}");
            }
            write_file(&remap_path(dir, &t.name), &s)?;
        }
        for r in &g.relations()[1..] {
            write_file(&relation_path(dir, &r.kind.name), &edges_tsv(&r.edges))?;
        }
        for (name, edges) in SPLITS.iter().zip([&self.split.train, &self.split.validation, &self.split.test]) {
            write_file(&split_path(dir, name), &edges_tsv(edges))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META);
        let meta: DatasetMeta = serde_json::from_str(&read_file(&meta_path)?)
            .map_err(|e| Error::Serde(format!("{}: {e}", meta_path.display())))?;
        let type_index = |name: &str| {
            meta.node_types
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::Schema(format!("unknown node type `{name}` in meta.json")))
        };
        let mut ids = Vec::new();
        for t in &meta.node_types {
            let p = remap_path(dir, &t.name);
            let list: Vec<String> = read_file(&p)?
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| l.split_once('\t').map_or(l, |(_, id)| id).to_owned())
                .collect();
            if list.len() != t.count {
                return Err(Error::Schema(format!(
                    "{}: {} ids for {} nodes",
                    p.display(),
                    list.len(),
                    t.count
                )));
            }
            ids.push(list);
        }
        let train = parse_edges(&split_path(dir, "train"))?;
        let validation = parse_edges(&split_path(dir, "validation"))?;
        let test = parse_edges(&split_path(dir, "test"))?;
        let mut all: Vec<_> = train.iter().chain(&validation).chain(&test).copied().collect();
        all.sort_unstable();

        let mut relations = Vec::new();
        for (i, r) in meta.relations.iter().enumerate() {
            let kind = RelationType::new(r.name.clone(), type_index(&r.src_type)?, type_index(&r.dst_type)?);
            let edges = if i == INTERACTION_REL {
                all.clone()
            } else {
                parse_edges(&relation_path(dir, &r.name))?
            };
            relations.push(Relation { kind, edges });
        }
        let hcg = Hcg::new(
            meta.node_types.iter().map(|t| (t.name.clone(), t.count)).collect(),
            relations,
        )?;
        debug_assert_eq!(hcg.node_types()[USER_TYPE].name, "user");
        debug_assert_eq!(hcg.node_types()[ITEM_TYPE].name, "item");
        Ok(ProcessedDataset {
            split: SplitDataset {
                hcg,
                train,
                validation,
                test,
            },
            ids,
        })
    }
}

/// SHA-256 over the schema, remap tables, side relations and split files of a
/// processed dataset directory.
pub fn fingerprint(dir: &Path) -> Result<String> {
    let meta_path = dir.join(META);
    let meta_text = read_file(&meta_path)?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Serde(format!("{}: {e}", meta_path.display())))?;
    let mut files = vec![meta_path];
    files.extend(meta.node_types.iter().map(|t| remap_path(dir, &t.name)));
    files.extend(meta.relations.iter().skip(1).map(|r| relation_path(dir, &r.name)));
    files.extend(SPLITS.iter().map(|s| split_path(dir, s)));

    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hcg::split;

    #[test]
    fn write_read_roundtrip_and_fingerprint() {
        let g = Hcg::new(
            vec![("user".into(), 4), ("item".into(), 5), ("category".into(), 2)],
            vec![
                Relation {
                    kind: RelationType::new("interaction", 0, 1),
                    edges: (0..4).flat_map(|u| (0..3).map(move |i| (u, (u + i) % 5))).collect(),
                },
                Relation {
                    kind: RelationType::new("category", 2, 1),
                    edges: vec![(0, 0), (1, 3)],
                },
            ],
        )
        .unwrap();
        let data = ProcessedDataset {
            split: split(&g, 1).unwrap(),
            ids: vec![
                (0..4).map(|i| format!("u{i}")).collect(),
                (0..5).map(|i| format!("i{i}")).collect(),
                vec!["a".into(), "b".into()],
            ],
        };
        let d = tempfile::tempdir().unwrap();
        data.write(d.path()).unwrap();
        let back = ProcessedDataset::read(d.path()).unwrap();
        assert_eq!(back, data);

        let fp = fingerprint(d.path()).unwrap();
        assert_eq!(fp, fingerprint(d.path()).unwrap());
        std::fs::write(d.path().join("split/test.tsv"), "0\t0\n").unwrap();
        assert_ne!(fp, fingerprint(d.path()).unwrap());

        let stats: DatasetStats =
            serde_json::from_str(&std::fs::read_to_string(d.path().join("stats.json")).unwrap()).unwrap();
        assert_eq!(stats.interactions, 12);
        assert_eq!(stats.relations[0].a_count, 2);
    }
}
