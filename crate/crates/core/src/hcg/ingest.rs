use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    geo_neighbors, k_core, split, DatasetStats, Hcg, Location, ProcessedDataset, Relation,
    RelationType, INTERACTION, INTERACTION_REL, ITEM, ITEM_TYPE, USER, USER_TYPE,
};
use crate::error::{Error, Result};

fn default_threshold() -> f64 {
    4.0
}

fn default_core() -> usize {
    1
}

fn default_seed() -> u64 {
    2024
}

fn default_radius() -> f64 {
    0.2
}

fn default_neighbor() -> String {
    "neighbor".into()
}

/// Raw dataset description (TOML).
///
/// ```toml
/// node_types = ["category"]   # beyond user and item
/// user_core = 10
/// item_core = 5
/// seed = 2024
///
/// [interactions]
/// path = "ratings.tsv"        # user, item[, rating]
/// rating_threshold = 4.0
///
/// [[relations]]
/// name = "category"
/// path = "category.tsv"
/// src_type = "category"
/// dst_type = "item"
///
/// [locations]                 # item, lat, lon
/// path = "locations.tsv"
/// radius_km = 0.2
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub node_types: Vec<String>,
    #[serde(default = "default_core")]
    pub user_core: usize,
    #[serde(default = "default_core")]
    pub item_core: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub interactions: InteractionSpec,
    #[serde(default)]
    pub relations: Vec<RelationSpec>,
    pub locations: Option<LocationSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSpec {
    pub path: PathBuf,
    #[serde(default = "default_threshold")]
    pub rating_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub name: String,
    pub path: PathBuf,
    pub src_type: String,
    pub dst_type: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationSpec {
    pub path: PathBuf,
    #[serde(default = "default_neighbor")]
    pub relation: String,
    #[serde(default = "default_radius")]
    pub radius_km: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.interactions.path = base.join(&m.interactions.path);
        for r in &mut m.relations {
            r.path = base.join(&r.path);
        }
        if let Some(l) = &mut m.locations {
            l.path = base.join(&l.path);
        }
        Ok(m)
    }
}

/// Graph plus the raw identifier of every node, per type in index order.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub hcg: Hcg,
    pub ids: Vec<Vec<String>>,
}

fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split_whitespace().map(str::to_owned).collect()))
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Default)]
struct IdTable {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl IdTable {
    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Reads interactions and side relations into a typed graph.
///
/// Users and items are defined by the interaction file; side rows whose user or
/// item endpoint never interacted are skipped. Nodes of any other declared type
/// are created on first sight. Rows with a third column are kept only when the
/// rating is at least `threshold` (4 when not given).
pub fn ingest(
    interactions: &Path,
    extra_types: &[String],
    side: &[RelationSpec],
    threshold: Option<f64>,
) -> Result<Ingested> {
    let threshold = threshold.unwrap_or_else(default_threshold);
    let mut type_names = vec![USER.to_owned(), ITEM.to_owned()];
    for t in extra_types {
        if type_names.contains(t) {
            return Err(Error::Schema(format!("node type `{t}` declared twice")));
        }
        type_names.push(t.clone());
    }
    let mut tables: Vec<IdTable> = type_names.iter().map(|_| IdTable::default()).collect();

    let mut edges = Vec::new();
    for (line, cols) in read_rows(interactions)? {
        match cols.len() {
            2 => {}
            3 => {
                let r: f64 = cols[2].parse().map_err(|_| {
                    parse_err(interactions, line, format!("bad rating `{}`", cols[2]))
                })?;
                if r < threshold {
                    continue;
                }
            }
            n => {
                return Err(parse_err(
                    interactions,
                    line,
                    format!("expected `user item [rating]`, found {n} columns"),
                ))
            }
        }
        let u = tables[USER_TYPE].intern(&cols[0]);
        let i = tables[ITEM_TYPE].intern(&cols[1]);
        edges.push((u, i));
    }
    let mut relations = vec![Relation {
        kind: RelationType::new(INTERACTION, USER_TYPE, ITEM_TYPE),
        edges,
    }];

    let type_of = |name: &str, rel: &str| -> Result<usize> {
        type_names.iter().position(|t| t == name).ok_or_else(|| {
            Error::Schema(format!(
                "relation `{rel}` uses undeclared node type `{name}`"
            ))
        })
    };
    for spec in side {
        if spec.name == INTERACTION {
            return Err(Error::Schema("`interaction` is reserved".into()));
        }
        let st = type_of(&spec.src_type, &spec.name)?;
        let dt = type_of(&spec.dst_type, &spec.name)?;
        let mut edges = Vec::new();
        for (line, cols) in read_rows(&spec.path)? {
            if cols.len() != 2 {
                return Err(parse_err(
                    &spec.path,
                    line,
                    format!("expected `src dst`, found {} columns", cols.len()),
                ));
            }
            let mut endpoint = |t: usize, id: &str| {
                if t == USER_TYPE || t == ITEM_TYPE {
                    tables[t].get(id)
                } else {
                    Some(tables[t].intern(id))
                }
            };
            if let (Some(a), Some(b)) = (endpoint(st, &cols[0]), endpoint(dt, &cols[1])) {
                edges.push((a, b));
            }
        }
        relations.push(Relation {
            kind: RelationType::new(spec.name.clone(), st, dt),
            edges,
        });
    }

    let types = type_names
        .into_iter()
        .zip(&tables)
        .map(|(n, t)| (n, t.ids.len()))
        .collect();
    Ok(Ingested {
        hcg: Hcg::new(types, relations)?,
        ids: tables.into_iter().map(|t| t.ids).collect(),
    })
}

fn read_locations(path: &Path, items: &[String]) -> Result<Vec<Location>> {
    let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = Vec::new();
    for (line, cols) in read_rows(path)? {
        if cols.len() != 3 {
            return Err(parse_err(path, line, "expected `item lat lon`"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad coordinate `{s}`")))
        };
        let (lat, lon) = (num(&cols[1])?, num(&cols[2])?);
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(parse_err(path, line, format!("coordinates ({lat}, {lon}) out of range")));
        }
        if let Some(&item) = index.get(cols[0].as_str()) {
            out.push(Location { item, lat, lon });
        }
    }
    Ok(out)
}

/// Full preprocessing: ingest → geographic neighbors → k-core → split, written
/// to `out_dir`.
pub fn prepare(manifest_path: &Path, out_dir: &Path) -> Result<DatasetStats> {
    let m = Manifest::load(manifest_path)?;
    let Ingested { mut hcg, mut ids } = ingest(
        &m.interactions.path,
        &m.node_types,
        &m.relations,
        Some(m.interactions.rating_threshold),
    )?;

    if let Some(loc) = &m.locations {
        if hcg.relation_index(&loc.relation).is_some() {
            return Err(Error::Schema(format!(
                "location relation `{}` clashes with a declared relation",
                loc.relation
            )));
        }
        let locations = read_locations(&loc.path, &ids[ITEM_TYPE])?;
        let edges = geo_neighbors(&locations, loc.radius_km)?;
        let mut relations = hcg.relations().to_vec();
        relations.push(Relation {
            kind: RelationType::new(loc.relation.clone(), ITEM_TYPE, ITEM_TYPE),
            edges,
        });
        hcg = Hcg::new(
            hcg.node_types().iter().map(|t| (t.name.clone(), t.count)).collect(),
            relations,
        )?;
    }

    if hcg.relation(INTERACTION_REL).edges.is_empty() {
        return Err(Error::EmptyGraph("ingestion".into()));
    }
    let (core, kept) = k_core(&hcg, m.user_core, m.item_core)?;
    ids = ids
        .iter()
        .zip(&kept)
        .map(|(names, keep)| keep.iter().map(|&i| names[i].clone()).collect())
        .collect();
    let data = ProcessedDataset {
        split: split(&core, m.seed)?,
        ids,
    };
    data.write(out_dir)?;
    Ok(data.stats())
}
