//! Gathering features at their component roots and writing trajectories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::balance::FeaturePoint;
use crate::dufind::Forest;
use crate::error::{Error, Result};
use crate::idspace::{ElementId, RankId};
use crate::mesh::{CriticalKind, CriticalPoint, LevelSetVertex};
use crate::transport::{Schedule, Transport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Critical,
    Levelset,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "critical" => Ok(FeatureKind::Critical),
            "levelset" => Ok(FeatureKind::Levelset),
            _ => Err(Error::invalid(format!("feature must be critical|levelset, got {s:?}"))),
        }
    }
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Critical => "critical",
            FeatureKind::Levelset => "levelset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Feature {
    Critical(CriticalPoint),
    LevelSet {
        vertex: LevelSetVertex,
        /// Grid coordinates, slowest axis (time) first.
        coords: Vec<usize>,
    },
}

impl Feature {
    pub fn id(&self) -> ElementId {
        match self {
            Feature::Critical(p) => p.face_id,
            Feature::LevelSet { vertex, .. } => vertex.vertex_id,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            Feature::Critical(_) => FeatureKind::Critical,
            Feature::LevelSet { .. } => FeatureKind::Levelset,
        }
    }

    /// Spacetime location, `(t, [z], y, x)`.
    pub fn point(&self) -> FeaturePoint {
        let coords = match self {
            Feature::Critical(p) => p.position.to_vec(),
            Feature::LevelSet { coords, .. } => coords.iter().map(|&c| c as f64).collect(),
        };
        FeaturePoint {
            id: self.id(),
            coords,
        }
    }
}

/// All features of one component, held by the rank owning its root.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentBundle {
    pub root: ElementId,
    /// Sorted by feature id.
    pub members: Vec<(Feature, RankId)>,
}

/// Routes every feature to the rank owning its finalized root, in one
/// synchronous transport round. `features[r]` must all be local to
/// `forests[r]`. Returns per-rank bundles sorted by root and the number of
/// messages exchanged.
pub fn gather_by_root(
    forests: &[Forest],
    features: Vec<Vec<Feature>>,
) -> Result<(Vec<Vec<ComponentBundle>>, u64)> {
    let n = forests.len();
    if features.len() != n {
        return Err(Error::invalid(format!(
            "{} feature lists for {n} ranks",
            features.len()
        )));
    }
    let mut transport = Transport::new(n.max(1), &Schedule::sync())?;
    for (r, list) in features.into_iter().enumerate() {
        let src = RankId(r as u32);
        for f in list {
            let (root, root_rank) = forests[r].parent_of(f.id()).ok_or_else(|| {
                Error::protocol(format!("feature {} is not an element of rank {r}", f.id()))
            })?;
            transport.send(src, root_rank, (root, f, src))?;
        }
    }
    transport.barrier(&vec![true; n])?;
    let moved = transport.delivered();
    let mut out = Vec::with_capacity(n);
    for (r, forest) in forests.iter().enumerate() {
        let mut groups: BTreeMap<ElementId, Vec<(Feature, RankId)>> = BTreeMap::new();
        for env in transport.drain(RankId(r as u32)) {
            let (root, f, src) = env.payload;
            groups.entry(root).or_default().push((f, src));
        }
        let mut bundles = Vec::with_capacity(groups.len());
        for (root, mut members) in groups {
            if forest.parent_of(root).map(|(p, _)| p) != Some(root) {
                return Err(Error::protocol(format!(
                    "features point at {root}, which is not a root on rank {r}"
                )));
            }
            members.sort_by_key(|(f, _)| f.id());
            if members[0].0.id() != root {
                return Err(Error::protocol(format!(
                    "component root {root} is not its minimum member {}",
                    members[0].0.id()
                )));
            }
            bundles.push(ComponentBundle { root, members });
        }
        out.push(bundles);
    }
    transport.terminate();
    transport.audit_empty()?;
    Ok((out, moved))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: ElementId,
    pub t: f64,
    /// Spatial coordinates, `([z], y, x)`.
    pub coords: Vec<f64>,
    pub value: f64,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CriticalKind>,
}

impl Record {
    fn from_feature(f: &Feature) -> Self {
        match f {
            Feature::Critical(p) => Record {
                id: p.face_id,
                t: p.position[0],
                coords: p.position[1..].to_vec(),
                value: p.scalar,
                kind: Some(p.kind),
            },
            Feature::LevelSet { vertex, coords } => Record {
                id: vertex.vertex_id,
                t: coords[0] as f64,
                coords: coords[1..].iter().map(|&c| c as f64).collect(),
                value: vertex.value as f64,
                kind: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub component_id: ElementId,
    pub kind: FeatureKind,
    pub records: Vec<Record>,
}

impl Trajectory {
    /// Time steps covered, as `(first, last)`.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let first = self.records.iter().map(|r| r.t).reduce(f64::min)?;
        let last = self.records.iter().map(|r| r.t).reduce(f64::max)?;
        Some((first, last))
    }
}

/// Critical records are ordered by `(t, id)`, level-set records by id.
pub fn assemble(bundle: &ComponentBundle, kind: FeatureKind) -> Trajectory {
    let mut records: Vec<Record> = bundle
        .members
        .iter()
        .map(|(f, _)| Record::from_feature(f))
        .collect();
    match kind {
        FeatureKind::Critical => records.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id))),
        FeatureKind::Levelset => records.sort_by_key(|r| r.id),
    }
    Trajectory {
        component_id: bundle.root,
        kind,
        records,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Jsonl,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(OutputFormat::Jsonl),
            "csv" => Ok(OutputFormat::Csv),
            _ => Err(Error::invalid(format!("format must be jsonl|csv, got {s:?}"))),
        }
    }
}

pub const CSV_HEADER: &str = "component_id,kind,id,t,z,y,x,value,type";

/// Serializes trajectories in the given order.
pub fn render(trajectories: &[Trajectory], format: OutputFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        OutputFormat::Jsonl => {
            for t in trajectories {
                out.push_str(&serde_json::to_string(t)?);
                out.push('\n');
            }
        }
        OutputFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for t in trajectories {
                for r in &t.records {
                    let (z, y, x) = match r.coords.as_slice() {
                        [y, x] => (String::new(), y.to_string(), x.to_string()),
                        [z, y, x] => (z.to_string(), y.to_string(), x.to_string()),
                        other => {
                            return Err(Error::invalid(format!(
                                "record {} has {} spatial coordinates",
                                r.id,
                                other.len()
                            )))
                        }
                    };
                    let ty = match r.kind {
                        Some(CriticalKind::Maximum) => "maximum",
                        Some(CriticalKind::Minimum) => "minimum",
                        Some(CriticalKind::Saddle) => "saddle",
                        None => "",
                    };
                    writeln!(
                        out,
                        "{},{},{},{},{z},{y},{x},{},{ty}",
                        t.component_id,
                        t.kind.as_str(),
                        r.id,
                        r.t,
                        r.value
                    )
                    .expect("writing to a String");
                }
            }
        }
    }
    Ok(out)
}

pub fn write_output(trajectories: &[Trajectory], path: &Path, format: OutputFormat) -> Result<()> {
    let text = render(trajectories, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Component count and a histogram of component sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub n_components: usize,
    pub n_features: usize,
    /// size → number of components of that size.
    pub sizes: BTreeMap<usize, usize>,
}

pub fn summarize(trajectories: &[Trajectory]) -> ComponentSummary {
    let mut sizes = BTreeMap::new();
    for t in trajectories {
        *sizes.entry(t.records.len()).or_insert(0) += 1;
    }
    ComponentSummary {
        n_components: trajectories.len(),
        n_features: trajectories.iter().map(|t| t.records.len()).sum(),
        sizes,
    }
}
