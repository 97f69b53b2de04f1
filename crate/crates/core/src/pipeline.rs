//! The feature-tracking pipeline: decompose, detect, link, balance, label,
//! gather and assemble.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::balance::{imbalance, kd_partition, repartition, KdAssignment, LoadBalance, RankFeatures};
use crate::dufind::{run_engine, EngineOutcome};
use crate::error::{Error, Result};
use crate::idspace::{decode_face_id, decode_vertex_id, GraphPartition, RankId};
use crate::mesh::{
    detect_critical_points, detect_level_set, local_edges_critical, local_edges_levelset,
    BlockLayout, Volume,
};
use crate::trajectory::{assemble, gather_by_root, Feature, FeatureKind, Trajectory};
use crate::transport::{RunMetrics, Schedule, DEFAULT_MSG_CAP};

pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct TrackConfig {
    pub kind: FeatureKind,
    /// Required for level sets, ignored otherwise.
    pub threshold: Option<f32>,
    pub num_ranks: usize,
    pub schedule: Schedule,
    pub load_balance: LoadBalance,
    pub msg_cap: u64,
}

impl TrackConfig {
    pub fn new(kind: FeatureKind, threshold: Option<f32>, num_ranks: usize) -> Self {
        TrackConfig {
            kind,
            threshold,
            num_ranks,
            schedule: Schedule::sync(),
            load_balance: LoadBalance::Off,
            msg_cap: DEFAULT_MSG_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.threshold) {
            (FeatureKind::Levelset, None) => Err(Error::invalid("level-set tracking needs a threshold")),
            (FeatureKind::Critical, Some(_)) => {
                Err(Error::invalid("a threshold only applies to level-set tracking"))
            }
            (_, Some(t)) if !t.is_finite() => Err(Error::invalid("threshold must be finite")),
            _ if self.num_ranks == 0 => Err(Error::invalid("num_ranks must be >= 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DatasetStats {
    pub n_features: usize,
    pub n_edges: usize,
    pub avg_degree: f64,
    pub degenerate_triangles: usize,
    pub unclassified_zeros: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BalanceStats {
    pub applied: bool,
    pub counts_before: Vec<usize>,
    pub counts_after: Vec<usize>,
    pub imbalance_before: f64,
    pub imbalance_after: f64,
    pub messages: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackMetrics {
    pub metrics_version: u32,
    pub command: &'static str,
    pub feature: FeatureKind,
    pub num_ranks: usize,
    /// Wall seconds per stage, keyed by stage name.
    pub stage_seconds: BTreeMap<&'static str, f64>,
    pub dataset: DatasetStats,
    pub balance: BalanceStats,
    pub gather_messages: u64,
    pub n_components: usize,
    pub engine: RunMetrics,
}

pub struct TrackOutcome {
    /// Sorted by component id.
    pub trajectories: Vec<Trajectory>,
    pub metrics: TrackMetrics,
    /// Present when load balancing ran.
    pub assignment: Option<KdAssignment>,
}

struct Detected {
    features: Vec<Feature>,
    degenerate: usize,
    unclassified: usize,
    edges: Vec<crate::idspace::Edge>,
}

fn detect_rank(vol: &Volume, layout: &BlockLayout, rank: usize, cfg: &TrackConfig) -> Result<Detected> {
    let block = &layout.blocks[rank];
    let dims = vol.dims();
    let me = RankId(rank as u32);
    match cfg.kind {
        FeatureKind::Critical => {
            let det = detect_critical_points(vol, block)?;
            let edges = local_edges_critical(&det.points, block, layout)?;
            let mut features = Vec::new();
            for p in det.points {
                let face = decode_face_id(p.face_id, dims)?;
                if layout.owner_of_face(&face)? == me {
                    features.push(Feature::Critical(p));
                }
            }
            Ok(Detected {
                features,
                degenerate: det.degenerate,
                unclassified: det.unclassified,
                edges,
            })
        }
        FeatureKind::Levelset => {
            let threshold = cfg.threshold.expect("validated");
            let verts = detect_level_set(vol, block, threshold)?;
            let edges = local_edges_levelset(&verts, block, layout)?;
            let mut features = Vec::new();
            for v in verts {
                let coords = decode_vertex_id(v.vertex_id, dims)?;
                if block.in_core(&coords) {
                    features.push(Feature::LevelSet { vertex: v, coords });
                }
            }
            Ok(Detected {
                features,
                degenerate: 0,
                unclassified: 0,
                edges,
            })
        }
    }
}

/// Runs the pipeline with the in-process engine.
pub fn track(vol: &Volume, cfg: &TrackConfig) -> Result<TrackOutcome> {
    let schedule = cfg.schedule.clone();
    let cap = cfg.msg_cap;
    track_with_engine(vol, cfg, |p| run_engine(p, &schedule, cap))
}

/// Runs the pipeline with a caller-supplied engine; the engine must return
/// finalized forests in rank order.
pub fn track_with_engine(
    vol: &Volume,
    cfg: &TrackConfig,
    engine: impl FnOnce(&GraphPartition) -> Result<EngineOutcome>,
) -> Result<TrackOutcome> {
    cfg.validate()?;
    let mut stages = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, stages: &mut BTreeMap<&'static str, f64>| {
        stages.insert(name, clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let layout = BlockLayout::new(vol.dims(), cfg.num_ranks)?;
    lap("decompose", &mut stages);

    let detected: Vec<Detected> = (0..cfg.num_ranks)
        .into_par_iter()
        .map(|r| detect_rank(vol, &layout, r, cfg))
        .collect::<Result<_>>()?;
    lap("detect_and_link", &mut stages);

    let mut dataset = DatasetStats::default();
    let mut states: Vec<RankFeatures<Feature>> = Vec::with_capacity(cfg.num_ranks);
    for d in detected {
        dataset.degenerate_triangles += d.degenerate;
        dataset.unclassified_zeros += d.unclassified;
        states.push(RankFeatures {
            features: d.features.into_iter().map(|f| (f.id(), f)).collect(),
            edges: d.edges,
        });
    }
    dataset.n_features = states.iter().map(|s| s.features.len()).sum();
    dataset.n_edges = states.iter().map(|s| s.edges.len()).sum();
    dataset.avg_degree = if dataset.n_features == 0 {
        0.0
    } else {
        2.0 * dataset.n_edges as f64 / dataset.n_features as f64
    };

    let counts_before: Vec<usize> = states.iter().map(|s| s.features.len()).collect();
    let applied = cfg.load_balance.should_balance(&counts_before);
    let mut balance_messages = 0;
    let mut kd = None;
    if applied {
        let points: Vec<_> = states
            .iter()
            .flat_map(|s| s.features.iter().map(|(_, f)| f.point()))
            .collect();
        let assignment = kd_partition(&points, cfg.num_ranks)?;
        let (moved, n) = repartition(states, &assignment)?;
        states = moved;
        balance_messages = n;
        kd = Some(assignment);
    }
    let counts_after: Vec<usize> = states.iter().map(|s| s.features.len()).collect();
    let balance = BalanceStats {
        applied,
        imbalance_before: imbalance(&counts_before),
        imbalance_after: imbalance(&counts_after),
        counts_before,
        counts_after,
        messages: balance_messages,
    };
    lap("balance", &mut stages);

    let mut partition = GraphPartition {
        num_ranks: cfg.num_ranks,
        local_elements: Vec::with_capacity(cfg.num_ranks),
        local_edges: Vec::with_capacity(cfg.num_ranks),
    };
    let mut features = Vec::with_capacity(cfg.num_ranks);
    for s in states {
        partition
            .local_elements
            .push(s.features.iter().map(|(id, _)| *id).collect());
        partition.local_edges.push(s.edges);
        features.push(s.features.into_iter().map(|(_, f)| f).collect::<Vec<_>>());
    }
    let outcome = engine(&partition)?;
    lap("engine", &mut stages);

    let (bundles, gather_messages) = gather_by_root(&outcome.forests, features)?;
    lap("gather", &mut stages);

    let mut trajectories: Vec<Trajectory> = bundles
        .par_iter()
        .flat_map_iter(|rank| rank.iter().map(|b| assemble(b, cfg.kind)))
        .collect();
    trajectories.sort_by_key(|t| t.component_id);
    lap("assemble", &mut stages);

    Ok(TrackOutcome {
        metrics: TrackMetrics {
            metrics_version: METRICS_VERSION,
            command: "track",
            feature: cfg.kind,
            num_ranks: cfg.num_ranks,
            stage_seconds: stages,
            dataset,
            balance,
            gather_messages,
            n_components: trajectories.len(),
            engine: outcome.metrics,
        },
        trajectories,
        assignment: kd,
    })
}
