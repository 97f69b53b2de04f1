//! kd-tree load balancing of features across ranks.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idspace::{Edge, ElementId, RankId};
use crate::transport::{Schedule, Transport};

/// `auto` balances when max/mean per-rank feature count exceeds this.
pub const AUTO_IMBALANCE_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadBalance {
    On,
    Off,
    Auto,
}

impl FromStr for LoadBalance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(LoadBalance::On),
            "off" => Ok(LoadBalance::Off),
            "auto" => Ok(LoadBalance::Auto),
            _ => Err(Error::invalid(format!("load balance must be on|off|auto, got {s:?}"))),
        }
    }
}

/// max/mean of per-rank counts; 1.0 when there is nothing to balance.
pub fn imbalance(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.is_empty() {
        return 1.0;
    }
    let max = *counts.iter().max().unwrap() as f64;
    max / (total as f64 / counts.len() as f64)
}

impl LoadBalance {
    pub fn should_balance(self, counts: &[usize]) -> bool {
        match self {
            LoadBalance::On => true,
            LoadBalance::Off => false,
            LoadBalance::Auto => imbalance(counts) > AUTO_IMBALANCE_THRESHOLD,
        }
    }
}

/// A feature's spacetime location, coordinates ordered `(t, [z], y, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub id: ElementId,
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdLeaf {
    pub rank: RankId,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdAssignment {
    pub leaves: Vec<KdLeaf>,
    pub assignment: BTreeMap<ElementId, RankId>,
}

impl KdAssignment {
    pub fn rank_of(&self, id: ElementId) -> Result<RankId> {
        self.assignment
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("feature {id} missing from assignment")))
    }

    pub fn counts(&self) -> Vec<usize> {
        self.leaves.iter().map(|l| l.count).collect()
    }

    /// Diagnostic dump: per-rank boxes and counts.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            num_ranks: usize,
            leaves: &'a [KdLeaf],
        }
        Ok(serde_json::to_string_pretty(&Dump {
            num_ranks: self.leaves.len(),
            leaves: &self.leaves,
        })?)
    }
}

/// Axis preference for ties on extent: t, x, y, z.
fn axis_priority(ndim: usize) -> Vec<usize> {
    match ndim {
        0 => vec![],
        1 => vec![0],
        2 => vec![0, 1],
        3 => vec![0, 2, 1],
        _ => {
            let mut v = vec![0, ndim - 1, ndim - 2];
            v.extend((1..ndim - 2).rev());
            v
        }
    }
}

/// Recursive exact-median splits along the widest axis of each cell.
///
/// Non-power-of-two rank counts split the rank range as `⌊k/2⌋ : ⌈k/2⌉`
/// and the points in the same proportion, so every leaf still holds
/// ⌊n/k⌋ or ⌈n/k⌉ points up to rounding. Points with equal coordinates
/// along the split axis are ordered by id.
pub fn kd_partition(points: &[FeaturePoint], num_ranks: usize) -> Result<KdAssignment> {
    if num_ranks == 0 {
        return Err(Error::invalid("num_ranks must be >= 1"));
    }
    let ndim = points.first().map_or(0, |p| p.coords.len());
    if let Some(p) = points.iter().find(|p| p.coords.len() != ndim) {
        return Err(Error::invalid(format!(
            "feature {} has {} coordinates, expected {ndim}",
            p.id,
            p.coords.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.coords.iter().any(|c| !c.is_finite())) {
        return Err(Error::invalid(format!("feature {} has a non-finite coordinate", p.id)));
    }
    let mut pts: Vec<&FeaturePoint> = points.iter().collect();
    let (lo, hi) = bounds(&pts, ndim);
    let mut leaves = Vec::with_capacity(num_ranks);
    let mut assignment = BTreeMap::new();
    split(
        &mut pts,
        0,
        num_ranks,
        lo,
        hi,
        &axis_priority(ndim),
        &mut leaves,
        &mut assignment,
    );
    Ok(KdAssignment { leaves, assignment })
}

fn bounds(pts: &[&FeaturePoint], ndim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; ndim];
    let mut hi = vec![f64::NEG_INFINITY; ndim];
    for p in pts {
        for (a, &c) in p.coords.iter().enumerate() {
            lo[a] = lo[a].min(c);
            hi[a] = hi[a].max(c);
        }
    }
    if pts.is_empty() {
        lo.fill(0.0);
        hi.fill(0.0);
    }
    (lo, hi)
}

fn by_axis(axis: usize) -> impl Fn(&&FeaturePoint, &&FeaturePoint) -> Ordering {
    move |a, b| {
        a.coords[axis]
            .total_cmp(&b.coords[axis])
            .then(a.id.cmp(&b.id))
    }
}

#[allow(clippy::too_many_arguments)]
fn split(
    pts: &mut [&FeaturePoint],
    first_rank: usize,
    ranks: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    priority: &[usize],
    leaves: &mut Vec<KdLeaf>,
    assignment: &mut BTreeMap<ElementId, RankId>,
) {
    if ranks == 1 {
        let rank = RankId(first_rank as u32);
        for p in pts.iter() {
            assignment.insert(p.id, rank);
        }
        leaves.push(KdLeaf {
            rank,
            lo,
            hi,
            count: pts.len(),
        });
        return;
    }
    let left_ranks = ranks / 2;
    let n_left = pts.len() * left_ranks / ranks;
    let (plo, phi) = bounds(pts, lo.len());
    let axis = priority
        .iter()
        .copied()
        .max_by(|&a, &b| {
            (phi[a] - plo[a])
                .total_cmp(&(phi[b] - plo[b]))
                // earlier in the priority list wins ties
                .then_with(|| rank_in(priority, b).cmp(&rank_in(priority, a)))
        });
    let (llo, mut lhi, mut rlo, rhi) = (lo.clone(), hi.clone(), lo, hi);
    if let Some(axis) = axis {
        if n_left > 0 && n_left < pts.len() {
            pts.select_nth_unstable_by(n_left, by_axis(axis));
            let (left, right) = pts.split_at_mut(n_left);
            let right_min = right[0].coords[axis];
            // right[0] is the minimum of the right half after selection.
            let left_max = left
                .iter()
                .map(|p| p.coords[axis])
                .fold(f64::NEG_INFINITY, f64::max);
            let cut = if left_max < right_min {
                (left_max + right_min) / 2.0
            } else {
                right_min
            };
            lhi[axis] = cut;
            rlo[axis] = cut;
        } else {
            let cut = if n_left == 0 { llo[axis] } else { lhi[axis] };
            lhi[axis] = cut;
            rlo[axis] = cut;
        }
    }
    let (left, right) = pts.split_at_mut(n_left);
    split(left, first_rank, left_ranks, llo, lhi, priority, leaves, assignment);
    split(
        right,
        first_rank + left_ranks,
        ranks - left_ranks,
        rlo,
        rhi,
        priority,
        leaves,
        assignment,
    );
}

fn rank_in(priority: &[usize], axis: usize) -> usize {
    priority.iter().position(|&a| a == axis).unwrap_or(usize::MAX)
}

/// One rank's share of features and stored edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankFeatures<F> {
    pub features: Vec<(ElementId, F)>,
    pub edges: Vec<Edge>,
}

impl<F> Default for RankFeatures<F> {
    fn default() -> Self {
        RankFeatures {
            features: Vec::new(),
            edges: Vec::new(),
        }
    }
}

enum Moved<F> {
    Feature(ElementId, F),
    Edge(Edge),
}

/// Moves every feature to its assigned rank and every edge to the new
/// owner of its larger endpoint, over one synchronous transport round.
/// Returns the new states (features and edges sorted) and the number of
/// messages exchanged.
pub fn repartition<F: Send>(
    states: Vec<RankFeatures<F>>,
    assignment: &KdAssignment,
) -> Result<(Vec<RankFeatures<F>>, u64)> {
    let n = states.len();
    if assignment.leaves.len() != n {
        return Err(Error::invalid(format!(
            "assignment has {} leaves for {n} ranks",
            assignment.leaves.len()
        )));
    }
    let mut transport = Transport::new(n.max(1), &Schedule::sync())?;
    for (r, state) in states.into_iter().enumerate() {
        let src = RankId(r as u32);
        for (id, f) in state.features {
            let dst = assignment.rank_of(id)?;
            transport.send(src, dst, Moved::Feature(id, f))?;
        }
        for e in state.edges {
            let e = Edge::new(e.a, assignment.rank_of(e.a)?, e.b, assignment.rank_of(e.b)?);
            let (_, dst) = e.larger();
            transport.send(src, dst, Moved::Edge(e))?;
        }
    }
    transport.barrier(&vec![true; n])?;
    let moved = transport.delivered();
    let mut out: Vec<RankFeatures<F>> = (0..n).map(|_| RankFeatures::default()).collect();
    for (r, slot) in out.iter_mut().enumerate() {
        for env in transport.drain(RankId(r as u32)) {
            match env.payload {
                Moved::Feature(id, f) => slot.features.push((id, f)),
                Moved::Edge(e) => slot.edges.push(e),
            }
        }
        slot.features.sort_by_key(|(id, _)| *id);
        slot.edges.sort();
    }
    transport.terminate();
    transport.audit_empty()?;
    Ok((out, moved))
}
