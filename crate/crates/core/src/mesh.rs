//! Regular-grid volumes, block decomposition with one ghost layer, feature
//! detection and local edge construction.
//!
//! Every rank detects features on its ghosted block but keeps only edges
//! whose larger endpoint lies in its core, so the union over ranks equals
//! the single-rank result. Detectors read sample values from the shared
//! volume with a fixed arithmetic order, so a feature seen in a ghost layer
//! is bit-identical to the one its owner computes.

use std::collections::{BTreeSet, HashSet};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idspace::{
    decode_vertex_id, encode_face_id, encode_vertex_id, Dims, Edge, ElementId, Face, FacePlane,
    RankId, Triangle,
};

/// Absolute tolerance on the 2×2 barycentric determinant.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Scalar samples on a regular spacetime grid, row-major with time slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: Vec<usize>,
    dtype: String,
    order: String,
}

const DTYPE: &str = "f32";
const ORDER: &str = "row-major-time-slowest";

/// `<prefix>.json` and `<prefix>.raw` for a volume path given with or
/// without either extension.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("raw"))
}

impl Volume {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self> {
        if values.len() as u64 != dims.num_vertices() {
            return Err(Error::invalid(format!(
                "{} values for dims {dims} ({} expected)",
                values.len(),
                dims.num_vertices()
            )));
        }
        Ok(Volume { dims, values })
    }

    pub fn zeros(dims: Dims) -> Self {
        let n = dims.num_vertices() as usize;
        Volume {
            dims,
            values: vec![0.0; n],
        }
    }

    /// Samples `f(coords)` at every grid vertex.
    pub fn from_fn(dims: Dims, f: impl Fn(&[usize]) -> f32) -> Self {
        let n = dims.num_vertices();
        let mut coords = vec![0usize; dims.ndim()];
        let mut values = Vec::with_capacity(n as usize);
        for _ in 0..n {
            values.push(f(&coords));
            for (c, &e) in coords.iter_mut().zip(dims.extents()).rev() {
                *c += 1;
                if *c < e {
                    break;
                }
                *c = 0;
            }
        }
        Volume { dims, values }
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    fn offset(&self, coords: &[usize]) -> usize {
        let mut off = 0usize;
        for (&c, &e) in coords.iter().zip(self.dims.extents()) {
            off = off * e + c;
        }
        off
    }

    /// Sample at `coords` (slowest axis first). Panics when out of bounds.
    pub fn get(&self, coords: &[usize]) -> f32 {
        debug_assert!(self.dims.contains(coords), "{coords:?} outside {}", self.dims);
        self.values[self.offset(coords)]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (json, raw) = volume_paths(path);
        let sidecar = Sidecar {
            dims: self.dims.extents().to_vec(),
            dtype: DTYPE.into(),
            order: ORDER.into(),
        };
        let mut text = serde_json::to_string(&sidecar)?;
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (json, raw) = volume_paths(path);
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.dtype != DTYPE || sidecar.order != ORDER {
            return Err(Error::invalid(format!(
                "{}: unsupported dtype/order {:?}/{:?}",
                json.display(),
                sidecar.dtype,
                sidecar.order
            )));
        }
        let dims = Dims::new(sidecar.dims)?;
        let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        if bytes.len() as u64 != dims.num_vertices() * 4 {
            return Err(Error::invalid(format!(
                "{}: {} bytes, expected {} for dims {dims}",
                raw.display(),
                bytes.len(),
                dims.num_vertices() * 4
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(dims, values)
    }
}

/// One rank's sub-domain. Ranges are vertex index ranges per axis,
/// slowest axis first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub rank: RankId,
    pub core: Vec<Range<usize>>,
    pub ghosted: Vec<Range<usize>>,
}

fn in_ranges(ranges: &[Range<usize>], coords: &[usize]) -> bool {
    ranges.iter().zip(coords).all(|(r, c)| r.contains(c))
}

impl Block {
    pub fn in_core(&self, coords: &[usize]) -> bool {
        in_ranges(&self.core, coords)
    }

    pub fn in_ghosted(&self, coords: &[usize]) -> bool {
        in_ranges(&self.ghosted, coords)
    }

    pub fn core_len(&self) -> usize {
        self.core.iter().map(|r| r.len()).product()
    }
}

/// Splits the grid into `num_ranks` near-equal boxes by recursive bisection
/// of the longest axis (ties go to the slower axis), then grows each core
/// by one ghost layer, clamped to the domain.
pub fn decompose(dims: &Dims, num_ranks: usize) -> Result<Vec<Block>> {
    if num_ranks == 0 {
        return Err(Error::invalid("num_ranks must be >= 1"));
    }
    if num_ranks as u64 > dims.num_vertices() {
        return Err(Error::invalid(format!(
            "{num_ranks} ranks exceed the {} grid vertices of {dims}",
            dims.num_vertices()
        )));
    }
    let whole: Vec<Range<usize>> = dims.extents().iter().map(|&e| 0..e).collect();
    let mut cores = Vec::with_capacity(num_ranks);
    bisect(whole, num_ranks, &mut cores)?;
    Ok(cores
        .into_iter()
        .enumerate()
        .map(|(r, core)| {
            let ghosted = core
                .iter()
                .zip(dims.extents())
                .map(|(c, &e)| c.start.saturating_sub(1)..(c.end + 1).min(e))
                .collect();
            Block {
                rank: RankId(r as u32),
                core,
                ghosted,
            }
        })
        .collect())
}

fn bisect(region: Vec<Range<usize>>, ranks: usize, out: &mut Vec<Vec<Range<usize>>>) -> Result<()> {
    if ranks == 1 {
        out.push(region);
        return Ok(());
    }
    let axis = (0..region.len())
        .max_by(|&a, &b| region[a].len().cmp(&region[b].len()).then(b.cmp(&a)))
        .expect("at least two axes");
    let len = region[axis].len();
    let rest: usize = region
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, r)| r.len())
        .product();
    let left_ranks = ranks / 2;
    let right_ranks = ranks - left_ranks;
    let lo = left_ranks.div_ceil(rest);
    let hi = len.saturating_sub(right_ranks.div_ceil(rest));
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!(
            "cannot split a {len}x{rest} region among {ranks} ranks"
        )));
    }
    let ideal = (len * left_ranks + ranks / 2) / ranks;
    let cut = ideal.clamp(lo, hi);
    let mut left = region.clone();
    let mut right = region;
    let start = left[axis].start;
    left[axis] = start..start + cut;
    right[axis] = start + cut..right[axis].end;
    bisect(left, left_ranks, out)?;
    bisect(right, right_ranks, out)
}

/// The full set of blocks, for ownership lookups.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub dims: Dims,
    pub blocks: Vec<Block>,
}

impl BlockLayout {
    pub fn new(dims: &Dims, num_ranks: usize) -> Result<Self> {
        Ok(BlockLayout {
            dims: dims.clone(),
            blocks: decompose(dims, num_ranks)?,
        })
    }

    pub fn owner_of_coords(&self, coords: &[usize]) -> Result<RankId> {
        self.blocks
            .iter()
            .find(|b| b.in_core(coords))
            .map(|b| b.rank)
            .ok_or_else(|| Error::invalid(format!("{coords:?} lies outside {}", self.dims)))
    }

    pub fn owner_of_vertex(&self, id: ElementId) -> Result<RankId> {
        self.owner_of_coords(&decode_vertex_id(id, &self.dims)?)
    }

    /// Faces belong to the owner of their quad's minimum corner.
    pub fn owner_of_face(&self, face: &Face) -> Result<RankId> {
        self.owner_of_coords(&face.anchor)
    }
}

fn require_2d_time(dims: &Dims) -> Result<()> {
    if dims.ndim() != 3 {
        return Err(Error::invalid(format!(
            "critical points need a 2D+time volume, got dims {dims}"
        )));
    }
    Ok(())
}

/// Spatial gradient `(d/dx, d/dy)` at `(t, y, x)` from central differences
/// inside the time slice, one-sided at the slice border.
pub fn gradient(vol: &Volume, coords: [usize; 3]) -> [f64; 2] {
    let e = vol.dims().extents();
    let diff = |axis: usize| {
        let c = coords[axis];
        let at = |v: usize| {
            let mut p = coords;
            p[axis] = v;
            vol.get(&p) as f64
        };
        if c == 0 {
            at(1) - at(0)
        } else if c + 1 == e[axis] {
            at(c) - at(c - 1)
        } else {
            (at(c + 1) - at(c - 1)) / 2.0
        }
    };
    [diff(2), diff(1)]
}

/// Finite-difference spatial Hessian `[[fxx, fxy], [fxy, fyy]]`, with
/// neighbour indices clamped at the slice border.
fn hessian(vol: &Volume, c: [usize; 3]) -> [[f64; 2]; 2] {
    let e = vol.dims().extents();
    let f = |dy: isize, dx: isize| {
        let y = (c[1] as isize + dy).clamp(0, e[1] as isize - 1) as usize;
        let x = (c[2] as isize + dx).clamp(0, e[2] as isize - 1) as usize;
        vol.get(&[c[0], y, x]) as f64
    };
    let fxx = f(0, 1) - 2.0 * f(0, 0) + f(0, -1);
    let fyy = f(1, 0) - 2.0 * f(0, 0) + f(-1, 0);
    let fxy = (f(1, 1) - f(-1, 1) - f(1, -1) + f(-1, -1)) / 4.0;
    [[fxx, fxy], [fxy, fyy]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Maximum,
    Minimum,
    Saddle,
}

impl CriticalKind {
    /// `det J < 0` → saddle; `det J > 0` with negative trace → maximum,
    /// positive trace → minimum. `None` when degenerate.
    pub fn from_jacobian(j: [[f64; 2]; 2]) -> Option<Self> {
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let trace = j[0][0] + j[1][1];
        if det < 0.0 {
            Some(CriticalKind::Saddle)
        } else if det > 0.0 && trace < 0.0 {
            Some(CriticalKind::Maximum)
        } else if det > 0.0 && trace > 0.0 {
            Some(CriticalKind::Minimum)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub face_id: ElementId,
    /// Continuous `(t, y, x)` position.
    pub position: [f64; 3],
    pub kind: CriticalKind,
    pub scalar: f64,
    pub barycentric: [f64; 3],
}

/// Outcome of solving `Σ λᵢ gᵢ = 0, Σ λᵢ = 1` on one triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TriangleSolve {
    Degenerate,
    Outside,
    Inside([f64; 3]),
}

pub fn solve_barycentric(g: [[f64; 2]; 3]) -> TriangleSolve {
    // λ0 (g0 - g2) + λ1 (g1 - g2) = -g2
    let a = [g[0][0] - g[2][0], g[0][1] - g[2][1]];
    let b = [g[1][0] - g[2][0], g[1][1] - g[2][1]];
    let det = a[0] * b[1] - b[0] * a[1];
    if det.abs() < SINGULAR_TOLERANCE {
        return TriangleSolve::Degenerate;
    }
    let rhs = [-g[2][0], -g[2][1]];
    let l0 = (rhs[0] * b[1] - b[0] * rhs[1]) / det;
    let l1 = (a[0] * rhs[1] - rhs[0] * a[1]) / det;
    let l = [l0, l1, 1.0 - l0 - l1];
    if l.iter().all(|v| (0.0..=1.0).contains(v)) {
        TriangleSolve::Inside(l)
    } else {
        TriangleSolve::Outside
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CriticalDetection {
    pub points: Vec<CriticalPoint>,
    /// Triangles skipped because their system was singular.
    pub degenerate: usize,
    /// Zeros found but left unclassified (degenerate Jacobian).
    pub unclassified: usize,
}

/// Faces of the ghosted block, in a fixed order.
fn ghosted_faces(block: &Block) -> Vec<Face> {
    let g = &block.ghosted;
    let mut faces = Vec::new();
    for plane in FacePlane::ALL {
        let (u, v) = plane.axes();
        for t in g[0].clone() {
            for y in g[1].clone() {
                for x in g[2].clone() {
                    let c = [t, y, x];
                    if c[u] + 1 >= g[u].end || c[v] + 1 >= g[v].end {
                        continue;
                    }
                    for half in [Triangle::Lower, Triangle::Upper] {
                        faces.push(Face {
                            anchor: c,
                            plane,
                            half,
                        });
                    }
                }
            }
        }
    }
    faces
}

fn linear_jacobian(p: [[f64; 2]; 3], g: [[f64; 2]; 3]) -> Option<[[f64; 2]; 2]> {
    // J · [p1-p0, p2-p0] = [g1-g0, g2-g0]
    let dp = [[p[1][0] - p[0][0], p[2][0] - p[0][0]], [p[1][1] - p[0][1], p[2][1] - p[0][1]]];
    let dg = [[g[1][0] - g[0][0], g[2][0] - g[0][0]], [g[1][1] - g[0][1], g[2][1] - g[0][1]]];
    let det = dp[0][0] * dp[1][1] - dp[0][1] * dp[1][0];
    if det == 0.0 {
        return None;
    }
    let inv = [
        [dp[1][1] / det, -dp[0][1] / det],
        [-dp[1][0] / det, dp[0][0] / det],
    ];
    let mut j = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            j[r][c] = dg[r][0] * inv[0][c] + dg[r][1] * inv[1][c];
        }
    }
    Some(j)
}

/// Finds gradient zeros on every triangle of the ghosted block.
///
/// Triangles in constant-t planes are classified by the Jacobian of their
/// linearly interpolated gradient over `(x, y)`. Triangles spanning time
/// have no spatial Jacobian of their own and use the barycentric blend of
/// the corner Hessians instead.
pub fn detect_critical_points(vol: &Volume, block: &Block) -> Result<CriticalDetection> {
    require_2d_time(vol.dims())?;
    let dims = vol.dims();
    let mut det = CriticalDetection::default();
    for face in ghosted_faces(block) {
        let corners = face.corners();
        let grads = corners.map(|c| gradient(vol, c));
        let lambda = match solve_barycentric(grads) {
            TriangleSolve::Degenerate => {
                det.degenerate += 1;
                continue;
            }
            TriangleSolve::Outside => continue,
            TriangleSolve::Inside(l) => l,
        };
        let jac = if face.plane == FacePlane::Xy {
            let p = corners.map(|c| [c[2] as f64, c[1] as f64]);
            linear_jacobian(p, grads)
        } else {
            let hs = corners.map(|c| hessian(vol, c));
            let mut j = [[0.0; 2]; 2];
            for (h, l) in hs.iter().zip(lambda) {
                for r in 0..2 {
                    for c in 0..2 {
                        j[r][c] += l * h[r][c];
                    }
                }
            }
            Some(j)
        };
        let Some(kind) = jac.and_then(CriticalKind::from_jacobian) else {
            det.unclassified += 1;
            continue;
        };
        // anchor plus offsets keeps the constant axis exact
        let mut position = face.anchor.map(|a| a as f64);
        let mut scalar = 0.0;
        for (c, l) in corners.iter().zip(lambda) {
            for a in 0..3 {
                position[a] += l * (c[a] - face.anchor[a]) as f64;
            }
            scalar += l * vol.get(c) as f64;
        }
        det.points.push(CriticalPoint {
            face_id: encode_face_id(&face, dims)?,
            position,
            kind,
            scalar,
            barycentric: lambda,
        });
    }
    Ok(det)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSetVertex {
    pub vertex_id: ElementId,
    pub value: f32,
}

fn for_each_coord(ranges: &[Range<usize>], mut f: impl FnMut(&[usize])) {
    if ranges.iter().any(|r| r.is_empty()) {
        return;
    }
    let mut c: Vec<usize> = ranges.iter().map(|r| r.start).collect();
    loop {
        f(&c);
        let mut axis = ranges.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            c[axis] += 1;
            if c[axis] < ranges[axis].end {
                break;
            }
            c[axis] = ranges[axis].start;
        }
    }
}

/// Every ghosted-block vertex whose value is strictly above `threshold`.
pub fn detect_level_set(vol: &Volume, block: &Block, threshold: f32) -> Result<Vec<LevelSetVertex>> {
    let mut out = Vec::new();
    let mut err = None;
    for_each_coord(&block.ghosted, |c| {
        let v = vol.get(c);
        if v > threshold {
            match encode_vertex_id(c, vol.dims()) {
                Ok(id) => out.push(LevelSetVertex {
                    vertex_id: id,
                    value: v,
                }),
                Err(e) => err = Some(e),
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Unit-cell anchors of the ghosted block: cells whose every corner is inside it.
fn cell_anchor_ranges(block: &Block) -> Vec<Range<usize>> {
    block
        .ghosted
        .iter()
        .map(|r| r.start..r.end.saturating_sub(1))
        .collect()
}

fn keep_owned(
    pairs: BTreeSet<(ElementId, ElementId)>,
    rank: RankId,
    owner: impl Fn(ElementId) -> Result<RankId>,
) -> Result<Vec<Edge>> {
    let mut edges = Vec::new();
    for (a, b) in pairs {
        let b_rank = owner(b)?;
        if b_rank != rank {
            continue;
        }
        edges.push(Edge::new(a, owner(a)?, b, b_rank));
    }
    Ok(edges)
}

/// Links every pair of above-threshold vertices sharing a unit spacetime
/// cell. Keeps the edges this block's rank stores, sorted.
pub fn local_edges_levelset(
    vertices: &[LevelSetVertex],
    block: &Block,
    layout: &BlockLayout,
) -> Result<Vec<Edge>> {
    let dims = &layout.dims;
    let present: HashSet<ElementId> = vertices.iter().map(|v| v.vertex_id).collect();
    let nd = dims.ndim();
    let mut pairs = BTreeSet::new();
    let mut err = None;
    let mut corner_ids = Vec::with_capacity(1 << nd);
    for_each_coord(&cell_anchor_ranges(block), |anchor| {
        corner_ids.clear();
        for mask in 0..(1usize << nd) {
            let c: Vec<usize> = (0..nd).map(|a| anchor[a] + ((mask >> a) & 1)).collect();
            match encode_vertex_id(&c, dims) {
                Ok(id) if present.contains(&id) => corner_ids.push(id),
                Ok(_) => {}
                Err(e) => err = Some(e),
            }
        }
        for i in 0..corner_ids.len() {
            for j in i + 1..corner_ids.len() {
                let (a, b) = (corner_ids[i], corner_ids[j]);
                pairs.insert((a.min(b), a.max(b)));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    keep_owned(pairs, block.rank, |id| layout.owner_of_vertex(id))
}

/// The twelve triangles bounding the unit cube anchored at `(t, y, x)`.
pub fn cube_triangles(anchor: [usize; 3]) -> [Face; 12] {
    let shifted = |axis: usize| {
        let mut a = anchor;
        a[axis] += 1;
        a
    };
    let quads = [
        (anchor, FacePlane::Xy),
        (shifted(0), FacePlane::Xy),
        (anchor, FacePlane::Xt),
        (shifted(1), FacePlane::Xt),
        (anchor, FacePlane::Yt),
        (shifted(2), FacePlane::Yt),
    ];
    let mut out = [Face {
        anchor,
        plane: FacePlane::Xy,
        half: Triangle::Lower,
    }; 12];
    for (i, (a, plane)) in quads.into_iter().enumerate() {
        out[2 * i] = Face {
            anchor: a,
            plane,
            half: Triangle::Lower,
        };
        out[2 * i + 1] = Face {
            anchor: a,
            plane,
            half: Triangle::Upper,
        };
    }
    out
}

/// Links every pair of critical-point triangles bounding the same unit
/// spacetime cube. Keeps the edges this block's rank stores, sorted.
pub fn local_edges_critical(
    points: &[CriticalPoint],
    block: &Block,
    layout: &BlockLayout,
) -> Result<Vec<Edge>> {
    let dims = &layout.dims;
    require_2d_time(dims)?;
    let present: HashSet<ElementId> = points.iter().map(|p| p.face_id).collect();
    let mut pairs = BTreeSet::new();
    let mut err = None;
    let mut ids = Vec::with_capacity(12);
    for_each_coord(&cell_anchor_ranges(block), |a| {
        ids.clear();
        for face in cube_triangles([a[0], a[1], a[2]]) {
            match encode_face_id(&face, dims) {
                Ok(id) if present.contains(&id) => ids.push(id),
                Ok(_) => {}
                Err(e) => err = Some(e),
            }
        }
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let (x, y) = (ids[i], ids[j]);
                pairs.insert((x.min(y), x.max(y)));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    keep_owned(pairs, block.rank, |id| {
        let face = crate::idspace::decode_face_id(id, dims)?;
        layout.owner_of_face(&face)
    })
}
