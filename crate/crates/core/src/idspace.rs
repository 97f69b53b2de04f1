//! Global element identifiers, rank identities, grid dimensions and the
//! partitioned-graph input model shared by the rest of the crate.
//!
//! Grid coordinates are always given slowest axis first: `(t, [z,] [y,] x)`.
//! Vertex ids are the row-major linearization of those coordinates, so ids
//! of one time slab are contiguous. Triangle (face) ids of a 2D+time grid
//! live in a separate block that starts right after the last vertex id.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Globally unique, totally ordered id of a mesh entity or graph node.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ElementId(pub u64);

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for ElementId {
    fn from(v: u64) -> Self {
        ElementId(v)
    }
}

/// A processor identity in `[0, num_ranks)`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RankId(pub u32);

impl RankId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An undirected edge with the owner rank of both endpoints attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub a: ElementId,
    pub a_rank: RankId,
    pub b: ElementId,
    pub b_rank: RankId,
}

impl Edge {
    pub fn new(a: ElementId, a_rank: RankId, b: ElementId, b_rank: RankId) -> Self {
        Edge { a, a_rank, b, b_rank }
    }

    /// The larger endpoint and its owner; the edge is stored there.
    pub fn larger(&self) -> (ElementId, RankId) {
        if self.a >= self.b {
            (self.a, self.a_rank)
        } else {
            (self.b, self.b_rank)
        }
    }

    pub fn smaller(&self) -> (ElementId, RankId) {
        if self.a >= self.b {
            (self.b, self.b_rank)
        } else {
            (self.a, self.a_rank)
        }
    }

    /// Same edge with endpoints ordered `(smaller, larger)`.
    pub fn canonical(&self) -> Edge {
        let (s, sr) = self.smaller();
        let (l, lr) = self.larger();
        Edge::new(s, sr, l, lr)
    }
}

/// Spacetime grid extents, slowest axis first: `[T, (Z,) (Y,) X]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Dims {
    extents: Vec<usize>,
}

impl Dims {
    /// `extents` is `[T, (Z,) (Y,) X]`; one to three spatial axes, each count ≥ 2.
    pub fn new(extents: Vec<usize>) -> Result<Self> {
        if !(2..=4).contains(&extents.len()) {
            return Err(Error::invalid(format!(
                "dims need time plus 1-3 spatial axes, got {} axes",
                extents.len()
            )));
        }
        if let Some(bad) = extents.iter().find(|&&e| e < 2) {
            return Err(Error::invalid(format!("every dim must be >= 2, got {bad}")));
        }
        let total = extents
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e as u64));
        if total.is_none() {
            return Err(Error::invalid("dims overflow a 64-bit id space"));
        }
        Ok(Dims { extents })
    }

    /// Parses `32x64x64` style strings.
    pub fn parse(s: &str) -> Result<Self> {
        let extents = s
            .split(['x', 'X', '×'])
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad dims component {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dims::new(extents)
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn ndim(&self) -> usize {
        self.extents.len()
    }

    pub fn spatial_ndim(&self) -> usize {
        self.extents.len() - 1
    }

    pub fn t(&self) -> usize {
        self.extents[0]
    }

    pub fn num_vertices(&self) -> u64 {
        self.extents.iter().map(|&e| e as u64).product()
    }

    /// Row-major strides, slowest axis first.
    pub fn strides(&self) -> Vec<u64> {
        let mut strides = vec![1u64; self.extents.len()];
        for i in (0..self.extents.len() - 1).rev() {
            strides[i] = strides[i + 1] * self.extents[i + 1] as u64;
        }
        strides
    }

    pub fn contains(&self, coords: &[usize]) -> bool {
        coords.len() == self.extents.len() && coords.iter().zip(&self.extents).all(|(c, e)| c < e)
    }
}

impl TryFrom<Vec<usize>> for Dims {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Dims::new(v)
    }
}

impl From<Dims> for Vec<usize> {
    fn from(d: Dims) -> Self {
        d.extents
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.extents.iter().map(|e| e.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

pub fn encode_vertex_id(coords: &[usize], dims: &Dims) -> Result<ElementId> {
    if coords.len() != dims.ndim() {
        return Err(Error::invalid(format!(
            "expected {} coordinates, got {}",
            dims.ndim(),
            coords.len()
        )));
    }
    let mut id = 0u64;
    for (&c, &e) in coords.iter().zip(dims.extents()) {
        if c >= e {
            return Err(Error::invalid(format!(
                "coordinate {c} out of bounds for extent {e}"
            )));
        }
        id = id * e as u64 + c as u64;
    }
    Ok(ElementId(id))
}

pub fn decode_vertex_id(id: ElementId, dims: &Dims) -> Result<Vec<usize>> {
    if id.0 >= dims.num_vertices() {
        return Err(Error::invalid(format!(
            "vertex id {id} out of range for dims {dims}"
        )));
    }
    let mut rest = id.0;
    let mut coords = vec![0usize; dims.ndim()];
    for (slot, &e) in coords.iter_mut().zip(dims.extents()).rev() {
        *slot = (rest % e as u64) as usize;
        rest /= e as u64;
    }
    Ok(coords)
}

/// Plane a quad face of the 2D+time grid lies in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacePlane {
    /// Constant t.
    Xy,
    /// Constant y.
    Xt,
    /// Constant x.
    Yt,
}

impl FacePlane {
    pub const ALL: [FacePlane; 3] = [FacePlane::Xy, FacePlane::Xt, FacePlane::Yt];

    /// The two `(t, y, x)` axes the face spans, as `(u, v)`.
    pub fn axes(self) -> (usize, usize) {
        match self {
            FacePlane::Xy => (2, 1),
            FacePlane::Xt => (2, 0),
            FacePlane::Yt => (1, 0),
        }
    }

    /// Per-axis count of valid anchors for a `[T, Y, X]` grid.
    fn anchor_extents(self, e: &[usize]) -> [usize; 3] {
        let (u, v) = self.axes();
        let mut out = [e[0], e[1], e[2]];
        out[u] -= 1;
        out[v] -= 1;
        out
    }
}

/// Which half of a quad after cutting along its lower-left to upper-right diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Triangle {
    Lower,
    Upper,
}

/// A triangle of the triangulated 2D+time grid, identified by the minimum
/// corner of its quad.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Face {
    /// `(t, y, x)` of the quad's minimum corner.
    pub anchor: [usize; 3],
    pub plane: FacePlane,
    pub half: Triangle,
}

impl Face {
    fn class_index(&self) -> usize {
        let p = match self.plane {
            FacePlane::Xy => 0,
            FacePlane::Xt => 1,
            FacePlane::Yt => 2,
        };
        p * 2 + usize::from(self.half == Triangle::Upper)
    }

    /// The three `(t, y, x)` corners. Lower: (0,0),(1,0),(1,1); upper:
    /// (0,0),(1,1),(0,1) in the face's `(u, v)` frame.
    pub fn corners(&self) -> [[usize; 3]; 3] {
        let (u, v) = self.plane.axes();
        let at = |du: usize, dv: usize| {
            let mut c = self.anchor;
            c[u] += du;
            c[v] += dv;
            c
        };
        match self.half {
            Triangle::Lower => [at(0, 0), at(1, 0), at(1, 1)],
            Triangle::Upper => [at(0, 0), at(1, 1), at(0, 1)],
        }
    }
}

fn require_2d_time(dims: &Dims) -> Result<&[usize]> {
    if dims.ndim() != 3 {
        return Err(Error::invalid(format!(
            "face ids are defined for 2D+time grids only, got dims {dims}"
        )));
    }
    Ok(dims.extents())
}

fn class_sizes(e: &[usize]) -> [u64; 6] {
    let mut sizes = [0u64; 6];
    for (i, plane) in FacePlane::ALL.iter().enumerate() {
        let a = plane.anchor_extents(e);
        let n = a.iter().map(|&v| v as u64).product::<u64>();
        sizes[2 * i] = n;
        sizes[2 * i + 1] = n;
    }
    sizes
}

/// Total number of triangle ids for a 2D+time grid.
pub fn num_faces(dims: &Dims) -> Result<u64> {
    Ok(class_sizes(require_2d_time(dims)?).iter().sum())
}

pub fn encode_face_id(face: &Face, dims: &Dims) -> Result<ElementId> {
    let e = require_2d_time(dims)?;
    let a = face.plane.anchor_extents(e);
    if face.anchor.iter().zip(&a).any(|(c, lim)| c >= lim) {
        return Err(Error::invalid(format!(
            "face anchor {:?} out of bounds for {:?} faces of dims {dims}",
            face.anchor, face.plane
        )));
    }
    let sizes = class_sizes(e);
    let class = face.class_index();
    let offset: u64 = dims.num_vertices() + sizes[..class].iter().sum::<u64>();
    let local = (face.anchor[0] as u64 * a[1] as u64 + face.anchor[1] as u64) * a[2] as u64
        + face.anchor[2] as u64;
    Ok(ElementId(offset + local))
}

pub fn decode_face_id(id: ElementId, dims: &Dims) -> Result<Face> {
    let e = require_2d_time(dims)?;
    let sizes = class_sizes(e);
    let mut rest = id
        .0
        .checked_sub(dims.num_vertices())
        .ok_or_else(|| Error::invalid(format!("id {id} is a vertex id, not a face id")))?;
    for (class, &size) in sizes.iter().enumerate() {
        if rest < size {
            let plane = FacePlane::ALL[class / 2];
            let half = if class % 2 == 0 {
                Triangle::Lower
            } else {
                Triangle::Upper
            };
            let a = plane.anchor_extents(e);
            let x = (rest % a[2] as u64) as usize;
            rest /= a[2] as u64;
            let y = (rest % a[1] as u64) as usize;
            let t = (rest / a[1] as u64) as usize;
            return Ok(Face {
                anchor: [t, y, x],
                plane,
                half,
            });
        }
        rest -= size;
    }
    Err(Error::invalid(format!("face id {id} out of range for dims {dims}")))
}

/// Elements and edges distributed over ranks.
///
/// Every edge sits at the rank owning its larger endpoint, and the element
/// sets of all ranks are disjoint.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GraphPartition {
    pub num_ranks: usize,
    /// Sorted local element ids per rank.
    pub local_elements: Vec<Vec<ElementId>>,
    pub local_edges: Vec<Vec<Edge>>,
}

impl GraphPartition {
    /// Builds a partition from an owner function, placing every edge at the
    /// owner of its larger endpoint. Self-loops are dropped.
    pub fn from_owners(
        num_ranks: usize,
        elements: impl IntoIterator<Item = ElementId>,
        edges: impl IntoIterator<Item = (ElementId, ElementId)>,
        owner: impl Fn(ElementId) -> Result<RankId>,
    ) -> Result<Self> {
        if num_ranks == 0 {
            return Err(Error::invalid("num_ranks must be >= 1"));
        }
        let mut local_elements = vec![Vec::new(); num_ranks];
        for e in elements {
            let r = owner(e)?;
            local_elements
                .get_mut(r.index())
                .ok_or_else(|| Error::invalid(format!("owner rank {r} out of range")))?
                .push(e);
        }
        for l in &mut local_elements {
            l.sort_unstable();
            l.dedup();
        }
        let mut local_edges = vec![Vec::new(); num_ranks];
        for (a, b) in edges {
            if a == b {
                continue;
            }
            let edge = Edge::new(a, owner(a)?, b, owner(b)?);
            let (_, r) = edge.larger();
            local_edges[r.index()].push(edge);
        }
        Ok(GraphPartition {
            num_ranks,
            local_elements,
            local_edges,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.local_elements.iter().map(Vec::len).sum()
    }

    pub fn num_edges(&self) -> usize {
        self.local_edges.iter().map(Vec::len).sum()
    }

    pub fn owner_map(&self) -> OwnerMap {
        let mut map = HashMap::with_capacity(self.num_elements());
        for (r, elems) in self.local_elements.iter().enumerate() {
            for &e in elems {
                map.insert(e, RankId(r as u32));
            }
        }
        OwnerMap { map }
    }

    /// Checks disjointness and the edge placement rule.
    pub fn validate(&self) -> Result<()> {
        if self.num_ranks == 0
            || self.local_elements.len() != self.num_ranks
            || self.local_edges.len() != self.num_ranks
        {
            return Err(Error::invalid("partition rank count mismatch"));
        }
        let owners = self.owner_map();
        if owners.len() != self.num_elements() {
            return Err(Error::invalid("an element is assigned to more than one rank"));
        }
        for (r, edges) in self.local_edges.iter().enumerate() {
            for edge in edges {
                for (e, er) in [(edge.a, edge.a_rank), (edge.b, edge.b_rank)] {
                    let owner = owners.owner_of(e)?;
                    if owner != er {
                        return Err(Error::invalid(format!(
                            "edge endpoint {e} tagged with rank {er} but owned by {owner}"
                        )));
                    }
                }
                let (_, lr) = edge.larger();
                if lr.index() != r {
                    return Err(Error::invalid(format!(
                        "edge ({}, {}) stored at rank {r}, expected rank {lr}",
                        edge.a, edge.b
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Element → owner lookup.
#[derive(Clone, Debug, Default)]
pub struct OwnerMap {
    map: HashMap<ElementId, RankId>,
}

impl OwnerMap {
    pub fn owner_of(&self, id: ElementId) -> Result<RankId> {
        self.map
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown element {id}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn owner_of(id: ElementId, partition: &GraphPartition) -> Result<RankId> {
    for (r, elems) in partition.local_elements.iter().enumerate() {
        if elems.binary_search(&id).is_ok() {
            return Ok(RankId(r as u32));
        }
    }
    Err(Error::invalid(format!("unknown element {id}")))
}

/// A graph read from the raw text format.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawGraph {
    /// Sorted, deduplicated universe of element ids.
    pub elements: Vec<ElementId>,
    pub edges: Vec<(ElementId, ElementId)>,
}

/// Parses the raw-graph text format: one `a b` edge per line, `#` comments,
/// blank lines ignored. A line holding a single id declares an isolated element.
pub fn parse_raw_graph(text: &str) -> Result<RawGraph> {
    let mut elements = Vec::new();
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u64>().map(ElementId).map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("not a decimal id: {tok:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match ids[..] {
            [a] => elements.push(a),
            [a, b] => {
                elements.push(a);
                elements.push(b);
                edges.push((a, b));
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected one or two ids, found {}", ids.len()),
                })
            }
        }
    }
    elements.sort_unstable();
    elements.dedup();
    Ok(RawGraph { elements, edges })
}

pub fn read_raw_graph(path: &Path) -> Result<RawGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_raw_graph(&text)
}

/// Parses a partition file of `id rank` lines.
pub fn parse_partition_file(text: &str, num_ranks: usize) -> Result<HashMap<ElementId, RankId>> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Parse {
            line: lineno + 1,
            msg,
        };
        if toks.len() != 2 {
            return Err(bad(format!("expected `id rank`, found {} fields", toks.len())));
        }
        let id = toks[0]
            .parse::<u64>()
            .map_err(|_| bad(format!("not a decimal id: {:?}", toks[0])))?;
        let rank = toks[1]
            .parse::<u32>()
            .map_err(|_| bad(format!("not a rank: {:?}", toks[1])))?;
        if rank as usize >= num_ranks {
            return Err(bad(format!("rank {rank} >= num_ranks {num_ranks}")));
        }
        if map.insert(ElementId(id), RankId(rank)).is_some() {
            return Err(bad(format!("element {id} listed twice")));
        }
    }
    Ok(map)
}

/// Splits the sorted element list into `num_ranks` contiguous id ranges of
/// near-equal size. Returns the first id of each rank's range.
pub fn range_boundaries(elements: &[ElementId], num_ranks: usize) -> Vec<ElementId> {
    (0..num_ranks)
        .map(|r| {
            let start = r * elements.len() / num_ranks;
            elements.get(start).copied().unwrap_or(ElementId(u64::MAX))
        })
        .collect()
}

/// Partitions a raw graph, either by an explicit `id → rank` table or by
/// even id ranges.
pub fn partition_raw_graph(
    graph: &RawGraph,
    num_ranks: usize,
    explicit: Option<&HashMap<ElementId, RankId>>,
) -> Result<GraphPartition> {
    if num_ranks == 0 {
        return Err(Error::invalid("num_ranks must be >= 1"));
    }
    let elements: Vec<ElementId> = match explicit {
        Some(table) => {
            let mut all: Vec<ElementId> = graph.elements.clone();
            all.extend(table.keys().copied());
            all.sort_unstable();
            all.dedup();
            all
        }
        None => graph.elements.clone(),
    };
    match explicit {
        Some(table) => GraphPartition::from_owners(
            num_ranks,
            elements.iter().copied(),
            graph.edges.iter().copied(),
            |e| {
                table
                    .get(&e)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("element {e} missing from partition file")))
            },
        ),
        None => {
            let bounds = range_boundaries(&elements, num_ranks);
            let owner = |e: ElementId| {
                // last boundary <= e
                let r = bounds.partition_point(|&b| b <= e).saturating_sub(1);
                Ok(RankId(r as u32))
            };
            GraphPartition::from_owners(
                num_ranks,
                elements.iter().copied(),
                graph.edges.iter().copied(),
                owner,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: &[usize]) -> Dims {
        Dims::new(v.to_vec()).unwrap()
    }

    #[test]
    fn vertex_ids_follow_row_major_time_slowest() {
        let dims = d(&[4, 4, 4]);
        assert_eq!(encode_vertex_id(&[0, 0, 0], &dims).unwrap(), ElementId(0));
        assert_eq!(encode_vertex_id(&[0, 0, 3], &dims).unwrap(), ElementId(3));
        assert_eq!(encode_vertex_id(&[1, 2, 3], &dims).unwrap(), ElementId(27));
        assert_eq!(decode_vertex_id(ElementId(0), &dims).unwrap(), vec![0, 0, 0]);
        assert_eq!(decode_vertex_id(ElementId(27), &dims).unwrap(), vec![1, 2, 3]);
        assert_eq!(decode_vertex_id(ElementId(63), &dims).unwrap(), vec![3, 3, 3]);
    }

    #[test]
    fn out_of_range_vertex_rejected() {
        let dims = d(&[4, 4, 4]);
        assert!(encode_vertex_id(&[0, 4, 0], &dims).is_err());
        assert!(encode_vertex_id(&[0, 0], &dims).is_err());
        assert!(decode_vertex_id(ElementId(64), &dims).is_err());
    }

    #[test]
    fn dims_validation() {
        assert!(Dims::new(vec![4]).is_err());
        assert!(Dims::new(vec![4, 1, 4]).is_err());
        assert!(Dims::new(vec![2, 2, 2, 2, 2]).is_err());
        assert_eq!(Dims::parse("32x64x64").unwrap().extents(), &[32, 64, 64]);
        assert!(Dims::parse("32xx64").is_err());
    }

    fn all_faces(dims: &Dims) -> Vec<Face> {
        let e = dims.extents();
        let mut faces = Vec::new();
        for plane in FacePlane::ALL {
            let (u, v) = plane.axes();
            for t in 0..e[0] {
                for y in 0..e[1] {
                    for x in 0..e[2] {
                        let c = [t, y, x];
                        if c[u] + 1 >= e[u] || c[v] + 1 >= e[v] {
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

    #[test]
    fn face_ids_are_disjoint_from_vertices_and_injective() {
        let dims = d(&[3, 3, 3]);
        let first = Face {
            anchor: [0, 0, 0],
            plane: FacePlane::Xy,
            half: Triangle::Lower,
        };
        assert_eq!(encode_face_id(&first, &dims).unwrap(), ElementId(27));

        let faces = all_faces(&dims);
        // 3 orientations x (3 * 2 * 2) quads x 2 triangles
        assert_eq!(faces.len(), 2 * 3 * 12);
        assert_eq!(num_faces(&dims).unwrap(), faces.len() as u64);
        let mut ids: Vec<u64> = faces
            .iter()
            .map(|f| encode_face_id(f, &dims).unwrap().0)
            .collect();
        for (f, &id) in faces.iter().zip(&ids) {
            assert_eq!(decode_face_id(ElementId(id), &dims).unwrap(), *f);
        }
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), faces.len());
        assert_eq!(ids[0], 27);
        assert_eq!(*ids.last().unwrap(), 27 + faces.len() as u64 - 1);
    }

    #[test]
    fn face_anchor_bounds() {
        let dims = d(&[3, 3, 3]);
        let f = Face {
            anchor: [2, 0, 0],
            plane: FacePlane::Xt,
            half: Triangle::Lower,
        };
        assert!(encode_face_id(&f, &dims).is_err());
        let f = Face {
            anchor: [2, 1, 1],
            plane: FacePlane::Xy,
            half: Triangle::Upper,
        };
        assert!(encode_face_id(&f, &dims).is_ok());
        assert!(encode_face_id(&f, &d(&[3, 3, 3, 3])).is_err());
    }

    #[test]
    fn owner_lookup() {
        let p = GraphPartition::from_owners(
            2,
            (1..=4).map(ElementId),
            [(ElementId(2), ElementId(3))],
            |e| Ok(RankId(if e.0 <= 2 { 0 } else { 1 })),
        )
        .unwrap();
        assert_eq!(owner_of(ElementId(3), &p).unwrap(), RankId(1));
        assert!(owner_of(ElementId(9), &p).is_err());
        assert_eq!(p.local_edges[1].len(), 1);
        p.validate().unwrap();

        let single =
            GraphPartition::from_owners(1, (0..10).map(ElementId), [], |_| Ok(RankId(0))).unwrap();
        for i in 0..10 {
            assert_eq!(owner_of(ElementId(i), &single).unwrap(), RankId(0));
        }
    }

    #[test]
    fn validate_catches_misplaced_edge() {
        let mut p = GraphPartition::from_owners(
            2,
            (1..=4).map(ElementId),
            [(ElementId(2), ElementId(3))],
            |e| Ok(RankId(if e.0 <= 2 { 0 } else { 1 })),
        )
        .unwrap();
        let e = p.local_edges[1].pop().unwrap();
        p.local_edges[0].push(e);
        assert!(p.validate().is_err());
    }

    #[test]
    fn raw_graph_parsing() {
        let g = parse_raw_graph("# comment\n1 2\n\n2 3\n7\n").unwrap();
        assert_eq!(
            g.elements,
            vec![ElementId(1), ElementId(2), ElementId(3), ElementId(7)]
        );
        assert_eq!(g.edges.len(), 2);
        let err = parse_raw_graph("1 2\n3 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(
            parse_raw_graph("1 2 3\n").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn range_partition_is_even_and_places_edges_at_larger_owner() {
        let g = RawGraph {
            elements: (0..10).map(ElementId).collect(),
            edges: vec![(ElementId(0), ElementId(9)), (ElementId(4), ElementId(5))],
        };
        let p = partition_raw_graph(&g, 3, None).unwrap();
        p.validate().unwrap();
        let sizes: Vec<usize> = p.local_elements.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 4]);
        // more ranks than elements leaves some ranks empty
        let p = partition_raw_graph(&g, 16, None).unwrap();
        p.validate().unwrap();
        assert_eq!(p.num_elements(), 10);
    }

    #[test]
    fn partition_file_parsing() {
        let t = parse_partition_file("1 0\n2 1\n", 2).unwrap();
        assert_eq!(t[&ElementId(2)], RankId(1));
        assert!(parse_partition_file("1 2\n", 2).is_err());
        assert!(parse_partition_file("1 0\n1 1\n", 2).is_err());
    }

    proptest! {
        #[test]
        fn vertex_id_round_trip(
            extents in proptest::collection::vec(2usize..=16, 2..=4),
            seed in any::<u64>(),
        ) {
            let dims = Dims::new(extents).unwrap();
            let id = ElementId(seed % dims.num_vertices());
            let coords = decode_vertex_id(id, &dims).unwrap();
            prop_assert_eq!(encode_vertex_id(&coords, &dims).unwrap(), id);
        }

        #[test]
        fn vertex_ids_monotone_in_lexicographic_order(
            extents in proptest::collection::vec(2usize..=16, 2..=4),
            a in any::<u64>(),
            b in any::<u64>(),
        ) {
            let dims = Dims::new(extents).unwrap();
            let ca = decode_vertex_id(ElementId(a % dims.num_vertices()), &dims).unwrap();
            let cb = decode_vertex_id(ElementId(b % dims.num_vertices()), &dims).unwrap();
            let ia = encode_vertex_id(&ca, &dims).unwrap();
            let ib = encode_vertex_id(&cb, &dims).unwrap();
            prop_assert_eq!(ca.cmp(&cb), ia.cmp(&ib));
        }
    }
}
