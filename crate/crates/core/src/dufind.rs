//! Distributed union-find over elements spread across ranks.
//!
//! Every rank holds a forest over its local elements in which a parent
//! always has a smaller id than its child, so trees cannot form cycles and
//! the root of a finished tree is the minimum id of its component. Edges are
//! stored at the rank owning their larger endpoint.
//!
//! Each round a rank
//!
//! 1. ingests messages (grandparent queries and replies, root-status
//!    notifications, transferred edges),
//! 2. re-aims ordinary elements at their local grandparent,
//! 3. asks the owner of every hub's remote parent for the grandparent,
//! 4. unites every temporary root with its smallest neighbour, preferring
//!    local ones, and tells subscribed ranks the root is gone,
//! 5. moves edges of elements whose parent is a root or a local hub up
//!    to that parent, re-homing each at its new larger endpoint.
//!
//! Once every rank is idle and nothing is in flight, each tree is at most
//! three layers deep (child, hub, root). [`Forest::finalize`] then re-aims
//! the children of hubs without further communication.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{SocketAddr, TcpListener};

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idspace::{Edge, ElementId, GraphPartition, RankId};
use crate::transport::socket::{self, WorkerLink};
use crate::transport::{
    self, audit_no_progress, run_ranks, Envelope, RankProgram, RunMetrics, Schedule, WireMessage,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Message {
    GrandparentQuery {
        child: ElementId,
        child_rank: RankId,
        parent: ElementId,
    },
    ReplyIsRoot {
        parent: ElementId,
        child: ElementId,
    },
    ReplyGrandparent {
        child: ElementId,
        grandparent: ElementId,
        grandparent_rank: RankId,
        grandparent_known_root: bool,
    },
    NoLongerRoot {
        element: ElementId,
        new_parent: ElementId,
        new_parent_rank: RankId,
        new_parent_known_root: bool,
    },
    EdgeTransfer {
        a: ElementId,
        a_rank: RankId,
        b: ElementId,
        b_rank: RankId,
    },
}

const TAG_QUERY: u8 = 1;
const TAG_IS_ROOT: u8 = 2;
const TAG_GRANDPARENT: u8 = 3;
const TAG_NO_LONGER_ROOT: u8 = 4;
const TAG_EDGE: u8 = 5;

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() < N {
            return Err(Error::Transport("truncated message".into()));
        }
        let (head, rest) = self.bytes.split_at(N);
        self.bytes = rest;
        Ok(head.try_into().expect("length checked"))
    }
    fn id(&mut self) -> Result<ElementId> {
        Ok(ElementId(u64::from_le_bytes(self.take()?)))
    }
    fn rank(&mut self) -> Result<RankId> {
        Ok(RankId(u32::from_le_bytes(self.take()?)))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.take::<1>()?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Transport(format!("bad flag byte {b}"))),
        }
    }
}

impl WireMessage for Message {
    fn encode(&self, buf: &mut Vec<u8>) {
        let id = |buf: &mut Vec<u8>, e: ElementId| buf.extend_from_slice(&e.0.to_le_bytes());
        let rank = |buf: &mut Vec<u8>, r: RankId| buf.extend_from_slice(&r.0.to_le_bytes());
        match *self {
            Message::GrandparentQuery {
                child,
                child_rank,
                parent,
            } => {
                buf.push(TAG_QUERY);
                id(buf, child);
                rank(buf, child_rank);
                id(buf, parent);
            }
            Message::ReplyIsRoot { parent, child } => {
                buf.push(TAG_IS_ROOT);
                id(buf, parent);
                id(buf, child);
            }
            Message::ReplyGrandparent {
                child,
                grandparent,
                grandparent_rank,
                grandparent_known_root,
            } => {
                buf.push(TAG_GRANDPARENT);
                id(buf, child);
                id(buf, grandparent);
                rank(buf, grandparent_rank);
                buf.push(grandparent_known_root as u8);
            }
            Message::NoLongerRoot {
                element,
                new_parent,
                new_parent_rank,
                new_parent_known_root,
            } => {
                buf.push(TAG_NO_LONGER_ROOT);
                id(buf, element);
                id(buf, new_parent);
                rank(buf, new_parent_rank);
                buf.push(new_parent_known_root as u8);
            }
            Message::EdgeTransfer {
                a,
                a_rank,
                b,
                b_rank,
            } => {
                buf.push(TAG_EDGE);
                id(buf, a);
                rank(buf, a_rank);
                id(buf, b);
                rank(buf, b_rank);
            }
        }
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (&tag, rest) = bytes
            .split_first()
            .ok_or_else(|| Error::Transport("empty message".into()))?;
        let mut r = Reader { bytes: rest };
        let msg = match tag {
            TAG_QUERY => Message::GrandparentQuery {
                child: r.id()?,
                child_rank: r.rank()?,
                parent: r.id()?,
            },
            TAG_IS_ROOT => Message::ReplyIsRoot {
                parent: r.id()?,
                child: r.id()?,
            },
            TAG_GRANDPARENT => Message::ReplyGrandparent {
                child: r.id()?,
                grandparent: r.id()?,
                grandparent_rank: r.rank()?,
                grandparent_known_root: r.flag()?,
            },
            TAG_NO_LONGER_ROOT => Message::NoLongerRoot {
                element: r.id()?,
                new_parent: r.id()?,
                new_parent_rank: r.rank()?,
                new_parent_known_root: r.flag()?,
            },
            TAG_EDGE => Message::EdgeTransfer {
                a: r.id()?,
                a_rank: r.rank()?,
                b: r.id()?,
                b_rank: r.rank()?,
            },
            other => {
                return Err(Error::protocol(format!("unknown message tag {other}")));
            }
        };
        if !r.bytes.is_empty() {
            return Err(Error::Transport(format!(
                "{} trailing bytes after message",
                r.bytes.len()
            )));
        }
        Ok(msg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementClass {
    TemporaryRoot,
    Hub,
    Ordinary,
}

/// Parent links of one rank's local elements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forest {
    pub rank: RankId,
    /// Sorted local element ids.
    pub ids: Vec<ElementId>,
    pub parent: Vec<ElementId>,
    pub parent_rank: Vec<RankId>,
}

impl Forest {
    fn new(rank: RankId, mut ids: Vec<ElementId>) -> Result<Self> {
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate local element on rank {rank}")));
        }
        Ok(Forest {
            rank,
            parent: ids.clone(),
            parent_rank: vec![rank; ids.len()],
            ids,
        })
    }

    pub fn slot(&self, e: ElementId) -> Option<usize> {
        self.ids.binary_search(&e).ok()
    }

    pub fn parent_of(&self, e: ElementId) -> Option<(ElementId, RankId)> {
        self.slot(e).map(|s| (self.parent[s], self.parent_rank[s]))
    }

    fn is_root_slot(&self, s: usize) -> bool {
        self.parent[s] == self.ids[s]
    }

    /// Re-aims children of local hubs at the hub's (remote) parent. Fails if
    /// an element is more than two hops from a root.
    pub fn finalize(&mut self) -> Result<()> {
        for s in 0..self.ids.len() {
            if self.is_root_slot(s) || self.parent_rank[s] != self.rank {
                continue;
            }
            let ps = self.slot(self.parent[s]).ok_or_else(|| {
                Error::protocol(format!(
                    "parent {} of {} is tagged local but unknown",
                    self.parent[s], self.ids[s]
                ))
            })?;
            if self.is_root_slot(ps) {
                continue;
            }
            if self.parent_rank[ps] == self.rank {
                return Err(Error::protocol(format!(
                    "element {} is more than two hops from its root at termination",
                    self.ids[s]
                )));
            }
            self.parent[s] = self.parent[ps];
            self.parent_rank[s] = self.parent_rank[ps];
        }
        Ok(())
    }
}

/// One rank's union-find state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankState {
    forest: Forest,
    /// Stored edges per local slot; the key element is always the larger endpoint.
    edges: Vec<Vec<(ElementId, RankId)>>,
    pending_query: Vec<bool>,
    blocked_on_root: Vec<bool>,
    /// Remote element → local hubs blocked on it.
    blocked_by: FxHashMap<ElementId, Vec<usize>>,
    /// Local element → ranks that were told it is a root.
    root_subscribers: BTreeMap<ElementId, BTreeSet<RankId>>,
    /// Remote element → ranks this rank told it is a root.
    forwarded_root_info: BTreeMap<ElementId, BTreeSet<RankId>>,
    set_root: FxHashSet<ElementId>,
    set_nonroot: FxHashSet<ElementId>,
    index: SlotIndex,
    changed: bool,
}

/// Element id → forest slot.
#[derive(Clone, Debug, PartialEq, Eq)]
enum SlotIndex {
    /// Ids are exactly `base..base + len`.
    Contiguous { base: u64, len: usize },
    Map(FxHashMap<ElementId, usize>),
}

impl SlotIndex {
    fn new(ids: &[ElementId]) -> Self {
        match (ids.first(), ids.last()) {
            (Some(f), Some(l)) if l.0 - f.0 + 1 != ids.len() as u64 => {
                SlotIndex::Map(ids.iter().enumerate().map(|(s, &e)| (e, s)).collect())
            }
            _ => SlotIndex::Contiguous {
                base: ids.first().map_or(0, |f| f.0),
                len: ids.len(),
            },
        }
    }

    #[inline]
    fn get(&self, e: ElementId) -> Option<usize> {
        match self {
            SlotIndex::Contiguous { base, len } => {
                let off = e.0.wrapping_sub(*base);
                (off < *len as u64).then_some(off as usize)
            }
            SlotIndex::Map(m) => m.get(&e).copied(),
        }
    }
}

impl RankState {
    /// Sets every local element as its own parent and loads the edges this
    /// rank stores.
    pub fn init_rank(
        rank: RankId,
        local_elements: Vec<ElementId>,
        local_edges: &[Edge],
    ) -> Result<Self> {
        let forest = Forest::new(rank, local_elements)?;
        let n = forest.ids.len();
        let index = SlotIndex::new(&forest.ids);
        let mut st = RankState {
            forest,
            edges: vec![Vec::new(); n],
            pending_query: vec![false; n],
            blocked_on_root: vec![false; n],
            blocked_by: FxHashMap::default(),
            root_subscribers: BTreeMap::new(),
            forwarded_root_info: BTreeMap::new(),
            set_root: FxHashSet::default(),
            set_nonroot: FxHashSet::default(),
            index,
            changed: false,
        };
        for edge in local_edges {
            let (k, kr) = edge.larger();
            if kr != rank || st.index.get(k).is_none() {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) belongs at the owner of {k}, not rank {rank}",
                    edge.a, edge.b
                )));
            }
            let (o, or) = edge.smaller();
            if st.index.get(o).is_none() && or == rank {
                return Err(Error::invalid(format!(
                    "edge endpoint {o} tagged local to rank {rank} but not a local element"
                )));
            }
            st.ingest_edge(*edge)?;
        }
        st.changed = false;
        Ok(st)
    }

    pub fn rank(&self) -> RankId {
        self.forest.rank
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn into_forest(self) -> Forest {
        self.forest
    }

    /// All stored edges as `(key, key_rank, other, other_rank)` edges.
    pub fn stored_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().enumerate().flat_map(move |(s, list)| {
            list.iter()
                .map(move |&(o, or)| Edge::new(self.forest.ids[s], self.forest.rank, o, or))
        })
    }

    pub fn edges_of(&self, e: ElementId) -> Option<&[(ElementId, RankId)]> {
        self.index.get(e).map(|s| self.edges[s].as_slice())
    }

    pub fn is_pending(&self, e: ElementId) -> bool {
        self.index.get(e).is_some_and(|s| self.pending_query[s])
    }

    pub fn is_blocked(&self, e: ElementId) -> bool {
        self.index.get(e).is_some_and(|s| self.blocked_on_root[s])
    }

    pub fn believes_root(&self, e: ElementId) -> bool {
        self.set_root.contains(&e)
    }

    pub fn knows_nonroot(&self, e: ElementId) -> bool {
        self.set_nonroot.contains(&e)
    }

    pub fn root_subscribers(&self, e: ElementId) -> Vec<RankId> {
        self.root_subscribers
            .get(&e)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn forwarded_root_info(&self, e: ElementId) -> Vec<RankId> {
        self.forwarded_root_info
            .get(&e)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Overrides a local element's parent; for building protocol fixtures.
    pub fn set_parent(&mut self, e: ElementId, parent: ElementId, parent_rank: RankId) -> Result<()> {
        let s = self.local_slot(e)?;
        if parent > e {
            return Err(Error::invalid(format!("parent {parent} > child {e}")));
        }
        self.forest.parent[s] = parent;
        self.forest.parent_rank[s] = parent_rank;
        Ok(())
    }

    /// Seeds the "known temporary root" set; for building protocol fixtures.
    pub fn mark_believed_root(&mut self, e: ElementId) {
        if !self.set_nonroot.contains(&e) {
            self.set_root.insert(e);
        }
    }

    /// Seeds the forwarding registry; for building protocol fixtures.
    pub fn mark_forwarded(&mut self, e: ElementId, to: RankId) {
        self.forwarded_root_info.entry(e).or_default().insert(to);
    }

    fn local_slot(&self, e: ElementId) -> Result<usize> {
        self.forest
            .slot(e)
            .ok_or_else(|| Error::invalid(format!("element {e} is not local to rank {}", self.rank())))
    }

    pub fn classify(&self, e: ElementId) -> Result<ElementClass> {
        let s = self.local_slot(e)?;
        Ok(self.class_of(s))
    }

    fn class_of(&self, s: usize) -> ElementClass {
        if self.forest.is_root_slot(s) {
            ElementClass::TemporaryRoot
        } else if self.forest.parent_rank[s] != self.forest.rank {
            ElementClass::Hub
        } else {
            ElementClass::Ordinary
        }
    }

    fn set_parent_slot(&mut self, s: usize, p: ElementId, pr: RankId) -> bool {
        if p < self.forest.parent[s] {
            self.forest.parent[s] = p;
            self.forest.parent_rank[s] = pr;
            self.blocked_on_root[s] = false;
            true
        } else {
            false
        }
    }

    fn ingest_edge(&mut self, edge: Edge) -> Result<()> {
        let (k, kr) = edge.larger();
        let (o, or) = edge.smaller();
        if k == o {
            return Ok(());
        }
        let s = match (kr == self.rank()).then(|| self.index.get(k)).flatten() {
            Some(s) => s,
            None => {
                return Err(Error::protocol(format!(
                    "edge ({}, {}) delivered to rank {} which does not own {k}",
                    edge.a,
                    edge.b,
                    self.rank()
                )))
            }
        };
        self.edges[s].push((o, or));
        self.changed = true;
        Ok(())
    }

    /// Whether this rank believes `x` is a temporary root; if so `dest` is
    /// registered to hear when it stops being one.
    fn advertise_root(&mut self, x: ElementId, xr: RankId, dest: RankId) -> bool {
        let me = self.rank();
        if xr == me {
            let Some(sx) = self.index.get(x) else {
                return false;
            };
            if !self.forest.is_root_slot(sx) {
                return false;
            }
            if dest != me && self.root_subscribers.entry(x).or_default().insert(dest) {
                self.changed = true;
            }
            true
        } else if self.set_root.contains(&x) {
            if dest != xr && dest != me && self.forwarded_root_info.entry(x).or_default().insert(dest) {
                self.changed = true;
            }
            true
        } else {
            false
        }
    }

    /// Reply to a grandparent query about a local element.
    pub fn answer_query(
        &mut self,
        child: ElementId,
        child_rank: RankId,
        parent: ElementId,
    ) -> Result<(RankId, Message)> {
        let s = self.index.get(parent).ok_or_else(|| {
            Error::protocol(format!(
                "grandparent query for {parent} reached rank {} which does not own it",
                self.rank()
            ))
        })?;
        if self.forest.is_root_slot(s) {
            if self.root_subscribers.entry(parent).or_default().insert(child_rank) {
                self.changed = true;
            }
            return Ok((child_rank, Message::ReplyIsRoot { parent, child }));
        }
        let (gp, gpr) = (self.forest.parent[s], self.forest.parent_rank[s]);
        let known = self.advertise_root(gp, gpr, child_rank);
        Ok((
            child_rank,
            Message::ReplyGrandparent {
                child,
                grandparent: gp,
                grandparent_rank: gpr,
                grandparent_known_root: known,
            },
        ))
    }

    fn take_pending(&mut self, child: ElementId) -> Result<usize> {
        match self.index.get(child) {
            Some(s) if self.pending_query[s] => {
                self.pending_query[s] = false;
                self.changed = true;
                Ok(s)
            }
            _ => Err(Error::protocol(format!(
                "reply for {child} on rank {} without an outstanding query",
                self.rank()
            ))),
        }
    }

    /// Applies a `ReplyIsRoot` or `ReplyGrandparent`. Returns whether state changed.
    pub fn apply_reply(&mut self, reply: &Message) -> Result<bool> {
        let before = self.changed;
        self.changed = false;
        match *reply {
            Message::ReplyIsRoot { parent, child } => {
                let s = self.take_pending(child)?;
                if self.forest.parent[s] == parent {
                    self.blocked_on_root[s] = true;
                    self.blocked_by.entry(parent).or_default().push(s);
                    self.mark_believed_root(parent);
                }
            }
            Message::ReplyGrandparent {
                child,
                grandparent,
                grandparent_rank,
                grandparent_known_root,
            } => {
                let s = self.take_pending(child)?;
                self.set_parent_slot(s, grandparent, grandparent_rank);
                if grandparent_known_root && grandparent_rank != self.rank() {
                    self.mark_believed_root(grandparent);
                }
            }
            other => {
                return Err(Error::protocol(format!("{other:?} is not a reply")));
            }
        }
        let changed = self.changed;
        self.changed |= before;
        Ok(changed)
    }

    /// Handles word that `element` stopped being a temporary root: unblocks
    /// and re-aims hubs waiting on it, and relays the news to every rank this
    /// rank had told it was a root.
    pub fn apply_no_longer_root(
        &mut self,
        element: ElementId,
        new_parent: ElementId,
        new_parent_rank: RankId,
        new_parent_known_root: bool,
        out: &mut Vec<(RankId, Message)>,
    ) -> bool {
        let me = self.rank();
        if self.index.get(element).is_some() {
            return false;
        }
        let mut changed = self.set_root.remove(&element);
        changed |= self.set_nonroot.insert(element);
        if let Some(hubs) = self.blocked_by.remove(&element) {
            for s in hubs {
                if self.blocked_on_root[s] && self.forest.parent[s] == element {
                    self.blocked_on_root[s] = false;
                    self.set_parent_slot(s, new_parent, new_parent_rank);
                    changed = true;
                }
            }
        }
        if new_parent_known_root
            && new_parent_rank != me
            && !self.set_nonroot.contains(&new_parent)
        {
            changed |= self.set_root.insert(new_parent);
        }
        if let Some(dests) = self.forwarded_root_info.remove(&element) {
            for dest in dests {
                let known = self.advertise_root(new_parent, new_parent_rank, dest);
                out.push((
                    dest,
                    Message::NoLongerRoot {
                        element,
                        new_parent,
                        new_parent_rank,
                        new_parent_known_root: known,
                    },
                ));
            }
            changed = true;
        }
        self.changed |= changed;
        changed
    }

    fn handle(&mut self, msg: Message, out: &mut Vec<(RankId, Message)>) -> Result<()> {
        match msg {
            Message::GrandparentQuery {
                child,
                child_rank,
                parent,
            } => {
                let reply = self.answer_query(child, child_rank, parent)?;
                out.push(reply);
            }
            Message::ReplyIsRoot { .. } | Message::ReplyGrandparent { .. } => {
                self.apply_reply(&msg)?;
            }
            Message::NoLongerRoot {
                element,
                new_parent,
                new_parent_rank,
                new_parent_known_root,
            } => {
                self.apply_no_longer_root(
                    element,
                    new_parent,
                    new_parent_rank,
                    new_parent_known_root,
                    out,
                );
            }
            Message::EdgeTransfer {
                a,
                a_rank,
                b,
                b_rank,
            } => self.ingest_edge(Edge::new(a, a_rank, b, b_rank))?,
        }
        Ok(())
    }

    /// Path halving for every ordinary element whose grandparent is local.
    /// Reads parent links as they were at the start of the pass.
    pub fn update_ordinary(&mut self) -> bool {
        let me = self.rank();
        let mut changed = false;
        for s in (0..self.forest.ids.len()).rev() {
            if self.forest.is_root_slot(s) || self.forest.parent_rank[s] != me {
                continue;
            }
            let Some(ps) = self.index.get(self.forest.parent[s]) else {
                continue;
            };
            if self.forest.parent_rank[ps] != me {
                // parent is a local hub
                continue;
            }
            let gp = self.forest.parent[ps];
            changed |= self.set_parent_slot(s, gp, me);
        }
        self.changed |= changed;
        changed
    }

    /// Sends a grandparent query for `hub` unless one is outstanding or the
    /// hub is waiting on a root.
    pub fn update_hub(&mut self, hub: ElementId) -> Result<Option<(RankId, Message)>> {
        let s = self.local_slot(hub)?;
        Ok(self.update_hub_slot(s))
    }

    fn update_hub_slot(&mut self, s: usize) -> Option<(RankId, Message)> {
        if self.class_of(s) != ElementClass::Hub || self.pending_query[s] || self.blocked_on_root[s]
        {
            return None;
        }
        self.pending_query[s] = true;
        self.changed = true;
        Some((
            self.forest.parent_rank[s],
            Message::GrandparentQuery {
                child: self.forest.ids[s],
                child_rank: self.rank(),
                parent: self.forest.parent[s],
            },
        ))
    }

    /// Unites a temporary root with its smallest smaller neighbour, local
    /// ones first, and notifies subscribers. Returns whether it re-parented.
    pub fn update_root(&mut self, root: ElementId, out: &mut Vec<(RankId, Message)>) -> Result<bool> {
        let s = self.local_slot(root)?;
        Ok(self.update_root_slot(s, out))
    }

    fn update_root_slot(&mut self, s: usize, out: &mut Vec<(RankId, Message)>) -> bool {
        let me = self.rank();
        let e = self.forest.ids[s];
        if !self.forest.is_root_slot(s) {
            return false;
        }
        let mut best_local: Option<ElementId> = None;
        let mut best_remote: Option<(ElementId, RankId)> = None;
        for &(o, or) in &self.edges[s] {
            if o >= e {
                continue;
            }
            if or == me {
                best_local = Some(best_local.map_or(o, |b| b.min(o)));
            } else if best_remote.map_or(true, |(b, _)| o < b) {
                best_remote = Some((o, or));
            }
        }
        let Some((np, npr)) = best_local.map(|o| (o, me)).or(best_remote) else {
            return false;
        };
        self.forest.parent[s] = np;
        self.forest.parent_rank[s] = npr;
        self.changed = true;
        if let Some(subs) = self.root_subscribers.remove(&e) {
            for dest in subs {
                let known = self.advertise_root(np, npr, dest);
                out.push((
                    dest,
                    Message::NoLongerRoot {
                        element: e,
                        new_parent: np,
                        new_parent_rank: npr,
                        new_parent_known_root: known,
                    },
                ));
            }
        }
        true
    }

    fn qualifies_for_transfer(&self, s: usize) -> bool {
        let me = self.rank();
        let p = self.forest.parent[s];
        if p == self.forest.ids[s] {
            return false;
        }
        if self.forest.parent_rank[s] != me {
            return self.blocked_on_root[s] || self.set_root.contains(&p);
        }
        match self.index.get(p) {
            Some(ps) => self.forest.is_root_slot(ps) || self.forest.parent_rank[ps] != me,
            None => false,
        }
    }

    /// Moves the edges of `e` to its parent: each edge `(e, x)` becomes
    /// `(parent, x)` and is re-homed at its new larger endpoint. Local
    /// re-homing skips the transport.
    fn transfer_slot(&mut self, s: usize, out: &mut Vec<(RankId, Message)>) -> Result<bool> {
        if self.edges[s].is_empty() || !self.qualifies_for_transfer(s) {
            return Ok(false);
        }
        let me = self.rank();
        let (p, pr) = (self.forest.parent[s], self.forest.parent_rank[s]);
        let mut edges = std::mem::take(&mut self.edges[s]);
        edges.sort_unstable();
        edges.dedup();
        self.changed = true;
        for (o, or) in edges {
            if o == p {
                continue;
            }
            let edge = Edge::new(p, pr, o, or);
            let (_, kr) = edge.larger();
            if kr == me {
                self.ingest_edge(edge)?;
            } else {
                out.push((
                    kr,
                    Message::EdgeTransfer {
                        a: p,
                        a_rank: pr,
                        b: o,
                        b_rank: or,
                    },
                ));
            }
        }
        Ok(true)
    }

    /// Edge transfer for every qualifying element: hubs whose parent is
    /// believed to be a root, ordinary elements whose parent is a local hub,
    /// and ordinary elements whose parent is a local root.
    pub fn transfer_edges(&mut self, out: &mut Vec<(RankId, Message)>) -> Result<bool> {
        let mut changed = false;
        for s in 0..self.forest.ids.len() {
            changed |= self.transfer_slot(s, out)?;
        }
        Ok(changed)
    }

    /// One full round: ingest `inbox`, then ordinary, hub, root and edge
    /// transfer updates. Returns whether anything changed, including any
    /// message consumed or produced.
    pub fn rank_round(
        &mut self,
        inbox: Vec<Envelope<Message>>,
        out: &mut Vec<(RankId, Message)>,
    ) -> Result<bool> {
        self.changed = false;
        let out_before = out.len();
        let received = !inbox.is_empty();
        for env in inbox {
            self.handle(env.payload, out)?;
        }
        self.update_ordinary();
        for s in 0..self.forest.ids.len() {
            if let Some(q) = self.update_hub_slot(s) {
                out.push(q);
            }
        }
        for s in 0..self.forest.ids.len() {
            self.update_root_slot(s, out);
        }
        self.transfer_edges(out)?;
        Ok(self.changed || received || out.len() > out_before)
    }

    pub fn finalize(mut self) -> Result<RankState> {
        self.forest.finalize()?;
        Ok(self)
    }
}

impl RankProgram for RankState {
    type Msg = Message;

    fn rank(&self) -> RankId {
        self.forest.rank
    }

    fn step(&mut self, inbox: Vec<Envelope<Message>>, out: &mut Vec<(RankId, Message)>) -> Result<bool> {
        self.rank_round(inbox, out)
    }
}

/// Initializes one [`RankState`] per rank of `partition`.
pub fn init_states(partition: &GraphPartition) -> Result<Vec<RankState>> {
    partition
        .local_elements
        .iter()
        .zip(&partition.local_edges)
        .enumerate()
        .map(|(r, (elems, edges))| RankState::init_rank(RankId(r as u32), elems.clone(), edges))
        .collect()
}

fn lookup(forests: &[Forest], e: ElementId, r: RankId) -> Result<usize> {
    forests
        .get(r.index())
        .and_then(|f| f.slot(e))
        .ok_or_else(|| Error::AuditFailed(format!("parent {e} not found on rank {r}")))
}

/// Checks that every element reaches its root in at most two hops.
pub fn audit_three_layers(forests: &[Forest]) -> Result<()> {
    for f in forests {
        for s in 0..f.ids.len() {
            let (mut e, mut r) = (f.ids[s], f.rank);
            let mut hops = 0;
            loop {
                let fs = lookup(forests, e, r)?;
                let fr = &forests[r.index()];
                let (p, pr) = (fr.parent[fs], fr.parent_rank[fs]);
                if p == e {
                    break;
                }
                hops += 1;
                if hops > 2 {
                    return Err(Error::AuditFailed(format!(
                        "element {} is more than two hops from its root",
                        f.ids[s]
                    )));
                }
                (e, r) = (p, pr);
            }
        }
    }
    Ok(())
}

/// Checks that after finalization every element points directly at a root.
pub fn audit_finalized(forests: &[Forest]) -> Result<()> {
    for f in forests {
        for s in 0..f.ids.len() {
            let (p, pr) = (f.parent[s], f.parent_rank[s]);
            let ps = lookup(forests, p, pr)?;
            if forests[pr.index()].parent[ps] != p {
                return Err(Error::AuditFailed(format!(
                    "element {} points at non-root {p} after finalization",
                    f.ids[s]
                )));
            }
        }
    }
    Ok(())
}

/// `(element, root)` pairs sorted by element.
pub fn collect_labels(forests: &[Forest]) -> Vec<(ElementId, ElementId)> {
    let mut labels: Vec<(ElementId, ElementId)> = forests
        .iter()
        .flat_map(|f| f.ids.iter().copied().zip(f.parent.iter().copied()))
        .collect();
    labels.sort_unstable();
    labels
}

/// `element root` lines sorted by element, the label file format.
pub fn render_labels(labels: &[(ElementId, ElementId)]) -> String {
    let mut out = String::with_capacity(labels.len() * 16);
    for (e, r) in labels {
        out.push_str(&e.to_string());
        out.push(' ');
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Everything a finished engine run produces.
#[derive(Debug)]
pub struct EngineOutcome {
    pub forests: Vec<Forest>,
    pub labels: Vec<(ElementId, ElementId)>,
    pub metrics: RunMetrics,
}

/// Post-termination checks and finalization shared by all transports.
pub fn finish_forests(pre_final: Vec<Forest>) -> Result<(Vec<Forest>, Vec<(ElementId, ElementId)>)> {
    audit_three_layers(&pre_final)?;
    let mut forests = pre_final;
    for f in &mut forests {
        f.finalize()?;
    }
    audit_finalized(&forests)?;
    let labels = collect_labels(&forests);
    Ok((forests, labels))
}

/// Runs the engine on the in-process transport, audits termination, and
/// finalizes.
pub fn run_engine(partition: &GraphPartition, schedule: &Schedule, msg_cap: u64) -> Result<EngineOutcome> {
    partition.validate()?;
    let mut states = init_states(partition)?;
    let outcome = run_ranks(&mut states, schedule, msg_cap)?;
    outcome.transport.audit_empty()?;
    audit_no_progress(&states)?;
    let (forests, labels) =
        finish_forests(states.into_iter().map(RankState::into_forest).collect())?;
    Ok(EngineOutcome {
        forests,
        labels,
        metrics: outcome.metrics,
    })
}

#[derive(Serialize, Deserialize)]
struct WorkerInit {
    elements: Vec<ElementId>,
    edges: Vec<Edge>,
}

/// Runs the engine with every rank in a separate worker reached over local
/// TCP. `launch` is called once per rank with the coordinator address and
/// must start a worker that calls [`socket_worker`]; the scheduler, message
/// cap and audits are the same as in [`run_engine`].
pub fn run_engine_sockets(
    partition: &GraphPartition,
    schedule: &Schedule,
    msg_cap: u64,
    mut launch: impl FnMut(SocketAddr, RankId) -> Result<()>,
) -> Result<EngineOutcome> {
    partition.validate()?;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| Error::Transport(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
    for r in 0..partition.num_ranks {
        launch(addr, RankId(r as u32))?;
    }
    let mut remotes = socket::accept_ranks::<Message>(&listener, partition.num_ranks)?;
    for (r, remote) in remotes.iter_mut().enumerate() {
        remote.send_init(&WorkerInit {
            elements: partition.local_elements[r].clone(),
            edges: partition.local_edges[r].clone(),
        })?;
    }
    let outcome = run_ranks(&mut remotes, schedule, msg_cap)?;
    outcome.transport.audit_empty()?;
    for remote in &mut remotes {
        remote.audit()?;
    }
    let pre_final = remotes
        .iter_mut()
        .map(|r| r.finish::<Forest>())
        .collect::<Result<Vec<_>>>()?;
    let (forests, labels) = finish_forests(pre_final)?;
    Ok(EngineOutcome {
        forests,
        labels,
        metrics: outcome.metrics,
    })
}

/// Worker side of [`run_engine_sockets`]: serves one rank until the
/// coordinator finishes, then returns its unfinalized forest.
pub fn socket_worker(addr: SocketAddr, rank: RankId) -> Result<()> {
    let mut link = WorkerLink::connect(addr, rank)?;
    let result = (|| {
        let init: WorkerInit = link.recv_init()?;
        let mut state = RankState::init_rank(rank, init.elements, &init.edges)?;
        link.serve(&mut state)?;
        link.send_result(state.forest())
    })();
    if let Err(e) = &result {
        link.report_failure(&e.to_string());
    }
    result
}

/// Convenience wrapper using [`transport::DEFAULT_MSG_CAP`].
pub fn run_engine_default(partition: &GraphPartition, schedule: &Schedule) -> Result<EngineOutcome> {
    run_engine(partition, schedule, transport::DEFAULT_MSG_CAP)
}

/// Single-memory union-find with the minimum id of each component as its
/// root. Returns `(element, root)` sorted by element.
pub fn sequential_oracle(
    elements: &[ElementId],
    edges: &[(ElementId, ElementId)],
) -> Vec<(ElementId, ElementId)> {
    let mut ids: Vec<ElementId> = elements.to_vec();
    ids.extend(edges.iter().flat_map(|&(a, b)| [a, b]));
    ids.sort_unstable();
    ids.dedup();
    let idx = |e: ElementId| ids.binary_search(&e).expect("element collected above");
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let ra = find(&mut parent, idx(a));
        let rb = find(&mut parent, idx(b));
        // smaller index is the smaller id, so it stays root
        match ra.cmp(&rb) {
            std::cmp::Ordering::Less => parent[rb] = ra,
            std::cmp::Ordering::Greater => parent[ra] = rb,
            std::cmp::Ordering::Equal => {}
        }
    }
    (0..ids.len())
        .map(|i| (ids[i], ids[find(&mut parent, i)]))
        .collect()
}

/// Breadth-first component minima; an independent cross-check for
/// [`sequential_oracle`].
pub fn bfs_oracle(
    elements: &[ElementId],
    edges: &[(ElementId, ElementId)],
) -> Vec<(ElementId, ElementId)> {
    let mut adj: BTreeMap<ElementId, Vec<ElementId>> = BTreeMap::new();
    for &e in elements {
        adj.entry(e).or_default();
    }
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut label: BTreeMap<ElementId, ElementId> = BTreeMap::new();
    let keys: Vec<ElementId> = adj.keys().copied().collect();
    for start in keys {
        if label.contains_key(&start) {
            continue;
        }
        // ascending iteration: `start` is the minimum of its component
        label.insert(start, start);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[&u] {
                if let std::collections::btree_map::Entry::Vacant(slot) = label.entry(v) {
                    slot.insert(start);
                    queue.push_back(v);
                }
            }
        }
    }
    label.into_iter().collect()
}
