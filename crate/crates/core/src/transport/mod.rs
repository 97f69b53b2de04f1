//! Message delivery between simulated ranks.
//!
//! Two execution modes share one [`Transport`]:
//!
//! * `Sync`: messages become visible only after the next [`Transport::barrier`].
//! * `Async`: a seeded scheduler moves messages from per-pair FIFO channels
//!   into inboxes a random prefix at a time. No message waits longer than
//!   `max_delay` ticks, so every run makes progress.
//!
//! [`run_ranks`] drives a set of [`RankProgram`]s to global termination in
//! either mode. Async termination uses a double count: the run stops only
//! after two consecutive polls see every rank idle with matching sent and
//! received totals.
//!
//! Given the same inputs, seed and mode the whole trace is reproducible.
//! Rank steps chosen for one tick run in parallel, but their outgoing
//! messages are enqueued in rank order.

pub mod socket;

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idspace::RankId;

/// Default cap on total delivered messages before a run is aborted.
pub const DEFAULT_MSG_CAP: u64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// How the simulator interleaves deliveries and rank steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub seed: u64,
    pub mode: Mode,
    /// Upper bound, in ticks, on how long a message stays in flight and on
    /// how long an active rank goes without being stepped.
    pub max_delay: u32,
    /// Chance that the head of a channel is delivered on a tick.
    pub deliver_prob: f64,
    /// Chance that an active rank is stepped on a tick.
    pub step_prob: f64,
}

impl Schedule {
    pub fn sync() -> Self {
        Schedule {
            seed: 0,
            mode: Mode::Sync,
            max_delay: 1,
            deliver_prob: 1.0,
            step_prob: 1.0,
        }
    }

    pub fn asynchronous(seed: u64) -> Self {
        Schedule {
            seed,
            mode: Mode::Async,
            max_delay: 4,
            deliver_prob: 0.7,
            step_prob: 0.75,
        }
    }

    /// Slow, lumpy delivery: long delays and sparse rank activity.
    pub fn adversarial(seed: u64) -> Self {
        Schedule {
            seed,
            mode: Mode::Async,
            max_delay: 24,
            deliver_prob: 0.15,
            step_prob: 0.3,
        }
    }

    pub fn with_mode(mode: Mode, seed: u64) -> Self {
        match mode {
            Mode::Sync => Schedule {
                seed,
                ..Schedule::sync()
            },
            Mode::Async => Schedule::asynchronous(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope<M> {
    pub src: RankId,
    pub dst: RankId,
    /// Strictly increasing per `(src, dst)` pair.
    pub seq: u64,
    pub payload: M,
}

struct InFlight<M> {
    env: Envelope<M>,
    sent_at: u64,
}

/// Per-rank message counters plus idle flags, as polled by the termination detector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuiescenceState {
    pub sent: Vec<u64>,
    pub received: Vec<u64>,
    pub idle: Vec<bool>,
}

impl QuiescenceState {
    fn totals(&self) -> (u64, u64) {
        (self.sent.iter().sum(), self.received.iter().sum())
    }

    fn quiet(&self) -> bool {
        let (s, r) = self.totals();
        s == r && self.idle.iter().all(|&i| i)
    }
}

/// Double-count check over two consecutive polls.
pub fn detect_termination(first: &QuiescenceState, second: &QuiescenceState) -> bool {
    first.quiet() && second.quiet() && first.totals() == second.totals()
}

/// Streaming form of [`detect_termination`]: feed it one poll at a time.
#[derive(Debug, Default)]
pub struct TerminationDetector {
    previous: Option<QuiescenceState>,
}

impl TerminationDetector {
    pub fn observe(&mut self, poll: QuiescenceState) -> bool {
        let done = self
            .previous
            .as_ref()
            .is_some_and(|prev| detect_termination(prev, &poll));
        self.previous = Some(poll);
        done
    }
}

/// In-process transport shared by all simulated ranks.
pub struct Transport<M> {
    num_ranks: usize,
    mode: Mode,
    max_delay: u64,
    deliver_prob: f64,
    channels: Vec<VecDeque<InFlight<M>>>,
    inboxes: Vec<Vec<Envelope<M>>>,
    next_seq: Vec<u64>,
    sent: Vec<u64>,
    received: Vec<u64>,
    delivered: u64,
    clock: u64,
    terminated: bool,
    rng: ChaCha8Rng,
}

impl<M> Transport<M> {
    pub fn new(num_ranks: usize, schedule: &Schedule) -> Result<Self> {
        if num_ranks == 0 {
            return Err(Error::invalid("num_ranks must be >= 1"));
        }
        Ok(Transport {
            num_ranks,
            mode: schedule.mode,
            max_delay: schedule.max_delay.max(1) as u64,
            deliver_prob: schedule.deliver_prob.clamp(0.0, 1.0),
            channels: (0..num_ranks * num_ranks).map(|_| VecDeque::new()).collect(),
            inboxes: (0..num_ranks).map(|_| Vec::new()).collect(),
            next_seq: vec![0; num_ranks * num_ranks],
            sent: vec![0; num_ranks],
            received: vec![0; num_ranks],
            delivered: 0,
            clock: 0,
            terminated: false,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
        })
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn check_rank(&self, r: RankId) -> Result<()> {
        if r.index() >= self.num_ranks {
            return Err(Error::invalid(format!(
                "rank {r} out of range for {} ranks",
                self.num_ranks
            )));
        }
        Ok(())
    }

    /// Enqueues a message; returns its sequence number on the `(src, dst)` pair.
    pub fn send(&mut self, src: RankId, dst: RankId, payload: M) -> Result<u64> {
        self.check_rank(src)?;
        self.check_rank(dst)?;
        if self.terminated {
            return Err(Error::protocol(format!(
                "rank {src} sent to rank {dst} after global termination"
            )));
        }
        let pair = src.index() * self.num_ranks + dst.index();
        let seq = self.next_seq[pair];
        self.next_seq[pair] += 1;
        self.sent[src.index()] += 1;
        self.channels[pair].push_back(InFlight {
            env: Envelope {
                src,
                dst,
                seq,
                payload,
            },
            sent_at: self.clock,
        });
        Ok(seq)
    }

    /// Takes every delivered, unconsumed message of `rank`.
    pub fn drain(&mut self, rank: RankId) -> Vec<Envelope<M>> {
        let Some(inbox) = self.inboxes.get_mut(rank.index()) else {
            return Vec::new();
        };
        let msgs = std::mem::take(inbox);
        self.received[rank.index()] += msgs.len() as u64;
        msgs
    }

    pub fn inbox_len(&self, rank: RankId) -> usize {
        self.inboxes.get(rank.index()).map_or(0, Vec::len)
    }

    pub fn in_flight(&self) -> usize {
        self.channels.iter().map(VecDeque::len).sum()
    }

    /// Total messages moved into inboxes so far.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    fn deliver_head(&mut self, pair: usize) {
        if let Some(m) = self.channels[pair].pop_front() {
            self.delivered += 1;
            self.inboxes[m.env.dst.index()].push(m.env);
        }
    }

    /// Sync mode round boundary: delivers everything in flight and returns
    /// whether any rank changed or any message was delivered.
    pub fn barrier(&mut self, changed: &[bool]) -> Result<bool> {
        if self.mode != Mode::Sync {
            return Err(Error::protocol("barrier called in async mode"));
        }
        self.clock += 1;
        let mut moved = false;
        for pair in 0..self.channels.len() {
            while !self.channels[pair].is_empty() {
                self.deliver_head(pair);
                moved = true;
            }
        }
        Ok(moved || changed.iter().any(|&c| c))
    }

    /// Async mode delivery step. Returns the number of messages delivered.
    pub fn tick(&mut self) -> Result<usize> {
        if self.mode != Mode::Async {
            return Err(Error::protocol("tick called in sync mode"));
        }
        self.clock += 1;
        let before = self.delivered;
        for pair in 0..self.channels.len() {
            while let Some(head) = self.channels[pair].front() {
                let overdue = self.clock - head.sent_at >= self.max_delay;
                if overdue || self.rng.gen_bool(self.deliver_prob) {
                    self.deliver_head(pair);
                } else {
                    break;
                }
            }
        }
        Ok((self.delivered - before) as usize)
    }

    pub fn quiescence(&self, idle: &[bool]) -> QuiescenceState {
        QuiescenceState {
            sent: self.sent.clone(),
            received: self.received.clone(),
            idle: idle.to_vec(),
        }
    }

    /// Marks global termination; later sends are protocol violations.
    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// After termination: nothing may be in flight or waiting in an inbox.
    pub fn audit_empty(&self) -> Result<()> {
        let pending = self.in_flight() + self.inboxes.iter().map(Vec::len).sum::<usize>();
        if pending != 0 {
            return Err(Error::AuditFailed(format!(
                "{pending} messages undelivered at termination"
            )));
        }
        let (s, r): (u64, u64) = (self.sent.iter().sum(), self.received.iter().sum());
        if s != r {
            return Err(Error::AuditFailed(format!(
                "sent {s} != received {r} at termination"
            )));
        }
        Ok(())
    }
}

/// A per-rank deterministic state machine driven by [`run_ranks`].
pub trait RankProgram: Send {
    type Msg: Send;

    fn rank(&self) -> RankId;

    /// Consumes `inbox`, pushes `(dst, payload)` pairs onto `out`, and
    /// reports whether anything changed (state, or messages in or out).
    fn step(
        &mut self,
        inbox: Vec<Envelope<Self::Msg>>,
        out: &mut Vec<(RankId, Self::Msg)>,
    ) -> Result<bool>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub rounds: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
    pub busy_time_ns: u64,
    pub idle_time_ns: u64,
    /// Busy time of each round, in order.
    pub round_busy_ns: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricTotals {
    pub rounds: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
    pub busy_time_ns: u64,
    pub idle_time_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub seed: u64,
    /// Barriers (sync) or scheduler ticks (async) until termination.
    pub ticks: u64,
    pub wall_time_ns: u64,
    pub per_rank: Vec<RankMetrics>,
    pub totals: MetricTotals,
}

impl RunMetrics {
    fn new(schedule: &Schedule, n: usize) -> Self {
        RunMetrics {
            mode: schedule.mode,
            seed: schedule.seed,
            ticks: 0,
            wall_time_ns: 0,
            per_rank: vec![RankMetrics::default(); n],
            totals: MetricTotals::default(),
        }
    }

    fn finish(&mut self) {
        let mut t = MetricTotals::default();
        for r in &self.per_rank {
            t.rounds += r.rounds;
            t.msgs_sent += r.msgs_sent;
            t.msgs_received += r.msgs_received;
            t.busy_time_ns += r.busy_time_ns;
            t.idle_time_ns += r.idle_time_ns;
        }
        self.totals = t;
    }
}

struct StepResult<M> {
    changed: bool,
    out: Vec<(RankId, M)>,
    received: u64,
    busy_ns: u64,
}

fn step_one<P: RankProgram>(
    program: &mut P,
    inbox: Vec<Envelope<P::Msg>>,
) -> Result<StepResult<P::Msg>> {
    let start = Instant::now();
    let received = inbox.len() as u64;
    let mut out = Vec::new();
    let changed = program.step(inbox, &mut out)?;
    Ok(StepResult {
        changed,
        out,
        received,
        busy_ns: start.elapsed().as_nanos() as u64,
    })
}

/// Result of a completed [`run_ranks`] call: metrics plus the terminated
/// transport, kept for post-termination audits.
pub struct RunOutcome<M> {
    pub metrics: RunMetrics,
    pub transport: Transport<M>,
}

/// Runs every program to global termination.
///
/// `programs[r]` must report `rank() == r`. Aborts with
/// [`Error::MessageCapExceeded`] once more than `msg_cap` messages have been
/// delivered.
pub fn run_ranks<P: RankProgram>(
    programs: &mut [P],
    schedule: &Schedule,
    msg_cap: u64,
) -> Result<RunOutcome<P::Msg>> {
    let n = programs.len();
    for (i, p) in programs.iter().enumerate() {
        if p.rank().index() != i {
            return Err(Error::invalid(format!(
                "program at slot {i} reports rank {}",
                p.rank()
            )));
        }
    }
    let mut transport = Transport::new(n, schedule)?;
    let mut metrics = RunMetrics::new(schedule, n);
    let started = Instant::now();
    match schedule.mode {
        Mode::Sync => run_sync(programs, &mut transport, &mut metrics, msg_cap)?,
        Mode::Async => run_async(programs, schedule, &mut transport, &mut metrics, msg_cap)?,
    }
    transport.terminate();
    metrics.wall_time_ns = started.elapsed().as_nanos() as u64;
    metrics.finish();
    Ok(RunOutcome { metrics, transport })
}

fn check_cap<M>(transport: &Transport<M>, cap: u64, metrics: &RunMetrics) -> Result<()> {
    if transport.delivered() > cap {
        let worst = metrics
            .per_rank
            .iter()
            .enumerate()
            .max_by_key(|(_, m)| m.msgs_sent)
            .map(|(r, m)| format!("busiest sender rank {r} ({} msgs)", m.msgs_sent))
            .unwrap_or_default();
        return Err(Error::MessageCapExceeded {
            delivered: transport.delivered(),
            cap,
            diagnostics: format!(
                "{} ticks, {} in flight, {worst}",
                metrics.ticks,
                transport.in_flight()
            ),
        });
    }
    Ok(())
}

fn record<M>(
    transport: &mut Transport<M>,
    metrics: &mut RunMetrics,
    results: Vec<(usize, StepResult<M>)>,
    tick_ns: u64,
    stepped: &mut [bool],
) -> Result<Vec<(usize, bool)>> {
    stepped.iter_mut().for_each(|s| *s = false);
    let mut changes = Vec::with_capacity(results.len());
    for (r, res) in results {
        let m = &mut metrics.per_rank[r];
        m.rounds += 1;
        m.msgs_received += res.received;
        m.msgs_sent += res.out.len() as u64;
        m.busy_time_ns += res.busy_ns;
        m.idle_time_ns += tick_ns.saturating_sub(res.busy_ns);
        m.round_busy_ns.push(res.busy_ns);
        stepped[r] = true;
        for (dst, payload) in res.out {
            transport.send(RankId(r as u32), dst, payload)?;
        }
        changes.push((r, res.changed));
    }
    for (r, s) in stepped.iter().enumerate() {
        if !s {
            metrics.per_rank[r].idle_time_ns += tick_ns;
        }
    }
    Ok(changes)
}

fn run_sync<P: RankProgram>(
    programs: &mut [P],
    transport: &mut Transport<P::Msg>,
    metrics: &mut RunMetrics,
    cap: u64,
) -> Result<()> {
    let n = programs.len();
    let mut stepped = vec![false; n];
    loop {
        let inboxes: Vec<_> = (0..n).map(|r| transport.drain(RankId(r as u32))).collect();
        let tick = Instant::now();
        let results = programs
            .par_iter_mut()
            .zip(inboxes)
            .enumerate()
            .map(|(r, (p, inbox))| step_one(p, inbox).map(|res| (r, res)))
            .collect::<Result<Vec<_>>>()?;
        let tick_ns = tick.elapsed().as_nanos() as u64;
        let changes = record(transport, metrics, results, tick_ns, &mut stepped)?;
        let flags: Vec<bool> = changes.iter().map(|&(_, c)| c).collect();
        metrics.ticks += 1;
        let more = transport.barrier(&flags)?;
        check_cap(transport, cap, metrics)?;
        if !more {
            return Ok(());
        }
    }
}

fn run_async<P: RankProgram>(
    programs: &mut [P],
    schedule: &Schedule,
    transport: &mut Transport<P::Msg>,
    metrics: &mut RunMetrics,
    cap: u64,
) -> Result<()> {
    let n = programs.len();
    let max_delay = schedule.max_delay.max(1) as u64;
    let step_prob = schedule.step_prob.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5EED_0F_5C_4ED);
    let mut idle = vec![false; n];
    let mut last_step = vec![0u64; n];
    let mut stepped = vec![false; n];
    let mut detector = TerminationDetector::default();
    let mut tick_no = 0u64;
    loop {
        tick_no += 1;
        metrics.ticks = tick_no;
        transport.tick()?;
        check_cap(transport, cap, metrics)?;

        let active: Vec<usize> = (0..n)
            .filter(|&r| !idle[r] || transport.inbox_len(RankId(r as u32)) > 0)
            .collect();
        let mut chosen: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&r| tick_no - last_step[r] >= max_delay || rng.gen_bool(step_prob))
            .collect();
        if chosen.is_empty() && !active.is_empty() {
            chosen.push(active[rng.gen_range(0..active.len())]);
        }

        let mut jobs: Vec<(usize, &mut P, Vec<Envelope<P::Msg>>)> = Vec::new();
        {
            let mut is_chosen = vec![false; n];
            for &r in &chosen {
                is_chosen[r] = true;
            }
            for (r, p) in programs.iter_mut().enumerate() {
                if is_chosen[r] {
                    let inbox = transport.drain(RankId(r as u32));
                    jobs.push((r, p, inbox));
                }
            }
        }
        let tick = Instant::now();
        let results = jobs
            .into_par_iter()
            .map(|(r, p, inbox)| step_one(p, inbox).map(|res| (r, res)))
            .collect::<Result<Vec<_>>>()?;
        let tick_ns = tick.elapsed().as_nanos() as u64;
        for (r, _) in &results {
            last_step[*r] = tick_no;
        }
        for (r, changed) in record(transport, metrics, results, tick_ns, &mut stepped)? {
            idle[r] = !changed;
        }

        if detector.observe(transport.quiescence(&idle)) {
            return Ok(());
        }
    }
}

/// Replays one step with an empty inbox on a copy of every program and
/// fails if any copy changes or sends.
pub fn audit_no_progress<P>(programs: &[P]) -> Result<()>
where
    P: RankProgram + Clone + PartialEq,
{
    for p in programs {
        let mut copy = p.clone();
        let mut out = Vec::new();
        let changed = copy.step(Vec::new(), &mut out)?;
        if changed || !out.is_empty() || copy != *p {
            return Err(Error::AuditFailed(format!(
                "rank {} still makes progress after termination ({} messages)",
                p.rank(),
                out.len()
            )));
        }
    }
    Ok(())
}

/// Fixed-width binary encoding used on sockets and in trace dumps.
pub trait WireMessage: Sized {
    fn encode(&self, buf: &mut Vec<u8>);
    fn decode(bytes: &[u8]) -> Result<Self>;
}
