//! Deterministic discrete-event simulation of the asynchronous network.
//!
//! Each agent iterates at seeded-uniform gaps in `[T, T_max]`, averages its
//! own estimate with the latest one received from every neighbor, takes one
//! block projection step and, when its trigger fires, broadcasts to its
//! neighbors with seeded-uniform delays in `(0, delay_bound]`. Events at equal
//! times are ordered `Deliver < Iterate < Broadcast < Halt < Resume`, then by
//! agent id, then by insertion order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::agent::{self, AgentConfig, AgentState, Mode, NeighborSnapshot, Sampling, SnapshotEntry};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, Vector};
use crate::problem::ProblemInstance;
use crate::rng::{stream, stream_rng, SimRng};
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trigger {
    /// Broadcast after every `interval`-th local iteration.
    EveryK { interval: u64 },
    /// Broadcast at the global instants `s * spacing`, `s >= 1`.
    GlobalSchedule { spacing: f64 },
}

impl Trigger {
    fn validate(&self) -> Result<()> {
        match *self {
            Trigger::EveryK { interval: 0 } => Err(Error::InvalidParameter(
                "broadcast interval must be positive".into(),
            )),
            Trigger::GlobalSchedule { spacing } if !(spacing > 0.0) || !spacing.is_finite() => {
                Err(Error::InvalidParameter(format!(
                    "schedule spacing must be positive, got {spacing}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Whether an agent that just completed iteration `k` at time `now` (previous
/// iteration at `prev`) should broadcast.
///
/// For [`Trigger::GlobalSchedule`] this is true iff a schedule instant lies in
/// `(prev, now]`. The engine itself broadcasts at the schedule instants.
pub fn fire_trigger(trigger: &Trigger, k: u64, prev: f64, now: f64) -> bool {
    match *trigger {
        Trigger::EveryK { interval } => k > 0 && k % interval == 0,
        Trigger::GlobalSchedule { spacing } => {
            let next = (prev / spacing).floor() as u64 + 1;
            schedule_time(spacing, next) <= now
        }
    }
}

/// Time of schedule tick `s`.
pub fn schedule_time(spacing: f64, s: u64) -> f64 {
    s as f64 * spacing
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureConfig {
    /// Fraction of agents subject to failures.
    pub rho: f64,
    /// Failure intensity: mean `1/xi` iterations between halts, mean halt
    /// duration `xi`.
    pub xi: f64,
    /// Overrides the simulation seed for failure draws.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// `||x_i - x_ref||`.
    Absolute,
    /// `||x_i - x_ref|| / ||x_ref||`.
    Relative,
    /// Relative error of the component of `x_i` in the row space of `A`.
    RowSpaceRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopScope {
    /// Stop as soon as one agent meets the tolerance.
    Any,
    /// Stop once every agent meets it.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRule {
    pub metric: StopMetric,
    pub scope: StopScope,
    /// Also require all estimates to agree pairwise within the tolerance
    /// (scaled like the metric).
    #[serde(default)]
    pub consensus: bool,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            metric: StopMetric::Absolute,
            scope: StopScope::Any,
            consensus: false,
        }
    }
}

/// Simulated computation time per iteration: `c0 + c1 * |J| * n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c0: f64,
    pub c1: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { c0: 1e-4, c1: 1e-8 }
    }
}

/// Scalar simulation parameters; the JSON form of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Upper bound on message delay.
    pub delay_bound: f64,
    /// Minimum gap between consecutive iterations of one agent.
    pub iter_min: f64,
    /// Maximum gap between consecutive iterations of one agent.
    pub iter_max: f64,
    pub trigger: Trigger,
    pub failure: Option<FailureConfig>,
    pub tol: f64,
    /// Per-agent iteration cap.
    pub k_max: u64,
    /// Maximum number of processed events.
    pub event_budget: u64,
    pub seed: u64,
    pub stop: StopRule,
    pub cost: CostModel,
    /// Record the largest agent error every this many events.
    pub sample_every: Option<u64>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            delay_bound: 0.5,
            iter_min: 0.5,
            iter_max: 1.0,
            trigger: Trigger::EveryK { interval: 25 },
            failure: None,
            tol: 1e-3,
            k_max: 5000,
            event_budget: 1_000_000,
            seed: 0,
            stop: StopRule::default(),
            cost: CostModel::default(),
            sample_every: None,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("delay bound", self.delay_bound)?;
        positive("minimum iteration gap", self.iter_min)?;
        positive("tolerance", self.tol)?;
        if !(self.iter_max >= self.iter_min) || !self.iter_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "iteration gap bounds [{}, {}] are not ordered",
                self.iter_min, self.iter_max
            )));
        }
        self.trigger.validate()?;
        if let Some(f) = &self.failure {
            if !(0.0..=1.0).contains(&f.rho) {
                return Err(Error::InvalidParameter(format!(
                    "failure ratio must lie in [0, 1], got {}",
                    f.rho
                )));
            }
            positive("failure intensity", f.xi)?;
        }
        if self.sample_every == Some(0) {
            return Err(Error::InvalidParameter("sampling interval must be positive".into()));
        }
        Ok(())
    }

    /// Bound on how many sender iterations a used estimate can lag when every
    /// iteration is broadcast: `ceil((delay_bound + iter_max) / iter_min)`.
    pub fn delay_depth(&self) -> usize {
        ((self.delay_bound + self.iter_max) / self.iter_min).ceil() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub topology: Topology,
    pub agents: Vec<AgentConfig>,
    pub params: SimParams,
    /// Point the stop rule measures against.
    pub target: Vector,
    /// Least-squares minimum-norm solution, for the reported stop error.
    pub x_star: Vector,
    /// Initial estimates; zero when `None`.
    pub x0: Option<Vec<Vector>>,
}

impl SimConfig {
    /// One agent per shard of `inst`. The stop target is `x*` for the
    /// consistent and baseline modes and the augmented minimum-norm `x` for
    /// the augmented mode.
    pub fn from_instance(
        inst: &ProblemInstance,
        topology: Topology,
        block_size: usize,
        mode: Mode,
        sampling: Sampling,
        params: SimParams,
    ) -> Result<Self> {
        let m = inst.m();
        let agents = inst
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| AgentConfig::from_shard(i, s, m, block_size, mode, sampling))
            .collect::<Result<Vec<_>>>()?;
        let target = match mode {
            Mode::Augmented { lambda, .. } => {
                linalg::augmented_min_norm_solve(&inst.dense_a(), &inst.b, lambda)?.0
            }
            Mode::Consistent | Mode::Baseline => inst.x_min_norm.clone(),
        };
        let cfg = Self {
            topology,
            agents,
            params,
            target,
            x_star: inst.x_min_norm.clone(),
            x0: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n(&self) -> usize {
        self.target.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let count = self.agents.len();
        if count == 0 {
            return Err(Error::InvalidParameter("no agents".into()));
        }
        if self.topology.len() != count {
            return Err(Error::Dimension(format!(
                "topology has {} nodes for {count} agents",
                self.topology.len()
            )));
        }
        let n = self.n();
        if self.x_star.len() != n {
            return Err(Error::Dimension("target and x* lengths differ".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            a.validate()?;
            if a.id != i || a.n() != n || a.m_total != self.agents[0].m_total {
                return Err(Error::Dimension(format!("agent {i} is inconsistent with the system")));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != count || x0.iter().any(|x| x.len() != n) {
                return Err(Error::Dimension("initial estimates do not match agents".into()));
            }
        }
        Ok(())
    }

    /// Global `A` assembled from the agents' rows.
    pub fn stacked_a(&self) -> DenseMatrix {
        let m = self.agents[0].m_total;
        let mut a = DenseMatrix::zeros(m, self.n());
        for ag in &self.agents {
            a.rows_mut(ag.rows.start, ag.rows.len()).copy_from(&ag.a);
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub receiver: usize,
    pub payload: Vector,
    pub sent: f64,
    pub arrival: f64,
    pub sender_iteration: u64,
    /// Schedule tick that caused the broadcast, if any.
    pub tick: Option<u64>,
}

/// Latest message per sender.
#[derive(Debug, Clone, PartialEq)]
pub struct Mailbox {
    slots: Vec<Option<Message>>,
}

impl Mailbox {
    pub fn new(agents: usize) -> Self {
        Self {
            slots: vec![None; agents],
        }
    }

    /// Stores `msg` unless a message with the same or a newer sender
    /// iteration is already held. Returns whether it was stored.
    pub fn offer(&mut self, msg: Message) -> bool {
        let slot = &mut self.slots[msg.sender];
        match slot {
            Some(old) if old.sender_iteration >= msg.sender_iteration => false,
            _ => {
                *slot = Some(msg);
                true
            }
        }
    }

    pub fn get(&self, sender: usize) -> Option<&Message> {
        self.slots.get(sender).and_then(Option::as_ref)
    }

    pub fn stored(&self) -> impl Iterator<Item = &Message> {
        self.slots.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.stored().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Self-halting schedule of one agent.
#[derive(Debug, Clone)]
pub struct FailureState {
    pub enabled: bool,
    pub halted: bool,
    /// Iterations left before the next halt.
    pub remaining: u64,
    pub halts: u64,
    pub downtime: f64,
    halted_since: f64,
    xi: f64,
    rng: SimRng,
}

impl FailureState {
    fn disabled(rng: SimRng) -> Self {
        Self {
            enabled: false,
            halted: false,
            remaining: u64::MAX,
            halts: 0,
            downtime: 0.0,
            halted_since: 0.0,
            xi: 1.0,
            rng,
        }
    }

    /// Iterations until the next halt: `ceil(K)`, `K ~ Exp(xi)`, at least 1.
    pub fn draw_run_length(&mut self) -> u64 {
        let k: f64 = Exp::new(self.xi).expect("xi > 0").sample(&mut self.rng);
        (k.ceil() as u64).max(1)
    }

    /// Halt duration, exponential with mean `xi`.
    pub fn draw_halt(&mut self) -> f64 {
        Exp::new(1.0 / self.xi).expect("xi > 0").sample(&mut self.rng)
    }
}

/// Picks `ceil(rho * N)` failure-enabled agents uniformly and draws their
/// first run lengths.
pub fn inject_failures(agents: usize, failure: Option<&FailureConfig>, seed: u64) -> Vec<FailureState> {
    let per_agent = |seed: u64, i: usize| stream_rng(seed, stream::FAILURE_BASE + i as u64);
    let Some(f) = failure else {
        return (0..agents).map(|i| FailureState::disabled(per_agent(seed, i))).collect();
    };
    let seed = f.seed.unwrap_or(seed);
    let count = ((f.rho * agents as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut ids: Vec<usize> = (0..agents).collect();
    ids.shuffle(&mut stream_rng(seed, stream::FAILURE));
    let mut enabled = vec![false; agents];
    for &i in ids.iter().take(count.min(agents)) {
        enabled[i] = true;
    }
    (0..agents)
        .map(|i| {
            let mut st = FailureState::disabled(per_agent(seed, i));
            if enabled[i] {
                st.enabled = true;
                st.xi = f.xi;
                st.remaining = st.draw_run_length();
            }
            st
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Deliver,
    Iterate,
    Broadcast,
    Halt,
    Resume,
    Converge,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Deliver => "deliver",
            EventKind::Iterate => "iterate",
            EventKind::Broadcast => "broadcast",
            EventKind::Halt => "halt",
            EventKind::Resume => "resume",
            EventKind::Converge => "converge",
        };
        f.write_str(s)
    }
}

/// An estimate an agent averaged in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsedState {
    pub sender: usize,
    pub iteration: u64,
    /// Sender iterations completed since that estimate.
    pub stage: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventDetail {
    Iterate {
        k: u64,
        /// Global row indices of the block.
        block: Vec<usize>,
        used: Vec<UsedState>,
    },
    Broadcast {
        k: u64,
        tick: Option<u64>,
        receivers: Vec<usize>,
    },
    Deliver {
        sender: usize,
        sender_iteration: u64,
        sent: f64,
        tick: Option<u64>,
        accepted: bool,
    },
    Halt {
        duration: f64,
    },
    Resume,
    Converge {
        error: f64,
    },
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, it) in items.into_iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{it}");
    }
    s
}

impl fmt::Display for EventDetail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventDetail::Iterate { k, block, used } => write!(
                f,
                "k={k} rows={} used={}",
                join(block),
                join(used.iter().map(|u| format!("{}@{}+{}", u.sender, u.iteration, u.stage)))
            ),
            EventDetail::Broadcast { k, tick, receivers } => {
                write!(f, "k={k} to={}", join(receivers))?;
                if let Some(s) = tick {
                    write!(f, " tick={s}")?;
                }
                Ok(())
            }
            EventDetail::Deliver {
                sender,
                sender_iteration,
                sent,
                tick,
                accepted,
            } => {
                write!(f, "from={sender} k={sender_iteration} sent={sent}")?;
                if let Some(s) = tick {
                    write!(f, " tick={s}")?;
                }
                f.write_str(if *accepted { " kept" } else { " stale" })
            }
            EventDetail::Halt { duration } => write!(f, "for={duration}"),
            EventDetail::Resume => Ok(()),
            EventDetail::Converge { error } => write!(f, "error={error}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub agent: usize,
    pub detail: EventDetail,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.time)
    }

    fn push(&mut self, time: f64, kind: EventKind, agent: usize, detail: EventDetail) {
        self.records.push(EventRecord {
            time,
            kind,
            agent,
            detail,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,kind,agent,detail\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.time, r.kind, r.agent, r.detail);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-run metrics; means are over agents, times in simulated seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub k_iter: f64,
    pub t_cmp: f64,
    pub c: f64,
    pub t_comm: f64,
    #[serde(rename = "T")]
    pub wall: f64,
    /// Smallest agent distance to `x*` at stop.
    pub e_stop: f64,
    /// Mean halts per failure-enabled agent.
    pub k_stop: f64,
    /// Mean total downtime per failure-enabled agent.
    pub t_stop: f64,
}

impl MetricsRecord {
    pub fn fields(&self) -> [f64; 8] {
        [
            self.k_iter,
            self.t_cmp,
            self.c,
            self.t_comm,
            self.wall,
            self.e_stop,
            self.k_stop,
            self.t_stop,
        ]
    }

    pub fn from_fields(v: [f64; 8]) -> Self {
        Self {
            k_iter: v[0],
            t_cmp: v[1],
            c: v[2],
            t_comm: v[3],
            wall: v[4],
            e_stop: v[5],
            k_stop: v[6],
            t_stop: v[7],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    IterationCap,
    EventBudget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub events: u64,
    pub time: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub states: Vec<AgentState>,
    pub metrics: MetricsRecord,
    pub log: EventLog,
    pub stop: StopReason,
    pub events: u64,
    /// Best stop-metric value over agents at the end.
    pub final_error: f64,
    pub error_samples: Vec<ErrorSample>,
    /// Largest number of messages any mailbox held from one sender.
    pub max_per_sender: usize,
}

impl SimOutput {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }
}

#[derive(Debug)]
enum Event {
    Deliver(Message),
    Iterate,
    Broadcast { tick: Option<u64> },
    Halt,
    Resume,
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::Deliver(_) => 0,
            Event::Iterate => 1,
            Event::Broadcast { .. } => 2,
            Event::Halt => 3,
            Event::Resume => 4,
        }
    }
}

#[derive(Debug)]
struct Queued {
    time: f64,
    agent: usize,
    seq: u64,
    event: Event,
}

impl Queued {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.event.priority().cmp(&other.event.priority()))
            .then(self.agent.cmp(&other.agent))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Queued>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: f64, agent: usize, event: Event) {
        self.seq += 1;
        self.heap.push(Queued {
            time,
            agent,
            seq: self.seq,
            event,
        });
    }

    fn pop(&mut self) -> Option<Queued> {
        self.heap.pop()
    }
}

struct ErrorMeter {
    metric: StopMetric,
    target: Vector,
    scale: f64,
    basis: Option<DenseMatrix>,
}

impl ErrorMeter {
    fn new(cfg: &SimConfig) -> Self {
        let metric = cfg.params.stop.metric;
        let norm = cfg.target.norm();
        let scale = match metric {
            StopMetric::Absolute => 1.0,
            _ if norm > 0.0 => norm,
            _ => 1.0,
        };
        let basis = (metric == StopMetric::RowSpaceRelative)
            .then(|| linalg::row_space_basis(&cfg.stacked_a()));
        Self {
            metric,
            target: cfg.target.clone(),
            scale,
            basis,
        }
    }

    fn error(&self, x: &Vector) -> f64 {
        let diff = x - &self.target;
        let norm = match (&self.metric, &self.basis) {
            (StopMetric::RowSpaceRelative, Some(v)) => v.tr_mul(&diff).norm(),
            _ => diff.norm(),
        };
        norm / self.scale
    }

    fn agree(&self, states: &[Option<AgentState>], tol: f64) -> bool {
        let xs: Vec<&Vector> = states.iter().flatten().map(|s| &s.x).collect();
        xs.iter().enumerate().all(|(i, a)| {
            xs[i + 1..]
                .iter()
                .all(|b| (*a - *b).norm() / self.scale <= tol)
        })
    }
}

/// Runs until the stop rule is met, every agent hits the iteration cap, or the
/// event budget is spent.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let p = &cfg.params;
    let count = cfg.agents.len();
    let meter = ErrorMeter::new(cfg);

    let mut states: Vec<Option<AgentState>> = cfg
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let x0 = cfg.x0.as_ref().map(|v| v[i].clone());
            AgentState::new(a, x0, stream_rng(p.seed, stream::SAMPLING_BASE + i as u64)).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut errors: Vec<f64> = states
        .iter()
        .map(|s| meter.error(&s.as_ref().expect("state present").x))
        .collect();
    let mut mailboxes = vec![Mailbox::new(count); count];
    let mut failures = inject_failures(count, p.failure.as_ref(), p.seed);
    let mut sched = stream_rng(p.seed, stream::SCHEDULING);
    let gap = |rng: &mut SimRng| p.iter_min + (p.iter_max - p.iter_min) * rng.gen::<f64>();

    let mut last_iter = vec![0.0f64; count];
    let mut sent = vec![0u64; count];
    let mut comm_time = vec![0.0f64; count];
    let mut cmp_time = vec![0.0f64; count];
    let mut log = EventLog::default();
    let mut samples = Vec::new();
    let mut queue = Queue::default();

    for i in 0..count {
        let t = gap(&mut sched);
        queue.push(t, i, Event::Iterate);
    }
    if let Trigger::GlobalSchedule { spacing } = p.trigger {
        for i in 0..count {
            queue.push(schedule_time(spacing, 1), i, Event::Broadcast { tick: Some(1) });
        }
    }

    let mut events = 0u64;
    let mut now = 0.0;
    let stop = loop {
        if events >= p.event_budget {
            break StopReason::EventBudget;
        }
        let Some(q) = queue.pop() else {
            break StopReason::IterationCap;
        };
        events += 1;
        now = q.time;
        let i = q.agent;
        let mut converged = false;
        match q.event {
            Event::Deliver(msg) => {
                let (sender, sender_iteration, sent, tick) =
                    (msg.sender, msg.sender_iteration, msg.sent, msg.tick);
                let accepted = mailboxes[i].offer(msg);
                let detail = EventDetail::Deliver {
                    sender,
                    sender_iteration,
                    sent,
                    tick,
                    accepted,
                };
                log.push(now, EventKind::Deliver, i, detail);
            }
            Event::Iterate => {
                let acfg = &cfg.agents[i];
                let state = states[i].take().expect("state present");
                let mut entries = Vec::with_capacity(cfg.topology.degree(i) + 1);
                let mut used = Vec::with_capacity(entries.capacity());
                entries.push(SnapshotEntry {
                    sender: i,
                    payload: agent::snapshot_payload(acfg, &state),
                    iteration: state.k,
                });
                used.push(UsedState {
                    sender: i,
                    iteration: state.k,
                    stage: 0,
                });
                for msg in mailboxes[i].stored() {
                    let current = if msg.sender == i {
                        state.k
                    } else {
                        states[msg.sender].as_ref().expect("state present").k
                    };
                    entries.push(SnapshotEntry {
                        sender: msg.sender,
                        payload: msg.payload.clone(),
                        iteration: msg.sender_iteration,
                    });
                    used.push(UsedState {
                        sender: msg.sender,
                        iteration: msg.sender_iteration,
                        stage: current.saturating_sub(msg.sender_iteration),
                    });
                }
                let snapshot = NeighborSnapshot::new(i, entries)?;
                let state = agent::step(acfg, state, &snapshot)?;
                let k = state.k;
                let block: Vec<usize> = state.last_block.iter().map(|&j| acfg.rows.start + j).collect();
                cmp_time[i] += p.cost.c0 + p.cost.c1 * (block.len() * acfg.n()) as f64;
                errors[i] = meter.error(&state.x);
                states[i] = Some(state);
                log.push(now, EventKind::Iterate, i, EventDetail::Iterate { k, block, used });

                if let Trigger::EveryK { .. } = p.trigger {
                    if fire_trigger(&p.trigger, k, last_iter[i], now) {
                        queue.push(now, i, Event::Broadcast { tick: None });
                    }
                }
                last_iter[i] = now;

                let fail = &mut failures[i];
                let halting = fail.enabled && {
                    fail.remaining -= 1;
                    fail.remaining == 0
                };
                if halting {
                    queue.push(now, i, Event::Halt);
                } else if k < p.k_max {
                    queue.push(now + gap(&mut sched), i, Event::Iterate);
                }

                converged = match p.stop.scope {
                    StopScope::Any => errors[i] <= p.tol,
                    StopScope::All => {
                        errors.iter().all(|&e| e <= p.tol)
                            && (!p.stop.consensus || meter.agree(&states, p.tol))
                    }
                };
                if converged {
                    log.push(now, EventKind::Converge, i, EventDetail::Converge { error: errors[i] });
                }
            }
            Event::Broadcast { tick } => {
                if let (Some(s), Trigger::GlobalSchedule { spacing }) = (tick, p.trigger) {
                    queue.push(schedule_time(spacing, s + 1), i, Event::Broadcast { tick: Some(s + 1) });
                }
                if !failures[i].halted {
                    let acfg = &cfg.agents[i];
                    let state = states[i].as_ref().expect("state present");
                    let payload = agent::snapshot_payload(acfg, state);
                    let receivers = cfg.topology.neighbors(i).to_vec();
                    for &r in &receivers {
                        let delay = p.delay_bound * (1.0 - sched.gen::<f64>());
                        sent[i] += 1;
                        comm_time[i] += delay;
                        let msg = Message {
                            sender: i,
                            receiver: r,
                            payload: payload.clone(),
                            sent: now,
                            arrival: now + delay,
                            sender_iteration: state.k,
                            tick,
                        };
                        queue.push(msg.arrival, r, Event::Deliver(msg));
                    }
                    log.push(
                        now,
                        EventKind::Broadcast,
                        i,
                        EventDetail::Broadcast { k: state.k, tick, receivers },
                    );
                }
            }
            Event::Halt => {
                let fail = &mut failures[i];
                let duration = fail.draw_halt();
                fail.halted = true;
                fail.halts += 1;
                fail.halted_since = now;
                queue.push(now + duration, i, Event::Resume);
                log.push(now, EventKind::Halt, i, EventDetail::Halt { duration });
            }
            Event::Resume => {
                let fail = &mut failures[i];
                fail.halted = false;
                fail.downtime += now - fail.halted_since;
                fail.remaining = fail.draw_run_length();
                let k = states[i].as_ref().expect("state present").k;
                if k < p.k_max {
                    queue.push(now + gap(&mut sched), i, Event::Iterate);
                }
                log.push(now, EventKind::Resume, i, EventDetail::Resume);
            }
        }
        if let Some(every) = p.sample_every {
            if events % every == 0 {
                samples.push(ErrorSample {
                    events,
                    time: now,
                    max_error: errors.iter().copied().fold(0.0, f64::max),
                });
            }
        }
        if converged {
            break StopReason::Converged;
        }
        let all_capped = states.iter().flatten().all(|s| s.k >= p.k_max);
        if all_capped {
            break StopReason::IterationCap;
        }
    };

    for f in failures.iter_mut().filter(|f| f.halted) {
        f.downtime += now - f.halted_since;
    }
    let states: Vec<AgentState> = states.into_iter().map(|s| s.expect("state present")).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| v.sum::<f64>() / count as f64;
    let failed: Vec<&FailureState> = failures.iter().filter(|f| f.enabled).collect();
    let failed_mean = |f: &dyn Fn(&FailureState) -> f64| {
        if failed.is_empty() {
            0.0
        } else {
            failed.iter().map(|s| f(s)).sum::<f64>() / failed.len() as f64
        }
    };
    let metrics = MetricsRecord {
        k_iter: mean(&mut states.iter().map(|s| s.k as f64)),
        t_cmp: mean(&mut cmp_time.iter().copied()),
        c: mean(&mut sent.iter().map(|&c| c as f64)),
        t_comm: mean(&mut comm_time.iter().copied()),
        wall: now,
        e_stop: states
            .iter()
            .map(|s| (&s.x - &cfg.x_star).norm())
            .fold(f64::INFINITY, f64::min),
        k_stop: failed_mean(&|f| f.halts as f64),
        t_stop: failed_mean(&|f| f.downtime),
    };
    let max_per_sender = mailboxes
        .iter()
        .map(|mb| {
            let mut per = vec![0usize; count];
            for m in mb.stored() {
                per[m.sender] += 1;
            }
            per.into_iter().max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0);
    Ok(SimOutput {
        states,
        metrics,
        log,
        stop,
        events,
        final_error: errors.iter().copied().fold(f64::INFINITY, f64::min),
        error_samples: samples,
        max_per_sender,
    })
}

/// Like [`simulate`] but a run that does not meet the stop rule is an error.
pub fn run(cfg: &SimConfig) -> Result<SimOutput> {
    let out = simulate(cfg)?;
    if out.converged() {
        Ok(out)
    } else {
        Err(Error::NoConvergence {
            final_error: out.final_error,
        })
    }
}

/// A broadcast cascade that was not finished before the next schedule tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub tick: u64,
    pub sender: usize,
    pub receiver: usize,
    pub arrival: f64,
    /// First iteration of the receiver after the arrival.
    pub used: f64,
    /// Time of the next tick.
    pub deadline: f64,
}

/// Checks that every scheduled broadcast is delivered and used by the
/// receiver's next iteration before the following schedule tick. Cascades
/// still open when the log ends are not reported.
pub fn audit_theorem1(log: &EventLog, params: &SimParams) -> Vec<Violation> {
    let Trigger::GlobalSchedule { spacing } = params.trigger else {
        return Vec::new();
    };
    let agents = log.records.iter().map(|r| r.agent + 1).max().unwrap_or(0);
    let mut pending: Vec<Vec<(u64, usize, f64)>> = vec![Vec::new(); agents];
    let mut out = Vec::new();
    for r in &log.records {
        match (&r.kind, &r.detail) {
            (EventKind::Deliver, EventDetail::Deliver { sender, tick: Some(s), .. }) => {
                pending[r.agent].push((*s, *sender, r.time));
            }
            (EventKind::Iterate, _) => {
                for (s, sender, arrival) in pending[r.agent].drain(..) {
                    let deadline = schedule_time(spacing, s + 1);
                    if r.time > deadline {
                        out.push(Violation {
                            tick: s,
                            sender,
                            receiver: r.agent,
                            arrival,
                            used: r.time,
                            deadline,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Metrics of a finished run.
pub fn collect_metrics(out: &SimOutput) -> MetricsRecord {
    out.metrics
}
