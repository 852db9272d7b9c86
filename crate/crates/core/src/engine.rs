//! Discrete-event simulation of a serving cluster.
//!
//! Each node runs one batch at a time. Batch durations come from the cost
//! model; the node's scheduler is consulted whenever a batch finishes or an
//! idle node receives work. Everything is single-threaded and seeded, so
//! equal inputs give equal outputs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{BatchPlan, CostModel, CostModelError};
use crate::scalar::Scalar;
use crate::sched::{
    BatchFlags, DecodeEntry, NodeRole, PolicyConfig, PrefillEntry, SchedError, Scheduler, SchedulerView,
};
use crate::workload::{fmt_seconds, Request, RequestId};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("node {node}: {source}")]
    Sched {
        node: usize,
        #[source]
        source: SchedError,
    },
    #[error(
        "KV memory overflow on node {node} at batch {batch_seq} (t={time}): {needed} tokens needed, capacity {capacity}"
    )]
    MemoryOverflow {
        node: usize,
        batch_seq: u64,
        time: f64,
        needed: u64,
        capacity: u64,
    },
    #[error("node {node} batch {batch_seq}: illegal plan: {msg}")]
    IllegalPlan { node: usize, batch_seq: u64, msg: String },
    #[error(transparent)]
    Cost(#[from] CostModelError),
    #[error("invalid trace: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Router {
    #[default]
    UniformRandom,
    RoundRobin,
}

#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub cost: CostModel<T>,
    pub roles: Vec<NodeRole>,
    pub router: Router,
    pub policy: PolicyConfig<T>,
    /// Stop before the first event later than this. `None` runs until the
    /// system drains.
    pub horizon: Option<T>,
    pub seed: u64,
    /// Require every prompt length to be a multiple of `t_lcm`.
    pub aligned_prompts: bool,
    pub kv_transfer_delay: T,
}

impl<T: Scalar> SimConfig<T> {
    /// `nodes` identical unified nodes, or for disaggregated policies one
    /// prefill node plus `nodes - 1` decode nodes.
    pub fn new(cost: CostModel<T>, policy: PolicyConfig<T>, nodes: usize) -> Self {
        let roles = if policy.is_disaggregated() {
            let mut r = vec![NodeRole::Prefill];
            r.extend(std::iter::repeat_n(NodeRole::Decode, nodes.saturating_sub(1)));
            r
        } else {
            vec![NodeRole::Unified; nodes]
        };
        SimConfig {
            cost,
            roles,
            router: Router::UniformRandom,
            policy,
            horizon: None,
            seed: 0,
            aligned_prompts: false,
            kv_transfer_delay: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.roles.is_empty() {
            return Err(EngineError::Config("at least one node is required".into()));
        }
        let prefill = self.roles.iter().filter(|r| **r == NodeRole::Prefill).count();
        let decode = self.roles.iter().filter(|r| **r == NodeRole::Decode).count();
        if self.policy.is_disaggregated() {
            if prefill == 0 || decode == 0 || prefill + decode != self.roles.len() {
                return Err(EngineError::Config(
                    "distserve needs at least one prefill and one decode node and no unified nodes".into(),
                ));
            }
        } else if prefill + decode > 0 {
            return Err(EngineError::Config(format!(
                "policy {} runs on unified nodes only",
                self.policy.name()
            )));
        }
        if self.kv_transfer_delay < T::zero() {
            return Err(EngineError::Config("kv_transfer_delay must be >= 0".into()));
        }
        if let Some(h) = self.horizon {
            if h <= T::zero() {
                return Err(EngineError::Config("horizon must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Pick a node for a new arrival among `targets`.
pub fn route<R: Rng + ?Sized>(router: Router, targets: &[usize], rr_next: &mut usize, rng: &mut R) -> usize {
    match router {
        Router::UniformRandom => {
            if targets.len() == 1 {
                targets[0]
            } else {
                targets[rng.random_range(0..targets.len())]
            }
        }
        Router::RoundRobin => {
            let n = targets[*rr_next % targets.len()];
            *rr_next += 1;
            n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord<T> {
    pub id: RequestId,
    pub class: String,
    pub tbt_slo: T,
    pub arrival: T,
    pub prompt_len: u64,
    pub output_len: u64,
    pub arrived: bool,
    /// Node that ran the prefill.
    pub node: Option<usize>,
    pub first_token: Option<T>,
    /// Emit time of every output token, first token included.
    pub emits: Vec<T>,
    pub completion: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChunkRecord {
    pub request: RequestId,
    pub start: u64,
    pub chunk: u64,
    /// Chunk completes the prompt.
    pub last: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord<T> {
    pub node: usize,
    pub seq: u64,
    pub start: T,
    pub end: T,
    pub tau: u64,
    pub n_prefill: u32,
    pub n_decode: u32,
    pub flags: BatchFlags,
    pub chunks: Vec<ChunkRecord>,
    pub critical: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueSample<T> {
    pub time: T,
    /// Arrived and not yet completed, cluster-wide.
    pub pending: u32,
    pub arrived: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleRecord<T> {
    pub node: usize,
    pub start: T,
    pub end: Option<T>,
    pub pending_at_start: u32,
    pub completed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult<T> {
    pub policy: String,
    pub nodes: usize,
    pub roles: Vec<NodeRole>,
    pub requests: Vec<RequestRecord<T>>,
    pub batches: Vec<BatchRecord<T>>,
    pub queue: Vec<QueueSample<T>>,
    /// Per-node pending counts, `nodes` entries per queue sample.
    pub node_queue: Vec<u32>,
    pub cycles: Vec<CycleRecord<T>>,
    pub critical_identified: u64,
    pub critical_deferred: u64,
    pub peak_kv_tokens: Vec<u64>,
    pub end_time: T,
    pub horizon: Option<T>,
}

impl<T: Scalar> SimResult<T> {
    pub fn completed(&self) -> impl Iterator<Item = &RequestRecord<T>> {
        self.requests.iter().filter(|r| r.completion.is_some())
    }

    /// Time the last request completed, if every arrived request did.
    pub fn drain_time(&self) -> Option<T> {
        let mut t = T::zero();
        for r in self.requests.iter().filter(|r| r.arrived) {
            t = t.max_of(r.completion?);
        }
        Some(t)
    }

    pub fn write_batch_log<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["node", "batch_seq", "start_s", "end_s", "tau", "n_prefill_items", "n_decode_items", "flags"])?;
        for b in &self.batches {
            wr.write_record([
                b.node.to_string(),
                b.seq.to_string(),
                fmt_seconds(b.start.to_f64_lossy()),
                fmt_seconds(b.end.to_f64_lossy()),
                b.tau.to_string(),
                b.n_prefill.to_string(),
                b.n_decode.to_string(),
                b.flags.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_requests<W: Write>(&self, w: W) -> csv::Result<()> {
        let opt = |x: Option<T>| x.map(|v| fmt_seconds(v.to_f64_lossy())).unwrap_or_default();
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "class", "arrival_s", "first_token_s", "completion_s", "prompt_len", "output_len"])?;
        for r in &self.requests {
            wr.write_record([
                r.id.0.to_string(),
                r.class.clone(),
                fmt_seconds(r.arrival.to_f64_lossy()),
                opt(r.first_token),
                opt(r.completion),
                r.prompt_len.to_string(),
                r.output_len.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_token_emits<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "token_index", "emit_s"])?;
        for r in &self.requests {
            for (k, t) in r.emits.iter().enumerate() {
                wr.write_record([r.id.0.to_string(), (k + 1).to_string(), fmt_seconds(t.to_f64_lossy())])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csvs(&self, dir: &Path) -> std::io::Result<()> {
        let open = |name: &str| -> std::io::Result<std::io::BufWriter<std::fs::File>> {
            Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        self.write_batch_log(open("batches.csv")?).map_err(std::io::Error::other)?;
        self.write_requests(open("requests.csv")?).map_err(std::io::Error::other)?;
        self.write_token_emits(open("tokens.csv")?).map_err(std::io::Error::other)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Arrival(usize),
    KvTransfer { node: usize, req: usize },
    BatchDone(usize),
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::Arrival(_) => 0,
            EventKind::KvTransfer { .. } => 1,
            EventKind::BatchDone(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event<T> {
    time: T,
    seq: u64,
    kind: EventKind,
}

impl<T: PartialOrd> PartialEq for Event<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: PartialOrd> Eq for Event<T> {}
impl<T: PartialOrd> PartialOrd for Event<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: PartialOrd> Ord for Event<T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .partial_cmp(&self.time)
            .unwrap_or(Ordering::Equal)
            .then(other.kind.rank().cmp(&self.kind.rank()))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    NotArrived,
    Prefill,
    Transfer,
    Decode,
    Done,
}

#[derive(Debug, Clone)]
struct Live<T> {
    phase: Phase,
    node: usize,
    prefill_node: Option<usize>,
    next_prefill: u64,
    decodes_done: u64,
    kv: u64,
    first_token: Option<T>,
    emits: Vec<T>,
    completion: Option<T>,
}

struct InFlight<T> {
    plan: BatchPlan,
    start: T,
    seq: u64,
    flags: BatchFlags,
    critical: u32,
}

struct Node<T: Scalar> {
    role: NodeRole,
    sched: Box<dyn Scheduler<T>>,
    prefill: Vec<PrefillEntry<T>>,
    decode: Vec<DecodeEntry<T>>,
    in_flight: Option<InFlight<T>>,
    kv_used: u64,
    peak_kv: u64,
    batches: u64,
    busy_sum: T,
    pending: u32,
    cycle: Option<usize>,
}

struct Sim<'a, T: Scalar> {
    cfg: &'a SimConfig<T>,
    trace: &'a [Request<T>],
    live: Vec<Live<T>>,
    index: HashMap<RequestId, usize>,
    nodes: Vec<Node<T>>,
    heap: BinaryHeap<Event<T>>,
    seq: u64,
    rng: ChaCha8Rng,
    rr_next: usize,
    prefill_targets: Vec<usize>,
    decode_targets: Vec<usize>,
    batches: Vec<BatchRecord<T>>,
    queue: Vec<QueueSample<T>>,
    node_queue: Vec<u32>,
    cycles: Vec<CycleRecord<T>>,
    critical_identified: u64,
    critical_deferred: u64,
    arrived: u32,
    pending: u32,
}

/// Run `trace` through the cluster described by `cfg`.
pub fn run<T: Scalar>(cfg: &SimConfig<T>, trace: &[Request<T>]) -> Result<SimResult<T>, EngineError> {
    cfg.validate()?;
    let t_lcm = cfg.cost.t_lcm();
    let mut index = HashMap::with_capacity(trace.len());
    for (k, r) in trace.iter().enumerate() {
        if index.insert(r.id, k).is_some() {
            return Err(EngineError::Trace(format!("duplicate request id {}", r.id)));
        }
        if r.prompt_len == 0 || r.output_len == 0 {
            return Err(EngineError::Trace(format!("request {} has a zero length", r.id)));
        }
        if k > 0 && r.arrival_time < trace[k - 1].arrival_time {
            return Err(EngineError::Trace(format!("arrival times decrease at request {}", r.id)));
        }
        if r.arrival_time < T::zero() {
            return Err(EngineError::Trace(format!("request {} arrives before time 0", r.id)));
        }
        if cfg.aligned_prompts && r.prompt_len % t_lcm != 0 {
            return Err(EngineError::Trace(format!(
                "request {} prompt length {} is not a multiple of {t_lcm}",
                r.id, r.prompt_len
            )));
        }
    }
    let tile = cfg.cost.optimal_tile();
    let mut nodes = Vec::with_capacity(cfg.roles.len());
    for (k, &role) in cfg.roles.iter().enumerate() {
        let sched = cfg
            .policy
            .build(tile, role)
            .map_err(|source| EngineError::Sched { node: k, source })?;
        nodes.push(Node {
            role,
            sched,
            prefill: Vec::new(),
            decode: Vec::new(),
            in_flight: None,
            kv_used: 0,
            peak_kv: 0,
            batches: 0,
            busy_sum: T::zero(),
            pending: 0,
            cycle: None,
        });
    }
    let prefill_targets: Vec<usize> = (0..nodes.len()).filter(|&k| nodes[k].role != NodeRole::Decode).collect();
    let decode_targets: Vec<usize> = (0..nodes.len()).filter(|&k| nodes[k].role == NodeRole::Decode).collect();
    let live = trace
        .iter()
        .map(|_| Live {
            phase: Phase::NotArrived,
            node: 0,
            prefill_node: None,
            next_prefill: 1,
            decodes_done: 0,
            kv: 0,
            first_token: None,
            emits: Vec::new(),
            completion: None,
        })
        .collect();
    let mut sim = Sim {
        cfg,
        trace,
        live,
        index,
        nodes,
        heap: BinaryHeap::with_capacity(trace.len() + 16),
        seq: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        rr_next: 0,
        prefill_targets,
        decode_targets,
        batches: Vec::new(),
        queue: Vec::new(),
        node_queue: Vec::new(),
        cycles: Vec::new(),
        critical_identified: 0,
        critical_deferred: 0,
        arrived: 0,
        pending: 0,
    };
    for k in 0..trace.len() {
        sim.push(trace[k].arrival_time, EventKind::Arrival(k));
    }
    let end = sim.run_loop()?;
    Ok(sim.finish(end))
}

impl<'a, T: Scalar> Sim<'a, T> {
    fn push(&mut self, time: T, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn run_loop(&mut self) -> Result<T, EngineError> {
        let mut now = T::zero();
        let mut wake: Vec<usize> = Vec::new();
        while let Some(ev) = self.heap.peek().copied() {
            if let Some(h) = self.cfg.horizon {
                if ev.time > h {
                    return Ok(h);
                }
            }
            self.heap.pop();
            debug_assert!(ev.time >= now, "clock went backwards");
            now = ev.time;
            match ev.kind {
                EventKind::Arrival(k) => {
                    let node = self.arrive(k, now);
                    wake.push(node);
                }
                EventKind::KvTransfer { node, req } => {
                    self.receive_transfer(node, req, now);
                    wake.push(node);
                }
                EventKind::BatchDone(node) => {
                    self.complete_batch(node, now)?;
                    wake.push(node);
                }
            }
            let same_time = self.heap.peek().is_some_and(|n| n.time == now);
            if same_time {
                continue;
            }
            wake.sort_unstable();
            wake.dedup();
            for node in std::mem::take(&mut wake) {
                self.schedule(node, now)?;
            }
            self.sample(now);
        }
        Ok(match self.cfg.horizon {
            Some(h) => h,
            None => now,
        })
    }

    fn sample(&mut self, now: T) {
        self.queue.push(QueueSample {
            time: now,
            pending: self.pending,
            arrived: self.arrived,
        });
        self.node_queue.extend(self.nodes.iter().map(|n| n.pending));
    }

    fn arrive(&mut self, k: usize, now: T) -> usize {
        let r = &self.trace[k];
        let node = route(self.cfg.router, &self.prefill_targets, &mut self.rr_next, &mut self.rng);
        let l = &mut self.live[k];
        l.phase = Phase::Prefill;
        l.node = node;
        l.prefill_node = Some(node);
        self.arrived += 1;
        self.pending += 1;
        let n = &mut self.nodes[node];
        n.pending += 1;
        n.prefill.push(PrefillEntry {
            id: r.id,
            arrival_time: r.arrival_time,
            prompt_len: r.prompt_len,
            next_index: 1,
            class: r.class.clone(),
            tbt_slo: r.tbt_slo,
        });
        let _ = now;
        node
    }

    fn receive_transfer(&mut self, node: usize, k: usize, _now: T) {
        let r = &self.trace[k];
        let l = &mut self.live[k];
        l.phase = Phase::Decode;
        l.node = node;
        l.kv = r.prompt_len;
        let last_emit = l.first_token.expect("transferred request has its first token");
        let n = &mut self.nodes[node];
        n.kv_used += r.prompt_len;
        n.peak_kv = n.peak_kv.max(n.kv_used);
        n.decode.push(DecodeEntry {
            id: r.id,
            arrival_time: r.arrival_time,
            prompt_len: r.prompt_len,
            index: r.prompt_len + 1,
            class: r.class.clone(),
            tbt_slo: r.tbt_slo,
            last_emit,
        });
    }

    fn complete_batch(&mut self, node: usize, now: T) -> Result<(), EngineError> {
        let fl = self.nodes[node]
            .in_flight
            .take()
            .expect("batch_done for a node with no batch in flight");
        let plan = &fl.plan;
        let mut chunks = Vec::with_capacity(plan.prefill.len());
        let mut to_decode: Vec<usize> = Vec::new();
        let mut retired: HashSet<RequestId> = HashSet::new();
        let mut advanced: HashMap<RequestId, u64> = HashMap::new();

        for item in &plan.prefill {
            let k = self.index[&item.request];
            let r = &self.trace[k];
            let l = &mut self.live[k];
            l.next_prefill += item.chunk;
            l.kv += item.chunk;
            let last = l.next_prefill > r.prompt_len;
            chunks.push(ChunkRecord {
                request: item.request,
                start: item.start,
                chunk: item.chunk,
                last,
            });
            self.nodes[node].kv_used += item.chunk;
            advanced.insert(item.request, l.next_prefill);
            if last {
                l.first_token = Some(now);
                l.emits.push(now);
                to_decode.push(k);
            }
        }
        for item in &plan.decode {
            let k = self.index[&item.request];
            let r = &self.trace[k];
            let l = &mut self.live[k];
            l.decodes_done += 1;
            l.kv += 1;
            l.emits.push(now);
            self.nodes[node].kv_used += 1;
            if l.decodes_done == r.output_len {
                l.phase = Phase::Done;
                l.completion = Some(now);
                retired.insert(item.request);
            }
        }
        {
            let n = &mut self.nodes[node];
            n.peak_kv = n.peak_kv.max(n.kv_used);
        }

        let decoded: HashSet<RequestId> = plan.decode.iter().map(|d| d.request).collect();
        {
            let n = &mut self.nodes[node];
            n.decode.retain_mut(|e| {
                if retired.contains(&e.id) {
                    return false;
                }
                if decoded.contains(&e.id) {
                    e.index += 1;
                    e.last_emit = now;
                }
                true
            });
            n.prefill.retain_mut(|e| match advanced.get(&e.id) {
                Some(&next) if next > e.prompt_len => false,
                Some(&next) => {
                    e.next_index = next;
                    true
                }
                None => true,
            });
        }
        for id in &retired {
            let k = self.index[id];
            let kv = std::mem::take(&mut self.live[k].kv);
            let n = &mut self.nodes[node];
            n.kv_used -= kv;
            n.pending -= 1;
            self.pending -= 1;
            if let Some(c) = n.cycle {
                self.cycles[c].completed += 1;
            }
        }
        for k in to_decode {
            let r = &self.trace[k];
            match self.nodes[node].role {
                NodeRole::Prefill => {
                    let target = route(Router::UniformRandom, &self.decode_targets, &mut 0, &mut self.rng);
                    let kv = std::mem::take(&mut self.live[k].kv);
                    self.live[k].phase = Phase::Transfer;
                    let n = &mut self.nodes[node];
                    n.kv_used -= kv;
                    n.pending -= 1;
                    self.nodes[target].pending += 1;
                    let at = now + self.cfg.kv_transfer_delay;
                    self.push(at, EventKind::KvTransfer { node: target, req: k });
                }
                _ => {
                    self.live[k].phase = Phase::Decode;
                    self.nodes[node].decode.push(DecodeEntry {
                        id: r.id,
                        arrival_time: r.arrival_time,
                        prompt_len: r.prompt_len,
                        index: r.prompt_len + 1,
                        class: r.class.clone(),
                        tbt_slo: r.tbt_slo,
                        last_emit: now,
                    });
                }
            }
        }

        let n = &mut self.nodes[node];
        n.batches += 1;
        n.busy_sum += now - fl.start;
        self.batches.push(BatchRecord {
            node,
            seq: fl.seq,
            start: fl.start,
            end: now,
            tau: plan.token_count(),
            n_prefill: plan.prefill.len() as u32,
            n_decode: plan.decode.len() as u32,
            flags: fl.flags,
            chunks,
            critical: fl.critical,
        });
        Ok(())
    }

    fn schedule(&mut self, node: usize, now: T) -> Result<(), EngineError> {
        if self.nodes[node].in_flight.is_some() {
            return Ok(());
        }
        let capacity = self.cfg.cost.gpu.kv_token_capacity;
        let n = &mut self.nodes[node];
        let mean_batch_time = if n.batches == 0 {
            T::zero()
        } else {
            n.busy_sum / T::from_count(n.batches)
        };
        let view = SchedulerView {
            clock: now,
            prefill_queue: &n.prefill,
            decode_set: &n.decode,
            mean_batch_time,
            kv_tokens_used: n.kv_used,
            kv_token_capacity: capacity,
        };
        let dec = n
            .sched
            .next(&view)
            .map_err(|source| EngineError::Sched { node, source })?;
        let pending_here = n.pending;
        let seq = n.batches + 1;

        let tracks_cycles = matches!(self.cfg.policy, PolicyConfig::Rad { .. } | PolicyConfig::AltCycle { .. });
        if tracks_cycles {
            if dec.notes.cycle_reset {
                if let Some(c) = self.nodes[node].cycle.take() {
                    self.cycles[c].end = Some(now);
                }
            }
            if self.nodes[node].cycle.is_none() && (dec.notes.cycle_reset || dec.plan.is_some()) {
                self.cycles.push(CycleRecord {
                    node,
                    start: now,
                    end: None,
                    pending_at_start: pending_here,
                    completed: 0,
                });
                self.nodes[node].cycle = Some(self.cycles.len() - 1);
            }
        }

        let Some(plan) = dec.plan else {
            return Ok(());
        };
        self.check_plan(node, seq, &plan)?;
        self.critical_identified += dec.notes.critical.len() as u64;
        let in_plan: HashSet<RequestId> = plan.decode.iter().map(|d| d.request).collect();
        let deferred = dec.notes.critical.iter().filter(|id| !in_plan.contains(id)).count();
        self.critical_deferred += deferred as u64;

        let needed = self.nodes[node].kv_used + plan.token_count();
        if needed > capacity {
            return Err(EngineError::MemoryOverflow {
                node,
                batch_seq: seq,
                time: now.to_f64_lossy(),
                needed,
                capacity,
            });
        }
        let dur = self.cfg.cost.batch_time(&plan)?;
        if dur <= T::zero() {
            return Err(EngineError::IllegalPlan {
                node,
                batch_seq: seq,
                msg: "non-empty batch priced at zero time".into(),
            });
        }
        let critical = dec.notes.critical.len() as u32;
        self.nodes[node].in_flight = Some(InFlight {
            plan,
            start: now,
            seq,
            flags: dec.notes.flags,
            critical,
        });
        self.push(now + dur, EventKind::BatchDone(node));
        Ok(())
    }

    fn check_plan(&self, node: usize, seq: u64, plan: &BatchPlan) -> Result<(), EngineError> {
        let bad = |msg: String| EngineError::IllegalPlan {
            node,
            batch_seq: seq,
            msg,
        };
        if plan.is_empty() {
            return Err(bad("scheduler returned an empty batch".into()));
        }
        plan.validate().map_err(|e| bad(e.to_string()))?;
        let mut seen = HashSet::new();
        for p in &plan.prefill {
            let k = *self.index.get(&p.request).ok_or_else(|| bad(format!("unknown request {}", p.request)))?;
            let l = &self.live[k];
            if !seen.insert(p.request) {
                return Err(bad(format!("request {} appears twice", p.request)));
            }
            if l.phase != Phase::Prefill || l.node != node {
                return Err(bad(format!("request {} is not in this node's prefill queue", p.request)));
            }
            if p.start != l.next_prefill || p.end() > self.trace[k].prompt_len {
                return Err(bad(format!(
                    "chunk [{}, {}] of {} does not continue its prefill at {}",
                    p.start,
                    p.end(),
                    p.request,
                    l.next_prefill
                )));
            }
        }
        for d in &plan.decode {
            let k = *self.index.get(&d.request).ok_or_else(|| bad(format!("unknown request {}", d.request)))?;
            let l = &self.live[k];
            if !seen.insert(d.request) {
                return Err(bad(format!("request {} appears twice", d.request)));
            }
            if l.phase != Phase::Decode || l.node != node {
                return Err(bad(format!("request {} is not decoding on this node", d.request)));
            }
            let expect = self.trace[k].prompt_len + l.decodes_done + 1;
            if d.index != expect {
                return Err(bad(format!(
                    "decode of {} at index {} but next index is {expect}",
                    d.request, d.index
                )));
            }
        }
        Ok(())
    }

    fn finish(self, end: T) -> SimResult<T> {
        let requests = self
            .trace
            .iter()
            .zip(self.live)
            .map(|(r, l)| RequestRecord {
                id: r.id,
                class: r.class.clone(),
                tbt_slo: r.tbt_slo,
                arrival: r.arrival_time,
                prompt_len: r.prompt_len,
                output_len: r.output_len,
                arrived: l.phase != Phase::NotArrived,
                node: l.prefill_node,
                first_token: l.first_token,
                emits: l.emits,
                completion: l.completion,
            })
            .collect();
        SimResult {
            policy: self.cfg.policy.label(),
            nodes: self.nodes.len(),
            roles: self.cfg.roles.clone(),
            requests,
            batches: self.batches,
            queue: self.queue,
            node_queue: self.node_queue,
            cycles: self.cycles,
            critical_identified: self.critical_identified,
            critical_deferred: self.critical_deferred,
            peak_kv_tokens: self.nodes.iter().map(|n| n.peak_kv).collect(),
            end_time: end,
            horizon: self.cfg.horizon,
        }
    }
}

/// KV tokens a request holds given its progress.
pub fn kv_tokens(prompt_len: u64, next_prefill: u64, decodes_done: u64, retired: bool) -> u64 {
    if retired {
        0
    } else if next_prefill <= prompt_len {
        next_prefill - 1
    } else {
        prompt_len + decodes_done
    }
}
