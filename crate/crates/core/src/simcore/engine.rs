//! The discrete-event engine: one totally-ordered queue of timestamped
//! events drives per-instance iteration loops (admission → prefill →
//! batched decode), length-range routing with optional bid-ask dispatch,
//! periodic load reports, boundary refinement, overload offloading, and
//! multi-round live migration with receiver-side ticket queues.
//!
//! Determinism: the clock is integer microseconds; ties process in event
//! creation order (sequence numbers); every container iterated is a Vec,
//! VecDeque, or BTreeMap; nothing consults wall time or an RNG.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use crate::balancer::{
    detect_overload, round_time, select_receiver, BidMsg, MigrationTicket, PumpAction,
    TicketQueue, TicketState, TransferState,
};
use crate::config::{
    BalanceMode, ConfigError, DispatchMode, Layout, PolicyKnobs, RefineMode, RunConfig,
};
use crate::cost_model::{batch_features, ProfilingSample, QoeParams, RequestShape};
use crate::metrics::{
    per_request_rows, report_from_events, EventRow, MetricsError, MetricsReport, PerRequestRow,
    EV_ARRIVE, EV_COMPLETE, EV_FIRST_TOKEN, EV_ITER, EV_META, EV_MIGRATE_ABORT, EV_MIGRATE_DONE,
    EV_REFINE, EV_REJECT, EV_ROUTE, EV_STAGE_ASSIGN, EV_STARVE,
};
use crate::planner::{plan_chain, plan_with_threshold, PlanError, PlanInput, Stage};
use crate::refiner::{apply_boundary, refine, BoundaryState, SplitObjective};
use crate::simcore::oracle::HardwareOracle;
use crate::workload::{bucketize, TraceRequest, DEFAULT_MAX_CONTEXT};

/// Event name for a request entering the handover buffer (crossed its
/// stage's upper bound mid-decode). Not consumed by reports; kept for
/// scenario audits.
pub const EV_CROSS: &str = "cross";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Per-request audit trail: where its output tokens were produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestAudit {
    pub trace_id: u64,
    pub completed: bool,
    pub output_len: u64,
    pub migrations: u32,
    pub tokens_by_instance: Vec<(u32, u64)>,
}

/// Everything one simulation run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub events: Vec<EventRow>,
    pub per_request: Vec<PerRequestRow>,
    /// Lifetime-averaged batch features + normalized latency per completed
    /// request, for fitting the quality model from simulated behavior.
    pub profiling: Vec<ProfilingSample>,
    /// The stage layout the run started with.
    pub stages: Vec<Stage>,
    pub audits: Vec<RequestAudit>,
    /// (min, max) heterogeneity penalty factor observed across decode
    /// iterations; `None` when no decode iteration ran.
    pub penalty_range: Option<(f64, f64)>,
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum IterKind {
    Prefill { req: usize },
    Decode { batch: Vec<usize>, feats: [f64; 4], dur_us: u64 },
}

#[derive(Debug, Clone)]
enum BidScope {
    Dispatch { req: usize, stage: usize },
    Balance { sender: u32, req: usize, sender_load: u64, handover: bool },
}

#[derive(Debug, Clone)]
enum Msg {
    LoadReport { from: u32, stage: usize, load: u64, shapes: Vec<RequestShape> },
}

#[derive(Debug, Clone)]
enum Ev {
    Arrive { req: usize },
    IterDone { inst: u32, kind: IterKind },
    Deliver { to: u32, msg: Msg },
    BidClose { scope: BidScope },
    TransferRound { tid: usize, volume: u64 },
    RefineTick { boundary: usize },
    Heartbeat { inst: u32 },
    Horizon,
}

struct QueuedEv {
    ts: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for QueuedEv {
    fn eq(&self, other: &Self) -> bool {
        (self.ts, self.seq) == (other.ts, other.seq)
    }
}
impl Eq for QueuedEv {}
impl PartialOrd for QueuedEv {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEv {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.ts, self.seq).cmp(&(other.ts, other.seq))
    }
}

// ---------------------------------------------------------------------------
// Requests and instances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Routing,
    Queued,
    Prefilling,
    Active,
    Done,
    Rejected,
}

/// Migration involvement of a request (at most one at a time).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MigState {
    None,
    Asked,
    Ticketed { dest: u32 },
    Transferring { tid: usize },
}

#[derive(Debug, Clone)]
struct Req {
    trace_id: u64,
    input: u64,
    output: u64,
    arrival_us: u64,
    seq: u64,
    generated: u64,
    owner: u32,
    phase: Phase,
    frozen: bool,
    in_send_buffer: bool,
    mig: MigState,
    migrations: u32,
    first_token_us: Option<u64>,
    completion_us: Option<u64>,
    /// Running sums of the decode-batch features this request sat in.
    feat_acc: [f64; 4],
    feat_iters: u64,
    tokens_by_owner: BTreeMap<u32, u64>,
}

impl Req {
    fn shape(&self) -> RequestShape {
        RequestShape { input_len: self.input, seq_len: self.seq }
    }
}

#[derive(Debug)]
struct Inst {
    id: u32,
    stage: usize,
    lo: u64,
    hi: u64,
    kv_capacity: u64,
    kv_used: u64,
    resv: u64,
    /// Tokens the in-flight decode step will append to `kv_used` when it
    /// lands; counted against capacity so reservations taken mid-iteration
    /// cannot oversubscribe the pool.
    pending_growth: u64,
    queued: VecDeque<usize>,
    prefill_q: VecDeque<usize>,
    /// Admission-ordered decoding set.
    active: Vec<usize>,
    running: bool,
    send_buffer: VecDeque<usize>,
    outbound: Option<usize>,
    ask_open: bool,
    starved_pending: VecDeque<(usize, u32)>,
    tickets: TicketQueue,
    tput_ema: f64,
    /// When the currently running iteration finishes; bids reply at the
    /// instance's next scheduling opportunity, so an idle engine answers
    /// immediately and a busy one after its in-flight step.
    busy_until: u64,
    last_report_us: Option<u64>,
    out_tokens: u64,
    peer_loads: BTreeMap<u32, u64>,
    peer_shapes: BTreeMap<u32, Vec<RequestShape>>,
    downstream_shapes: BTreeMap<u32, Vec<RequestShape>>,
    heartbeat_at: Option<u64>,
    /// Consecutive heartbeats that produced no new work; polling stops at
    /// MAX_IDLE_POLLS and resumes only when a state change nudges us.
    idle_polls: u32,
    /// Consecutive offload/handover auctions that found no receiver; asking
    /// pauses at MAX_IDLE_POLLS until a state change nudges us.
    failed_asks: u32,
}

impl Inst {
    fn load(&self, reqs: &[Req]) -> u64 {
        self.kv_used + self.resv + self.queued.iter().map(|&r| reqs[r].input).sum::<u64>()
    }

    fn free_kv(&self) -> u64 {
        self.kv_capacity.saturating_sub(self.kv_used + self.resv + self.pending_growth)
    }

    fn active_shapes(&self, reqs: &[Req]) -> Vec<RequestShape> {
        self.active.iter().map(|&r| reqs[r].shape()).collect()
    }

}

#[derive(Debug, Clone)]
struct Transfer {
    state: TransferState,
    reserved: u64,
    handover: bool,
    await_freeze: bool,
    dead: bool,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct Engine<'a> {
    cfg: &'a RunConfig,
    knobs: PolicyKnobs,
    oracle: HardwareOracle,
    qoe: QoeParams,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<QueuedEv>>,
    insts: Vec<Inst>,
    reqs: Vec<Req>,
    /// Canonical stage ranges (moved by refinement); instances carry
    /// copies, the router reads these.
    ranges: Vec<(u64, u64)>,
    stage_members: Vec<Vec<u32>>,
    boundary_states: Vec<BoundaryState>,
    rr_cursors: Vec<usize>,
    handover_rr: Vec<usize>,
    transfers: Vec<Transfer>,
    active_transfers: u32,
    pending_arrivals: usize,
    in_flight: usize,
    log: Vec<EventRow>,
    halted: bool,
    /// Counts scheduled events other than heartbeats and refine ticks;
    /// lets pollers tell whether anything real happened since they last ran.
    work_marker: u64,
    refine_last_marker: Vec<u64>,
    refine_armed: Vec<bool>,
    penalty_seen: Option<(f64, f64)>,
    // Microsecond-scaled config knobs.
    heartbeat_us: u64,
    bid_window_us: u64,
    report_us: u64,
    refine_us: u64,
}

const EMA_ALPHA: f64 = 0.3;

/// How many consecutive no-op heartbeats an instance may take before its
/// polling stops until a state change re-arms it. Keeps stalled
/// configurations (e.g. memory permanently exhausted with nobody able to
/// help) terminating instead of polling forever.
const MAX_IDLE_POLLS: u32 = 3;

fn iter_us(secs: f64) -> u64 {
    ((secs * 1e6).round() as u64).max(1)
}

fn wire_us(secs: f64) -> u64 {
    (secs * 1e6).round() as u64
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a RunConfig, stages: &[Stage], trace: &[TraceRequest]) -> Self {
        let knobs = cfg.knobs();
        let mut insts = Vec::new();
        let mut stage_members = Vec::new();
        let mut next_id: u32 = 0;
        for (s, st) in stages.iter().enumerate() {
            let mut members = Vec::new();
            for _ in 0..st.instance_count {
                members.push(next_id);
                insts.push(Inst {
                    id: next_id,
                    stage: s,
                    lo: st.lo,
                    hi: st.hi,
                    kv_capacity: cfg.cluster.kv_capacity,
                    kv_used: 0,
                    resv: 0,
                    pending_growth: 0,
                    queued: VecDeque::new(),
                    prefill_q: VecDeque::new(),
                    active: Vec::new(),
                    running: false,
                    send_buffer: VecDeque::new(),
                    outbound: None,
                    ask_open: false,
                    starved_pending: VecDeque::new(),
                    tickets: TicketQueue::new(),
                    tput_ema: 0.0,
                    busy_until: 0,
                    last_report_us: None,
                    out_tokens: 0,
                    peer_loads: BTreeMap::new(),
                    peer_shapes: BTreeMap::new(),
                    downstream_shapes: BTreeMap::new(),
                    heartbeat_at: None,
                    idle_polls: 0,
                    failed_asks: 0,
                });
                next_id += 1;
            }
            stage_members.push(members);
        }
        let reqs: Vec<Req> = trace
            .iter()
            .map(|t| Req {
                trace_id: t.id,
                input: t.input_len,
                output: t.output_len,
                arrival_us: (t.arrival_s * 1e6).round() as u64,
                seq: t.input_len,
                generated: 0,
                owner: u32::MAX,
                phase: Phase::Routing,
                frozen: false,
                in_send_buffer: false,
                mig: MigState::None,
                migrations: 0,
                first_token_us: None,
                completion_us: None,
                feat_acc: [0.0; 4],
                feat_iters: 0,
                tokens_by_owner: BTreeMap::new(),
            })
            .collect();
        let boundary_states: Vec<BoundaryState> = stages
            .iter()
            .take(stages.len().saturating_sub(1))
            .map(|st| BoundaryState {
                boundary: st.hi as f64,
                ema_alpha: cfg.refine.ema_alpha,
                min_traffic: cfg.refine.min_traffic,
            })
            .collect();
        let boundary_count = boundary_states.len();
        Engine {
            cfg,
            knobs,
            oracle: HardwareOracle::from_config(&cfg.oracle),
            qoe: QoeParams::new(cfg.qoe.d),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            ranges: stages.iter().map(|s| (s.lo, s.hi)).collect(),
            rr_cursors: vec![0; stages.len()],
            handover_rr: vec![0; stages.len()],
            stage_members,
            boundary_states,
            insts,
            pending_arrivals: reqs.len(),
            reqs,
            transfers: Vec::new(),
            active_transfers: 0,
            in_flight: 0,
            log: Vec::new(),
            halted: false,
            work_marker: 0,
            refine_last_marker: vec![0; boundary_count],
            refine_armed: vec![false; boundary_count],
            penalty_seen: None,
            heartbeat_us: iter_us(cfg.sim.heartbeat_ms / 1e3),
            bid_window_us: iter_us(cfg.sim.bid_window_ms / 1e3),
            report_us: iter_us(cfg.sim.report_interval_s),
            refine_us: iter_us(cfg.refine.interval_s),
        }
    }

    fn push(&mut self, ts: u64, ev: Ev) {
        debug_assert!(ts >= self.now);
        if !matches!(ev, Ev::Heartbeat { .. } | Ev::RefineTick { .. } | Ev::Horizon) {
            self.work_marker += 1;
        }
        self.seq += 1;
        self.queue.push(Reverse(QueuedEv { ts, seq: self.seq, ev }));
    }

    fn log(&mut self, event: &str, src: Option<u32>, dst: Option<u32>, req: Option<usize>, detail: String) {
        self.log.push(EventRow {
            ts: self.now,
            event: event.to_string(),
            src,
            dst,
            request_id: req.map(|r| self.reqs[r].trace_id),
            detail,
        });
    }

    // -- main loop ---------------------------------------------------------

    fn run_loop(&mut self) {
        for r in 0..self.reqs.len() {
            let ts = self.reqs[r].arrival_us;
            self.push(ts, Ev::Arrive { req: r });
        }
        if let Some(h) = self.cfg.sim.horizon_s {
            self.push(wire_us(h), Ev::Horizon);
        }
        if self.knobs.refine != RefineMode::Off {
            for b in 0..self.boundary_states.len() {
                self.refine_armed[b] = true;
                self.push(self.refine_us, Ev::RefineTick { boundary: b });
            }
        }
        while let Some(Reverse(qe)) = self.queue.pop() {
            debug_assert!(qe.ts >= self.now, "event time went backwards");
            self.now = qe.ts;
            if self.halted {
                break;
            }
            self.handle(qe.ev);
            #[cfg(debug_assertions)]
            self.audit_kv();
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrive { req } => self.on_arrive(req),
            Ev::IterDone { inst, kind } => self.on_iter_done(inst, kind),
            Ev::Deliver { to, msg } => self.on_deliver(to, msg),
            Ev::BidClose { scope } => self.on_bid_close(scope),
            Ev::TransferRound { tid, volume } => self.on_transfer_round(tid, volume),
            Ev::RefineTick { boundary } => self.on_refine_tick(boundary),
            Ev::Heartbeat { inst } => self.on_heartbeat(inst),
            Ev::Horizon => self.halted = true,
        }
    }

    // -- arrival and dispatch ----------------------------------------------

    fn on_arrive(&mut self, req: usize) {
        self.pending_arrivals -= 1;
        if self.knobs.refine != RefineMode::Off {
            for b in 0..self.refine_armed.len() {
                if !self.refine_armed[b] {
                    self.refine_armed[b] = true;
                    self.push(self.now + self.refine_us, Ev::RefineTick { boundary: b });
                }
            }
        }
        let (input, output) = (self.reqs[req].input, self.reqs[req].output);
        self.log(EV_ARRIVE, None, None, Some(req), format!("input={input};output={output}"));
        let stage = self.ranges.iter().position(|&(lo, hi)| lo <= input && input < hi);
        let Some(stage) = stage else {
            self.reqs[req].phase = Phase::Rejected;
            self.log(EV_REJECT, None, None, Some(req), "reason=no_covering_stage".into());
            return;
        };
        if input > self.cfg.cluster.kv_capacity {
            // The prompt alone can never fit in one instance's memory.
            self.reqs[req].phase = Phase::Rejected;
            self.log(EV_REJECT, None, None, Some(req), "reason=exceeds_instance_memory".into());
            return;
        }
        self.in_flight += 1;
        match self.knobs.dispatch {
            DispatchMode::RoundRobin => {
                let members = &self.stage_members[stage];
                let inst = members[self.rr_cursors[stage] % members.len()];
                self.rr_cursors[stage] += 1;
                self.assign(inst, req, stage);
            }
            DispatchMode::BidAsk => {
                let close_at = self.now + self.bid_window_us;
                self.push(close_at, Ev::BidClose { scope: BidScope::Dispatch { req, stage } });
            }
        }
    }

    fn assign(&mut self, inst: u32, req: usize, stage: usize) {
        self.log(EV_ROUTE, None, Some(inst), Some(req), format!("stage={stage}"));
        self.reqs[req].phase = Phase::Queued;
        self.reqs[req].owner = inst;
        self.insts[inst as usize].queued.push_back(req);
        self.kick(inst);
    }

    fn dispatch_bid(&self, inst: u32) -> BidMsg {
        let i = &self.insts[inst as usize];
        // Backlog = output tokens still owed by everything queued, prefilling,
        // or decoding here; over the observed rate it estimates how long a
        // new request would wait before its first iteration.
        let backlog: u64 = i
            .queued
            .iter()
            .chain(i.prefill_q.iter())
            .chain(i.active.iter())
            .map(|&r| self.reqs[r].output - self.reqs[r].generated)
            .sum();
        let earliest = backlog as f64 / i.tput_ema.max(1.0);
        BidMsg {
            receiver_id: inst,
            load: i.load(&self.reqs),
            earliest_start: earliest,
            reply_time: self.now.max(i.busy_until) as f64 / 1e6,
        }
    }

    // -- instance iteration loop -------------------------------------------

    fn kick(&mut self, inst: u32) {
        let idx = inst as usize;
        if self.insts[idx].running {
            return;
        }
        // Admission: FCFS while the next prompt fits in memory and batch.
        loop {
            let i = &self.insts[idx];
            let Some(&front) = i.queued.front() else { break };
            let input = self.reqs[front].input;
            let batch_now = i.active.len() + i.prefill_q.len();
            if batch_now >= self.cfg.cluster.max_batch || input > i.free_kv() {
                break;
            }
            let i = &mut self.insts[idx];
            i.queued.pop_front();
            i.kv_used += input;
            i.prefill_q.push_back(front);
            self.reqs[front].phase = Phase::Prefilling;
        }
        // Prefill first (dedicated, prioritized), else one decode step.
        // The request stays in prefill_q until its iteration completes.
        if let Some(&req) = self.insts[idx].prefill_q.front() {
            self.insts[idx].running = true;
            let dur = iter_us(self.oracle.prefill_time(self.reqs[req].input));
            let at = self.now + dur;
            self.insts[idx].busy_until = at;
            self.push(at, Ev::IterDone { inst, kind: IterKind::Prefill { req } });
            return;
        }
        let budget = self.insts[idx].free_kv() as usize;
        let batch: Vec<usize> = self.insts[idx]
            .active
            .iter()
            .copied()
            .filter(|&r| !self.reqs[r].frozen)
            .take(self.cfg.cluster.max_batch.min(budget))
            .collect();
        if batch.is_empty() {
            self.ensure_heartbeat(inst);
            return;
        }
        let lengths: Vec<u64> = batch.iter().map(|&r| self.reqs[r].seq).collect();
        let shapes: Vec<RequestShape> = batch.iter().map(|&r| self.reqs[r].shape()).collect();
        let f = batch_features(&shapes);
        let h = self.oracle.heterogeneity_penalty(&lengths);
        self.penalty_seen = Some(match self.penalty_seen {
            None => (h, h),
            Some((lo, hi)) => (lo.min(h), hi.max(h)),
        });
        let dur_us = iter_us(self.oracle.decode_step_time(&lengths));
        self.insts[idx].running = true;
        self.insts[idx].pending_growth = batch.len() as u64;
        let at = self.now + dur_us;
        self.insts[idx].busy_until = at;
        self.push(
            at,
            Ev::IterDone {
                inst,
                kind: IterKind::Decode { batch, feats: [f.f1, f.f2, f.f3, f.f4], dur_us },
            },
        );
    }

    fn on_iter_done(&mut self, inst: u32, kind: IterKind) {
        let idx = inst as usize;
        self.insts[idx].running = false;
        match kind {
            IterKind::Prefill { req } => {
                debug_assert_eq!(self.reqs[req].phase, Phase::Prefilling);
                let popped = self.insts[idx].prefill_q.pop_front();
                debug_assert_eq!(popped, Some(req));
                self.reqs[req].phase = Phase::Active;
                self.insts[idx].active.push(req);
            }
            IterKind::Decode { batch, feats, dur_us } => {
                let n = batch.len() as u64;
                let mut completed = Vec::new();
                for &r in &batch {
                    let req = &mut self.reqs[r];
                    debug_assert!(req.phase == Phase::Active && req.owner == inst && !req.frozen);
                    req.seq += 1;
                    req.generated += 1;
                    *req.tokens_by_owner.entry(inst).or_insert(0) += 1;
                    for (acc, f) in req.feat_acc.iter_mut().zip(feats) {
                        *acc += f;
                    }
                    req.feat_iters += 1;
                    if req.generated == 1 {
                        req.first_token_us = Some(self.now);
                    }
                    if req.generated == req.output {
                        completed.push(r);
                    }
                }
                self.insts[idx].pending_growth = 0;
                self.insts[idx].kv_used += n;
                self.insts[idx].out_tokens += n;
                for &r in &batch {
                    if self.reqs[r].first_token_us == Some(self.now)
                        && self.reqs[r].generated == 1
                    {
                        self.log(EV_FIRST_TOKEN, Some(inst), None, Some(r), String::new());
                    }
                }
                self.log(EV_ITER, Some(inst), None, None, format!("n={n};tok={n}"));
                let rate = n as f64 / (dur_us as f64 / 1e6);
                let i = &mut self.insts[idx];
                i.tput_ema = EMA_ALPHA * rate + (1.0 - EMA_ALPHA) * i.tput_ema;
                for r in completed {
                    self.retire(r);
                }
                // Crossing check against the live range, same tick.
                let hi = self.insts[idx].hi;
                let last_stage = self.insts[idx].stage + 1 == self.ranges.len();
                for &r in &batch {
                    let req = &self.reqs[r];
                    if req.phase == Phase::Active
                        && !last_stage
                        && req.seq >= hi
                        && !req.in_send_buffer
                        && matches!(req.mig, MigState::None)
                    {
                        self.reqs[r].in_send_buffer = true;
                        self.insts[idx].send_buffer.push_back(r);
                        self.log(EV_CROSS, Some(inst), None, Some(r), format!("seq={}", self.reqs[r].seq));
                    }
                }
            }
        }
        // Transfers that waited for this iteration can now stop-copy.
        let waiting: Vec<usize> = self
            .transfers
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.dead && t.await_freeze && t.state.source == inst)
            .map(|(tid, _)| tid)
            .collect();
        for tid in waiting {
            self.transfers[tid].await_freeze = false;
            self.begin_stop_round(tid);
        }
        self.after_event(inst);
        self.kick(inst);
    }

    fn retire(&mut self, r: usize) {
        let inst = self.reqs[r].owner;
        let idx = inst as usize;
        self.reqs[r].phase = Phase::Done;
        self.reqs[r].completion_us = Some(self.now);
        let seq = self.reqs[r].seq;
        self.insts[idx].kv_used -= seq;
        self.insts[idx].active.retain(|&x| x != r);
        if self.reqs[r].in_send_buffer {
            self.insts[idx].send_buffer.retain(|&x| x != r);
            self.reqs[r].in_send_buffer = false;
        }
        match self.reqs[r].mig {
            MigState::Ticketed { dest } => {
                self.drop_ticket(dest, r);
                self.pump_tickets(dest);
                self.nudge_waiters(dest);
            }
            MigState::Transferring { tid } => self.abort_transfer(tid, "completed"),
            _ => {}
        }
        self.reqs[r].mig = MigState::None;
        self.in_flight -= 1;
        self.log(EV_COMPLETE, Some(inst), None, Some(r), String::new());
        // Freed memory: everyone who might want to move work here can retry.
        self.nudge_waiters(inst);
    }

    // -- load reports, overload checks, handover asks ------------------------

    fn after_event(&mut self, inst: u32) {
        self.maybe_report(inst);
        self.maybe_balance_ask(inst);
        self.maybe_handover(inst);
        self.pump_tickets(inst);
        self.retry_starved(inst);
        self.ensure_heartbeat(inst);
    }

    fn maybe_report(&mut self, inst: u32) {
        let idx = inst as usize;
        let due = match self.insts[idx].last_report_us {
            None => true,
            Some(t) => self.now >= t + self.report_us,
        };
        if !due {
            return;
        }
        self.insts[idx].last_report_us = Some(self.now);
        let stage = self.insts[idx].stage;
        let load = self.insts[idx].load(&self.reqs);
        let shapes = self.insts[idx].active_shapes(&self.reqs);
        let mut targets: Vec<u32> = Vec::new();
        for &peer in &self.stage_members[stage] {
            if peer != inst {
                targets.push(peer);
            }
        }
        if stage > 0 {
            targets.extend(self.stage_members[stage - 1].iter().copied());
        }
        for to in targets {
            let msg = Msg::LoadReport { from: inst, stage, load, shapes: shapes.clone() };
            self.push(self.now, Ev::Deliver { to, msg });
        }
    }

    fn on_deliver(&mut self, to: u32, msg: Msg) {
        match msg {
            Msg::LoadReport { from, stage, load, shapes } => {
                let me = &mut self.insts[to as usize];
                if stage == me.stage {
                    me.peer_loads.insert(from, load);
                    me.peer_shapes.insert(from, shapes);
                } else if stage == me.stage + 1 {
                    me.downstream_shapes.insert(from, shapes);
                }
            }
        }
    }

    fn maybe_balance_ask(&mut self, inst: u32) {
        if self.knobs.balance != BalanceMode::Full {
            return;
        }
        let idx = inst as usize;
        if self.insts[idx].ask_open || self.insts[idx].failed_asks >= MAX_IDLE_POLLS {
            return;
        }
        let my_load = self.insts[idx].load(&self.reqs);
        let stage = self.insts[idx].stage;
        let mut loads: Vec<u64> = vec![my_load];
        for &peer in &self.stage_members[stage] {
            if peer != inst {
                loads.push(self.insts[idx].peer_loads.get(&peer).copied().unwrap_or(0));
            }
        }
        if loads.len() < 2 || !detect_overload(my_load, &loads, self.cfg.balance.overload_factor) {
            return;
        }
        // Offload the longest free-standing active request.
        let candidate = self.insts[idx]
            .active
            .iter()
            .copied()
            .filter(|&r| {
                let req = &self.reqs[r];
                !req.frozen && !req.in_send_buffer && matches!(req.mig, MigState::None)
            })
            .max_by_key(|&r| (self.reqs[r].seq, Reverse(self.reqs[r].trace_id)));
        let Some(req) = candidate else { return };
        self.insts[idx].ask_open = true;
        self.reqs[req].mig = MigState::Asked;
        let close_at = self.now + self.bid_window_us;
        self.push(
            close_at,
            Ev::BidClose {
                scope: BidScope::Balance { sender: inst, req, sender_load: my_load, handover: false },
            },
        );
    }

    fn maybe_handover(&mut self, inst: u32) {
        let idx = inst as usize;
        let head = self
            .insts[idx]
            .send_buffer
            .iter()
            .copied()
            .find(|&r| matches!(self.reqs[r].mig, MigState::None));
        let Some(req) = head else { return };
        match self.knobs.balance {
            BalanceMode::Off => {
                // Round-robin placement downstream; reservation still applies.
                let stage = self.insts[idx].stage;
                let my_load = self.insts[idx].load(&self.reqs);
                let members = self.stage_members[stage + 1].clone();
                let need = self.reqs[req].seq + self.cfg.balance.rounds as u64;
                for probe in 0..members.len() {
                    let dest = members[(self.handover_rr[stage] + probe) % members.len()];
                    if self.insts[dest as usize].free_kv() >= need {
                        self.handover_rr[stage] += probe + 1;
                        self.confirm_ticket(inst, dest, req, my_load, true);
                        return;
                    }
                }
                // Nobody can host it yet; retried on a later event.
            }
            BalanceMode::InterOnly | BalanceMode::Full => {
                if self.insts[idx].ask_open || self.insts[idx].failed_asks >= MAX_IDLE_POLLS {
                    return;
                }
                self.insts[idx].ask_open = true;
                self.reqs[req].mig = MigState::Asked;
                let my_load = self.insts[idx].load(&self.reqs);
                let close_at = self.now + self.bid_window_us;
                self.push(
                    close_at,
                    Ev::BidClose {
                        scope: BidScope::Balance {
                            sender: inst,
                            req,
                            sender_load: my_load,
                            handover: true,
                        },
                    },
                );
            }
        }
    }

    fn on_bid_close(&mut self, scope: BidScope) {
        match scope {
            BidScope::Dispatch { req, stage } => {
                let bids: Vec<BidMsg> = self.stage_members[stage]
                    .iter()
                    .map(|&i| self.dispatch_bid(i))
                    .collect();
                let winner = select_receiver(&bids);
                self.assign(winner, req, stage);
            }
            BidScope::Balance { sender, req, sender_load, handover } => {
                self.insts[sender as usize].ask_open = false;
                let alive = self.reqs[req].phase == Phase::Active
                    && self.reqs[req].owner == sender
                    && matches!(self.reqs[req].mig, MigState::Asked);
                if !alive {
                    if matches!(self.reqs[req].mig, MigState::Asked) {
                        self.reqs[req].mig = MigState::None;
                    }
                    return;
                }
                let stage = self.insts[sender as usize].stage;
                let candidates: Vec<u32> = if handover {
                    self.stage_members[stage + 1].clone()
                } else {
                    self.stage_members[stage].iter().copied().filter(|&i| i != sender).collect()
                };
                let need = self.reqs[req].seq + self.cfg.balance.rounds as u64;
                // Receivers without room abstain.
                let mut bids: Vec<BidMsg> = candidates
                    .iter()
                    .filter(|&&c| self.insts[c as usize].free_kv() >= need)
                    .map(|&c| self.dispatch_bid(c))
                    .collect();
                loop {
                    if bids.is_empty() {
                        // No takers this round; ask again on a later trigger.
                        self.reqs[req].mig = MigState::None;
                        self.insts[sender as usize].failed_asks += 1;
                        self.ensure_heartbeat(sender);
                        return;
                    }
                    let winner = select_receiver(&bids);
                    if self.try_reserve(winner, need) {
                        self.insts[sender as usize].failed_asks = 0;
                        self.confirm_ticket(sender, winner, req, sender_load, handover);
                        return;
                    }
                    // Stale: the winner can no longer host it; reselect.
                    bids.retain(|b| b.receiver_id != winner);
                }
            }
        }
    }

    fn try_reserve(&mut self, inst: u32, tokens: u64) -> bool {
        let i = &mut self.insts[inst as usize];
        if i.free_kv() >= tokens {
            i.resv += tokens;
            true
        } else {
            false
        }
    }

    fn confirm_ticket(&mut self, sender: u32, dest: u32, req: usize, sender_load: u64, handover: bool) {
        if self.knobs.balance == BalanceMode::Off && handover {
            // The off-mode path reserved nothing yet.
            let need = self.reqs[req].seq + self.cfg.balance.rounds as u64;
            let ok = self.try_reserve(dest, need);
            debug_assert!(ok, "off-mode handover checked free_kv first");
        }
        self.reqs[req].mig = MigState::Ticketed { dest };
        let ticket = MigrationTicket {
            request_id: req as u64,
            priority: sender_load,
            source_id: sender,
            seq_len_at_confirm: self.reqs[req].seq,
            failed_attempts: 0,
            state: TicketState::Queued,
        };
        self.insts[dest as usize].tickets.push(ticket);
        self.pump_tickets(dest);
    }

    fn ticket_reservation(&self, t: &MigrationTicket) -> u64 {
        t.seq_len_at_confirm + self.cfg.balance.rounds as u64
    }

    fn drop_ticket(&mut self, dest: u32, req: usize) {
        if let Some(t) = self.insts[dest as usize].tickets.remove(req as u64) {
            let give_back = self.ticket_reservation(&t);
            self.insts[dest as usize].resv -= give_back;
        }
    }

    fn pump_tickets(&mut self, dest: u32) {
        loop {
            let busy: Vec<bool> = self.insts.iter().map(|i| i.outbound.is_some()).collect();
            let action = self.insts[dest as usize]
                .tickets
                .pump(|src| busy[src as usize], self.cfg.balance.starvation_threshold);
            match action {
                PumpAction::Start(ticket) => {
                    let req = ticket.request_id as usize;
                    let valid = self.reqs[req].phase == Phase::Active
                        && self.reqs[req].owner == ticket.source_id
                        && matches!(self.reqs[req].mig, MigState::Ticketed { dest: d } if d == dest);
                    if !valid {
                        self.insts[dest as usize].resv -= self.ticket_reservation(&ticket);
                        continue;
                    }
                    if self.active_transfers >= self.cfg.balance.max_concurrent {
                        // Cap reached: not a sender failure; keep it queued.
                        self.insts[dest as usize].tickets.reinsert(ticket);
                        return;
                    }
                    self.start_transfer(ticket, dest);
                }
                PumpAction::Starve(ticket) => {
                    let sender = ticket.source_id;
                    self.insts[sender as usize]
                        .starved_pending
                        .push_back((ticket.request_id as usize, dest));
                    self.log(
                        EV_STARVE,
                        Some(dest),
                        Some(sender),
                        Some(ticket.request_id as usize),
                        format!("attempts={}", ticket.failed_attempts),
                    );
                    return;
                }
                PumpAction::Idle => return,
            }
        }
    }

    fn retry_starved(&mut self, inst: u32) {
        let idx = inst as usize;
        if self.insts[idx].outbound.is_some() {
            return;
        }
        while let Some(&(req, dest)) = self.insts[idx].starved_pending.front() {
            let valid = self.reqs[req].phase == Phase::Active
                && self.reqs[req].owner == inst
                && matches!(self.reqs[req].mig, MigState::Ticketed { dest: d } if d == dest);
            if !valid {
                self.insts[idx].starved_pending.pop_front();
                self.drop_ticket(dest, req);
                continue;
            }
            if self.active_transfers >= self.cfg.balance.max_concurrent {
                return; // retried on a later event
            }
            self.insts[idx].starved_pending.pop_front();
            let ticket = self.insts[idx].tickets.remove(req as u64); // not here; it's at dest
            debug_assert!(ticket.is_none());
            if let Some(t) = self.insts[dest as usize].tickets.remove(req as u64) {
                self.start_transfer(t, dest);
            }
            return;
        }
    }

    // -- live migration ------------------------------------------------------

    fn start_transfer(&mut self, ticket: MigrationTicket, dest: u32) {
        let req = ticket.request_id as usize;
        let sender = ticket.source_id;
        debug_assert!(self.insts[sender as usize].outbound.is_none());
        let tid = self.transfers.len();
        let handover = self.reqs[req].in_send_buffer;
        self.transfers.push(Transfer {
            state: TransferState::new(req as u64, sender, dest, self.cfg.balance.rounds),
            reserved: self.ticket_reservation(&ticket),
            handover,
            await_freeze: false,
            dead: false,
        });
        self.insts[sender as usize].outbound = Some(tid);
        self.active_transfers += 1;
        debug_assert!(self.active_transfers <= self.cfg.balance.max_concurrent);
        self.reqs[req].mig = MigState::Transferring { tid };
        if self.reqs[req].in_send_buffer {
            self.insts[sender as usize].send_buffer.retain(|&x| x != req);
        }
        // The sequence kept growing while the ticket waited its turn, so the
        // confirm-time reservation may be stale; extend it to the current
        // length plus the growth margin, or give up before any bytes move.
        let target = self.reqs[req].seq + self.transfers[tid].state.rounds_total as u64;
        let reserved = self.transfers[tid].reserved;
        if target > reserved {
            let extra = target - reserved;
            if !self.try_reserve(dest, extra) {
                self.abort_transfer(tid, "destination_full");
                return;
            }
            self.transfers[tid].reserved += extra;
        }
        if self.transfers[tid].state.next_is_stop_round() {
            self.begin_stop_round(tid);
        } else {
            let volume = self.transfers[tid].state.next_volume(self.reqs[req].seq);
            let at = self.now
                + wire_us(round_time(volume, self.cfg.cluster.kv_bytes_per_token, self.cfg.cluster.bandwidth));
            self.push(at, Ev::TransferRound { tid, volume });
        }
    }

    /// Schedules the stop-round, deferring while the source is mid-iteration
    /// with this request in the running batch.
    fn begin_stop_round(&mut self, tid: usize) {
        let req = self.transfers[tid].state.request_id as usize;
        let src = self.transfers[tid].state.source;
        if self.insts[src as usize].running {
            self.transfers[tid].await_freeze = true;
            return;
        }
        // Freeze: decoding stops; the final delta goes on the wire.
        self.reqs[req].frozen = true;
        let volume = self.transfers[tid].state.next_volume(self.reqs[req].seq);
        let at = self.now
            + wire_us(round_time(volume, self.cfg.cluster.kv_bytes_per_token, self.cfg.cluster.bandwidth));
        self.push(at, Ev::TransferRound { tid, volume });
    }

    fn on_transfer_round(&mut self, tid: usize, volume: u64) {
        if self.transfers[tid].dead {
            return;
        }
        self.transfers[tid].state.complete_round(volume);
        let req = self.transfers[tid].state.request_id as usize;
        let src = self.transfers[tid].state.source;
        let dest = self.transfers[tid].state.dest;
        if self.transfers[tid].state.finished() {
            // Ownership flip.
            let seq = self.reqs[req].seq;
            debug_assert_eq!(self.transfers[tid].state.synced_tokens, seq);
            let reserved = self.transfers[tid].reserved;
            self.transfers[tid].dead = true;
            self.active_transfers -= 1;
            self.insts[src as usize].outbound = None;
            self.insts[src as usize].kv_used -= seq;
            self.insts[src as usize].active.retain(|&x| x != req);
            self.insts[dest as usize].resv -= reserved;
            self.insts[dest as usize].kv_used += seq;
            self.insts[dest as usize].active.push(req);
            let r = &mut self.reqs[req];
            r.owner = dest;
            r.frozen = false;
            r.in_send_buffer = false;
            r.mig = MigState::None;
            r.migrations += 1;
            let kind = if self.transfers[tid].handover { "handover" } else { "balance" };
            self.log(EV_MIGRATE_DONE, Some(src), Some(dest), Some(req), format!("kind={kind};seq={seq}"));
            self.after_event(src);
            self.kick(src);
            self.after_event(dest);
            self.kick(dest);
            // The source freed a whole sequence and a concurrency slot opened.
            self.nudge_waiters(src);
            self.nudge_ticket_holders();
            return;
        }
        // Mid-transfer: decoding continued, so top the reservation up to the
        // sequence's new length plus the remaining growth margin.
        let remaining = (self.transfers[tid].state.rounds_total - self.transfers[tid].state.rounds_done) as u64;
        let target = self.reqs[req].seq + remaining;
        let reserved = self.transfers[tid].reserved;
        if target > reserved {
            let extra = target - reserved;
            if !self.try_reserve(dest, extra) {
                self.abort_transfer(tid, "destination_full");
                self.after_event(dest);
                return;
            }
            self.transfers[tid].reserved += extra;
        }
        if self.transfers[tid].state.next_is_stop_round() {
            self.begin_stop_round(tid);
        } else {
            let next_volume = self.transfers[tid].state.next_volume(self.reqs[req].seq);
            let at = self.now
                + wire_us(round_time(next_volume, self.cfg.cluster.kv_bytes_per_token, self.cfg.cluster.bandwidth));
            self.push(at, Ev::TransferRound { tid, volume: next_volume });
        }
    }

    fn abort_transfer(&mut self, tid: usize, reason: &str) {
        if self.transfers[tid].dead {
            return;
        }
        let req = self.transfers[tid].state.request_id as usize;
        let src = self.transfers[tid].state.source;
        let dest = self.transfers[tid].state.dest;
        let reserved = self.transfers[tid].reserved;
        self.transfers[tid].dead = true;
        self.active_transfers -= 1;
        self.insts[src as usize].outbound = None;
        self.insts[dest as usize].resv -= reserved;
        if self.reqs[req].phase == Phase::Active {
            // The request stays (and keeps decoding) on the source.
            self.reqs[req].frozen = false;
            self.reqs[req].mig = MigState::None;
            let hi = self.insts[src as usize].hi;
            let last = self.insts[src as usize].stage + 1 == self.ranges.len();
            if !last && self.reqs[req].seq >= hi && !self.reqs[req].in_send_buffer {
                self.reqs[req].in_send_buffer = true;
                self.insts[src as usize].send_buffer.push_back(req);
            }
        }
        self.log(EV_MIGRATE_ABORT, Some(src), Some(dest), Some(req), format!("reason={reason}"));
        // A reservation was released and a concurrency slot opened.
        self.nudge_waiters(dest);
        self.nudge_ticket_holders();
    }

    // -- refinement ----------------------------------------------------------

    fn on_refine_tick(&mut self, boundary: usize) {
        // Keep ticking while arrivals are still due, or while in-flight work
        // produced events since the previous tick; otherwise disarm (an
        // arrival re-arms it). Prevents an eternally-static system from
        // ticking forever.
        let progressed = self.work_marker != self.refine_last_marker[boundary];
        self.refine_last_marker[boundary] = self.work_marker;
        if self.pending_arrivals > 0 || (self.in_flight > 0 && progressed) {
            self.push(self.now + self.refine_us, Ev::RefineTick { boundary });
        } else {
            self.refine_armed[boundary] = false;
        }
        let upstream = boundary;
        let downstream = boundary + 1;
        let owner = self.stage_members[upstream][0] as usize;
        let mut local = self.insts[owner].active_shapes(&self.reqs);
        for shapes in self.insts[owner].peer_shapes.values() {
            local.extend(shapes.iter().copied());
        }
        let successor_sets: Vec<Vec<RequestShape>> = self.stage_members[downstream]
            .iter()
            .map(|peer| {
                self.insts[owner].downstream_shapes.get(peer).cloned().unwrap_or_default()
            })
            .collect();
        let objective = match self.knobs.refine {
            RefineMode::Qoe => SplitObjective::Quality,
            RefineMode::Memory => SplitObjective::Memory,
            RefineMode::Off => return,
        };
        let outcome = refine(
            &self.boundary_states[boundary],
            &local,
            &successor_sets,
            &self.qoe,
            objective,
        );
        self.boundary_states[boundary] = outcome.state;
        let Some(raw) = outcome.raw else { return };
        let lo = self.ranges[upstream].0;
        let hi = self.ranges[downstream].1;
        let (applied, clamped) = apply_boundary(outcome.state.boundary, lo, hi);
        let old = self.ranges[upstream].1;
        if applied != old {
            self.ranges[upstream].1 = applied;
            self.ranges[downstream].0 = applied;
            for &m in &self.stage_members[upstream] {
                self.insts[m as usize].hi = applied;
            }
            for &m in &self.stage_members[downstream] {
                self.insts[m as usize].lo = applied;
            }
        }
        self.log(
            EV_REFINE,
            Some(owner as u32),
            None,
            None,
            format!(
                "boundary={boundary};value={applied};raw={raw};clamped={}",
                u8::from(clamped)
            ),
        );
    }

    // -- heartbeat and wakeups ------------------------------------------------

    /// True when the instance has work that only a retry can move forward.
    fn retry_pending(&self, inst: u32) -> bool {
        let i = &self.insts[inst as usize];
        let handover_waiting =
            i.send_buffer.iter().any(|&r| matches!(self.reqs[r].mig, MigState::None));
        !i.tickets.is_empty()
            || !i.starved_pending.is_empty()
            || handover_waiting
            || (self.knobs.balance == BalanceMode::Full && !i.running && !i.active.is_empty())
    }

    fn ensure_heartbeat(&mut self, inst: u32) {
        let idx = inst as usize;
        if self.insts[idx].heartbeat_at.is_some()
            || self.insts[idx].idle_polls >= MAX_IDLE_POLLS
            || !self.retry_pending(inst)
        {
            return;
        }
        let at = self.now + self.heartbeat_us;
        self.insts[idx].heartbeat_at = Some(at);
        self.push(at, Ev::Heartbeat { inst });
    }

    /// Wakes an instance immediately because something it was waiting on
    /// (memory, the transfer cap, a sender) just changed.
    fn nudge(&mut self, inst: u32) {
        let idx = inst as usize;
        self.insts[idx].idle_polls = 0;
        self.insts[idx].failed_asks = 0;
        if self.insts[idx].heartbeat_at.is_none() {
            self.insts[idx].heartbeat_at = Some(self.now);
            self.push(self.now, Ev::Heartbeat { inst });
        }
    }

    /// Memory was freed on `freed`: wake everyone that might want to move
    /// work into it — its stage peers and the stage feeding it.
    fn nudge_waiters(&mut self, freed: u32) {
        let stage = self.insts[freed as usize].stage;
        let mut targets = self.stage_members[stage].clone();
        if stage > 0 {
            targets.extend(self.stage_members[stage - 1].iter().copied());
        }
        for t in targets {
            if t != freed {
                self.nudge(t);
            }
        }
    }

    /// A transfer ended, freeing a concurrency slot: wake every instance
    /// holding queued tickets or starved senders.
    fn nudge_ticket_holders(&mut self) {
        for i in 0..self.insts.len() {
            if !self.insts[i].tickets.is_empty() || !self.insts[i].starved_pending.is_empty() {
                self.nudge(i as u32);
            }
        }
    }

    fn on_heartbeat(&mut self, inst: u32) {
        self.insts[inst as usize].heartbeat_at = None;
        let before = self.work_marker;
        self.after_event(inst);
        self.kick(inst);
        let idx = inst as usize;
        if self.work_marker == before {
            self.insts[idx].idle_polls += 1;
        } else {
            self.insts[idx].idle_polls = 0;
        }
    }

    // -- invariants ----------------------------------------------------------

    #[cfg(debug_assertions)]
    fn audit_kv(&self) {
        for inst in &self.insts {
            let mut expect = 0u64;
            for (r, req) in self.reqs.iter().enumerate() {
                if req.owner != inst.id {
                    continue;
                }
                match req.phase {
                    Phase::Prefilling => expect += req.input,
                    Phase::Active => expect += req.seq,
                    _ => {
                        let _ = r;
                    }
                }
            }
            assert_eq!(inst.kv_used, expect, "instance {} KV ledger drifted", inst.id);
            assert!(
                inst.kv_used + inst.resv + inst.pending_growth <= inst.kv_capacity,
                "instance {} over capacity",
                inst.id
            );
            assert!(
                inst.running || inst.pending_growth == 0,
                "instance {} carries stale pending growth",
                inst.id
            );
        }
        assert!(self.active_transfers <= self.cfg.balance.max_concurrent);
        // Exactly-once ownership: every live request appears in exactly one
        // instance's bookkeeping.
        for (r, req) in self.reqs.iter().enumerate() {
            if matches!(req.phase, Phase::Queued | Phase::Prefilling | Phase::Active) {
                let holders = self
                    .insts
                    .iter()
                    .filter(|i| {
                        i.queued.contains(&r) || i.prefill_q.contains(&r) || i.active.contains(&r)
                    })
                    .count();
                assert_eq!(holders, 1, "request {r} held by {holders} instances");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

fn layout(cfg: &RunConfig, trace: &[TraceRequest]) -> Result<Vec<Stage>, SimError> {
    if let Some(stages) = &cfg.sim.fixed_stages {
        return Ok(stages.clone());
    }
    let pairs: Vec<(u64, u64)> = trace.iter().map(|t| (t.input_len, t.output_len)).collect();
    let max_final = pairs.iter().map(|&(i, o)| i + o).max().unwrap_or(1);
    match cfg.knobs().layout {
        Layout::Single => Ok(vec![Stage {
            lo: 0,
            hi: DEFAULT_MAX_CONTEXT.max(max_final + 1),
            instance_count: cfg.cluster.instances,
        }]),
        Layout::Chain => {
            let input = PlanInput {
                requests: pairs,
                instances: cfg.cluster.instances,
                bandwidth: cfg.cluster.bandwidth,
                kv_bytes_per_token: cfg.cluster.kv_bytes_per_token,
                params: QoeParams::new(cfg.qoe.d),
            };
            let edges = bucketize(max_final + 1);
            Ok(plan_chain(&input, &edges)?.stages)
        }
        Layout::Planned => {
            let input = PlanInput {
                requests: pairs,
                instances: cfg.cluster.instances,
                bandwidth: cfg.cluster.bandwidth,
                kv_bytes_per_token: cfg.cluster.kv_bytes_per_token,
                params: QoeParams::new(cfg.qoe.d),
            };
            Ok(plan_with_threshold(&input, cfg.sim.exact_threshold)?.stages)
        }
    }
}

fn median(mut values: Vec<u64>) -> u64 {
    if values.is_empty() {
        return 1;
    }
    values.sort_unstable();
    values[values.len() / 2]
}

/// One-request calibration: the unloaded TTFT and TPOT for a median-shaped
/// request on this hardware, used as the SLO baseline.
fn baseline_probe(cfg: &RunConfig, trace: &[TraceRequest]) -> Result<(f64, f64), SimError> {
    if trace.is_empty() {
        return Ok((0.0, 0.0));
    }
    let input = median(trace.iter().map(|t| t.input_len).collect());
    let output = median(trace.iter().map(|t| t.output_len).collect());
    let mut probe_cfg = cfg.clone();
    probe_cfg.cluster.instances = 1;
    probe_cfg.sim.fixed_stages = None;
    probe_cfg.sim.policy = crate::config::Policy::RoundRobin;
    probe_cfg.sim.dispatch = None;
    probe_cfg.sim.balance_mode = None;
    probe_cfg.sim.refine_mode = None;
    probe_cfg.sim.horizon_s = None;
    let probe_trace = vec![TraceRequest { id: 0, arrival_s: 0.0, input_len: input, output_len: output }];
    let stages = layout(&probe_cfg, &probe_trace)?;
    let mut engine = Engine::new(&probe_cfg, &stages, &probe_trace);
    engine.run_loop();
    let req = &engine.reqs[0];
    let (Some(first), Some(done)) = (req.first_token_us, req.completion_us) else {
        return Ok((0.0, 0.0));
    };
    let ttft0 = (first - req.arrival_us) as f64 / 1e6;
    let tpot0 = if output > 1 {
        (done - first) as f64 / 1e6 / (output - 1) as f64
    } else {
        0.0
    };
    Ok((ttft0, tpot0))
}

/// Runs one full simulation: resolves the stage layout, measures the SLO
/// baseline, executes the event loop, and computes the report from the
/// event log (the same pure function offline recomputation uses).
pub fn run(cfg: &RunConfig, trace: &[TraceRequest]) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let stages = layout(cfg, trace)?;
    let (ttft0, tpot0) = baseline_probe(cfg, trace)?;

    let mut engine = Engine::new(cfg, &stages, trace);
    let slo_scales = cfg
        .sim
        .slo_scales
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("|");
    engine.log(
        EV_META,
        None,
        None,
        None,
        format!(
            "policy={};seed={};warmup_frac={};slo_scales={slo_scales};baseline_ttft={ttft0};baseline_tpot={tpot0};oracle={}",
            cfg.sim.policy.name(),
            cfg.sim.seed,
            cfg.sim.warmup_frac,
            engine.oracle.fingerprint(),
        ),
    );
    for (s, members) in engine.stage_members.clone().into_iter().enumerate() {
        let (lo, hi) = engine.ranges[s];
        for m in members {
            engine.log(EV_STAGE_ASSIGN, Some(m), None, None, format!("stage={s};lo={lo};hi={hi}"));
        }
    }
    engine.run_loop();

    let report = report_from_events(&engine.log)?;
    let per_request = per_request_rows(&engine.log)?;
    let mut profiling = Vec::new();
    let mut audits = Vec::new();
    for req in &engine.reqs {
        if req.phase == Phase::Done && req.feat_iters > 0 {
            let iters = req.feat_iters as f64;
            let done = req.completion_us.expect("completed");
            profiling.push(ProfilingSample {
                features: crate::cost_model::BatchFeatures {
                    f0: 1.0,
                    f1: req.feat_acc[0] / iters,
                    f2: req.feat_acc[1] / iters,
                    f3: req.feat_acc[2] / iters,
                    f4: req.feat_acc[3] / iters,
                },
                normalized_latency: (done - req.arrival_us) as f64 / 1e6 / req.output as f64,
            });
        }
        audits.push(RequestAudit {
            trace_id: req.trace_id,
            completed: req.phase == Phase::Done,
            output_len: req.output,
            migrations: req.migrations,
            tokens_by_instance: req.tokens_by_owner.iter().map(|(&k, &v)| (k, v)).collect(),
        });
    }
    Ok(SimOutput {
        report,
        events: engine.log,
        per_request,
        profiling,
        stages,
        audits,
        penalty_range: engine.penalty_seen,
    })
}
