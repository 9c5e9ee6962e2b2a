//! Decentralized bid-ask load balancing: overload detection against the
//! stage mean, receiver selection from bid messages, a priority ticket
//! queue on the receiving side with starvation backpressure, and the
//! round-volume bookkeeping for multi-round live migration of KV caches.
//!
//! These are the pure protocol pieces; the simulator drives them through
//! its event loop, and a real deployment could drive the same state
//! machines with network messages.

use std::cmp::Reverse;
use std::collections::BTreeMap;

/// Sender's offer: one request plus the sender's current buffered load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AskMsg {
    pub sender_id: u32,
    pub request_id: u64,
    /// Total tokens of everything buffered on the sender; becomes the
    /// ticket priority at the receiver.
    pub sender_load: u64,
}

/// Receiver's reply to an ask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidMsg {
    pub receiver_id: u32,
    /// Receiver's current load in tokens.
    pub load: u64,
    /// When the receiver could start serving, seconds (buffered work over
    /// measured throughput).
    pub earliest_start: f64,
    /// When the bid was produced, seconds; "replies first" tie-break.
    pub reply_time: f64,
}

/// Lifecycle of a confirmed migration on the receiving side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TicketState {
    Queued,
    Transferring,
    Starved,
    Done,
}

/// A confirmed ownership handover waiting for its KV transfer to start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MigrationTicket {
    pub request_id: u64,
    /// Sender load at ask time: higher drains first.
    pub priority: u64,
    pub source_id: u32,
    /// Sequence length the reservation was sized for.
    pub seq_len_at_confirm: u64,
    pub failed_attempts: u32,
    pub state: TicketState,
}

/// True iff this instance's load strictly exceeds `factor ×` the stage
/// mean. Equality is not overload, so instances sitting exactly at the
/// threshold do not oscillate.
pub fn detect_overload(my_load: u64, stage_loads: &[u64], factor: f64) -> bool {
    assert!(!stage_loads.is_empty(), "stage_loads must include this instance");
    let mean = stage_loads.iter().map(|&l| l as f64).sum::<f64>() / stage_loads.len() as f64;
    my_load as f64 > factor * mean
}

/// Picks the winning receiver from a nonempty bid set: keep the ⌈k/2⌉
/// lowest-load bids, of those the (at most) three earliest starters, and of
/// those the earliest replier. Every step breaks ties by ascending
/// receiver id.
pub fn select_receiver(bids: &[BidMsg]) -> u32 {
    assert!(!bids.is_empty(), "need at least one bid");
    let mut by_load: Vec<&BidMsg> = bids.iter().collect();
    by_load.sort_by_key(|b| (b.load, b.receiver_id));
    by_load.truncate(bids.len().div_ceil(2));

    by_load.sort_by(|a, b| {
        a.earliest_start
            .total_cmp(&b.earliest_start)
            .then_with(|| a.receiver_id.cmp(&b.receiver_id))
    });
    by_load.truncate(3);

    by_load
        .into_iter()
        .min_by(|a, b| {
            a.reply_time
                .total_cmp(&b.reply_time)
                .then_with(|| a.receiver_id.cmp(&b.receiver_id))
        })
        .unwrap()
        .receiver_id
}

/// What a receiver pump pass decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PumpAction {
    /// Begin transferring this ticket (already removed from the queue).
    Start(MigrationTicket),
    /// This ticket starved out: notify its sender, then wait for it.
    Starve(MigrationTicket),
    Idle,
}

type TicketKey = (Reverse<u64>, u32, u64);

fn key_of(t: &MigrationTicket) -> TicketKey {
    (Reverse(t.priority), t.source_id, t.request_id)
}

/// Receiver-side queue of confirmed migrations, drained highest sender-load
/// first (ties by source id, then request id).
#[derive(Debug, Default, Clone)]
pub struct TicketQueue {
    tickets: BTreeMap<TicketKey, MigrationTicket>,
    /// Set while a starvation notice is outstanding: the pump idles until
    /// the starved request's transfer begins.
    waiting_on: Option<u64>,
}

impl TicketQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ticket: MigrationTicket) {
        self.tickets.insert(key_of(&ticket), ticket);
    }

    pub fn len(&self) -> usize {
        self.tickets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tickets.is_empty()
    }

    pub fn contains(&self, request_id: u64) -> bool {
        self.tickets.values().any(|t| t.request_id == request_id)
    }

    pub fn waiting_on(&self) -> Option<u64> {
        self.waiting_on
    }

    /// Tickets in drain order (inspection / tests).
    pub fn iter(&self) -> impl Iterator<Item = &MigrationTicket> {
        self.tickets.values()
    }

    /// Removes a ticket (request completed, cancelled, or its transfer is
    /// starting via the starvation path). Clears the waiting state when it
    /// was the awaited request.
    pub fn remove(&mut self, request_id: u64) -> Option<MigrationTicket> {
        if self.waiting_on == Some(request_id) {
            self.waiting_on = None;
        }
        let key = self
            .tickets
            .iter()
            .find(|(_, t)| t.request_id == request_id)
            .map(|(k, _)| *k)?;
        self.tickets.remove(&key)
    }

    /// Puts a ticket back unchanged (e.g. the global transfer cap vetoed a
    /// start; that is not a sender-busy failure, so no attempt is counted).
    pub fn reinsert(&mut self, mut ticket: MigrationTicket) {
        ticket.state = TicketState::Queued;
        self.push(ticket);
    }

    /// One pump pass: walk tickets in priority order; start the first whose
    /// sender is free. Each busy-sender skip increments that ticket's
    /// failed_attempts; a ticket skipped `threshold + 1` times starves —
    /// its sender is notified to send it right after the current transfer,
    /// and this queue waits (idles) until then.
    pub fn pump(&mut self, sender_busy: impl Fn(u32) -> bool, starvation_threshold: u32) -> PumpAction {
        if self.waiting_on.is_some() {
            return PumpAction::Idle;
        }
        let keys: Vec<TicketKey> = self.tickets.keys().copied().collect();
        for key in keys {
            let ticket = self.tickets.get_mut(&key).expect("key just listed");
            if !sender_busy(ticket.source_id) {
                let mut started = self.tickets.remove(&key).expect("present");
                started.state = TicketState::Transferring;
                return PumpAction::Start(started);
            }
            ticket.failed_attempts += 1;
            debug_assert!(ticket.failed_attempts <= starvation_threshold + 1);
            if ticket.failed_attempts > starvation_threshold {
                ticket.state = TicketState::Starved;
                self.waiting_on = Some(ticket.request_id);
                return PumpAction::Starve(*ticket);
            }
        }
        PumpAction::Idle
    }
}

/// Progress of one live migration: how many rounds ran and how many tokens
/// of KV are already on the destination. Round `i` copies the delta that
/// accumulated while round `i−1` was on the wire; the final round is the
/// stop-round (decode pauses, the last delta flushes, ownership flips).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferState {
    pub request_id: u64,
    pub source: u32,
    pub dest: u32,
    pub rounds_total: u32,
    pub rounds_done: u32,
    pub synced_tokens: u64,
}

impl TransferState {
    pub fn new(request_id: u64, source: u32, dest: u32, rounds_total: u32) -> Self {
        assert!(rounds_total >= 1);
        Self { request_id, source, dest, rounds_total, rounds_done: 0, synced_tokens: 0 }
    }

    /// Is the upcoming round the stop-round?
    pub fn next_is_stop_round(&self) -> bool {
        self.rounds_done + 1 == self.rounds_total
    }

    /// Tokens the next round must copy given the sequence's current length.
    pub fn next_volume(&self, current_seq_len: u64) -> u64 {
        debug_assert!(current_seq_len >= self.synced_tokens);
        current_seq_len - self.synced_tokens
    }

    pub fn complete_round(&mut self, copied_tokens: u64) {
        self.synced_tokens += copied_tokens;
        self.rounds_done += 1;
        debug_assert!(self.rounds_done <= self.rounds_total);
    }

    pub fn finished(&self) -> bool {
        self.rounds_done == self.rounds_total
    }
}

/// Wire time of one copy round.
pub fn round_time(tokens: u64, kv_bytes_per_token: f64, bandwidth: f64) -> f64 {
    assert!(bandwidth > 0.0);
    tokens as f64 * kv_bytes_per_token / bandwidth
}
