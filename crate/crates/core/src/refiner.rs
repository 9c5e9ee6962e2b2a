//! Runtime refinement of the boundary between two adjacent stages: a
//! representative per-successor load is averaged out of the downstream
//! instances' tracked sequences, merged with the upstream stage's own, and
//! the quality-optimal split of that merged list becomes the new raw
//! boundary — smoothed by an EMA and frozen entirely during low traffic so
//! a handful of requests cannot whip the ranges around.

use crate::cost_model::{batch_qoe_from_features, BatchFeatures, QoeParams, RequestShape};

/// Smoothed boundary between one pair of adjacent stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryState {
    /// Current boundary in tokens; fractional internally, rounded when
    /// applied to live stage ranges.
    pub boundary: f64,
    /// EMA weight of the newest raw split, in [0, 1].
    pub ema_alpha: f64,
    /// Minimum tracked requests (local + averaged successor) for an update.
    pub min_traffic: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RefineError {
    #[error("cannot split an empty request list")]
    EmptyList,
}

/// Merges the successors' tracked sequences into one sorted union and
/// returns the canonical subset of its `k`-way even division, `k` = number
/// of successors: a representative "average successor" load.
pub fn average_successor_load<T, K, F>(successor_sets: &[Vec<T>], sort_key: F) -> Vec<T>
where
    T: Clone,
    K: Ord,
    F: Fn(&T) -> K,
{
    assert!(!successor_sets.is_empty(), "need at least one successor");
    let k = successor_sets.len();
    let mut union: Vec<T> = successor_sets.iter().flatten().cloned().collect();
    union.sort_by_key(|item| sort_key(item));
    let mut out = Vec::with_capacity(union.len().div_ceil(k));
    let mut idx = k / 2;
    while idx < union.len() {
        out.push(union[idx].clone());
        idx += k;
    }
    out
}

/// Incremental feature sums used to evaluate both sides of every candidate
/// split in one pass.
#[derive(Debug, Clone, Copy, Default)]
struct FeatSums {
    n: u64,
    sum_i: u128,
    sum_i2: u128,
    sum_l: u128,
}

impl FeatSums {
    fn add(&mut self, s: &RequestShape) {
        let i = s.input_len as u128;
        self.n += 1;
        self.sum_i += i;
        self.sum_i2 += i * i;
        self.sum_l += s.seq_len as u128;
    }

    fn sub(&mut self, s: &RequestShape) {
        let i = s.input_len as u128;
        self.n -= 1;
        self.sum_i -= i;
        self.sum_i2 -= i * i;
        self.sum_l -= s.seq_len as u128;
    }

    fn features(&self) -> BatchFeatures {
        BatchFeatures {
            f0: 1.0,
            f1: self.n as f64,
            f2: self.sum_i as f64,
            f3: self.sum_i2 as f64,
            f4: self.sum_l as f64,
        }
    }
}

fn batch_quality(sums: &FeatSums, params: &QoeParams) -> f64 {
    batch_qoe_from_features(&sums.features(), params)
}

/// Returns the smallest index `b` (0 ≤ b < N) minimizing
/// `batch_qoe(r[..b]) + batch_qoe(r[b..])` over the sorted list `r`.
/// The split length is `r[b].seq_len`.
pub fn optimal_split(r: &[RequestShape], params: &QoeParams) -> Result<usize, RefineError> {
    if r.is_empty() {
        return Err(RefineError::EmptyList);
    }
    debug_assert!(r.windows(2).all(|w| w[0].seq_len <= w[1].seq_len), "input must be sorted");
    let mut left = FeatSums::default();
    let mut right = FeatSums::default();
    for s in r {
        right.add(s);
    }
    let mut best_b = 0;
    let mut best_cost = batch_quality(&left, params) + batch_quality(&right, params);
    for b in 1..r.len() {
        left.add(&r[b - 1]);
        right.sub(&r[b - 1]);
        let cost = batch_quality(&left, params) + batch_quality(&right, params);
        if cost < best_cost {
            best_cost = cost;
            best_b = b;
        }
    }
    Ok(best_b)
}

/// Memory-equalizing alternative: the smallest index `b` minimizing the
/// absolute difference in total cached tokens between the two sides.
pub fn memory_split(r: &[RequestShape]) -> Result<usize, RefineError> {
    if r.is_empty() {
        return Err(RefineError::EmptyList);
    }
    let total: u128 = r.iter().map(|s| s.seq_len as u128).sum();
    let mut left: u128 = 0;
    let mut best_b = 0;
    let mut best_gap = total; // b = 0: left empty, right holds everything.
    for b in 1..r.len() {
        left += r[b - 1].seq_len as u128;
        let right = total - left;
        let gap = left.abs_diff(right);
        if gap < best_gap {
            best_gap = gap;
            best_b = b;
        }
    }
    Ok(best_b)
}

/// Which split criterion `refine` optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitObjective {
    Quality,
    Memory,
}

/// Result of one refinement step: the next boundary state and, when an
/// update actually ran, the raw (unsmoothed) split length it pulled toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub state: BoundaryState,
    pub raw: Option<f64>,
}

/// One refinement step for a boundary: averages the successor load, merges
/// it with the local stage's tracked sequences, finds the optimal split,
/// and moves the boundary by EMA. With fewer than `min_traffic` total
/// tracked requests the boundary is left exactly unchanged.
pub fn refine(
    current: &BoundaryState,
    local: &[RequestShape],
    successor_sets: &[Vec<RequestShape>],
    params: &QoeParams,
    objective: SplitObjective,
) -> RefineOutcome {
    let averaged = if successor_sets.is_empty() {
        Vec::new()
    } else {
        average_successor_load(successor_sets, |s| (s.seq_len, s.input_len))
    };
    if local.len() + averaged.len() < current.min_traffic {
        return RefineOutcome { state: *current, raw: None };
    }
    let mut merged: Vec<RequestShape> = local.iter().copied().chain(averaged).collect();
    merged.sort_unstable_by_key(|s| (s.seq_len, s.input_len));
    let b = match objective {
        SplitObjective::Quality => optimal_split(&merged, params),
        SplitObjective::Memory => memory_split(&merged),
    };
    let b = match b {
        Ok(b) => b,
        Err(RefineError::EmptyList) => return RefineOutcome { state: *current, raw: None },
    };
    let raw = merged[b].seq_len as f64;
    let state = BoundaryState {
        boundary: current.ema_alpha * raw + (1.0 - current.ema_alpha) * current.boundary,
        ..*current
    };
    RefineOutcome { state, raw: Some(raw) }
}

/// Rounds a fractional boundary and clamps it so the two adjacent ranges
/// `[lo, B)` and `[B, hi)` both stay nonempty. Returns the applied value
/// and whether clamping was needed.
pub fn apply_boundary(boundary: f64, lo: u64, hi: u64) -> (u64, bool) {
    assert!(hi >= lo + 2, "no room for a boundary in [{lo}, {hi})");
    let rounded = boundary.round().max(0.0) as u64;
    let applied = rounded.clamp(lo + 1, hi - 1);
    (applied, applied != rounded)
}
