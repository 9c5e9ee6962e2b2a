//! Request traces: Poisson generation from an empirical length
//! distribution, trace-file ingestion (JSON Lines or CSV), exponential
//! length bucketization shared with the planner, and length histograms.

use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

/// Default maximum context: requests whose total length exceeds this are
/// dropped at ingestion.
pub const DEFAULT_MAX_CONTEXT: u64 = 131072;

/// One request in a trace. `output_len` is ground truth used by the
/// simulator to decide completion; scheduling policies never see it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub id: u64,
    pub arrival_s: f64,
    pub input_len: u64,
    pub output_len: u64,
}

impl TraceRequest {
    /// Final sequence length once fully generated.
    pub fn final_len(&self) -> u64 {
        self.input_len + self.output_len
    }
}

/// Trace ingestion and generation failures.
#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace contains no usable requests")]
    Empty,
    #[error("length model has no (input, output) pairs")]
    EmptyLengthModel,
}

/// Result of loading a trace: surviving requests plus how many rows the
/// max-context cap dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub requests: Vec<TraceRequest>,
    pub dropped_over_cap: usize,
}

/// Empirical (input_len, output_len) sampler: resamples recorded pairs with
/// replacement, preserving the input/output correlation of the source data.
#[derive(Debug, Clone)]
pub struct EmpiricalLengthSampler {
    pairs: Vec<(u64, u64)>,
}

impl EmpiricalLengthSampler {
    pub fn new(pairs: Vec<(u64, u64)>) -> Result<Self, TraceError> {
        if pairs.is_empty() {
            return Err(TraceError::EmptyLengthModel);
        }
        debug_assert!(pairs.iter().all(|&(i, o)| i >= 1 && o >= 1));
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(u64, u64)] {
        &self.pairs
    }

    fn sample(&self, rng: &mut impl Rng) -> (u64, u64) {
        self.pairs[rng.random_range(0..self.pairs.len())]
    }
}

/// Exponential length-bucket edges `1, 2, 4, ...` up to the first power of
/// two ≥ `max_len`. The result has `max(1, ⌈log₂ max_len⌉)` buckets, i.e.
/// one more edge than buckets.
pub fn bucketize(max_len: u64) -> Vec<u64> {
    assert!(max_len >= 1, "max_len must be ≥ 1");
    let mut edges = vec![1u64];
    let mut top = 1u64;
    while top < max_len.max(2) {
        top *= 2;
        edges.push(top);
    }
    edges
}

/// Poisson arrivals over `[0, duration)` with lengths drawn i.i.d. from the
/// empirical sampler. Deterministic for a fixed seed: the generator is a
/// seeded ChaCha8 stream, portable across platforms.
pub fn generate_poisson(
    rate: f64,
    duration_s: f64,
    length_model: &EmpiricalLengthSampler,
    seed: u64,
) -> Vec<TraceRequest> {
    assert!(rate > 0.0, "rate must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate).expect("rate > 0");
    let mut out = Vec::new();
    let mut t = 0.0f64;
    let mut id = 0u64;
    loop {
        t += gap.sample(&mut rng);
        if t >= duration_s {
            break;
        }
        let (input_len, output_len) = length_model.sample(&mut rng);
        out.push(TraceRequest { id, arrival_s: t, input_len, output_len });
        id += 1;
    }
    out
}

/// Loads a trace file. JSON Lines (`{id, arrival_s, input_len, output_len}`)
/// or CSV with the same column names, chosen by extension (`.csv` → CSV,
/// anything else sniffed: a leading `{` means JSON Lines). Requests are
/// returned sorted by arrival; rows whose total length exceeds
/// `max_context` are dropped and counted.
pub fn load_trace(path: &Path, max_context: u64) -> Result<LoadedTrace, TraceError> {
    let text = std::fs::read_to_string(path)?;
    let is_csv = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => true,
        Some("jsonl") | Some("ndjson") | Some("json") => false,
        _ => !text.trim_start().starts_with('{'),
    };
    if is_csv {
        parse_trace_csv(&text, max_context)
    } else {
        parse_trace_jsonl(&text, max_context)
    }
}

/// Parses JSON Lines trace text. Exposed for in-memory callers and tests.
pub fn parse_trace_jsonl(text: &str, max_context: u64) -> Result<LoadedTrace, TraceError> {
    let mut requests = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in text.as_bytes().lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let req: TraceRequest = serde_json::from_str(trimmed)
            .map_err(|e| TraceError::Parse { line: idx + 1, message: e.to_string() })?;
        validate_row(&req, idx + 1)?;
        if req.final_len() > max_context {
            dropped += 1;
        } else {
            requests.push(req);
        }
    }
    finish_trace(requests, dropped)
}

/// Parses CSV trace text with header `id,arrival_s,input_len,output_len`
/// (any column order).
pub fn parse_trace_csv(text: &str, max_context: u64) -> Result<LoadedTrace, TraceError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut requests = Vec::new();
    let mut dropped = 0usize;
    for row in rdr.deserialize::<TraceRequest>() {
        let req = row.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            TraceError::Parse { line, message: e.to_string() }
        })?;
        validate_row(&req, 0)?;
        if req.final_len() > max_context {
            dropped += 1;
        } else {
            requests.push(req);
        }
    }
    finish_trace(requests, dropped)
}

fn validate_row(req: &TraceRequest, line: usize) -> Result<(), TraceError> {
    if req.input_len < 1 || req.output_len < 1 {
        return Err(TraceError::Parse {
            line,
            message: format!(
                "request {} has zero-length field (input {}, output {})",
                req.id, req.input_len, req.output_len
            ),
        });
    }
    if !req.arrival_s.is_finite() || req.arrival_s < 0.0 {
        return Err(TraceError::Parse {
            line,
            message: format!("request {} has invalid arrival {}", req.id, req.arrival_s),
        });
    }
    Ok(())
}

fn finish_trace(mut requests: Vec<TraceRequest>, dropped: usize) -> Result<LoadedTrace, TraceError> {
    if requests.is_empty() {
        return Err(TraceError::Empty);
    }
    requests.sort_by(|a, b| {
        a.arrival_s
            .partial_cmp(&b.arrival_s)
            .expect("arrivals validated finite")
            .then(a.id.cmp(&b.id))
    });
    Ok(LoadedTrace { requests, dropped_over_cap: dropped })
}

/// Histogram of lengths over bucket edges. Buckets are `[e_i, e_{i+1})`;
/// values below the first edge land in the first bucket and values at or
/// above the last edge land in the last, so every length is counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthHistogram {
    pub bucket_edges: Vec<u64>,
    pub counts: Vec<u64>,
}

impl LengthHistogram {
    pub fn build(bucket_edges: Vec<u64>, lengths: impl IntoIterator<Item = u64>) -> Self {
        assert!(bucket_edges.len() >= 2, "need at least one bucket");
        debug_assert!(bucket_edges.windows(2).all(|w| w[0] < w[1]));
        let n_buckets = bucket_edges.len() - 1;
        let mut counts = vec![0u64; n_buckets];
        for len in lengths {
            let idx = match bucket_edges.binary_search(&len) {
                Ok(i) => i,              // length equals edge i → bucket [e_i, e_{i+1})
                Err(0) => 0,             // below first edge
                Err(i) => i - 1,         // inside bucket i-1
            };
            counts[idx.min(n_buckets - 1)] += 1;
        }
        Self { bucket_edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucketize_example_tiers() {
        assert_eq!(bucketize(8), vec![1, 2, 4, 8]);
    }

    #[test]
    fn bucketize_minimum_is_one_bucket() {
        assert_eq!(bucketize(1), vec![1, 2]);
    }

    #[test]
    fn bucketize_full_context_has_17_buckets() {
        let edges = bucketize(131072);
        assert_eq!(edges.len() - 1, 17);
        assert_eq!(*edges.last().unwrap(), 131072);
    }

    #[test]
    fn bucketize_rounds_up_to_power_of_two() {
        assert_eq!(bucketize(5), vec![1, 2, 4, 8]);
    }

    fn test_sampler() -> EmpiricalLengthSampler {
        EmpiricalLengthSampler::new(vec![(10, 20), (100, 50), (1000, 5)]).unwrap()
    }

    #[test]
    fn poisson_is_deterministic_for_fixed_seed() {
        let a = generate_poisson(1.0, 100.0, &test_sampler(), 42);
        let b = generate_poisson(1.0, 100.0, &test_sampler(), 42);
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let c = generate_poisson(1.0, 100.0, &test_sampler(), 43);
        assert_ne!(a, c, "different seeds should give different traces");
    }

    #[test]
    fn poisson_count_concentrates_around_rate_times_duration() {
        // Poisson(λ = 2.0 · 10000): count within 3σ of 20000, σ = √20000.
        let trace = generate_poisson(2.0, 10000.0, &test_sampler(), 7);
        let n = trace.len() as f64;
        let sigma = 20000f64.sqrt();
        assert!(
            (n - 20000.0).abs() < 3.0 * sigma,
            "count {n} outside 3σ of 20000"
        );
    }

    #[test]
    fn poisson_zero_duration_is_empty() {
        assert!(generate_poisson(1.0, 0.0, &test_sampler(), 1).is_empty());
    }

    #[test]
    fn poisson_arrivals_sorted_and_ids_unique() {
        let trace = generate_poisson(5.0, 50.0, &test_sampler(), 9);
        for w in trace.windows(2) {
            assert!(w[0].arrival_s <= w[1].arrival_s);
            assert!(w[0].id < w[1].id);
        }
    }

    #[test]
    fn jsonl_trace_parses_in_arrival_order() {
        let text = concat!(
            r#"{"id":2,"arrival_s":3.0,"input_len":10,"output_len":5}"#, "\n",
            r#"{"id":0,"arrival_s":1.0,"input_len":20,"output_len":7}"#, "\n",
            r#"{"id":1,"arrival_s":2.0,"input_len":30,"output_len":9}"#, "\n",
        );
        let loaded = parse_trace_jsonl(text, DEFAULT_MAX_CONTEXT).unwrap();
        assert_eq!(loaded.requests.len(), 3);
        assert_eq!(loaded.dropped_over_cap, 0);
        let ids: Vec<u64> = loaded.requests.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn over_cap_rows_are_dropped_and_counted() {
        let text = concat!(
            r#"{"id":0,"arrival_s":0.0,"input_len":200000,"output_len":5}"#, "\n",
            r#"{"id":1,"arrival_s":1.0,"input_len":10,"output_len":5}"#, "\n",
        );
        let loaded = parse_trace_jsonl(text, DEFAULT_MAX_CONTEXT).unwrap();
        assert_eq!(loaded.requests.len(), 1);
        assert_eq!(loaded.requests[0].id, 1);
        assert_eq!(loaded.dropped_over_cap, 1);
    }

    #[test]
    fn malformed_row_names_the_line() {
        let text = concat!(
            r#"{"id":0,"arrival_s":0.0,"input_len":10,"output_len":5}"#, "\n",
            r#"{"id":1,"arrival_s":"not a number"}"#, "\n",
        );
        match parse_trace_jsonl(text, DEFAULT_MAX_CONTEXT) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            parse_trace_jsonl("", DEFAULT_MAX_CONTEXT),
            Err(TraceError::Empty)
        ));
    }

    #[test]
    fn csv_trace_parses_same_columns() {
        let text = "id,arrival_s,input_len,output_len\n1,0.5,10,5\n0,0.25,20,6\n";
        let loaded = parse_trace_csv(text, DEFAULT_MAX_CONTEXT).unwrap();
        assert_eq!(loaded.requests.len(), 2);
        assert_eq!(loaded.requests[0].id, 0);
        assert_eq!(loaded.requests[1].arrival_s, 0.5);
    }

    #[test]
    fn histogram_conserves_counts() {
        let trace = generate_poisson(3.0, 200.0, &test_sampler(), 11);
        let edges = bucketize(2048);
        let hist =
            LengthHistogram::build(edges, trace.iter().map(|r| r.final_len()));
        assert_eq!(hist.total(), trace.len() as u64);
    }

    #[test]
    fn histogram_places_boundary_values_downstream() {
        let hist = LengthHistogram::build(vec![1, 2, 4, 8], [1u64, 2, 3, 4, 7, 8, 9]);
        // Buckets [1,2) [2,4) [4,8); 8 and 9 clamp into the last bucket.
        assert_eq!(hist.counts, vec![1, 2, 4]);
    }
}
