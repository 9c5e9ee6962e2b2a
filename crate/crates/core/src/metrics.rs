//! Evaluation metrics over simulation event logs: per-request latency
//! figures (TTFT, TPOT, normalized latency), windowed token throughput,
//! SLO attainment against a calibration baseline, and per-stage load
//! balance (coefficient of variation of per-instance output tokens).
//!
//! The report is a pure function of the event log: recomputing it from a
//! written `events.csv` reproduces `report.json` byte for byte.

use serde::{Deserialize, Serialize};

pub const MICROS_PER_SEC: f64 = 1e6;

// Event names shared by the simulator (writer) and this module (reader).
pub const EV_META: &str = "meta";
pub const EV_STAGE_ASSIGN: &str = "stage_assign";
pub const EV_ARRIVE: &str = "arrive";
pub const EV_ROUTE: &str = "route";
pub const EV_REJECT: &str = "reject";
pub const EV_FIRST_TOKEN: &str = "first_token";
pub const EV_ITER: &str = "iter";
pub const EV_COMPLETE: &str = "complete";
pub const EV_MIGRATE_DONE: &str = "migrate_done";
pub const EV_MIGRATE_ABORT: &str = "migrate_abort";
pub const EV_STARVE: &str = "starve";
pub const EV_REFINE: &str = "refine";

/// One audit-log line: `ts,event,src,dst,request_id,detail`, timestamps in
/// integer microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRow {
    pub ts: u64,
    pub event: String,
    pub src: Option<u32>,
    pub dst: Option<u32>,
    pub request_id: Option<u64>,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("request never produced its first token")]
    IncompleteRequest,
    #[error("malformed event log: {0}")]
    MalformedLog(String),
    #[error("event I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("event CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// TTFT, mean TPOT, and normalized latency (all seconds) for one completed
/// request.
pub fn per_request_metrics(
    arrival_us: u64,
    first_token_us: Option<u64>,
    completion_us: u64,
    output_len: u64,
) -> Result<(f64, f64, f64), MetricsError> {
    let first = first_token_us.ok_or(MetricsError::IncompleteRequest)?;
    debug_assert!(arrival_us <= first && first <= completion_us && output_len >= 1);
    let ttft = (first - arrival_us) as f64 / MICROS_PER_SEC;
    let tpot = if output_len > 1 {
        (completion_us - first) as f64 / MICROS_PER_SEC / (output_len - 1) as f64
    } else {
        0.0
    };
    let normalized = (completion_us - arrival_us) as f64 / MICROS_PER_SEC / output_len as f64;
    Ok((ttft, tpot, normalized))
}

/// Fraction of requests with `ttft ≤ scale·baseline_ttft` AND
/// `tpot ≤ scale·baseline_tpot`. Empty input yields 0.
pub fn slo_attainment(per_request: &[(f64, f64)], baseline: (f64, f64), scale: f64) -> f64 {
    if per_request.is_empty() {
        return 0.0;
    }
    let met = per_request
        .iter()
        .filter(|(ttft, tpot)| *ttft <= scale * baseline.0 && *tpot <= scale * baseline.1)
        .count();
    met as f64 / per_request.len() as f64
}

/// Population coefficient of variation per stage over per-instance output
/// token counts; a stage with zero mean reports 0.
pub fn stage_cv(per_stage_instance_tokens: &[Vec<u64>]) -> Vec<f64> {
    per_stage_instance_tokens
        .iter()
        .map(|counts| {
            if counts.is_empty() {
                return 0.0;
            }
            let n = counts.len() as f64;
            let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
            if mean == 0.0 {
                return 0.0;
            }
            let var = counts
                .iter()
                .map(|&c| {
                    let d = c as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            var.sqrt() / mean
        })
        .collect()
}

/// Nearest-rank percentile of an ascending-sorted series; 0 when empty.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!((0.0..=100.0).contains(&p));
    if sorted.is_empty() {
        return 0.0;
    }
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

/// Attainment at one SLO scale factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloPoint {
    pub scale: f64,
    pub attainment: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub arrived: u64,
    pub completed: u64,
    pub rejected: u64,
    pub migrated: u64,
    pub in_flight: u64,
}

/// The full evaluation report for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub seed: u64,
    pub counts: Counts,
    pub ttft_mean: f64,
    pub ttft_p95: f64,
    pub tpot_mean: f64,
    pub tpot_p95: f64,
    pub normalized_latency_mean: f64,
    /// Output tokens per second inside the measurement window.
    pub throughput: f64,
    /// Measurement window (run duration minus warmup), seconds.
    pub throughput_window_s: f64,
    /// Output tokens produced inside the window.
    pub window_output_tokens: u64,
    pub baseline_ttft: f64,
    pub baseline_tpot: f64,
    pub slo: Vec<SloPoint>,
    pub per_stage_cv: Vec<f64>,
    /// Hardware oracle settings echoed from the run, for cross-policy
    /// comparability checks.
    pub oracle: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::MalformedLog(e.to_string()))
    }
}

/// One `per_request.csv` line (completed requests only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRequestRow {
    pub id: u64,
    /// Arrival time, seconds.
    pub arrival: f64,
    pub ttft: f64,
    pub tpot_mean: f64,
    pub migrations: u32,
}

fn detail_pairs(detail: &str) -> impl Iterator<Item = (&str, &str)> {
    detail
        .split(';')
        .filter(|kv| !kv.is_empty())
        .filter_map(|kv| kv.split_once('='))
}

fn detail_get<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail_pairs(detail).find(|(k, _)| *k == key).map(|(_, v)| v)
}

#[derive(Debug, Default, Clone)]
struct RequestTrace {
    arrival: u64,
    output_len: u64,
    first_token: Option<u64>,
    completion: Option<u64>,
    rejected: bool,
    migrations: u32,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Computes the report from an event log. The same function backs both the
/// simulator's own report and offline recomputation from `events.csv`.
pub fn report_from_events(rows: &[EventRow]) -> Result<MetricsReport, MetricsError> {
    let mut policy = String::new();
    let mut seed = 0u64;
    let mut baseline = (0.0f64, 0.0f64);
    let mut slo_scales: Vec<f64> = Vec::new();
    let mut warmup_frac = 0.0f64;
    let mut oracle = String::new();
    let mut instance_stage: Vec<(u32, usize)> = Vec::new();
    let mut stage_count = 0usize;
    let mut requests: std::collections::BTreeMap<u64, RequestTrace> = Default::default();
    let mut instance_tokens: std::collections::BTreeMap<u32, u64> = Default::default();
    let mut window_token_events: Vec<(u64, u64)> = Vec::new(); // (ts, tokens)
    let mut migrate_done = 0u64;
    let mut t_end = 0u64;

    let bad = |msg: String| MetricsError::MalformedLog(msg);

    for row in rows {
        t_end = t_end.max(row.ts);
        match row.event.as_str() {
            EV_META => {
                for (k, v) in detail_pairs(&row.detail) {
                    match k {
                        "policy" => policy = v.to_string(),
                        "seed" => seed = v.parse().map_err(|_| bad(format!("seed '{v}'")))?,
                        "baseline_ttft" => {
                            baseline.0 = v.parse().map_err(|_| bad(format!("baseline_ttft '{v}'")))?
                        }
                        "baseline_tpot" => {
                            baseline.1 = v.parse().map_err(|_| bad(format!("baseline_tpot '{v}'")))?
                        }
                        "warmup_frac" => {
                            warmup_frac = v.parse().map_err(|_| bad(format!("warmup_frac '{v}'")))?
                        }
                        "slo_scales" => {
                            slo_scales = v
                                .split('|')
                                .map(|s| s.parse::<f64>())
                                .collect::<Result<_, _>>()
                                .map_err(|_| bad(format!("slo_scales '{v}'")))?;
                        }
                        "oracle" => oracle = v.to_string(),
                        _ => {}
                    }
                }
            }
            EV_STAGE_ASSIGN => {
                let inst = row.src.ok_or_else(|| bad("stage_assign without src".into()))?;
                let stage: usize = detail_get(&row.detail, "stage")
                    .ok_or_else(|| bad("stage_assign without stage".into()))?
                    .parse()
                    .map_err(|_| bad("stage_assign stage not a number".into()))?;
                stage_count = stage_count.max(stage + 1);
                instance_stage.push((inst, stage));
                instance_tokens.entry(inst).or_insert(0);
            }
            EV_ARRIVE => {
                let id = row.request_id.ok_or_else(|| bad("arrive without request".into()))?;
                let output: u64 = detail_get(&row.detail, "output")
                    .ok_or_else(|| bad("arrive without output".into()))?
                    .parse()
                    .map_err(|_| bad("arrive output not a number".into()))?;
                let entry = requests.entry(id).or_default();
                entry.arrival = row.ts;
                entry.output_len = output;
            }
            EV_REJECT => {
                let id = row.request_id.ok_or_else(|| bad("reject without request".into()))?;
                requests.entry(id).or_default().rejected = true;
            }
            EV_FIRST_TOKEN => {
                let id = row.request_id.ok_or_else(|| bad("first_token without request".into()))?;
                requests.entry(id).or_default().first_token = Some(row.ts);
            }
            EV_COMPLETE => {
                let id = row.request_id.ok_or_else(|| bad("complete without request".into()))?;
                requests.entry(id).or_default().completion = Some(row.ts);
            }
            EV_ITER => {
                let inst = row.src.ok_or_else(|| bad("iter without src".into()))?;
                let tokens: u64 = detail_get(&row.detail, "tok")
                    .ok_or_else(|| bad("iter without tok".into()))?
                    .parse()
                    .map_err(|_| bad("iter tok not a number".into()))?;
                if tokens > 0 {
                    *instance_tokens.entry(inst).or_insert(0) += tokens;
                    window_token_events.push((row.ts, tokens));
                }
            }
            EV_MIGRATE_DONE => {
                migrate_done += 1;
                if let Some(id) = row.request_id {
                    requests.entry(id).or_default().migrations += 1;
                }
            }
            _ => {}
        }
    }

    let mut ttfts = Vec::new();
    let mut tpots = Vec::new();
    let mut norms = Vec::new();
    let mut slo_pairs = Vec::new();
    let mut completed = 0u64;
    let mut rejected = 0u64;
    for trace in requests.values() {
        if trace.rejected {
            rejected += 1;
            continue;
        }
        let Some(completion) = trace.completion else { continue };
        completed += 1;
        let (ttft, tpot, norm) =
            per_request_metrics(trace.arrival, trace.first_token, completion, trace.output_len)?;
        ttfts.push(ttft);
        norms.push(norm);
        slo_pairs.push((ttft, tpot));
        if trace.output_len > 1 {
            tpots.push(tpot);
        }
    }
    let arrived = requests.len() as u64;

    let warmup_end = (t_end as f64 * warmup_frac).floor() as u64;
    let window_us = t_end.saturating_sub(warmup_end);
    let window_s = window_us as f64 / MICROS_PER_SEC;
    let window_tokens: u64 = window_token_events
        .iter()
        .filter(|(ts, _)| *ts > warmup_end)
        .map(|(_, tok)| tok)
        .sum();
    let throughput = if window_us == 0 { 0.0 } else { window_tokens as f64 / window_s };

    let mut per_stage: Vec<Vec<u64>> = vec![Vec::new(); stage_count];
    for (inst, stage) in &instance_stage {
        per_stage[*stage].push(instance_tokens.get(inst).copied().unwrap_or(0));
    }

    let sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v
    };
    let ttft_sorted = sorted(ttfts.clone());
    let tpot_sorted = sorted(tpots.clone());

    Ok(MetricsReport {
        policy,
        seed,
        counts: Counts {
            arrived,
            completed,
            rejected,
            migrated: migrate_done,
            in_flight: arrived - completed - rejected,
        },
        ttft_mean: mean(&ttfts),
        ttft_p95: percentile_nearest_rank(&ttft_sorted, 95.0),
        tpot_mean: mean(&tpots),
        tpot_p95: percentile_nearest_rank(&tpot_sorted, 95.0),
        normalized_latency_mean: mean(&norms),
        throughput,
        throughput_window_s: window_s,
        window_output_tokens: window_tokens,
        baseline_ttft: baseline.0,
        baseline_tpot: baseline.1,
        slo: slo_scales
            .iter()
            .map(|&scale| SloPoint { scale, attainment: slo_attainment(&slo_pairs, baseline, scale) })
            .collect(),
        per_stage_cv: stage_cv(&per_stage),
        oracle,
    })
}

/// Per-request rows (completed requests, ascending id) from an event log.
pub fn per_request_rows(rows: &[EventRow]) -> Result<Vec<PerRequestRow>, MetricsError> {
    let mut requests: std::collections::BTreeMap<u64, RequestTrace> = Default::default();
    for row in rows {
        let Some(id) = row.request_id else { continue };
        match row.event.as_str() {
            EV_ARRIVE => {
                let output: u64 = detail_get(&row.detail, "output")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| MetricsError::MalformedLog("arrive without output".into()))?;
                let entry = requests.entry(id).or_default();
                entry.arrival = row.ts;
                entry.output_len = output;
            }
            EV_FIRST_TOKEN => requests.entry(id).or_default().first_token = Some(row.ts),
            EV_COMPLETE => requests.entry(id).or_default().completion = Some(row.ts),
            EV_MIGRATE_DONE => requests.entry(id).or_default().migrations += 1,
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (id, trace) in requests {
        let Some(completion) = trace.completion else { continue };
        let (ttft, tpot, _) =
            per_request_metrics(trace.arrival, trace.first_token, completion, trace.output_len)?;
        out.push(PerRequestRow {
            id,
            arrival: trace.arrival as f64 / MICROS_PER_SEC,
            ttft,
            tpot_mean: tpot,
            migrations: trace.migrations,
        });
    }
    Ok(out)
}

pub fn write_events_csv<W: std::io::Write>(writer: W, rows: &[EventRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_csv<R: std::io::Read>(reader: R) -> Result<Vec<EventRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_per_request_csv<W: std::io::Write>(
    writer: W,
    rows: &[PerRequestRow],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn per_request_example() {
        // Arrival 0 s, first token 2 s, completion 5 s, 4 output tokens.
        let (ttft, tpot, norm) =
            per_request_metrics(0, Some(2_000_000), 5_000_000, 4).unwrap();
        assert_eq!(ttft, 2.0);
        assert_eq!(tpot, 1.0);
        assert_eq!(norm, 1.25);
    }

    #[test]
    fn single_token_request_has_zero_tpot() {
        let (ttft, tpot, norm) = per_request_metrics(0, Some(3_000_000), 3_000_000, 1).unwrap();
        assert_eq!(ttft, 3.0);
        assert_eq!(tpot, 0.0);
        assert_eq!(norm, 3.0);
    }

    #[test]
    fn missing_first_token_is_incomplete() {
        assert!(matches!(
            per_request_metrics(0, None, 10, 2),
            Err(MetricsError::IncompleteRequest)
        ));
    }

    #[test]
    fn slo_all_under_is_one() {
        let pr = [(0.5, 0.01), (1.0, 0.02)];
        assert_eq!(slo_attainment(&pr, (1.0, 0.02), 1.0), 1.0);
    }

    #[test]
    fn slo_huge_scale_reaches_one() {
        let pr = [(100.0, 5.0), (2.0, 0.1)];
        assert_eq!(slo_attainment(&pr, (0.001, 0.0001), 1e9), 1.0);
    }

    #[test]
    fn slo_requires_both_bounds() {
        // ttft fine, tpot over → not attained.
        let pr = [(0.5, 10.0)];
        assert_eq!(slo_attainment(&pr, (1.0, 1.0), 2.0), 0.0);
    }

    #[test]
    fn cv_uniform_counts_is_zero() {
        assert_eq!(stage_cv(&[vec![5, 5, 5]]), vec![0.0]);
    }

    #[test]
    fn cv_one_three_is_half() {
        // mean 2, population std 1 → 0.5.
        assert_eq!(stage_cv(&[vec![1, 3]]), vec![0.5]);
    }

    #[test]
    fn cv_zero_mean_is_zero() {
        assert_eq!(stage_cv(&[vec![0, 0]]), vec![0.0]);
    }

    #[test]
    fn percentile_nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile_nearest_rank(&v, 95.0), 95.0);
        assert_eq!(percentile_nearest_rank(&v, 100.0), 100.0);
        assert_eq!(percentile_nearest_rank(&[7.0], 95.0), 7.0);
        assert_eq!(percentile_nearest_rank(&[], 95.0), 0.0);
    }

    fn row(ts: u64, event: &str, src: Option<u32>, req: Option<u64>, detail: &str) -> EventRow {
        EventRow {
            ts,
            event: event.to_string(),
            src,
            dst: None,
            request_id: req,
            detail: detail.to_string(),
        }
    }

    fn tiny_log() -> Vec<EventRow> {
        vec![
            row(0, EV_META, None, None,
                "policy=l4;seed=9;baseline_ttft=0.5;baseline_tpot=0.01;warmup_frac=0;slo_scales=5|10;oracle=p:1|2|3"),
            row(0, EV_STAGE_ASSIGN, Some(0), None, "stage=0;lo=0;hi=1024"),
            row(0, EV_STAGE_ASSIGN, Some(1), None, "stage=0;lo=0;hi=1024"),
            row(0, EV_ARRIVE, None, Some(0), "input=10;output=4"),
            row(0, EV_ARRIVE, None, Some(1), "input=999999;output=4"),
            row(0, EV_REJECT, None, Some(1), "reason=no_covering_stage"),
            row(2_000_000, EV_FIRST_TOKEN, Some(0), Some(0), ""),
            row(2_000_000, EV_ITER, Some(0), None, "n=1;tok=1"),
            row(3_000_000, EV_ITER, Some(0), None, "n=1;tok=1"),
            row(4_000_000, EV_ITER, Some(0), None, "n=1;tok=1"),
            row(5_000_000, EV_ITER, Some(1), None, "n=1;tok=1"),
            row(5_000_000, EV_COMPLETE, Some(0), Some(0), ""),
        ]
    }

    #[test]
    fn report_from_tiny_log() {
        let report = report_from_events(&tiny_log()).unwrap();
        assert_eq!(report.policy, "l4");
        assert_eq!(report.seed, 9);
        assert_eq!(report.counts.arrived, 2);
        assert_eq!(report.counts.completed, 1);
        assert_eq!(report.counts.rejected, 1);
        assert_eq!(report.counts.in_flight, 0);
        assert_eq!(report.ttft_mean, 2.0);
        assert_eq!(report.tpot_mean, 1.0);
        assert_eq!(report.normalized_latency_mean, 1.25);
        // 4 tokens over the 5-second window (warmup_frac 0).
        assert_eq!(report.window_output_tokens, 4);
        assert_eq!(report.throughput, 4.0 / 5.0);
        assert_eq!(report.throughput * report.throughput_window_s, 4.0);
        // Instance 0 made 3 tokens, instance 1 made 1 → CV of [3, 1] = 0.5.
        assert_eq!(report.per_stage_cv, vec![0.5]);
        assert_eq!(report.slo.len(), 2);
        assert_eq!(report.slo[0].scale, 5.0);
        // ttft 2.0 ≤ 5×0.5 and tpot 1.0 > 5×0.01 → not attained at 5.
        assert_eq!(report.slo[0].attainment, 0.0);
        assert_eq!(report.oracle, "p:1|2|3");
    }

    #[test]
    fn report_is_pure_function_of_csv() {
        let rows = tiny_log();
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &rows).unwrap();
        let back = read_events_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        let a = report_from_events(&rows).unwrap().to_json();
        let b = report_from_events(&back).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn per_request_rows_cover_completed_only() {
        let rows = per_request_rows(&tiny_log()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].id, 0);
        assert_eq!(rows[0].ttft, 2.0);
        assert_eq!(rows[0].migrations, 0);
    }

    #[test]
    fn empty_log_reports_zeros() {
        let report = report_from_events(&[]).unwrap();
        assert_eq!(report.counts.arrived, 0);
        assert_eq!(report.throughput, 0.0);
        assert_eq!(report.ttft_mean, 0.0);
    }

    proptest! {
        #[test]
        fn slo_attainment_monotone_in_scale(
            pr in proptest::collection::vec((0.0f64..10.0, 0.0f64..1.0), 1..50),
            baseline in (0.001f64..1.0, 0.0001f64..0.1),
        ) {
            let scales = [1.0, 2.0, 5.0, 10.0, 20.0];
            let values: Vec<f64> =
                scales.iter().map(|&s| slo_attainment(&pr, baseline, s)).collect();
            for w in values.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn p95_at_least_median(
            mut values in proptest::collection::vec(0.0f64..1000.0, 1..200),
        ) {
            values.sort_by(f64::total_cmp);
            let p95 = percentile_nearest_rank(&values, 95.0);
            let median = percentile_nearest_rank(&values, 50.0);
            prop_assert!(p95 >= median);
        }
    }
}
