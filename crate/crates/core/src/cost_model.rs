//! Per-request quality model: batch feature extraction, the linear
//! quality/latency model, least-squares fitting, and validation.
//!
//! A batch of requests is summarized by five features `(1, n, ΣI, ΣI², ΣL)`
//! where `I` is a request's input length and `L` its current total length.
//! The model predicts a request's normalized latency (seconds per output
//! token) as the dot product of those features with five fitted
//! coefficients; the batch-level quality is `n` times the per-request value.
//! Two auxiliary three-coefficient models with the same fitting machinery
//! cover prefill time and decode-step time for the simulator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Condition-number threshold above which the normal-equation solve is
/// abandoned in favor of a column-pivoted QR factorization.
const CONDITION_LIMIT: f64 = 1e8;

/// Minimum number of samples required to fit the five-coefficient model.
pub const MIN_FIT_SAMPLES: usize = 5;

/// Shape of one request: input length and current total sequence length,
/// both in tokens. `seq_len` includes generated tokens, so it never falls
/// below `input_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestShape {
    pub input_len: u64,
    pub seq_len: u64,
}

impl RequestShape {
    pub fn new(input_len: u64, seq_len: u64) -> Self {
        debug_assert!(input_len >= 1 && seq_len >= input_len);
        Self { input_len, seq_len }
    }
}

/// The five batch features `(f0, f1, f2, f3, f4) = (1, n, ΣI, ΣI², ΣL)`.
///
/// Token sums are accumulated in 128-bit integers before conversion to
/// floating point: `ΣI²` overflows 32-bit (and for large batches even
/// 64-bit) arithmetic at 128K-token inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchFeatures {
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
}

impl BatchFeatures {
    pub fn as_array(&self) -> [f64; 5] {
        [self.f0, self.f1, self.f2, self.f3, self.f4]
    }

    pub fn from_array(f: [f64; 5]) -> Self {
        Self { f0: f[0], f1: f[1], f2: f[2], f3: f[3], f4: f[4] }
    }
}

/// Fitted model coefficients `D_0..D_4`, in seconds per feature unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeParams {
    pub d: [f64; 5],
}

impl QoeParams {
    pub fn new(d: [f64; 5]) -> Self {
        Self { d }
    }
}

///// One profiling observation: lifetime-averaged batch features for a request
/// and its measured normalized latency (end-to-end latency / output length).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilingSample {
    pub features: BatchFeatures,
    pub normalized_latency: f64,
}

/// Fitting failures.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FitError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("feature matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
}

/// Computes `(1, n, ΣI, ΣI², ΣL)` over the batch. Empty batches yield
/// `(1, 0, 0, 0, 0)`; `f0` is always 1.
pub fn batch_features(shapes: &[RequestShape]) -> BatchFeatures {
    let mut sum_i: u128 = 0;
    let mut sum_i2: u128 = 0;
    let mut sum_l: u128 = 0;
    for s in shapes {
        let i = s.input_len as u128;
        sum_i += i;
        sum_i2 += i * i;
        sum_l += s.seq_len as u128;
    }
    BatchFeatures {
        f0: 1.0,
        f1: shapes.len() as f64,
        f2: sum_i as f64,
        f3: sum_i2 as f64,
        f4: sum_l as f64,
    }
}

/// Predicted per-request quality `Σ_k D_k·F_k`; every request in a batch
/// shares the same value.
pub fn request_qoe(features: &BatchFeatures, params: &QoeParams) -> f64 {
    let f = features.as_array();
    params.d.iter().zip(f).map(|(d, x)| d * x).sum()
}

/// Batch quality `n · request_qoe(features)`; 0 for an empty batch.
pub fn batch_qoe(shapes: &[RequestShape], params: &QoeParams) -> f64 {
    shapes.len() as f64 * request_qoe(&batch_features(shapes), params)
}

/// Batch quality from a precomputed feature vector (`f1` doubles as `n`).
pub fn batch_qoe_from_features(features: &BatchFeatures, params: &QoeParams) -> f64 {
    features.f1 * request_qoe(features, params)
}

/// Fits the five coefficients by ordinary least squares.
///
/// Solves the normal equations when they are well conditioned and falls back
/// to a column-pivoted QR factorization of the design matrix when the
/// condition estimate exceeds `1e8` or the Cholesky factorization fails.
pub fn fit_params(samples: &[ProfilingSample]) -> Result<QoeParams, FitError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(FitError::TooFewSamples { got: samples.len(), min: MIN_FIT_SAMPLES });
    }
    let rows: Vec<[f64; 5]> = samples.iter().map(|s| s.features.as_array()).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.normalized_latency).collect();
    let d = least_squares(&rows, &targets)?;
    Ok(QoeParams::new([d[0], d[1], d[2], d[3], d[4]]))
}

/// Relative prediction errors of `params` against held-out samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionError {
    /// `(predicted − actual) / actual` per sample, in input order.
    pub relative: Vec<f64>,
    /// Mean of `|relative|`.
    pub mean_abs: f64,
}

/// Evaluates `(predicted − actual)/actual` per validation sample plus the
/// mean absolute relative error. Validation latencies must be positive.
pub fn prediction_error(params: &QoeParams, validation: &[ProfilingSample]) -> PredictionError {
    let relative: Vec<f64> = validation
        .iter()
        .map(|s| {
            let predicted = request_qoe(&s.features, params);
            (predicted - s.normalized_latency) / s.normalized_latency
        })
        .collect();
    let mean_abs = if relative.is_empty() {
        0.0
    } else {
        relative.iter().map(|e| e.abs()).sum::<f64>() / relative.len() as f64
    };
    PredictionError { relative, mean_abs }
}

// ---------------------------------------------------------------------------
// Auxiliary simulator models
// ---------------------------------------------------------------------------

/// Prefill-time model `t = a0 + a1·I + a2·I²`, fit from (input_len, seconds)
/// observations. Feeds the simulator's hardware oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillModel {
    pub a: [f64; 3],
}

/// Decode-step model `t = b0 + b1·n + b2·ΣL`, fit from (batch size, total
/// cached tokens, seconds) observations. Feeds the simulator's hardware
/// oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeModel {
    pub b: [f64; 3],
}

/// Fits the prefill model from `(input_len, measured_seconds)` pairs.
pub fn fit_prefill_model(samples: &[(u64, f64)]) -> Result<PrefillModel, FitError> {
    if samples.len() < 3 {
        return Err(FitError::TooFewSamples { got: samples.len(), min: 3 });
    }
    let rows: Vec<[f64; 3]> = samples
        .iter()
        .map(|&(i, _)| {
            let i2 = (i as u128) * (i as u128);
            [1.0, i as f64, i2 as f64]
        })
        .collect();
    let targets: Vec<f64> = samples.iter().map(|&(_, t)| t).collect();
    let c = least_squares(&rows, &targets)?;
    Ok(PrefillModel { a: [c[0], c[1], c[2]] })
}

/// Fits the decode model from `(batch_size, total_cached_tokens,
/// measured_seconds)` triples.
pub fn fit_decode_model(samples: &[(u64, u64, f64)]) -> Result<DecodeModel, FitError> {
    if samples.len() < 3 {
        return Err(FitError::TooFewSamples { got: samples.len(), min: 3 });
    }
    let rows: Vec<[f64; 3]> =
        samples.iter().map(|&(n, l, _)| [1.0, n as f64, l as f64]).collect();
    let targets: Vec<f64> = samples.iter().map(|&(_, _, t)| t).collect();
    let c = least_squares(&rows, &targets)?;
    Ok(DecodeModel { b: [c[0], c[1], c[2]] })
}

/// OLS core shared by the quality model and the auxiliary models: normal
/// equations guarded by a condition estimate, column-pivoted QR as fallback,
/// rank-deficiency detection on the QR path.
fn least_squares<const K: usize>(rows: &[[f64; K]], targets: &[f64]) -> Result<Vec<f64>, FitError> {
    let n = rows.len();
    let x = DMatrix::from_fn(n, K, |r, c| rows[r][c]);
    let y = DVector::from_column_slice(targets);

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;

    let eigenvalues = xtx.clone().symmetric_eigenvalues();
    let max_ev = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_ev = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let well_conditioned = min_ev > 0.0 && max_ev / min_ev <= CONDITION_LIMIT;

    if well_conditioned {
        if let Some(chol) = xtx.cholesky() {
            let d = chol.solve(&xty);
            return Ok(d.iter().cloned().collect());
        }
    }

    // Pivoted orthogonal factorization: robust to poor conditioning and the
    // place where rank deficiency is diagnosed. X·P = Q·R with thin Q, so the
    // minimizer is P·R⁻¹·Qᵀy (back substitution on the square R).
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let r_diag: Vec<f64> = (0..K).map(|k| r[(k, k)].abs()).collect();
    let r_max = r_diag.iter().cloned().fold(0.0, f64::max);
    let tol = r_max * (n.max(K) as f64) * f64::EPSILON;
    let rank = r_diag.iter().filter(|&&d| d > tol).count();
    if rank < K {
        return Err(FitError::RankDeficient { rank, cols: K });
    }
    let mut d = qr.q().transpose() * &y;
    if !r.solve_upper_triangular_mut(&mut d) {
        return Err(FitError::RankDeficient { rank, cols: K });
    }
    qr.p().inv_permute_rows(&mut d);
    Ok(d.iter().cloned().collect())
}

// ---------------------------------------------------------------------------
// External interfaces: profiling CSV and params JSON
// ---------------------------------------------------------------------------

/// I/O failures for the CSV/JSON interfaces.
#[derive(Debug, thiserror::Error)]
pub enum SampleIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sample CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("sample CSV header must be q,f1,f2,f3,f4")]
    BadHeader,
    #[error("params JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    q: f64,
    f1: f64,
    f2: f64,
    f3: f64,
    f4: f64,
}

/// Reads profiling samples from CSV with header `q,f1,f2,f3,f4` (`f0` is
/// implicitly 1).
pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<Vec<ProfilingSample>, SampleIoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    {
        let headers = rdr.headers()?;
        if headers != vec!["q", "f1", "f2", "f3", "f4"] {
            return Err(SampleIoError::BadHeader);
        }
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<SampleRow>() {
        let row = row?;
        out.push(ProfilingSample {
            features: BatchFeatures::from_array([1.0, row.f1, row.f2, row.f3, row.f4]),
            normalized_latency: row.q,
        });
    }
    Ok(out)
}

/// Writes profiling samples as CSV with header `q,f1,f2,f3,f4`.
pub fn write_samples_csv<W: std::io::Write>(
    writer: W,
    samples: &[ProfilingSample],
) -> Result<(), SampleIoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in samples {
        wtr.serialize(SampleRow {
            q: s.normalized_latency,
            f1: s.features.f1,
            f2: s.features.f2,
            f3: s.features.f3,
            f4: s.features.f4,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Serializes fitted params as `{"d":[...5 floats...]}`.
pub fn params_to_json(params: &QoeParams) -> String {
    serde_json::to_string(params).expect("QoeParams serializes infallibly")
}

/// Parses params from `{"d":[...5 floats...]}`.
pub fn params_from_json(text: &str) -> Result<QoeParams, SampleIoError> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(i: u64, l: u64) -> RequestShape {
        RequestShape::new(i, l)
    }

    #[test]
    fn features_of_empty_batch() {
        let f = batch_features(&[]);
        assert_eq!(f.as_array(), [1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn features_of_single_request() {
        let f = batch_features(&[shape(2, 3)]);
        assert_eq!(f.as_array(), [1.0, 1.0, 2.0, 4.0, 3.0]);
    }

    #[test]
    fn features_sum_elementwise() {
        let f = batch_features(&[shape(2, 3), shape(5, 7)]);
        assert_eq!(f.as_array(), [1.0, 2.0, 7.0, 29.0, 10.0]);
    }

    #[test]
    fn features_use_wide_accumulators() {
        // Two maximal-context inputs: ΣI² = 2·131072² needs more than 32 bits.
        let f = batch_features(&[shape(131072, 131072), shape(131072, 131072)]);
        assert_eq!(f.f3, 34359738368.0);
    }

    #[test]
    fn request_qoe_is_a_dot_product() {
        let f = BatchFeatures::from_array([1.0, 1.0, 2.0, 4.0, 3.0]);
        assert_eq!(request_qoe(&f, &QoeParams::new([1.0; 5])), 11.0);
    }

    #[test]
    fn request_qoe_empty_batch_yields_constant_term() {
        let f = batch_features(&[]);
        let q = request_qoe(&f, &QoeParams::new([0.25, 9.0, 9.0, 9.0, 9.0]));
        assert_eq!(q, 0.25);
    }

    #[test]
    fn batch_qoe_scales_by_batch_size() {
        let params = QoeParams::new([1.0; 5]);
        assert_eq!(batch_qoe(&[], &params), 0.0);
        assert_eq!(batch_qoe(&[shape(2, 3)], &params), 11.0);
        // Two identical (2,3) requests: features (1,2,4,8,6), per-request 21.
        assert_eq!(batch_qoe(&[shape(2, 3), shape(2, 3)], &params), 42.0);
    }

    /// Deterministic synthetic generator: builds feature rows with enough
    /// spread for a full-rank design matrix and labels them with known
    /// coefficients.
    fn synthetic_samples(d: &[f64; 5], count: usize, noise: impl Fn(usize) -> f64) -> Vec<ProfilingSample> {
        let params = QoeParams::new(*d);
        (0..count)
            .map(|j| {
                let n = 1 + (j % 7) as u64;
                let base = 10 + 13 * (j as u64 % 11);
                let shapes: Vec<RequestShape> = (0..n)
                    .map(|r| {
                        let i = base + 3 * r + (j as u64 % 5);
                        shape(i, i + 2 + (r % 3))
                    })
                    .collect();
                let features = batch_features(&shapes);
                ProfilingSample {
                    features,
                    normalized_latency: request_qoe(&features, &params) + noise(j),
                }
            })
            .collect()
    }

    #[test]
    fn fit_recovers_noiseless_generator() {
        let truth = [0.004, 3e-5, 2e-6, 4e-11, 8e-7];
        let samples = synthetic_samples(&truth, 60, |_| 0.0);
        let fitted = fit_params(&samples).unwrap();
        for (k, (&got, &want)) in fitted.d.iter().zip(&truth).enumerate() {
            let rel = (got - want).abs() / want.abs();
            assert!(rel < 1e-6, "coefficient {k}: {got} vs {want}");
        }
        // Regenerated predictions agree with the generator's ground truth.
        for s in &samples {
            let q = request_qoe(&s.features, &fitted);
            assert!((q - s.normalized_latency).abs() <= 1e-9 * s.normalized_latency.abs());
        }
    }

    #[test]
    fn fit_finds_pure_constant_model() {
        // Varying features, constant target: the exact OLS solution is
        // (c, 0, 0, 0, 0) because the generator uses exactly that model.
        let truth = [0.125, 0.0, 0.0, 0.0, 0.0];
        let samples = synthetic_samples(&truth, 40, |_| 0.0);
        let fitted = fit_params(&samples).unwrap();
        assert!((fitted.d[0] - 0.125).abs() < 1e-9);
        for k in 1..5 {
            assert!(fitted.d[k].abs() < 1e-9, "d[{k}] = {}", fitted.d[k]);
        }
    }

    #[test]
    fn fit_rejects_too_few_samples() {
        let samples = synthetic_samples(&[1.0, 0.0, 0.0, 0.0, 0.0], 3, |_| 0.0);
        assert_eq!(
            fit_params(&samples),
            Err(FitError::TooFewSamples { got: 3, min: MIN_FIT_SAMPLES })
        );
    }

    #[test]
    fn fit_rejects_rank_deficient_features() {
        // Batches of identical single requests with seq_len == input_len + 1:
        // f1 is constant 1·n with n=1, f2 = I, f4 = I + 1, so f4 = f0 + f2
        // exactly — a linear dependence across columns.
        let samples: Vec<ProfilingSample> = (0..10)
            .map(|j| {
                let i = 10 + j as u64;
                let features = batch_features(&[shape(i, i + 1)]);
                ProfilingSample { features, normalized_latency: 1.0 + j as f64 }
            })
            .collect();
        match fit_params(&samples) {
            Err(FitError::RankDeficient { rank, cols }) => {
                assert!(rank < cols);
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_features() {
        let truth = [0.002, 1e-4, 3e-6, 2e-10, 5e-7];
        let samples = synthetic_samples(&truth, 80, |j| 1e-4 * ((j as f64 * 0.7).sin()));
        let fitted = fit_params(&samples).unwrap();
        let mut dots = [0.0f64; 5];
        let mut res_norm = 0.0f64;
        let mut col_norms = [0.0f64; 5];
        for s in &samples {
            let r = request_qoe(&s.features, &fitted) - s.normalized_latency;
            res_norm += r * r;
            let f = s.features.as_array();
            for k in 0..5 {
                dots[k] += r * f[k];
                col_norms[k] += f[k] * f[k];
            }
        }
        let res_norm = res_norm.sqrt();
        for k in 0..5 {
            let bound = 1e-6 * res_norm.max(1e-12) * col_norms[k].sqrt().max(1e-12);
            assert!(dots[k].abs() < bound.max(1e-9), "column {k}: dot {}", dots[k]);
        }
    }

    #[test]
    fn prediction_error_examples() {
        let params = QoeParams::new([0.0, 1.0, 0.0, 0.0, 0.0]);
        let exact = ProfilingSample {
            features: BatchFeatures::from_array([1.0, 3.0, 0.0, 0.0, 0.0]),
            normalized_latency: 3.0,
        };
        let doubled = ProfilingSample {
            features: BatchFeatures::from_array([1.0, 3.0, 0.0, 0.0, 0.0]),
            normalized_latency: 6.0,
        };
        let err = prediction_error(&params, &[exact, doubled]);
        assert_eq!(err.relative[0], 0.0);
        assert_eq!(err.relative[1], -0.5);
        assert_eq!(err.mean_abs, 0.25);
    }

    #[test]
    fn fit_beats_constant_mean_on_noisy_validation() {
        let truth = [0.003, 8e-5, 1e-6, 1e-10, 6e-7];
        let all = synthetic_samples(&truth, 200, |j| 2e-4 * ((j as f64 * 1.3).sin()));
        let (train, valid) = all.split_at(160);
        let fitted = fit_params(train).unwrap();
        let model_err = prediction_error(&fitted, valid).mean_abs;

        let mean_q: f64 =
            train.iter().map(|s| s.normalized_latency).sum::<f64>() / train.len() as f64;
        let constant = QoeParams::new([mean_q, 0.0, 0.0, 0.0, 0.0]);
        let constant_err = prediction_error(&constant, valid).mean_abs;
        assert!(
            model_err < constant_err,
            "model {model_err} should beat constant-mean {constant_err}"
        );
    }

    #[test]
    fn prefill_model_recovers_coefficients() {
        let truth = [0.005, 2e-5, 1e-10];
        let samples: Vec<(u64, f64)> = (1..40)
            .map(|k| {
                let i = 16 * k as u64;
                (i, truth[0] + truth[1] * i as f64 + truth[2] * (i * i) as f64)
            })
            .collect();
        let m = fit_prefill_model(&samples).unwrap();
        for (&got, &want) in m.a.iter().zip(&truth) {
            assert!((got - want).abs() / want < 1e-6);
        }
    }

    #[test]
    fn decode_model_recovers_coefficients() {
        let truth = [0.004, 2e-5, 1e-8];
        let mut samples = Vec::new();
        for n in 1..12u64 {
            for l in [100u64, 5_000, 40_000] {
                samples.push((n, l, truth[0] + truth[1] * n as f64 + truth[2] * l as f64));
            }
        }
        let m = fit_decode_model(&samples).unwrap();
        for (&got, &want) in m.b.iter().zip(&truth) {
            assert!((got - want).abs() / want < 1e-6);
        }
    }

    #[test]
    fn samples_csv_round_trips() {
        let samples = synthetic_samples(&[0.01, 1e-5, 2e-6, 3e-11, 4e-7], 12, |_| 0.0);
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("q,f1,f2,f3,f4\n"), "header line: {text}");
        let back = read_samples_csv(buf.as_slice()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn samples_csv_rejects_wrong_header() {
        let err = read_samples_csv("a,b,c,d,e\n1,2,3,4,5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SampleIoError::BadHeader));
    }

    #[test]
    fn params_json_round_trips() {
        let p = QoeParams::new([0.1, 0.2, 0.3, 0.4, 0.5]);
        let text = params_to_json(&p);
        assert_eq!(text, r#"{"d":[0.1,0.2,0.3,0.4,0.5]}"#);
        assert_eq!(params_from_json(&text).unwrap(), p);
    }

    proptest! {
        #[test]
        fn batch_features_is_permutation_invariant(
            mut shapes in proptest::collection::vec((1u64..5000, 0u64..5000), 0..40)
        ) {
            let shapes: Vec<RequestShape> =
                shapes.drain(..).map(|(i, extra)| shape(i, i + extra)).collect();
            let mut reversed = shapes.clone();
            reversed.reverse();
            prop_assert_eq!(batch_features(&shapes), batch_features(&reversed));
        }

        #[test]
        fn batch_features_adds_over_disjoint_unions(
            a in proptest::collection::vec((1u64..5000, 0u64..5000), 0..20),
            b in proptest::collection::vec((1u64..5000, 0u64..5000), 0..20),
        ) {
            let a: Vec<RequestShape> = a.iter().map(|&(i, e)| shape(i, i + e)).collect();
            let b: Vec<RequestShape> = b.iter().map(|&(i, e)| shape(i, i + e)).collect();
            let mut union = a.clone();
            union.extend_from_slice(&b);
            let (fa, fb, fu) = (batch_features(&a), batch_features(&b), batch_features(&union));
            prop_assert_eq!(fu.f0, 1.0);
            prop_assert_eq!(fu.f1, fa.f1 + fb.f1);
            prop_assert_eq!(fu.f2, fa.f2 + fb.f2);
            prop_assert_eq!(fu.f3, fa.f3 + fb.f3);
            prop_assert_eq!(fu.f4, fa.f4 + fb.f4);
        }

        #[test]
        fn batch_qoe_matches_definition(
            shapes in proptest::collection::vec((1u64..3000, 0u64..3000), 0..30),
            d in proptest::array::uniform5(-1.0f64..1.0),
        ) {
            let shapes: Vec<RequestShape> = shapes.iter().map(|&(i, e)| shape(i, i + e)).collect();
            let params = QoeParams::new(d);
            let expected = shapes.len() as f64 * request_qoe(&batch_features(&shapes), &params);
            prop_assert_eq!(batch_qoe(&shapes, &params), expected);
        }
    }
}
