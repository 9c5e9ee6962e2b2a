//! Hardware timing oracle: iteration costs for prefill and batched decode,
//! including the penalty attention kernels pay when one batch mixes very
//! different sequence lengths.

use crate::config::OracleConfig;

/// Timing model shared by every instance in a run (and across compared
/// policies, so timing differences come from scheduling alone).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardwareOracle {
    /// Prefill seconds = a0 + a1·I + a2·I².
    pub prefill: [f64; 3],
    /// Decode-step base seconds = b0 + b1·n + b2·ΣL.
    pub decode: [f64; 3],
    /// Heterogeneity slope: how fast imbalance inflates a decode step.
    pub gamma: f64,
    /// Ceiling on the heterogeneity penalty factor.
    pub penalty_cap: f64,
}

impl HardwareOracle {
    pub fn from_config(cfg: &OracleConfig) -> Self {
        Self {
            prefill: cfg.prefill,
            decode: cfg.decode,
            gamma: cfg.gamma,
            penalty_cap: cfg.penalty_cap,
        }
    }

    /// Seconds to prefill one request of `input_len` prompt tokens.
    pub fn prefill_time(&self, input_len: u64) -> f64 {
        assert!(input_len >= 1);
        let i = input_len as f64;
        self.prefill[0] + self.prefill[1] * i + self.prefill[2] * i * i
    }

    /// Penalty factor h = min(cap, 1 + gamma·(max L / mean L − 1)); exactly
    /// 1 for homogeneous batches, always within [1, cap].
    pub fn heterogeneity_penalty(&self, lengths: &[u64]) -> f64 {
        assert!(!lengths.is_empty());
        let max = *lengths.iter().max().unwrap() as f64;
        let mean = lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64;
        if max == mean {
            return 1.0;
        }
        (1.0 + self.gamma * (max / mean - 1.0)).min(self.penalty_cap)
    }

    /// Seconds for one decode iteration over a batch with the given current
    /// sequence lengths.
    pub fn decode_step_time(&self, lengths: &[u64]) -> f64 {
        assert!(!lengths.is_empty());
        let n = lengths.len() as f64;
        let sum_l = lengths.iter().map(|&l| l as f64).sum::<f64>();
        let base = self.decode[0] + self.decode[1] * n + self.decode[2] * sum_l;
        base * self.heterogeneity_penalty(lengths)
    }

    /// Compact settings string embedded in run metadata so reports can be
    /// checked for identical timing across compared policies. Uses no ';'
    /// or '=' (reserved by the event detail encoding).
    pub fn fingerprint(&self) -> String {
        format!(
            "prefill:{}|{}|{},decode:{}|{}|{},gamma:{},cap:{}",
            self.prefill[0],
            self.prefill[1],
            self.prefill[2],
            self.decode[0],
            self.decode[1],
            self.decode[2],
            self.gamma,
            self.penalty_cap
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(gamma: f64) -> HardwareOracle {
        HardwareOracle {
            prefill: [5e-3, 2e-5, 1e-10],
            decode: [4e-3, 2e-5, 1e-8],
            gamma,
            penalty_cap: 2.1,
        }
    }

    #[test]
    fn homogeneous_batch_has_unit_penalty() {
        assert_eq!(oracle(5.0).heterogeneity_penalty(&[1234, 1234, 1234]), 1.0);
    }

    #[test]
    fn extreme_mix_caps_at_ceiling() {
        // max/mean ≈ 1.96 with gamma 2.0 → uncapped 2.92 → capped.
        assert_eq!(oracle(2.0).heterogeneity_penalty(&[1000, 50_000]), 2.1);
    }

    #[test]
    fn quadratic_prefill_coefficients_only() {
        let o = HardwareOracle { prefill: [0.0, 0.0, 1.0], decode: [0.0; 3], gamma: 0.0, penalty_cap: 2.1 };
        assert_eq!(o.prefill_time(100), 10_000.0);
    }

    #[test]
    fn prefill_quadratic_dominance_identity() {
        let o = oracle(0.0);
        for i in [64u64, 512, 4096, 65_536] {
            let lhs = o.prefill_time(2 * i) - 4.0 * o.prefill_time(i);
            let rhs = o.prefill[0] * (1.0 - 4.0) + o.prefill[1] * (2.0 * i as f64 - 4.0 * i as f64);
            assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0), "I={i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn doubling_lengths_doubles_sum_component() {
        let o = oracle(0.0); // h pinned at 1
        let lengths = [100u64, 300, 700];
        let doubled: Vec<u64> = lengths.iter().map(|l| l * 2).collect();
        let base_part = |t: f64| t - o.decode[0] - o.decode[1] * lengths.len() as f64;
        let a = base_part(o.decode_step_time(&lengths));
        let b = base_part(o.decode_step_time(&doubled));
        assert!((b - 2.0 * a).abs() < 1e-12, "ΣL component must double: {a} vs {b}");
    }

    proptest! {
        #[test]
        fn penalty_always_within_unit_and_cap(
            lengths in proptest::collection::vec(1u64..100_000, 1..64),
            gamma in 0.0f64..5.0,
        ) {
            let h = oracle(gamma).heterogeneity_penalty(&lengths);
            prop_assert!((1.0..=2.1).contains(&h));
        }

        #[test]
        fn homogeneous_batch_is_fastest_for_fixed_n_and_total(
            per_len in 1u64..10_000,
            n in 2usize..32,
            spread in 1u64..5_000,
        ) {
            // Fixed (n, ΣL): move `spread` tokens from the first request to
            // the last. Base term unchanged; only h can move, and h ≥ 1.
            let o = oracle(0.7);
            let total = per_len * n as u64;
            let homogeneous = vec![per_len; n];
            prop_assume!(per_len > spread);
            let mut skewed = homogeneous.clone();
            skewed[0] -= spread;
            skewed[n - 1] += spread;
            prop_assert_eq!(skewed.iter().sum::<u64>(), total);
            prop_assert!(
                o.decode_step_time(&homogeneous) <= o.decode_step_time(&skewed) + 1e-15
            );
        }
    }
}
