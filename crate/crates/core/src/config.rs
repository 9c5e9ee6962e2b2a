//! Run configuration: every tunable for the cluster, hardware oracle,
//! quality model, boundary refinement, load balancing, and the simulator
//! itself. Configs load from TOML or JSON, reject unknown keys, carry full
//! defaults, and serialize back out so each run can record the exact
//! settings it resolved to.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::planner::Stage;

/// Configuration loading / validation failures.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Scheduling policy selecting the layout / dispatch / balance / refine
/// behavior of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    L4,
    RoundRobin,
    NoPipeline,
    Chain,
    MemoryBalanced,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::L4,
        Policy::RoundRobin,
        Policy::NoPipeline,
        Policy::Chain,
        Policy::MemoryBalanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::L4 => "l4",
            Policy::RoundRobin => "round-robin",
            Policy::NoPipeline => "no-pipeline",
            Policy::Chain => "chain",
            Policy::MemoryBalanced => "memory-balanced",
        }
    }

    /// Default knob assignment for each named policy.
    pub fn knobs(self) -> PolicyKnobs {
        match self {
            Policy::L4 => PolicyKnobs {
                layout: Layout::Planned,
                dispatch: DispatchMode::BidAsk,
                balance: BalanceMode::Full,
                refine: RefineMode::Qoe,
            },
            Policy::RoundRobin => PolicyKnobs {
                layout: Layout::Single,
                dispatch: DispatchMode::RoundRobin,
                balance: BalanceMode::Off,
                refine: RefineMode::Off,
            },
            Policy::NoPipeline => PolicyKnobs {
                layout: Layout::Single,
                dispatch: DispatchMode::BidAsk,
                balance: BalanceMode::Full,
                refine: RefineMode::Off,
            },
            Policy::Chain => PolicyKnobs {
                layout: Layout::Chain,
                dispatch: DispatchMode::BidAsk,
                balance: BalanceMode::Full,
                refine: RefineMode::Off,
            },
            Policy::MemoryBalanced => PolicyKnobs {
                layout: Layout::Planned,
                dispatch: DispatchMode::BidAsk,
                balance: BalanceMode::Full,
                refine: RefineMode::Memory,
            },
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy '{s}' (expected one of l4, round-robin, no-pipeline, chain, memory-balanced)"))
    }
}

/// How the stage partition is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Full planner (chain + merge, exact DP on small fleets).
    Planned,
    /// Chain planner only (one instance per stage before surplus placement).
    Chain,
    /// One stage holding every instance.
    Single,
}

/// How arriving requests pick an instance within their stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchMode {
    /// Load-aware ask/bid round among the stage's instances.
    BidAsk,
    /// Per-stage round-robin cursor.
    RoundRobin,
}

/// Which migration classes run load-aware placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceMode {
    /// Intra-stage overload offloading plus bid-ask inter-stage handover.
    Full,
    /// Bid-ask handover only; no intra-stage offloading.
    InterOnly,
    /// No offloading; handover placement falls back to round-robin.
    Off,
}

/// Runtime boundary refinement flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    /// Quality-model-optimal split search.
    Qoe,
    /// Memory-equalizing split.
    Memory,
    Off,
}

/// Resolved behavior knobs for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyKnobs {
    pub layout: Layout,
    pub dispatch: DispatchMode,
    pub balance: BalanceMode,
    pub refine: RefineMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Fleet size.
    pub instances: u32,
    /// KV capacity per instance, tokens.
    pub kv_capacity: u64,
    /// Decode batch size cap per instance.
    pub max_batch: usize,
    /// KV bytes per cached token (sets migration volumes).
    pub kv_bytes_per_token: f64,
    /// Inter-instance transfer bandwidth, bytes/second.
    pub bandwidth: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            instances: 4,
            kv_capacity: 262_144,
            max_batch: 1024,
            kv_bytes_per_token: 131_072.0,
            bandwidth: 1.6e10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Prefill seconds = a0 + a1·I + a2·I².
    pub prefill: [f64; 3],
    /// Decode-step base seconds = b0 + b1·n + b2·ΣL.
    pub decode: [f64; 3],
    /// Heterogeneity penalty slope.
    pub gamma: f64,
    /// Penalty ceiling.
    pub penalty_cap: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            prefill: [5e-3, 2e-5, 1e-10],
            decode: [4e-3, 2e-5, 1e-8],
            gamma: 0.15,
            penalty_cap: 2.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QoeConfig {
    /// Quality coefficients used by the planner and refiner.
    pub d: [f64; 5],
}

impl Default for QoeConfig {
    fn default() -> Self {
        Self { d: [0.01, 1e-3, 1e-7, 1e-12, 1e-7] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub ema_alpha: f64,
    pub interval_s: f64,
    pub min_traffic: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { ema_alpha: 0.3, interval_s: 2.0, min_traffic: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub overload_factor: f64,
    pub starvation_threshold: u32,
    pub max_concurrent: u32,
    pub rounds: u32,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { overload_factor: 1.25, starvation_threshold: 3, max_concurrent: 3, rounds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub policy: Policy,
    pub seed: u64,
    /// Idle-instance heartbeat, milliseconds of simulated time.
    pub heartbeat_ms: f64,
    /// Bid collection window, milliseconds of simulated time.
    pub bid_window_ms: f64,
    /// Minimum spacing between an instance's load reports, seconds.
    pub report_interval_s: f64,
    /// Fraction of the run treated as warmup and excluded from throughput.
    pub warmup_frac: f64,
    /// SLO scale factors evaluated in the report.
    pub slo_scales: Vec<f64>,
    /// Optional hard horizon (simulated seconds); unfinished work then
    /// counts as in-flight.
    pub horizon_s: Option<f64>,
    /// Explicit stage partition; overrides the policy's layout when set.
    pub fixed_stages: Option<Vec<Stage>>,
    /// Individual knob overrides (each defaults to the policy's choice).
    pub dispatch: Option<DispatchMode>,
    pub balance_mode: Option<BalanceMode>,
    pub refine_mode: Option<RefineMode>,
    /// Fleet-size bound below which the planner also runs its exact DP.
    pub exact_threshold: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: Policy::L4,
            seed: 0,
            heartbeat_ms: 1.0,
            bid_window_ms: 1.0,
            report_interval_s: 0.1,
            warmup_frac: 0.1,
            slo_scales: vec![5.0, 10.0, 20.0],
            horizon_s: None,
            fixed_stages: None,
            dispatch: None,
            balance_mode: None,
            refine_mode: None,
            exact_threshold: 8,
        }
    }
}

/// The complete configuration for one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cluster: ClusterConfig,
    pub oracle: OracleConfig,
    pub qoe: QoeConfig,
    pub refine: RefineConfig,
    pub balance: BalanceConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    /// Loads TOML or JSON by extension, sniffing the first byte when the
    /// extension is ambiguous.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let cfg = match ext {
            "json" => Self::from_json_str(&text)?,
            "toml" => Self::from_toml_str(&text)?,
            _ => {
                if text.trim_start().starts_with('{') {
                    Self::from_json_str(&text)?
                } else {
                    Self::from_toml_str(&text)?
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully-resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<std::path::PathBuf, ConfigError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml_string())?;
        Ok(path)
    }

    /// Effective behavior knobs: the policy's defaults with any explicit
    /// overrides applied.
    pub fn knobs(&self) -> PolicyKnobs {
        let mut k = self.sim.policy.knobs();
        if let Some(d) = self.sim.dispatch {
            k.dispatch = d;
        }
        if let Some(b) = self.sim.balance_mode {
            k.balance = b;
        }
        if let Some(r) = self.sim.refine_mode {
            k.refine = r;
        }
        k
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        // NaN and infinity both fail these guards; either would poison the
        // integer-microsecond clock math downstream.
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let c = &self.cluster;
        if c.instances < 1 {
            return fail("cluster.instances must be ≥ 1".into());
        }
        if c.kv_capacity < 1 {
            return fail("cluster.kv_capacity must be ≥ 1".into());
        }
        if c.max_batch < 1 {
            return fail("cluster.max_batch must be ≥ 1".into());
        }
        if !pos(c.kv_bytes_per_token) || !pos(c.bandwidth) {
            return fail("cluster.kv_bytes_per_token and cluster.bandwidth must be positive".into());
        }
        let o = &self.oracle;
        if o.prefill.iter().chain(o.decode.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return fail("oracle coefficients must be finite and ≥ 0".into());
        }
        if !nonneg(o.gamma) || !o.penalty_cap.is_finite() || o.penalty_cap < 1.0 {
            return fail("oracle.gamma must be ≥ 0 and oracle.penalty_cap ≥ 1".into());
        }
        if self.qoe.d.iter().any(|v| !v.is_finite()) {
            return fail("qoe.d must be finite".into());
        }
        let r = &self.refine;
        if !(0.0..=1.0).contains(&r.ema_alpha) {
            return fail("refine.ema_alpha must be in [0, 1]".into());
        }
        if !pos(r.interval_s) {
            return fail("refine.interval_s must be positive".into());
        }
        let b = &self.balance;
        if !pos(b.overload_factor)
            || b.starvation_threshold < 1
            || b.max_concurrent < 1
            || b.rounds < 1
        {
            return fail("balance settings must be positive".into());
        }
        let s = &self.sim;
        if !pos(s.heartbeat_ms) || !pos(s.bid_window_ms) || !pos(s.report_interval_s) {
            return fail("sim timing settings must be positive".into());
        }
        if !(0.0..1.0).contains(&s.warmup_frac) {
            return fail("sim.warmup_frac must be in [0, 1)".into());
        }
        if s.slo_scales.is_empty() || !s.slo_scales.iter().all(|&v| pos(v)) {
            return fail("sim.slo_scales must be nonempty and positive".into());
        }
        if let Some(h) = s.horizon_s {
            if !pos(h) {
                return fail("sim.horizon_s must be positive when set".into());
            }
        }
        if let Some(stages) = &s.fixed_stages {
            if stages.is_empty() {
                return fail("sim.fixed_stages must be nonempty when set".into());
            }
            if stages[0].lo != 0 {
                return fail("sim.fixed_stages must start at 0".into());
            }
            for w in stages.windows(2) {
                if w[0].hi != w[1].lo {
                    return fail("sim.fixed_stages must be contiguous".into());
                }
            }
            if stages.iter().any(|st| st.lo >= st.hi || st.instance_count < 1) {
                return fail("sim.fixed_stages ranges must be nonempty with ≥ 1 instance".into());
            }
            let total: u32 = stages.iter().map(|st| st.instance_count).sum();
            if total != self.cluster.instances {
                return fail(format!(
                    "sim.fixed_stages instances ({total}) must equal cluster.instances ({})",
                    self.cluster.instances
                ));
            }
        }
        Ok(())
    }
}
