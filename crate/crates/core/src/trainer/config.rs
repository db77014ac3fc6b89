use serde::{Deserialize, Serialize};

use crate::codec::ValueWidth;
use crate::sparsify::ScheduleStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Ps,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    None,
    SparseGd,
    #[serde(alias = "dgc_like")]
    Dgc,
    Lgc,
}

impl CompressorKind {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "none" => CompressorKind::None,
            "sparse_gd" => CompressorKind::SparseGd,
            "dgc" | "dgc_like" => CompressorKind::Dgc,
            "lgc" => CompressorKind::Lgc,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            CompressorKind::None => "none",
            CompressorKind::SparseGd => "sparse_gd",
            CompressorKind::Dgc => "dgc",
            CompressorKind::Lgc => "lgc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireWidth {
    #[default]
    F32,
    F64,
}

impl From<WireWidth> for ValueWidth {
    fn from(w: WireWidth) -> Self {
        match w {
            WireWidth::F32 => ValueWidth::F32,
            WireWidth::F64 => ValueWidth::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    Dense,
    TopkOnly,
    TopkPlusAe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub nodes: usize,
    pub pattern: PatternKind,
    /// Worker that sends the common code in parameter-server mode.
    pub designated_node: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            pattern: PatternKind::Ps,
            designated_node: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorConfig {
    pub kind: CompressorKind,
    /// Top-k density in percent.
    pub ratio: f64,
    /// Innovation share of the top-k selection, in percent.
    pub inner_ratio: f64,
    pub momentum_correction: f64,
    pub wire: WireWidth,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            kind: CompressorKind::Lgc,
            ratio: 0.1,
            inner_ratio: 10.0,
            momentum_correction: 0.9,
            wire: WireWidth::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Sparsification strategy for the sparse baselines; LGC always warms up
    /// for `phase1_iters`. Unset means exponential ramp-up for dgc and
    /// warmup-then-fixed otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<ScheduleStrategy>,
    pub start_ratio: f64,
    pub ramp_iters: u64,
    pub phase1_iters: u32,
    pub phase2_iters: u32,
    pub total_iters: u32,
}

impl ScheduleConfig {
    pub fn strategy_for(&self, kind: CompressorKind) -> ScheduleStrategy {
        self.strategy.unwrap_or(match kind {
            CompressorKind::Dgc => ScheduleStrategy::ExponentialRampup,
            _ => ScheduleStrategy::WarmupThenFixed,
        })
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            strategy: None,
            start_ratio: 25.0,
            ramp_iters: 100,
            phase1_iters: 300,
            phase2_iters: 300,
            total_iters: 2500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Global gradient-norm cap for each autoencoder step; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            lambda1: 1.0,
            lambda2: 0.5,
            clip_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub batch_per_node: usize,
    /// Amplitude of the uniform pixel noise.
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_samples: 4096,
            eval_samples: 512,
            batch_per_node: 8,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]

pub struct PolicyOverride {
    pub layer: usize,
    pub policy: LayerPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub eval_every: u32,
    /// Keep every node's raw per-layer gradients for information-plane analysis.
    pub record_gradients: bool,
    pub topology: TopologyConfig,
    pub compressor: CompressorConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub autoencoder: AutoencoderConfig,
    pub dataset: DatasetConfig,
    pub layer_policy: Vec<PolicyOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_every: 50,
            record_gradients: false,
            topology: TopologyConfig::default(),
            compressor: CompressorConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            dataset: DatasetConfig::default(),
            layer_policy: Vec::new(),
        }
    }
}

fn ratio_ok(r: f64) -> bool {
    r > 0.0 && r <= 100.0
}

impl TrainConfig {
    /// Copy with every defaulted choice made explicit.
    pub fn resolved(&self) -> TrainConfig {
        let mut out = self.clone();
        out.schedule.strategy = Some(self.schedule.strategy_for(self.compressor.kind));
        out
    }

    /// Every violated precondition, each prefixed with its key path.
    pub fn violations(&self, layer_count: usize) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |key: &str, msg: String| v.push(format!("{key}: {msg}"));
        let t = &self.topology;
        if t.nodes == 0 {
            bad("topology.nodes", "must be at least 1".into());
        }
        if t.nodes > u16::MAX as usize - 1 {
            bad("topology.nodes", format!("{} exceeds the 16-bit node id range", t.nodes));
        }
        if t.nodes > 0 && t.designated_node >= t.nodes {
            bad(
                "topology.designated_node",
                format!("{} is not a worker id below {}", t.designated_node, t.nodes),
            );
        }
        let c = &self.compressor;
        if !ratio_ok(c.ratio) {
            bad("compressor.ratio", format!("must lie in (0, 100], got {}", c.ratio));
        }
        if !ratio_ok(c.inner_ratio) {
            bad("compressor.inner_ratio", format!("must lie in (0, 100], got {}", c.inner_ratio));
        }
        if !(0.0..1.0).contains(&c.momentum_correction) {
            bad(
                "compressor.momentum_correction",
                format!("must lie in [0, 1), got {}", c.momentum_correction),
            );
        }
        let s = &self.schedule;
        if s.total_iters == 0 {
            bad("schedule.total_iters", "must be at least 1".into());
        }
        if c.kind == CompressorKind::Lgc && t.pattern == PatternKind::Ps && t.nodes == 1 {
            bad("topology.nodes", "lgc on a parameter server needs at least 2 workers for the similarity loss".into());
        }
        if c.kind == CompressorKind::Lgc {
            if s.phase2_iters == 0 {
                bad("schedule.phase2_iters", "lgc needs at least one autoencoder training iteration".into());
            }
            if s.phase1_iters as u64 + s.phase2_iters as u64 > s.total_iters as u64 {
                bad(
                    "schedule.total_iters",
                    format!(
                        "{} is shorter than phase1_iters + phase2_iters = {}",
                        s.total_iters,
                        s.phase1_iters as u64 + s.phase2_iters as u64
                    ),
                );
            }
        }
        if s.strategy_for(c.kind) == ScheduleStrategy::ExponentialRampup && !ratio_ok(s.start_ratio) {
            bad("schedule.start_ratio", format!("must lie in (0, 100], got {}", s.start_ratio));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            bad("optimizer.lr", format!("must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            bad("optimizer.momentum", format!("must lie in [0, 1), got {}", o.momentum));
        }
        let a = &self.autoencoder;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            bad("autoencoder.lr", format!("must be positive, got {}", a.lr));
        }
        if !(0.0..1.0).contains(&a.momentum) {
            bad("autoencoder.momentum", format!("must lie in [0, 1), got {}", a.momentum));
        }
        if !(a.lambda1 >= 0.0) {
            bad("autoencoder.lambda1", format!("must be non-negative, got {}", a.lambda1));
        }
        if !(a.lambda2 >= 0.0) {
            bad("autoencoder.lambda2", format!("must be non-negative, got {}", a.lambda2));
        }
        if !(a.clip_norm >= 0.0 && a.clip_norm.is_finite()) {
            bad("autoencoder.clip_norm", format!("must be zero or positive, got {}", a.clip_norm));
        }
        let d = &self.dataset;
        if d.batch_per_node == 0 {
            bad("dataset.batch_per_node", "must be at least 1".into());
        }
        if d.train_samples < d.batch_per_node.saturating_mul(t.nodes) {
            bad(
                "dataset.train_samples",
                format!(
                    "{} cannot fill one global batch of {}",
                    d.train_samples,
                    d.batch_per_node.saturating_mul(t.nodes)
                ),
            );
        }
        if d.train_samples > 10_000 {
            bad("dataset.train_samples", format!("{} exceeds the desk-scale cap of 10000", d.train_samples));
        }
        if d.eval_samples == 0 {
            bad("dataset.eval_samples", "must be at least 1".into());
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            bad("dataset.noise", format!("must be non-negative, got {}", d.noise));
        }
        if self.eval_every == 0 {
            bad("eval_every", "must be at least 1".into());
        }
        for (i, o) in self.layer_policy.iter().enumerate() {
            if o.layer >= layer_count {
                bad(
                    &format!("layer_policy[{i}].layer"),
                    format!("{} is not a layer below {layer_count}", o.layer),
                );
            }
        }
        v
    }
}
