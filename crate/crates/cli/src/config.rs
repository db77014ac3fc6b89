use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use lgc::infoplane::{BitDepth, DEFAULT_BITS};
use lgc::trainer::{resolve_policies, CompressorKind, ModelSpec, PatternKind, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Where `train` and `infoplane` write their files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Record gradients during training and write the information-plane summary.
    pub infoplane: bool,
    /// Fixed quantizer depth; unset picks about sqrt(n) levels per layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    pub max_bits: u32,
    pub node_a: usize,
    pub node_b: usize,
    /// Also summarize with node B's vectors shuffled, as a no-correlation baseline.
    pub shuffled_baseline: bool,
    pub shuffle_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            infoplane: false,
            bits: None,
            max_bits: DEFAULT_BITS,
            node_a: 0,
            node_b: 1,
            shuffled_baseline: true,
            shuffle_seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn depth(&self) -> BitDepth {
        match self.bits {
            Some(b) => BitDepth::Fixed(b),
            None => BitDepth::Adaptive { max: self.max_bits },
        }
    }
}

/// Training config plus output location and analysis toggles.
/// In the file, the training keys sit at the top level next to the
/// `[output]` and `[analysis]` tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub analysis: AnalysisConfig,
}

/// Every problem found in a config file, each starting with its key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors {
    pub source: String,
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {} problem(s)", self.source, self.problems.len())?;
        for p in &self.problems {
            writeln!(f, "  {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub pattern: Option<PatternKind>,
    pub compressor: Option<CompressorKind>,
    pub nodes: Option<usize>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(p) = o.pattern {
            self.train.topology.pattern = p;
        }
        if let Some(c) = o.compressor {
            self.train.compressor.kind = c;
        }
        if let Some(k) = o.nodes {
            self.train.topology.nodes = k;
        }
    }

    /// Range and cross-field violations, keyed like the file.
    pub fn violations(&self) -> Vec<String> {
        let layers = ModelSpec::convnet5_mini().map(|m| m.layer_count()).unwrap_or(0);
        let mut v = self.train.violations(layers);
        if self.train.seed > i64::MAX as u64 {
            v.push(format!("seed: {} does not fit the file format's signed 64-bit integers", self.train.seed));
        }
        if let Ok(policies) = resolve_policies(layers, &self.train.layer_policy) {
            if self.train.compressor.kind == CompressorKind::Lgc
                && !policies.contains(&lgc::trainer::LayerPolicy::TopkPlusAe)
            {
                v.push("layer_policy: lgc needs at least one topk_plus_ae layer".into());
            }
        }
        let a = &self.analysis;
        if let Some(b) = a.bits {
            if !(1..=32).contains(&b) {
                v.push(format!("analysis.bits: must lie in 1..=32, got {b}"));
            }
        }
        if !(1..=32).contains(&a.max_bits) {
            v.push(format!("analysis.max_bits: must lie in 1..=32, got {}", a.max_bits));
        }
        if a.infoplane {
            let k = self.train.topology.nodes;
            for (key, n) in [("analysis.node_a", a.node_a), ("analysis.node_b", a.node_b)] {
                if n >= k {
                    v.push(format!("{key}: node {n} does not exist with {k} nodes"));
                }
            }
            if a.node_a == a.node_b {
                v.push("analysis.node_b: must differ from analysis.node_a".into());
            }
        }
        if self.output.dir.as_os_str().is_empty() {
            v.push("output.dir: must not be empty".into());
        }
        v
    }

    /// Every defaulted choice made explicit.
    pub fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.resolved(),
            ..self.clone()
        }
    }

    pub fn to_toml_string(&self) -> anyhow::Result<String> {
        let mut table = toml::Table::try_from(&self.train)?;
        table.insert("output".into(), toml::Value::try_from(&self.output)?);
        table.insert("analysis".into(), toml::Value::try_from(&self.analysis)?);
        Ok(toml::to_string(&table)?)
    }
}

fn section<T: DeserializeOwned + Default>(
    value: Option<toml::Value>,
    prefix: &str,
    problems: &mut Vec<String>,
) -> T {
    let Some(value) = value else {
        return T::default();
    };
    let mut unknown = BTreeSet::new();
    let join = |p: String| if prefix.is_empty() { p } else if p == "." { prefix.to_string() } else { format!("{prefix}.{p}") };
    let mut note = |path: serde_ignored::Path<'_>| {
        unknown.insert(join(path.to_string()));
    };
    let parsed: Result<T, _> = serde_path_to_error::deserialize(serde_ignored::Deserializer::new(value, &mut note));
    let out = match parsed {
        Ok(v) => v,
        Err(e) => {
            problems.push(format!("{}: {}", join(e.path().to_string()), e.inner()));
            T::default()
        }
    };
    problems.extend(unknown.into_iter().map(|k| format!("{k}: unknown key")));
    out
}

/// Parses, checks for unknown keys, and validates; on failure lists every problem found.
pub fn parse_str(text: &str, source: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let fail = |problems| ConfigErrors {
        source: source.to_string(),
        problems,
    };
    let mut table: toml::Table = toml::from_str(text).map_err(|e| fail(vec![e.to_string().trim().to_string()]))?;
    let mut problems = Vec::new();
    let output = section(table.remove("output"), "output", &mut problems);
    let analysis = section(table.remove("analysis"), "analysis", &mut problems);
    let train = section(Some(toml::Value::Table(table)), "", &mut problems);
    let cfg = ExperimentConfig { train, output, analysis };
    problems.extend(cfg.violations());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(fail(problems))
    }
}

pub fn parse_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    Ok(parse_str(&text, &path.display().to_string())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_str("", "t").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.compressor.ratio, 0.1);
        assert_eq!(c.train.autoencoder.lambda2, 0.5);
    }

    #[test]
    fn zero_nodes_named() {
        let e = parse_str("[topology]\nnodes = 0\n", "t").unwrap_err();
        assert!(e.problems.iter().any(|p| p.starts_with("topology.nodes")), "{e}");
    }

    #[test]
    fn unknown_keys_all_listed() {
        let text = "colour = 1\n[topology]\nnodez = 3\n[output]\nfile = \"x\"\n";
        let e = parse_str(text, "t").unwrap_err();
        for key in ["colour", "topology.nodez", "output.file"] {
            assert!(e.problems.iter().any(|p| p.starts_with(key)), "{key} in {e}");
        }
    }

    #[test]
    fn unknown_keys_and_ranges_together() {
        let e = parse_str("colour = 1\n[topology]\nnodes = 0\n[compressor]\nratio = 200.0\n", "t").unwrap_err();
        for key in ["colour", "topology.nodes", "compressor.ratio"] {
            assert!(e.problems.iter().any(|p| p.starts_with(key)), "{key} in {e}");
        }
    }

    #[test]
    fn type_errors_carry_the_key() {
        let e = parse_str("[topology]\nnodes = \"four\"\n[analysis]\nbits = -1\n", "t").unwrap_err();
        assert!(e.problems.iter().any(|p| p.starts_with("topology.nodes: ")), "{e}");
        assert!(e.problems.iter().any(|p| p.starts_with("analysis.bits: ")), "{e}");
    }

    #[test]
    fn range_violations_all_listed() {
        let text = "[compressor]\nratio = 0.0\ninner_ratio = 200.0\n[optimizer]\nlr = -1.0\n";
        let e = parse_str(text, "t").unwrap_err();
        assert_eq!(e.problems.len(), 3, "{e}");
    }

    #[test]
    fn resolved_round_trip() {
        let text = "seed = 7\n[compressor]\nkind = \"dgc_like\"\n[[layer_policy]]\nlayer = 4\npolicy = \"dense\"\n[analysis]\ninfoplane = true\nbits = 3\n";
        let c = parse_str(text, "t").unwrap().resolved();
        let back = parse_str(&c.to_toml_string().unwrap(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.compressor.kind, CompressorKind::Dgc);
        assert_eq!(c.resolved(), c);
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            seed: Some(3),
            nodes: Some(8),
            pattern: Some(PatternKind::Ring),
            ..Default::default()
        });
        assert_eq!((c.train.seed, c.train.topology.nodes), (3, 8));
        assert_eq!(c.train.topology.pattern, PatternKind::Ring);
    }
}
