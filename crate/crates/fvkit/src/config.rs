//! Run configuration: one TOML file holding every protocol constant, with
//! CLI flag overrides layered on top (flags win).
//!
//! All science parameters live here; environment variables are reserved for
//! credentials and endpoints. Each command embeds the config hash into the
//! artifacts it writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::instructions::LengthRegime;

/// Protocol budgets. Defaults are the reference protocol: 100 activation
/// prompts (20 per top instruction), 25 CIE prompts (5 per instruction),
/// J=5, |A|=20, K=10, 5 baselines per instruction, 2^16 cache entries,
/// 20 generation rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub activation_prompts: usize,
    pub cie_prompts: usize,
    pub min_successes: usize,
    pub top_j: usize,
    pub head_count: usize,
    pub shots: usize,
    pub baselines_per_spec: usize,
    pub corpus_cache_target: usize,
    pub generation_rounds: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            activation_prompts: crate::fv::DEFAULT_ACTIVATION_PROMPTS,
            cie_prompts: crate::fv::DEFAULT_CIE_PROMPTS,
            min_successes: crate::instructions::DEFAULT_MIN_SUCCESSES,
            top_j: crate::instructions::DEFAULT_TOP_J,
            head_count: crate::fv::DEFAULT_HEAD_COUNT,
            shots: crate::corpus::DEFAULT_SHOTS,
            baselines_per_spec: crate::baselines::DEFAULT_BASELINES_PER_SPEC,
            corpus_cache_target: crate::baselines::DEFAULT_CACHE_TARGET,
            generation_rounds: crate::instructions::DEFAULT_ROUNDS,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("activation_prompts", self.activation_prompts),
            ("cie_prompts", self.cie_prompts),
            ("min_successes", self.min_successes),
            ("top_j", self.top_j),
            ("head_count", self.head_count),
            ("shots", self.shots),
            ("baselines_per_spec", self.baselines_per_spec),
            ("corpus_cache_target", self.corpus_cache_target),
            ("generation_rounds", self.generation_rounds),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(FvError::Config(format!("budget {name} must be positive")));
            }
        }
        if self.activation_prompts % self.top_j != 0 {
            return Err(FvError::Config(format!(
                "activation_prompts ({}) must split evenly over top_j ({})",
                self.activation_prompts, self.top_j
            )));
        }
        if self.cie_prompts != self.top_j * self.baselines_per_spec {
            return Err(FvError::Config(format!(
                "cie_prompts ({}) must equal top_j ({}) x baselines_per_spec ({})",
                self.cie_prompts, self.top_j, self.baselines_per_spec
            )));
        }
        Ok(())
    }
}

/// Generator endpoint / fixture settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// HTTP endpoint; credentials come from `FVKIT_GENERATOR_API_KEY`.
    pub endpoint: Option<String>,
    /// Directory of recorded fixtures, `<task>.<regime>.json` per cell.
    pub fixture_dir: Option<PathBuf>,
    pub model_id: String,
    /// Record endpoint interactions into `fixture_dir`.
    pub record: bool,
}

/// Which evaluation families `evaluate` runs beyond the matched settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub unmatched: bool,
    pub joint: bool,
    pub fv_twice: bool,
    pub incongruent: bool,
    pub controls: bool,
    pub sweep: bool,
    /// Cap on test queries per task (None = whole test split).
    pub max_queries: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            unmatched: true,
            joint: true,
            fv_twice: true,
            incongruent: true,
            controls: true,
            sweep: false,
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Checkpoint path of the subject model.
    pub model: PathBuf,
    /// Second checkpoint for cross-model steering (the steering target).
    pub steer_target: Option<PathBuf>,
    pub tasks: Vec<PathBuf>,
    pub seed: u64,
    pub output_root: PathBuf,
    pub budgets: Budgets,
    pub regimes: Vec<LengthRegime>,
    /// Baseline methods by registry name.
    pub baseline_methods: Vec<String>,
    /// Chance floor for open-generation tasks (classification uses
    /// 1/|label_set|).
    pub chance_open_generation: f64,
    /// Fixed intervention depth; None applies round(L/3).
    pub intervention_layer: Option<usize>,
    /// Joint-intervention sweep range; None applies [floor(L/4), ceil(L/2)].
    pub joint_sweep_range: Option<(usize, usize)>,
    /// Plain-text corpus for the cache builder.
    pub corpus: Option<PathBuf>,
    /// Prescored cache location.
    pub cache_file: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
    /// Equiprobable band start/increment.
    pub band_t0: f64,
    pub band_dt: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("model.json"),
            steer_target: None,
            tasks: Vec::new(),
            seed: 0,
            output_root: PathBuf::from("runs/default"),
            budgets: Budgets::default(),
            regimes: vec![LengthRegime::Short, LengthRegime::Long],
            baseline_methods: vec![
                "equiprobable".into(),
                "real_text".into(),
                "other_task".into(),
            ],
            chance_open_generation: 0.005,
            intervention_layer: None,
            joint_sweep_range: None,
            corpus: None,
            cache_file: None,
            generator: GeneratorConfig::default(),
            eval: EvalConfig::default(),
            band_t0: crate::baselines::DEFAULT_T0,
            band_dt: crate::baselines::DEFAULT_DT,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let config: Self = toml::from_str(&raw)
            .map_err(|e| FvError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let raw = toml::to_string_pretty(self)
            .map_err(|e| FvError::Config(format!("serialize: {e}")))?;
        std::fs::write(path, raw)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.budgets.validate()?;
        if self.tasks.is_empty() {
            return Err(FvError::Config("no task files configured".into()));
        }
        for path in &self.tasks {
            if !path.exists() {
                return Err(FvError::Config(format!(
                    "task file {} does not exist",
                    path.display()
                )));
            }
        }
        if !self.model.exists() {
            return Err(FvError::Config(format!(
                "model checkpoint {} does not exist",
                self.model.display()
            )));
        }
        if !(0.0..=1.0).contains(&self.chance_open_generation) {
            return Err(FvError::Config(
                "chance_open_generation must be a probability".into(),
            ));
        }
        if self.band_t0 <= 0.0 || self.band_dt <= 0.0 {
            return Err(FvError::Config("band parameters must be positive".into()));
        }
        Ok(())
    }

    /// Hash over the canonical JSON encoding of the full config.
    pub fn config_hash(&self) -> Result<String> {
        crate::store::content_hash(self)
    }

    pub fn instructions_dir(&self) -> PathBuf {
        self.output_root.join("instructions")
    }

    pub fn cells_dir(&self) -> PathBuf {
        self.output_root.join("cells")
    }

    pub fn fv_dir(&self) -> PathBuf {
        self.output_root.join("fvs")
    }

    pub fn reports_path(&self) -> PathBuf {
        self.output_root.join("reports.jsonl")
    }

    pub fn head_sets_path(&self) -> PathBuf {
        self.output_root.join("head_sets.json")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.output_root.join("analysis")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_root.join("manifest.json")
    }

    pub fn default_cache_path(&self) -> PathBuf {
        self.cache_file
            .clone()
            .unwrap_or_else(|| self.output_root.join("corpus_cache.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budgets_satisfy_protocol_arithmetic() {
        let b = Budgets::default();
        b.validate().unwrap();
        assert_eq!(b.activation_prompts, 100);
        assert_eq!(b.cie_prompts, 25);
        assert_eq!(b.activation_prompts / b.top_j, 20);
        assert_eq!(b.cie_prompts, b.top_j * b.baselines_per_spec);
        assert_eq!(b.head_count, 20);
        assert_eq!(b.shots, 10);
        assert_eq!(b.corpus_cache_target, 65536);
        assert_eq!(b.generation_rounds, 20);
        assert_eq!(b.min_successes, 20);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let mut b = Budgets::default();
        b.top_j = 0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn mismatched_cie_arithmetic_is_rejected() {
        let mut b = Budgets::default();
        b.cie_prompts = 24;
        assert!(b.validate().is_err());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut config = RunConfig::default();
        config.seed = 42;
        config.tasks = vec![PathBuf::from("tasks/a.json")];
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(config, loaded);
        assert_eq!(
            config.config_hash().unwrap(),
            loaded.config_hash().unwrap()
        );
    }
}
