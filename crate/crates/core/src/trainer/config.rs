use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DecodingConfig;
use crate::grpo::GrpoHyper;
use crate::policy::{FreezeSet, OptimizerKind, PolicyConfig};
use crate::reward::RewardConfig;
use crate::taskgen::{make_splits, read_dataset, Question, SplitConfig, Vocabulary};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Architecture of a freshly initialized policy. The vocabulary size comes
/// from the shared vocabulary and the seed from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub context_window: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
}

impl Default for PolicySpec {
    fn default() -> Self {
        let c = PolicyConfig::new(0, 176, 0);
        Self {
            context_window: c.context_window,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ffn_mult: c.ffn_mult,
        }
    }
}

impl PolicySpec {
    pub fn to_config(&self, seed: u64) -> PolicyConfig {
        PolicyConfig {
            vocab_size: Vocabulary::standard().len(),
            context_window: self.context_window,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            seed,
        }
    }
}

/// Where questions come from: dataset files when given, otherwise generated
/// in memory from `split`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub split: SplitConfig,
}

/// Periodic evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSchedule {
    /// Evaluate every this many steps (and at the first and last step); 0
    /// evaluates only at the end.
    pub every: usize,
    /// Periodic evaluations use the first this many eval questions; the
    /// final evaluation uses all of them. 0 means all.
    pub max_questions: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvalSchedule {
    fn default() -> Self {
        Self {
            every: 100,
            max_questions: 0,
            temperature: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    /// Optimizer steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub max_response_len: usize,
    /// Question groups per optimizer step.
    pub grad_accum: usize,
    pub freeze: FreezeSet,
    /// Write a snapshot every this many steps; 0 writes only the final one.
    pub snapshot_every: usize,
    /// Start from this snapshot instead of a fresh policy. It is also the
    /// KL reference.
    pub init_snapshot: Option<PathBuf>,
    pub grpo: GrpoHyper,
    pub reward: RewardConfig,
    pub optimizer: OptimizerKind,
    pub policy: PolicySpec,
    pub data: DataConfig,
    pub eval: EvalSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_VERSION,
            name: "run".into(),
            seed: 0,
            steps: 1500,
            learning_rate: 1e-3,
            temperature: 1.0,
            max_response_len: 64,
            grad_accum: 2,
            freeze: FreezeSet::new(),
            snapshot_every: 0,
            init_snapshot: None,
            grpo: GrpoHyper::default(),
            reward: RewardConfig::default(),
            optimizer: OptimizerKind::default(),
            policy: PolicySpec::default(),
            data: DataConfig::default(),
            eval: EvalSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.eval,
            &mut cfg.init_snapshot,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {RUN_CONFIG_VERSION})",
                self.schema_version
            )));
        }
        self.grpo.validate()?;
        self.reward.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be >= 1".into()));
        }
        if self.max_response_len == 0 {
            return Err(Error::Config("max_response_len must be >= 1".into()));
        }
        if self.max_response_len >= self.policy.context_window {
            return Err(Error::Config(format!(
                "max_response_len {} leaves no room for a prompt in a window of {}",
                self.max_response_len, self.policy.context_window
            )));
        }
        self.policy.to_config(self.seed).validate()?;
        self.data.split.validate()
    }

    pub fn decoding(&self) -> DecodingConfig {
        DecodingConfig {
            temperature: self.eval.temperature,
            max_len: self.max_response_len,
            seed: self.eval.seed,
            answer_fallback: self.reward.answer_fallback,
        }
    }
}

/// Train and eval questions for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<Question>,
    pub eval: Vec<Question>,
}

impl TrainData {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let vocab = Vocabulary::standard().fingerprint();
        let read = |p: &Path| -> Result<Vec<Question>> {
            let d = read_dataset(p)?;
            if d.vocabulary != vocab {
                return Err(Error::IncompatibleSnapshot(format!(
                    "{} was written with vocabulary {}, this build uses {vocab}",
                    p.display(),
                    d.vocabulary
                )));
            }
            Ok(d.questions)
        };
        let (train, eval) = match (&cfg.train, &cfg.eval) {
            (Some(t), Some(e)) => (read(t)?, read(e)?),
            (None, None) => {
                let s = make_splits(&cfg.split)?;
                (s.train, s.eval)
            }
            _ => {
                return Err(Error::Config(
                    "data.train and data.eval must be given together".into(),
                ))
            }
        };
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Config("train and eval sets must be nonempty".into()));
        }
        Ok(Self { train, eval })
    }
}
