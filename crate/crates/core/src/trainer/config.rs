use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::SynthesisTask;
use crate::network::NetConfig;
use crate::optim::AdamConfig;
use crate::seed::derive_seed;

/// How the learning rate leaves its initial value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Constant for `lr_plateau_epochs`, then linear to zero at the last epoch.
    #[default]
    PlateauThenLinear,
    /// Linear from the start, reaching zero at `lr_plateau_epochs`.
    DecayByPlateau,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Registry document (a phantom spec doubles as one).
    pub registry: Option<PathBuf>,
    /// Corpus root.
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_plateau_epochs: usize,
    pub schedule: LrSchedule,
    /// Without the scheduler the batch size is forced to 1.
    pub mcbs_enabled: bool,
    /// Checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 200,
            batch_size: 16,
            lr: 2e-4,
            lr_plateau_epochs: 50,
            schedule: LrSchedule::default(),
            mcbs_enabled: true,
            checkpoint_every: 0,
        }
    }
}

/// Named RNG streams; unset streams derive from `global`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub global: u64,
    pub init: Option<u64>,
    pub schedule: Option<u64>,
    pub condition: Option<u64>,
}


impl SeedConfig {
    pub fn init(&self) -> u64 {
        self.init.unwrap_or_else(|| derive_seed(self.global, "init"))
    }

    pub fn schedule(&self) -> u64 {
        self.schedule.unwrap_or_else(|| derive_seed(self.global, "schedule"))
    }

    pub fn condition(&self) -> u64 {
        self.condition.unwrap_or_else(|| derive_seed(self.global, "condition"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tasks such as `"T1->T2"` or `"T1,T2->FLAIR"`, scored on the test split.
    pub tasks: Vec<String>,
    /// Cases per dataset drawn into the montage (0: none).
    pub montage_cases: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Full,
    NoPfm,
    NoMcbs,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoPfm => "no-pfm",
            Arm::NoMcbs => "no-mcbs",
        }
    }

    /// The configuration this arm trains with.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Arm::Full => {}
            Arm::NoPfm => c.model.pfm_enabled = false,
            Arm::NoMcbs => c.train.mcbs_enabled = false,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
    /// One matched-seed repetition per entry.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            arms: vec![Arm::Full, Arm::NoPfm],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub train: TrainSection,
    pub seeds: SeedConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub model: NetConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<config>"))
    }

    /// Reads a config; relative data paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.registry, &mut cfg.data.corpus].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::field("train.epochs", "must be >= 1"));
        }
        if t.lr_plateau_epochs > t.epochs {
            return Err(Error::field("train.lr_plateau_epochs", "must not exceed train.epochs"));
        }
        if t.batch_size == 0 {
            return Err(Error::field("train.batch_size", "must be >= 1"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::field("train.lr", "must be positive"));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.model.validate()?;
        for (i, task) in self.eval.tasks.iter().enumerate() {
            SynthesisTask::parse(task).map_err(|e| Error::field(format!("eval.tasks[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Batch size actually used: 1 when the scheduler is disabled.
    pub fn effective_batch_size(&self) -> usize {
        if self.train.mcbs_enabled {
            self.train.batch_size
        } else {
            1
        }
    }

    pub fn tasks(&self) -> Result<Vec<SynthesisTask>> {
        self.eval.tasks.iter().map(|t| SynthesisTask::parse(t)).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Learning rate of epoch `epoch` (0-based).
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let t = &config.train;
    if epoch >= t.epochs {
        return Err(Error::Schedule(format!(
            "epoch {epoch} outside 0..{}",
            t.epochs
        )));
    }
    let (e, total, plateau) = (epoch as f64, t.epochs as f64, t.lr_plateau_epochs as f64);
    Ok(match t.schedule {
        LrSchedule::PlateauThenLinear if epoch < t.lr_plateau_epochs => t.lr,
        LrSchedule::PlateauThenLinear => t.lr * (total - e) / (total - plateau),
        LrSchedule::DecayByPlateau if t.lr_plateau_epochs == 0 => t.lr * (total - e) / total,
        LrSchedule::DecayByPlateau => t.lr * ((plateau - e) / plateau).max(0.0),
    })
}
