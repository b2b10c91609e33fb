use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{CAPTION_FILE, INSTRUCT_FILE};
use crate::error::{Error, Result, StageLabel};
use crate::model::{ModelConfig, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    I,
    II,
    III,
    IV,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::I, Stage::II, Stage::III, Stage::IV];

    pub fn number(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
            Stage::IV => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::I),
            2 => Ok(Stage::II),
            3 => Ok(Stage::III),
            4 => Ok(Stage::IV),
            _ => Err(Error::Config(format!("unknown stage {n}; expected 1, 2, 3 or 4"))),
        }
    }

    pub fn label(self) -> StageLabel {
        StageLabel(self.number())
    }

    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Stage::I => &[Adapter],
            Stage::II => &[Decoder, MmHead, Adapter],
            Stage::III => &[VmHead],
            Stage::IV => &[Decoder, MmHead],
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        self.trainable_groups().contains(&group)
    }

    pub fn default_loss(self) -> LossKind {
        match self {
            Stage::I | Stage::II => LossKind::Lm,
            Stage::III => LossKind::VmStage3,
            Stage::IV => LossKind::Mm,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.label().fmt(f)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "I" => Ok(Stage::I),
            "2" | "II" => Ok(Stage::II),
            "3" | "III" => Ok(Stage::III),
            "4" | "IV" => Ok(Stage::IV),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Lm,
    VmStage3,
    Mm,
}

/// Everything a single stage needs. Missing keys in a config file fall back
/// to [`StageConfig::defaults`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub loss: LossKind,
    /// Optional cap on the number of optimizer steps.
    pub max_steps: Option<usize>,
}

/// Peak learning rates used when a config does not set `lr`.
pub const DEFAULT_LR: [f64; 4] = [1e-3, 1e-3, 1e-2, 1e-3];
pub const DEFAULT_BATCH: [usize; 4] = [32, 16, 32, 16];
pub const DEFAULT_EPOCHS: usize = 3;

impl StageConfig {
    /// Toy-scale defaults; `data_dir` holds the generated corpus.
    pub fn defaults(stage: Stage, data_dir: &Path) -> Self {
        let i = stage.number() as usize - 1;
        let file = match stage {
            Stage::I | Stage::III => CAPTION_FILE,
            Stage::II | Stage::IV => INSTRUCT_FILE,
        };
        StageConfig {
            stage,
            batch_size: DEFAULT_BATCH[i],
            lr: DEFAULT_LR[i],
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            dataset: data_dir.join(file),
            clip_norm: 1.0,
            loss: stage.default_loss(),
            max_steps: None,
        }
    }

    /// Applies a TOML table over the defaults for `stage`.
    pub fn from_overrides(stage: Stage, data_dir: &Path, o: &StageOverrides) -> Result<Self> {
        if let Some(s) = o.stage {
            if s != stage.number() {
                return Err(Error::Config(format!(
                    "config is for stage {s} but stage {} was requested",
                    stage.number()
                )));
            }
        }
        let mut c = StageConfig::defaults(stage, data_dir);
        if let Some(v) = o.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = o.lr {
            c.lr = v;
        }
        if let Some(v) = o.warmup_ratio {
            c.warmup_ratio = v;
        }
        if let Some(v) = o.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = o.epochs {
            c.epochs = v;
        }
        if let Some(v) = o.seed {
            c.seed = v;
        }
        if let Some(v) = &o.dataset {
            c.dataset = v.clone();
        }
        if let Some(v) = o.clip_norm {
            c.clip_norm = v;
        }
        if o.max_steps.is_some() {
            c.max_steps = o.max_steps;
        }
        if let Some(l) = o.loss {
            // the only sanctioned swap: Stage IV with the text loss alone
            let ok = l == stage.default_loss() || (stage == Stage::IV && l == LossKind::Lm);
            if !ok {
                return Err(Error::Config(format!("loss {l:?} is not allowed for stage {stage}")));
            }
            c.loss = l;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, stage: Stage, data_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let o: StageOverrides = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        StageConfig::from_overrides(stage, data_dir, &o)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be nonnegative");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1");
        }
        Ok(())
    }
}

/// On-disk form of a stage config: every key optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub stage: Option<u8>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub clip_norm: Option<f64>,
    pub loss: Option<LossKind>,
    pub max_steps: Option<usize>,
}

/// Config for a whole four-stage run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds model init and, unless a stage overrides it, every stage.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub stage1: StageOverrides,
    #[serde(default)]
    pub stage2: StageOverrides,
    #[serde(default)]
    pub stage3: StageOverrides,
    #[serde(default)]
    pub stage4: StageOverrides,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }

    pub fn stage(&self, stage: Stage, data_dir: &Path) -> Result<StageConfig> {
        let mut o = match stage {
            Stage::I => &self.stage1,
            Stage::II => &self.stage2,
            Stage::III => &self.stage3,
            Stage::IV => &self.stage4,
        }
        .clone();
        o.seed = o.seed.or(Some(self.seed));
        StageConfig::from_overrides(stage, data_dir, &o)
    }
}
