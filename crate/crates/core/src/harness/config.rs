use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AdvWiring;
use crate::club::ClubConfig;
use crate::diffcore::OptimizerConfig;
use crate::error::{Error, Result};
use crate::losses::{GateMode, LossWeights};
use crate::segcore::PATCH;
use crate::synthdata::{FactorConfig, GenerationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    PretrainText,
    TrainDecouple,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub phase: RunPhase,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            phase: RunPhase::PretrainText,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: PathBuf,
    /// Scenes written by `gen-data`.
    pub scenes: usize,
    /// Trailing scenes held out for evaluation.
    pub eval_scenes: usize,
    pub generation: GenerationConfig,
    pub factors: FactorConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: PathBuf::from("data/scenes.bin"),
            scenes: 2200,
            eval_scenes: 200,
            generation: GenerationConfig::default(),
            factors: FactorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Width `H` of the decoupled features.
    pub hidden: usize,
    pub blocks: usize,
    pub slope: f64,
    pub gate: GateMode,
    pub fixed_gate: f64,
    pub freeze_image_encoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 64,
            blocks: crate::segcore::BLOCKS,
            slope: 0.2,
            gate: GateMode::Learned,
            fixed_gate: 0.5,
            freeze_image_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection<P: PhaseDefaults> {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Steps between evaluations and checkpoint refreshes; 0 disables both.
    pub eval_interval: usize,
    /// Train every other step with the detached first-pass mask as the dense
    /// prompt.
    pub reprompt_training: bool,
    #[serde(skip)]
    pub _phase: PhantomData<P>,
}

/// Phase-specific defaults.
pub trait PhaseDefaults {
    const INDEX: u8;
    const STEPS: usize;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct First;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Second;

impl PhaseDefaults for First {
    const INDEX: u8 = 1;
    const STEPS: usize = 3000;
}

impl PhaseDefaults for Second {
    const INDEX: u8 = 2;
    const STEPS: usize = 5000;
}

/// Settings for one of the two training phases; `P` selects the defaults.
pub type Phase1Section = PhaseSection<First>;
pub type Phase2Section = PhaseSection<Second>;

impl<P: PhaseDefaults> Default for PhaseSection<P> {
    fn default() -> Self {
        PhaseSection {
            steps: P::STEPS,
            batch: 8,
            optimizer: OptimizerConfig::adam(1e-3),
            eval_interval: 1000,
            reprompt_training: true,
            _phase: PhantomData,
        }
    }
}

impl<P: PhaseDefaults> PhaseSection<P> {
    fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("phase{}.batch must be >= 2", P::INDEX)));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config(format!("phase{}.optimizer.lr must be >= 0", P::INDEX)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClubSection {
    pub k: usize,
    pub q_steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub mixtures: usize,
}

impl Default for ClubSection {
    fn default() -> Self {
        let c = ClubConfig::default();
        ClubSection {
            k: c.k,
            q_steps: c.q_steps,
            lr: c.lr,
            hidden: c.hidden,
            mixtures: c.mixtures,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarySection {
    pub wiring: AdvWiring,
    pub optimizer: OptimizerConfig,
}

impl Default for AdversarySection {
    fn default() -> Self {
        AdversarySection {
            wiring: AdvWiring::Paper,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Self-feedback iterations `T`.
    pub iterations: usize,
    /// Threshold the fed-back mask at 0.5 instead of passing probabilities.
    pub hard_reprompt: bool,
    /// Scenes per evaluation work item.
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iterations: 1,
            hard_reprompt: false,
            chunk: 20,
        }
    }
}

/// Full run configuration, one TOML table per section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub phase1: Phase1Section,
    pub phase2: Phase2Section,
    pub losses: LossWeights,
    pub club: ClubSection,
    pub adversary: AdversarySection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            phase1: Phase1Section::default(),
            phase2: Phase2Section::default(),
            losses: LossWeights::default(),
            club: ClubSection::default(),
            adversary: AdversarySection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in a TOML tree, creating tables on the way.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, or the file at `path`, plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn club_config(&self) -> ClubConfig {
        ClubConfig {
            k: self.club.k,
            q_steps: self.club.q_steps,
            lambda: self.losses.lambda_club,
            lr: self.club.lr,
            hidden: self.club.hidden,
            mixtures: self.club.mixtures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generation.validate()?;
        self.losses.validate()?;
        self.club_config().validate()?;
        let (h, w) = (self.data.generation.height, self.data.generation.width);
        if h != w || h % PATCH != 0 {
            return Err(Error::Config(format!("images must be square with a side divisible by {PATCH}, got {h}x{w}")));
        }
        if self.model.hidden == 0 || self.model.blocks == 0 {
            return Err(Error::Config("model.hidden and model.blocks must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.model.fixed_gate) {
            return Err(Error::Config("model.fixed_gate must lie in [0, 1]".into()));
        }
        self.phase1.validate()?;
        self.phase2.validate()?;
        if self.data.eval_scenes == 0 || self.data.eval_scenes >= self.data.scenes {
            return Err(Error::Config(format!(
                "data.eval_scenes must lie in 1..{}, got {}",
                self.data.scenes, self.data.eval_scenes
            )));
        }
        if self.eval.chunk == 0 {
            return Err(Error::Config("eval.chunk must be >= 1".into()));
        }
        Ok(())
    }
}
