use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::surgery::FreezePolicy;
use crate::acoustic::AcousticConfig;
use crate::error::{Error, Result};
use crate::optim::AdamSettings;

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const FINETUNE_LR: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    EnglishPretrain,
    SyntheticPretrain,
    TargetFinetune,
}

impl StageId {
    pub fn as_str(self) -> &'static str {
        match self {
            StageId::EnglishPretrain => "english_pretrain",
            StageId::SyntheticPretrain => "synthetic_pretrain",
            StageId::TargetFinetune => "target_finetune",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            StageId::EnglishPretrain | StageId::SyntheticPretrain => PRETRAIN_LR,
            StageId::TargetFinetune => FINETUNE_LR,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surgery {
    #[default]
    None,
    ResetEmbedding,
}

/// Halt when the mean loss over the last `window` steps improves on the
/// window before it by less than `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub window: usize,
    pub min_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    pub max_steps: usize,
    #[serde(default)]
    pub plateau: Option<Plateau>,
    /// The report flags non-convergence when the final loss stays at or above this.
    #[serde(default)]
    pub converged_below: Option<f64>,
}

/// Model size: a named preset or an explicit configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Config(Box<AcousticConfig>),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("shrunken".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<AcousticConfig> {
        let cfg = match self {
            ModelSpec::Preset(p) if p == "shrunken" => AcousticConfig::shrunken(),
            ModelSpec::Preset(p) if p == "full" => AcousticConfig::default(),
            ModelSpec::Preset(p) => return Err(Error::Plan(format!("unknown model preset {p:?} (shrunken|full)"))),
            ModelSpec::Config(c) => (**c).clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training stage. Relative paths resolve against the plan file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub schema_version: u32,
    pub stage: StageId,
    pub manifest: PathBuf,
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub output: PathBuf,
    /// Defaults to the output path with a `.report.json` extension.
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub surgery: Surgery,
    #[serde(default)]
    pub freeze: FreezePolicy,
    /// Defaults to Adam with the stage's learning rate.
    #[serde(default)]
    pub optimizer: Option<AdamSettings>,
    pub stop: StopRule,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Steps between intermediate checkpoints; `None` writes only the final archive.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
    /// Only used when the stage starts without an init archive.
    #[serde(default)]
    pub model: ModelSpec,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl StagePlan {
    pub fn new(stage: StageId, manifest: impl Into<PathBuf>, output: impl Into<PathBuf>, max_steps: usize, seed: u64) -> Self {
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            stage,
            manifest: manifest.into(),
            init: None,
            output: output.into(),
            report: None,
            surgery: Surgery::None,
            freeze: FreezePolicy::default(),
            optimizer: None,
            stop: StopRule {
                max_steps,
                plateau: None,
                converged_below: None,
            },
            batch_size: DEFAULT_BATCH_SIZE,
            checkpoint_every: None,
            seed,
            model: ModelSpec::default(),
        }
    }

    pub fn optimizer_settings(&self) -> AdamSettings {
        self.optimizer
            .unwrap_or_else(|| AdamSettings::with_lr(self.stage.default_lr()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| {
            let mut name = self.output.file_name().unwrap_or_default().to_os_string();
            name.push(".report.json");
            self.output.with_file_name(name)
        })
    }

    /// Checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Plan(format!("{}: {msg}", self.stage)));
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        match (self.stage, &self.init) {
            (StageId::EnglishPretrain, Some(_)) => return bad("the first pre-training stage takes no init archive".into()),
            (StageId::SyntheticPretrain, None) => return bad("needs an init archive".into()),
            (StageId::TargetFinetune, None) if self.surgery != Surgery::None || !self.freeze.is_empty() => {
                return bad("surgery and freezing need an init archive".into())
            }
            _ => {}
        }
        if self.init.is_none() && self.surgery != Surgery::None {
            return bad("surgery needs an init archive".into());
        }
        if self.stop.max_steps == 0 {
            return bad("stop.max_steps must be positive".into());
        }
        if let Some(p) = self.stop.plateau {
            if p.window == 0 || !(p.min_delta >= 0.0) {
                return bad("plateau window must be positive and min_delta non-negative".into());
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        self.optimizer_settings().validate()?;
        self.model.resolve()?;
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.manifest);
        join(&mut self.output);
        if let Some(p) = self.init.as_mut() {
            join(p);
        }
        if let Some(p) = self.report.as_mut() {
            join(p);
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut plan: StagePlan = serde_json::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.resolve_paths(base);
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            Error::Plan(msg) => Error::Plan(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::path(path, e))
    }

    /// Hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        super::archive::fingerprint_bytes(&json)
    }
}

/// The pre-training strategies compared in the transfer experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Target data only, from scratch.
    COnly,
    /// English pre-training, then full fine-tuning on the target.
    AcFull,
    /// English and synthetic pre-training, then full fine-tuning.
    AbcFull,
    /// English and synthetic pre-training, then decoder-only fine-tuning.
    AbcFrozen,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::COnly, Strategy::AcFull, Strategy::AbcFull, Strategy::AbcFrozen];
}

/// Inputs shared by every plan a strategy expands to.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyInputs {
    pub english: PathBuf,
    pub synthetic: PathBuf,
    pub target: PathBuf,
    pub out_dir: PathBuf,
    pub steps: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelSpec,
}

/// Expands a strategy into chained stage plans. Script changes (English to
/// the target script) get embedding surgery; the synthetic and target
/// corpora share a script, so that transition keeps the embedding.
pub fn strategy_plans(strategy: Strategy, inputs: &StrategyInputs) -> Vec<StagePlan> {
    let out = |name: &str| inputs.out_dir.join(format!("{name}.ttsf"));
    let plan = |stage: StageId, manifest: &Path, output: PathBuf, i: usize| {
        let mut p = StagePlan::new(stage, manifest, output, inputs.steps[i], inputs.seed.wrapping_add(i as u64));
        p.batch_size = inputs.batch_size;
        p.model = inputs.model.clone();
        p
    };
    let a = || plan(StageId::EnglishPretrain, &inputs.english, out("a_english"), 0);
    let b = |init: PathBuf| {
        let mut p = plan(StageId::SyntheticPretrain, &inputs.synthetic, out("b_synthetic"), 1);
        p.init = Some(init);
        p.surgery = Surgery::ResetEmbedding;
        p
    };
    let c = |init: Option<PathBuf>, surgery: Surgery, frozen: bool, name: &str| {
        let mut p = plan(StageId::TargetFinetune, &inputs.target, out(name), 2);
        p.init = init;
        p.surgery = surgery;
        if frozen {
            p.freeze = FreezePolicy::encoder();
        }
        p
    };
    match strategy {
        Strategy::COnly => {
            let mut p = c(None, Surgery::None, false, "c_only");
            p.optimizer = Some(AdamSettings::with_lr(PRETRAIN_LR));
            vec![p]
        }
        Strategy::AcFull => {
            let a = a();
            let init = a.output.clone();
            vec![a, c(Some(init), Surgery::ResetEmbedding, false, "ac_full")]
        }
        Strategy::AbcFull | Strategy::AbcFrozen => {
            let a = a();
            let b = b(a.output.clone());
            let init = b.output.clone();
            let (frozen, name) = if strategy == Strategy::AbcFrozen {
                (true, "abc_frozen")
            } else {
                (false, "abc_full")
            };
            vec![a, b, c(Some(init), Surgery::None, frozen, name)]
        }
    }
}
