//! Pipeline configuration: one TOML file, merged over the defaults, with
//! command-line flags applied last.

use std::fs;
use std::path::{Path, PathBuf};

use guided::eval::ablation::{AblationConfig, Variant};
use guided::eval::benchmark::WorldConfig;
use guided::fgad::FusionConfig;
use guided::llm::ClientConfig;
use guided::model::DetectorConfig;
use guided::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "GUIDED_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "guided-out";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Seeded synthetic encoders configured under `[world.image]`.
    #[default]
    Synthetic,
    /// Precomputed embedding table and feature-map directory.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub backend: Backend,
    pub text_table: Option<PathBuf>,
    pub feature_maps: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParserKind {
    #[default]
    Rules,
    /// Language-model replies replayed from a transcript file.
    Replay,
    /// Language-model replies from an external program (prompt on stdin).
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularySpec {
    /// Class names, one per line.
    pub names: Option<PathBuf>,
    pub parser: ParserKind,
    pub transcript: Option<PathBuf>,
    pub command: Vec<String>,
    pub client: ClientConfig,
    pub lexicon: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub iou_threshold: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variants: Variant::standard_suite().iter().map(Variant::name).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed, copied into the world, the initialization and both
    /// training stages.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub workers: usize,
    pub encoder: EncoderSpec,
    pub vocabulary: VocabularySpec,
    pub model: DetectorConfig,
    /// Fusion weight, fine temperature and pooling, shared with the fine loss.
    pub fusion: FusionConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub world: WorldConfig,
    pub eval: EvalSpec,
    pub ablation: AblationSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            workers: 1,
            encoder: EncoderSpec::default(),
            vocabulary: VocabularySpec::default(),
            model: DetectorConfig::default(),
            fusion: FusionConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            world: WorldConfig::default(),
            eval: EvalSpec::default(),
            ablation: AblationSpec::default(),
        }
    }
}

/// Recursively overlays `top` on `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Parses a config file's text over the defaults. Tables only need the
    /// keys they change, so `[stage2]` with one key keeps the other stage-2
    /// defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let top: toml::Value = toml::from_str(text).map_err(|e| CliError::config(format!("config file: {e}")))?;
        let mut base = toml::Value::try_from(PipelineConfig::default())
            .map_err(|e| CliError::other(format!("default config: {e}")))?;
        merge(&mut base, top);
        base.try_into().map_err(|e| CliError::config(format!("config file: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::other(format!("config echo: {e}")))
    }

    /// Propagates the master seed and the shared scoring settings, then
    /// validates every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.world.seed = self.seed;
        self.model.init_seed = self.seed;
        for stage in [&mut self.stage1, &mut self.stage2] {
            stage.seed = self.seed;
            stage.alpha = self.fusion.alpha;
            stage.m_fine = self.fusion.m_fine;
            stage.pooling = self.fusion.pooling;
        }
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(CliError::config("[stage1] and [stage2] must keep stage = 1 and stage = 2"));
        }
        if self.workers == 0 {
            return Err(CliError::config("workers must be at least 1"));
        }
        self.model.validate()?;
        self.fusion.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.world.validate()?;
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(CliError::config("eval.iou_threshold must lie in [0, 1]"));
        }
        self.variants()?;
        Ok(self)
    }

    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        self.ablation
            .variants
            .iter()
            .map(|v| Variant::parse(v).map_err(CliError::from))
            .collect()
    }

    pub fn ablation(&self) -> Result<AblationConfig, CliError> {
        Ok(AblationConfig {
            world: self.world.clone(),
            seeds: self.ablation.seeds.clone(),
            detector: self.model.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            fusion: self.fusion,
            iou_threshold: self.eval.iou_threshold,
            variants: self.variants()?,
        })
    }

    /// Flag, then config file, then the environment, then `guided-out`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}
