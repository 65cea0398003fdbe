//! Run configuration: a TOML file and/or command-line flags, merged and
//! validated before any work starts.

use std::path::{Path, PathBuf};

use anchorgen_core::scheduler::{GuidanceConfig, NoiseSchedule, Sampler};
use anchorgen_core::sgdm::DEFAULT_CONTROL_WEIGHT;
use anchorgen_core::temporal::{SynthesisConfig, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use anchorgen_core::training::{OptimizerKind, Stage, TrainConfig, TrainingPlan};
use anchorgen_core::world::DatasetRecipe;
use anchorgen_core::enhance::{EnhanceConfig, DEFAULT_FEATHER};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,

    pub pretrain_identities: usize,
    pub pretrain_frames: usize,
    pub finetune_frames: usize,
    pub test_sequences: usize,
    pub test_frames: usize,

    pub plan: TrainingPlan,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub face_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub cond_dropout: f64,
    pub perturb_magnitude: f64,

    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub cfg_scale: f32,
    pub w_c: f32,
    pub ws: usize,
    pub os: usize,
    pub feather: f64,
    /// Clamp clean estimates to the image range at every sampling step.
    pub clip_denoised: bool,
    /// Accepted for interface compatibility; every command already runs in
    /// the bit-exact serial mode.
    pub serial: bool,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let recipe = DatasetRecipe::default();
        let pre = TrainConfig::pretrain();
        let sched = NoiseSchedule::default_training();
        Self {
            seed: 0,
            run_dir: PathBuf::from("run"),
            pretrain_identities: recipe.pretrain_identities,
            pretrain_frames: recipe.pretrain_frames,
            finetune_frames: recipe.finetune_frames,
            test_sequences: recipe.test_sequences,
            test_frames: recipe.test_frames,
            plan: TrainingPlan::TwoStage,
            pretrain_steps: pre.steps,
            finetune_steps: TrainConfig::finetune().steps,
            face_steps: TrainConfig::face().steps,
            batch_size: pre.batch_size,
            learning_rate: pre.learning_rate,
            optimizer: pre.optimizer,
            clip_norm: pre.clip_norm,
            cond_dropout: pre.cond_dropout,
            perturb_magnitude: pre.perturb_magnitude,
            train_steps: sched.steps(),
            beta_start: sched.beta_start(),
            beta_end: sched.beta_end(),
            sampler: SamplerKind::Ddim,
            steps: anchorgen_core::scheduler::DEFAULT_INFERENCE_STEPS,
            cfg_scale: anchorgen_core::scheduler::DEFAULT_CFG_SCALE,
            w_c: DEFAULT_CONTROL_WEIGHT,
            ws: DEFAULT_WINDOW,
            os: DEFAULT_OVERLAP,
            feather: DEFAULT_FEATHER,
            clip_denoised: true,
            serial: false,
            data: None,
            checkpoint: None,
            face_checkpoint: None,
            synth_dir: None,
        }
    }
}

/// File locations derived from the run directory and the overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPaths {
    pub world: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub checkpoint: PathBuf,
    pub face_checkpoint: PathBuf,
    pub synth_dir: PathBuf,
    pub eval: PathBuf,
    pub verify: PathBuf,
    pub manifest: PathBuf,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn paths(&self) -> RunPaths {
        let d = &self.run_dir;
        RunPaths {
            world: self.data.clone().unwrap_or_else(|| d.join("data").join("world.json")),
            pretrain_checkpoint: d.join("pretrain.sgdm"),
            checkpoint: self.checkpoint.clone().unwrap_or_else(|| d.join("body.sgdm")),
            face_checkpoint: self.face_checkpoint.clone().unwrap_or_else(|| d.join("face.sgdm")),
            synth_dir: self.synth_dir.clone().unwrap_or_else(|| d.join("synth")),
            eval: self.synth_dir.clone().unwrap_or_else(|| d.join("synth")).join("eval.json"),
            verify: d.join("verify.json"),
            manifest: d.join("manifest.json"),
        }
    }

    pub fn recipe(&self) -> DatasetRecipe {
        DatasetRecipe {
            pretrain_identities: self.pretrain_identities,
            pretrain_frames: self.pretrain_frames,
            finetune_frames: self.finetune_frames,
            test_sequences: self.test_sequences,
            test_frames: self.test_frames,
        }
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end).map_err(|e| bad(e.to_string()))
    }

    pub fn sampler(&self) -> Sampler {
        match self.sampler {
            SamplerKind::Ddim => Sampler::Ddim { steps: self.steps },
            SamplerKind::Ddpm => Sampler::Ddpm,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let steps = match stage {
            Stage::Pretrain => self.pretrain_steps,
            Stage::Finetune => self.finetune_steps,
            Stage::Face => self.face_steps,
        };
        TrainConfig {
            stage,
            steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            cond_dropout: self.cond_dropout,
            perturb_magnitude: if stage == Stage::Pretrain { self.perturb_magnitude } else { 0.0 },
            seed: self.seed,
            optimizer: self.optimizer,
            clip_norm: self.clip_norm,
            w_c: self.w_c,
        }
    }

    pub fn guidance(&self) -> CliResult<GuidanceConfig> {
        GuidanceConfig::new(self.cfg_scale).map_err(|e| bad(e.to_string()))
    }

    pub fn synthesis(&self, seed: u64) -> CliResult<SynthesisConfig> {
        Ok(SynthesisConfig {
            ws: self.ws,
            os: self.os,
            sampler: self.sampler(),
            guidance: self.guidance()?,
            w_c: self.w_c,
            seed,
            first_frame: 0,
            clip_denoised: self.clip_denoised,
        })
    }

    pub fn enhancement(&self, seed: u64) -> CliResult<EnhanceConfig> {
        Ok(EnhanceConfig {
            sampler: self.sampler(),
            guidance: self.guidance()?,
            w_c: self.w_c,
            feather: self.feather,
            seed,
            clip_denoised: self.clip_denoised,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.ws == 0 {
            return Err(bad("ws must be at least 1"));
        }
        if self.os >= self.ws {
            return Err(bad(format!("os ({}) must be smaller than ws ({})", self.os, self.ws)));
        }
        if self.pretrain_identities < 2 {
            return Err(bad("pretraining needs at least two identities"));
        }
        if self.pretrain_frames == 0 || self.finetune_frames == 0 || self.test_sequences == 0 || self.test_frames == 0 {
            return Err(bad("dataset sizes must be positive"));
        }
        for stage in [Stage::Pretrain, Stage::Finetune, Stage::Face] {
            self.train_config(stage).validate().map_err(|e| bad(e.to_string()))?;
        }
        let sched = self.schedule()?;
        self.sampler().timesteps(&sched).map_err(|e| bad(e.to_string()))?;
        self.guidance()?;
        if !self.w_c.is_finite() || !(self.feather >= 0.0) {
            return Err(bad("w-c must be finite and feather non-negative"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flags that override file values; names mirror the config keys.
#[derive(Clone, Debug, Default, Serialize, clap::Args)]
#[serde(rename_all = "kebab-case")]
pub struct Overrides {
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_identities: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_frames: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_frames: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_sequences: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_frames: Option<usize>,
    /// two-stage, scratch-single or joint-all.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_steps: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_steps: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_steps: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// sgd or adam.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond_dropout: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturb_magnitude: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_steps: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    /// ddim or ddpm.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f32>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_c: Option<f32>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ws: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub os: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feather: Option<f64>,
    /// true or false.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_denoised: Option<bool>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub serial: bool,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_dir: Option<PathBuf>,
}

/// Reads the optional config file, applies flag overrides and validates.
pub fn parse_config(file: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| bad(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let flags = toml::Table::try_from(overrides).map_err(|e| bad(e.to_string()))?;
    for (k, v) in flags {
        table.insert(k, v);
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
