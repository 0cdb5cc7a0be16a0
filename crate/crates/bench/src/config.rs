//! Run configuration: one TOML document covering every module.
//!
//! All keys are required and unknown keys are rejected, so a config file
//! plus the master seed fully determines a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gda_core::guidance::{GuidanceConfig, LossWeights};
use gda_core::nets::{ClassifierArch, DenoiserArch, EncoderArch, FeatureTap, TrainConfig};
use gda_core::sampler::{SamplerMode, SamplerPlan, StepSpacing};
use gda_core::schedule::NoiseSchedule;
use gda_core::shiftgen::{ShiftFamily, ShiftSpec, SourceSpec};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub diffusion: DiffusionSection,
    pub nets: NetsSection,
    pub guidance: GuidanceSection,
    /// Named loss-weight blocks; `guidance.preset` selects one.
    pub presets: BTreeMap<String, WeightBlock>,
    pub plan: PlanSection,
    pub shift: ShiftSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub total_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub deterministic: bool,
    /// Forward-diffusion depth `t*` adaptation starts from.
    pub start_step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapName {
    DenoiserEncoder2,
    ClassifierConv1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetsSection {
    pub denoiser_channels: usize,
    pub time_dim: usize,
    pub classifier_width: usize,
    pub classifier_hidden: usize,
    pub encoder_width: usize,
    pub embed_dim: usize,
    pub feature_tap: TapName,
    pub denoiser_train: TrainSection,
    pub classifier_train: TrainSection,
    pub encoder_train: TrainSection,
    /// Shifted training samples for the encoder, per source sample.
    pub encoder_shifted_fraction: f64,
    /// Probability that a classifier training item is replaced by an
    /// augmented view.
    pub classifier_augment: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightBlock {
    pub lambda_marginal: f64,
    pub lambda_style: f64,
    pub lambda_content: f64,
}

impl From<WeightBlock> for LossWeights {
    fn from(b: WeightBlock) -> Self {
        LossWeights {
            marginal: b.lambda_marginal,
            style: b.lambda_style,
            content: b.lambda_content,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub preset: String,
    pub aug_count: usize,
    pub temperature: f64,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub negatives_per_patch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Ddpm,
    Ddim,
}

/// Either a fixed guidance scale or a target for the first guided update
/// as a fraction of the iterate norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleSetting {
    Fixed(f64),
    Calibrate(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub stride: usize,
    pub mode: ModeName,
    pub guidance_scale: ScaleSetting,
    pub clamp: (f32, f32),
    pub redraw_per_step: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter_px: f64,
    pub scale_range: (f64, f64),
    pub texture_amplitude: f64,
    pub families: Vec<String>,
    pub severity: u8,
    pub n_per_shift: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub dda_scale_factor: usize,
    pub dda_ensemble: bool,
    pub diffpure_t_star: usize,
    pub step_sweep: Vec<usize>,
    pub aug_sweep: Vec<usize>,
    /// Samples per shift family used by the sweeps (a prefix of the benchmark).
    pub sweep_per_shift: usize,
    pub entropy_bins: usize,
    pub calibration_samples: usize,
    pub timing_samples: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        self.schedule()?;
        self.source_spec(1).validate().map_err(|e| BenchError::Config(e.to_string()))?;
        if !self.presets.contains_key(&self.guidance.preset) {
            return bad(format!("unknown preset {:?}", self.guidance.preset));
        }
        self.shifts()?;
        self.plan(0.0).transitions(&self.schedule()?).map_err(|e| BenchError::Config(e.to_string()))?;
        let b = &self.bench;
        if b.diffpure_t_star == 0 || b.diffpure_t_star > self.diffusion.total_steps {
            return bad(format!("diffpure_t_star {} outside 1..=T", b.diffpure_t_star));
        }
        if b.step_sweep.is_empty() || b.aug_sweep.is_empty() {
            return bad("sweeps must be nonempty".into());
        }
        if b.step_sweep.iter().any(|&n| n == 0 || n > self.diffusion.start_step) {
            return bad("step_sweep entries must be in 1..=start_step".into());
        }
        if b.sweep_per_shift == 0 || b.sweep_per_shift > self.shift.n_per_shift {
            return bad("sweep_per_shift must be in 1..=n_per_shift".into());
        }
        if self.shift.n_per_shift > self.shift.test_per_class * 4 {
            return bad("n_per_shift exceeds the clean test set".into());
        }
        if b.entropy_bins == 0 || b.calibration_samples == 0 || b.timing_samples == 0 {
            return bad("entropy_bins, calibration_samples and timing_samples must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.nets.classifier_augment) {
            return bad("classifier_augment must be in [0, 1]".into());
        }
        if !(0.0..=4.0).contains(&self.nets.encoder_shifted_fraction) {
            return bad("encoder_shifted_fraction must be in [0, 4]".into());
        }
        for t in [&self.nets.denoiser_train, &self.nets.classifier_train, &self.nets.encoder_train] {
            if t.epochs == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0) {
                return bad("training epochs, batch_size and learning_rate must be positive".into());
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        NoiseSchedule::linear(d.total_steps, d.beta_min, d.beta_max, d.deterministic)
            .map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn source_spec(&self, per_class: usize) -> SourceSpec {
        SourceSpec {
            jitter_px: self.shift.jitter_px,
            scale_range: self.shift.scale_range,
            texture_amplitude: self.shift.texture_amplitude,
            samples_per_class: per_class,
            ..SourceSpec::default()
        }
    }

    pub fn shifts(&self) -> Result<Vec<ShiftSpec>> {
        if self.shift.families.is_empty() {
            return Err(BenchError::Config("shift.families is empty".into()));
        }
        self.shift
            .families
            .iter()
            .map(|name| {
                let family: ShiftFamily = name.parse().map_err(|e| BenchError::Config(format!("{e}")))?;
                ShiftSpec::new(family, self.shift.severity).map_err(|e| BenchError::Config(e.to_string()))
            })
            .collect()
    }

    pub fn weights(&self) -> LossWeights {
        self.presets[&self.guidance.preset].into()
    }

    pub fn guidance(&self, prototype: Vec<f32>) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            aug_count: g.aug_count,
            temperature: g.temperature,
            patch_grid: (g.patch_rows, g.patch_cols),
            negatives_per_patch: g.negatives_per_patch,
            ..GuidanceConfig::new(self.weights(), prototype)
        }
    }

    pub fn plan(&self, guidance_scale: f64) -> SamplerPlan {
        let p = &self.plan;
        SamplerPlan {
            start_step: self.diffusion.start_step,
            spacing: StepSpacing::Stride(p.stride),
            mode: match p.mode {
                ModeName::Ddpm => SamplerMode::Ddpm,
                ModeName::Ddim => SamplerMode::Ddim,
            },
            guidance_scale,
            clamp: Some(p.clamp),
            redraw_per_step: p.redraw_per_step,
        }
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch {
            channels: self.nets.denoiser_channels,
            time_dim: self.nets.time_dim,
            total_steps: self.diffusion.total_steps,
            ..DenoiserArch::default()
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch {
            width: self.nets.classifier_width,
            hidden: self.nets.classifier_hidden,
            ..ClassifierArch::default()
        }
    }

    pub fn encoder_arch(&self) -> EncoderArch {
        EncoderArch {
            width: self.nets.encoder_width,
            embed_dim: self.nets.embed_dim,
            ..EncoderArch::default()
        }
    }

    pub fn tap(&self) -> FeatureTap {
        match self.nets.feature_tap {
            TapName::DenoiserEncoder2 => FeatureTap::DenoiserEncoder2,
            TapName::ClassifierConv1 => FeatureTap::ClassifierConv1,
        }
    }

    /// Training seeds are derived from the master seed so `--seed` moves
    /// every stage together.
    pub fn train_config(&self, section: TrainSection, salt: u64) -> TrainConfig {
        TrainConfig {
            epochs: section.epochs,
            batch_size: section.batch_size,
            learning_rate: section.learning_rate,
            seed: self.master_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt,
        }
    }
}
