//! The full, serializable description of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::HrConfig;
use crate::codec::{CodecConfig, CodecSpec, CodecTrainOptions};
use crate::data::ClipSpec;
use crate::distill::DistillConfig;
use crate::dit::DiTConfig;
use crate::error::{ensure, Error, Result};
use crate::flow::SamplerConfig;
use crate::nn::AdamConfig;
use crate::train::{LrSchedule, TrainConfig};

/// Which clips a run trains and evaluates on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Base (low-resolution) clip shape.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial factor between high- and low-resolution clips.
    pub hr_factor: usize,
    pub first_seed: u64,
    pub train_videos: usize,
    pub train_images: usize,
    /// Video:image sampling ratio.
    pub ratio: (u32, u32),
    pub heldout_seed: u64,
    pub heldout_videos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            hr_factor: 2,
            first_seed: 0,
            train_videos: 128,
            train_images: 64,
            ratio: (2, 1),
            heldout_seed: 100_000,
            heldout_videos: 32,
        }
    }
}

impl DataConfig {
    pub fn template(&self) -> ClipSpec {
        ClipSpec::new(self.first_seed, self.frames, self.height, self.width)
    }

    pub fn hr_template(&self) -> ClipSpec {
        self.template()
            .with_size(self.height * self.hr_factor, self.width * self.hr_factor)
    }

    pub fn video_seeds(&self) -> Vec<u64> {
        (0..self.train_videos as u64).map(|i| self.first_seed + i).collect()
    }

    /// Image seeds follow the video seeds.
    pub fn image_seeds(&self) -> Vec<u64> {
        let start = self.first_seed + self.train_videos as u64;
        (0..self.train_images as u64).map(|i| start + i).collect()
    }

    pub fn heldout_seeds(&self) -> Vec<u64> {
        (0..self.heldout_videos as u64).map(|i| self.heldout_seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frames > 0 && self.height > 0 && self.width > 0,
            Config,
            "clip shape must be non-empty"
        );
        ensure!(self.hr_factor >= 1, Config, "hr_factor must be at least 1");
        ensure!(self.train_videos > 0, Config, "need at least one training video");
        Ok(())
    }
}

/// Codec architecture plus how to train it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecRunConfig {
    pub spec: CodecSpec,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Clips drawn (by seed) for codec training.
    pub train_clips: usize,
}

impl CodecRunConfig {
    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            spec: self.spec,
            hidden: self.hidden,
        }
    }

    pub fn options(&self, seed: u64) -> CodecTrainOptions {
        let d = CodecTrainOptions::default();
        CodecTrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            optim: AdamConfig { lr: self.lr, ..d.optim },
            seed,
        }
    }
}

/// One phase of progressive high-resolution training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrPhase {
    pub frames: usize,
    pub steps: usize,
}

/// Paired-seed ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Steps of every distillation / fine-tuning arm.
    pub distill_steps: usize,
    /// Steps of every high-resolution arm.
    pub hr_steps: usize,
    /// Timesteps of the held-out loss grid.
    pub eval_timesteps: usize,
    pub cka_timesteps: Vec<f64>,
    /// Held-out clips used for CKA and probe reconstructions.
    pub probes: usize,
    /// Restart point of probe reconstructions.
    pub probe_t: f64,
    pub multires_factors: Vec<f64>,
    pub multires_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            distill_steps: 2000,
            hr_steps: 1500,
            eval_timesteps: 8,
            cka_timesteps: vec![0.2, 0.5, 0.8],
            probes: 8,
            probe_t: 0.6,
            multires_factors: vec![1.0, 1.5, 2.0],
            multires_samples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub student_codec: CodecRunConfig,
    pub teacher_codec: CodecRunConfig,
    /// Low-resolution student (also the base of the high-resolution model).
    pub student: DiTConfig,
    pub teacher: DiTConfig,
    pub lr_train: TrainConfig,
    pub teacher_train: TrainConfig,
    pub distill: DistillConfig,
    pub hr: HrConfig,
    pub hr_phases: Vec<HrPhase>,
    pub sampler: SamplerConfig,
    pub experiments: ExperimentConfig,
}

fn desk_train(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        optim: AdamConfig::with_lr(lr),
        lr_schedule: LrSchedule::Cosine { final_frac: 0.1 },
        ..TrainConfig::default()
    }
}

fn desk_dit(latent_channels: usize, patch: usize) -> DiTConfig {
    DiTConfig {
        depth: 4,
        dim: 32,
        heads: 2,
        latent_channels,
        patch,
        tap_indices: vec![0, 1, 2, 3],
        ..DiTConfig::default()
    }
}

impl Default for RunConfig {
    /// Desk scale: 8×32×32 base clips, 8×64×64 high-resolution clips,
    /// depth-4 width-32 transformers.
    fn default() -> Self {
        let student_codec = CodecRunConfig {
            spec: CodecSpec::student_desk(),
            hidden: 64,
            steps: 5000,
            batch_size: 4,
            lr: 2e-3,
            train_clips: 512,
        };
        let teacher_codec = CodecRunConfig {
            spec: CodecSpec::teacher_desk(),
            hidden: 64,
            steps: 3000,
            batch_size: 4,
            lr: 2e-3,
            train_clips: 64,
        };
        let mut distill = DistillConfig {
            train: desk_train(2000, 1e-3),
            projector_hidden: 32,
            ..DistillConfig::default()
        };
        distill.train.lr_schedule = LrSchedule::Constant;
        let mut hr = HrConfig {
            train: desk_train(1500, 1e-3),
            ..HrConfig::default()
        };
        hr.train.lr_schedule = LrSchedule::Constant;
        hr.taps = vec![0, 1, 2, 3];
        Self {
            seed: 0,
            data: DataConfig::default(),
            student: desk_dit(student_codec.spec.channels, 1),
            teacher: desk_dit(teacher_codec.spec.channels, 2),
            student_codec,
            teacher_codec,
            lr_train: desk_train(1500, 2e-3),
            teacher_train: desk_train(3000, 2e-3),
            distill,
            hr,
            hr_phases: vec![HrPhase { frames: 8, steps: 1500 }],
            sampler: SamplerConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` over the defaults: sections left out, or keys left
    /// out of a section, keep their [`RunConfig::default`] values. Unknown
    /// keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut merged = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, &over);
        let cfg: Self = merged
            .try_into()
            .map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let back = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        check_known(&over, &back, "")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config not serializable: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Sets every training seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.lr_train.seed = seed;
        self.teacher_train.seed = seed;
        self.distill.train.seed = seed;
        self.hr.train.seed = seed;
    }

    pub fn hr_size(&self) -> (usize, usize) {
        (
            self.data.height * self.data.hr_factor,
            self.data.width * self.data.hr_factor,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        for c in [&self.student_codec, &self.teacher_codec] {
            c.spec.validate()?;
            c.spec
                .latent_dims([self.data.frames, self.data.height, self.data.width])?;
        }
        let (h, w) = self.hr_size();
        self.student_codec.spec.latent_dims([self.data.frames, h, w])?;
        self.student.validate()?;
        self.teacher.validate()?;
        ensure!(
            self.student.latent_channels == self.student_codec.spec.channels,
            Config,
            "student DiT expects {} latent channels, codec produces {}",
            self.student.latent_channels,
            self.student_codec.spec.channels
        );
        ensure!(
            self.teacher.latent_channels == self.teacher_codec.spec.channels,
            Config,
            "teacher DiT expects {} latent channels, codec produces {}",
            self.teacher.latent_channels,
            self.teacher_codec.spec.channels
        );
        self.lr_train.validate()?;
        self.teacher_train.validate()?;
        self.distill.validate()?;
        self.hr.validate()?;
        for &i in &self.hr.taps {
            ensure!(
                self.student.tappable().contains(&i),
                Config,
                "guidance block {i} is not tappable in the student (taps {:?})",
                self.student.tappable()
            );
        }
        ensure!(
            !self.hr_phases.is_empty(),
            Config,
            "hr_phases must list at least one phase"
        );
        for p in &self.hr_phases {
            self.student_codec.spec.latent_dims([p.frames, h, w])?;
        }
        ensure!(self.sampler.steps >= 1, Config, "sampler needs at least one step");
        ensure!(
            !self.experiments.seeds.is_empty(),
            Config,
            "experiments need at least one seed"
        );
        Ok(())
    }
}

/// Overlays `over` onto `base` table by table. A table naming a different
/// enum variant (`kind` / `mode`) replaces the base table whole.
fn merge(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            let switches = ["kind", "mode"]
                .iter()
                .any(|k| matches!((b.get(*k), o.get(*k)), (Some(x), Some(y)) if x != y));
            if switches {
                *b = o.clone();
                return;
            }
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn check_known(over: &toml::Value, parsed: &toml::Value, prefix: &str) -> Result<()> {
    if let (toml::Value::Table(o), toml::Value::Table(p)) = (over, parsed) {
        for (k, v) in o {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match p.get(k) {
                Some(pv) => check_known(v, pv, &path)?,
                None => return Err(Error::Config(format!("unknown key `{path}`"))),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{GuidanceArm, GuidanceTiming};
    use crate::distill::TimestepStrategy;

    #[test]
    fn default_validates_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn enums_survive_toml() {
        let mut c = RunConfig::default();
        c.distill.strategy = TimestepStrategy::Fixed { tau: 0.1 };
        c.hr.arm = GuidanceArm::Feature {
            timing: GuidanceTiming::FollowHr,
        };
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_toml("seed = 4\n[distill.strategy]\nmode = \"fixed\"\ntau = 0.2\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.distill.strategy, TimestepStrategy::Fixed { tau: 0.2 });
        assert_eq!(partial.data, DataConfig::default());
        // Partial sections keep the run defaults, not the section's own.
        let partial = RunConfig::from_toml("[distill]\nlambda_dis = 0.5\n[hr.arm]\nkind = \"unguided\"\n").unwrap();
        let mut want = RunConfig::default();
        want.distill.lambda_dis = 0.5;
        want.hr.arm = GuidanceArm::Unguided;
        assert_eq!(partial, want);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut c = RunConfig::default();
        c.student.latent_channels = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.data.frames = 6;
        assert!(matches!(c.validate(), Err(Error::Dimension(_))));
        let mut c = RunConfig::default();
        c.hr.taps = vec![7];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
        let e = RunConfig::from_toml("[distill]\nlamda_dis = 0.5\n").unwrap_err();
        assert!(e.to_string().contains("distill.lamda_dis"), "{e}");
    }

    #[test]
    fn seeds_partition() {
        let d = DataConfig::default();
        let v = d.video_seeds();
        let i = d.image_seeds();
        assert!(v.iter().all(|s| !i.contains(s)));
        assert!(d.heldout_seeds().iter().all(|s| !v.contains(s) && !i.contains(s)));
    }
}
