//! Encoded training sets, mixed video/image batch drawing, and the plain
//! diffusion training loop shared by the LR model and the baselines.
//!
//! All randomness of step `k` comes from streams keyed on `(seed, k)`, and
//! parameters plus optimizer moments live on the `f32` grid, so a run
//! restored from a checkpoint replays exactly the steps an uninterrupted
//! run would have taken.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Manifest;
use crate::codec::Codec;
use crate::data::{make_mixed_batch, ClipSpec, MixedSample, VideoTensor};
use crate::dit::{DiT, NoHook};
use crate::error::{ensure, Error, Result};
use crate::flow::{diffusion_loss_graph, LossInputs, NoiseSchedule, PredictionMode, TimestepSampler};
use crate::nn::{grad_norm, Adam, AdamConfig};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Clips, still images and their condition classes.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub videos: Vec<VideoTensor>,
    pub video_classes: Vec<usize>,
    pub images: Vec<VideoTensor>,
    pub image_classes: Vec<usize>,
    /// Video:image sampling ratio.
    pub ratio: (u32, u32),
}

impl TrainingSet {
    /// Videos from `video_seeds`, single-frame images from `image_seeds`,
    /// all shaped like `template`.
    pub fn generate(template: &ClipSpec, video_seeds: &[u64], image_seeds: &[u64], ratio: (u32, u32)) -> Result<Self> {
        let mk = |seed: u64, frames: usize| {
            let mut s = ClipSpec::new(seed, frames, template.height, template.width);
            s.motion_amplitude = template.motion_amplitude;
            s
        };
        let mut set = Self {
            videos: Vec::new(),
            video_classes: Vec::new(),
            images: Vec::new(),
            image_classes: Vec::new(),
            ratio,
        };
        for &seed in video_seeds {
            let spec = mk(seed, template.n_frames);
            set.videos.push(crate::data::generate_clip(&spec)?);
            set.video_classes.push(spec.class());
        }
        for &seed in image_seeds {
            let spec = mk(seed, 1);
            set.images.push(crate::data::generate_clip(&spec)?);
            set.image_classes.push(spec.class());
        }
        if set.images.is_empty() {
            set.ratio.1 = 0;
        }
        Ok(set)
    }

    /// Draws the samples of training step `step`.
    pub fn draw(&self, seed: u64, step: u64, batch_size: usize) -> Result<Vec<SampleRef>> {
        let mut r = rng::stream(seed, step, Purpose::Batch);
        let drawn = make_mixed_batch(
            &self.videos,
            &self.images,
            self.ratio.0,
            self.ratio.1,
            batch_size,
            &mut r,
        )?;
        Ok(drawn.iter().map(SampleRef::from).collect())
    }

    /// The clip a sample refers to, images expanded to `frames` identical frames.
    pub fn clip(&self, s: SampleRef, frames: usize) -> VideoTensor {
        if s.is_image {
            self.images[s.index].repeat_frames(frames)
        } else {
            self.videos[s.index].clone()
        }
    }

    pub fn class(&self, s: SampleRef) -> usize {
        if s.is_image {
            self.image_classes[s.index]
        } else {
            self.video_classes[s.index]
        }
    }

    pub fn frames(&self) -> usize {
        self.videos.first().map(|v| v.frames()).unwrap_or(1)
    }

    /// Encodes every sample once with `codec`.
    pub fn encode(&self, codec: &Codec) -> Result<EncodedSet> {
        let frames = self.frames();
        let enc = |clip: &VideoTensor| codec.encode(clip).map(|l| l.data);
        Ok(EncodedSet {
            videos: self.videos.iter().map(enc).collect::<Result<_>>()?,
            images: self
                .images
                .iter()
                .map(|c| enc(&c.repeat_frames(frames)))
                .collect::<Result<_>>()?,
            video_classes: self.video_classes.clone(),
            image_classes: self.image_classes.clone(),
        })
    }

    /// SHA-256 over the clips of the first batch; equal across arms that
    /// consume the same data order.
    pub fn batch_checksum(&self, seed: u64, step: u64, batch_size: usize) -> Result<String> {
        let refs = self.draw(seed, step, batch_size)?;
        let frames = self.frames();
        let parts: Vec<Tensor> = refs.iter().map(|&r| self.clip(r, frames).into_tensor()).collect();
        Ok(Tensor::cat0(&parts.iter().collect::<Vec<_>>()).checksum())
    }
}

/// Which sample of a [`TrainingSet`] a batch slot holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub is_image: bool,
    pub index: usize,
}

impl From<&MixedSample> for SampleRef {
    fn from(m: &MixedSample) -> Self {
        Self {
            is_image: m.is_image,
            index: m.index,
        }
    }
}

/// Latents of a [`TrainingSet`] under one codec.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub videos: Vec<Tensor>,
    pub images: Vec<Tensor>,
    pub video_classes: Vec<usize>,
    pub image_classes: Vec<usize>,
}

impl EncodedSet {
    pub fn get(&self, s: SampleRef) -> (&Tensor, usize) {
        if s.is_image {
            (&self.images[s.index], self.image_classes[s.index])
        } else {
            (&self.videos[s.index], self.video_classes[s.index])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub timesteps: TimestepSampler,
    pub schedule: NoiseSchedule,
    pub mode: PredictionMode,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

/// Learning-rate shape over `steps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `final_frac` of it.
    Cosine { final_frac: f64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64, steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_frac } => {
                let x = (step as f64 / steps.max(1) as f64).min(1.0);
                final_frac + (1.0 - final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            optim: AdamConfig::default(),
            timesteps: TimestepSampler::default(),
            schedule: NoiseSchedule::Linear,
            mode: PredictionMode::Epsilon,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.optim.lr > 0.0, Config, "learning rate must be positive");
        self.timesteps.validate()?;
        self.schedule.validate()
    }
}

/// Noise levels and noise of one sample in step `step`.
pub struct SampleNoise {
    pub t: f64,
    pub eps: Tensor,
}

/// Draws `(t, ε)` for each of `shapes`, in order, from the step's streams.
pub fn draw_noise(seed: u64, step: u64, sampler: &TimestepSampler, shapes: &[&[usize]]) -> Vec<SampleNoise> {
    let mut rt = rng::stream(seed, step, Purpose::Timestep);
    let mut rn = rng::stream(seed, step, Purpose::Noise);
    shapes
        .iter()
        .map(|s| SampleNoise {
            t: sampler.sample(&mut rt),
            eps: Tensor::randn(s.to_vec(), 1.0, &mut rn),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub ts: Vec<f64>,
}

/// A model, its optimizer and the number of steps taken.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DiT,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: DiT, optim: AdamConfig) -> Self {
        let adam = Adam::new(optim, &model.params);
        Self { model, adam, step: 0 }
    }

    pub fn save(&self, dir: &Path, seed: u64, metrics: &[(&str, f64)]) -> Result<()> {
        self.model.save(dir, self.step, seed, Some(&self.adam), metrics)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let (model, adam, manifest) = DiT::load(dir)?;
        let adam = adam.ok_or_else(|| {
            Error::format(
                dir.join(crate::checkpoint::MANIFEST),
                "checkpoint has no optimizer state",
            )
        })?;
        Ok((
            Self {
                model,
                adam,
                step: manifest.step,
            },
            manifest,
        ))
    }
}

/// Gradients of the plain diffusion objective on the batch of `step`,
/// with the step's record.
pub fn diffusion_grads(
    model: &DiT,
    data: &TrainingSet,
    latents: &EncodedSet,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Vec<Tensor>, DiffusionRecord)> {
    let refs = data.draw(cfg.seed, step, cfg.batch_size)?;
    let items: Vec<(&Tensor, usize)> = refs.iter().map(|&r| latents.get(r)).collect();
    let shapes: Vec<&[usize]> = items.iter().map(|(z, _)| z.shape()).collect();
    let noise = draw_noise(cfg.seed, step, &cfg.timesteps, &shapes);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let mut total = None;
    for ((z, class), n) in items.iter().zip(&noise) {
        let inputs = LossInputs {
            z,
            eps: &n.eps,
            t: n.t,
            class: *class,
            schedule: cfg.schedule,
            mode: cfg.mode,
        };
        let (l, _) = diffusion_loss_graph(&mut g, model, &p, &inputs, &[], &mut NoHook).map_err(|e| fail(step, e))?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let loss = g.scale(total.expect("batch is non-empty"), 1.0 / items.len() as f64);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::TrainingFailure {
            step: step as usize,
            reason: format!("diffusion loss became {value}"),
        });
    }
    let grads = p.grads(&g.backward(loss), &model.params);
    let record = DiffusionRecord {
        step,
        loss: value,
        grad_norm: grad_norm(&grads),
        ts: noise.iter().map(|n| n.t).collect(),
    };
    Ok((grads, record))
}

/// One optimizer step of the plain diffusion objective.
pub fn diffusion_step(
    state: &mut TrainState,
    data: &TrainingSet,
    latents: &EncodedSet,
    cfg: &TrainConfig,
) -> Result<DiffusionRecord> {
    let (grads, record) = diffusion_grads(&state.model, data, latents, cfg, state.step)?;
    state.adam.config.lr = cfg.optim.lr * cfg.lr_schedule.factor(state.step, cfg.steps);
    state.adam.step(&mut state.model.params, &grads);
    state.step += 1;
    Ok(record)
}

pub(crate) fn fail(step: u64, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::TrainingFailure {
            step: step as usize,
            reason,
        },
        other => other,
    }
}

/// Runs `steps` diffusion steps, reporting each record.
pub fn train_diffusion(
    state: &mut TrainState,
    data: &TrainingSet,
    latents: &EncodedSet,
    cfg: &TrainConfig,
    steps: usize,
    on_record: &mut dyn FnMut(&DiffusionRecord),
) -> Result<()> {
    cfg.validate()?;
    for _ in 0..steps {
        let rec = diffusion_step(state, data, latents, cfg)?;
        on_record(&rec);
    }
    Ok(())
}

/// Mean diffusion loss over a fixed evaluation grid: every latent at each
/// of `ts`, with noise from `seed` (independent of training streams).
pub fn heldout_loss(model: &DiT, latents: &[(Tensor, usize)], ts: &[f64], seed: u64, cfg: &TrainConfig) -> Result<f64> {
    let mut r = rng::stream(seed, 0, Purpose::Eval);
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, class) in latents {
        for &t in ts {
            let eps = Tensor::randn(z.shape().to_vec(), 1.0, &mut r);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, false);
            let inputs = LossInputs {
                z,
                eps: &eps,
                t,
                class: *class,
                schedule: cfg.schedule,
                mode: cfg.mode,
            };
            let (l, _) = diffusion_loss_graph(&mut g, model, &p, &inputs, &[], &mut NoHook)?;
            total += g.value(l).item();
            count += 1;
        }
    }
    ensure!(count > 0, InsufficientData, "no held-out latents");
    Ok(total / count as f64)
}

/// Evenly spaced evaluation timesteps in `(0, 1)`.
pub fn eval_timesteps(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Picks a random class for unconditional-style sampling.
pub fn random_class<R: Rng + ?Sized>(rng: &mut R, num_classes: usize) -> usize {
    rng.random_range(0..num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, CodecRole, CodecSpec};
    use crate::dit::DiTConfig;

    fn setup() -> (TrainingSet, EncodedSet, DiT) {
        let template = ClipSpec::new(0, 4, 16, 16);
        let data = TrainingSet::generate(&template, &[0, 1, 2], &[10, 11], (2, 1)).unwrap();
        let spec = CodecSpec::new(8, 4, 4, CodecRole::Student).unwrap();
        let codec = Codec::new(CodecConfig { spec, hidden: 8 }, &mut rng::seeded(0)).unwrap();
        let enc = data.encode(&codec).unwrap();
        let cfg = DiTConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            latent_channels: 4,
            tap_indices: vec![0],
            ..Default::default()
        };
        (data, enc, DiT::new(cfg, &mut rng::seeded(1)).unwrap())
    }

    #[test]
    fn images_become_static_clips_of_video_length() {
        let (data, enc, _) = setup();
        assert_eq!(enc.images[0].shape(), enc.videos[0].shape());
        let c = data.clip(
            SampleRef {
                is_image: true,
                index: 0,
            },
            4,
        );
        assert_eq!(c.frames(), 4);
        assert!(c.frame(0).bitwise_eq(&c.frame(3)));
    }

    #[test]
    fn resume_replays_the_same_losses() {
        let (data, enc, model) = setup();
        let cfg = TrainConfig {
            optim: AdamConfig::with_lr(1e-3),
            batch_size: 2,
            ..Default::default()
        };
        let mut full = TrainState::new(model.clone(), cfg.optim);
        let mut losses = Vec::new();
        train_diffusion(&mut full, &data, &enc, &cfg, 10, &mut |r| losses.push(r.loss)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = TrainState::new(model, cfg.optim);
        let mut resumed = Vec::new();
        train_diffusion(&mut first, &data, &enc, &cfg, 4, &mut |r| resumed.push(r.loss)).unwrap();
        first.save(dir.path(), cfg.seed, &[]).unwrap();
        let (mut second, _) = TrainState::load(dir.path()).unwrap();
        assert_eq!(second.step, 4);
        train_diffusion(&mut second, &data, &enc, &cfg, 6, &mut |r| resumed.push(r.loss)).unwrap();
        assert_eq!(losses, resumed);
        assert_eq!(full.model.params.checksum(), second.model.params.checksum());
    }

    #[test]
    fn batch_checksums_depend_only_on_seed_and_step() {
        let (data, _, _) = setup();
        assert_eq!(
            data.batch_checksum(3, 0, 4).unwrap(),
            data.batch_checksum(3, 0, 4).unwrap()
        );
        assert_ne!(
            data.batch_checksum(3, 0, 4).unwrap(),
            data.batch_checksum(3, 1, 4).unwrap()
        );
    }

    #[test]
    fn heldout_loss_is_deterministic() {
        let (_, enc, model) = setup();
        let lat: Vec<(Tensor, usize)> = enc.videos.iter().cloned().zip(enc.video_classes.clone()).collect();
        let cfg = TrainConfig::default();
        let a = heldout_loss(&model, &lat, &eval_timesteps(4), 1, &cfg).unwrap();
        let b = heldout_loss(&model, &lat, &eval_timesteps(4), 1, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((0.5..2.0).contains(&a));
    }
}
