//! Two-stage synthesis: features tapped from a frozen low-resolution model
//! are upsampled and fused into a high-resolution model initialized from it.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Manifest};
use crate::codec::{patchify, unpatchify, Codec, CodecTraffic, LatentTensor};
use crate::data::VideoTensor;
use crate::dit::{chunk_index, DiT, FeatureTensor, ForwardHook};
use crate::error::{ensure, Error, Result};
use crate::flow::{diffusion_loss_graph, noise_latent, sample_from, time_grid, Denoiser, LossInputs, SamplerConfig};
use crate::nn::{grad_norm, Adam, AdamConfig, Bound, Conv3d, Linear, ParamStore};
use crate::resample::{shared_matrix, Kernel};
use crate::rng::{self, Purpose};
use crate::tensor::{update_digest, Tensor};
use crate::train::{draw_noise, fail, EncodedSet, TrainConfig, TrainingSet};

pub const DEFAULT_T_GUID: f64 = 0.1;
pub const DEFAULT_TAPS: [usize; 4] = [0, 2, 4, 6];

/// When the low-resolution features are read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GuidanceTiming {
    /// Always at `t`.
    Fixed { t: f64 },
    /// At the high-resolution model's current timestep.
    FollowHr,
}

impl Default for GuidanceTiming {
    fn default() -> Self {
        GuidanceTiming::Fixed { t: DEFAULT_T_GUID }
    }
}

impl GuidanceTiming {
    pub fn t_for(&self, t_hr: f64) -> f64 {
        match *self {
            GuidanceTiming::Fixed { t } => t,
            GuidanceTiming::FollowHr => t_hr,
        }
    }
}

/// What conditions the high-resolution model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceArm {
    Unguided,
    Feature {
        timing: GuidanceTiming,
    },
    /// The decoded, upsampled and re-encoded low-resolution clip, added to
    /// the token embedding.
    Latent,
}

impl Default for GuidanceArm {
    fn default() -> Self {
        GuidanceArm::Feature {
            timing: GuidanceTiming::default(),
        }
    }
}

impl GuidanceArm {
    pub fn label(&self) -> String {
        match self {
            GuidanceArm::Unguided => "Unguided".into(),
            GuidanceArm::Latent => "Latent".into(),
            GuidanceArm::Feature {
                timing: GuidanceTiming::FollowHr,
            } => "Feature t=t_hr".into(),
            GuidanceArm::Feature {
                timing: GuidanceTiming::Fixed { t },
            } => format!("Feature t={t}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let GuidanceArm::Feature {
            timing: GuidanceTiming::Fixed { t },
        } = *self
        {
            ensure!((0.0..=1.0).contains(&t), Domain, "guidance timestep {t} outside [0, 1]");
        }
        Ok(())
    }
}

/// Features of selected blocks from one low-resolution forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSet {
    pub t_guid: f64,
    pub features: Vec<FeatureTensor>,
}

impl GuidanceSet {
    pub fn indices(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.block_index).collect()
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.features.iter().find(|f| f.block_index == index).map(|f| &f.data)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.t_guid.to_le_bytes());
        for f in &self.features {
            h.update((f.block_index as u64).to_le_bytes());
            update_digest(&mut h, &f.data);
        }
        hex::encode(h.finalize())
    }
}

fn check_unique(taps: &[usize]) -> Result<()> {
    for (k, i) in taps.iter().enumerate() {
        ensure!(!taps[..k].contains(i), Config, "guidance block {i} listed twice");
    }
    Ok(())
}

/// Runs the low-resolution model once on `lr_latent` (already noised to
/// `t_guid`) and keeps the outputs of blocks `taps`.
pub fn extract_guidance(
    lr: &DiT,
    lr_latent: &Tensor,
    class: usize,
    t_guid: f64,
    taps: &[usize],
) -> Result<GuidanceSet> {
    check_unique(taps)?;
    let (_, features) = lr.predict(lr_latent, t_guid, class, taps, &mut crate::dit::NoHook)?;
    Ok(GuidanceSet { t_guid, features })
}

/// Noises a clean low-resolution latent to the guidance timestep, then
/// extracts.
fn guidance_from_clean(
    lr: &DiT,
    z: &Tensor,
    class: usize,
    t_guid: f64,
    taps: &[usize],
    rng: &mut impl rand::Rng,
    schedule: crate::flow::NoiseSchedule,
) -> Result<GuidanceSet> {
    let eps = Tensor::randn(z.shape().to_vec(), 1.0, rng);
    extract_guidance(lr, &noise_latent(z, t_guid, &eps, schedule)?, class, t_guid, taps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Injection sites: block indices of both models.
    pub taps: Vec<usize>,
    /// Low-resolution feature grid `[n, h, w]`.
    pub lr_grid: [usize; 3],
    pub hr_grid: [usize; 3],
    pub lr_dim: usize,
    pub hr_dim: usize,
    /// Token width of the high-resolution model, for the latent input.
    pub token_channels: usize,
}

impl FusionConfig {
    /// Fusion between `lr` and `hr` for latents of the given shapes.
    pub fn between(lr: &DiT, hr: &DiT, lr_latent: &[usize], hr_latent: &[usize], taps: &[usize]) -> Self {
        let grid = |m: &DiT, s: &[usize]| [s[0], s[1] / m.config.patch, s[2] / m.config.patch];
        Self {
            taps: taps.to_vec(),
            lr_grid: grid(lr, lr_latent),
            hr_grid: grid(hr, hr_latent),
            lr_dim: lr.config.dim,
            hr_dim: hr.config.dim,
            token_channels: hr.config.token_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_unique(&self.taps)?;
        for axis in 0..3 {
            ensure!(
                self.hr_grid[axis] >= self.lr_grid[axis] && self.lr_grid[axis] > 0,
                Config,
                "cannot upsample guidance from {:?} to {:?}",
                self.lr_grid,
                self.hr_grid
            );
        }
        ensure!(
            self.lr_dim > 0 && self.hr_dim > 0,
            Config,
            "fusion widths must be positive"
        );
        Ok(())
    }

    fn hr_rows(&self) -> usize {
        self.hr_grid.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct FusionSite {
    index: usize,
    mlp: Linear,
    ada: Linear,
    up: Conv3d,
}

/// Upsamplers and fusion blocks, one per injection site, plus the input
/// layer of the latent-conditioned variant.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub params: ParamStore,
    sites: Vec<FusionSite>,
    latent_in: Linear,
}

impl Fusion {
    /// MLPs start at identity; the upsampling convolutions, the modulation
    /// heads and the latent input start at zero.
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let d = config.hr_dim;
        let sites = config
            .taps
            .iter()
            .map(|&i| FusionSite {
                index: i,
                mlp: Linear::identity(&mut p, &format!("fusion.{i}.mlp"), d),
                ada: Linear::zeros(&mut p, &format!("fusion.{i}.ada"), d, 2 * d),
                up: Conv3d::zeros(&mut p, &format!("fusion.{i}.up"), [3, 3, 3], config.lr_dim, d),
            })
            .collect();
        let latent_in = Linear::zeros(&mut p, "latent_in", config.token_channels, d);
        Ok(Self {
            config,
            params: p,
            sites,
            latent_in,
        })
    }

    /// The same parameters on other grids, for progressive training.
    pub fn regrid(&self, lr_grid: [usize; 3], hr_grid: [usize; 3]) -> Result<Self> {
        let config = FusionConfig {
            lr_grid,
            hr_grid,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Self { config, ..self.clone() })
    }

    /// [`Fusion::regrid`] for latents of the given shapes.
    pub fn for_latents(&self, lr: &DiT, hr: &DiT, lr_latent: &[usize], hr_latent: &[usize]) -> Result<Self> {
        let c = FusionConfig::between(lr, hr, lr_latent, hr_latent, &self.config.taps);
        self.regrid(c.lr_grid, c.hr_grid)
    }

    fn site(&self, index: usize) -> Result<&FusionSite> {
        self.sites
            .iter()
            .find(|s| s.index == index)
            .ok_or_else(|| Error::Config(format!("no fusion block at {index}")))
    }

    /// Interpolates a `[n, h, w, lr_dim]` feature to the high-resolution
    /// grid, then applies the site's 3×3×3 convolution.
    pub fn upsample_guidance(&self, g: &mut Graph, p: &Bound, index: usize, feature: Var) -> Result<Var> {
        let site = *self.site(index)?;
        let s = g.shape(feature).to_vec();
        let c = &self.config;
        ensure!(
            s.len() == 4 && s[..3] == c.lr_grid && s[3] == c.lr_dim,
            Dimension,
            "guidance {s:?} does not match {:?}x{}",
            c.lr_grid,
            c.lr_dim
        );
        let mut h = feature;
        for axis in 0..3 {
            if c.lr_grid[axis] != c.hr_grid[axis] {
                h = g.resample(h, axis, shared_matrix(c.lr_grid[axis], c.hr_grid[axis], Kernel::Linear));
            }
        }
        Ok(site.up.forward(g, p, h))
    }

    /// `h' = Norm(MLP(h)) + g'`, then `h'' = h' ⊙ (1 + α_t) + β_t` with
    /// `[β_t, α_t]` predicted from `act = silu(time embedding)`. `h` is the
    /// `[rows, d]` block input; `g'` may be absent (treated as zero).
    pub fn fuse(&self, g: &mut Graph, p: &Bound, index: usize, h: Var, guide: Option<Var>, act: Var) -> Result<Var> {
        let site = *self.site(index)?;
        let d = self.config.hr_dim;
        let hs = g.shape(h).to_vec();
        ensure!(
            hs.len() == 2 && hs[1] == d,
            Dimension,
            "fusion input {hs:?} is not [rows, {d}]"
        );
        let m = site.mlp.forward(g, p, h);
        let mut x = g.layer_norm(m);
        if let Some(gu) = guide {
            let n = g.shape(gu).iter().product::<usize>();
            ensure!(
                n == hs[0] * d,
                Dimension,
                "guidance {:?} vs features {hs:?}",
                g.shape(gu)
            );
            let gu = g.reshape(gu, [hs[0], d]);
            x = g.add(x, gu);
        }
        let mo = site.ada.forward(g, p, act);
        let beta = g.gather(mo, chunk_index(0, d), [d]);
        let alpha = g.gather(mo, chunk_index(1, d), [d]);
        let scale = g.add_scalar(alpha, 1.0);
        let x = g.mul_row(x, scale);
        Ok(g.add_row(x, beta))
    }

    /// Embeds a patchified conditioning latent `[n, h, w, tc]` to `[rows, d]`.
    pub fn latent_condition(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let rows = self.config.hr_rows();
        ensure!(
            s.len() == 4 && s[..3] == self.config.hr_grid && s[3] == self.config.token_channels,
            Dimension,
            "conditioning tokens {s:?} do not match {:?}x{}",
            self.config.hr_grid,
            self.config.token_channels
        );
        let x = g.reshape(tokens, [rows, s[3]]);
        Ok(self.latent_in.forward(g, p, x))
    }

    pub fn save(&self, dir: &Path, step: u64, seed: u64, adam: Option<&Adam>) -> Result<()> {
        let m = Manifest::new("fusion", &self.config, step, seed)?;
        checkpoint::save(dir, m, &self.params, adam)
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<Adam>)> {
        let m = checkpoint::load_manifest(dir)?;
        let mut f = Fusion::new(m.config_as()?)?;
        let loaded = checkpoint::load_into(dir, "fusion", &mut f.params)?;
        f.params = loaded.params;
        Ok((f, loaded.adam))
    }
}

/// Splices guidance into a high-resolution forward pass.
pub struct CascadeHook<'a> {
    fusion: &'a Fusion,
    p: &'a Bound,
    guides: Vec<(usize, Var)>,
    latent: Option<Var>,
}

impl<'a> CascadeHook<'a> {
    /// `guidance` must cover exactly the fusion sites; `latent_cond` is a
    /// high-resolution latent.
    pub fn new(
        g: &mut Graph,
        fusion: &'a Fusion,
        p: &'a Bound,
        guidance: Option<&GuidanceSet>,
        latent_cond: Option<&Tensor>,
        patch: usize,
    ) -> Result<Self> {
        let mut guides = Vec::new();
        if let Some(set) = guidance {
            ensure!(
                set.indices() == fusion.config.taps,
                Config,
                "guidance blocks {:?} differ from fusion sites {:?}",
                set.indices(),
                fusion.config.taps
            );
            for f in &set.features {
                let v = g.constant(f.data.clone());
                guides.push((f.block_index, fusion.upsample_guidance(g, p, f.block_index, v)?));
            }
        }
        let latent = match latent_cond {
            Some(z) => {
                let tokens = g.constant(patchify(z, patch)?);
                Some(fusion.latent_condition(g, p, tokens)?)
            }
            None => None,
        };
        Ok(Self {
            fusion,
            p,
            guides,
            latent,
        })
    }
}

impl ForwardHook for CascadeHook<'_> {
    fn after_embed(&mut self, g: &mut Graph, x: Var, _cond: Var) -> Result<Var> {
        Ok(match self.latent {
            Some(c) => g.add(x, c),
            None => x,
        })
    }

    fn before_block(&mut self, g: &mut Graph, index: usize, x: Var, cond: Var) -> Result<Var> {
        if !self.fusion.config.taps.contains(&index) {
            return Ok(x);
        }
        let guide = self.guides.iter().find(|(i, _)| *i == index).map(|&(_, v)| v);
        let act = g.silu(cond);
        self.fusion.fuse(g, self.p, index, x, guide, act)
    }
}

/// Prediction of the fused high-resolution model, without a tape.
pub fn hr_predict(
    model: &DiT,
    fusion: &Fusion,
    z_t: &Tensor,
    t: f64,
    class: usize,
    guidance: Option<&GuidanceSet>,
    latent_cond: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let pm = model.params.bind(&mut g, false);
    let pf = fusion.params.bind(&mut g, false);
    let mut hook = CascadeHook::new(&mut g, fusion, &pf, guidance, latent_cond, model.config.patch)?;
    let tokens = g.constant(patchify(z_t, model.config.patch)?);
    let out = model.forward(&mut g, &pm, tokens, t, class, &[], &mut hook)?;
    unpatchify(
        g.value(out.prediction),
        model.config.patch,
        model.config.latent_channels,
    )
}

/// High-resolution latents plus what each arm conditions on.
#[derive(Clone, Debug)]
pub struct HrLatents {
    pub hr: EncodedSet,
    /// Latents of the bicubically downsampled clips.
    pub lr: EncodedSet,
    /// Latent arm only: downsampled clips decoded, upsampled and re-encoded.
    pub upsampled: Option<EncodedSet>,
    /// Codec calls made while preparing, and the number of samples.
    pub traffic: CodecTraffic,
    pub samples: usize,
}

impl HrLatents {
    /// `(encodes, decodes)` per sample.
    pub fn traffic_per_sample(&self) -> (f64, f64) {
        let n = self.samples.max(1) as f64;
        (self.traffic.encodes as f64 / n, self.traffic.decodes as f64 / n)
    }
}

/// Encodes every high-resolution sample and its downsampled counterpart.
pub fn prepare_hr_latents(
    data: &TrainingSet,
    codec: &Codec,
    lr_size: (usize, usize),
    latent_arm: bool,
) -> Result<HrLatents> {
    let start = codec.traffic();
    let hr = data.encode(codec)?;
    let down = |c: &VideoTensor| c.resize(lr_size.0, lr_size.1, Kernel::Cubic);
    let small = TrainingSet {
        videos: data.videos.iter().map(down).collect::<Result<_>>()?,
        images: data.images.iter().map(down).collect::<Result<_>>()?,
        ..data.clone()
    };
    let lr = small.encode(codec)?;
    let upsampled = if latent_arm {
        let hr_size = (data.videos[0].height(), data.videos[0].width());
        let up = |z: &Tensor| -> Result<Tensor> {
            let clip = codec.decode(&LatentTensor::new(z.clone(), codec.spec())?)?;
            Ok(codec.encode(&clip.resize(hr_size.0, hr_size.1, Kernel::Cubic)?)?.data)
        };
        Some(EncodedSet {
            videos: lr.videos.iter().map(up).collect::<Result<_>>()?,
            images: lr.images.iter().map(up).collect::<Result<_>>()?,
            ..lr.clone()
        })
    } else {
        None
    };
    Ok(HrLatents {
        samples: hr.videos.len() + hr.images.len(),
        traffic: codec.traffic().since(start),
        hr,
        lr,
        upsampled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrConfig {
    pub train: TrainConfig,
    pub arm: GuidanceArm,
    pub taps: Vec<usize>,
}

impl Default for HrConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            arm: GuidanceArm::default(),
            taps: DEFAULT_TAPS.to_vec(),
        }
    }
}

impl HrConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.arm.validate()?;
        check_unique(&self.taps)
    }
}

/// High-resolution model, fusion parameters and their optimizers.
#[derive(Clone, Debug)]
pub struct HrState {
    pub model: DiT,
    pub fusion: Fusion,
    pub adam_model: Adam,
    pub adam_fusion: Adam,
    pub step: u64,
}

impl HrState {
    /// Copies every low-resolution weight; fusion starts neutral.
    pub fn new(lr: &DiT, lr_latent: &[usize], hr_latent: &[usize], taps: &[usize], optim: AdamConfig) -> Result<Self> {
        let model = lr.clone();
        for &i in taps {
            ensure!(
                lr.config.tappable().contains(&i),
                Config,
                "low-resolution model has no tap at block {i} (taps {:?})",
                lr.config.tappable()
            );
        }
        let fusion = Fusion::new(FusionConfig::between(lr, &model, lr_latent, hr_latent, taps))?;
        Ok(Self {
            adam_model: Adam::new(optim, &model.params),
            adam_fusion: Adam::new(optim, &fusion.params),
            model,
            fusion,
            step: 0,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, metrics: &[(&str, f64)]) -> Result<()> {
        self.model
            .save(&dir.join("hr"), self.step, seed, Some(&self.adam_model), metrics)?;
        self.fusion
            .save(&dir.join("fusion"), self.step, seed, Some(&self.adam_fusion))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (model, adam_model, manifest) = DiT::load(&dir.join("hr"))?;
        let (fusion, adam_fusion) = Fusion::load(&dir.join("fusion"))?;
        let missing = || Error::Dependency(format!("checkpoint at {} lacks optimizer state", dir.display()));
        Ok(Self {
            model,
            fusion,
            adam_model: adam_model.ok_or_else(missing)?,
            adam_fusion: adam_fusion.ok_or_else(missing)?,
            step: manifest.step,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub ts: Vec<f64>,
    /// Timestep each sample's guidance was read at (feature arms only).
    pub t_guid: Vec<f64>,
    pub guidance_checksums: Vec<String>,
}

pub struct HrGrads {
    pub model: Vec<Tensor>,
    pub fusion: Vec<Tensor>,
    pub record: HrRecord,
}

/// Loss and gradients of the batch of `state.step`. Noise and batches
/// come from the same streams as plain diffusion training, so every arm
/// sees identical data; guidance noise has its own stream.
pub fn hr_grads(state: &HrState, lr: &DiT, data: &TrainingSet, lat: &HrLatents, cfg: &HrConfig) -> Result<HrGrads> {
    let step = state.step;
    let tc = &cfg.train;
    let refs = data.draw(tc.seed, step, tc.batch_size)?;
    let shapes: Vec<&[usize]> = refs.iter().map(|&r| lat.hr.get(r).0.shape()).collect();
    let noise = draw_noise(tc.seed, step, &tc.timesteps, &shapes);
    let mut guide_rng = rng::stream(tc.seed, step, Purpose::GuidanceNoise);
    let mut record = HrRecord {
        step,
        loss: 0.0,
        grad_norm: 0.0,
        ts: noise.iter().map(|n| n.t).collect(),
        t_guid: Vec::new(),
        guidance_checksums: Vec::new(),
    };

    let mut g = Graph::new();
    let pm = state.model.params.bind(&mut g, true);
    let pf = state.fusion.params.bind(&mut g, true);
    let mut total = None;
    for (&r, n) in refs.iter().zip(&noise) {
        let (z, class) = lat.hr.get(r);
        let guidance = match cfg.arm {
            GuidanceArm::Feature { timing } => {
                let t_g = timing.t_for(n.t);
                let set = guidance_from_clean(lr, lat.lr.get(r).0, class, t_g, &cfg.taps, &mut guide_rng, tc.schedule)?;
                record.t_guid.push(t_g);
                record.guidance_checksums.push(set.checksum());
                Some(set)
            }
            _ => None,
        };
        let latent_cond = match cfg.arm {
            GuidanceArm::Latent => Some(
                lat.upsampled
                    .as_ref()
                    .ok_or_else(|| Error::Config("latent arm needs upsampled latents".into()))?
                    .get(r)
                    .0,
            ),
            _ => None,
        };
        let mut hook = CascadeHook::new(
            &mut g,
            &state.fusion,
            &pf,
            guidance.as_ref(),
            latent_cond,
            state.model.config.patch,
        )?;
        let inputs = LossInputs {
            z,
            eps: &n.eps,
            t: n.t,
            class,
            schedule: tc.schedule,
            mode: tc.mode,
        };
        let (l, _) =
            diffusion_loss_graph(&mut g, &state.model, &pm, &inputs, &[], &mut hook).map_err(|e| fail(step, e))?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let loss = g.scale(total.expect("batch is non-empty"), 1.0 / refs.len() as f64);
    record.loss = g.value(loss).item();
    if !record.loss.is_finite() {
        return Err(Error::TrainingFailure {
            step: step as usize,
            reason: format!("high-resolution loss became {}", record.loss),
        });
    }
    let grads = g.backward(loss);
    let model = pm.grads(&grads, &state.model.params);
    let fusion = pf.grads(&grads, &state.fusion.params);
    record.grad_norm = grad_norm(&model).hypot(grad_norm(&fusion));
    Ok(HrGrads { model, fusion, record })
}

pub fn hr_step(state: &mut HrState, lr: &DiT, data: &TrainingSet, lat: &HrLatents, cfg: &HrConfig) -> Result<HrRecord> {
    let grads = hr_grads(state, lr, data, lat, cfg)?;
    let lr_now = cfg.train.optim.lr * cfg.train.lr_schedule.factor(state.step, cfg.train.steps);
    state.adam_model.config.lr = lr_now;
    state.adam_fusion.config.lr = lr_now;
    state.adam_model.step(&mut state.model.params, &grads.model);
    state.adam_fusion.step(&mut state.fusion.params, &grads.fusion);
    state.step += 1;
    Ok(grads.record)
}

#[allow(clippy::too_many_arguments)]
pub fn train_hr(
    state: &mut HrState,
    lr: &DiT,
    data: &TrainingSet,
    lat: &HrLatents,
    cfg: &HrConfig,
    steps: usize,
    on_record: &mut dyn FnMut(&HrRecord),
) -> Result<()> {
    cfg.validate()?;
    ensure!(
        !matches!(cfg.arm, GuidanceArm::Latent) || lat.upsampled.is_some(),
        Config,
        "latent arm needs latents prepared with the upsampled branch"
    );
    for _ in 0..steps {
        let rec = hr_step(state, lr, data, lat, cfg)?;
        on_record(&rec);
    }
    Ok(())
}

/// Mean held-out loss of the fused model over every video of `lat`, at
/// each of `ts`. Training noise streams are not touched.
#[allow(clippy::too_many_arguments)]
pub fn hr_heldout_loss(
    model: &DiT,
    fusion: &Fusion,
    lr: &DiT,
    lat: &HrLatents,
    ts: &[f64],
    seed: u64,
    arm: GuidanceArm,
    taps: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut r = rng::stream(seed, 0, Purpose::Eval);
    let mut rg = rng::stream(seed, 1, Purpose::GuidanceNoise);
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, z) in lat.hr.videos.iter().enumerate() {
        let class = lat.hr.video_classes[k];
        for &t in ts {
            let eps = Tensor::randn(z.shape().to_vec(), 1.0, &mut r);
            let guidance = match arm {
                GuidanceArm::Feature { timing } => Some(guidance_from_clean(
                    lr,
                    &lat.lr.videos[k],
                    class,
                    timing.t_for(t),
                    taps,
                    &mut rg,
                    cfg.schedule,
                )?),
                _ => None,
            };
            let cond = match arm {
                GuidanceArm::Latent => lat.upsampled.as_ref().map(|u| &u.videos[k]),
                _ => None,
            };
            let z_t = noise_latent(z, t, &eps, cfg.schedule)?;
            let pred = hr_predict(model, fusion, &z_t, t, class, guidance.as_ref(), cond)?;
            let target = cfg.mode.target(z, &eps);
            total += pred.zip_map(&target, |a, b| (a - b) * (a - b)).mean();
            count += 1;
        }
    }
    ensure!(count > 0, InsufficientData, "no held-out latents");
    Ok(total / count as f64)
}

/// Wall-clock time of each stage of [`two_stage_sample`], in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub lr: f64,
    pub guidance: f64,
    pub hr: f64,
    pub decode: f64,
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub video: VideoTensor,
    pub lr_latent: Option<Tensor>,
    pub hr_latent: Tensor,
    /// Timestep of every guidance set used, in HR step order for the
    /// following mode.
    pub guidance_t: Vec<f64>,
    pub guidance_checksums: Vec<String>,
    pub traffic: CodecTraffic,
    pub timings: StageTimings,
}

fn in_stage(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{stage}: {m}")),
        other => other,
    }
}

struct GuidedDenoiser<'a> {
    model: &'a DiT,
    fusion: &'a Fusion,
    sets: &'a [GuidanceSet],
    follow: bool,
    latent: Option<&'a Tensor>,
}

impl Denoiser for GuidedDenoiser<'_> {
    fn predict(&mut self, z_t: &Tensor, t: f64, class: usize) -> Result<Tensor> {
        let set = if self.follow {
            self.sets.iter().find(|s| s.t_guid == t)
        } else {
            self.sets.first()
        };
        hr_predict(self.model, self.fusion, z_t, t, class, set, self.latent)
    }
}

/// Denoiser whose guidance comes from a known clean low-resolution latent,
/// noised with fixed noise to whatever timestep the arm asks for. Used to
/// score arms against ground truth.
pub struct ReferenceGuided<'a> {
    model: &'a DiT,
    fusion: &'a Fusion,
    lr: &'a DiT,
    arm: GuidanceArm,
    lr_latent: &'a Tensor,
    lr_noise: Tensor,
    latent_cond: Option<&'a Tensor>,
    schedule: crate::flow::NoiseSchedule,
    cache: Option<GuidanceSet>,
}

impl<'a> ReferenceGuided<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a DiT,
        fusion: &'a Fusion,
        lr: &'a DiT,
        arm: GuidanceArm,
        lr_latent: &'a Tensor,
        latent_cond: Option<&'a Tensor>,
        schedule: crate::flow::NoiseSchedule,
        seed: u64,
    ) -> Self {
        let lr_noise = Tensor::randn(
            lr_latent.shape().to_vec(),
            1.0,
            &mut rng::stream(seed, 0, Purpose::GuidanceNoise),
        );
        Self {
            model,
            fusion,
            lr,
            arm,
            lr_latent,
            lr_noise,
            latent_cond,
            schedule,
            cache: None,
        }
    }
}

impl Denoiser for ReferenceGuided<'_> {
    fn predict(&mut self, z_t: &Tensor, t: f64, class: usize) -> Result<Tensor> {
        if let GuidanceArm::Feature { timing } = self.arm {
            let t_g = timing.t_for(t);
            if self.cache.as_ref().map(|c| c.t_guid) != Some(t_g) {
                let z = noise_latent(self.lr_latent, t_g, &self.lr_noise, self.schedule)?;
                self.cache = Some(extract_guidance(self.lr, &z, class, t_g, &self.fusion.config.taps)?);
            }
        }
        let cond = if matches!(self.arm, GuidanceArm::Latent) {
            self.latent_cond
        } else {
            None
        };
        hr_predict(self.model, self.fusion, z_t, t, class, self.cache.as_ref(), cond)
    }
}

/// Index of the model-call step whose timestep is nearest `t`; ties go to
/// the later step.
pub fn nearest_step(grid: &[f64], t: f64) -> usize {
    let mut best = 0;
    for k in 0..grid.len().saturating_sub(1) {
        if (grid[k] - t).abs() <= (grid[best] - t).abs() {
            best = k;
        }
    }
    best
}

/// Low-resolution sampling, guidance extraction, guided high-resolution
/// sampling and a single decode. The latent arm instead decodes the
/// low-resolution result, upsamples it and encodes it again.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_sample(
    lr: &DiT,
    hr: &DiT,
    fusion: &Fusion,
    codec: &Codec,
    class: usize,
    lr_shape: &[usize],
    hr_shape: &[usize],
    arm: GuidanceArm,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<TwoStageOutput> {
    arm.validate()?;
    let start = codec.traffic();
    let mut timings = StageTimings::default();
    let grid = time_grid(1.0, sampler.steps);
    let mut sets = Vec::new();
    let mut latent_cond = None;
    let mut lr_latent = None;

    if !matches!(arm, GuidanceArm::Unguided) {
        let clock = Instant::now();
        let mut trajectory = Vec::with_capacity(sampler.steps + 1);
        let z0 = Tensor::randn(lr_shape.to_vec(), 1.0, &mut rng::stream(seed, 0, Purpose::Sample));
        let mut lr_model = lr;
        let z_lr = sample_from(&mut lr_model, &z0, 1.0, class, sampler, &mut |_, _, z| {
            trajectory.push(z.clone())
        })
        .map_err(in_stage("low-resolution sampling"))?;
        timings.lr = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let taps = &fusion.config.taps;
        match arm {
            GuidanceArm::Feature {
                timing: GuidanceTiming::Fixed { t },
            } => {
                let k = nearest_step(&grid, t);
                sets.push(extract_guidance(lr, &trajectory[k], class, grid[k], taps).map_err(in_stage("guidance"))?);
            }
            GuidanceArm::Feature {
                timing: GuidanceTiming::FollowHr,
            } => {
                for k in 0..sampler.steps {
                    sets.push(
                        extract_guidance(lr, &trajectory[k], class, grid[k], taps).map_err(in_stage("guidance"))?,
                    );
                }
            }
            GuidanceArm::Latent => {
                let clip = codec.decode(&LatentTensor::new(z_lr.clone(), codec.spec())?)?;
                let hr_size = (hr_shape[1] * codec.spec().f_s, hr_shape[2] * codec.spec().f_s);
                latent_cond = Some(codec.encode(&clip.resize(hr_size.0, hr_size.1, Kernel::Cubic)?)?.data);
            }
            GuidanceArm::Unguided => unreachable!(),
        }
        timings.guidance = clock.elapsed().as_secs_f64();
        lr_latent = Some(z_lr);
    }

    let clock = Instant::now();
    let mut den = GuidedDenoiser {
        model: hr,
        fusion,
        sets: &sets,
        follow: matches!(
            arm,
            GuidanceArm::Feature {
                timing: GuidanceTiming::FollowHr
            }
        ),
        latent: latent_cond.as_ref(),
    };
    let z0 = Tensor::randn(hr_shape.to_vec(), 1.0, &mut rng::stream(seed, 1, Purpose::Sample));
    let z_hr = sample_from(&mut den, &z0, 1.0, class, sampler, &mut |_, _, _| {})
        .map_err(in_stage("high-resolution sampling"))?;
    timings.hr = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let video = codec
        .decode(&LatentTensor::new(z_hr.clone(), codec.spec()).map_err(in_stage("decode"))?)
        .map_err(in_stage("decode"))?;
    timings.decode = clock.elapsed().as_secs_f64();
    Ok(TwoStageOutput {
        video,
        lr_latent,
        hr_latent: z_hr,
        guidance_t: sets.iter().map(|s| s.t_guid).collect(),
        guidance_checksums: sets.iter().map(GuidanceSet::checksum).collect(),
        traffic: codec.traffic().since(start),
        timings,
    })
}
