//! Toy spatiotemporal autoencoders with configurable compression factors,
//! and the `p × p` patchify used in front of teacher-style transformers.
//!
//! The encoder folds each `f_t × f_s × f_s` pixel block into one vector
//! (a stride-equals-kernel convolution), mixes neighbourhoods with a
//! residual 3×3×3 convolution, and projects to `c` latent channels. The
//! decoder mirrors it and unfolds back to pixels. Latents handed out by
//! [`Codec::encode`] are standardized per channel with training-set
//! statistics.

use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::psnr;
use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Manifest};
use crate::data::{ClipSource, VideoTensor};
use crate::error::{ensure, Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, Conv3d, Linear, ParamStore};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecRole {
    Teacher,
    Student,
}

/// Compression factors of one codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    /// Spatial factor (applied to both height and width).
    pub f_s: usize,
    /// Temporal factor.
    pub f_t: usize,
    /// Latent channels.
    pub channels: usize,
    pub role: CodecRole,
}

impl CodecSpec {
    pub fn new(f_s: usize, f_t: usize, channels: usize, role: CodecRole) -> Result<Self> {
        ensure!(
            f_s.is_power_of_two() && f_t.is_power_of_two(),
            Config,
            "codec factors must be powers of two, got f_s={f_s}, f_t={f_t}"
        );
        ensure!(channels >= 1, Config, "codec needs at least one latent channel");
        Ok(Self {
            f_s,
            f_t,
            channels,
            role,
        })
    }

    /// Desk-scale teacher: 4×4 spatial, 2 temporal, 8 channels.
    pub fn teacher_desk() -> Self {
        Self::new(4, 2, 8, CodecRole::Teacher).unwrap()
    }

    /// Desk-scale student: 8×8 spatial, 4 temporal, 16 channels.
    pub fn student_desk() -> Self {
        Self::new(8, 4, 16, CodecRole::Student).unwrap()
    }

    /// Production-scale teacher factors (8×8 spatial, 4 temporal).
    pub fn teacher_production() -> Self {
        Self::new(8, 4, 16, CodecRole::Teacher).unwrap()
    }

    /// Production-scale student factors (32×32 spatial, 8 temporal).
    pub fn student_production() -> Self {
        Self::new(32, 8, 128, CodecRole::Student).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.f_s, self.f_t, self.channels, self.role).map(|_| ())
    }

    /// Latent grid `[n, h, w]` for a clip of `[N, H, W]`.
    pub fn latent_dims(&self, clip: [usize; 3]) -> Result<[usize; 3]> {
        let [n, h, w] = clip;
        ensure!(
            n % self.f_t == 0,
            Dimension,
            "{n} frames not divisible by temporal factor {}",
            self.f_t
        );
        ensure!(
            h % self.f_s == 0 && w % self.f_s == 0,
            Dimension,
            "{h}x{w} not divisible by spatial factor {}",
            self.f_s
        );
        Ok([n / self.f_t, h / self.f_s, w / self.f_s])
    }

    fn block_len(&self) -> usize {
        self.f_t * self.f_s * self.f_s * 3
    }
}

/// A `[n, h, w, c]` latent grid tagged with the codec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor,
    pub codec: CodecSpec,
}

impl LatentTensor {
    pub fn new(data: Tensor, codec: CodecSpec) -> Result<Self> {
        ensure!(
            data.ndim() == 4 && data.last_dim() == codec.channels,
            CodecMismatch,
            "latent of shape {:?} does not carry {} channels",
            data.shape(),
            codec.channels
        );
        ensure!(data.is_finite(), Numeric, "latent contains non-finite values");
        Ok(Self { data, codec })
    }

    pub fn grid(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub spec: CodecSpec,
    pub hidden: usize,
}

impl CodecConfig {
    pub fn new(spec: CodecSpec) -> Self {
        Self { spec, hidden: 64 }
    }
}

/// Per-channel latent standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct CodecLayers {
    enc_in: Linear,
    enc_mix: Conv3d,
    enc_out: Linear,
    dec_in: Linear,
    dec_mix: Conv3d,
    dec_out: Linear,
}

/// Encoder/decoder pair. Encode and decode invocations are counted so
/// pipelines can prove how much codec traffic they cause.
#[derive(Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub stats: LatentStats,
    layers: CodecLayers,
    encodes: AtomicUsize,
    decodes: AtomicUsize,
}

impl Clone for Codec {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
            layers: self.layers,
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        }
    }
}

/// `(encodes, decodes)` since the last reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecTraffic {
    pub encodes: usize,
    pub decodes: usize,
}

impl CodecTraffic {
    /// Calls made since `earlier` was read.
    pub fn since(self, earlier: CodecTraffic) -> CodecTraffic {
        CodecTraffic {
            encodes: self.encodes - earlier.encodes,
            decodes: self.decodes - earlier.decodes,
        }
    }
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.spec.validate()?;
        ensure!(config.hidden >= 1, Config, "codec hidden width must be positive");
        let mut p = ParamStore::new();
        let (b, hd, c) = (config.spec.block_len(), config.hidden, config.spec.channels);
        let layers = CodecLayers {
            enc_in: Linear::new(&mut p, "enc.in", b, hd, 1.0, true, rng),
            enc_mix: Conv3d::new(&mut p, "enc.mix", [3, 3, 3], hd, hd, 0.5, rng),
            enc_out: Linear::new(&mut p, "enc.out", hd, c, 1.0, true, rng),
            dec_in: Linear::new(&mut p, "dec.in", c, hd, 1.0, true, rng),
            dec_mix: Conv3d::new(&mut p, "dec.mix", [3, 3, 3], hd, hd, 0.5, rng),
            dec_out: Linear::new(&mut p, "dec.out", hd, b, 1.0, true, rng),
        };
        Ok(Self {
            stats: LatentStats::identity(c),
            config,
            params: p,
            layers,
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> CodecSpec {
        self.config.spec
    }

    pub fn traffic(&self) -> CodecTraffic {
        CodecTraffic {
            encodes: self.encodes.load(Ordering::SeqCst),
            decodes: self.decodes.load(Ordering::SeqCst),
        }
    }

    pub fn reset_traffic(&self) {
        self.encodes.store(0, Ordering::SeqCst);
        self.decodes.store(0, Ordering::SeqCst);
    }

    /// Raw (unstandardized) encoder on the tape.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, video: Var) -> Var {
        let s = g.shape(video).to_vec();
        let spec = self.config.spec;
        let idx = space_to_depth_index([s[0], s[1], s[2]], spec.f_t, spec.f_s);
        let grid = [s[0] / spec.f_t, s[1] / spec.f_s, s[2] / spec.f_s];
        let x = g.gather(video, idx, [grid[0], grid[1], grid[2], spec.block_len()]);
        let l = &self.layers;
        let h = l.enc_in.forward(g, p, x);
        let h = g.gelu(h);
        let m = l.enc_mix.forward(g, p, h);
        let m = g.gelu(m);
        let h = g.add(h, m);
        l.enc_out.forward(g, p, h)
    }

    /// Raw decoder on the tape; output is unclamped pixels.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, latent: Var) -> Var {
        let s = g.shape(latent).to_vec();
        let spec = self.config.spec;
        let l = &self.layers;
        let h = l.dec_in.forward(g, p, latent);
        let h = g.gelu(h);
        let m = l.dec_mix.forward(g, p, h);
        let m = g.gelu(m);
        let h = g.add(h, m);
        let blocks = l.dec_out.forward(g, p, h);
        let dims = [s[0] * spec.f_t, s[1] * spec.f_s, s[2] * spec.f_s];
        let idx = depth_to_space_index(dims, spec.f_t, spec.f_s);
        g.gather(blocks, idx, [dims[0], dims[1], dims[2], 3])
    }

    /// Standardized latent for a clip. Requires exact divisibility.
    pub fn encode(&self, video: &VideoTensor) -> Result<LatentTensor> {
        self.config.spec.latent_dims(video.dims())?;
        self.encodes.fetch_add(1, Ordering::SeqCst);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(video.tensor().clone());
        let z = self.encode_graph(&mut g, &p, v);
        let mut out = g.value(z).clone();
        let c = self.config.spec.channels;
        for row in out.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.stats.mean[j]) / self.stats.std[j];
            }
        }
        LatentTensor::new(out, self.config.spec)
    }

    /// Clip for a standardized latent, clamped to `[-1, 1]`.
    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoTensor> {
        ensure!(
            latent.codec == self.config.spec,
            CodecMismatch,
            "latent from {:?} handed to codec {:?}",
            latent.codec,
            self.config.spec
        );
        self.decode_raw(&latent.data)
    }

    fn decode_raw(&self, standardized: &Tensor) -> Result<VideoTensor> {
        let c = self.config.spec.channels;
        ensure!(
            standardized.ndim() == 4 && standardized.last_dim() == c,
            CodecMismatch,
            "latent shape {:?} vs {c} channels",
            standardized.shape()
        );
        self.decodes.fetch_add(1, Ordering::SeqCst);
        let mut raw = standardized.clone();
        for row in raw.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.stats.std[j] + self.stats.mean[j];
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(raw);
        let x = self.decode_graph(&mut g, &p, z);
        let out = g.value(x).clone();
        ensure!(out.is_finite(), Numeric, "decoder produced non-finite pixels");
        VideoTensor::clamped(out)
    }

    /// Mean reconstruction PSNR over a set of clips (does not count traffic).
    pub fn reconstruction_psnr(&self, clips: &[VideoTensor]) -> Result<f64> {
        let mut total = 0.0;
        for clip in clips {
            let rec = self.decode(&self.encode(clip)?)?;
            total += psnr(clip, &rec)?;
        }
        self.encodes.fetch_sub(clips.len(), Ordering::SeqCst);
        self.decodes.fetch_sub(clips.len(), Ordering::SeqCst);
        Ok(total / clips.len().max(1) as f64)
    }

    fn fit_stats(&mut self, clips: &[VideoTensor]) {
        let c = self.config.spec.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for clip in clips {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let v = g.constant(clip.tensor().clone());
            let z = self.encode_graph(&mut g, &p, v);
            for row in g.value(z).data().chunks(c) {
                for j in 0..c {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt()).max(1e-6))
            .collect();
        self.stats = LatentStats { mean, std };
    }

    pub fn save(&self, dir: &Path, step: u64, seed: u64, metrics: &[(&str, f64)]) -> Result<()> {
        let mut m = Manifest::new("codec", &self.config, step, seed)?;
        m.extra.insert(
            "latent_stats".into(),
            toml::Value::try_from(&self.stats).map_err(|e| Error::Config(e.to_string()))?,
        );
        for (k, v) in metrics {
            m.metrics.insert((*k).to_string(), *v);
        }
        checkpoint::save(dir, m, &self.params, None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::load_manifest(dir)?;
        let config: CodecConfig = manifest.config_as()?;
        let mut codec = Codec::new(config, &mut rng::seeded(0))?;
        let loaded = checkpoint::load_into(dir, "codec", &mut codec.params)?;
        if let Some(stats) = loaded.manifest.extra.get("latent_stats") {
            codec.stats = stats
                .clone()
                .try_into()
                .map_err(|e| Error::format(dir.join(checkpoint::MANIFEST), e))?;
        }
        Ok(codec)
    }
}

fn space_to_depth_index(dims: [usize; 3], ft: usize, fs: usize) -> Rc<[usize]> {
    let [n, h, w] = dims;
    let (gn, gh, gw) = (n / ft, h / fs, w / fs);
    let mut idx = Vec::with_capacity(n * h * w * 3);
    for a in 0..gn {
        for b in 0..gh {
            for c in 0..gw {
                for dt in 0..ft {
                    for dy in 0..fs {
                        for dx in 0..fs {
                            let (f, y, x) = (a * ft + dt, b * fs + dy, c * fs + dx);
                            let base = ((f * h + y) * w + x) * 3;
                            idx.extend([base, base + 1, base + 2]);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse permutation of [`space_to_depth_index`]: for every pixel, the
/// flat position it occupies inside the block grid.
fn depth_to_space_index(dims: [usize; 3], ft: usize, fs: usize) -> Rc<[usize]> {
    let forward = space_to_depth_index(dims, ft, fs);
    let mut inv = vec![0usize; forward.len()];
    for (pos, &src) in forward.iter().enumerate() {
        inv[src] = pos;
    }
    inv.into()
}

/// Groups `p × p` spatial neighbourhoods into tokens:
/// `[n, h, w, c] → [n, h/p, w/p, c·p·p]`.
pub fn patchify(latent: &Tensor, p: usize) -> Result<Tensor> {
    let idx = patchify_index(latent.shape(), p)?;
    let s = latent.shape();
    let data = idx.iter().map(|&i| latent.data()[i]).collect();
    Ok(Tensor::new([s[0], s[1] / p, s[2] / p, s[3] * p * p], data))
}

/// Inverse of [`patchify`] for `channels` latent channels.
pub fn unpatchify(tokens: &Tensor, p: usize, channels: usize) -> Result<Tensor> {
    let s = tokens.shape();
    ensure!(
        s.len() == 4 && s[3] == channels * p * p,
        Dimension,
        "token grid {s:?} is not a {p}x{p} patchify of {channels} channels"
    );
    let latent_shape = [s[0], s[1] * p, s[2] * p, channels];
    let idx = patchify_index(&latent_shape, p)?;
    let mut out = vec![0.0; tokens.numel()];
    for (pos, &src) in idx.iter().enumerate() {
        out[src] = tokens.data()[pos];
    }
    Ok(Tensor::new(latent_shape, out))
}

/// Gather index realizing [`patchify`] on a flat `[n, h, w, c]` buffer.
pub fn patchify_index(shape: &[usize], p: usize) -> Result<Rc<[usize]>> {
    ensure!(shape.len() == 4, Dimension, "patchify expects [n,h,w,c], got {shape:?}");
    ensure!(p >= 1, Config, "patch size must be positive");
    let [n, h, w, c] = [shape[0], shape[1], shape[2], shape[3]];
    ensure!(
        h % p == 0 && w % p == 0,
        Dimension,
        "{h}x{w} latent not divisible by patch {p}"
    );
    let mut idx = Vec::with_capacity(n * h * w * c);
    for a in 0..n {
        for b in 0..h / p {
            for d in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((a * h + b * p + dy) * w + d * p + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(idx.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub seed: u64,
}

impl Default for CodecTrainOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            optim: AdamConfig {
                lr: 2e-3,
                grad_clip: 0.0,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
    pub heldout_psnr: f64,
}

impl CodecTrainReport {
    /// Mean loss over a trailing window ending at `end` (exclusive).
    pub fn window_mean(&self, end: usize, window: usize) -> f64 {
        let lo = end.saturating_sub(window);
        let w = &self.losses[lo..end];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Reconstruction loss of one clip, on the tape.
pub fn reconstruction_loss(codec: &Codec, g: &mut Graph, p: &Bound, clip: &VideoTensor) -> Var {
    let x = g.constant(clip.tensor().clone());
    let z = codec.encode_graph(g, p, x);
    let y = codec.decode_graph(g, p, z);
    g.mse(y, x)
}

/// Trains an autoencoder with MSE reconstruction loss and fits latent
/// statistics on the training clips. Learning-rate is cosine-annealed to
/// a tenth of its initial value.
pub fn train_codec(
    config: CodecConfig,
    train: &dyn ClipSource,
    heldout: &dyn ClipSource,
    opts: &CodecTrainOptions,
) -> Result<(Codec, CodecTrainReport)> {
    ensure!(opts.steps >= 1, Config, "codec training needs at least one step");
    ensure!(!train.is_empty(), EmptySource, "no training clips for the codec");
    let clips: Vec<VideoTensor> = (0..train.len()).map(|i| train.clip(i)).collect::<Result<_>>()?;
    for c in &clips {
        config.spec.latent_dims(c.dims())?;
    }
    let held: Vec<VideoTensor> = (0..heldout.len()).map(|i| heldout.clip(i)).collect::<Result<_>>()?;
    let mut codec = Codec::new(config, &mut rng::stream(opts.seed, 0, Purpose::Init))?;
    let mut adam = Adam::new(opts.optim, &codec.params);
    let base_lr = opts.optim.lr;
    let mut report = CodecTrainReport::default();
    for step in 0..opts.steps {
        let mut r = rng::stream(opts.seed, step as u64, Purpose::Batch);
        let progress = step as f64 / opts.steps as f64;
        adam.config.lr = base_lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut g = Graph::new();
        let p = codec.params.bind(&mut g, true);
        let mut losses = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let clip = &clips[r.random_range(0..clips.len())];
            losses.push(reconstruction_loss(&codec, &mut g, &p, clip));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let loss = g.scale(total, 1.0 / losses.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("reconstruction loss became {value}"),
            });
        }
        report.losses.push(value);
        let grads = g.backward(loss);
        let gs = p.grads(&grads, &codec.params);
        adam.step(&mut codec.params, &gs);
    }
    codec.fit_stats(&clips);
    if !held.is_empty() {
        report.heldout_psnr = codec.reconstruction_psnr(&held)?;
    }
    Ok((codec, report))
}
