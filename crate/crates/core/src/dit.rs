//! A small diffusion transformer with full spatiotemporal attention.
//!
//! Blocks follow the adaptive-layer-norm design with zero-initialized
//! gates: each block normalizes, modulates with a shift/scale predicted
//! from the conditioning vector, runs attention (then an MLP) and adds
//! the gated result back. The output head is zero-initialized, so an
//! untrained model predicts zeros.
//!
//! Conditioning is a learned class embedding added to the timestep
//! embedding. Positions are encoded with per-axis sinusoids, summed.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Manifest};
use crate::codec::{patchify, unpatchify};
use crate::error::{ensure, Error, Result};
use crate::nn::{Adam, Bound, Linear, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Latent channels of the codec this model runs on.
    pub latent_channels: usize,
    /// Patchify size applied to latents before the transformer.
    pub patch: usize,
    /// Block indices whose outputs may be tapped.
    pub tap_indices: Vec<usize>,
    /// Also allow tapping block `depth - 2`.
    pub penultimate_tap: bool,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub pos_enc: bool,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            dim: 64,
            heads: 4,
            latent_channels: 16,
            patch: 1,
            tap_indices: vec![0, 2, 4, 6],
            penultimate_tap: true,
            num_classes: 4,
            mlp_ratio: 4,
            pos_enc: true,
        }
    }
}

impl DiTConfig {
    /// Block indices the production-scale model taps for guidance.
    pub const PRODUCTION_TAPS: [usize; 4] = [0, 7, 14, 21];
    pub const PRODUCTION_DEPTH: usize = 28;

    pub fn token_channels(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn penultimate(&self) -> usize {
        self.depth.saturating_sub(2)
    }

    /// All indices a forward pass may tap.
    pub fn tappable(&self) -> Vec<usize> {
        let mut v = self.tap_indices.clone();
        if self.penultimate_tap && !v.contains(&self.penultimate()) {
            v.push(self.penultimate());
        }
        v.sort_unstable();
        v
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, Config, "DiT depth must be at least 1");
        ensure!(
            self.dim >= 2 && self.dim.is_multiple_of(2),
            Config,
            "DiT width must be even, got {}",
            self.dim
        );
        ensure!(
            self.heads >= 1 && self.dim.is_multiple_of(self.heads),
            Config,
            "{} heads do not divide width {}",
            self.heads,
            self.dim
        );
        ensure!(
            self.patch >= 1 && self.latent_channels >= 1,
            Config,
            "patch and channels must be positive"
        );
        ensure!(self.num_classes >= 2, Config, "need at least 2 condition classes");
        ensure!(self.mlp_ratio >= 1, Config, "MLP ratio must be positive");
        for &i in &self.tap_indices {
            ensure!(i < self.depth, Config, "tap index {i} outside depth {}", self.depth);
        }
        Ok(())
    }
}

/// Per-channel scale and shift predicted from the time embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    pub alpha: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub embedding: Tensor,
    /// Pre-attention modulation of each block.
    pub blocks: Vec<ModulationParams>,
}

/// Output of one block, tagged with where and when it was read.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub data: Tensor,
    pub block_index: usize,
    pub timestep: f64,
}

/// Callbacks that let other modules splice into a forward pass.
pub trait ForwardHook {
    /// Sees the embedded tokens (after positional encoding).
    fn after_embed(&mut self, _g: &mut Graph, x: Var, _cond: Var) -> Result<Var> {
        Ok(x)
    }

    /// Sees the input of block `index`; the returned value replaces it.
    fn before_block(&mut self, _g: &mut Graph, _index: usize, x: Var, _cond: Var) -> Result<Var> {
        Ok(x)
    }
}

pub struct NoHook;

impl ForwardHook for NoHook {}

#[derive(Clone, Copy, Debug)]
struct Block {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layers {
    embed: Linear,
    t1: Linear,
    t2: Linear,
    classes: ParamId,
    blocks: Vec<Block>,
    final_ada: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct DiT {
    pub config: DiTConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Prediction and requested taps from one forward pass on the tape.
pub struct ForwardOut {
    /// `[n, h, w, token_channels]`.
    pub prediction: Var,
    pub features: Vec<(usize, Var)>,
    /// Conditioning vector (time plus class), `[dim]`.
    pub cond: Var,
}

impl DiT {
    pub fn new<R: Rng + ?Sized>(config: DiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let (d, tc) = (config.dim, config.token_channels());
        let embed = Linear::new(&mut p, "embed", tc, d, 1.0, true, rng);
        let t1 = Linear::new(&mut p, "time.fc1", d, d, 1.0, true, rng);
        let t2 = Linear::new(&mut p, "time.fc2", d, d, 1.0, true, rng);
        let classes = p.add("classes", Tensor::randn([config.num_classes, d], 0.5, rng));
        let blocks = (0..config.depth)
            .map(|i| Block {
                ada: Linear::zeros(&mut p, &format!("blocks.{i}.ada"), d, 6 * d),
                qkv: Linear::new(&mut p, &format!("blocks.{i}.qkv"), d, 3 * d, 1.0, true, rng),
                proj: Linear::new(&mut p, &format!("blocks.{i}.proj"), d, d, 1.0, true, rng),
                fc1: Linear::new(
                    &mut p,
                    &format!("blocks.{i}.fc1"),
                    d,
                    config.mlp_ratio * d,
                    1.0,
                    true,
                    rng,
                ),
                fc2: Linear::new(
                    &mut p,
                    &format!("blocks.{i}.fc2"),
                    config.mlp_ratio * d,
                    d,
                    1.0,
                    true,
                    rng,
                ),
            })
            .collect();
        let final_ada = Linear::zeros(&mut p, "final.ada", d, 2 * d);
        let out = Linear::zeros(&mut p, "final.out", d, tc);
        Ok(Self {
            config,
            params: p,
            layers: Layers {
                embed,
                t1,
                t2,
                classes,
                blocks,
                final_ada,
                out,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_t(t: f64) -> Result<()> {
        ensure!((0.0..=1.0).contains(&t), Domain, "timestep {t} outside [0, 1]");
        Ok(())
    }

    fn cond_vector(&self, g: &mut Graph, p: &Bound, t: f64, class: usize) -> Result<Var> {
        Self::check_t(t)?;
        ensure!(
            class < self.config.num_classes,
            Config,
            "class {class} outside {} classes",
            self.config.num_classes
        );
        let freq = g.constant(timestep_sinusoid(t, self.config.dim));
        let h = self.layers.t1.forward(g, p, freq);
        let h = g.silu(h);
        let temb = self.layers.t2.forward(g, p, h);
        let d = self.config.dim;
        let idx: Rc<[usize]> = (class * d..(class + 1) * d).collect::<Vec<_>>().into();
        let cls = g.gather(p[self.layers.classes], idx, [d]);
        Ok(g.add(temb, cls))
    }

    /// Time embedding and per-block pre-attention modulation at `t`.
    pub fn time_embed(&self, t: f64, class: usize) -> Result<TimeEmbedding> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let cond = self.cond_vector(&mut g, &p, t, class)?;
        let act = g.silu(cond);
        let d = self.config.dim;
        let blocks = self
            .layers
            .blocks
            .iter()
            .map(|b| {
                let m = b.ada.forward(&mut g, &p, act);
                let v = g.value(m).data();
                ModulationParams {
                    beta: Tensor::new([d], v[..d].to_vec()),
                    alpha: Tensor::new([d], v[d..2 * d].to_vec()),
                }
            })
            .collect();
        Ok(TimeEmbedding {
            embedding: g.value(cond).clone(),
            blocks,
        })
    }

    /// Runs the transformer on a `[n, h, w, token_channels]` token grid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        t: f64,
        class: usize,
        taps: &[usize],
        hook: &mut dyn ForwardHook,
    ) -> Result<ForwardOut> {
        let shape = g.shape(tokens).to_vec();
        ensure!(
            shape.len() == 4 && shape[3] == self.config.token_channels(),
            Dimension,
            "token grid {shape:?} does not carry {} channels",
            self.config.token_channels()
        );
        let allowed = self.config.tappable();
        for &i in taps {
            ensure!(
                i < self.config.depth && allowed.contains(&i),
                Config,
                "tap {i} not available (depth {}, taps {allowed:?})",
                self.config.depth
            );
        }
        let cond = self.cond_vector(g, p, t, class)?;
        let act = g.silu(cond);
        let (grid, d) = ([shape[0], shape[1], shape[2]], self.config.dim);
        let rows = grid.iter().product::<usize>();
        let mut x = self.layers.embed.forward(g, p, tokens);
        x = g.reshape(x, [rows, d]);
        if self.config.pos_enc {
            let pe = g.constant(positional_encoding(grid, d));
            x = g.add(x, pe);
        }
        x = hook.after_embed(g, x, cond)?;
        let mut features = Vec::with_capacity(taps.len());
        for (i, b) in self.layers.blocks.iter().enumerate() {
            x = hook.before_block(g, i, x, cond)?;
            let m = b.ada.forward(g, p, act);
            let chunk = |g: &mut Graph, k: usize| g.gather(m, chunk_index(k, d), [d]);
            let (sh1, sc1, g1) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
            let (sh2, sc2, g2) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));
            let h = modulate(g, x, sh1, sc1);
            let h = b.qkv.forward(g, p, h);
            let h = g.attention(h, self.config.heads);
            let h = b.proj.forward(g, p, h);
            let h = g.mul_row(h, g1);
            x = g.add(x, h);
            let h = modulate(g, x, sh2, sc2);
            let h = b.fc1.forward(g, p, h);
            let h = g.gelu(h);
            let h = b.fc2.forward(g, p, h);
            let h = g.mul_row(h, g2);
            x = g.add(x, h);
            if taps.contains(&i) {
                let f = g.reshape(x, [grid[0], grid[1], grid[2], d]);
                features.push((i, f));
            }
        }
        let m = self.layers.final_ada.forward(g, p, act);
        let sh = g.gather(m, chunk_index(0, d), [d]);
        let sc = g.gather(m, chunk_index(1, d), [d]);
        let h = modulate(g, x, sh, sc);
        let out = self.layers.out.forward(g, p, h);
        let prediction = g.reshape(out, [grid[0], grid[1], grid[2], self.config.token_channels()]);
        // Keep taps in request order.
        features.sort_by_key(|(i, _)| taps.iter().position(|j| j == i));
        Ok(ForwardOut {
            prediction,
            features,
            cond,
        })
    }

    /// Inference on a latent grid `[n, h, w, c]`: patchify, forward,
    /// unpatchify. Returns the prediction and the requested features.
    pub fn predict(
        &self,
        latent: &Tensor,
        t: f64,
        class: usize,
        taps: &[usize],
        hook: &mut dyn ForwardHook,
    ) -> Result<(Tensor, Vec<FeatureTensor>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let tokens = g.constant(patchify(latent, self.config.patch)?);
        let out = self.forward(&mut g, &p, tokens, t, class, taps, hook)?;
        let pred = unpatchify(g.value(out.prediction), self.config.patch, self.config.latent_channels)?;
        let feats = out
            .features
            .iter()
            .map(|&(i, v)| FeatureTensor {
                data: g.value(v).clone(),
                block_index: i,
                timestep: t,
            })
            .collect();
        Ok((pred, feats))
    }

    pub fn save(&self, dir: &Path, step: u64, seed: u64, adam: Option<&Adam>, metrics: &[(&str, f64)]) -> Result<()> {
        let mut m = Manifest::new("dit", &self.config, step, seed)?;
        for (k, v) in metrics {
            m.metrics.insert((*k).to_string(), *v);
        }
        checkpoint::save(dir, m, &self.params, adam)
    }

    /// Loads a checkpoint; returns the model, its optimizer state if saved,
    /// and the manifest.
    pub fn load(dir: &Path) -> Result<(Self, Option<Adam>, Manifest)> {
        let manifest = checkpoint::load_manifest(dir)?;
        let config: DiTConfig = manifest.config_as()?;
        let mut model = DiT::new(config, &mut rng::seeded(0))?;
        let loaded = checkpoint::load_into(dir, "dit", &mut model.params)?;
        Ok((model, loaded.adam, loaded.manifest))
    }

    /// Copies every parameter whose name and shape match `other`.
    pub fn init_from(&mut self, other: &DiT) -> usize {
        self.params.copy_matching(&other.params)
    }
}

pub(crate) fn chunk_index(k: usize, d: usize) -> Rc<[usize]> {
    (k * d..(k + 1) * d).collect::<Vec<_>>().into()
}

/// `LN(x) ⊙ (1 + scale) + shift`.
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x);
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul_row(h, s);
    g.add_row(h, shift)
}

/// `[cos(1000t·ω_k), sin(1000t·ω_k)]` with `ω_k = 10000^(-k/(d/2))`.
pub fn timestep_sinusoid(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let x = 1000.0 * t;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = (x * w).cos();
        v[half + k] = (x * w).sin();
    }
    Tensor::new([dim], v)
}

/// Sum of per-axis sinusoids over integer positions; each axis uses its
/// own frequency ladder (offset by a third of a step per axis) so the
/// three encodings are not interchangeable.
pub fn positional_encoding(grid: [usize; 3], dim: usize) -> Tensor {
    let half = dim / 2;
    let freq = |axis: usize, k: usize| (-(10000f64.ln()) * (k as f64 + axis as f64 / 3.0) / half as f64).exp();
    let [n, h, w] = grid;
    let mut out = Tensor::zeros([n * h * w, dim]);
    for (row, chunk) in out.data_mut().chunks_mut(dim).enumerate() {
        let pos = [row / (h * w), (row / w) % h, row % w];
        for (axis, &p) in pos.iter().enumerate() {
            for k in 0..half {
                let a = p as f64 * freq(axis, k);
                chunk[k] += a.sin();
                chunk[half + k] += a.cos();
            }
        }
    }
    // Scale to unit variance per channel on average (three summed terms).
    out.scaled(1.0 / 3f64.sqrt())
}

pub fn features_to_tensors(f: &[FeatureTensor]) -> Vec<Tensor> {
    f.iter().map(|x| x.data.clone()).collect()
}

/// Checks that a tap set is usable by a model config.
pub fn check_taps(config: &DiTConfig, taps: &[usize]) -> Result<()> {
    let allowed = config.tappable();
    for &i in taps {
        if !allowed.contains(&i) {
            return Err(Error::Config(format!(
                "block {i} is not tappable (depth {}, taps {allowed:?})",
                config.depth
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::probe_parameters;

    fn tiny(depth: usize, dim: usize, pos_enc: bool) -> DiT {
        let cfg = DiTConfig {
            depth,
            dim,
            heads: 2,
            latent_channels: 3,
            patch: 1,
            tap_indices: vec![0],
            penultimate_tap: depth >= 2,
            num_classes: 2,
            mlp_ratio: 2,
            pos_enc,
        };
        let mut m = DiT::new(cfg, &mut rng::seeded(7)).unwrap();
        // Give the zero-initialized gates and head some weight so every
        // path is exercised.
        let mut r = rng::seeded(8);
        for (name, t) in m.params.names().to_vec().iter().zip(m.params.tensors_mut()) {
            if name.contains("ada") || name.contains("final") {
                *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut r);
                t.round_to_f32();
            }
        }
        m
    }

    #[test]
    fn taps_and_prediction_shapes() {
        let cfg = DiTConfig {
            latent_channels: 8,
            patch: 2,
            dim: 16,
            heads: 2,
            ..DiTConfig::default()
        };
        let m = DiT::new(cfg, &mut rng::seeded(0)).unwrap();
        let z = Tensor::randn([4, 8, 8, 8], 1.0, &mut rng::seeded(1));
        let (pred, feats) = m.predict(&z, 0.3, 1, &[], &mut NoHook).unwrap();
        assert_eq!(pred.shape(), z.shape());
        assert!(feats.is_empty());
        let (_, feats) = m.predict(&z, 0.3, 1, &[6], &mut NoHook).unwrap();
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0].data.shape(), &[4, 4, 4, 16]);
        assert!(matches!(
            m.predict(&z, 0.3, 1, &[8], &mut NoHook),
            Err(Error::Config(_))
        ));
        assert!(matches!(m.predict(&z, 1.5, 1, &[], &mut NoHook), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_head_predicts_zero() {
        let m = DiT::new(
            DiTConfig {
                dim: 16,
                ..Default::default()
            },
            &mut rng::seeded(0),
        )
        .unwrap();
        let z = Tensor::randn([1, 2, 2, 16], 1.0, &mut rng::seeded(1));
        let (pred, _) = m.predict(&z, 0.5, 0, &[], &mut NoHook).unwrap();
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_do_not_change_prediction_and_forward_is_deterministic() {
        let m = tiny(3, 8, true);
        let z = Tensor::randn([2, 2, 2, 3], 1.0, &mut rng::seeded(3));
        let (a, _) = m.predict(&z, 0.4, 1, &[], &mut NoHook).unwrap();
        let (b, f) = m.predict(&z, 0.4, 1, &[1, 0], &mut NoHook).unwrap();
        let (c, _) = m.predict(&z, 0.4, 1, &[], &mut NoHook).unwrap();
        assert!(a.bitwise_eq(&b) && a.bitwise_eq(&c));
        assert_eq!(f.iter().map(|x| x.block_index).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn time_embedding_is_smooth_and_shaped() {
        let m = tiny(2, 8, true);
        let e0 = m.time_embed(0.0, 0).unwrap();
        let e1 = m.time_embed(1.0, 0).unwrap();
        assert!(e0.embedding.max_abs_diff(&e1.embedding) > 0.0);
        assert_eq!(e0.blocks.len(), 2);
        assert!(e0
            .blocks
            .iter()
            .all(|b| b.alpha.shape() == [8] && b.beta.shape() == [8]));
        for &t in &[0.1, 0.4, 0.45] {
            let a = m.time_embed(t, 1).unwrap().embedding;
            let b = m.time_embed(t + 1e-4, 1).unwrap().embedding;
            let c = m.time_embed(t + 0.5, 1).unwrap().embedding;
            let near = a.zip_map(&b, |x, y| x - y).sq_norm().sqrt();
            let far = a.zip_map(&c, |x, y| x - y).sq_norm().sqrt();
            assert!(near < 0.05 * far, "t={t}: {near} vs {far}");
        }
        assert!(matches!(m.time_embed(-0.1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn permuting_tokens_permutes_output_without_positions() {
        let m = tiny(2, 8, false);
        let z = Tensor::randn([1, 2, 2, 3], 1.0, &mut rng::seeded(4));
        let perm = [2usize, 0, 3, 1];
        let mut zp = z.clone();
        for (dst, &src) in perm.iter().enumerate() {
            zp.data_mut()[dst * 3..dst * 3 + 3].copy_from_slice(&z.data()[src * 3..src * 3 + 3]);
        }
        let (a, _) = m.predict(&z, 0.3, 0, &[], &mut NoHook).unwrap();
        let (b, _) = m.predict(&zp, 0.3, 0, &[], &mut NoHook).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((b.data()[dst * 3 + c] - a.data()[src * 3 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_computation() {
        // One head, width 2, four tokens: q = k = v = x.
        let x = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -0.5]];
        let mut qkv = Vec::new();
        for r in &x {
            for _ in 0..3 {
                qkv.extend_from_slice(r);
            }
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::new([4, 6], qkv));
        let out = g.attention(v, 1);
        let s = 1.0 / 2f64.sqrt();
        for i in 0..4 {
            let w: Vec<f64> = (0..4)
                .map(|j| ((x[i][0] * x[j][0] + x[i][1] * x[j][1]) * s).exp())
                .collect();
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                let want: f64 = (0..4).map(|j| w[j] / z * x[j][c]).sum();
                assert!((g.value(out).data()[i * 2 + c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny(1, 8, true);
        let z = Tensor::randn([1, 2, 2, 3], 1.0, &mut rng::seeded(5));
        let target = Tensor::randn([1, 2, 2, 3], 1.0, &mut rng::seeded(6));
        let loss_of = |store: &ParamStore, grads: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, grads);
            let tok = g.constant(z.clone());
            let out = m.forward(&mut g, &p, tok, 0.3, 1, &[], &mut NoHook).unwrap();
            let tgt = g.constant(target.clone());
            let l = g.mse(out.prediction, tgt);
            (g, p, l)
        };
        let (g, p, l) = loss_of(&m.params, true);
        let grads = p.grads(&g.backward(l), &m.params);
        let report = probe_parameters(&m.params, &grads, 30, 1, |s| {
            let (g, _, l) = loss_of(s, false);
            g.value(l).item()
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_init_from() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(2, 8, true);
        m.save(dir.path(), 5, 2, None, &[]).unwrap();
        let (back, adam, man) = DiT::load(dir.path()).unwrap();
        assert!(adam.is_none());
        assert_eq!(man.step, 5);
        assert_eq!(back.params.checksum(), m.params.checksum());
        let mut fresh = DiT::new(m.config.clone(), &mut rng::seeded(99)).unwrap();
        assert_eq!(fresh.init_from(&m), m.params.len());
        assert_eq!(fresh.params.checksum(), m.params.checksum());
    }

    #[test]
    fn positional_encoding_distinguishes_axes() {
        let pe = positional_encoding([2, 2, 2], 8);
        let row = |i: usize| &pe.data()[i * 8..(i + 1) * 8];
        // (0,0,1) vs (0,1,0) vs (1,0,0)
        assert_ne!(row(1), row(2));
        assert_ne!(row(2), row(4));
        assert_ne!(row(1), row(4));
    }
}
