//! Noising along the affine interpolant `z_t = (1-σ(t))·z + σ(t)·ε`,
//! timestep sampling, the noise-prediction loss and an Euler sampler.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::patchify;
use crate::dit::{DiT, ForwardHook, NoHook};
use crate::error::{ensure, Error, Result};
use crate::nn::Bound;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Smallest `1 - σ(t)` the sampler divides by.
pub const MIN_SIGNAL: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSchedule {
    /// `σ(t) = t`
    #[default]
    Linear,
    /// `σ(t) = s·t / (1 + (s-1)·t)`, which spends more time at high noise
    /// for `s > 1`.
    Shifted { shift: f64 },
}

impl NoiseSchedule {
    pub fn sigma(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => t,
            NoiseSchedule::Shifted { shift } => {
                if t <= 0.0 || t >= 1.0 {
                    t
                } else {
                    shift * t / (1.0 + (shift - 1.0) * t)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let NoiseSchedule::Shifted { shift } = *self {
            ensure!(
                shift > 0.0 && shift.is_finite(),
                Config,
                "schedule shift must be positive, got {shift}"
            );
        }
        Ok(())
    }
}

/// Standard-normal noise shaped like a latent, reproducible from its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub eps: Tensor,
    pub seed: u64,
}

impl NoiseDraw {
    pub fn new(shape: &[usize], seed: u64) -> Self {
        Self {
            eps: Tensor::randn(shape.to_vec(), 1.0, &mut rng::seeded(seed)),
            seed,
        }
    }
}

/// `(1-σ(t))·z + σ(t)·ε`; the endpoints return `z` and `ε` exactly.
pub fn noise_latent(z: &Tensor, t: f64, eps: &Tensor, schedule: NoiseSchedule) -> Result<Tensor> {
    ensure!(
        z.shape() == eps.shape(),
        Dimension,
        "noise shape {:?} differs from latent {:?}",
        eps.shape(),
        z.shape()
    );
    ensure!((0.0..=1.0).contains(&t), Domain, "timestep {t} outside [0, 1]");
    let s = schedule.sigma(t);
    if s == 0.0 {
        return Ok(z.clone());
    }
    if s == 1.0 {
        return Ok(eps.clone());
    }
    Ok(z.zip_map(eps, |a, e| (1.0 - s) * a + s * e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimestepSampler {
    Uniform { lo: f64, hi: f64 },
    LogitNormal { mean: f64, std: f64 },
}

impl Default for TimestepSampler {
    fn default() -> Self {
        TimestepSampler::Uniform { lo: 0.001, hi: 0.999 }
    }
}

impl TimestepSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimestepSampler::Uniform { lo, hi } => rng.random_range(lo..hi),
            TimestepSampler::LogitNormal { mean, std } => {
                let x: f64 = Normal::new(mean, std).expect("validated std").sample(rng);
                (1.0 / (1.0 + (-x).exp())).clamp(1e-6, 1.0 - 1e-6)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimestepSampler::Uniform { lo, hi } => {
                ensure!(
                    0.0 < lo && lo < hi && hi < 1.0,
                    Config,
                    "uniform timestep range ({lo}, {hi}) must lie in (0, 1)"
                )
            }
            TimestepSampler::LogitNormal { std, .. } => {
                ensure!(
                    std > 0.0 && std.is_finite(),
                    Config,
                    "logit-normal std must be positive"
                )
            }
        }
        Ok(())
    }
}

/// What the network is trained to output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// The noise `ε`.
    #[default]
    Epsilon,
    /// The interpolant velocity `ε - z`.
    Velocity,
}

impl PredictionMode {
    pub(crate) fn target(&self, z: &Tensor, eps: &Tensor) -> Tensor {
        match self {
            PredictionMode::Epsilon => eps.clone(),
            PredictionMode::Velocity => eps.zip_map(z, |e, a| e - a),
        }
    }

    /// `(ẑ, ε̂)` implied by a prediction at noise level `σ`.
    fn estimates(&self, z_t: &Tensor, pred: &Tensor, sigma: f64) -> (Tensor, Tensor) {
        match self {
            PredictionMode::Epsilon => {
                let denom = (1.0 - sigma).max(MIN_SIGNAL);
                (z_t.zip_map(pred, |x, e| (x - sigma * e) / denom), pred.clone())
            }
            PredictionMode::Velocity => (
                z_t.zip_map(pred, |x, v| x - sigma * v),
                z_t.zip_map(pred, |x, v| x + (1.0 - sigma) * v),
            ),
        }
    }
}

/// Anything that maps `(z_t, t, class)` to a prediction of the latent's shape.
pub trait Denoiser {
    fn predict(&mut self, z_t: &Tensor, t: f64, class: usize) -> Result<Tensor>;
}

impl Denoiser for DiT {
    fn predict(&mut self, z_t: &Tensor, t: f64, class: usize) -> Result<Tensor> {
        DiT::predict(self, z_t, t, class, &[], &mut NoHook).map(|(p, _)| p)
    }
}

impl Denoiser for &DiT {
    fn predict(&mut self, z_t: &Tensor, t: f64, class: usize) -> Result<Tensor> {
        DiT::predict(self, z_t, t, class, &[], &mut NoHook).map(|(p, _)| p)
    }
}

/// Mean squared error between the prediction and its target, evaluated
/// without a tape.
pub fn diffusion_loss(
    model: &mut dyn Denoiser,
    z: &Tensor,
    class: usize,
    t: f64,
    eps: &Tensor,
    schedule: NoiseSchedule,
    mode: PredictionMode,
) -> Result<f64> {
    let z_t = noise_latent(z, t, eps, schedule)?;
    let pred = model.predict(&z_t, t, class)?;
    ensure!(
        pred.shape() == z.shape(),
        Dimension,
        "prediction shape {:?} vs latent {:?}",
        pred.shape(),
        z.shape()
    );
    if !pred.is_finite() {
        return Err(non_finite("prediction", &pred, t));
    }
    let target = mode.target(z, eps);
    Ok(pred.zip_map(&target, |a, b| (a - b) * (a - b)).mean())
}

fn non_finite(what: &str, x: &Tensor, t: f64) -> Error {
    let bad = x.data().iter().filter(|v| !v.is_finite()).count();
    Error::Numeric(format!(
        "{what} at t={t:.4} has {bad} non-finite of {} values",
        x.numel()
    ))
}

/// Everything the tape-based loss needs besides the model.
pub struct LossInputs<'a> {
    pub z: &'a Tensor,
    pub eps: &'a Tensor,
    pub t: f64,
    pub class: usize,
    pub schedule: NoiseSchedule,
    pub mode: PredictionMode,
}

/// Diffusion loss on the tape, plus the requested features of the same
/// forward pass.
pub fn diffusion_loss_graph(
    g: &mut Graph,
    model: &DiT,
    p: &Bound,
    inputs: &LossInputs,
    taps: &[usize],
    hook: &mut dyn ForwardHook,
) -> Result<(Var, Vec<(usize, Var)>)> {
    let z_t = noise_latent(inputs.z, inputs.t, inputs.eps, inputs.schedule)?;
    let patch = model.config.patch;
    let tokens = g.constant(patchify(&z_t, patch)?);
    let out = model.forward(g, p, tokens, inputs.t, inputs.class, taps, hook)?;
    if !g.value(out.prediction).is_finite() {
        return Err(non_finite("prediction", g.value(out.prediction), inputs.t));
    }
    let target = g.constant(patchify(&inputs.mode.target(inputs.z, inputs.eps), patch)?);
    Ok((g.mse(out.prediction, target), out.features))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: NoiseSchedule,
    pub mode: PredictionMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            schedule: NoiseSchedule::Linear,
            mode: PredictionMode::Epsilon,
        }
    }
}

/// Timesteps `t_start · (1 - k/steps)`, `k = 0..=steps`.
pub fn time_grid(t_start: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| {
            if k == steps {
                0.0
            } else {
                t_start * (1.0 - k as f64 / steps as f64)
            }
        })
        .collect()
}

/// Integrates from `z_start` at `t_start` down to `t = 0`. `on_step` sees
/// `(k, t_k, z_k)` before every model call and once more for the result.
pub fn sample_from(
    model: &mut dyn Denoiser,
    z_start: &Tensor,
    t_start: f64,
    class: usize,
    config: &SamplerConfig,
    on_step: &mut dyn FnMut(usize, f64, &Tensor),
) -> Result<Tensor> {
    ensure!(config.steps >= 1, Config, "sampler needs at least one step");
    ensure!(
        (0.0..=1.0).contains(&t_start),
        Domain,
        "start timestep {t_start} outside [0, 1]"
    );
    let grid = time_grid(t_start, config.steps);
    let mut z = z_start.clone();
    for k in 0..config.steps {
        let (t, t_next) = (grid[k], grid[k + 1]);
        on_step(k, t, &z);
        let pred = model.predict(&z, t, class)?;
        if !pred.is_finite() {
            return Err(Error::Numeric(format!(
                "sampler step {k} (t={t:.4}): non-finite prediction"
            )));
        }
        let (z_hat, eps_hat) = config.mode.estimates(&z, &pred, config.schedule.sigma(t));
        let s_next = config.schedule.sigma(t_next);
        z = if s_next == 0.0 {
            z_hat
        } else {
            z_hat.zip_map(&eps_hat, |a, e| (1.0 - s_next) * a + s_next * e)
        };
        if !z.is_finite() {
            return Err(Error::Numeric(format!(
                "sampler step {k} (t={t:.4}): non-finite latent"
            )));
        }
    }
    on_step(config.steps, 0.0, &z);
    Ok(z)
}

/// Samples from pure noise at `t = 1`; the noise comes from `seed`.
pub fn sample(
    model: &mut dyn Denoiser,
    shape: &[usize],
    class: usize,
    config: &SamplerConfig,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f64, &Tensor),
) -> Result<Tensor> {
    let z = Tensor::randn(shape.to_vec(), 1.0, &mut rng::stream(seed, 0, Purpose::Sample));
    sample_from(model, &z, 1.0, class, config, on_step)
}
