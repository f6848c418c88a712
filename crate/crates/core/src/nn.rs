//! Parameters, layers and the Adam optimizer.
//!
//! Parameter and optimizer values are kept at `f32` precision (arithmetic
//! runs in `f64` and is rounded on every update), so the `f32` checkpoint
//! blob is lossless and a resumed run is bit-identical to an uninterrupted
//! one.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::{update_digest, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        t.round_to_f32();
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and raw bits of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            update_digest(&mut h, t);
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on the tape, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies every tensor whose name also exists in `other` with the same
    /// shape; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, t) in other.names.iter().zip(&other.tensors) {
            if let Some(id) = self.id(name) {
                if self.tensors[id.0].shape() == t.shape() {
                    self.tensors[id.0] = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        Self { names, tensors }
    }
}

/// Tape handles for a [`ParamStore`] bound into one [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradients for every parameter, zero where none flowed.
    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }
}

pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Normal init with std `gain / sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn([fan_in, fan_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([fan_out])));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self { w, b: Some(b) }
    }

    pub fn identity(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let mut eye = Tensor::zeros([width, width]);
        for i in 0..width {
            eye.data_mut()[i * width + i] = 1.0;
        }
        let w = store.add(format!("{name}.w"), eye);
        let b = store.add(format!("{name}.b"), Tensor::zeros([width]));
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

/// Stride-1 "same" convolution over channels-last `[n, h, w, c]` grids.
#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: [usize; 3],
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * cin;
        let std = gain / (fan_in as f64).sqrt();
        let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
        let w = store.add(format!("{name}.w"), Tensor::randn(shape, std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, kernel: [usize; 3], cin: usize, cout: usize) -> Self {
        let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
        let w = store.add(format!("{name}.w"), Tensor::zeros(shape));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv3d(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn from_state(config: AdamConfig, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Self {
        Self { config, m, v, t }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        let norm = grad_norm(grads);
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gc = gv * clip;
                *mv = (beta1 * *mv + (1.0 - beta1) * gc) as f32 as f64;
                *vv = (beta2 * *vv + (1.0 - beta2) * gc * gc) as f32 as f64;
                let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *pv = (*pv - update) as f32 as f64;
            }
        }
        norm
    }
}
