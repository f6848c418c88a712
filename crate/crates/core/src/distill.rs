//! Feature distillation from a frozen teacher living in a different latent
//! space: a projector that maps student features onto the teacher's token
//! grid, the negative-cosine feature loss, and the joint training step.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{feature_cka, SimilarityEntry, SimilarityReport};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Manifest};
use crate::dit::{DiT, NoHook};
use crate::error::{ensure, Error, Result};
use crate::flow::{diffusion_loss_graph, noise_latent, LossInputs};
use crate::nn::{Adam, Bound, Conv3d, Linear, ParamStore};
use crate::resample::{shared_matrix, Kernel};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::train::{draw_noise, fail, EncodedSet, TrainConfig, TrainingSet};

/// Norm floor of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// How the projector's output layer starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalInit {
    /// Exactly zero; the projector outputs zeros until trained.
    Zero,
    /// Normal with std `0.1 / sqrt(fan_in)`.
    #[default]
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    /// Student feature grid `[n, h, w]`.
    pub in_grid: [usize; 3],
    /// Teacher feature grid `[n, h, w]`.
    pub out_grid: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    #[serde(default)]
    pub final_init: FinalInit,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (a, b) = (self.in_grid[axis], self.out_grid[axis]);
            ensure!(a > 0 && b > 0, Config, "projector grids must be non-empty");
            let (hi, lo) = (a.max(b), a.min(b));
            ensure!(
                hi % lo == 0 && (hi / lo).is_power_of_two() && hi / lo <= 8,
                Config,
                "projector cannot map axis {axis} from {a} to {b}: ratio must be a power of two up to 8"
            );
        }
        ensure!(
            self.in_channels > 0 && self.out_channels > 0 && self.hidden > 0,
            Config,
            "projector widths must be positive"
        );
        Ok(())
    }
}

/// Interpolation to the teacher grid, then a spatial 1×3×3 and a temporal
/// 3×1×1 convolution (each followed by GELU), then a channel map.
#[derive(Clone, Debug)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub params: ParamStore,
    spatial: Conv3d,
    temporal: Conv3d,
    out: Linear,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(config: ProjectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let (ci, h, co) = (config.in_channels, config.hidden, config.out_channels);
        let spatial = Conv3d::new(&mut p, "proj.spatial", [1, 3, 3], ci, h, 1.0, rng);
        let temporal = Conv3d::new(&mut p, "proj.temporal", [3, 1, 1], h, h, 1.0, rng);
        let out = match config.final_init {
            FinalInit::Zero => Linear::zeros(&mut p, "proj.out", h, co),
            FinalInit::Small => Linear::new(&mut p, "proj.out", h, co, 0.1, true, rng),
        };
        Ok(Self {
            config,
            params: p,
            spatial,
            temporal,
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        ensure!(
            s.len() == 4 && s[..3] == self.config.in_grid && s[3] == self.config.in_channels,
            Config,
            "student feature {s:?} does not match projector input {:?}x{}",
            self.config.in_grid,
            self.config.in_channels
        );
        let mut h = x;
        for axis in 0..3 {
            let (a, b) = (self.config.in_grid[axis], self.config.out_grid[axis]);
            if a != b {
                h = g.resample(h, axis, shared_matrix(a, b, Kernel::Linear));
            }
        }
        let h = self.spatial.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.temporal.forward(g, p, h);
        let h = g.gelu(h);
        Ok(self.out.forward(g, p, h))
    }

    /// Projects a feature tensor without recording gradients.
    pub fn project(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(f.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

/// `−mean_tokens cos(f_tea, projected)` on the tape.
pub fn distill_loss_graph(g: &mut Graph, projected: Var, teacher: Var) -> Result<Var> {
    ensure!(
        g.shape(projected) == g.shape(teacher),
        Dimension,
        "projected {:?} vs teacher {:?}",
        g.shape(projected),
        g.shape(teacher)
    );
    let cos = g.cosine_rows(projected, teacher, COSINE_EPS);
    let m = g.mean(cos);
    Ok(g.scale(m, -1.0))
}

/// `−mean_tokens cos(f_tea, projected)`, evaluated directly.
pub fn distill_loss(teacher: &Tensor, projected: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(projected.clone());
    let b = g.constant(teacher.clone());
    let l = distill_loss_graph(&mut g, a, b)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
#[derive(Default)]
pub enum TimestepStrategy {
    /// Teacher noised at the student's timestep.
    #[default]
    Synchronized,
    /// Teacher always noised at `tau`.
    Fixed { tau: f64 },
}

impl TimestepStrategy {
    pub fn teacher_t(&self, t_student: f64) -> f64 {
        match *self {
            TimestepStrategy::Synchronized => t_student,
            TimestepStrategy::Fixed { tau } => tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TimestepStrategy::Fixed { tau } = *self {
            ensure!(
                tau > 0.0 && tau < 1.0,
                Config,
                "fixed teacher timestep {tau} must lie in (0, 1)"
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub train: TrainConfig,
    pub strategy: TimestepStrategy,
    pub lambda_dis: f64,
    pub projector_hidden: usize,
    pub projector_init: FinalInit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            strategy: TimestepStrategy::Synchronized,
            lambda_dis: 1.0,
            projector_hidden: 64,
            projector_init: FinalInit::Small,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.strategy.validate()?;
        ensure!(
            self.lambda_dis >= 0.0 && self.lambda_dis.is_finite(),
            Config,
            "lambda_dis must be non-negative, got {}",
            self.lambda_dis
        );
        Ok(())
    }
}

/// Student model, projector and their optimizers.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub student: DiT,
    pub projector: Projector,
    pub adam_student: Adam,
    pub adam_projector: Adam,
    pub step: u64,
}

/// Feature grid a model produces for a latent of `latent_shape`.
pub fn feature_grid(model: &DiT, latent_shape: &[usize]) -> [usize; 3] {
    let p = model.config.patch;
    [latent_shape[0], latent_shape[1] / p, latent_shape[2] / p]
}

impl DistillState {
    /// Builds the projector for a teacher/student pair given one latent
    /// shape from each codec.
    pub fn new(
        student: DiT,
        teacher: &DiT,
        student_latent: &[usize],
        teacher_latent: &[usize],
        cfg: &DistillConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let pc = ProjectorConfig {
            in_grid: feature_grid(&student, student_latent),
            out_grid: feature_grid(teacher, teacher_latent),
            in_channels: student.config.dim,
            out_channels: teacher.config.dim,
            hidden: cfg.projector_hidden,
            final_init: cfg.projector_init,
        };
        let projector = Projector::new(pc, &mut rng::stream(cfg.train.seed, u64::MAX >> 8, Purpose::Init))?;
        Ok(Self {
            adam_student: Adam::new(cfg.train.optim, &student.params),
            adam_projector: Adam::new(cfg.train.optim, &projector.params),
            student,
            projector,
            step: 0,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        self.student
            .save(&dir.join("student"), self.step, seed, Some(&self.adam_student), &[])?;
        let m = Manifest::new("projector", &self.projector.config, self.step, seed)?;
        checkpoint::save(
            &dir.join("projector"),
            m,
            &self.projector.params,
            Some(&self.adam_projector),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (student, adam_student, manifest) = DiT::load(&dir.join("student"))?;
        let pm = checkpoint::load_manifest(&dir.join("projector"))?;
        let mut projector = Projector::new(pm.config_as()?, &mut rng::seeded(0))?;
        let loaded = checkpoint::load_into(&dir.join("projector"), "projector", &mut projector.params)?;
        let missing = || {
            Error::Dependency(format!(
                "distillation checkpoint at {} lacks optimizer state",
                dir.display()
            ))
        };
        Ok(Self {
            student,
            projector,
            adam_student: adam_student.ok_or_else(missing)?,
            adam_projector: loaded.adam.ok_or_else(missing)?,
            step: manifest.step,
        })
    }
}

/// One step's losses and timestep pairs (one entry per sample).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_tea: Vec<f64>,
    pub t_stu: Vec<f64>,
    pub l_dis: f64,
    pub l_diff: f64,
    pub l_total: f64,
}

/// Gradients of the joint objective, before any update.
pub struct DistillGrads {
    pub student: Vec<Tensor>,
    pub projector: Vec<Tensor>,
    pub record: StepRecord,
}

/// Evaluates `λ·L_dis + L_diff` on the batch of `state.step` and returns
/// gradients for the student and the projector. The teacher runs without
/// a tape.
pub fn distill_grads(
    state: &DistillState,
    teacher: &DiT,
    data: &TrainingSet,
    teacher_latents: &EncodedSet,
    student_latents: &EncodedSet,
    cfg: &DistillConfig,
) -> Result<DistillGrads> {
    let step = state.step;
    let seed = cfg.train.seed;
    let refs = data.draw(seed, step, cfg.train.batch_size)?;
    let stu: Vec<(&Tensor, usize)> = refs.iter().map(|&r| student_latents.get(r)).collect();
    let shapes: Vec<&[usize]> = stu.iter().map(|(z, _)| z.shape()).collect();
    let noise = draw_noise(seed, step, &cfg.train.timesteps, &shapes);
    let mut teacher_rng = rng::stream(seed, step, Purpose::TeacherNoise);
    let tea_tap = teacher.config.penultimate();
    let stu_tap = state.student.config.penultimate();

    let mut g = Graph::new();
    let ps = state.student.params.bind(&mut g, true);
    let pp = state.projector.params.bind(&mut g, true);
    let mut dis_terms = Vec::with_capacity(refs.len());
    let mut diff_terms = Vec::with_capacity(refs.len());
    let mut record = StepRecord {
        step,
        t_tea: Vec::new(),
        t_stu: Vec::new(),
        l_dis: 0.0,
        l_diff: 0.0,
        l_total: 0.0,
    };
    for ((r, (z_stu, class)), n) in refs.iter().zip(&stu).zip(&noise) {
        let t_tea = cfg.strategy.teacher_t(n.t);
        let (z_tea, _) = teacher_latents.get(*r);
        let eps_tea = Tensor::randn(z_tea.shape().to_vec(), 1.0, &mut teacher_rng);
        let z_tea_t = noise_latent(z_tea, t_tea, &eps_tea, cfg.train.schedule)?;
        let (_, f_tea) = teacher.predict(&z_tea_t, t_tea, *class, &[tea_tap], &mut NoHook)?;
        let f_tea = g.constant(f_tea.into_iter().next().expect("one tap requested").data);

        let inputs = LossInputs {
            z: z_stu,
            eps: &n.eps,
            t: n.t,
            class: *class,
            schedule: cfg.train.schedule,
            mode: cfg.train.mode,
        };
        let (l_diff, feats) = diffusion_loss_graph(&mut g, &state.student, &ps, &inputs, &[stu_tap], &mut NoHook)
            .map_err(|e| fail(step, e))?;
        let projected = state.projector.forward(&mut g, &pp, feats[0].1)?;
        dis_terms.push(distill_loss_graph(&mut g, projected, f_tea)?);
        diff_terms.push(l_diff);
        record.t_tea.push(t_tea);
        record.t_stu.push(n.t);
    }
    let inv = 1.0 / refs.len() as f64;
    let l_dis = mean_of(&mut g, &dis_terms, inv);
    let l_diff = mean_of(&mut g, &diff_terms, inv);
    let weighted = g.scale(l_dis, cfg.lambda_dis);
    let total = g.add(weighted, l_diff);
    record.l_dis = g.value(l_dis).item();
    record.l_diff = g.value(l_diff).item();
    record.l_total = g.value(total).item();
    if !record.l_total.is_finite() {
        return Err(Error::TrainingFailure {
            step: step as usize,
            reason: format!("distillation loss became {}", record.l_total),
        });
    }
    let grads = g.backward(total);
    Ok(DistillGrads {
        student: ps.grads(&grads, &state.student.params),
        projector: pp.grads(&grads, &state.projector.params),
        record,
    })
}

fn mean_of(g: &mut Graph, terms: &[Var], inv: f64) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, inv)
}

/// One optimizer step on the student and the projector.
pub fn distill_step(
    state: &mut DistillState,
    teacher: &DiT,
    data: &TrainingSet,
    teacher_latents: &EncodedSet,
    student_latents: &EncodedSet,
    cfg: &DistillConfig,
) -> Result<StepRecord> {
    let grads = distill_grads(state, teacher, data, teacher_latents, student_latents, cfg)?;
    let factor = cfg.train.lr_schedule.factor(state.step, cfg.train.steps);
    state.adam_student.config.lr = cfg.train.optim.lr * factor;
    state.adam_projector.config.lr = cfg.train.optim.lr * factor;
    state.adam_student.step(&mut state.student.params, &grads.student);
    state.adam_projector.step(&mut state.projector.params, &grads.projector);
    state.step += 1;
    Ok(grads.record)
}

#[allow(clippy::too_many_arguments)]
pub fn train_distill(
    state: &mut DistillState,
    teacher: &DiT,
    data: &TrainingSet,
    teacher_latents: &EncodedSet,
    student_latents: &EncodedSet,
    cfg: &DistillConfig,
    steps: usize,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<()> {
    cfg.validate()?;
    for _ in 0..steps {
        let rec = distill_step(state, teacher, data, teacher_latents, student_latents, cfg)?;
        on_record(&rec);
    }
    Ok(())
}

/// Linear CKA between teacher features and projected student features at
/// matched timesteps, over the given latent pairs. Noise is drawn from
/// `seed` and shared by every model evaluated with the same seed.
pub fn distill_cka(
    student: &DiT,
    projector: &Projector,
    teacher: &DiT,
    pairs: &[(Tensor, Tensor, usize)],
    ts: &[f64],
    seed: u64,
) -> Result<SimilarityReport> {
    let mut report = SimilarityReport {
        model_a: "teacher".into(),
        model_b: "projected student".into(),
        entries: Vec::new(),
    };
    for (k, &t) in ts.iter().enumerate() {
        let mut r = rng::stream(seed, k as u64, Purpose::Eval);
        let mut fa = Vec::with_capacity(pairs.len());
        let mut fb = Vec::with_capacity(pairs.len());
        for (z_tea, z_stu, class) in pairs {
            let e_tea = Tensor::randn(z_tea.shape().to_vec(), 1.0, &mut r);
            let e_stu = Tensor::randn(z_stu.shape().to_vec(), 1.0, &mut r);
            let schedule = Default::default();
            let (_, ft) = teacher.predict(
                &noise_latent(z_tea, t, &e_tea, schedule)?,
                t,
                *class,
                &[teacher.config.penultimate()],
                &mut NoHook,
            )?;
            let (_, fs) = student.predict(
                &noise_latent(z_stu, t, &e_stu, schedule)?,
                t,
                *class,
                &[student.config.penultimate()],
                &mut NoHook,
            )?;
            fa.push(ft[0].data.clone());
            fb.push(projector.project(&fs[0].data)?);
        }
        report.entries.push(SimilarityEntry {
            tap: teacher.config.penultimate(),
            t,
            cka: feature_cka(&fa, &fb)?,
        });
    }
    Ok(report)
}

/// Checks a run directory for the teacher checkpoint the distillation
/// commands depend on.
pub fn require_teacher(dir: &Path) -> Result<DiT> {
    if !dir.join(checkpoint::MANIFEST).exists() {
        return Err(Error::Dependency(format!(
            "teacher checkpoint missing at {}",
            dir.display()
        )));
    }
    DiT::load(dir).map(|(m, _, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Codec, CodecConfig, CodecRole, CodecSpec};
    use crate::data::ClipSpec;
    use crate::dit::DiTConfig;
    use crate::gradcheck::probe_parameters;
    use crate::train::diffusion_step;
    use crate::train::TrainState;
    use proptest::prelude::*;

    fn small_projector(init: FinalInit) -> Projector {
        let pc = ProjectorConfig {
            in_grid: [2, 2, 2],
            out_grid: [4, 2, 2],
            in_channels: 3,
            out_channels: 4,
            hidden: 5,
            final_init: init,
        };
        Projector::new(pc, &mut rng::seeded(3)).unwrap()
    }

    #[test]
    fn projector_shapes_and_zero_init() {
        let pc = ProjectorConfig {
            in_grid: [4, 8, 8],
            out_grid: [8, 8, 8],
            in_channels: 32,
            out_channels: 24,
            hidden: 16,
            final_init: FinalInit::Zero,
        };
        let p = Projector::new(pc.clone(), &mut rng::seeded(0)).unwrap();
        let out = p.project(&Tensor::zeros([4, 8, 8, 32])).unwrap();
        assert_eq!(out.shape(), &[8, 8, 8, 24]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let bad = ProjectorConfig {
            out_grid: [8, 8, 3],
            ..pc
        };
        assert!(matches!(
            Projector::new(bad, &mut rng::seeded(0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            p.project(&Tensor::zeros([4, 8, 4, 32])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projector_input_gradient_matches_finite_differences() {
        let p = small_projector(FinalInit::Small);
        let x = Tensor::randn([2, 2, 2, 3], 1.0, &mut rng::seeded(4));
        let w = Tensor::randn([4, 2, 2, 4], 1.0, &mut rng::seeded(5));
        let loss = |x: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let b = p.params.bind(&mut g, false);
            let xv = g.variable(x.clone());
            let y = p.forward(&mut g, &b, xv).unwrap();
            let wv = g.constant(w.clone());
            let prod = g.mul(y, wv);
            let l = g.sum(prod);
            let grads = g.backward(l);
            (g.value(l).item(), grads.get(xv).unwrap().clone())
        };
        let (_, analytic) = loss(&x);
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut a = x.clone();
            a.data_mut()[i] += h;
            let mut b = x.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&a).0 - loss(&b).0) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "{i}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn projector_parameter_gradient_matches_finite_differences() {
        let p = small_projector(FinalInit::Small);
        let x = Tensor::randn([2, 2, 2, 3], 1.0, &mut rng::seeded(6));
        let tea = Tensor::randn([4, 2, 2, 4], 1.0, &mut rng::seeded(7));
        let run = |s: &ParamStore, grads: bool| {
            let mut g = Graph::new();
            let b = s.bind(&mut g, grads);
            let xv = g.constant(x.clone());
            let mut q = p.clone();
            q.params = s.clone();
            let y = q.forward(&mut g, &b, xv).unwrap();
            let tv = g.constant(tea.clone());
            let l = distill_loss_graph(&mut g, y, tv).unwrap();
            (g, b, l)
        };
        let (g, b, l) = run(&p.params, true);
        let grads = b.grads(&g.backward(l), &p.params);
        let rep = probe_parameters(&p.params, &grads, 20, 2, |s| {
            let (g, _, l) = run(s, false);
            g.value(l).item()
        });
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn loss_constructed_cases() {
        let mut r = rng::seeded(8);
        let a = Tensor::randn([3, 2, 2, 6], 1.0, &mut r);
        assert!((distill_loss(&a, &a).unwrap() + 1.0).abs() < 1e-12);
        assert!((distill_loss(&a.scaled(-1.0), &a).unwrap() - 1.0).abs() < 1e-12);
        // Orthogonal per-token pairs: first half vs second half of channels.
        let mut x = Tensor::zeros([1, 2, 2, 6]);
        let mut y = Tensor::zeros([1, 2, 2, 6]);
        for (i, (rx, ry)) in x.data_mut().chunks_mut(6).zip(y.data_mut().chunks_mut(6)).enumerate() {
            for c in 0..3 {
                rx[c] = (i + c + 1) as f64;
                ry[3 + c] = (2 * i + c) as f64 - 1.5;
            }
        }
        assert!(distill_loss(&x, &y).unwrap().abs() < 1e-12);
        // Zero vectors are finite.
        let z = Tensor::zeros([1, 2, 2, 6]);
        assert_eq!(distill_loss(&z, &a.narrow0(0, 1)).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn loss_is_bounded_and_scale_free(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut r = rng::seeded(seed);
            let a = Tensor::randn([2, 2, 2, 5], 1.0, &mut r);
            let b = Tensor::randn([2, 2, 2, 5], 1.0, &mut r);
            let l = distill_loss(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&l));
            let l2 = distill_loss(&a.scaled(scale), &b).unwrap();
            prop_assert!((l - l2).abs() < 1e-12);
        }
    }

    struct Fixture {
        data: TrainingSet,
        tea_lat: EncodedSet,
        stu_lat: EncodedSet,
        teacher: DiT,
        student: DiT,
    }

    fn fixture() -> Fixture {
        let template = ClipSpec::new(0, 4, 16, 16);
        let data = TrainingSet::generate(&template, &[0, 1, 2, 3], &[20, 21], (2, 1)).unwrap();
        let tspec = CodecSpec::new(4, 2, 3, CodecRole::Teacher).unwrap();
        let sspec = CodecSpec::new(8, 4, 4, CodecRole::Student).unwrap();
        let tc = Codec::new(CodecConfig { spec: tspec, hidden: 6 }, &mut rng::seeded(0)).unwrap();
        let sc = Codec::new(CodecConfig { spec: sspec, hidden: 6 }, &mut rng::seeded(1)).unwrap();
        let mk = |c: usize, patch: usize, seed: u64| {
            let cfg = DiTConfig {
                depth: 2,
                dim: 8,
                heads: 2,
                latent_channels: c,
                patch,
                tap_indices: vec![0],
                ..Default::default()
            };
            DiT::new(cfg, &mut rng::seeded(seed)).unwrap()
        };
        Fixture {
            tea_lat: data.encode(&tc).unwrap(),
            stu_lat: data.encode(&sc).unwrap(),
            data,
            teacher: mk(3, 2, 5),
            student: mk(4, 1, 6),
        }
    }

    fn state(f: &Fixture, cfg: &DistillConfig) -> DistillState {
        DistillState::new(
            f.student.clone(),
            &f.teacher,
            f.stu_lat.videos[0].shape(),
            f.tea_lat.videos[0].shape(),
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn strategies_pair_timesteps_as_configured() {
        let f = fixture();
        let mut cfg = DistillConfig {
            projector_hidden: 4,
            ..Default::default()
        };
        cfg.train.batch_size = 3;
        let mut st = state(&f, &cfg);
        for _ in 0..3 {
            let rec = distill_step(&mut st, &f.teacher, &f.data, &f.tea_lat, &f.stu_lat, &cfg).unwrap();
            assert_eq!(rec.t_tea, rec.t_stu);
            assert!((-1.0..=1.0).contains(&rec.l_dis));
            assert!((rec.l_total - (rec.l_dis + rec.l_diff)).abs() < 1e-12);
        }
        cfg.strategy = TimestepStrategy::Fixed { tau: 0.1 };
        let mut st = state(&f, &cfg);
        let rec = distill_step(&mut st, &f.teacher, &f.data, &f.tea_lat, &f.stu_lat, &cfg).unwrap();
        assert!(rec.t_tea.iter().all(|&t| t == 0.1));
        assert!(rec.t_stu.iter().any(|&t| t != 0.1));
    }

    #[test]
    fn zero_lambda_matches_pure_diffusion_gradients() {
        let f = fixture();
        let mut cfg = DistillConfig {
            lambda_dis: 0.0,
            projector_hidden: 4,
            ..Default::default()
        };
        cfg.train.batch_size = 2;
        let st = state(&f, &cfg);
        let dg = distill_grads(&st, &f.teacher, &f.data, &f.tea_lat, &f.stu_lat, &cfg).unwrap();
        assert_eq!(dg.record.l_total, dg.record.l_diff);
        let mut plain = TrainState::new(f.student.clone(), cfg.train.optim);
        let rec = diffusion_step(&mut plain, &f.data, &f.stu_lat, &cfg.train).unwrap();
        assert_eq!(rec.ts, dg.record.t_stu);
        assert_eq!(rec.loss, dg.record.l_diff);
        // Same update from the same gradients.
        let mut adam = Adam::new(cfg.train.optim, &f.student.params);
        let mut params = f.student.params.clone();
        adam.step(&mut params, &dg.student);
        assert_eq!(params.checksum(), plain.model.params.checksum());
        assert!(dg.projector.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn teacher_is_untouched_and_resume_is_exact() {
        let f = fixture();
        let mut cfg = DistillConfig {
            projector_hidden: 4,
            ..Default::default()
        };
        cfg.train.batch_size = 2;
        let before = f.teacher.params.checksum();
        let mut a = state(&f, &cfg);
        let mut la = Vec::new();
        train_distill(&mut a, &f.teacher, &f.data, &f.tea_lat, &f.stu_lat, &cfg, 6, &mut |r| {
            la.push(r.l_total)
        })
        .unwrap();
        assert_eq!(f.teacher.params.checksum(), before);

        let dir = tempfile::tempdir().unwrap();
        let mut b = state(&f, &cfg);
        let mut lb = Vec::new();
        train_distill(&mut b, &f.teacher, &f.data, &f.tea_lat, &f.stu_lat, &cfg, 2, &mut |r| {
            lb.push(r.l_total)
        })
        .unwrap();
        b.save(dir.path(), 0).unwrap();
        let mut c = DistillState::load(dir.path()).unwrap();
        train_distill(&mut c, &f.teacher, &f.data, &f.tea_lat, &f.stu_lat, &cfg, 4, &mut |r| {
            lb.push(r.l_total)
        })
        .unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn cka_report_covers_requested_timesteps() {
        let f = fixture();
        let cfg = DistillConfig {
            projector_hidden: 4,
            ..Default::default()
        };
        let st = state(&f, &cfg);
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                (
                    f.tea_lat.videos[i].clone(),
                    f.stu_lat.videos[i].clone(),
                    f.data.video_classes[i],
                )
            })
            .collect();
        let rep = distill_cka(&st.student, &st.projector, &f.teacher, &pairs, &[0.2, 0.6], 1).unwrap();
        assert_eq!(rep.entries.len(), 2);
        assert!(rep.entries.iter().all(|e| (0.0..=1.0).contains(&e.cka)));
        assert!(matches!(
            distill_cka(&st.student, &st.projector, &f.teacher, &pairs[..3], &[0.2], 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn missing_teacher_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(require_teacher(dir.path()), Err(Error::Dependency(_))));
    }
}
