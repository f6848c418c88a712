//! Paired-seed ablations at desk scale, and the trained artifacts they
//! share: the two codecs, the teacher and the low-resolution student.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{feature_cka, format_table, psnr, spatial_variance};
use crate::cascade::{
    hr_heldout_loss, prepare_hr_latents, train_hr, two_stage_sample, Fusion, GuidanceArm, GuidanceTiming, HrLatents,
    HrState, ReferenceGuided,
};
use crate::codec::{train_codec, Codec, CodecRole, CodecTrainReport, LatentTensor};
use crate::config::{CodecRunConfig, RunConfig};
use crate::data::{generate_clip, ClipSpec, SpecSource, VideoTensor};
use crate::distill::{distill_cka, train_distill, DistillConfig, DistillState, Projector, TimestepStrategy};
use crate::dit::{DiT, DiTConfig, NoHook};
use crate::error::{ensure, Error, Result};
use crate::flow::{noise_latent, sample, sample_from, Denoiser, SamplerConfig};
use crate::resample::{resize_grid, Kernel};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::train::{
    eval_timesteps, heldout_loss, train_diffusion, DiffusionRecord, TrainConfig, TrainState, TrainingSet,
};

/// Progress sink; one line per call.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Codec training clips are drawn from seeds starting here.
pub const CODEC_SEED_BASE: u64 = 200_000;
const INIT_STUDENT: u64 = 1;
const INIT_TEACHER: u64 = 2;

fn eval_seed(seed: u64) -> u64 {
    seed + 1_000
}

pub fn codec_run(cfg: &RunConfig, role: CodecRole) -> &CodecRunConfig {
    match role {
        CodecRole::Student => &cfg.student_codec,
        CodecRole::Teacher => &cfg.teacher_codec,
    }
}

/// Trains the codec of `role` on base-resolution clips; the held-out
/// PSNR is measured on the held-out seeds.
pub fn build_codec(cfg: &RunConfig, role: CodecRole, log: Log) -> Result<(Codec, CodecTrainReport)> {
    let c = codec_run(cfg, role);
    let train = SpecSource::seeds(&cfg.data.template(), CODEC_SEED_BASE, c.train_clips).generate_all()?;
    let held = heldout_clips(cfg, &cfg.data.template())?;
    let (codec, report) = train_codec(c.codec_config(), &train, &held, &c.options(cfg.seed))?;
    log(&format!(
        "codec {role:?}: {} steps, final loss {:.5}, held-out PSNR {:.2} dB",
        c.steps,
        report.window_mean(report.losses.len(), 100),
        report.heldout_psnr
    ));
    Ok((codec, report))
}

pub fn heldout_clips(cfg: &RunConfig, template: &ClipSpec) -> Result<Vec<VideoTensor>> {
    cfg.data
        .heldout_seeds()
        .iter()
        .map(|&s| {
            let mut spec = template.clone();
            spec.seed = s;
            generate_clip(&spec)
        })
        .collect()
}

/// Base-resolution training videos and images.
pub fn lr_training_set(cfg: &RunConfig) -> Result<TrainingSet> {
    TrainingSet::generate(
        &cfg.data.template(),
        &cfg.data.video_seeds(),
        &cfg.data.image_seeds(),
        cfg.data.ratio,
    )
}

/// High-resolution training set with `frames` frames per video.
pub fn hr_training_set(cfg: &RunConfig, frames: usize) -> Result<TrainingSet> {
    TrainingSet::generate(
        &cfg.data.hr_template().with_frames(frames),
        &cfg.data.video_seeds(),
        &cfg.data.image_seeds(),
        cfg.data.ratio,
    )
}

/// Held-out videos shaped like `template`.
pub fn heldout_set(cfg: &RunConfig, template: &ClipSpec) -> Result<TrainingSet> {
    TrainingSet::generate(template, &cfg.data.heldout_seeds(), &[], (1, 0))
}

fn init_model(config: &DiTConfig, seed: u64, which: u64) -> Result<DiT> {
    DiT::new(config.clone(), &mut rng::stream(seed, which, Purpose::Init))
}

/// Trains a transformer from scratch on base-resolution latents of `codec`.
fn train_base(
    cfg: &RunConfig,
    codec: &Codec,
    model: &DiTConfig,
    tc: &TrainConfig,
    which: u64,
    name: &str,
    log: Log,
) -> Result<(TrainState, Vec<DiffusionRecord>)> {
    let data = lr_training_set(cfg)?;
    let lat = data.encode(codec)?;
    let mut state = TrainState::new(init_model(model, cfg.seed, which)?, tc.optim);
    let mut records = Vec::with_capacity(tc.steps);
    let every = (tc.steps / 10).max(1);
    let mut acc = 0.0;
    train_diffusion(&mut state, &data, &lat, tc, tc.steps, &mut |r| {
        acc += r.loss;
        if (r.step as usize + 1).is_multiple_of(every) {
            log(&format!("{name} step {} loss {:.5}", r.step + 1, acc / every as f64));
            acc = 0.0;
        }
        records.push(r.clone());
    })?;
    Ok((state, records))
}

pub fn train_teacher(cfg: &RunConfig, teacher_codec: &Codec, log: Log) -> Result<(TrainState, Vec<DiffusionRecord>)> {
    train_base(
        cfg,
        teacher_codec,
        &cfg.teacher,
        &cfg.teacher_train,
        INIT_TEACHER,
        "teacher",
        log,
    )
}

pub fn train_student(cfg: &RunConfig, student_codec: &Codec, log: Log) -> Result<(TrainState, Vec<DiffusionRecord>)> {
    train_base(
        cfg,
        student_codec,
        &cfg.student,
        &cfg.lr_train,
        INIT_STUDENT,
        "student",
        log,
    )
}

/// The trained components every experiment starts from.
pub struct Artifacts {
    pub student_codec: Codec,
    pub teacher_codec: Codec,
    pub teacher: DiT,
    pub student: DiT,
}

/// Hash of the config fields the artifacts depend on.
pub fn artifact_key(cfg: &RunConfig) -> Result<String> {
    let parts = (
        cfg.seed,
        &cfg.data,
        &cfg.student_codec,
        &cfg.teacher_codec,
        &cfg.student,
        &cfg.teacher,
        &cfg.lr_train,
        &cfg.teacher_train,
    );
    let json = serde_json::to_string(&parts).map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
    Ok(hex::encode(&Sha256::digest(json.as_bytes())[..8]))
}

impl Artifacts {
    pub fn build(cfg: &RunConfig, log: Log) -> Result<Self> {
        let (student_codec, _) = build_codec(cfg, CodecRole::Student, log)?;
        let (teacher_codec, _) = build_codec(cfg, CodecRole::Teacher, log)?;
        let (teacher, _) = train_teacher(cfg, &teacher_codec, log)?;
        let (student, _) = train_student(cfg, &student_codec, log)?;
        Ok(Artifacts {
            student_codec,
            teacher_codec,
            teacher: teacher.model,
            student: student.model,
        })
    }

    /// Loads from `cache/<key>` when present, otherwise builds and stores
    /// there.
    pub fn load_or_build(cache: Option<&Path>, cfg: &RunConfig, log: Log) -> Result<Self> {
        let Some(root) = cache else {
            return Self::build(cfg, log);
        };
        let dir = root.join(artifact_key(cfg)?);
        if dir.join("complete").exists() {
            log(&format!("reusing artifacts in {}", dir.display()));
            return Ok(Artifacts {
                student_codec: Codec::load(&dir.join("student_codec"))?,
                teacher_codec: Codec::load(&dir.join("teacher_codec"))?,
                teacher: DiT::load(&dir.join("teacher"))?.0,
                student: DiT::load(&dir.join("student"))?.0,
            });
        }
        let a = Self::build(cfg, log)?;
        a.student_codec.save(
            &dir.join("student_codec"),
            cfg.student_codec.steps as u64,
            cfg.seed,
            &[],
        )?;
        a.teacher_codec.save(
            &dir.join("teacher_codec"),
            cfg.teacher_codec.steps as u64,
            cfg.seed,
            &[],
        )?;
        a.teacher.save(
            &dir.join("teacher"),
            cfg.teacher_train.steps as u64,
            cfg.seed,
            None,
            &[],
        )?;
        a.student
            .save(&dir.join("student"), cfg.lr_train.steps as u64, cfg.seed, None, &[])?;
        let p = dir.join("complete");
        std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
        Ok(a)
    }

    pub fn table3_inputs(&self) -> Table3Inputs<'_> {
        Table3Inputs {
            student_codec: &self.student_codec,
            teacher_codec: &self.teacher_codec,
            teacher: &self.teacher,
            student: &self.student,
        }
    }
}

/// Restarts sampling from `t0` on noised held-out latents and reports the
/// mean decoded PSNR against the clips.
pub fn probe_psnr(
    model: &mut dyn Denoiser,
    codec: &Codec,
    clips: &[VideoTensor],
    latents: &[(Tensor, usize)],
    t0: f64,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    ensure!(
        !clips.is_empty() && clips.len() == latents.len(),
        InsufficientData,
        "no probe clips"
    );
    let steps = ((sampler.steps as f64 * t0).ceil() as usize).max(1);
    let sc = SamplerConfig { steps, ..*sampler };
    let mut total = 0.0;
    for (i, (clip, (z, class))) in clips.iter().zip(latents).enumerate() {
        let eps = Tensor::randn(z.shape().to_vec(), 1.0, &mut rng::stream(seed, i as u64, Purpose::Eval));
        let z_t = noise_latent(z, t0, &eps, sc.schedule)?;
        let z0 = sample_from(model, &z_t, t0, *class, &sc, &mut |_, _, _| {})?;
        total += psnr(clip, &codec.decode(&LatentTensor::new(z0, codec.spec())?)?)?;
    }
    Ok(total / clips.len() as f64)
}

/// CKA between teacher features and student features that are only
/// interpolated onto the teacher grid (no learned map). Noise matches
/// [`distill_cka`] for the same seed.
fn raw_cka(student: &DiT, teacher: &DiT, pairs: &[(Tensor, Tensor, usize)], ts: &[f64], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (k, &t) in ts.iter().enumerate() {
        let mut r = rng::stream(seed, k as u64, Purpose::Eval);
        let (mut fa, mut fb) = (Vec::new(), Vec::new());
        for (z_tea, z_stu, class) in pairs {
            let e_tea = Tensor::randn(z_tea.shape().to_vec(), 1.0, &mut r);
            let e_stu = Tensor::randn(z_stu.shape().to_vec(), 1.0, &mut r);
            let s = Default::default();
            let (_, ft) = teacher.predict(
                &noise_latent(z_tea, t, &e_tea, s)?,
                t,
                *class,
                &[teacher.config.penultimate()],
                &mut NoHook,
            )?;
            let (_, fs) = student.predict(
                &noise_latent(z_stu, t, &e_stu, s)?,
                t,
                *class,
                &[student.config.penultimate()],
                &mut NoHook,
            )?;
            let grid = ft[0].data.shape();
            fb.push(resize_grid(&fs[0].data, [grid[0], grid[1], grid[2]], Kernel::Linear));
            fa.push(ft[0].data.clone());
        }
        total += feature_cka(&fa, &fb)?;
    }
    Ok(total / ts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table3Arm {
    Baseline,
    DataFinetune,
    DistillFixed,
    DistillSynced,
}

impl Table3Arm {
    pub const ALL: [Table3Arm; 4] = [
        Table3Arm::Baseline,
        Table3Arm::DataFinetune,
        Table3Arm::DistillFixed,
        Table3Arm::DistillSynced,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Table3Arm::Baseline => "Baseline",
            Table3Arm::DataFinetune => "Data fine-tuning",
            Table3Arm::DistillFixed => "Distill t_tea = 0.1",
            Table3Arm::DistillSynced => "Distill t_tea = t_stu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub arm: String,
    pub seed: u64,
    pub steps: usize,
    pub heldout_loss: f64,
    /// CKA of the initial projector on the base student.
    pub cka_init: f64,
    /// CKA of this arm's student through this arm's projector.
    pub cka: f64,
    /// CKA with interpolation only.
    pub cka_raw: f64,
    pub probe_psnr: f64,
    pub first_batch: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3 {
    pub rows: Vec<Table3Row>,
    pub seeds: Vec<u64>,
    /// Seeds where the synchronized arm's CKA is at least the fixed arm's.
    pub synced_cka_wins: usize,
    /// Seeds where the synchronized arm's held-out loss is at most the
    /// fixed arm's.
    pub synced_loss_wins: usize,
    pub notes: Vec<String>,
}

impl Table3 {
    pub fn row(&self, arm: Table3Arm, seed: u64) -> Option<&Table3Row> {
        self.rows.iter().find(|r| r.arm == arm.label() && r.seed == seed)
    }

    pub fn to_markdown(&self) -> String {
        let header = [
            "Method",
            "seed",
            "held-out L_diff",
            "CKA init",
            "CKA",
            "CKA (interp.)",
            "probe PSNR",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.arm.clone(),
                    r.seed.to_string(),
                    format!("{:.5}", r.heldout_loss),
                    format!("{:.4}", r.cka_init),
                    format!("{:.4}", r.cka),
                    format!("{:.4}", r.cka_raw),
                    format!("{:.2}", r.probe_psnr),
                ]
            })
            .collect();
        let mut s = String::from("# Table 3 (desk analogue): fine-tuning vs distillation\n\n");
        for n in &self.notes {
            s += &format!("- {n}\n");
        }
        s += &format!(
            "- synchronized >= fixed CKA in {}/{} seeds; synchronized <= fixed held-out loss in {}/{} seeds\n\n",
            self.synced_cka_wins,
            self.seeds.len(),
            self.synced_loss_wins,
            self.seeds.len()
        );
        s + &format_table(&header, &rows)
    }
}

/// Trained components the distillation table needs.
pub struct Table3Inputs<'a> {
    pub student_codec: &'a Codec,
    pub teacher_codec: &'a Codec,
    pub teacher: &'a DiT,
    pub student: &'a DiT,
}

/// Baseline, data fine-tuning and both distillation strategies from the
/// same student, with the same data order and noise per seed.
pub fn run_table3(cfg: &RunConfig, inputs: &Table3Inputs, log: Log) -> Result<Table3> {
    let ex = &cfg.experiments;
    let data = lr_training_set(cfg)?;
    let lat_s = data.encode(inputs.student_codec)?;
    let lat_t = data.encode(inputs.teacher_codec)?;
    let held = heldout_set(cfg, &cfg.data.template())?;
    let held_s = held.encode(inputs.student_codec)?;
    let held_t = held.encode(inputs.teacher_codec)?;
    let n_probe = ex.probes.min(held.videos.len());
    let pairs: Vec<(Tensor, Tensor, usize)> = (0..n_probe)
        .map(|i| {
            (
                held_t.videos[i].clone(),
                held_s.videos[i].clone(),
                held.video_classes[i],
            )
        })
        .collect();
    let held_items: Vec<(Tensor, usize)> = held_s
        .videos
        .iter()
        .cloned()
        .zip(held.video_classes.iter().copied())
        .collect();
    let ts = eval_timesteps(ex.eval_timesteps);

    let mut rows = Vec::new();
    for &seed in &ex.seeds {
        let mut dcfg: DistillConfig = cfg.distill.clone();
        dcfg.train.seed = seed;
        dcfg.train.steps = ex.distill_steps;
        let es = eval_seed(seed);
        let first_batch = data.batch_checksum(seed, 0, dcfg.train.batch_size)?;
        let s_shape = lat_s.videos[0].shape();
        let t_shape = lat_t.videos[0].shape();
        let p0: Projector =
            DistillState::new(inputs.student.clone(), inputs.teacher, s_shape, t_shape, &dcfg)?.projector;
        let cka_init = distill_cka(inputs.student, &p0, inputs.teacher, &pairs, &ex.cka_timesteps, es)?.mean_cka();
        for arm in Table3Arm::ALL {
            let (model, projector) = match arm {
                Table3Arm::Baseline => (inputs.student.clone(), p0.clone()),
                Table3Arm::DataFinetune => {
                    let mut st = TrainState::new(inputs.student.clone(), dcfg.train.optim);
                    train_diffusion(&mut st, &data, &lat_s, &dcfg.train, ex.distill_steps, &mut |_| {})?;
                    (st.model, p0.clone())
                }
                Table3Arm::DistillFixed | Table3Arm::DistillSynced => {
                    let mut c = dcfg.clone();
                    c.strategy = if arm == Table3Arm::DistillFixed {
                        TimestepStrategy::Fixed { tau: 0.1 }
                    } else {
                        TimestepStrategy::Synchronized
                    };
                    let mut st = DistillState::new(inputs.student.clone(), inputs.teacher, s_shape, t_shape, &c)?;
                    train_distill(
                        &mut st,
                        inputs.teacher,
                        &data,
                        &lat_t,
                        &lat_s,
                        &c,
                        ex.distill_steps,
                        &mut |_| {},
                    )?;
                    (st.student, st.projector)
                }
            };
            let row = Table3Row {
                arm: arm.label().into(),
                seed,
                steps: if arm == Table3Arm::Baseline {
                    0
                } else {
                    ex.distill_steps
                },
                heldout_loss: heldout_loss(&model, &held_items, &ts, es, &dcfg.train)?,
                cka_init,
                cka: distill_cka(&model, &projector, inputs.teacher, &pairs, &ex.cka_timesteps, es)?.mean_cka(),
                cka_raw: raw_cka(&model, inputs.teacher, &pairs, &ex.cka_timesteps, es)?,
                probe_psnr: probe_psnr(
                    &mut &model,
                    inputs.student_codec,
                    &held.videos[..n_probe],
                    &held_items[..n_probe],
                    ex.probe_t,
                    &cfg.sampler,
                    es,
                )?,
                first_batch: first_batch.clone(),
            };
            log(&format!(
                "table3 seed {seed} {:<22} loss {:.5} cka {:.4} (init {:.4}) raw {:.4} psnr {:.2}",
                row.arm, row.heldout_loss, row.cka, row.cka_init, row.cka_raw, row.probe_psnr
            ));
            rows.push(row);
        }
    }
    let mut t = Table3 {
        rows,
        seeds: ex.seeds.clone(),
        synced_cka_wins: 0,
        synced_loss_wins: 0,
        notes: vec![
            "Metrics substitute held-out diffusion loss, linear CKA to the teacher's penultimate block and probe reconstruction PSNR for the video-quality scores.".into(),
            format!(
                "{} distill/fine-tune steps per arm; CKA averaged over t in {:?}; probes restart at t={}.",
                ex.distill_steps, ex.cka_timesteps, ex.probe_t
            ),
        ],
    };
    for &seed in &ex.seeds {
        let f = t.row(Table3Arm::DistillFixed, seed).expect("fixed arm ran").clone();
        let s = t.row(Table3Arm::DistillSynced, seed).expect("synced arm ran").clone();
        t.synced_cka_wins += (s.cka >= f.cka) as usize;
        t.synced_loss_wins += (s.heldout_loss <= f.heldout_loss) as usize;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    pub arm: String,
    pub seed: u64,
    pub steps: usize,
    pub heldout_loss: f64,
    pub psnr: f64,
    /// Codec calls per training sample while preparing this arm's inputs.
    pub encodes_per_sample: f64,
    pub decodes_per_sample: f64,
    pub first_batch: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table4 {
    pub rows: Vec<Table4Row>,
    pub seeds: Vec<u64>,
    /// Seeds where feature guidance at t = 0.1 reaches a held-out loss no
    /// higher than the unguided model.
    pub fixed_beats_unguided: usize,
    /// Seeds where t = 0.1 is no worse than following the HR timestep.
    pub fixed_beats_follow: usize,
    pub notes: Vec<String>,
}

pub fn table4_arms() -> [GuidanceArm; 4] {
    [
        GuidanceArm::Latent,
        GuidanceArm::Feature {
            timing: GuidanceTiming::FollowHr,
        },
        GuidanceArm::Feature {
            timing: GuidanceTiming::Fixed { t: 0.1 },
        },
        GuidanceArm::Unguided,
    ]
}

impl Table4 {
    pub fn row(&self, arm: GuidanceArm, seed: u64) -> Option<&Table4Row> {
        self.rows.iter().find(|r| r.arm == arm.label() && r.seed == seed)
    }

    pub fn to_markdown(&self) -> String {
        let header = [
            "Method",
            "seed",
            "held-out L_diff",
            "PSNR",
            "encodes/sample",
            "decodes/sample",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.arm.clone(),
                    r.seed.to_string(),
                    format!("{:.5}", r.heldout_loss),
                    format!("{:.2}", r.psnr),
                    format!("{:.1}", r.encodes_per_sample),
                    format!("{:.1}", r.decodes_per_sample),
                ]
            })
            .collect();
        let mut s = String::from("# Table 4 (desk analogue): latent vs feature guidance\n\n");
        for n in &self.notes {
            s += &format!("- {n}\n");
        }
        s += &format!(
            "- feature t=0.1 <= unguided held-out loss in {}/{} seeds; t=0.1 <= t=t_hr in {}/{} seeds\n\n",
            self.fixed_beats_unguided,
            self.seeds.len(),
            self.fixed_beats_follow,
            self.seeds.len()
        );
        s + &format_table(&header, &rows)
    }
}

/// Every guidance arm trained from the same low-resolution model with the
/// same data and noise per seed.
pub fn run_table4(cfg: &RunConfig, codec: &Codec, lr: &DiT, log: Log) -> Result<Table4> {
    let ex = &cfg.experiments;
    let frames = cfg.data.frames;
    let data = hr_training_set(cfg, frames)?;
    let lr_size = (cfg.data.height, cfg.data.width);
    let plain = prepare_hr_latents(&data, codec, lr_size, false)?;
    let with_latent = prepare_hr_latents(&data, codec, lr_size, true)?;
    let held = heldout_set(cfg, &cfg.data.hr_template())?;
    let held_lat = prepare_hr_latents(&held, codec, lr_size, true)?;
    let n_probe = ex.probes.min(held.videos.len());
    let ts = eval_timesteps(ex.eval_timesteps);

    let mut rows = Vec::new();
    for &seed in &ex.seeds {
        let es = eval_seed(seed);
        for arm in table4_arms() {
            let mut hc = cfg.hr.clone();
            hc.arm = arm;
            hc.train.seed = seed;
            hc.train.steps = ex.hr_steps;
            let lat: &HrLatents = if arm == GuidanceArm::Latent {
                &with_latent
            } else {
                &plain
            };
            let mut st = HrState::new(
                lr,
                lat.lr.videos[0].shape(),
                lat.hr.videos[0].shape(),
                &hc.taps,
                hc.train.optim,
            )?;
            train_hr(&mut st, lr, &data, lat, &hc, ex.hr_steps, &mut |_| {})?;
            let loss = hr_heldout_loss(&st.model, &st.fusion, lr, &held_lat, &ts, es, arm, &hc.taps, &hc.train)?;
            let psnr = hr_probe_psnr(&st, lr, codec, &held.videos[..n_probe], &held_lat, arm, cfg, es)?;
            let (e, d) = lat.traffic_per_sample();
            let row = Table4Row {
                arm: arm.label(),
                seed,
                steps: ex.hr_steps,
                heldout_loss: loss,
                psnr,
                encodes_per_sample: e,
                decodes_per_sample: d,
                first_batch: data.batch_checksum(seed, 0, hc.train.batch_size)?,
            };
            log(&format!(
                "table4 seed {seed} {:<16} loss {:.5} psnr {:.2} codec {e:.0}e/{d:.0}d per sample",
                row.arm, row.heldout_loss, row.psnr
            ));
            rows.push(row);
        }
    }
    let mut t = Table4 {
        rows,
        seeds: ex.seeds.clone(),
        fixed_beats_unguided: 0,
        fixed_beats_follow: 0,
        notes: vec![
            "Metrics substitute held-out diffusion loss and restart-reconstruction PSNR against the ground-truth HR clip for the image-quality scores.".into(),
            format!(
                "{} HR steps per arm; high-resolution clips {}x{}x{}, guidance from bicubically downsampled clips.",
                ex.hr_steps,
                frames,
                cfg.hr_size().0,
                cfg.hr_size().1
            ),
            "Unguided row: same architecture with the guidance input left at zero.".into(),
        ],
    };
    let [_, follow, fixed, unguided] = table4_arms();
    for &seed in &ex.seeds {
        let f = t.row(fixed, seed).expect("fixed arm ran").heldout_loss;
        let u = t.row(unguided, seed).expect("unguided arm ran").heldout_loss;
        let h = t.row(follow, seed).expect("follow arm ran").heldout_loss;
        t.fixed_beats_unguided += (f <= u) as usize;
        t.fixed_beats_follow += (f <= h) as usize;
    }
    Ok(t)
}

/// Restart reconstructions of held-out HR clips, guided from their own
/// downsampled versions.
#[allow(clippy::too_many_arguments)]
fn hr_probe_psnr(
    st: &HrState,
    lr: &DiT,
    codec: &Codec,
    clips: &[VideoTensor],
    lat: &HrLatents,
    arm: GuidanceArm,
    cfg: &RunConfig,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let cond = lat.upsampled.as_ref().map(|u| &u.videos[i]);
        let mut den = ReferenceGuided::new(
            &st.model,
            &st.fusion,
            lr,
            arm,
            &lat.lr.videos[i],
            cond,
            cfg.sampler.schedule,
            seed + i as u64,
        );
        let item = [(lat.hr.videos[i].clone(), lat.hr.video_classes[i])];
        total += probe_psnr(
            &mut den,
            codec,
            std::slice::from_ref(clip),
            &item,
            cfg.experiments.probe_t,
            &cfg.sampler,
            seed + i as u64,
        )?;
    }
    Ok(total / clips.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiresRow {
    pub label: String,
    pub factor: f64,
    pub height: usize,
    pub width: usize,
    /// Mean per-frame spatial variance of decoded samples.
    pub sample_variance: f64,
    /// The same statistic on real clips at this size.
    pub data_variance: f64,
    /// Sample variance relative to the 1× samples.
    pub variance_ratio: f64,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiresReport {
    pub rows: Vec<MultiresRow>,
    /// Whether unguided sampling at the largest factor lost variance.
    pub collapse_at_max: Option<bool>,
}

impl MultiresReport {
    pub fn to_markdown(&self) -> String {
        let header = ["Sampling", "factor", "size", "sample var", "data var", "ratio to 1x"];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    format!("{}", r.factor),
                    format!("{}x{}", r.height, r.width),
                    format!("{:.5}", r.sample_variance),
                    format!("{:.5}", r.data_variance),
                    r.note.clone().unwrap_or_else(|| format!("{:.3}", r.variance_ratio)),
                ]
            })
            .collect();
        let mut s = String::from("# Multi-resolution probe: base model sampled off its training grid\n\n");
        if let Some(c) = self.collapse_at_max {
            s += &format!("- unguided variance collapse at the largest factor: {c}\n\n");
        }
        s + &format_table(&header, &rows)
    }
}

fn mean_variance(clips: &[VideoTensor]) -> f64 {
    clips.iter().map(spatial_variance).sum::<f64>() / clips.len().max(1) as f64
}

/// Samples the base model at `factors` × its training grid; with a
/// cascade, also samples at the high-resolution factor through it.
pub fn run_multires_probe(
    cfg: &RunConfig,
    codec: &Codec,
    lr: &DiT,
    cascade: Option<(&DiT, &Fusion)>,
    log: Log,
) -> Result<MultiresReport> {
    let ex = &cfg.experiments;
    let spec = codec.spec();
    let latent_base = spec.latent_dims([cfg.data.frames, cfg.data.height, cfg.data.width])?;
    let classes = lr.config.num_classes;
    let mut rows: Vec<MultiresRow> = Vec::new();
    let mut base_var = None;
    for &f in &ex.multires_factors {
        let (h, w) = (
            (cfg.data.height as f64 * f).round() as usize,
            (cfg.data.width as f64 * f).round() as usize,
        );
        let mut row = MultiresRow {
            label: "Unguided".into(),
            factor: f,
            height: h,
            width: w,
            sample_variance: f64::NAN,
            data_variance: f64::NAN,
            variance_ratio: f64::NAN,
            note: None,
        };
        let dims = match spec.latent_dims([cfg.data.frames, h, w]) {
            Ok(d) => d,
            Err(_) => {
                row.note = Some(format!("skipped: {h}x{w} not divisible by {}", spec.f_s));
                log(&format!("multires {f}x skipped ({h}x{w})"));
                rows.push(row);
                continue;
            }
        };
        let shape = [dims[0], dims[1], dims[2], spec.channels];
        let mut samples = Vec::new();
        for j in 0..ex.multires_samples {
            let mut m = lr;
            let z = sample(&mut m, &shape, j % classes, &cfg.sampler, j as u64, &mut |_, _, _| {})?;
            samples.push(codec.decode(&LatentTensor::new(z, spec)?)?);
        }
        row.sample_variance = mean_variance(&samples);
        row.data_variance = mean_variance(&heldout_clips(cfg, &cfg.data.template().with_size(h, w))?);
        if f == 1.0 {
            base_var = Some(row.sample_variance);
        }
        log(&format!(
            "multires {f}x ({h}x{w}, latent {:?}): sample var {:.5}, data var {:.5}",
            &shape[..3],
            row.sample_variance,
            row.data_variance
        ));
        rows.push(row);
    }
    if let Some((hr, fusion)) = cascade {
        let (h, w) = cfg.hr_size();
        let hr_dims = spec.latent_dims([cfg.data.frames, h, w])?;
        let mut samples = Vec::new();
        for j in 0..ex.multires_samples {
            let out = two_stage_sample(
                lr,
                hr,
                fusion,
                codec,
                j % classes,
                &[latent_base[0], latent_base[1], latent_base[2], spec.channels],
                &[hr_dims[0], hr_dims[1], hr_dims[2], spec.channels],
                GuidanceArm::default(),
                &cfg.sampler,
                j as u64,
            )?;
            samples.push(out.video);
        }
        let v = mean_variance(&samples);
        log(&format!("multires cascade {}x: sample var {v:.5}", cfg.data.hr_factor));
        rows.push(MultiresRow {
            label: "Cascade (feature t=0.1)".into(),
            factor: cfg.data.hr_factor as f64,
            height: h,
            width: w,
            sample_variance: v,
            data_variance: mean_variance(&heldout_clips(cfg, &cfg.data.hr_template())?),
            variance_ratio: f64::NAN,
            note: None,
        });
    }
    let base = base_var.ok_or_else(|| Error::Config("multires factors must include 1.0".into()))?;
    for r in &mut rows {
        if r.note.is_none() {
            r.variance_ratio = r.sample_variance / base;
        }
    }
    let max_f = ex.multires_factors.iter().cloned().fold(f64::MIN, f64::max);
    let collapse_at_max = rows
        .iter()
        .find(|r| r.label == "Unguided" && r.factor == max_f && r.note.is_none())
        .map(|r| r.variance_ratio < 1.0);
    Ok(MultiresReport { rows, collapse_at_max })
}

/// Writes `<stem>.json` and `<stem>.md` into `dir`.
pub fn write_results<T: Serialize>(dir: &Path, stem: &str, value: &T, markdown: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json =
        serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("results not serializable: {e}")))?;
    let p = dir.join(format!("{stem}.json"));
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(format!("{stem}.md"));
    std::fs::write(&p, markdown).map_err(|e| Error::io(&p, e))
}
