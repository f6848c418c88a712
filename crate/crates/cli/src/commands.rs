use std::path::{Path, PathBuf};
use std::time::Instant;

use cascade_distill::analysis::{
    attention_flops, format_table, latency_bench, token_count, CostModelInput, LatencyRow,
};
use cascade_distill::cascade::{self as cas, prepare_hr_latents, GuidanceArm, GuidanceTiming, HrState};
use cascade_distill::codec::{Codec, CodecRole, CodecSpec, LatentTensor};
use cascade_distill::config::RunConfig;
use cascade_distill::data::{export_clip, export_gif, VideoTensor};
use cascade_distill::distill::{distill_cka, train_distill, DistillState, TimestepStrategy};
use cascade_distill::dit::{DiT, NoHook};
use cascade_distill::experiments::{
    self as ex, heldout_set, hr_training_set, lr_training_set, run_multires_probe, run_table3, run_table4,
    write_results, Artifacts,
};
use cascade_distill::flow;
use cascade_distill::rng::{self, Purpose};
use cascade_distill::{Error, Tensor};
use serde::Serialize;

use crate::run::{base_config, cache_root, dependency, display, exists, CliResult, RunDir};
use crate::{Common, DistillArgs, GuidanceArgs, Role, Strategy};

const GIF_DELAY_MS: u32 = 125;

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Student => "student",
        Role::Teacher => "teacher",
    }
}

fn codec_role(role: Role) -> CodecRole {
    match role {
        Role::Student => CodecRole::Student,
        Role::Teacher => CodecRole::Teacher,
    }
}

fn load_codec(c: &Common, role: Role) -> CliResult<Codec> {
    let name = format!("codec-{}", role_name(role));
    let dir = dependency(
        c,
        &name,
        "checkpoint",
        &format!("train-codec --role {}", role_name(role)),
    )?;
    Ok(Codec::load(&dir)?)
}

fn load_lr(c: &Common, role: Role) -> CliResult<DiT> {
    let name = format!("lr-{}", role_name(role));
    let dir = dependency(c, &name, "checkpoint", &format!("train-lr --role {}", role_name(role)))?;
    Ok(DiT::load(&dir)?.0)
}

/// The distilled student when one exists, else the plain one.
fn load_base(c: &Common, rd: &mut RunDir) -> CliResult<DiT> {
    if exists(c, "distill", "checkpoint/student") {
        let p = c.out.join("distill/checkpoint/student");
        rd.log(&format!("base model: distilled student ({})", display(&p)));
        Ok(DiT::load(&p)?.0)
    } else {
        rd.log("base model: low-resolution student without distillation");
        load_lr(c, Role::Student)
    }
}

fn write_clip(rd: &RunDir, name: &str, clip: &VideoTensor) -> CliResult<()> {
    export_clip(&rd.sub(name), clip, None)?;
    export_gif(&rd.sub(&format!("{name}.gif")), clip, GIF_DELAY_MS)?;
    Ok(())
}

fn jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn every(steps: usize) -> u64 {
    (steps / 10).max(1) as u64
}

fn start(c: &Common, name: &str, cfg: &RunConfig) -> CliResult<RunDir> {
    cfg.validate()?;
    let rd = RunDir::create(c, name)?;
    rd.write_config(cfg)?;
    Ok(rd)
}

pub fn gen_data(c: &Common) -> CliResult<()> {
    let cfg = base_config(c)?;
    let mut rd = start(c, "data", &cfg)?;
    let sets = [
        ("lr", lr_training_set(&cfg)?),
        ("hr", hr_training_set(&cfg, cfg.data.frames)?),
        ("heldout", heldout_set(&cfg, &cfg.data.template())?),
    ];
    #[derive(Serialize)]
    struct Entry {
        set: String,
        name: String,
        class: usize,
    }
    let mut manifest = Vec::new();
    for (set, data) in &sets {
        let groups = [
            ("video", &data.videos, &data.video_classes),
            ("image", &data.images, &data.image_classes),
        ];
        for (kind, clips, classes) in groups {
            for (i, (clip, &class)) in clips.iter().zip(classes.iter()).enumerate() {
                let name = format!("{set}/{kind}_{i:03}");
                write_clip(&rd, &name, clip)?;
                manifest.push(Entry {
                    set: set.to_string(),
                    name,
                    class,
                });
            }
        }
        rd.log(&format!(
            "{set}: {} videos, {} images",
            data.videos.len(),
            data.images.len()
        ));
    }
    rd.write_json("manifest.json", &manifest)
}

pub fn train_codec(c: &Common, role: Role) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    if let Some(s) = c.steps {
        match role {
            Role::Student => cfg.student_codec.steps = s,
            Role::Teacher => cfg.teacher_codec.steps = s,
        }
    }
    let mut rd = start(c, &format!("codec-{}", role_name(role)), &cfg)?;
    let (codec, report) = ex::build_codec(&cfg, codec_role(role), &mut |l| rd.log(l))?;
    let steps = ex::codec_run(&cfg, codec_role(role)).steps;
    codec.save(
        &rd.sub("checkpoint"),
        steps as u64,
        cfg.seed,
        &[("heldout_psnr", report.heldout_psnr)],
    )?;
    rd.write_json("losses.json", &report.losses)
}

pub fn train_lr(c: &Common, role: Role) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    if let Some(s) = c.steps {
        match role {
            Role::Student => cfg.lr_train.steps = s,
            Role::Teacher => cfg.teacher_train.steps = s,
        }
    }
    cfg.validate()?;
    let codec = load_codec(c, role)?;
    let mut rd = start(c, &format!("lr-{}", role_name(role)), &cfg)?;
    let (state, records) = match role {
        Role::Student => ex::train_student(&cfg, &codec, &mut |l| rd.log(l))?,
        Role::Teacher => ex::train_teacher(&cfg, &codec, &mut |l| rd.log(l))?,
    };
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    state.save(&rd.sub("checkpoint"), cfg.seed, &[("final_loss", last)])?;
    jsonl(&rd.sub("records.jsonl"), &records)
}

pub fn distill(c: &Common, a: &DistillArgs) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    let tau = a.tau.unwrap_or(match cfg.distill.strategy {
        TimestepStrategy::Fixed { tau } => tau,
        TimestepStrategy::Synchronized => 0.1,
    });
    match (a.strategy, a.tau) {
        (Some(Strategy::Synced), _) => cfg.distill.strategy = TimestepStrategy::Synchronized,
        (Some(Strategy::Fixed), _) | (None, Some(_)) => cfg.distill.strategy = TimestepStrategy::Fixed { tau },
        (None, None) => {}
    }
    if let Some(l) = a.lambda_dis {
        cfg.distill.lambda_dis = l;
    }
    if let Some(s) = c.steps {
        cfg.distill.train.steps = s;
    }
    cfg.validate()?;
    cfg.distill.strategy.validate()?;
    let sc = load_codec(c, Role::Student)?;
    let tc = load_codec(c, Role::Teacher)?;
    let student = load_lr(c, Role::Student)?;
    let teacher = load_lr(c, Role::Teacher)?;
    let mut rd = start(c, "distill", &cfg)?;
    let data = lr_training_set(&cfg)?;
    let lat_s = data.encode(&sc)?;
    let lat_t = data.encode(&tc)?;
    let mut state = DistillState::new(
        student,
        &teacher,
        lat_s.videos[0].shape(),
        lat_t.videos[0].shape(),
        &cfg.distill,
    )?;
    let before = teacher.params.checksum();
    rd.log(&format!(
        "strategy {:?}, lambda_dis {}, teacher checksum {before}",
        cfg.distill.strategy, cfg.distill.lambda_dis
    ));
    let steps = cfg.distill.train.steps;
    let mut records = Vec::with_capacity(steps);
    train_distill(
        &mut state,
        &teacher,
        &data,
        &lat_t,
        &lat_s,
        &cfg.distill,
        steps,
        &mut |r| {
            if (r.step + 1) % every(steps) == 0 {
                rd.log(&format!(
                    "step {} l_total {:.5} l_diff {:.5} l_dis {:.5} t_tea {:.3?} t_stu {:.3?}",
                    r.step + 1,
                    r.l_total,
                    r.l_diff,
                    r.l_dis,
                    r.t_tea,
                    r.t_stu
                ));
            }
            records.push(r.clone());
        },
    )?;
    let after = teacher.params.checksum();
    rd.log(&format!("teacher checksum after training {after}"));
    if before != after {
        return Err(Error::Numeric("teacher parameters changed during distillation".into()).into());
    }
    state.save(&rd.sub("checkpoint"), cfg.seed)?;
    jsonl(&rd.sub("records.jsonl"), &records)
}

fn apply_guidance(cfg: &mut RunConfig, g: &GuidanceArgs) {
    if let Some(t) = g.t_guid {
        cfg.hr.arm = GuidanceArm::Feature {
            timing: GuidanceTiming::Fixed { t },
        };
    }
    if let Some(taps) = &g.taps {
        cfg.hr.taps = taps.clone();
    }
}

pub fn train_hr(c: &Common, g: &GuidanceArgs) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    apply_guidance(&mut cfg, g);
    if let Some(s) = c.steps {
        for p in &mut cfg.hr_phases {
            p.steps = s;
        }
    }
    cfg.hr.train.steps = cfg.hr_phases.iter().map(|p| p.steps).sum();
    cfg.validate()?;
    cfg.hr.validate()?;
    let codec = load_codec(c, Role::Student)?;
    let mut rd = start(c, "hr", &cfg)?;
    let lr = load_base(c, &mut rd)?;
    rd.log(&format!("guidance {}, taps {:?}", cfg.hr.arm.label(), cfg.hr.taps));
    let lr_size = (cfg.data.height, cfg.data.width);
    let latent_arm = cfg.hr.arm == GuidanceArm::Latent;
    let mut state: Option<HrState> = None;
    let mut records = Vec::new();
    for (k, phase) in cfg.hr_phases.iter().enumerate() {
        let data = hr_training_set(&cfg, phase.frames)?;
        let lat = prepare_hr_latents(&data, &codec, lr_size, latent_arm)?;
        let (ls, hs) = (lat.lr.videos[0].shape(), lat.hr.videos[0].shape());
        let st = match state.take() {
            None => HrState::new(&lr, ls, hs, &cfg.hr.taps, cfg.hr.train.optim)?,
            Some(mut s) => {
                s.fusion = s.fusion.for_latents(&lr, &s.model, ls, hs)?;
                s
            }
        };
        let (e, d) = lat.traffic_per_sample();
        rd.log(&format!(
            "phase {k}: {} frames, {} steps, latents {hs:?} from {ls:?}, {e:.0} encodes / {d:.0} decodes per sample",
            phase.frames, phase.steps
        ));
        let mut st = st;
        cas::train_hr(&mut st, &lr, &data, &lat, &cfg.hr, phase.steps, &mut |r| {
            if (r.step + 1) % every(phase.steps) == 0 {
                rd.log(&format!(
                    "step {} loss {:.5} grad_norm {:.4} t_guid {:.3?} guidance {}",
                    r.step + 1,
                    r.loss,
                    r.grad_norm,
                    r.t_guid,
                    r.guidance_checksums.first().map_or("-", |s| &s[..16.min(s.len())])
                ));
            }
            records.push(r.clone());
        })?;
        state = Some(st);
    }
    let st = state.ok_or_else(|| Error::Config("hr_phases is empty".into()))?;
    st.save(&rd.sub("checkpoint"), cfg.seed, &[])?;
    lr.save(&rd.sub("lr"), 0, cfg.seed, None, &[])?;
    jsonl(&rd.sub("records.jsonl"), &records)
}

fn latent_shape(spec: CodecSpec, clip: [usize; 3]) -> CliResult<[usize; 4]> {
    let d = spec.latent_dims(clip)?;
    Ok([d[0], d[1], d[2], spec.channels])
}

fn check_class(model: &DiT, class: usize) -> CliResult<()> {
    if class >= model.config.num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range (model has {})",
            model.config.num_classes
        ))
        .into());
    }
    Ok(())
}

pub fn sample(c: &Common, class: usize) -> CliResult<()> {
    let cfg = base_config(c)?;
    cfg.validate()?;
    let codec = load_codec(c, Role::Student)?;
    let mut rd = start(c, &format!("sample-seed{}-class{class}", cfg.seed), &cfg)?;
    let model = load_base(c, &mut rd)?;
    check_class(&model, class)?;
    let shape = latent_shape(codec.spec(), [cfg.data.frames, cfg.data.height, cfg.data.width])?;
    let t0 = Instant::now();
    let z = flow::sample(&mut &model, &shape, class, &cfg.sampler, cfg.seed, &mut |_, _, _| {})?;
    let clip = codec.decode(&LatentTensor::new(z.clone(), codec.spec())?)?;
    let traffic = codec.traffic();
    rd.log(&format!(
        "{} steps in {:.2}s, latent {}, encodes={} decodes={}",
        cfg.sampler.steps,
        t0.elapsed().as_secs_f64(),
        &z.checksum()[..16],
        traffic.encodes,
        traffic.decodes
    ));
    write_clip(&rd, "clip", &clip)
}

pub fn two_stage_sample(c: &Common, g: &GuidanceArgs, class: usize) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    apply_guidance(&mut cfg, g);
    cfg.validate()?;
    cfg.hr.validate()?;
    let codec = load_codec(c, Role::Student)?;
    let hr_dir = dependency(c, "hr", "checkpoint/hr", "train-hr")?;
    let lr_dir = dependency(c, "hr", "lr", "train-hr")?;
    let mut rd = start(c, &format!("two-stage-seed{}-class{class}", cfg.seed), &cfg)?;
    let st = HrState::load(hr_dir.parent().unwrap_or(&hr_dir))?;
    let lr = DiT::load(&lr_dir)?.0;
    check_class(&lr, class)?;
    if g.taps.is_some() && st.fusion.config.taps != cfg.hr.taps {
        return Err(Error::Config(format!(
            "--taps {:?} differs from the trained injection sites {:?}",
            cfg.hr.taps, st.fusion.config.taps
        ))
        .into());
    }
    let spec = codec.spec();
    let (h, w) = cfg.hr_size();
    let ls = latent_shape(spec, [cfg.data.frames, cfg.data.height, cfg.data.width])?;
    let hs = latent_shape(spec, [cfg.data.frames, h, w])?;
    let fusion = st.fusion.for_latents(&lr, &st.model, &ls, &hs)?;
    let out = cas::two_stage_sample(
        &lr,
        &st.model,
        &fusion,
        &codec,
        class,
        &ls,
        &hs,
        cfg.hr.arm,
        &cfg.sampler,
        cfg.seed,
    )?;
    rd.log(&format!(
        "guidance {} at t {:.4?}",
        cfg.hr.arm.label(),
        dedup(&out.guidance_t)
    ));
    for (i, s) in out.guidance_checksums.iter().enumerate().take(4) {
        rd.log(&format!("guidance checksum {i}: {s}"));
    }
    let t = out.timings;
    rd.log(&format!(
        "timings: lr {:.2}s, guidance {:.3}s, hr {:.2}s, decode {:.3}s",
        t.lr, t.guidance, t.hr, t.decode
    ));
    rd.log(&format!(
        "codec traffic: encodes={} decodes={}",
        out.traffic.encodes, out.traffic.decodes
    ));
    #[derive(Serialize)]
    struct Summary<'a> {
        arm: String,
        guidance_t: &'a [f64],
        guidance_checksums: &'a [String],
        encodes: usize,
        decodes: usize,
        hr_latent: String,
        timings: cas::StageTimings,
    }
    rd.write_json(
        "summary.json",
        &Summary {
            arm: cfg.hr.arm.label(),
            guidance_t: &out.guidance_t,
            guidance_checksums: &out.guidance_checksums,
            encodes: out.traffic.encodes,
            decodes: out.traffic.decodes,
            hr_latent: out.hr_latent.checksum(),
            timings: out.timings,
        },
    )?;
    write_clip(&rd, "clip", &out.video)
}

fn dedup(ts: &[f64]) -> Vec<f64> {
    let mut v = ts.to_vec();
    v.dedup();
    v
}

pub fn bench(c: &Common) -> CliResult<()> {
    let cfg = base_config(c)?;
    let mut rd = start(c, "bench", &cfg)?;
    #[derive(Serialize)]
    struct CostRow {
        clip: [u64; 3],
        teacher_tokens: u64,
        student_tokens: u64,
        token_ratio: f64,
        attention_ratio: f64,
    }
    let (tp, sp) = (CodecSpec::teacher_production(), CodecSpec::student_production());
    let mut cost = Vec::new();
    for clip in [[48u64, 1440, 2560], [96, 1440, 2560], [48, 2880, 5120]] {
        let t = token_count(&CostModelInput::new(clip, &tp, 2))?;
        let s = token_count(&CostModelInput::new(clip, &sp, 1))?;
        let (ft, fs) = (attention_flops(t, 3072, 28), attention_flops(s, 3072, 28));
        cost.push(CostRow {
            clip,
            teacher_tokens: t,
            student_tokens: s,
            token_ratio: t as f64 / s as f64,
            attention_ratio: ft.attention as f64 / fs.attention as f64,
        });
    }
    let mut lat: Vec<LatencyRow> = Vec::new();
    let reps = c.steps.unwrap_or(10).max(1);
    let (h, w) = cfg.hr_size();
    let cases = [
        (
            "teacher (base res)",
            &cfg.teacher,
            cfg.teacher_codec.spec,
            (cfg.data.height, cfg.data.width),
        ),
        (
            "student (base res)",
            &cfg.student,
            cfg.student_codec.spec,
            (cfg.data.height, cfg.data.width),
        ),
        ("student (high res)", &cfg.student, cfg.student_codec.spec, (h, w)),
    ];
    for (name, mc, spec, (hh, ww)) in cases {
        let model = DiT::new(mc.clone(), &mut rng::stream(cfg.seed, 0, Purpose::Init))?;
        let shape = latent_shape(spec, [cfg.data.frames, hh, ww])?;
        let z = Tensor::randn(shape.to_vec(), 1.0, &mut rng::seeded(cfg.seed));
        let tokens = token_count(&CostModelInput::new(
            [cfg.data.frames as u64, hh as u64, ww as u64],
            &spec,
            mc.patch as u64,
        ))?;
        let mut err = None;
        let row = latency_bench(name, tokens, 3, reps, || {
            if let Err(e) = model.predict(&z, 0.5, 0, &[], &mut NoHook) {
                err = Some(e);
            }
        })?;
        if let Some(e) = err {
            return Err(e.into());
        }
        rd.log(&format!(
            "{name}: {tokens} tokens, {:.2} ms per forward (IQR {:.2})",
            row.median * 1e3,
            row.iqr * 1e3
        ));
        lat.push(row);
    }
    let header = [
        "clip",
        "teacher tokens",
        "student tokens",
        "token ratio",
        "attention ratio",
    ];
    let rows: Vec<Vec<String>> = cost
        .iter()
        .map(|r| {
            vec![
                format!("{}x{}x{}", r.clip[0], r.clip[1], r.clip[2]),
                r.teacher_tokens.to_string(),
                r.student_tokens.to_string(),
                format!("{}", r.token_ratio),
                format!("{}", r.attention_ratio),
            ]
        })
        .collect();
    let mut md = String::from("# Token and attention cost at production codec factors\n\n");
    md += &format_table(&header, &rows);
    md += "\n# Measured forward latency at desk scale\n\n";
    let rows: Vec<Vec<String>> = lat
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.tokens.to_string(),
                format!("{:.3}", r.median * 1e3),
                format!("{:.3}", r.iqr * 1e3),
            ]
        })
        .collect();
    md += &format_table(&["model", "tokens", "median ms", "IQR ms"], &rows);
    rd.log(&md);
    #[derive(Serialize)]
    struct Bench {
        cost: Vec<CostRow>,
        latency: Vec<LatencyRow>,
    }
    write_results(&rd.path, "bench", &Bench { cost, latency: lat }, &md)?;
    Ok(())
}

pub fn cka(c: &Common) -> CliResult<()> {
    let cfg = base_config(c)?;
    cfg.validate()?;
    let sc = load_codec(c, Role::Student)?;
    let tc = load_codec(c, Role::Teacher)?;
    let teacher = load_lr(c, Role::Teacher)?;
    let dir = dependency(c, "distill", "checkpoint/student", "distill")?;
    let state = DistillState::load(dir.parent().unwrap_or(&dir))?;
    let mut rd = start(c, "cka", &cfg)?;
    let held = heldout_set(&cfg, &cfg.data.template())?;
    let (hs, ht) = (held.encode(&sc)?, held.encode(&tc)?);
    let n = cfg.experiments.probes.min(held.videos.len());
    let pairs: Vec<(Tensor, Tensor, usize)> = (0..n)
        .map(|i| (ht.videos[i].clone(), hs.videos[i].clone(), held.video_classes[i]))
        .collect();
    let report = distill_cka(
        &state.student,
        &state.projector,
        &teacher,
        &pairs,
        &cfg.experiments.cka_timesteps,
        cfg.seed,
    )?;
    for e in &report.entries {
        rd.log(&format!("t {:.2}: CKA {:.4}", e.t, e.cka));
    }
    rd.log(&format!("mean CKA {:.4} over {n} held-out clips", report.mean_cka()));
    rd.write_json("cka.json", &report)
}

fn artifacts(c: &Common, cfg: &RunConfig, rd: &mut RunDir) -> CliResult<Artifacts> {
    let root: PathBuf = cache_root(c);
    rd.log(&format!("artifact cache {}", display(&root)));
    Ok(Artifacts::load_or_build(Some(&root), cfg, &mut |l| rd.log(l))?)
}

pub fn table3(c: &Common) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    if let Some(s) = c.steps {
        cfg.experiments.distill_steps = s;
    }
    let mut rd = start(c, "table3", &cfg)?;
    let a = artifacts(c, &cfg, &mut rd)?;
    let t = run_table3(&cfg, &a.table3_inputs(), &mut |l| rd.log(l))?;
    let md = t.to_markdown();
    rd.log(&md);
    Ok(write_results(&rd.path, "table3", &t, &md)?)
}

pub fn table4(c: &Common) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    if let Some(s) = c.steps {
        cfg.experiments.hr_steps = s;
    }
    let mut rd = start(c, "table4", &cfg)?;
    let a = artifacts(c, &cfg, &mut rd)?;
    let t = run_table4(&cfg, &a.student_codec, &a.student, &mut |l| rd.log(l))?;
    let md = t.to_markdown();
    rd.log(&md);
    Ok(write_results(&rd.path, "table4", &t, &md)?)
}

pub fn multires(c: &Common) -> CliResult<()> {
    let mut cfg = base_config(c)?;
    if let Some(s) = c.steps {
        cfg.experiments.hr_steps = s;
    }
    let mut rd = start(c, "multires", &cfg)?;
    let a = artifacts(c, &cfg, &mut rd)?;
    let data = hr_training_set(&cfg, cfg.data.frames)?;
    let lat = prepare_hr_latents(&data, &a.student_codec, (cfg.data.height, cfg.data.width), false)?;
    let mut st = HrState::new(
        &a.student,
        lat.lr.videos[0].shape(),
        lat.hr.videos[0].shape(),
        &cfg.hr.taps,
        cfg.hr.train.optim,
    )?;
    rd.log(&format!(
        "training the guided model for {} steps",
        cfg.experiments.hr_steps
    ));
    cas::train_hr(
        &mut st,
        &a.student,
        &data,
        &lat,
        &cfg.hr,
        cfg.experiments.hr_steps,
        &mut |_| {},
    )?;
    let r = run_multires_probe(
        &cfg,
        &a.student_codec,
        &a.student,
        Some((&st.model, &st.fusion)),
        &mut |l| rd.log(l),
    )?;
    let md = r.to_markdown();
    rd.log(&md);
    Ok(write_results(&rd.path, "multires", &r, &md)?)
}
