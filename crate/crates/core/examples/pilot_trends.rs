//! Desk-scale run of both ablation tables and the multi-resolution probe
//! with the default config.
//!
//! cargo run --release -p cascade-distill --example pilot_trends -- [CACHE_DIR] [table3|table4|multires]

use std::path::PathBuf;
use std::time::Instant;

use cascade_distill::cascade::{prepare_hr_latents, train_hr, HrState};
use cascade_distill::config::RunConfig;
use cascade_distill::experiments::{hr_training_set, run_multires_probe, run_table3, run_table4, Artifacts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cache = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/pilot_cache".into()));
    let only = args.get(2).cloned();
    let want = |s: &str| only.as_deref().is_none_or(|o| o == s);
    let cfg = RunConfig::default();
    let start = Instant::now();
    let mut log = |l: &str| println!("[{:>6.0}s] {l}", start.elapsed().as_secs_f64());
    let a = Artifacts::load_or_build(Some(&cache), &cfg, &mut log).unwrap();
    if want("table3") {
        let t = run_table3(&cfg, &a.table3_inputs(), &mut log).unwrap();
        println!("{}", t.to_markdown());
    }
    if want("table4") {
        let t = run_table4(&cfg, &a.student_codec, &a.student, &mut log).unwrap();
        println!("{}", t.to_markdown());
    }
    if want("multires") {
        let data = hr_training_set(&cfg, cfg.data.frames).unwrap();
        let lat = prepare_hr_latents(&data, &a.student_codec, (cfg.data.height, cfg.data.width), false).unwrap();
        let mut st = HrState::new(
            &a.student,
            lat.lr.videos[0].shape(),
            lat.hr.videos[0].shape(),
            &cfg.hr.taps,
            cfg.hr.train.optim,
        )
        .unwrap();
        train_hr(
            &mut st,
            &a.student,
            &data,
            &lat,
            &cfg.hr,
            cfg.experiments.hr_steps,
            &mut |_| {},
        )
        .unwrap();
        let r = run_multires_probe(
            &cfg,
            &a.student_codec,
            &a.student,
            Some((&st.model, &st.fusion)),
            &mut log,
        )
        .unwrap();
        println!("{}", r.to_markdown());
    }
}
