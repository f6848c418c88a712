//! Feature-guided vs unguided high-resolution training on one seed:
//! per-timestep held-out and training loss, for a given number of
//! high-resolution training clips.
//!
//! cargo run --release -p cascade-distill --example pilot_guidance -- [CACHE_DIR] [SEED] [TRAIN_VIDEOS] [STEPS]

use std::path::PathBuf;

use cascade_distill::cascade::{hr_heldout_loss, prepare_hr_latents, train_hr, GuidanceArm, HrState};
use cascade_distill::config::RunConfig;
use cascade_distill::experiments::{heldout_set, hr_training_set, Artifacts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cache = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/pilot_cache".into()));
    let seed: u64 = args.get(2).map_or(2, |s| s.parse().unwrap());
    let videos: usize = args.get(3).map_or(32, |s| s.parse().unwrap());
    let steps: usize = args.get(4).map_or(1500, |s| s.parse().unwrap());
    let cfg = RunConfig::default();
    let a = Artifacts::load_or_build(Some(&cache), &cfg, &mut |l| println!("{l}")).unwrap();

    let mut hcfg = cfg.clone();
    hcfg.data.train_videos = videos;
    hcfg.data.train_images = videos / 2;
    hcfg.data.heldout_videos = 32;
    let lr_size = (cfg.data.height, cfg.data.width);
    let data = hr_training_set(&hcfg, cfg.data.frames).unwrap();
    let lat = prepare_hr_latents(&data, &a.student_codec, lr_size, false).unwrap();
    let held = heldout_set(&hcfg, &cfg.data.hr_template()).unwrap();
    let held_lat = prepare_hr_latents(&held, &a.student_codec, lr_size, false).unwrap();
    let mut train_sub = lat.clone();
    train_sub.hr.videos.truncate(32);
    train_sub.lr.videos.truncate(32);

    let ts: Vec<f64> = (0..8).map(|i| (i as f64 + 0.5) / 8.0).collect();
    for arm in [GuidanceArm::Unguided, GuidanceArm::default()] {
        let mut hc = cfg.hr.clone();
        hc.arm = arm;
        hc.train.seed = seed;
        hc.train.steps = steps;
        let mut st = HrState::new(
            &a.student,
            lat.lr.videos[0].shape(),
            lat.hr.videos[0].shape(),
            &hc.taps,
            hc.train.optim,
        )
        .unwrap();
        train_hr(&mut st, &a.student, &data, &lat, &hc, steps, &mut |_| {}).unwrap();
        let mut line = format!("{:<14} videos {videos} steps {steps}:", arm.label());
        let (mut h_all, mut t_all) = (0.0, 0.0);
        for &t in &ts {
            let h = hr_heldout_loss(
                &st.model,
                &st.fusion,
                &a.student,
                &held_lat,
                &[t],
                1000 + seed,
                arm,
                &hc.taps,
                &hc.train,
            )
            .unwrap();
            let tr = hr_heldout_loss(
                &st.model,
                &st.fusion,
                &a.student,
                &train_sub,
                &[t],
                1000 + seed,
                arm,
                &hc.taps,
                &hc.train,
            )
            .unwrap();
            line += &format!(" t{t:.2} {h:.4}/{tr:.4}");
            h_all += h / ts.len() as f64;
            t_all += tr / ts.len() as f64;
        }
        println!("{line}  mean held-out {h_all:.5} train {t_all:.5}");
    }
}
