//! Spatial variance of full high-resolution samples: the two-stage
//! pipeline, guidance from a clean reference latent, and an unguided
//! high-resolution model.
//!
//! cargo run --release -p cascade-distill --example pilot_cascade -- [CACHE_DIR]

use std::path::PathBuf;

use cascade_distill::analysis::spatial_variance;
use cascade_distill::cascade::{prepare_hr_latents, train_hr, two_stage_sample, GuidanceArm, HrState, ReferenceGuided};
use cascade_distill::codec::LatentTensor;
use cascade_distill::config::RunConfig;
use cascade_distill::experiments::{heldout_set, hr_training_set, Artifacts};
use cascade_distill::flow::{sample, sample_from};
use cascade_distill::rng::{self, Purpose};
use cascade_distill::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cache = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/pilot_cache".into()));
    let cfg = RunConfig::default();
    let a = Artifacts::load_or_build(Some(&cache), &cfg, &mut |l| println!("{l}")).unwrap();
    let codec = &a.student_codec;
    let lr_size = (cfg.data.height, cfg.data.width);
    let data = hr_training_set(&cfg, cfg.data.frames).unwrap();
    let lat = prepare_hr_latents(&data, codec, lr_size, false).unwrap();
    let held = heldout_set(&cfg, &cfg.data.hr_template()).unwrap();
    let held_lat = prepare_hr_latents(&held, codec, lr_size, false).unwrap();
    let ls = lat.lr.videos[0].shape().to_vec();
    let hs = lat.hr.videos[0].shape().to_vec();
    let decode = |z| codec.decode(&LatentTensor::new(z, codec.spec()).unwrap()).unwrap();
    let n = 4;
    let data_var: f64 = held.videos[..n].iter().map(spatial_variance).sum::<f64>() / n as f64;
    println!("held-out data variance {data_var:.4}");

    for arm in [GuidanceArm::default(), GuidanceArm::Unguided] {
        let mut hc = cfg.hr.clone();
        hc.arm = arm;
        let mut st = HrState::new(&a.student, &ls, &hs, &hc.taps, hc.train.optim).unwrap();
        train_hr(
            &mut st,
            &a.student,
            &data,
            &lat,
            &hc,
            cfg.experiments.hr_steps,
            &mut |_| {},
        )
        .unwrap();
        let (mut two, mut refd) = (0.0, 0.0);
        for j in 0..n {
            let class = held_lat.hr.video_classes[j];
            let out = two_stage_sample(
                &a.student,
                &st.model,
                &st.fusion,
                codec,
                class,
                &ls,
                &hs,
                arm,
                &cfg.sampler,
                j as u64,
            )
            .unwrap();
            two += spatial_variance(&out.video) / n as f64;
            let mut den = ReferenceGuided::new(
                &st.model,
                &st.fusion,
                &a.student,
                arm,
                &held_lat.lr.videos[j],
                None,
                cfg.sampler.schedule,
                j as u64,
            );
            let z = sample(&mut den, &hs, class, &cfg.sampler, j as u64, &mut |_, _, _| {}).unwrap();
            refd += spatial_variance(&decode(z)) / n as f64;
        }
        println!(
            "{:<14} two-stage {two:.4}  clean-reference guidance {refd:.4}",
            arm.label()
        );
        for t0 in [0.95, 0.8] {
            let mut v = 0.0;
            for j in 0..n {
                let class = held_lat.hr.video_classes[j];
                let mut den = ReferenceGuided::new(
                    &st.model,
                    &st.fusion,
                    &a.student,
                    arm,
                    &held_lat.lr.videos[j],
                    None,
                    cfg.sampler.schedule,
                    j as u64,
                );
                let z0 = Tensor::randn(hs.clone(), 1.0, &mut rng::stream(j as u64, 0, Purpose::Sample));
                let z = sample_from(&mut den, &z0, t0, class, &cfg.sampler, &mut |_, _, _| {}).unwrap();
                v += spatial_variance(&decode(z)) / n as f64;
            }
            println!("{:<14} clean-reference guidance from t={t0}: {v:.4}", arm.label());
        }
    }
}
