//! Per-step wall time of each training loop at desk scale.
//!
//! cargo run --release -p cascade-distill --example pilot_timing -- DIM DEPTH

use std::time::Instant;

use cascade_distill::cascade::{prepare_hr_latents, train_hr, HrConfig, HrState};
use cascade_distill::codec::{train_codec, Codec, CodecConfig, CodecSpec, CodecTrainOptions};
use cascade_distill::data::{ClipSpec, SpecSource};
use cascade_distill::distill::{train_distill, DistillConfig, DistillState};
use cascade_distill::dit::{DiT, DiTConfig};
use cascade_distill::rng;
use cascade_distill::train::{train_diffusion, TrainConfig, TrainState, TrainingSet};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (dim, depth) = (arg(1, 64), arg(2, 8));
    let n = 20;
    let lr_t = ClipSpec::new(0, 8, 32, 32);
    let hr_t = ClipSpec::new(0, 8, 64, 64);

    let clips = SpecSource::seeds(&lr_t, 0, 8).generate_all().unwrap();
    for spec in [CodecSpec::student_desk(), CodecSpec::teacher_desk()] {
        let opts = CodecTrainOptions {
            steps: n,
            ..Default::default()
        };
        let t = Instant::now();
        train_codec(CodecConfig::new(spec), &clips, &clips[..1].to_vec(), &opts).unwrap();
        println!(
            "codec {:?}: {:.1} ms/step",
            spec.role,
            t.elapsed().as_secs_f64() * 1e3 / n as f64
        );
    }
    let sc = Codec::new(CodecConfig::new(CodecSpec::student_desk()), &mut rng::seeded(0)).unwrap();
    let tcodec = Codec::new(CodecConfig::new(CodecSpec::teacher_desk()), &mut rng::seeded(1)).unwrap();
    let mk = |c: usize, patch: usize| {
        DiT::new(
            DiTConfig {
                depth,
                dim,
                heads: if dim >= 64 { 4 } else { 2 },
                latent_channels: c,
                patch,
                tap_indices: (0..4).map(|k| k * depth / 4).collect(),
                ..Default::default()
            },
            &mut rng::seeded(2),
        )
        .unwrap()
    };
    let data = TrainingSet::generate(&lr_t, &[0, 1, 2, 3], &[], (1, 0)).unwrap();
    let slat = data.encode(&sc).unwrap();
    let tlat = data.encode(&tcodec).unwrap();
    let tc = TrainConfig::default();

    let mut st = TrainState::new(mk(16, 1), tc.optim);
    let t = Instant::now();
    train_diffusion(&mut st, &data, &slat, &tc, n, &mut |_| {}).unwrap();
    println!(
        "student diffusion: {:.1} ms/step",
        t.elapsed().as_secs_f64() * 1e3 / n as f64
    );

    let mut tt = TrainState::new(mk(8, 2), tc.optim);
    let t = Instant::now();
    train_diffusion(&mut tt, &data, &tlat, &tc, n, &mut |_| {}).unwrap();
    println!(
        "teacher diffusion: {:.1} ms/step",
        t.elapsed().as_secs_f64() * 1e3 / n as f64
    );

    let dc = DistillConfig::default();
    let mut ds = DistillState::new(
        mk(16, 1),
        &tt.model,
        slat.videos[0].shape(),
        tlat.videos[0].shape(),
        &dc,
    )
    .unwrap();
    let t = Instant::now();
    train_distill(&mut ds, &tt.model, &data, &tlat, &slat, &dc, n, &mut |_| {}).unwrap();
    println!("distill: {:.1} ms/step", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    let hr_data = TrainingSet::generate(&hr_t, &[0, 1, 2, 3], &[], (1, 0)).unwrap();
    let lat = prepare_hr_latents(&hr_data, &sc, (32, 32), false).unwrap();
    let hc = HrConfig {
        taps: (0..4).map(|k| k * depth / 4).collect(),
        ..Default::default()
    };
    let mut hs = HrState::new(
        &st.model,
        lat.lr.videos[0].shape(),
        lat.hr.videos[0].shape(),
        &hc.taps,
        hc.train.optim,
    )
    .unwrap();
    let t = Instant::now();
    train_hr(&mut hs, &st.model, &hr_data, &lat, &hc, n, &mut |_| {}).unwrap();
    println!("hr guided: {:.1} ms/step", t.elapsed().as_secs_f64() * 1e3 / n as f64);
}
