//! Overfits the LR model on one clip and reports decoded sample PSNR.
//!
//! cargo run --release -p cascade-distill --example pilot_overfit -- STEPS LR DIM DEPTH

use std::path::Path;
use std::time::Instant;

use cascade_distill::analysis::psnr;
use cascade_distill::codec::{train_codec, Codec, CodecConfig, CodecSpec, CodecTrainOptions, LatentTensor};
use cascade_distill::data::{ClipSpec, SpecSource};
use cascade_distill::dit::{DiT, DiTConfig};
use cascade_distill::flow::{sample, SamplerConfig};
use cascade_distill::nn::AdamConfig;
use cascade_distill::rng;
use cascade_distill::train::{train_diffusion, LrSchedule, TrainConfig, TrainState, TrainingSet};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let steps = arg(1, 2000.0) as usize;
    let lr = arg(2, 1e-3);
    let dim = arg(3, 64.0) as usize;
    let depth = arg(4, 8.0) as usize;
    let template = ClipSpec::new(0, 8, 32, 32);
    let cache = Path::new("/tmp/pilot_codec_student");
    let codec = Codec::load(cache).unwrap_or_else(|_| {
        let train = SpecSource::seeds(&template, 0, 512).generate_all().unwrap();
        let held = SpecSource::seeds(&template, 10_000, 8).generate_all().unwrap();
        let (c, r) = train_codec(
            CodecConfig::new(CodecSpec::student_desk()),
            &train,
            &held,
            &CodecTrainOptions::default(),
        )
        .unwrap();
        println!("codec psnr {:.2}", r.heldout_psnr);
        c.save(cache, 5000, 0, &[]).unwrap();
        c
    });
    let data = TrainingSet::generate(&template, &[3], &[], (1, 0)).unwrap();
    let enc = data.encode(&codec).unwrap();
    let cfg = DiTConfig {
        depth,
        dim,
        heads: 4,
        latent_channels: 16,
        patch: 1,
        tap_indices: vec![],
        ..Default::default()
    };
    let model = DiT::new(cfg, &mut rng::stream(0, 0, rng::Purpose::Init)).unwrap();
    let tc = TrainConfig {
        optim: AdamConfig::with_lr(lr),
        steps,
        lr_schedule: LrSchedule::Cosine { final_frac: 0.05 },
        ..Default::default()
    };
    let mut st = TrainState::new(model, tc.optim);
    let start = Instant::now();
    let mut acc = 0.0;
    let every = (steps / 10).max(1);
    let target = &data.videos[0];
    let round_trip = codec.decode(&codec.encode(target).unwrap()).unwrap();
    println!(
        "codec round trip on target {:.2} dB",
        psnr(target, &round_trip).unwrap()
    );
    for chunk in 0..steps / every {
        train_diffusion(&mut st, &data, &enc, &tc, every, &mut |r| acc += r.loss).unwrap();
        let z = sample(
            &mut st.model,
            enc.videos[0].shape(),
            data.video_classes[0],
            &SamplerConfig::default(),
            1,
            &mut |_, _, _| {},
        )
        .unwrap();
        let clip = codec
            .decode(&LatentTensor::new(z.clone(), codec.spec()).unwrap())
            .unwrap();
        println!(
            "step {:>6} loss {:.5} latent-mse {:.5} psnr {:.2} ({:.0}s)",
            (chunk + 1) * every,
            acc / every as f64,
            z.zip_map(&enc.videos[0], |a, b| (a - b) * (a - b)).mean(),
            psnr(target, &clip).unwrap(),
            start.elapsed().as_secs_f64()
        );
        acc = 0.0;
    }
}
