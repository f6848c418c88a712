//! Trains a desk codec and prints loss checkpoints and held-out PSNR.
//!
//! cargo run --release -p cascade-distill --example pilot_codec -- student 5000 16 64

use std::time::Instant;

use cascade_distill::codec::{train_codec, CodecConfig, CodecSpec, CodecTrainOptions};
use cascade_distill::data::{ClipSpec, SpecSource};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let role = args.get(1).map(String::as_str).unwrap_or("student");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let frames: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let size: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let n_train: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(512);
    let batch: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = if role == "teacher" {
        CodecSpec::teacher_desk()
    } else {
        CodecSpec::student_desk()
    };
    let template = ClipSpec::new(0, frames, size, size);
    let train = SpecSource::seeds(&template, 0, n_train).generate_all().unwrap();
    let held = SpecSource::seeds(&template, 10_000, 8).generate_all().unwrap();
    let opts = CodecTrainOptions {
        steps,
        batch_size: batch,
        ..Default::default()
    };
    let start = Instant::now();
    let (_codec, report) = train_codec(CodecConfig { spec, hidden }, &train, &held, &opts).unwrap();
    let every = (steps / 10).max(1);
    for end in (every..=steps).step_by(every) {
        println!("step {end:>6}  loss {:.5}", report.window_mean(end, every));
    }
    println!(
        "{role}: held-out PSNR {:.2} dB after {steps} steps in {:.1}s",
        report.heldout_psnr,
        start.elapsed().as_secs_f64()
    );
}
