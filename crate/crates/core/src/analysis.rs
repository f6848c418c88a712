//! Token and FLOP cost model, linear CKA, PSNR, spatial variance and a
//! small latency harness.
//!
//! FLOPs count one multiply-add as 2 FLOPs. Per block the attention
//! score/value products cost `4·T²·d` and the projections plus MLP
//! (QKV, output, 4× MLP) cost `8·T·d²` in the accounting used here.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codec::CodecSpec;
use crate::data::VideoTensor;
use crate::error::{ensure, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Largest reported PSNR; identical clips map here instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Peak-to-peak range of `[-1, 1]` pixels.
pub const PSNR_PEAK: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub frames: u64,
    pub height: u64,
    pub width: u64,
    pub f_t: u64,
    pub f_s: u64,
    pub patch: u64,
    pub depth: u64,
    pub dim: u64,
    pub heads: u64,
}

impl CostModelInput {
    pub fn new(clip: [u64; 3], codec: &CodecSpec, patch: u64) -> Self {
        Self {
            frames: clip[0],
            height: clip[1],
            width: clip[2],
            f_t: codec.f_t as u64,
            f_s: codec.f_s as u64,
            patch,
            depth: 1,
            dim: 1,
            heads: 1,
        }
    }

    pub fn with_model(mut self, depth: u64, dim: u64, heads: u64) -> Self {
        self.depth = depth;
        self.dim = dim;
        self.heads = heads;
        self
    }
}

/// `(N/f_t) · (H/(f_s·p)) · (W/(f_s·p))`, exact.
pub fn token_count(input: &CostModelInput) -> Result<u64> {
    let CostModelInput {
        frames,
        height,
        width,
        f_t,
        f_s,
        patch,
        ..
    } = *input;
    ensure!(
        [frames, height, width, f_t, f_s, patch].iter().all(|&v| v > 0),
        Config,
        "cost model inputs must be positive: {input:?}"
    );
    let s = f_s * patch;
    ensure!(
        frames % f_t == 0 && height % s == 0 && width % s == 0,
        Dimension,
        "{frames}x{height}x{width} not divisible by f_t={f_t}, f_s*p={s}"
    );
    Ok((frames / f_t) * (height / s) * (width / s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// `depth · 4·T²·d`
    pub attention: u128,
    /// `depth · 8·T·d²`
    pub linear: u128,
}

impl FlopCount {
    pub fn total(&self) -> u128 {
        self.attention + self.linear
    }
}

pub fn attention_flops(tokens: u64, dim: u64, depth: u64) -> FlopCount {
    let (t, d, l) = (tokens as u128, dim as u128, depth as u128);
    FlopCount {
        attention: l * 4 * t * t * d,
        linear: l * 8 * t * d * d,
    }
}

/// Linear CKA between two row-aligned representations `[m, p]`, `[m, q]`,
/// computed as `‖Yᶜᵀ Xᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F ‖Yᶜᵀ Yᶜ‖_F)` on column-centered
/// matrices. Zero-variance inputs give 0.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure!(
        x.ndim() == 2 && y.ndim() == 2 && x.shape()[0] == y.shape()[0],
        Dimension,
        "CKA needs row-aligned matrices, got {:?} and {:?}",
        x.shape(),
        y.shape()
    );
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xy = cross(&yc, &xc);
    let xx = cross(&xc, &xc);
    let yy = cross(&yc, &yc);
    let denom = xx.sq_norm().sqrt() * yy.sq_norm().sqrt();
    if denom <= f64::MIN_POSITIVE {
        return Ok(0.0);
    }
    Ok((xy.sq_norm() / denom).clamp(0.0, 1.0))
}

fn center_columns(x: &Tensor) -> Tensor {
    let (m, p) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; p];
    for row in x.data().chunks(p) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(p) {
        for (v, a) in row.iter_mut().zip(&mean) {
            *v -= a;
        }
    }
    out
}

/// `aᵀ b` for `a: [m, p]`, `b: [m, q]`.
fn cross(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros([p, q]);
    crate::tensor::gemm(p, m, q, (a.data(), 1, p), (b.data(), q, 1), 0.0, (out.data_mut(), q, 1));
    out
}

/// Flattens a set of channels-last features into `[rows, channels]`.
pub fn stack_features(feats: &[Tensor]) -> Result<Tensor> {
    ensure!(!feats.is_empty(), InsufficientData, "no features to stack");
    let c = feats[0].last_dim();
    ensure!(
        feats.iter().all(|f| f.last_dim() == c && f.numel() == feats[0].numel()),
        Dimension,
        "feature set has inconsistent shapes"
    );
    let data = feats.iter().flat_map(|f| f.data().iter().copied()).collect::<Vec<_>>();
    Ok(Tensor::new([data.len() / c, c], data))
}

/// Linear CKA between two aligned feature sets (one tensor per sample,
/// identical grids). Needs at least 4 samples.
pub fn feature_cka(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        Dimension,
        "feature sets differ in sample count: {} vs {}",
        a.len(),
        b.len()
    );
    ensure!(
        a.len() >= 4,
        InsufficientData,
        "CKA needs at least 4 samples, got {}",
        a.len()
    );
    let x = stack_features(a)?;
    let y = stack_features(b)?;
    ensure!(
        x.shape()[0] == y.shape()[0],
        Dimension,
        "feature grids are not aligned ({} vs {} tokens)",
        x.shape()[0],
        y.shape()[0]
    );
    linear_cka(&x, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub tap: usize,
    pub t: f64,
    pub cka: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub model_a: String,
    pub model_b: String,
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityReport {
    pub fn mean_cka(&self) -> f64 {
        self.entries.iter().map(|e| e.cka).sum::<f64>() / self.entries.len().max(1) as f64
    }
}

/// Top-`k` principal directions of the column-centered rows of `x`, found
/// by power iteration with deflation, and the `[m, k]` projection.
pub fn principal_projection(x: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    ensure!(x.ndim() == 2, Dimension, "projection needs a matrix");
    let (m, p) = (x.shape()[0], x.shape()[1]);
    let xc = center_columns(x);
    let mut cov = cross(&xc, &xc);
    let mut rng = rng::seeded(seed);
    let mut out = Tensor::zeros([m, k]);
    for comp in 0..k.min(p) {
        let mut v = Tensor::randn([p], 1.0, &mut rng);
        for _ in 0..200 {
            let mut next = vec![0.0; p];
            for (i, n) in next.iter_mut().enumerate() {
                *n = (0..p).map(|j| cov.data()[i * p + j] * v.data()[j]).sum();
            }
            let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm <= f64::MIN_POSITIVE {
                break;
            }
            v = Tensor::new([p], next.into_iter().map(|a| a / norm).collect());
        }
        let lambda: f64 = (0..p)
            .map(|i| v.data()[i] * (0..p).map(|j| cov.data()[i * p + j] * v.data()[j]).sum::<f64>())
            .sum();
        for i in 0..p {
            for j in 0..p {
                cov.data_mut()[i * p + j] -= lambda * v.data()[i] * v.data()[j];
            }
        }
        for r in 0..m {
            out.data_mut()[r * k + comp] = (0..p).map(|j| xc.data()[r * p + j] * v.data()[j]).sum();
        }
    }
    Ok(out)
}

/// `10·log10(peak² / MSE)` with peak 2, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    psnr_tensors(a.tensor(), b.tensor())
}

pub fn psnr_tensors(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(
        a.shape() == b.shape(),
        Dimension,
        "PSNR of mismatched shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean over frames and colour channels of the per-frame spatial variance.
pub fn spatial_variance(clip: &VideoTensor) -> f64 {
    let [n, h, w] = clip.dims();
    let hw = (h * w) as f64;
    let mut total = 0.0;
    for f in 0..n {
        let frame = &clip.tensor().data()[f * h * w * 3..(f + 1) * h * w * 3];
        for c in 0..3 {
            let mean = frame.iter().skip(c).step_by(3).sum::<f64>() / hw;
            let var = frame
                .iter()
                .skip(c)
                .step_by(3)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / hw;
            total += var;
        }
    }
    total / (3 * n) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub name: String,
    pub tokens: u64,
    /// Seconds per call.
    pub median: f64,
    pub iqr: f64,
    /// Calls folded into each timed sample to clear timer resolution.
    pub inner: usize,
    pub samples: usize,
}

/// Times `f` after `warmup` discarded calls. Calls shorter than a
/// millisecond are batched until a sample spans at least one.
pub fn latency_bench(
    name: &str,
    tokens: u64,
    warmup: usize,
    repetitions: usize,
    mut f: impl FnMut(),
) -> Result<LatencyRow> {
    ensure!(warmup >= 3, Config, "latency bench needs at least 3 warmup runs");
    ensure!(repetitions >= 1, Config, "latency bench needs at least one repetition");
    let mut probe = Duration::ZERO;
    for _ in 0..warmup {
        let start = Instant::now();
        f();
        probe = start.elapsed();
    }
    let floor = Duration::from_millis(1);
    let inner = if probe >= floor {
        1
    } else {
        (floor.as_nanos() / probe.as_nanos().max(1)) as usize + 1
    };
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        times.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyRow {
        name: name.to_string(),
        tokens,
        median: quantile(&times, 0.5),
        iqr: quantile(&times, 0.75) - quantile(&times, 0.25),
        inner,
        samples: repetitions,
    })
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Whether median step time increases with token count.
pub fn monotone_in_tokens(rows: &[LatencyRow]) -> bool {
    let mut sorted: Vec<&LatencyRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.tokens);
    sorted
        .windows(2)
        .all(|w| w[0].tokens == w[1].tokens || w[0].median < w[1].median)
}

/// Aligned plain-text table.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(|s| s.as_str())
            .collect(),
    ));
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecRole;
    use crate::data::{generate_clip, ClipSpec};
    use crate::resample::Kernel;
    use rand::Rng;

    #[test]
    fn token_counts() {
        let teacher = CodecSpec::teacher_production();
        let student = CodecSpec::student_production();
        let t = token_count(&CostModelInput::new([48, 1440, 2560], &teacher, 2)).unwrap();
        let s = token_count(&CostModelInput::new([48, 1440, 2560], &student, 1)).unwrap();
        assert_eq!((t, s), (172_800, 21_600));
        let unit = CodecSpec::new(1, 1, 1, CodecRole::Teacher).unwrap();
        assert_eq!(token_count(&CostModelInput::new([3, 8, 16], &unit, 1)).unwrap(), 384);
        let dt = token_count(&CostModelInput::new([16, 64, 64], &CodecSpec::teacher_desk(), 2)).unwrap();
        let ds = token_count(&CostModelInput::new([16, 64, 64], &CodecSpec::student_desk(), 1)).unwrap();
        assert_eq!((dt, ds), (512, 256));
        assert!(token_count(&CostModelInput::new([49, 1440, 2560], &teacher, 2)).is_err());
    }

    #[test]
    fn flop_scaling() {
        let a = attention_flops(1000, 64, 8);
        let b = attention_flops(2000, 64, 8);
        assert_eq!(b.attention, 4 * a.attention);
        assert_eq!(attention_flops(1000, 64, 16).total(), 2 * a.total());
        assert_eq!(
            attention_flops(172_800, 3072, 28).attention,
            64 * attention_flops(21_600, 3072, 28).attention
        );
        // 4·T²·d + 8·T·d² by hand for T=3, d=2, one block.
        assert_eq!(attention_flops(3, 2, 1).total(), 72 + 96);
    }

    /// `HSIC(K, L) / sqrt(HSIC(K,K) HSIC(L,L))` with centered linear Gram
    /// matrices, evaluated naively.
    fn gram_cka(x: &Tensor, y: &Tensor) -> f64 {
        let m = x.shape()[0];
        let gram = |a: &Tensor| {
            let p = a.shape()[1];
            let mut k = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    k[i * m + j] = (0..p).map(|c| a.data()[i * p + c] * a.data()[j * p + c]).sum();
                }
            }
            let row: Vec<f64> = (0..m)
                .map(|i| (0..m).map(|j| k[i * m + j]).sum::<f64>() / m as f64)
                .collect();
            let all = row.iter().sum::<f64>() / m as f64;
            for i in 0..m {
                for j in 0..m {
                    k[i * m + j] += all - row[i] - row[j];
                }
            }
            k
        };
        let (k, l) = (gram(x), gram(y));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        dot(&k, &l) / (dot(&k, &k) * dot(&l, &l)).sqrt()
    }

    #[test]
    fn cka_matches_gram_form_and_invariances() {
        let mut r = rng::seeded(2);
        let x = Tensor::randn([40, 6], 1.0, &mut r);
        let noise = Tensor::randn([40, 3], 0.5, &mut r);
        let y = Tensor::new(
            [40, 3],
            (0..120)
                .map(|i| x.data()[(i / 3) * 6 + i % 3] + noise.data()[i])
                .collect(),
        );
        let fast = linear_cka(&x, &y).unwrap();
        assert!((fast - gram_cka(&x, &y)).abs() < 1e-12);
        assert!((linear_cka(&y, &x).unwrap() - fast).abs() < 1e-12);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // Rotation in the plane of the first two channels.
        let (c, s) = (0.6f64, 0.8f64);
        let mut rot = x.clone();
        for row in rot.data_mut().chunks_mut(6) {
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
        }
        assert!((linear_cka(&x, &rot).unwrap() - 1.0).abs() < 1e-12);
    }

    /// Random orthogonal map as a product of Givens rotations.
    fn rotate(x: &Tensor, seed: u64) -> Tensor {
        let c = x.last_dim();
        let mut r = rng::seeded(seed);
        let mut out = x.clone();
        for _ in 0..3 * c {
            let (i, j) = (r.random_range(0..c), r.random_range(0..c));
            if i == j {
                continue;
            }
            let th: f64 = r.random_range(0.0..std::f64::consts::TAU);
            for row in out.data_mut().chunks_mut(c) {
                let (a, b) = (row[i], row[j]);
                row[i] = th.cos() * a - th.sin() * b;
                row[j] = th.sin() * a + th.cos() * b;
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn cka_is_bounded_symmetric_and_rotation_invariant(seed in 0u64..5000, rows in 4usize..30, cx in 1usize..6, cy in 1usize..6) {
            let mut r = rng::seeded(seed);
            let x = Tensor::randn([rows, cx], 1.0, &mut r);
            let y = Tensor::randn([rows, cy], 2.0, &mut r);
            let k = linear_cka(&x, &y).unwrap();
            proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&k));
            proptest::prop_assert!((linear_cka(&y, &x).unwrap() - k).abs() < 1e-12);
            proptest::prop_assert!((linear_cka(&rotate(&x, seed + 1), &rotate(&y, seed + 2)).unwrap() - k).abs() < 1e-9);
        }

        #[test]
        fn tokens_scale_with_each_axis(n in 1u64..20, h in 1u64..20, w in 1u64..20, k in 1u64..6, axis in 0usize..3) {
            let spec = CodecSpec::student_production();
            let mut clip = [8 * n, 32 * h, 32 * w];
            let base = token_count(&CostModelInput::new(clip, &spec, 1)).unwrap();
            clip[axis] *= k;
            proptest::prop_assert_eq!(token_count(&CostModelInput::new(clip, &spec, 1)).unwrap(), k * base);
            let tea = CodecSpec::teacher_production();
            proptest::prop_assert_eq!(token_count(&CostModelInput::new(clip, &tea, 2)).unwrap(), 8 * k * base);
        }

        #[test]
        fn attention_is_quadratic_in_tokens(t in 1u64..100_000, k in 1u64..64, d in 1u64..4096, l in 1u64..64) {
            let (a, b) = (attention_flops(t, d, l), attention_flops(k * t, d, l));
            proptest::prop_assert_eq!(b.attention, (k * k) as u128 * a.attention);
            proptest::prop_assert_eq!(b.linear, k as u128 * a.linear);
        }
    }

    #[test]
    fn cka_needs_four_samples() {
        let f = vec![Tensor::zeros([2, 2, 2, 3]); 3];
        assert!(matches!(feature_cka(&f, &f), Err(crate::Error::InsufficientData(_))));
    }

    #[test]
    fn psnr_cases() {
        let clip = generate_clip(&ClipSpec::new(1, 2, 16, 16)).unwrap();
        assert_eq!(psnr(&clip, &clip).unwrap(), PSNR_CAP_DB);
        let a = VideoTensor::new(Tensor::full([1, 8, 8, 3], 0.1)).unwrap();
        let b = VideoTensor::new(Tensor::full([1, 8, 8, 3], 0.3)).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let small = clip.resize(8, 8, Kernel::Cubic).unwrap();
        let back = small.resize(16, 16, Kernel::Cubic).unwrap();
        assert!(psnr(&clip, &back).unwrap().is_finite());
    }

    #[test]
    fn spatial_variance_of_constant_is_zero() {
        let a = VideoTensor::new(Tensor::full([2, 8, 8, 3], 0.4)).unwrap();
        assert!(spatial_variance(&a) < 1e-20);
        let clip = generate_clip(&ClipSpec::new(1, 2, 16, 16)).unwrap();
        assert!(spatial_variance(&clip) > 0.0);
    }

    #[test]
    fn principal_projection_recovers_dominant_axis() {
        let mut r = rng::seeded(5);
        let noise = Tensor::randn([100, 4], 0.01, &mut r);
        let mut x = noise.clone();
        for (i, row) in x.data_mut().chunks_mut(4).enumerate() {
            row[2] += (i as f64 - 50.0) / 10.0;
        }
        let proj = principal_projection(&x, 3, 0).unwrap();
        let col0: Vec<f64> = proj.data().chunks(3).map(|r| r[0]).collect();
        let expect: Vec<f64> = (0..100).map(|i| (i as f64 - 49.5) / 10.0).collect();
        let dot: f64 = col0.iter().zip(&expect).map(|(a, b)| a * b).sum();
        let na: f64 = col0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = expect.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() > 0.999);
    }

    #[test]
    fn bench_rejects_short_warmup_and_orders_rows() {
        assert!(latency_bench("x", 1, 2, 3, || {}).is_err());
        let row = latency_bench("x", 1, 3, 5, || {
            std::hint::black_box((0..100).sum::<u64>());
        })
        .unwrap();
        assert!(row.inner >= 1 && row.median >= 0.0);
        let mk = |tokens, median| LatencyRow {
            name: String::new(),
            tokens,
            median,
            iqr: 0.0,
            inner: 1,
            samples: 1,
        };
        assert!(monotone_in_tokens(&[mk(2, 2.0), mk(1, 1.0)]));
        assert!(!monotone_in_tokens(&[mk(2, 0.5), mk(1, 1.0)]));
    }

    #[test]
    fn table_is_aligned() {
        let t = format_table(&["arm", "loss"], &[vec!["baseline".into(), "0.5".into()]]);
        assert_eq!(t, "arm       loss\n--------  ----\nbaseline  0.5\n");
    }
}
