//! Procedural toy videos: anti-aliased ellipses and rectangles drifting over
//! a low-frequency textured background, plus video/still-image batch mixing.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::resample::{resize_grid, Kernel};
use crate::tensor::Tensor;

/// Number of content styles; a clip's style is `seed % STYLES` and doubles
/// as its conditioning class.
pub const STYLES: usize = 4;

const MAX_SHAPES: usize = 8;

/// A clip `[N, H, W, 3]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor(Tensor);

impl VideoTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        ensure!(
            s.len() == 4 && s[3] == 3,
            Dimension,
            "video must be [N, H, W, 3], got {s:?}"
        );
        ensure!(s[0] >= 1, Dimension, "video needs at least one frame");
        ensure!(
            s[1] >= 8 && s[2] >= 8,
            Dimension,
            "video frames must be at least 8x8, got {}x{}",
            s[1],
            s[2]
        );
        ensure!(
            t.data().iter().all(|v| (-1.0..=1.0).contains(v)),
            Domain,
            "video values must lie in [-1, 1]"
        );
        Ok(Self(t))
    }

    /// Clamps into `[-1, 1]` (mapping NaN to 0) before validating shape.
    pub fn clamped(t: Tensor) -> Result<Self> {
        Self::new(t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames(), self.height(), self.width()]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        let t = self.0.narrow0(i, 1);
        let s = t.shape()[1..].to_vec();
        t.reshape(s)
    }

    /// Holds a still image (or the first frame of a clip) for `n` frames.
    pub fn repeat_frames(&self, n: usize) -> VideoTensor {
        let f = self.0.narrow0(0, 1);
        let parts: Vec<&Tensor> = (0..n).map(|_| &f).collect();
        VideoTensor(Tensor::cat0(&parts))
    }

    /// Spatial resize with the given kernel; the result is clamped to range.
    pub fn resize(&self, height: usize, width: usize, kernel: Kernel) -> Result<VideoTensor> {
        let out = resize_grid(&self.0, [self.frames(), height, width], kernel);
        VideoTensor::clamped(out)
    }
}

/// Everything needed to regenerate one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    /// Upper bound on per-frame shape displacement, in pixels.
    pub motion_amplitude: f64,
}

impl ClipSpec {
    pub fn new(seed: u64, n_frames: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            n_frames,
            height,
            width,
            n_shapes: 1 + (seed as usize / STYLES) % 3,
            motion_amplitude: 1.0,
        }
    }

    /// Conditioning class of the clip.
    pub fn class(&self) -> usize {
        (self.seed % STYLES as u64) as usize
    }

    pub fn with_frames(&self, n_frames: usize) -> Self {
        Self {
            n_frames,
            ..self.clone()
        }
    }

    pub fn with_size(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.n_frames >= 1, Dimension, "n_frames must be >= 1");
        ensure!(
            self.height >= 8 && self.width >= 8,
            Dimension,
            "clip must be at least 8x8, got {}x{}",
            self.height,
            self.width
        );
        ensure!(
            (1..=MAX_SHAPES).contains(&self.n_shapes),
            Dimension,
            "n_shapes must be in 1..={MAX_SHAPES}, got {}",
            self.n_shapes
        );
        ensure!(
            self.motion_amplitude.is_finite() && self.motion_amplitude > 0.0,
            Domain,
            "motion_amplitude must be positive"
        );
        Ok(())
    }
}

struct Wave {
    amp: [f64; 3],
    freq: (f64, f64),
    phase: f64,
    drift: f64,
}

struct Shape {
    ellipse: bool,
    radius: (f64, f64),
    color: [f64; 3],
    start: (f64, f64),
    velocity: (f64, f64),
    wobble_dir: (f64, f64),
    wobble_amp: f64,
    wobble_freq: f64,
    wobble_phase: f64,
}

impl Shape {
    fn center(&self, t: f64) -> (f64, f64) {
        let s = self.wobble_amp * (self.wobble_freq * t + self.wobble_phase).sin();
        (
            self.start.0 + self.velocity.0 * t + self.wobble_dir.0 * s,
            self.start.1 + self.velocity.1 * t + self.wobble_dir.1 * s,
        )
    }

    /// Signed distance in pixels (negative inside).
    fn distance(&self, x: f64, y: f64, c: (f64, f64)) -> f64 {
        let (dx, dy) = (x - c.0, y - c.1);
        if self.ellipse {
            let r = ((dx / self.radius.0).powi(2) + (dy / self.radius.1).powi(2)).sqrt();
            (r - 1.0) * self.radius.0.min(self.radius.1)
        } else {
            (dx.abs() - self.radius.0).max(dy.abs() - self.radius.1)
        }
    }
}

fn hsv_to_signed_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [2.0 * (r + m) - 1.0, 2.0 * (g + m) - 1.0, 2.0 * (b + m) - 1.0]
}

/// Renders the clip described by `spec`. Pure in `spec`.
pub fn generate_clip(spec: &ClipSpec) -> Result<VideoTensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c11f);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let size = h.min(w);
    let style = spec.class();
    let base_hue = style as f64 * 360.0 / STYLES as f64;

    let bg_base = hsv_to_signed_rgb(
        base_hue + 180.0 + rng.random_range(-30.0..30.0),
        0.35,
        rng.random_range(0.35..0.6),
    );
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let (fx, fy) = loop {
                let f = (rng.random_range(0..3) as f64, rng.random_range(0..3) as f64);
                if f != (0.0, 0.0) {
                    break f;
                }
            };
            Wave {
                amp: [
                    rng.random_range(0.03..0.12),
                    rng.random_range(0.03..0.12),
                    rng.random_range(0.03..0.12),
                ],
                freq: (fx, fy),
                phase: rng.random_range(0.0..2.0 * PI),
                drift: rng.random_range(-0.03..0.03),
            }
        })
        .collect();

    let amp = spec.motion_amplitude;
    let shapes: Vec<Shape> = (0..spec.n_shapes)
        .map(|_| {
            let angle = rng.random_range(0.0..2.0 * PI);
            let speed = 0.6 * amp * rng.random_range(0.2..1.0);
            let wangle = rng.random_range(0.0..2.0 * PI);
            let wobble_freq = rng.random_range(0.2..0.6);
            // |v| + A*omega <= amplitude bounds the per-frame displacement
            let wobble_amp = 0.4 * amp * rng.random_range(0.0..1.0) / wobble_freq;
            Shape {
                ellipse: rng.random_bool(0.5),
                radius: (size * rng.random_range(0.14..0.26), size * rng.random_range(0.14..0.26)),
                color: hsv_to_signed_rgb(
                    base_hue + rng.random_range(-25.0..25.0),
                    rng.random_range(0.6..0.9),
                    rng.random_range(0.7..0.95),
                ),
                start: (rng.random_range(0.25..0.75) * w, rng.random_range(0.25..0.75) * h),
                velocity: (speed * angle.cos(), speed * angle.sin()),
                wobble_dir: (wangle.cos(), wangle.sin()),
                wobble_amp,
                wobble_freq,
                wobble_phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();

    let softness = (size / 48.0).max(1.0);
    let mut data = Vec::with_capacity(spec.n_frames * spec.height * spec.width * 3);
    for f in 0..spec.n_frames {
        let t = f as f64;
        let centers: Vec<(f64, f64)> = shapes.iter().map(|s| s.center(t)).collect();
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = bg_base;
                for wave in &waves {
                    let arg = 2.0 * PI * (wave.freq.0 * px / w + wave.freq.1 * py / h) + wave.phase + wave.drift * t;
                    let s = arg.cos();
                    for c in 0..3 {
                        rgb[c] += wave.amp[c] * s;
                    }
                }
                for (shape, &ctr) in shapes.iter().zip(&centers) {
                    let d = shape.distance(px, py, ctr);
                    let alpha = (0.5 - d / (2.0 * softness)).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        for c in 0..3 {
                            rgb[c] = rgb[c] * (1.0 - alpha) + shape.color[c] * alpha;
                        }
                    }
                }
                data.extend(rgb.iter().map(|v| v.clamp(-1.0, 1.0)));
            }
        }
    }
    VideoTensor::new(Tensor::new([spec.n_frames, spec.height, spec.width, 3], data))
}

/// Indexable collection of clips.
pub trait ClipSource {
    fn len(&self) -> usize;

    fn clip(&self, index: usize) -> Result<VideoTensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClipSource for [VideoTensor] {
    fn len(&self) -> usize {
        <[VideoTensor]>::len(self)
    }

    fn clip(&self, index: usize) -> Result<VideoTensor> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Dimension(format!("clip index {index} out of range")))
    }
}

impl ClipSource for Vec<VideoTensor> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn clip(&self, index: usize) -> Result<VideoTensor> {
        self.as_slice().clip(index)
    }
}

/// Clips generated on demand from a list of specs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SpecSource {
    pub specs: Vec<ClipSpec>,
}

impl SpecSource {
    /// `count` consecutive seeds starting at `first_seed`, each shaped like
    /// `template`.
    pub fn seeds(template: &ClipSpec, first_seed: u64, count: usize) -> Self {
        let specs = (0..count as u64)
            .map(|i| {
                let mut s = ClipSpec::new(first_seed + i, template.n_frames, template.height, template.width);
                s.motion_amplitude = template.motion_amplitude;
                s
            })
            .collect();
        Self { specs }
    }

    pub fn generate_all(&self) -> Result<Vec<VideoTensor>> {
        self.specs.iter().map(generate_clip).collect()
    }
}

impl ClipSource for SpecSource {
    fn len(&self) -> usize {
        self.specs.len()
    }

    fn clip(&self, index: usize) -> Result<VideoTensor> {
        let spec = self
            .specs
            .get(index)
            .ok_or_else(|| Error::Dimension(format!("clip index {index} out of range")))?;
        generate_clip(spec)
    }
}

/// One drawn sample: the clip and where it came from.
#[derive(Clone, Debug)]
pub struct MixedSample {
    pub clip: VideoTensor,
    pub is_image: bool,
    pub index: usize,
}

/// Draws `batch_size` samples, each a video with probability
/// `ratio_v / (ratio_v + ratio_i)`, otherwise a single-frame image.
pub fn make_mixed_batch<R: Rng + ?Sized>(
    clips: &dyn ClipSource,
    images: &dyn ClipSource,
    ratio_v: u32,
    ratio_i: u32,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<MixedSample>> {
    ensure!(
        ratio_v + ratio_i > 0,
        Config,
        "mixing ratio {ratio_v}:{ratio_i} has no mass"
    );
    if ratio_v > 0 && clips.is_empty() {
        return Err(Error::EmptySource("video source is empty".into()));
    }
    if ratio_i > 0 && images.is_empty() {
        return Err(Error::EmptySource("image source is empty".into()));
    }
    let total = (ratio_v + ratio_i) as u64;
    (0..batch_size)
        .map(|_| {
            let is_image = rng.random_range(0..total) >= ratio_v as u64;
            if is_image {
                let index = rng.random_range(0..images.len());
                let clip = images.clip(index)?;
                let clip = if clip.frames() == 1 {
                    clip
                } else {
                    VideoTensor(clip.0.narrow0(0, 1))
                };
                Ok(MixedSample {
                    clip,
                    is_image: true,
                    index,
                })
            } else {
                let index = rng.random_range(0..clips.len());
                Ok(MixedSample {
                    clip: clips.clip(index)?,
                    is_image: false,
                    index,
                })
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ClipManifest {
    frames: usize,
    height: usize,
    width: usize,
    encoding: String,
    spec: Option<ClipSpec>,
}

fn to_u16(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

/// Writes `dir/frame_0000.png …` (16-bit RGB) plus `dir/clip.toml`.
pub fn export_clip(dir: &Path, clip: &VideoTensor, spec: Option<&ClipSpec>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (clip.height() as u32, clip.width() as u32);
    for f in 0..clip.frames() {
        let frame = clip.frame(f);
        let raw: Vec<u16> = frame.data().iter().map(|&v| to_u16(v)).collect();
        let img = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, raw)
            .ok_or_else(|| Error::Dimension("frame buffer size".into()))?;
        let path = frame_path(dir, f);
        img.save(&path).map_err(|e| Error::format(&path, e))?;
    }
    let manifest = ClipManifest {
        frames: clip.frames(),
        height: clip.height(),
        width: clip.width(),
        encoding: "png-rgb16, value = 2 * level / 65535 - 1".into(),
        spec: spec.cloned(),
    };
    let path = dir.join("clip.toml");
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn frame_path(dir: &Path, f: usize) -> PathBuf {
    dir.join(format!("frame_{f:04}.png"))
}

/// Reads back a clip written by [`export_clip`].
pub fn import_clip(dir: &Path) -> Result<VideoTensor> {
    let path = dir.join("clip.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ClipManifest = toml::from_str(&text).map_err(|e| Error::format(&path, e))?;
    let mut data = Vec::with_capacity(m.frames * m.height * m.width * 3);
    for f in 0..m.frames {
        let p = frame_path(dir, f);
        let img = image::open(&p).map_err(|e| Error::format(&p, e))?.into_rgb16();
        if img.width() as usize != m.width || img.height() as usize != m.height {
            return Err(Error::format(&p, "frame size disagrees with clip.toml"));
        }
        data.extend(img.into_raw().into_iter().map(|v| 2.0 * v as f64 / 65535.0 - 1.0));
    }
    VideoTensor::new(Tensor::new([m.frames, m.height, m.width, 3], data))
}

/// Writes an 8-bit animated GIF preview of the clip.
pub fn export_gif(path: &Path, clip: &VideoTensor, frame_delay_ms: u32) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite).map_err(|e| Error::format(path, e))?;
    let (h, w) = (clip.height() as u32, clip.width() as u32);
    for f in 0..clip.frames() {
        let frame = clip.frame(f);
        let mut rgba = Vec::with_capacity((h * w * 4) as usize);
        for px in frame.data().chunks(3) {
            for &v in px {
                rgba.push((((v + 1.0) * 0.5) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            rgba.push(255);
        }
        let buf = image::RgbaImage::from_raw(w, h, rgba).ok_or_else(|| Error::Dimension("gif frame".into()))?;
        let delay = image::Delay::from_numer_denom_ms(frame_delay_ms, 1);
        enc.encode_frame(image::Frame::from_parts(buf, 0, 0, delay))
            .map_err(|e| Error::format(path, e))?;
    }
    Ok(())
}
