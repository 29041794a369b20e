//! Feature extractors: deterministic stand-ins for the frozen text/vision
//! encoders, the Fourier embedder for box geometry, and the subject
//! augmentation applied before visual encoding.
//!
//! The text and vision encoders are hash-seeded and frozen; they provide
//! stable, unit-norm conditioning vectors with the right plumbing (identical
//! inputs map to identical vectors, distinct inputs are spread out) without
//! pretending to be semantically meaningful.

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::rng::{derive_rng, fnv1a, randn, Stream};
use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_ENCODER_SEED: u64 = 0x5ceb_0075;

/// Fourier features of a k-vector: for each octave j < F and coordinate i,
/// sin(2^j pi x_i) and cos(2^j pi x_i). Output layout is all sines then all
/// cosines, octave-major within each block; dimension is exactly 2 k F.
#[derive(Clone, Copy, Debug)]
pub struct FourierEmbedder {
    pub freqs: usize,
}

impl FourierEmbedder {
    pub fn new(freqs: usize) -> Self {
        assert!(freqs > 0, "fourier: need at least one frequency");
        FourierEmbedder { freqs }
    }

    pub fn out_dim(&self, arity: usize) -> usize {
        2 * arity * self.freqs
    }

    pub fn embed(&self, x: &[f32]) -> Vec<f32> {
        assert!(x.iter().all(|v| v.is_finite()), "fourier: non-finite input");
        let k = x.len();
        let mut out = vec![0.0f32; 2 * k * self.freqs];
        for j in 0..self.freqs {
            let freq = (1u32 << j) as f32 * std::f32::consts::PI;
            for (i, &xi) in x.iter().enumerate() {
                out[j * k + i] = (freq * xi).sin();
                out[self.freqs * k + j * k + i] = (freq * xi).cos();
            }
        }
        out
    }
}

/// Hash-seeded bag-of-tokens text encoder. Tokens are lowercased and
/// whitespace-split; each token hashes to a seeded Gaussian vector, token
/// vectors are averaged and the result unit-normalized.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextEncoder {
    fn default() -> Self {
        TextEncoder { dim: DEFAULT_FEATURE_DIM, seed: DEFAULT_ENCODER_SEED }
    }
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        TextEncoder { dim, seed }
    }

    pub fn encode(&self, text: &str) -> Result<Array1<f32>> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("text encoder: empty phrase".into()));
        }
        let mut acc = Array1::<f32>::zeros(self.dim);
        for tok in &tokens {
            let mut rng = derive_rng(self.seed, Stream::Encoder, &[1, fnv1a(tok.as_bytes())]);
            acc += &randn::<f32>(&[self.dim], &mut rng)
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
        }
        acc /= tokens.len() as f32;
        let norm = acc.mapv(|v| v * v).sum().sqrt();
        if norm < 1e-12 {
            return Ok(fallback_unit(self.dim));
        }
        Ok(acc / norm)
    }
}

/// First basis vector; returned when an encoder's raw output is exactly zero
/// (an all-black image, or a vanishing token average).
fn fallback_unit(dim: usize) -> Array1<f32> {
    let mut v = Array1::zeros(dim);
    v[0] = 1.0;
    v
}

/// Grid-pooling vision encoder: mean RGB over a fixed patch grid, projected
/// through a seeded Gaussian matrix, unit-normalized.
#[derive(Clone, Copy, Debug)]
pub struct VisionEncoder {
    pub dim: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for VisionEncoder {
    fn default() -> Self {
        VisionEncoder { dim: DEFAULT_FEATURE_DIM, grid: 4, seed: DEFAULT_ENCODER_SEED }
    }
}

impl VisionEncoder {
    pub fn new(dim: usize, grid: usize, seed: u64) -> Self {
        VisionEncoder { dim, grid, seed }
    }

    pub fn encode(&self, img: &Image) -> Result<Array1<f32>> {
        let (_, h, w) = img.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("vision encoder: empty image".into()));
        }
        // Patch-grid channel means; cell bounds split the image as evenly as
        // integer arithmetic allows and always cover it.
        let g = self.grid;
        let mut feats = Array1::<f32>::zeros(3 * g * g);
        for gy in 0..g {
            let y0 = gy * h / g;
            let y1 = ((gy + 1) * h / g).max(y0 + 1).min(h);
            for gx in 0..g {
                let x0 = gx * w / g;
                let x1 = ((gx + 1) * w / g).max(x0 + 1).min(w);
                let n = ((y1 - y0) * (x1 - x0)) as f32;
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += img[[c, y, x]];
                        }
                    }
                    feats[(gy * g + gx) * 3 + c] = s / n;
                }
            }
        }
        let in_dim = 3 * g * g;
        let mut rng = derive_rng(self.seed, Stream::Encoder, &[2, self.dim as u64, g as u64]);
        let proj = randn::<f32>(&[self.dim, in_dim], &mut rng)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            / (in_dim as f32).sqrt();
        let v: Array1<f32> = proj.dot(&feats);
        let norm = v.mapv(|x| x * x).sum().sqrt();
        if norm < 1e-12 {
            return Ok(fallback_unit(self.dim));
        }
        Ok(v / norm)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SubjectAugmentConfig {
    pub canvas: usize,
    pub scale_range: (f32, f32),
}

impl SubjectAugmentConfig {
    pub fn new(canvas: usize, scale_range: (f32, f32)) -> Result<Self> {
        if canvas == 0 {
            return Err(Error::InvalidArgument("augment: zero canvas".into()));
        }
        let (lo, hi) = scale_range;
        if !(lo > 0.0 && hi < 2.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "augment: scale range [{lo}, {hi}] must lie inside (0, 2)"
            )));
        }
        Ok(SubjectAugmentConfig { canvas, scale_range })
    }
}

/// Nearest-neighbour resize; both axes share the scale factor, so aspect
/// ratio survives up to rounding.
fn resize_nearest(img: &Image, nh: usize, nw: usize) -> Image {
    let (_, h, w) = img.dim();
    Array3::from_shape_fn((3, nh, nw), |(c, y, x)| {
        let sy = (((y as f32 + 0.5) * h as f32 / nh as f32) as usize).min(h - 1);
        let sx = (((x as f32 + 0.5) * w as f32 / nw as f32) as usize).min(w - 1);
        img[[c, sy, sx]]
    })
}

/// Randomly rescale the subject and paste it centered on a mid-gray canvas.
/// No positional jitter: the subject always lands centered, so nothing about
/// its eventual scene placement leaks into the visual feature.
pub fn augment_subject(
    subject: &Image,
    cfg: &SubjectAugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let (_, h, w) = subject.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("augment: empty subject image".into()));
    }
    let (lo, hi) = cfg.scale_range;
    let s = if lo == hi { lo } else { rng.random::<f32>() * (hi - lo) + lo };
    let nh = ((h as f32 * s).round() as usize).max(1);
    let nw = ((w as f32 * s).round() as usize).max(1);
    if nh > cfg.canvas || nw > cfg.canvas {
        return Err(Error::SubjectTooLarge(format!(
            "{w}x{h} at scale {s:.3} -> {nw}x{nh} exceeds canvas {0}x{0}",
            cfg.canvas
        )));
    }
    let scaled = resize_nearest(subject, nh, nw);
    let mut canvas = crate::imageio::solid(cfg.canvas, cfg.canvas, [0.5, 0.5, 0.5]);
    let oy = (cfg.canvas - nh) / 2;
    let ox = (cfg.canvas - nw) / 2;
    for c in 0..3 {
        for y in 0..nh {
            for x in 0..nw {
                canvas[[c, oy + y, ox + x]] = scaled[[c, y, x]];
            }
        }
    }
    Ok(canvas)
}

/// Center-paste without scale jitter, for inference-time visual encoding.
pub fn center_on_canvas(subject: &Image, canvas: usize) -> Result<Image> {
    let cfg = SubjectAugmentConfig::new(canvas, (1.0, 1.0))?;
    let mut rng = derive_rng(0, Stream::Augment, &[]);
    augment_subject(subject, &cfg, &mut rng)
}
