//! Dense per-frame feature extraction behind a pluggable encoder interface.
//!
//! A real vision-foundation backend plugs in by implementing [`VfmBackend`]:
//! it must map one `[H, W, 3]` frame to a `[H/16, W/16, C]` grid and must not
//! look at other frames. The crate ships [`ToyVfm`], a fixed-seed random
//! linear patch encoder, so nothing here depends on pretrained weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::video::{FeatureGrid, VideoClip};

pub const PATCH: usize = 16;
pub const SUPPORTED_SCALES: [usize; 3] = [1, 2, 4];

pub fn check_scale(scale: usize) -> Result<()> {
    if SUPPORTED_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "upscale factor S = {scale} unsupported (expected one of 1, 2, 4)"
        )))
    }
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f32) -> f32 {
    const A: f32 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate. Pixel centres are
/// aligned (`src = (dst + 0.5) / S - 0.5`) and borders are clamped.
fn taps(dst: usize, scale: usize, len: usize) -> [(usize, f32); 4] {
    let src = (dst as f32 + 0.5) / scale as f32 - 0.5;
    let base = src.floor();
    let frac = src - base;
    let mut out = [(0usize, 0f32); 4];
    for (i, slot) in out.iter_mut().enumerate() {
        let offset = i as f32 - 1.0;
        let idx = (base + offset).clamp(0.0, (len - 1) as f32) as usize;
        *slot = (idx, cubic(offset - frac));
    }
    out
}

/// Bicubic input-space upscaling by `scale`, clamped to `[0, 1]`.
pub fn upscale_video(clip: &VideoClip, scale: usize) -> Result<VideoClip> {
    check_scale(scale)?;
    if scale == 1 {
        return Ok(clip.clone());
    }
    let (t, h, w) = clip.dims();
    let (oh, ow) = (h * scale, w * scale);
    let xs: Vec<_> = (0..ow).map(|x| taps(x, scale, w)).collect();
    let ys: Vec<_> = (0..oh).map(|y| taps(y, scale, h)).collect();
    let mut out = Array4::<f32>::zeros((t, oh, ow, 3));
    let mut rows = Array3::<f32>::zeros((h, ow, 3));
    for f in 0..t {
        let frame = clip.frame(f);
        // horizontal pass
        for y in 0..h {
            for (x, tx) in xs.iter().enumerate() {
                for c in 0..3 {
                    rows[[y, x, c]] = tx.iter().map(|&(i, wt)| wt * frame[[y, i, c]]).sum();
                }
            }
        }
        // vertical pass
        for (y, ty) in ys.iter().enumerate() {
            for x in 0..ow {
                for c in 0..3 {
                    let v: f32 = ty.iter().map(|&(i, wt)| wt * rows[[i, x, c]]).sum();
                    out[[f, y, x, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoClip::new(out, clip.fps)
}

/// Frame-wise dense encoder with a 16-pixel patch grid.
pub trait VfmBackend {
    fn channels(&self) -> usize;

    /// Encodes one `[H, W, 3]` frame into `[H/16, W/16, C]`.
    fn encode_frame(&self, frame: ArrayView3<f32>) -> Array3<f32>;

    fn encode(&self, clip: &VideoClip) -> Result<Array4<f32>> {
        clip.require_divisible(PATCH)?;
        let (t, h, w) = clip.dims();
        let c = self.channels();
        let mut out = Array4::zeros((t, h / PATCH, w / PATCH, c));
        for f in 0..t {
            let grid = self.encode_frame(clip.frame(f));
            if grid.dim() != (h / PATCH, w / PATCH, c) {
                return Err(Error::data(format!(
                    "backend returned {:?}, expected [{}, {}, {c}]",
                    grid.dim(),
                    h / PATCH,
                    w / PATCH
                )));
            }
            out.index_axis_mut(Axis(0), f).assign(&grid);
        }
        Ok(out)
    }
}

/// Per-patch input: flattened RGB, patch mean, mean absolute x/y gradients.
pub const TOY_INPUT_DIM: usize = PATCH * PATCH * 3 + 3 + 6;

/// Deterministic stand-in encoder: a fixed-seed random linear map of patch
/// descriptors. Each output channel's weight row is normalised to unit
/// length, so channels share a common scale independent of the input.
#[derive(Debug, Clone)]
pub struct ToyVfm {
    /// `[TOY_INPUT_DIM, C]`, columns unit-norm.
    weights: Vec<f32>,
    bias: Vec<f32>,
    channels: usize,
}

impl ToyVfm {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0f32; TOY_INPUT_DIM * channels];
        for v in weights.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for c in 0..channels {
            let norm = (0..TOY_INPUT_DIM)
                .map(|i| weights[i * channels + c].powi(2))
                .sum::<f32>()
                .sqrt();
            for i in 0..TOY_INPUT_DIM {
                weights[i * channels + c] /= norm;
            }
        }
        let bias = (0..channels)
            .map(|_| 0.1 * Distribution::<f32>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f32>>();
        Self {
            weights,
            bias,
            channels,
        }
    }

    fn descriptor(frame: &ArrayView3<f32>, py: usize, px: usize, out: &mut [f32]) {
        let (y0, x0) = (py * PATCH, px * PATCH);
        let mut k = 0;
        let mut mean = [0f32; 3];
        let mut gx = [0f32; 3];
        let mut gy = [0f32; 3];
        for y in 0..PATCH {
            for x in 0..PATCH {
                for c in 0..3 {
                    let v = frame[[y0 + y, x0 + x, c]];
                    out[k] = v;
                    k += 1;
                    mean[c] += v;
                    if x + 1 < PATCH {
                        gx[c] += (frame[[y0 + y, x0 + x + 1, c]] - v).abs();
                    }
                    if y + 1 < PATCH {
                        gy[c] += (frame[[y0 + y + 1, x0 + x, c]] - v).abs();
                    }
                }
            }
        }
        let n = (PATCH * PATCH) as f32;
        let ng = (PATCH * (PATCH - 1)) as f32;
        for c in 0..3 {
            out[k + c] = mean[c] / n;
            out[k + 3 + c] = gx[c] / ng;
            out[k + 6 + c] = gy[c] / ng;
        }
    }
}

impl VfmBackend for ToyVfm {
    fn channels(&self) -> usize {
        self.channels
    }

    fn encode_frame(&self, frame: ArrayView3<f32>) -> Array3<f32> {
        let (h, w, _) = frame.dim();
        let (gh, gw) = (h / PATCH, w / PATCH);
        let c = self.channels;
        let mut out = Array3::zeros((gh, gw, c));
        let mut desc = vec![0f32; TOY_INPUT_DIM];
        for py in 0..gh {
            for px in 0..gw {
                Self::descriptor(&frame, py, px, &mut desc);
                for ch in 0..c {
                    let mut acc = self.bias[ch];
                    for (i, d) in desc.iter().enumerate() {
                        acc += d * self.weights[i * c + ch];
                    }
                    out[[py, px, ch]] = acc;
                }
            }
        }
        out
    }
}

/// Upscales by `scale` and encodes every frame independently.
pub fn extract_features(
    clip: &VideoClip,
    backend: &dyn VfmBackend,
    scale: usize,
    expected_channels: usize,
) -> Result<FeatureGrid> {
    if backend.channels() != expected_channels {
        return Err(Error::config(format!(
            "backend produces {} channels but the pipeline is configured for C = {expected_channels}",
            backend.channels()
        )));
    }
    let up = upscale_video(clip, scale)?;
    up.require_divisible(PATCH)?;
    Ok(FeatureGrid {
        data: backend.encode(&up)?,
        patch: PATCH,
        scale,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"VFMF";
const CACHE_VERSION: u32 = 1;

/// Feature cache: `VFMF`, version u32, T, h, w, C as u32, then row-major
/// float32 payload. All little-endian.
pub fn write_feature_cache(path: &Path, grid: &FeatureGrid) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(CACHE_MAGIC);
    header.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for d in grid.shape() {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for v in grid.data.iter() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path, scale: usize) -> Result<FeatureGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format(path, "not a feature cache (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != CACHE_VERSION {
        return Err(Error::format(path, format!("unsupported cache version {}", word(0))));
    }
    let dims = [word(1), word(2), word(3), word(4)].map(|d| d as usize);
    let n: usize = dims.iter().product();
    if bytes.len() != 24 + 4 * n {
        return Err(Error::format(path, "truncated feature cache"));
    }
    let data: Vec<f32> = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureGrid {
        data: Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
            .map_err(|e| Error::format(path, e.to_string()))?,
        patch: PATCH,
        scale,
    })
}
