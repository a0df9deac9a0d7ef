//! Sim-to-real translation with a fixed number of active components, chunked
//! long-video generation, and a weight-free shape report.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use ndarray::{s, Array4, Axis};

use crate::aligner::{aligned_shape, array_to_tensor, latent_frames, tensor_to_array, AlignerConfig};
use crate::dit::{decode_latent, euler_sample, frame_slot, latent_shape, LATENT_DIM, TEMPORAL_GROUP};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pca::{apply_mask, ChannelMask, PcaBasis, ProjectedGrid};
use crate::train::{condition_features, latent_noise};
use crate::vfm::{check_scale, VfmBackend, PATCH};
use crate::video::VideoClip;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_STEPS: usize = 20;

/// Everything inference needs besides the input clip.
pub struct Translator<'a> {
    pub model: &'a Model,
    pub backend: &'a dyn VfmBackend,
    pub basis: &'a PcaBasis,
    pub whiten: bool,
}

/// Known first latent frame of a chunk, imposed while sampling.
struct Anchor {
    values: Tensor,
    noise: Tensor,
}

impl Translator<'_> {
    fn scale(&self) -> usize {
        self.model.cfg.aligner.scale
    }

    /// Projected (and optionally whitened) features of a clip, unmasked.
    pub fn features(&self, sim: &VideoClip) -> Result<ProjectedGrid> {
        condition_features(sim, self.backend, self.scale(), self.basis, self.whiten)
    }

    pub fn mask(&self, k: usize) -> Result<ChannelMask> {
        ChannelMask::new(k, self.basis.k_max())
    }

    /// Condition latent for a chunk of features under mask `k`.
    pub fn condition(&self, features: &ProjectedGrid, mask: &ChannelMask) -> Result<Tensor> {
        let masked = apply_mask(features, mask)?;
        self.model
            .condition(&array_to_tensor(&masked.data, self.model.dtype())?)
    }

    fn generate(&self, cond: &Tensor, dims: [usize; 4], steps: usize, seed: u64, anchor: Option<Anchor>) -> Result<Array4<f32>> {
        let dtype = self.model.dtype();
        let eps = latent_noise(seed, &dims, dtype)?;
        let constrain = |z: Tensor, t: f64| -> Result<Tensor> {
            match &anchor {
                None => Ok(z),
                Some(a) => {
                    let known = ((&a.values * (1.0 - t))? + (&a.noise * t)?)?;
                    let rest = z.narrow(0, 1, dims[0] - 1)?;
                    Ok(Tensor::cat(&[&known.unsqueeze(0)?, &rest], 0)?)
                }
            }
        };
        let z = euler_sample(
            &eps,
            steps,
            |z, t| Ok(self.model.predict(z, t, Some(cond))?.detach()),
            |z, t| constrain(z, t),
        )?;
        tensor_to_array(&z)
    }

    /// Translates a clip of `T = 1 (mod 4)` frames with `k` active components.
    pub fn translate(&self, sim: &VideoClip, k: usize, steps: usize, seed: u64) -> Result<VideoClip> {
        let mask = self.mask(k)?;
        self.translate_with_mask(sim, &mask, steps, seed)
    }

    pub fn translate_with_mask(&self, sim: &VideoClip, mask: &ChannelMask, steps: usize, seed: u64) -> Result<VideoClip> {
        let (t, h, w) = sim.dims();
        let dims = latent_shape(t, h, w)?;
        let feats = self.features(sim)?;
        let cond = self.condition(&feats, mask)?;
        let z = self.generate(&cond, dims, steps, seed, None)?;
        Ok(decode_latent(&z, sim.fps)?.clamp01())
    }

    /// Chunked generation with one frame of overlap: chunk `i` covers frames
    /// `[i (chunk_T - 1), i (chunk_T - 1) + chunk_T)`, and its first frame is
    /// the previous chunk's last generated frame. Inputs that do not tile
    /// exactly are padded by repeating the last frame; the output is cut back
    /// to the input length.
    pub fn translate_long(&self, sim: &VideoClip, chunk_t: usize, k: usize, steps: usize, seed: u64) -> Result<VideoClip> {
        let plan = chunk_plan(sim.num_frames(), chunk_t)?;
        let mask = self.mask(k)?;
        let padded = pad_to(sim, plan.padded_len)?;
        if plan.chunks.len() == 1 {
            let out = self.translate_with_mask(&padded, &mask, steps, seed)?;
            return out.slice_frames(0, sim.num_frames());
        }
        let feats = self.features(&padded)?;
        let (_, h, w) = sim.dims();
        let mut frames: Vec<Array4<f32>> = Vec::new();
        let mut prev_last: Option<ndarray::Array3<f32>> = None;
        for (i, &(start, len)) in plan.chunks.iter().enumerate() {
            let chunk_feats = ProjectedGrid {
                data: feats.data.slice(s![start..start + len, .., .., ..]).to_owned(),
            };
            let cond = self.condition(&chunk_feats, &mask)?;
            let dims = latent_shape(len, h, w)?;
            let chunk_seed = seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let anchor = match &prev_last {
                None => None,
                Some(frame) => Some(first_frame_anchor(frame, dims, chunk_seed, self.model.dtype())?),
            };
            let z = self.generate(&cond, dims, steps, chunk_seed, anchor)?;
            let clip = decode_latent(&z, sim.fps)?.clamp01();
            let skip = usize::from(i > 0);
            frames.push(clip.frames.slice(s![skip.., .., .., ..]).to_owned());
            prev_last = Some(latent_frame_pixels(&z, len - 1));
        }
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::data(e.to_string()))?;
        VideoClip::new(all, sim.fps)?.slice_frames(0, sim.num_frames())
    }
}

/// Raw (unclamped) pixels of frame `f` stored in a latent grid.
fn latent_frame_pixels(z: &Array4<f32>, f: usize) -> ndarray::Array3<f32> {
    let (_, gh, gw, _) = z.dim();
    let (g, slot) = frame_slot(f);
    let mut out = ndarray::Array3::zeros((gh * PATCH, gw * PATCH, 3));
    for ((y, x, c), v) in out.indexed_iter_mut() {
        *v = z[[g, y / PATCH, x / PATCH, ((slot * PATCH + y % PATCH) * PATCH + x % PATCH) * 3 + c]];
    }
    out
}

/// Latent frame 0 holding `frame` in slot 0 and zeros elsewhere, plus the
/// matching slice of the chunk's initial noise.
fn first_frame_anchor(frame: &ndarray::Array3<f32>, dims: [usize; 4], seed: u64, dtype: DType) -> Result<Anchor> {
    let single = VideoClip {
        frames: frame.clone().insert_axis(Axis(0)),
        fps: 1.0,
    };
    let z = crate::dit::encode_latent(&single)?;
    let values = array_to_tensor(&z, dtype)?.squeeze(0)?;
    let noise = latent_noise(seed, &dims, dtype)?.get(0)?;
    Ok(Anchor { values, noise })
}

fn pad_to(clip: &VideoClip, len: usize) -> Result<VideoClip> {
    let t = clip.num_frames();
    if len <= t {
        return clip.slice_frames(0, len);
    }
    let last = clip.frames.slice(s![t - 1..t, .., .., ..]).to_owned();
    let mut views = vec![clip.frames.view()];
    for _ in t..len {
        views.push(last.view());
    }
    let frames = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::data(e.to_string()))?;
    VideoClip::new(frames, clip.fps)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    /// `(start, len)` of each chunk in (padded) input frames.
    pub chunks: Vec<(usize, usize)>,
    pub padded_len: usize,
}

impl ChunkPlan {
    /// Frames each chunk contributes to the output: all of chunk 0, and all
    /// but the carried-over first frame of later chunks.
    pub fn new_frames(&self) -> Vec<std::ops::Range<usize>> {
        self.chunks
            .iter()
            .enumerate()
            .map(|(i, &(s, l))| if i == 0 { s..s + l } else { s + 1..s + l })
            .collect()
    }
}

pub fn chunk_plan(len: usize, chunk_t: usize) -> Result<ChunkPlan> {
    if len == 0 {
        return Err(Error::data("cannot translate an empty clip"));
    }
    if chunk_t < 2 || (chunk_t - 1) % TEMPORAL_GROUP != 0 {
        return Err(Error::config(format!(
            "chunk length {chunk_t}: chunk_T = 1 (mod {TEMPORAL_GROUP}) and >= {} required",
            TEMPORAL_GROUP + 1
        )));
    }
    if len <= chunk_t {
        let padded_len = 1 + (len - 1).div_ceil(TEMPORAL_GROUP) * TEMPORAL_GROUP;
        return Ok(ChunkPlan {
            chunks: vec![(0, padded_len)],
            padded_len,
        });
    }
    let stride = chunk_t - 1;
    let n = (len - 1).div_ceil(stride);
    Ok(ChunkPlan {
        chunks: (0..n).map(|i| (i * stride, chunk_t)).collect(),
        padded_len: n * stride + 1,
    })
}

/// Sizes needed to derive every intermediate shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k_max: usize,
    pub aligner: AlignerConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeReport {
    pub video: [usize; 4],
    pub upscaled: [usize; 4],
    pub features: [usize; 4],
    pub projected: [usize; 4],
    pub aligned: [usize; 4],
    pub condition: [usize; 4],
    pub latent: [usize; 4],
}

fn fmt_shape(s: &[usize; 4]) -> String {
    format!("[{},{},{},{}]", s[0], s[1], s[2], s[3])
}

impl ShapeReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, s) in [
            ("video", &self.video),
            ("upscaled", &self.upscaled),
            ("features", &self.features),
            ("projected", &self.projected),
            ("aligned", &self.aligned),
            ("condition", &self.condition),
            ("latent", &self.latent),
        ] {
            let _ = writeln!(out, "{name}\t{}", fmt_shape(s));
        }
        out
    }
}

/// Every intermediate shape, computed without weights.
pub fn dry_run_shapes(d: &PipelineDims) -> Result<ShapeReport> {
    let a = &d.aligner;
    check_scale(a.scale)?;
    if d.height % PATCH != 0 || d.width % PATCH != 0 {
        return Err(Error::config(format!(
            "H = {}, W = {}: both must be divisible by {PATCH}",
            d.height, d.width
        )));
    }
    if a.in_channels != d.k_max {
        return Err(Error::config(format!(
            "aligner input channels ({}) must equal k_m ({})",
            a.in_channels, d.k_max
        )));
    }
    if d.k_max == 0 || d.k_max > d.channels {
        return Err(Error::config(format!("k_m = {} must be in [1, C = {}]", d.k_max, d.channels)));
    }
    latent_frames(d.frames, a.temporal_ratio)?;
    if a.temporal_ratio != TEMPORAL_GROUP {
        return Err(Error::config(format!(
            "aligner.temporal_ratio ({}) must equal the latent grouping ({TEMPORAL_GROUP})",
            a.temporal_ratio
        )));
    }
    let (t, h, w, s) = (d.frames, d.height, d.width, a.scale);
    let features = [t, h * s / PATCH, w * s / PATCH, d.channels];
    let projected = [t, features[1], features[2], d.k_max];
    let (aligned, condition) = aligned_shape(a, projected)?;
    let latent = latent_shape(t, h, w)?;
    debug_assert_eq!(latent[3], LATENT_DIM);
    Ok(ShapeReport {
        video: [t, h, w, 3],
        upscaled: [t, h * s, w * s, 3],
        features,
        projected,
        aligned,
        condition,
        latent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aligner(scale: usize) -> AlignerConfig {
        AlignerConfig {
            scale,
            in_channels: 32,
            hidden: 32,
            out_channels: 64,
            temporal_ratio: 4,
            temporal_kernel: 5,
        }
    }

    #[test]
    fn plan_for_277_frames() {
        let p = chunk_plan(277, 93).unwrap();
        assert_eq!(p.chunks, vec![(0, 93), (92, 93), (184, 93)]);
        assert_eq!(p.padded_len, 277);
        let mut hits = vec![0; 277];
        for r in p.new_frames() {
            for f in r {
                hits[f] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn plan_single_and_padded() {
        assert_eq!(chunk_plan(93, 93).unwrap().chunks, vec![(0, 93)]);
        assert_eq!(chunk_plan(20, 93).unwrap().padded_len, 21);
        let p = chunk_plan(100, 93).unwrap();
        assert_eq!(p.padded_len, 185);
        assert!(chunk_plan(100, 92).is_err());
    }

    #[test]
    fn shapes_desk_scale() {
        let r = dry_run_shapes(&PipelineDims {
            frames: 17,
            height: 64,
            width: 64,
            channels: 64,
            k_max: 32,
            aligner: AlignerConfig { scale: 1, ..aligner(1) },
        })
        .unwrap();
        assert_eq!(r.features, [17, 4, 4, 64]);
        assert_eq!(r.condition, [5, 4, 4, 64]);
    }

    #[test]
    fn invalid_frame_count_reported() {
        let err = dry_run_shapes(&PipelineDims {
            frames: 92,
            height: 64,
            width: 64,
            channels: 64,
            k_max: 32,
            aligner: aligner(4),
        })
        .unwrap_err();
        assert!(err.to_string().contains("T = 1 (mod 4) required"), "{err}");
    }
}
