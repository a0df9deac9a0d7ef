//! Frame stacks and dense feature grids shared by every stage.

use ndarray::{s, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Real-valued frame stack `[T, H, W, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f32>,
    pub fps: f32,
}

impl VideoClip {
    /// Wraps a frame stack, checking the channel count and that every value is
    /// finite. Spatial divisibility is checked by the stages that need it.
    pub fn new(frames: Array4<f32>, fps: f32) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if c != 3 {
            return Err(Error::data(format!("expected 3 colour channels, got {c}")));
        }
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::data(format!("empty clip [{t},{h},{w},3]")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("clip contains non-finite values"));
        }
        Ok(Self { frames, fps })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Self {
            frames: Array4::zeros((t, h, w, 3)),
            fps: 10.0,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    /// `[T, H, W]`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.frames.dim();
        (t, h, w)
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }

    /// Contiguous frame window `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        let t = self.num_frames();
        if start + len > t || len == 0 {
            return Err(Error::data(format!(
                "frame window [{start}, {}) outside clip of length {t}",
                start + len
            )));
        }
        Ok(Self {
            frames: self.frames.slice(s![start..start + len, .., .., ..]).to_owned(),
            fps: self.fps,
        })
    }

    pub fn clamp01(mut self) -> Self {
        self.frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn require_divisible(&self, by: usize) -> Result<()> {
        let (_, h, w) = self.dims();
        if h % by != 0 || w % by != 0 {
            return Err(Error::config(format!(
                "frame size {h}x{w} must be divisible by {by}"
            )));
        }
        Ok(())
    }

    pub fn mse(&self, other: &VideoClip) -> Result<f64> {
        if self.frames.dim() != other.frames.dim() {
            return Err(Error::data(format!(
                "shape mismatch {:?} vs {:?}",
                self.frames.dim(),
                other.frames.dim()
            )));
        }
        let n = self.frames.len() as f64;
        Ok(self
            .frames
            .iter()
            .zip(other.frames.iter())
            .map(|(a, b)| {
                let d = f64::from(a - b);
                d * d
            })
            .sum::<f64>()
            / n)
    }
}

/// Dense per-frame features `[T, h, w, C]` on a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub data: Array4<f32>,
    /// Patch size in (upscaled) pixels.
    pub patch: usize,
    /// Input-space upscaling applied before encoding.
    pub scale: usize,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn shape(&self) -> [usize; 4] {
        let (t, h, w, c) = self.data.dim();
        [t, h, w, c]
    }
}
