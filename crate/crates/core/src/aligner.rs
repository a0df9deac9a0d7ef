//! Learned alignment from the oversampled projected feature grid to the
//! diffusion token grid: per-frame strided convolutions with residual blocks,
//! then causal temporal convolutions down to the latent timeline.

use candle_core::{Tensor, D};
use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, GroupNorm, Linear};
use crate::vfm::check_scale;

pub const NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignerConfig {
    pub scale: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub temporal_ratio: usize,
    pub temporal_kernel: usize,
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.temporal_ratio == 0 {
            return Err(Error::config("aligner.temporal_ratio must be >= 1"));
        }
        if self.temporal_kernel < self.temporal_ratio {
            return Err(Error::config(format!(
                "aligner.temporal_kernel ({}) must be >= temporal_ratio ({})",
                self.temporal_kernel, self.temporal_ratio
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("aligner channel counts must be positive"));
        }
        if self.hidden == 0 || self.hidden % NORM_GROUPS != 0 {
            return Err(Error::config(format!(
                "aligner.hidden ({}) must be a positive multiple of {NORM_GROUPS}",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Number of spatial stages: `log2(S)`, or one stride-1 stage at `S = 1`.
    pub fn num_stages(&self) -> usize {
        match self.scale {
            1 => 1,
            s => s.trailing_zeros() as usize,
        }
    }

    pub fn latent_frames(&self, t: usize) -> Result<usize> {
        latent_frames(t, self.temporal_ratio)
    }
}

/// `1 + (T - 1) / r`, requiring `T = 1 (mod r)`.
pub fn latent_frames(t: usize, ratio: usize) -> Result<usize> {
    if t == 0 || (t - 1) % ratio != 0 {
        let down = if t == 0 { 1 } else { t - (t - 1) % ratio };
        return Err(Error::config(format!(
            "T = {t}: T = 1 (mod {ratio}) required; crop to {down} or pad to {} frames",
            down + ratio
        )));
    }
    Ok(1 + (t - 1) / ratio)
}

/// Input frame interval `[first, last]` that can influence condition-latent
/// index `tau`. Two causal layers: stride 1, then stride `r_t`, both with
/// kernel `k_t` and `k_t - 1` frames of left zero padding.
pub fn causal_receptive_field(cfg: &AlignerConfig, tau: usize) -> (usize, usize) {
    let k = cfg.temporal_kernel;
    let last = tau * cfg.temporal_ratio;
    let first = last.saturating_sub(2 * (k - 1));
    (first, last)
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut b.sub("conv1"), c, c, 3, 1)?,
            norm: GroupNorm::new(&mut b.sub("norm"), NORM_GROUPS, c)?,
            conv2: Conv2d::zeros(&mut b.sub("conv2"), c, c, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.conv1.forward(x)?)?.silu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

/// Causal convolution along the leading (time) axis of `[T, h, w, C]`.
#[derive(Debug, Clone)]
pub struct CausalConv {
    /// `[kernel, C_in, C_out]`; tap `kernel - 1` sees the current frame.
    pub w: candle_core::Var,
    pub b: candle_core::Var,
    pub stride: usize,
}

impl CausalConv {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            w: b.normal("w", &[kernel, c_in, c_out], 1.0 / ((kernel * c_in) as f64).sqrt())?,
            b: b.zeros("b", &[c_out])?,
            stride,
        })
    }

    pub fn kernel(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(0)?;
        let k = self.kernel();
        let t_out = latent_frames(t, self.stride)?;
        let padded = x.pad_with_zeros(0, k - 1, 0)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..k {
            let idx: Vec<u32> = (0..t_out).map(|tau| (tau * self.stride + j) as u32).collect();
            let idx = Tensor::from_vec(idx, t_out, x.device())?;
            let tap = padded.index_select(&idx, 0)?;
            let y = tap.broadcast_matmul(&self.w.as_tensor().get(j)?)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        Ok(acc.expect("kernel >= 1").broadcast_add(self.b.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Aligner {
    pub cfg: AlignerConfig,
    stages: Vec<(Conv2d, ResBlock)>,
    pub temporal_res: CausalConv,
    pub temporal_down: CausalConv,
    pub proj: Linear,
}

impl Aligner {
    pub fn new(b: &mut Builder, cfg: AlignerConfig) -> Result<Self> {
        cfg.validate()?;
        let stride = if cfg.scale == 1 { 1 } else { 2 };
        let mut stages = Vec::new();
        let mut c_in = cfg.in_channels;
        for i in 0..cfg.num_stages() {
            let mut sb = b.sub(format!("stage{i}"));
            let conv = Conv2d::new(&mut sb.sub("down"), c_in, cfg.hidden, 3, stride)?;
            let res = ResBlock::new(&mut sb.sub("res"), cfg.hidden)?;
            stages.push((conv, res));
            c_in = cfg.hidden;
        }
        let k = cfg.temporal_kernel;
        Ok(Self {
            temporal_res: CausalConv::new(&mut b.sub("temporal_res"), cfg.hidden, cfg.hidden, k, 1)?,
            temporal_down: CausalConv::new(
                &mut b.sub("temporal_down"),
                cfg.hidden,
                cfg.hidden,
                k,
                cfg.temporal_ratio,
            )?,
            proj: Linear::zeros(&mut b.sub("proj"), cfg.hidden, cfg.out_channels, true)?,
            stages,
            cfg,
        })
    }

    /// `[T, H*S/16, W*S/16, k_m]` to `[T, H/16, W/16, hidden]`, frame by frame.
    pub fn spatial_align(&self, proj: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = proj.dims4()?;
        let s = self.cfg.scale;
        if c != self.cfg.in_channels {
            return Err(Error::data(format!(
                "aligner expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::data(format!(
                "projected grid {h}x{w} is not divisible by the scale factor {s}"
            )));
        }
        let mut x = proj.permute((0, 3, 1, 2))?.contiguous()?;
        for (conv, res) in &self.stages {
            x = res.forward(&conv.forward(&x)?)?;
        }
        Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
    }

    /// `[T, h, w, hidden]` to the condition latent `[1 + (T-1)/r_t, h, w, D]`.
    pub fn temporal_aggregate(&self, grid: &Tensor) -> Result<Tensor> {
        let t = grid.dim(0)?;
        self.cfg.latent_frames(t)?;
        let x = (grid + self.temporal_res.forward(&grid.silu()?)?)?;
        let x = self.temporal_down.forward(&x)?;
        self.proj.forward(&x.silu()?)
    }

    pub fn forward(&self, proj: &Tensor) -> Result<Tensor> {
        self.temporal_aggregate(&self.spatial_align(proj)?)
    }

    /// Shape law without running the network.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        aligned_shape(&self.cfg, input).map(|(_, cond)| cond)
    }
}

/// `(spatially aligned, condition latent)` shapes for a projected grid shape.
pub fn aligned_shape(cfg: &AlignerConfig, input: [usize; 4]) -> Result<([usize; 4], [usize; 4])> {
    let [t, h, w, _] = input;
    let s = cfg.scale;
    if h % s != 0 || w % s != 0 {
        return Err(Error::config(format!(
            "projected grid {h}x{w} is not divisible by the scale factor {s}"
        )));
    }
    let aligned = [t, h / s, w / s, cfg.hidden];
    let cond = [cfg.latent_frames(t)?, h / s, w / s, cfg.out_channels];
    Ok((aligned, cond))
}

pub fn array_to_tensor(a: &Array4<f32>, dtype: candle_core::DType) -> Result<Tensor> {
    let (t, h, w, c) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (t, h, w, c), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array4<f32>> {
    let (a, b, c, d) = t.dims4()?;
    let v = t
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Array4::from_shape_vec((a, b, c, d), v).map_err(|e| Error::data(e.to_string()))
}

/// Largest absolute entry, as `f64`.
pub fn max_abs(t: &Tensor) -> Result<f64> {
    crate::nn::scalar(&t.abs()?.flatten_all()?.max_keepdim(D::Minus1)?.squeeze(0)?)
}
