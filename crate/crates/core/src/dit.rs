//! Toy latent video diffusion transformer.
//!
//! The latent transform is an exact pixel shuffle: frame 0 forms its own
//! latent frame, every following group of four frames forms one more, and
//! each 16x16 patch of a group is stacked on the channel axis
//! (`D_z = 4 * 16 * 16 * 3`). The transformer runs factorised spatial and
//! temporal attention over the `[T_lat, H/16, W/16]` token grid and is trained
//! as a rectified flow: `z_t = (1 - t) z0 + t eps`, target `eps - z0`.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{normalize_last, sinusoidal, Attention, Builder, Linear, Mlp};
use crate::vfm::PATCH;
use crate::video::VideoClip;

/// Pixel frames per latent frame after the first.
pub const TEMPORAL_GROUP: usize = 4;
pub const LATENT_DIM: usize = TEMPORAL_GROUP * PATCH * PATCH * 3;

fn slot_index(slot: usize, dy: usize, dx: usize, c: usize) -> usize {
    ((slot * PATCH + dy) * PATCH + dx) * 3 + c
}

/// Latent grid shape `[T_lat, H/16, W/16, D_z]` for a pixel clip shape.
pub fn latent_shape(t: usize, h: usize, w: usize) -> Result<[usize; 4]> {
    if h % PATCH != 0 || w % PATCH != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!("{h}x{w} frames must be multiples of {PATCH}")));
    }
    let t_lat = crate::aligner::latent_frames(t, TEMPORAL_GROUP)?;
    Ok([t_lat, h / PATCH, w / PATCH, LATENT_DIM])
}

/// Pixel frame `f` lives in latent frame `group`, slot `slot`.
pub fn frame_slot(f: usize) -> (usize, usize) {
    if f == 0 {
        (0, 0)
    } else {
        (1 + (f - 1) / TEMPORAL_GROUP, (f - 1) % TEMPORAL_GROUP)
    }
}

pub fn encode_latent(clip: &VideoClip) -> Result<Array4<f32>> {
    let (t, h, w) = clip.dims();
    let [tl, gh, gw, dz] = latent_shape(t, h, w)?;
    let mut z = Array4::<f32>::zeros((tl, gh, gw, dz));
    for f in 0..t {
        let (g, slot) = frame_slot(f);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    z[[g, y / PATCH, x / PATCH, slot_index(slot, y % PATCH, x % PATCH, c)]] =
                        clip.frames[[f, y, x, c]];
                }
            }
        }
    }
    Ok(z)
}

/// Exact inverse of [`encode_latent`]; unused slots of latent frame 0 are
/// ignored. Values are not clamped.
pub fn decode_latent(z: &Array4<f32>, fps: f32) -> Result<VideoClip> {
    let (tl, gh, gw, dz) = z.dim();
    if dz != LATENT_DIM || tl == 0 {
        return Err(Error::data(format!(
            "latent has {dz} channels and {tl} frames; expected {LATENT_DIM} channels"
        )));
    }
    let t = 1 + (tl - 1) * TEMPORAL_GROUP;
    let (h, w) = (gh * PATCH, gw * PATCH);
    let mut frames = Array4::<f32>::zeros((t, h, w, 3));
    for f in 0..t {
        let (g, slot) = frame_slot(f);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    frames[[f, y, x, c]] =
                        z[[g, y / PATCH, x / PATCH, slot_index(slot, y % PATCH, x % PATCH, c)]];
                }
            }
        }
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("decoded latent contains non-finite values"));
    }
    Ok(VideoClip { frames, fps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden size of the output head.
    pub head_hidden: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 512,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return Err(Error::config("dit sizes must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "dit.width ({}) must be divisible by dit.heads ({})",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::config("dit.width must be even"));
        }
        Ok(())
    }
}

/// One transformer block: spatial attention within each latent frame,
/// temporal attention across frames at each location, then an MLP, each
/// with adaptive shift/scale/gate from the conditioning vector.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub modulation: Linear,
    pub spatial: Attention,
    pub temporal: Attention,
    pub mlp: Mlp,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(normalize_last(x)?
        .broadcast_mul(&(scale + 1.0)?)?
        .broadcast_add(shift)?)
}

impl DitBlock {
    pub fn new(b: &mut Builder, cfg: &DitConfig) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            modulation: Linear::zeros(&mut b.sub("modulation"), w, 9 * w, true)?,
            spatial: Attention::new(&mut b.sub("spatial"), w, cfg.heads)?,
            temporal: Attention::new(&mut b.sub("temporal"), w, cfg.heads)?,
            mlp: Mlp::new(&mut b.sub("mlp"), w, cfg.mlp_ratio * w)?,
        })
    }

    /// `x`: `[T_lat, n, W]` tokens, `c`: `[1, W]` conditioning vector.
    pub fn forward(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let m = self.modulation.forward(&c.silu()?)?.chunk(9, 1)?;
        let h = modulate(x, &m[0], &m[1])?;
        let x = (x + self.spatial.forward(&h)?.broadcast_mul(&m[2])?)?;
        let h = modulate(&x, &m[3], &m[4])?.transpose(0, 1)?.contiguous()?;
        let a = self.temporal.forward(&h)?.transpose(0, 1)?;
        let x = (x + a.broadcast_mul(&m[5])?)?;
        let h = modulate(&x, &m[6], &m[7])?;
        Ok((&x + self.mlp.forward(&h)?.broadcast_mul(&m[8])?)?)
    }
}

/// Smallest `t` the output head divides by.
pub const T_FLOOR: f64 = 0.05;

/// Final adaptive norm and output layer.
///
/// `v = (head(h) + gate(h) * z_t) / max(t, T_FLOOR)` with a one-hidden-layer
/// `head`. Per-pixel noise in a `LATENT_DIM` token goes through the gated
/// skip; with the gate at 1 the velocity is `(z_t - x) / t` for
/// `x = -head(h)`, and the last Euler step lands exactly on `x`. The gate
/// bias starts at 1.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub modulation: Linear,
    pub hidden: Linear,
    pub head: Linear,
    pub gate: Linear,
}

impl OutputHead {
    pub fn new(b: &mut Builder, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            modulation: Linear::zeros(&mut b.sub("modulation"), width, 2 * width, true)?,
            hidden: Linear::new(&mut b.sub("hidden"), width, hidden, true, 1.0)?,
            head: Linear::zeros(&mut b.sub("head"), hidden, LATENT_DIM, true)?,
            gate: Linear {
                w: b.zeros("gate.w", &[width, 1])?,
                b: Some(b.constant("gate.b", &[1], 1.0)?),
            },
        })
    }

    pub fn forward(&self, x: &Tensor, c: &Tensor, z_t: &Tensor, t: f64) -> Result<Tensor> {
        let m = self.modulation.forward(&c.silu()?)?.chunk(2, 1)?;
        let h = modulate(x, &m[0], &m[1])?;
        let v = self.head.forward(&self.hidden.forward(&h)?.silu()?)?;
        let g = self.gate.forward(&h)?;
        Ok(((v + g.broadcast_mul(z_t)?)? / t.max(T_FLOOR))?)
    }
}

#[derive(Debug, Clone)]
pub struct Dit {
    pub cfg: DitConfig,
    pub patch_in: Linear,
    pub time1: Linear,
    pub time2: Linear,
    pub null_text: Var,
    pub blocks: Vec<DitBlock>,
    pub out: OutputHead,
}

/// Fixed 3-D sinusoidal position code, `[T_lat, h*w, W]`.
pub fn position_code(t: usize, h: usize, w: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let dt = 2 * (width / 8);
    let dy = 2 * ((width - dt) / 4);
    let dx = width - dt - dy;
    let mut data = Vec::with_capacity(t * h * w * width);
    for ti in 0..t {
        let et = sinusoidal(ti as f64, dt);
        for yi in 0..h {
            let ey = sinusoidal(yi as f64, dy);
            for xi in 0..w {
                data.extend_from_slice(&et);
                data.extend_from_slice(&ey);
                data.extend(sinusoidal(xi as f64, dx));
            }
        }
    }
    Ok(Tensor::from_vec(data, (t, h * w, width), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Timestep scale fed to the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;

impl Dit {
    pub fn new(b: &mut Builder, cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(&mut b.sub(format!("blocks.{i}")), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_in: Linear::new(&mut b.sub("patch_in"), LATENT_DIM, w, true, 1.0)?,
            time1: Linear::new(&mut b.sub("time1"), w, w, true, 1.0)?,
            time2: Linear::new(&mut b.sub("time2"), w, w, true, 1.0)?,
            null_text: b.normal("null_text", &[w], 0.02)?,
            blocks,
            out: OutputHead::new(&mut b.sub("out"), w, cfg.head_hidden)?,
            cfg,
        })
    }

    pub fn dtype(&self) -> DType {
        self.patch_in.w.dtype()
    }

    /// Conditioning vector `[1, W]` for diffusion time `t`.
    pub fn time_vector(&self, t: f64) -> Result<Tensor> {
        let e = Tensor::from_vec(sinusoidal(t * TIME_SCALE, self.cfg.width), self.cfg.width, &Device::Cpu)?
            .to_dtype(self.dtype())?;
        let e = self.time2.forward(&self.time1.forward(&e.unsqueeze(0)?)?.silu()?)?;
        Ok(e.broadcast_add(self.null_text.as_tensor())?)
    }

    /// `[T_lat, h, w, D_z]` to tokens `[T_lat, h*w, W]`.
    pub fn embed(&self, z_t: &Tensor) -> Result<Tensor> {
        let (t, h, w, dz) = z_t.dims4()?;
        if dz != LATENT_DIM {
            return Err(Error::data(format!("latent has {dz} channels, expected {LATENT_DIM}")));
        }
        let x = self.patch_in.forward(&z_t.reshape((t, h * w, dz))?)?;
        Ok(x.broadcast_add(&position_code(t, h, w, self.cfg.width, self.dtype())?)?)
    }

    /// Velocity prediction. `residuals`, when given, are added after every
    /// `interval`-th block.
    pub fn forward(&self, z_t: &Tensor, t: f64, control: Option<(&[Tensor], usize)>) -> Result<Tensor> {
        let (tl, h, w, dz) = z_t.dims4()?;
        let c = self.time_vector(t)?;
        let mut x = self.embed(z_t)?;
        if let Some((res, interval)) = control {
            check_residuals(res, interval, self.cfg.depth, x.dims())?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &c)?;
            if let Some((res, interval)) = control {
                x = inject(&x, res, i, interval)?;
            }
        }
        let zt = z_t.reshape((tl, h * w, dz))?;
        Ok(self.out.forward(&x, &c, &zt, t)?.reshape((tl, h, w, dz))?)
    }
}

fn check_residuals(res: &[Tensor], interval: usize, depth: usize, hidden: &[usize]) -> Result<()> {
    if interval == 0 || depth % interval != 0 {
        return Err(Error::config(format!(
            "injection interval {interval} must divide depth {depth}"
        )));
    }
    if res.len() != depth / interval {
        return Err(Error::data(format!(
            "expected {} control residuals, got {}",
            depth / interval,
            res.len()
        )));
    }
    for (j, r) in res.iter().enumerate() {
        if r.dims() != hidden {
            return Err(Error::data(format!(
                "control residual {j} has shape {:?}, hidden state is {hidden:?}",
                r.dims()
            )));
        }
    }
    Ok(())
}

/// Adds `residuals[(i + 1) / N - 1]` after block `i` when `(i + 1) % N == 0`.
pub fn inject(hidden: &Tensor, residuals: &[Tensor], block_index: usize, interval: usize) -> Result<Tensor> {
    if interval == 0 || (block_index + 1) % interval != 0 {
        return Ok(hidden.clone());
    }
    let j = (block_index + 1) / interval - 1;
    let r = residuals
        .get(j)
        .ok_or_else(|| Error::data(format!("missing control residual {j} after block {block_index}")))?;
    Ok((hidden + r)?)
}

/// 0-based block indices after which a residual is injected.
pub fn injection_points(depth: usize, interval: usize) -> Vec<usize> {
    (0..depth).filter(|i| (i + 1) % interval == 0).collect()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `mean((v_hat - (eps - z0))^2)` at a given `t` and noise draw.
pub fn flow_loss<F>(z0: &Tensor, eps: &Tensor, t: f64, predict: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor, f64) -> Result<Tensor>,
{
    let z_t = ((z0 * (1.0 - t))? + (eps * t)?)?;
    let target = (eps - z0)?;
    let v = predict(&z_t, t)?;
    Ok((v - target)?.sqr()?.mean_all()?)
}

/// Rectified-flow training loss with `t ~ U(0, 1)` and `eps ~ N(0, I)` drawn
/// from `rng`.
pub fn training_loss<R, F>(z0: &Tensor, rng: &mut R, predict: F) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnOnce(&Tensor, f64) -> Result<Tensor>,
{
    let t: f64 = rng.random_range(0.0..1.0);
    let eps = standard_normal(rng, z0.dims(), z0.dtype())?;
    flow_loss(z0, &eps, t, predict)
}

/// Euler integration of `dz/dt = v` from `t = 1` (`z = eps`) to `t = 0`.
/// `constrain` may overwrite parts of the state after each step.
pub fn euler_sample<F, C>(eps: &Tensor, steps: usize, mut predict: F, mut constrain: C) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
    C: FnMut(Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::config("sampling needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut z = constrain(eps.clone(), 1.0)?;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = predict(&z, t)?;
        z = (z - (v * dt)?)?;
        z = constrain(z, t - dt)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array4::from_shape_fn((t, h, w, 3), |_| rng.random_range(0.0f32..1.0));
        VideoClip::new(frames, 24.0).unwrap()
    }

    #[test]
    fn latent_shapes() {
        assert_eq!(latent_shape(93, 704, 1280).unwrap(), [24, 44, 80, 3072]);
        assert_eq!(LATENT_DIM, 3 * 16 * 16 * 4);
        assert!(latent_shape(92, 64, 64).is_err());
        assert!(latent_shape(17, 60, 64).is_err());
    }

    #[test]
    fn latent_roundtrips() {
        for (t, seed) in [(17usize, 0u64), (1, 1), (5, 2)] {
            let clip = random_clip(t, 32, 48, seed);
            let z = encode_latent(&clip).unwrap();
            assert_eq!(decode_latent(&z, 24.0).unwrap().frames, clip.frames);
        }
        let zero = VideoClip::zeros(9, 32, 32);
        let z = encode_latent(&zero).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(decode_latent(&z, 24.0).unwrap().frames, zero.frames);
    }

    #[test]
    fn frame_slots_are_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for f in 0..93 {
            assert!(seen.insert(frame_slot(f)));
        }
        assert_eq!(frame_slot(92), (23, 3));
    }

    fn tiny(seed: u64) -> Dit {
        let (mut map, mut rng) = seeded(DType::F32, seed);
        let cfg = DitConfig {
            depth: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 8,
        };
        Dit::new(&mut Builder::new(&mut map, &mut rng), cfg).unwrap()
    }

    #[test]
    fn zero_head_predicts_zero() {
        let dit = tiny(0);
        for var in [&dit.out.gate.w, dit.out.gate.b.as_ref().unwrap(), &dit.out.head.w] {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = standard_normal(&mut rng, &[2, 2, 2, LATENT_DIM], DType::F32).unwrap();
        let v = dit.forward(&z, 0.3, None).unwrap();
        assert_eq!(v.dims(), z.dims());
        assert_eq!(crate::aligner::max_abs(&v).unwrap(), 0.0);
    }

    #[test]
    fn injection_schedule() {
        assert_eq!(injection_points(8, 2), vec![1, 3, 5, 7]);
        assert_eq!(injection_points(8, 8), vec![7]);
        let h = Tensor::ones((1, 2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(inject(&h, &[], 1, 2).is_err());
        let same = inject(&h, &[], 0, 2).unwrap();
        assert_eq!(same.to_vec3::<f32>().unwrap(), h.to_vec3::<f32>().unwrap());
    }

    #[test]
    fn residual_count_checked() {
        let dit = tiny(0);
        let z = Tensor::zeros((1, 1, 1, LATENT_DIM), DType::F32, &Device::Cpu).unwrap();
        let r = Tensor::zeros((1, 1, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(dit.forward(&z, 0.5, Some((&[r.clone(), r.clone()], 2))).is_err());
        assert!(dit.forward(&z, 0.5, Some((&[r], 2))).is_ok());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = standard_normal(&mut rng, &[2, 3], DType::F64).unwrap();
        let eps = standard_normal(&mut rng, &[2, 3], DType::F64).unwrap();
        let target = (&eps - &z0).unwrap();
        let loss = flow_loss(&z0, &eps, 0.37, |_, _| Ok(target.clone())).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn single_euler_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = standard_normal(&mut rng, &[4], DType::F64).unwrap();
        let out = euler_sample(&eps, 1, |z, t| Ok((z * (2.0 * t))?), |z, _| Ok(z)).unwrap();
        let expect = (&eps - (&eps * 2.0).unwrap()).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), expect.to_vec1::<f64>().unwrap());
        assert!(euler_sample(&eps, 0, |z, _| Ok(z.clone()), |z, _| Ok(z)).is_err());
    }
}
