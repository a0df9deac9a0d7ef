//! Procedural paired sim/real clips with exact instance masks and flow.
//!
//! Objects are axis-aligned rectangles and discs on linear trajectories that
//! bounce off the frame border. Both renderings share the same trajectories,
//! so silhouettes agree pixel for pixel. The "sim" rendering uses flat palette
//! colours; the "real" rendering adds a per-class periodic value-noise texture,
//! low-amplitude photometric noise and a mild blur.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::video::VideoClip;

/// Class colours indexed by instance id (0 is background). Shared by both
/// renderings; the real-domain texture is zero mean around them.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.25, 0.85],
    [0.85, 0.80, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.80],
    [0.12, 0.12, 0.12],
];

pub const MAX_OBJECTS: usize = PALETTE.len() - 1;

/// Period of the real-domain texture tile in pixels.
pub const TEXTURE_PERIOD: usize = 4;
pub const TEXTURE_AMPLITUDE: f32 = 0.08;
pub const NOISE_SIGMA: f32 = 0.01;
const BLUR_KERNEL: [f32; 3] = [0.125, 0.75, 0.125];
const TEXTURE_SEED: u64 = 0x7e47_0e5e;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureLevel {
    /// The "real" rendering equals the flat sim rendering.
    Flat,
    Textured,
}

impl TextureLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TextureLevel::Flat => "flat",
            TextureLevel::Textured => "textured",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(TextureLevel::Flat),
            "textured" => Ok(TextureLevel::Textured),
            other => Err(Error::config(format!(
                "unknown texture level `{other}` (expected flat|textured)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_objects: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels per frame.
    pub motion_speed: f32,
    pub texture: TextureLevel,
}

impl SceneSpec {
    pub fn new(seed: u64, num_objects: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            num_objects,
            frames,
            height,
            width,
            motion_speed: 1.5,
            texture: TextureLevel::Textured,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 5 {
            return Err(Error::config(format!("T = {} but T >= 5 required", self.frames)));
        }
        if self.height < 64 || self.width < 64 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::config(format!(
                "frame size {}x{} must be at least 64x64 and divisible by 16",
                self.height, self.width
            )));
        }
        if self.num_objects == 0 || self.num_objects > MAX_OBJECTS {
            return Err(Error::config(format!(
                "num_objects = {} must be in 1..={MAX_OBJECTS}",
                self.num_objects
            )));
        }
        if !(self.motion_speed.is_finite() && self.motion_speed >= 0.0) {
            return Err(Error::config("motion_speed must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedClip {
    pub sim: VideoClip,
    pub real: VideoClip,
    /// Instance ids `[T, H, W]`, 0 = background.
    pub masks: Array3<u8>,
    /// Forward flow `[T-1, H, W, 2]` (dx, dy) in pixels, exact by construction.
    pub flow: Array4<f32>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { w: f32, h: f32 },
    Disc { r: f32 },
}

impl Shape {
    fn extent(&self) -> (f32, f32) {
        match *self {
            Shape::Rect { w, h } => (w, h),
            Shape::Disc { r } => (2.0 * r, 2.0 * r),
        }
    }

    /// Whether pixel `(x, y)` is covered when the bounding box sits at integer
    /// offset `(ox, oy)`.
    fn covers(&self, ox: i64, oy: i64, x: i64, y: i64) -> bool {
        let (lx, ly) = ((x - ox) as f32 + 0.5, (y - oy) as f32 + 0.5);
        match *self {
            Shape::Rect { w, h } => lx >= 0.0 && ly >= 0.0 && lx < w && ly < h,
            Shape::Disc { r } => {
                let (dx, dy) = (lx - r, ly - r);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

struct Track {
    shape: Shape,
    /// Rounded top-left corner per frame.
    offsets: Vec<(i64, i64)>,
}

fn simulate(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Track> {
    let (hh, ww) = (spec.height as f32, spec.width as f32);
    let min_side = hh.min(ww);
    (0..spec.num_objects)
        .map(|_| {
            let lo = (min_side / 6.0).max(6.0);
            let hi = (min_side / 3.0).max(lo + 1.0);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    w: rng.random_range(lo..hi).round(),
                    h: rng.random_range(lo..hi).round(),
                }
            } else {
                Shape::Disc {
                    r: (rng.random_range(lo..hi) / 2.0).round(),
                }
            };
            let (ew, eh) = shape.extent();
            let mut x = rng.random_range(0.0..(ww - ew).max(1.0));
            let mut y = rng.random_range(0.0..(hh - eh).max(1.0));
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let (mut vx, mut vy) = (spec.motion_speed * angle.cos(), spec.motion_speed * angle.sin());
            let mut offsets = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                offsets.push((x.round() as i64, y.round() as i64));
                x += vx;
                y += vy;
                let max_x = ww - ew;
                let max_y = hh - eh;
                if x < 0.0 {
                    x = -x;
                    vx = -vx;
                } else if x > max_x {
                    x = 2.0 * max_x - x;
                    vx = -vx;
                }
                if y < 0.0 {
                    y = -y;
                    vy = -vy;
                } else if y > max_y {
                    y = 2.0 * max_y - y;
                    vy = -vy;
                }
            }
            Track { shape, offsets }
        })
        .collect()
}

/// Zero-mean, unit-rms periodic value-noise tile for a class.
pub fn texture_tile(class: usize) -> [[f32; TEXTURE_PERIOD]; TEXTURE_PERIOD] {
    let mut rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED.wrapping_add(class as u64 * 7919));
    let p = TEXTURE_PERIOD;
    let mut lattice = [[0f32; TEXTURE_PERIOD]; TEXTURE_PERIOD];
    for row in lattice.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    // periodic smoothing turns white lattice values into value noise
    let mut tile = [[0f32; TEXTURE_PERIOD]; TEXTURE_PERIOD];
    for y in 0..p {
        for x in 0..p {
            let mut acc = 0.0;
            for (dy, wy) in [(p - 1, 0.25), (0, 0.5), (1, 0.25)] {
                for (dx, wx) in [(p - 1, 0.25), (0, 0.5), (1, 0.25)] {
                    acc += wy * wx * lattice[(y + dy) % p][(x + dx) % p];
                }
            }
            tile[y][x] = acc;
        }
    }
    let mean = tile.iter().flatten().sum::<f32>() / (p * p) as f32;
    let rms = (tile.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f32>() / (p * p) as f32)
        .sqrt()
        .max(1e-6);
    for row in tile.iter_mut() {
        for v in row.iter_mut() {
            *v = (*v - mean) / rms;
        }
    }
    tile
}

fn blur_separable(frames: &mut Array4<f32>) {
    let (t, h, w, c) = frames.dim();
    let mut tmp = frames.clone();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let xm = x.saturating_sub(1);
                    let xp = (x + 1).min(w - 1);
                    tmp[[f, y, x, ch]] = BLUR_KERNEL[0] * frames[[f, y, xm, ch]]
                        + BLUR_KERNEL[1] * frames[[f, y, x, ch]]
                        + BLUR_KERNEL[2] * frames[[f, y, xp, ch]];
                }
            }
        }
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                for ch in 0..c {
                    frames[[f, y, x, ch]] = BLUR_KERNEL[0] * tmp[[f, ym, x, ch]]
                        + BLUR_KERNEL[1] * tmp[[f, y, x, ch]]
                        + BLUR_KERNEL[2] * tmp[[f, yp, x, ch]];
                }
            }
        }
    }
}

/// Renders a paired clip. Pure function of `spec`.
pub fn generate_clip(spec: &SceneSpec) -> Result<PairedClip> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tracks = simulate(spec, &mut rng);

    let mut masks = Array3::<u8>::zeros((t, h, w));
    for f in 0..t {
        // later ids are drawn on top
        for (i, track) in tracks.iter().enumerate() {
            let (ox, oy) = track.offsets[f];
            let (ew, eh) = track.shape.extent();
            let x0 = ox.max(0);
            let y0 = oy.max(0);
            let x1 = (ox + ew.ceil() as i64 + 1).min(w as i64);
            let y1 = (oy + eh.ceil() as i64 + 1).min(h as i64);
            for y in y0..y1 {
                for x in x0..x1 {
                    if track.shape.covers(ox, oy, x, y) {
                        masks[[f, y as usize, x as usize]] = (i + 1) as u8;
                    }
                }
            }
        }
    }

    let mut flow = Array4::<f32>::zeros((t - 1, h, w, 2));
    for f in 0..t - 1 {
        for y in 0..h {
            for x in 0..w {
                let id = masks[[f, y, x]] as usize;
                if id > 0 {
                    let track = &tracks[id - 1];
                    let (ax, ay) = track.offsets[f];
                    let (bx, by) = track.offsets[f + 1];
                    flow[[f, y, x, 0]] = (bx - ax) as f32;
                    flow[[f, y, x, 1]] = (by - ay) as f32;
                }
            }
        }
    }

    let mut sim = Array4::<f32>::zeros((t, h, w, 3));
    for ((f, y, x, c), v) in sim.indexed_iter_mut() {
        *v = PALETTE[masks[[f, y, x]] as usize][c];
    }

    let real = match spec.texture {
        TextureLevel::Flat => sim.clone(),
        TextureLevel::Textured => {
            let tiles: Vec<_> = (0..=spec.num_objects).map(texture_tile).collect();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f15e);
            let normal = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
            let mut real = sim.clone();
            for f in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let id = masks[[f, y, x]] as usize;
                        let tex = TEXTURE_AMPLITUDE * tiles[id][y % TEXTURE_PERIOD][x % TEXTURE_PERIOD];
                        for c in 0..3 {
                            real[[f, y, x, c]] += tex + normal.sample(&mut noise_rng);
                        }
                    }
                }
            }
            blur_separable(&mut real);
            real.mapv_inplace(|v| v.clamp(0.0, 1.0));
            real
        }
    };

    Ok(PairedClip {
        sim: VideoClip::new(sim, 10.0)?,
        real: VideoClip::new(real, 10.0)?,
        masks,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn two_objects_give_three_labels_every_frame() {
        let spec = SceneSpec::new(0, 2, 16, 64, 64);
        let clip = generate_clip(&spec).unwrap();
        for f in 0..16 {
            let labels: BTreeSet<u8> = clip.masks.index_axis(ndarray::Axis(0), f).iter().copied().collect();
            assert_eq!(labels, BTreeSet::from([0, 1, 2]), "frame {f}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::new(42, 3, 9, 64, 80);
        assert_eq!(generate_clip(&spec).unwrap(), generate_clip(&spec).unwrap());
    }

    #[test]
    fn zero_speed_is_static() {
        let mut spec = SceneSpec::new(3, 3, 8, 64, 64);
        spec.motion_speed = 0.0;
        let clip = generate_clip(&spec).unwrap();
        for f in 1..8 {
            assert_eq!(
                clip.masks.index_axis(ndarray::Axis(0), f),
                clip.masks.index_axis(ndarray::Axis(0), 0)
            );
        }
        assert!(clip.flow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let bad = [
            SceneSpec::new(0, 2, 4, 64, 64),
            SceneSpec::new(0, 2, 8, 48, 64),
            SceneSpec::new(0, 2, 8, 64, 72),
            SceneSpec::new(0, 0, 8, 64, 64),
        ];
        for spec in bad {
            assert!(matches!(generate_clip(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn values_in_range_and_silhouettes_agree() {
        let spec = SceneSpec::new(11, 4, 6, 64, 64);
        let clip = generate_clip(&spec).unwrap();
        assert!(clip.real.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(clip.masks.iter().all(|&m| m as usize <= spec.num_objects));
        // sim pixels are exactly the palette colour of the mask label
        for ((f, y, x, c), v) in clip.sim.frames.indexed_iter() {
            assert_eq!(*v, PALETTE[clip.masks[[f, y, x]] as usize][c]);
        }
    }

    #[test]
    fn flow_moves_labels_exactly() {
        let spec = SceneSpec::new(5, 2, 10, 64, 64);
        let clip = generate_clip(&spec).unwrap();
        let (t, h, w) = clip.masks.dim();
        for f in 0..t - 1 {
            for y in 0..h {
                for x in 0..w {
                    let id = clip.masks[[f, y, x]];
                    if id == 0 {
                        continue;
                    }
                    let nx = x as i64 + clip.flow[[f, y, x, 0]] as i64;
                    let ny = y as i64 + clip.flow[[f, y, x, 1]] as i64;
                    assert!(nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h);
                }
            }
        }
    }

    #[test]
    fn texture_tile_is_zero_mean_unit_rms() {
        for class in 0..PALETTE.len() {
            let tile = texture_tile(class);
            let vals: Vec<f32> = tile.iter().flatten().copied().collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let rms = (vals.iter().map(|v| v * v).sum::<f32>() / vals.len() as f32).sqrt();
            assert!(mean.abs() < 1e-5);
            assert!((rms - 1.0).abs() < 1e-4);
        }
    }
}
