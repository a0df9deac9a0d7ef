//! Evaluation metrics: realism ratio, flow-warped SSIM, semantics-matched
//! patch statistics (FID / KID) and mask IoU against ground truth.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::PALETTE;
use crate::video::VideoClip;

pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::numerical("cannot normalise a zero or non-finite embedding"));
    }
    Ok(v.iter().map(|x| (f64::from(*x) / n) as f32).collect())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// `(x . t_p) / (x . t_n)` for unit embeddings.
pub fn clip_real(x: &[f32], t_p: &[f32], t_n: &[f32]) -> Result<f64> {
    if x.len() != t_p.len() || x.len() != t_n.len() {
        return Err(Error::data("embedding dimensions differ"));
    }
    for (name, v) in [("x", x), ("t_p", t_p), ("t_n", t_n)] {
        let n = dot(v, v).sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::data(format!("{name} is not unit length (norm {n})")));
        }
    }
    let den = dot(x, t_n);
    if den.abs() < 1e-12 {
        return Err(Error::numerical("x . t_n is zero; the ratio is undefined"));
    }
    Ok(dot(x, t_p) / den)
}

/// Image-patch embedder used for realism scoring and patch matching.
pub trait Embedder {
    fn dim(&self) -> usize;
    /// Unit-length embedding of an `[h, w, 3]` image region.
    fn embed(&self, patch: ArrayView3<f32>) -> Result<Vec<f32>>;
}

/// Per-channel colour histogram plus a gradient-orientation histogram
/// weighted by gradient magnitude, unit-normalised.
#[derive(Debug, Clone, Copy)]
pub struct ToyEmbedder {
    pub color_bins: usize,
    pub orientation_bins: usize,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self {
            color_bins: 8,
            orientation_bins: 8,
        }
    }
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        3 * self.color_bins + self.orientation_bins
    }

    fn embed(&self, patch: ArrayView3<f32>) -> Result<Vec<f32>> {
        let (h, w, c) = patch.dim();
        if c != 3 || h < 2 || w < 2 {
            return Err(Error::data(format!("cannot embed a {h}x{w}x{c} patch")));
        }
        let mut v = vec![0f32; self.dim()];
        let npix = (h * w) as f32;
        for px in patch.lanes(Axis(2)) {
            for ch in 0..3 {
                let b = ((px[ch].clamp(0.0, 1.0) * self.color_bins as f32) as usize).min(self.color_bins - 1);
                v[ch * self.color_bins + b] += 1.0 / npix;
            }
        }
        let base = 3 * self.color_bins;
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let lum = |yy: usize, xx: usize| (patch[[yy, xx, 0]] + patch[[yy, xx, 1]] + patch[[yy, xx, 2]]) / 3.0;
                let gx = lum(y, x + 1) - lum(y, x);
                let gy = lum(y + 1, x) - lum(y, x);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    let ang = gy.atan2(gx).rem_euclid(std::f32::consts::PI);
                    let b = ((ang / std::f32::consts::PI * self.orientation_bins as f32) as usize)
                        .min(self.orientation_bins - 1);
                    v[base + b] += mag;
                }
            }
        }
        normalize(&v)
    }
}

/// Bilinear sample of `frame` at `(x + u, y + v)`; positions outside the
/// frame are marked invalid (and left at zero).
pub fn backward_warp(frame: ArrayView3<f32>, flow: ArrayView3<f32>) -> Result<(Array3<f32>, Array2<bool>)> {
    let (h, w, c) = frame.dim();
    if flow.dim() != (h, w, 2) {
        return Err(Error::data(format!(
            "flow shape {:?} does not match frame {h}x{w}",
            flow.dim()
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let sx = x as f32 + flow[[y, x, 0]];
            let sy = y as f32 + flow[[y, x, 1]];
            if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32) {
                continue;
            }
            valid[[y, x]] = true;
            let x0 = (sx.floor() as usize).min(w - 1);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            for ch in 0..c {
                let top = frame[[y0, x0, ch]] * (1.0 - fx) + frame[[y0, x1, ch]] * fx;
                let bot = frame[[y1, x0, ch]] * (1.0 - fx) + frame[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok((out, valid))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with zero padding.
fn blur(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = taps.len() / 2;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                let xx = x as isize + i as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * img[[y, xx as usize]];
                }
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                let yy = y as isize + i as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[[yy as usize, x]];
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Gaussian-window SSIM (11x11, sigma 1.5), per channel, averaged over valid
/// pixels and channels. Window statistics only use valid pixels, renormalised
/// by the valid weight inside the window.
pub fn ssim_masked(a: ArrayView3<f32>, b: ArrayView3<f32>, valid: Option<ArrayView2<bool>>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::data(format!("ssim: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let (h, w, c) = a.dim();
    let mask: Array2<f64> = match valid {
        Some(v) => {
            if v.dim() != (h, w) {
                return Err(Error::data("ssim: validity mask shape mismatch"));
            }
            v.mapv(|b| if b { 1.0 } else { 0.0 })
        }
        None => Array2::from_elem((h, w), 1.0),
    };
    let n_valid = mask.sum();
    if n_valid == 0.0 {
        return Err(Error::data("ssim: no valid pixels"));
    }
    let taps = gaussian_taps();
    let wsum = blur(&mask, &taps);
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.index_axis(Axis(2), ch).mapv(f64::from);
        let y = b.index_axis(Axis(2), ch).mapv(f64::from);
        let stat = |img: Array2<f64>| blur(&(&img * &mask), &taps);
        let mx = stat(x.clone());
        let my = stat(y.clone());
        let mxx = stat(&x * &x);
        let myy = stat(&y * &y);
        let mxy = stat(&x * &y);
        let mut sum = 0.0;
        for ((i, j), m) in mask.indexed_iter() {
            if *m == 0.0 {
                continue;
            }
            let ws = wsum[[i, j]];
            let ux = mx[[i, j]] / ws;
            let uy = my[[i, j]] / ws;
            let vx = mxx[[i, j]] / ws - ux * ux;
            let vy = myy[[i, j]] / ws - uy * uy;
            let cxy = mxy[[i, j]] / ws - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / n_valid;
    }
    Ok(total / c as f64)
}

pub fn ssim(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<f64> {
    ssim_masked(a, b, None)
}

/// Mean over `t` and over neighbours `t + d` (`d = 1..=window`) of the SSIM
/// between frame `t` and frame `t + d` warped back along the accumulated flow,
/// scaled by 100. `window = 1` compares adjacent frames only.
pub fn warp_ssim_window(gen: &VideoClip, flows: &Array4<f32>, window: usize) -> Result<f64> {
    let t = gen.num_frames();
    let (ft, fh, fw, two) = flows.dim();
    if ft + 1 != t || fh != gen.height() || fw != gen.width() || two != 2 {
        return Err(Error::data(format!(
            "flow field {:?} does not match a {t}-frame {}x{} clip",
            flows.dim(),
            gen.height(),
            gen.width()
        )));
    }
    if t < 2 || window == 0 {
        return Err(Error::data("warp_ssim needs at least two frames and window >= 1"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in 0..t - 1 {
        for d in 1..=window.min(t - 1 - f) {
            let flow = compose_flow(flows, f, d)?;
            let (warped, valid) = backward_warp(gen.frame(f + d), flow.view())?;
            if !valid.iter().any(|v| *v) {
                continue;
            }
            sum += ssim_masked(gen.frame(f), warped.view(), Some(valid.view()))?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data("warp_ssim: every warped frame was fully out of bounds"));
    }
    Ok(100.0 * sum / n as f64)
}

pub fn warp_ssim(gen: &VideoClip, flows: &Array4<f32>) -> Result<f64> {
    warp_ssim_window(gen, flows, 1)
}

/// Flow from frame `f` to frame `f + d` by chaining per-step flows
/// (bilinear lookup of each later step at the displaced position).
fn compose_flow(flows: &Array4<f32>, f: usize, d: usize) -> Result<Array3<f32>> {
    let mut acc = flows.index_axis(Axis(0), f).to_owned();
    for step in 1..d {
        let next = flows.index_axis(Axis(0), f + step);
        let (moved, _) = backward_warp(next, acc.view())?;
        acc = acc + moved;
    }
    Ok(acc)
}

/// Location of a `p x p` patch: `(frame, y, x)` of its top-left corner.
pub type PatchLoc = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPairSet {
    pub patch: usize,
    pub cg: Vec<PatchLoc>,
    pub real: Vec<PatchLoc>,
    /// `(index into cg, index into real)`.
    pub pairs: Vec<(usize, usize)>,
}

/// Non-overlapping `p x p` patch grid over a stack of frames.
pub fn patch_grid(frames: &[ArrayView3<f32>], p: usize) -> Result<Vec<PatchLoc>> {
    let mut out = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        let (h, w, _) = fr.dim();
        if p == 0 || p > h || p > w {
            return Err(Error::data(format!("patch size {p} does not fit a {h}x{w} frame")));
        }
        for y in (0..=h - p).step_by(p) {
            for x in (0..=w - p).step_by(p) {
                out.push((f, y, x));
            }
        }
    }
    Ok(out)
}

fn patch_view<'a>(frames: &'a [ArrayView3<'a, f32>], loc: PatchLoc, p: usize) -> ArrayView3<'a, f32> {
    frames[loc.0].slice(s![loc.1..loc.1 + p, loc.2..loc.2 + p, ..])
}

pub fn embed_patches(frames: &[ArrayView3<f32>], locs: &[PatchLoc], p: usize, embedder: &dyn Embedder) -> Result<Vec<Vec<f32>>> {
    locs.iter().map(|&l| embedder.embed(patch_view(frames, l, p))).collect()
}

/// Samples up to `n_pairs` distinct CG patches and matches each to its
/// cosine nearest neighbour among all real patches (ties: lowest index).
pub fn semantics_aware_pairs(
    cg_frames: &[ArrayView3<f32>],
    real_frames: &[ArrayView3<f32>],
    embedder: &dyn Embedder,
    p: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<PatchPairSet> {
    if n_pairs == 0 {
        return Err(Error::config("n_pairs must be >= 1"));
    }
    let cg_all = patch_grid(cg_frames, p)?;
    let real = patch_grid(real_frames, p)?;
    if cg_all.is_empty() || real.is_empty() {
        return Err(Error::data("no patches to pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_pairs.min(cg_all.len());
    let mut idx = sample(&mut rng, cg_all.len(), n).into_vec();
    idx.sort_unstable();
    let cg: Vec<PatchLoc> = idx.iter().map(|&i| cg_all[i]).collect();
    let cg_emb = embed_patches(cg_frames, &cg, p, embedder)?;
    let real_emb = embed_patches(real_frames, &real, p, embedder)?;
    let pairs = cg_emb
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, r) in real_emb.iter().enumerate() {
                let s = dot(e, r);
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            (i, best)
        })
        .collect();
    Ok(PatchPairSet {
        patch: p,
        cg,
        real,
        pairs,
    })
}

fn to_matrix(feats: &[Vec<f32>]) -> Result<DMatrix<f64>> {
    let n = feats.len();
    let d = feats.first().map(|f| f.len()).unwrap_or(0);
    if feats.iter().any(|f| f.len() != d) || d == 0 {
        return Err(Error::data("feature vectors must share a non-zero dimension"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| f64::from(feats[i][j])))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = xc.transpose() * &xc / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn regularize(cov: &mut DMatrix<f64>, which: &str) {
    let e = SymmetricEigen::new(cov.clone());
    if e.eigenvalues.iter().any(|v| *v <= 1e-10) {
        warn!("{which} covariance is singular; adding 1e-6 I");
        for i in 0..cov.nrows() {
            cov[(i, i)] += 1e-6;
        }
    }
}

/// Frechet distance between Gaussians fitted to the two sets.
pub fn fid(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::data("fid needs at least two samples per side"));
    }
    let (ma, mut ca) = mean_cov(&to_matrix(a)?);
    let (mb, mut cb) = mean_cov(&to_matrix(b)?);
    if ma.len() != mb.len() {
        return Err(Error::data("fid: feature dimensions differ"));
    }
    regularize(&mut ca, "first");
    regularize(&mut cb, "second");
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let cross = sym_sqrt(&(&inner + inner.transpose()).scale(0.5));
    let diff = &ma - &mb;
    Ok(diff.dot(&diff) + (ca.trace() + cb.trace() - 2.0 * cross.trace()))
}

/// Unbiased MMD^2 with the cubic polynomial kernel `(x.y / d + 1)^3`, x100.
///
/// Equal-sized sets use the paired U-statistic over `i != j`, which is exactly
/// zero for identical sets; unequal sizes use the two-sample form.
pub fn kid(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::data("kid needs at least two samples per side"));
    }
    let xa = to_matrix(a)?;
    let xb = to_matrix(b)?;
    if xa.ncols() != xb.ncols() {
        return Err(Error::data("kid: feature dimensions differ"));
    }
    let d = xa.ncols() as f64;
    let k = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(3));
    let kaa = k(&xa * xa.transpose());
    let kbb = k(&xb * xb.transpose());
    let kab = k(&xa * xb.transpose());
    let (n, m) = (xa.nrows() as f64, xb.nrows() as f64);
    let off = |km: &DMatrix<f64>| km.sum() - km.trace();
    let mmd = if xa.nrows() == xb.nrows() {
        (off(&kaa) + off(&kbb) - 2.0 * off(&kab)) / (n * (n - 1.0))
    } else {
        off(&kaa) / (n * (n - 1.0)) + off(&kbb) / (m * (m - 1.0)) - 2.0 * kab.sum() / (n * m)
    };
    Ok(100.0 * mmd)
}

/// Nearest-palette class for every pixel.
pub fn classify_palette(clip: &VideoClip) -> Array3<u8> {
    let (t, h, w) = clip.dims();
    let mut out = Array3::zeros((t, h, w));
    for ((f, y, x), v) in out.indexed_iter_mut() {
        let mut best = 0u8;
        let mut best_d = f32::INFINITY;
        for (i, p) in PALETTE.iter().enumerate() {
            let d: f32 = (0..3).map(|c| (clip.frames[[f, y, x, c]] - p[c]).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i as u8;
            }
        }
        *v = best;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskScores {
    /// IoU per class id, for classes present in either prediction or truth.
    pub per_class: BTreeMap<u8, f64>,
    pub miou: f64,
}

/// Classifies pixels by nearest palette colour and scores them against
/// ground-truth ids.
pub fn mask_consistency(gen: &VideoClip, gt: &Array3<u8>) -> Result<MaskScores> {
    let (t, h, w) = gen.dims();
    if gt.dim() != (t, h, w) {
        return Err(Error::data(format!(
            "mask shape {:?} does not match clip [{t}, {h}, {w}]",
            gt.dim()
        )));
    }
    if let Some(bad) = gt.iter().find(|&&v| v as usize >= PALETTE.len()) {
        return Err(Error::data(format!(
            "mask id {bad} has no palette colour (palette has {} entries)",
            PALETTE.len()
        )));
    }
    let pred = classify_palette(gen);
    let mut inter = [0u64; 256];
    let mut union = [0u64; 256];
    for (p, g) in pred.iter().zip(gt.iter()) {
        if p == g {
            inter[*p as usize] += 1;
            union[*p as usize] += 1;
        } else {
            union[*p as usize] += 1;
            union[*g as usize] += 1;
        }
    }
    let per_class: BTreeMap<u8, f64> = (0..256)
        .filter(|&c| union[c] > 0)
        .map(|c| (c as u8, inter[c] as f64 / union[c] as f64))
        .collect();
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MaskScores { per_class, miou })
}

/// Realism prototypes: mean embeddings of real-domain and sim-domain frames.
pub fn prototypes(real: &[ArrayView3<f32>], sim: &[ArrayView3<f32>], embedder: &dyn Embedder) -> Result<(Vec<f32>, Vec<f32>)> {
    let mean = |frames: &[ArrayView3<f32>]| -> Result<Vec<f32>> {
        if frames.is_empty() {
            return Err(Error::data("no frames for a prototype"));
        }
        let mut acc = vec![0f32; embedder.dim()];
        for f in frames {
            for (a, v) in acc.iter_mut().zip(embedder.embed(f.view())?) {
                *a += v;
            }
        }
        normalize(&acc)
    };
    Ok((mean(real)?, mean(sim)?))
}

/// Mean CLIP-Real ratio of the frames of `gen`, x100.
pub fn clip_real_score(gen: &VideoClip, t_p: &[f32], t_n: &[f32], embedder: &dyn Embedder) -> Result<f64> {
    let mut sum = 0.0;
    for f in 0..gen.num_frames() {
        sum += clip_real(&embedder.embed(gen.frame(f))?, t_p, t_n)?;
    }
    Ok(100.0 * sum / gen.num_frames() as f64)
}
