//! Global principal-subspace bottleneck for dense features.
//!
//! A single basis (mean + leading eigenvectors) is fitted incrementally over
//! one random frame per training clip, sign-stabilised, and persisted. Feature
//! grids are projected onto it, and a prefix-of-ones channel mask selects how
//! many leading components survive: sampled from a candidate set during
//! training (tail drop) and chosen by the user at inference.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::video::FeatureGrid;

/// Added to eigenvalues before whitening.
pub const WHITEN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Array1<f32>,
    /// `[k_m, C]`, rows are principal directions in descending eigenvalue order.
    pub components: Array2<f32>,
    pub eigenvalues: Array1<f32>,
    pub n_fitted: u64,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k_max(&self) -> usize {
        self.components.nrows()
    }

    /// `max |Q Q^T - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let q = self.components.mapv(f64::from);
        let gram = q.dot(&q.t());
        let mut err = 0f64;
        for ((i, j), v) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((v - target).abs());
        }
        err
    }

    /// The first `k` rows as a basis of their own.
    pub fn truncated(&self, k: usize) -> Result<PcaBasis> {
        if k == 0 || k > self.k_max() {
            return Err(Error::config(format!("k = {k} outside [1, {}]", self.k_max())));
        }
        Ok(PcaBasis {
            mean: self.mean.clone(),
            components: self.components.slice(ndarray::s![..k, ..]).to_owned(),
            eigenvalues: self.eigenvalues.slice(ndarray::s![..k]).to_owned(),
            n_fitted: self.n_fitted,
        })
    }
}

/// Picks one frame index per clip, uniform over `[0, T)`.
pub fn sample_fitting_frames(manifest: &Manifest, seed: u64) -> Result<Vec<(String, usize)>> {
    if manifest.is_empty() {
        return Err(Error::data("cannot sample fitting frames from an empty manifest"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    manifest
        .entries
        .iter()
        .map(|e| {
            if e.frames == 0 {
                return Err(Error::data(format!("clip {} has no frames", e.clip_id)));
            }
            Ok((e.clip_id.clone(), rng.random_range(0..e.frames)))
        })
        .collect()
}

/// Mini-batch incremental PCA: running mean plus an SVD of the stacked
/// `[diag(S) V; batch - batch_mean; mean correction]` matrix after each batch.
///
/// The solver tracks `rank = min(C, 2 k_m)` directions internally, so for
/// `C <= 2 k_m` it reproduces exact batch PCA.
#[derive(Debug, Clone)]
pub struct IncrementalPca {
    k_max: usize,
    rank: usize,
    dim: usize,
    n: u64,
    mean: DVector<f64>,
    /// `[r, C]` with `r <= rank`.
    components: DMatrix<f64>,
    singular: DVector<f64>,
}

impl IncrementalPca {
    pub fn new(dim: usize, k_max: usize) -> Result<Self> {
        if k_max == 0 || k_max > dim {
            return Err(Error::config(format!(
                "k_m = {k_max} must be in [1, C = {dim}]"
            )));
        }
        Ok(Self {
            k_max,
            rank: dim.min(2 * k_max),
            dim,
            n: 0,
            mean: DVector::zeros(dim),
            components: DMatrix::zeros(0, dim),
            singular: DVector::zeros(0),
        })
    }

    pub fn n_seen(&self) -> u64 {
        self.n
    }

    /// Folds a `[b, C]` batch into the running decomposition.
    pub fn partial_fit(&mut self, batch: &DMatrix<f64>) -> Result<()> {
        let b = batch.nrows();
        if b == 0 {
            return Ok(());
        }
        if batch.ncols() != self.dim {
            return Err(Error::data(format!(
                "row dimension {} does not match C = {}",
                batch.ncols(),
                self.dim
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite feature row in PCA input"));
        }
        let batch_mean = batch.row_mean().transpose();
        let n_old = self.n as f64;
        let n_new = n_old + b as f64;
        let mut centered = batch.clone();
        for mut row in centered.row_iter_mut() {
            row -= batch_mean.transpose();
        }
        let r_old = self.components.nrows();
        let extra = usize::from(self.n > 0);
        let mut stacked = DMatrix::<f64>::zeros(r_old + b + extra, self.dim);
        for i in 0..r_old {
            let row = self.components.row(i) * self.singular[i];
            stacked.row_mut(i).copy_from(&row);
        }
        stacked.rows_mut(r_old, b).copy_from(&centered);
        if self.n > 0 {
            let scale = (n_old * b as f64 / n_new).sqrt();
            let corr = (&self.mean - &batch_mean) * scale;
            stacked.row_mut(r_old + b).copy_from(&corr.transpose());
        }
        self.mean = (&self.mean * n_old + &batch_mean * b as f64) / n_new;
        self.n += b as u64;

        let svd = stacked.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::numerical("SVD did not return right singular vectors"))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let keep = order.len().min(self.rank);
        let mut comps = DMatrix::zeros(keep, self.dim);
        let mut sing = DVector::zeros(keep);
        for (dst, &src) in order.iter().take(keep).enumerate() {
            comps.row_mut(dst).copy_from(&v_t.row(src));
            sing[dst] = svd.singular_values[src];
        }
        self.components = comps;
        self.singular = sing;
        Ok(())
    }

    pub fn finish(&self) -> Result<PcaBasis> {
        if (self.n as usize) < self.k_max || self.components.nrows() < self.k_max {
            return Err(Error::data(format!(
                "PCA saw {} rows; at least k_m = {} required",
                self.n, self.k_max
            )));
        }
        let denom = (self.n.max(2) - 1) as f64;
        let mut components = Array2::<f32>::zeros((self.k_max, self.dim));
        let mut eigenvalues = Array1::<f32>::zeros(self.k_max);
        for i in 0..self.k_max {
            for j in 0..self.dim {
                components[[i, j]] = self.components[(i, j)] as f32;
            }
            eigenvalues[i] = (self.singular[i] * self.singular[i] / denom) as f32;
        }
        Ok(PcaBasis {
            mean: self.mean.iter().map(|&v| v as f32).collect(),
            components,
            eigenvalues,
            n_fitted: self.n,
        })
    }
}

/// Streams feature rows through [`IncrementalPca`] in batches of `batch_size`.
pub fn fit_incremental<I>(rows: I, k_max: usize, batch_size: usize) -> Result<PcaBasis>
where
    I: IntoIterator,
    I::Item: AsRef<[f32]>,
{
    let batch_size = batch_size.max(1);
    let mut solver: Option<IncrementalPca> = None;
    let mut buf: Vec<f64> = Vec::new();
    let mut dim = 0usize;
    for row in rows {
        let row = row.as_ref();
        let s = match solver.as_mut() {
            Some(s) => s,
            None => {
                dim = row.len();
                solver.insert(IncrementalPca::new(dim, k_max)?)
            }
        };
        if row.len() != dim {
            return Err(Error::data(format!(
                "feature rows change dimension ({} vs {dim})",
                row.len()
            )));
        }
        buf.extend(row.iter().map(|&v| f64::from(v)));
        if buf.len() == batch_size * dim {
            s.partial_fit(&DMatrix::from_row_slice(batch_size, dim, &buf))?;
            buf.clear();
        }
    }
    let Some(mut solver) = solver else {
        return Err(Error::data("PCA received no rows"));
    };
    if !buf.is_empty() {
        solver.partial_fit(&DMatrix::from_row_slice(buf.len() / dim, dim, &buf))?;
    }
    solver.finish()
}

/// Flips each row so its largest-magnitude entry is positive (first index on
/// ties). Idempotent.
pub fn stabilize_signs(basis: &PcaBasis) -> Result<PcaBasis> {
    let mut out = basis.clone();
    for (i, mut row) in out.components.axis_iter_mut(Axis(0)).enumerate() {
        let mut best = 0usize;
        let mut best_abs = 0f32;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = j;
            }
        }
        if best_abs == 0.0 {
            return Err(Error::numerical(format!("principal direction {i} is a zero row")));
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    Ok(out)
}

/// Features projected onto the basis, `[T, h, w, k_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGrid {
    pub data: Array4<f32>,
}

impl ProjectedGrid {
    pub fn channels(&self) -> usize {
        self.data.dim().3
    }
}

/// `out[..., j] = components_j . (feat - mean)`.
pub fn project(grid: &FeatureGrid, basis: &PcaBasis) -> Result<ProjectedGrid> {
    let (t, h, w, c) = grid.data.dim();
    if c != basis.dim() {
        return Err(Error::data(format!(
            "feature grid has C = {c} but the basis expects {}",
            basis.dim()
        )));
    }
    let rows = grid
        .data
        .to_shape((t * h * w, c))
        .map_err(|e| Error::data(e.to_string()))?;
    let centered = &rows - &basis.mean.view().insert_axis(Axis(0));
    let proj = centered.dot(&basis.components.t());
    let data = proj
        .into_shape_with_order((t, h, w, basis.k_max()))
        .map_err(|e| Error::data(e.to_string()))?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("projection produced non-finite values"));
    }
    Ok(ProjectedGrid { data })
}

/// Maps projected channels back to feature space using the first `k` rows.
pub fn reconstruct(proj: &ProjectedGrid, basis: &PcaBasis, k: usize) -> Result<Array4<f32>> {
    let (t, h, w, km) = proj.data.dim();
    if km != basis.k_max() || k == 0 || k > km {
        return Err(Error::data(format!("cannot reconstruct with k = {k} from {km} channels")));
    }
    let rows = proj
        .data
        .to_shape((t * h * w, km))
        .map_err(|e| Error::data(e.to_string()))?;
    let rec = rows
        .slice(ndarray::s![.., ..k])
        .dot(&basis.components.slice(ndarray::s![..k, ..]))
        + &basis.mean.view().insert_axis(Axis(0));
    rec.into_shape_with_order((t, h, w, basis.dim()))
        .map_err(|e| Error::data(e.to_string()))
}

/// Divides each channel by `sqrt(eigenvalue + eps)`.
pub fn whiten(proj: &ProjectedGrid, basis: &PcaBasis) -> Result<ProjectedGrid> {
    if proj.channels() != basis.k_max() {
        return Err(Error::data("whitening: channel count does not match basis"));
    }
    let scale: Vec<f32> = basis
        .eigenvalues
        .iter()
        .map(|&e| 1.0 / (e.max(0.0) + WHITEN_EPS).sqrt())
        .collect();
    let mut data = proj.data.clone();
    for mut lane in data.lanes_mut(Axis(3)) {
        for (v, s) in lane.iter_mut().zip(&scale) {
            *v *= s;
        }
    }
    Ok(ProjectedGrid { data })
}

/// Prefix-of-ones mask: channel `i` (0-based) is active iff `i < k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMask {
    k: usize,
    len: usize,
}

impl ChannelMask {
    pub fn new(k: usize, len: usize) -> Result<Self> {
        if k == 0 || k > len {
            return Err(Error::config(format!(
                "active channel count k = {k} outside valid range [1, {len}]"
            )));
        }
        Ok(Self { k, len })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits(&self) -> Vec<f32> {
        (0..self.len).map(|i| if i < self.k { 1.0 } else { 0.0 }).collect()
    }
}

/// Candidate active-channel counts with sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TailDropPolicy {
    candidates: Vec<usize>,
    weights: Vec<f64>,
}

impl TailDropPolicy {
    pub fn uniform(candidates: Vec<usize>) -> Result<Self> {
        let weights = vec![1.0; candidates.len()];
        Self::new(candidates, weights)
    }

    pub fn new(candidates: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::config("tail-drop candidate set is empty"));
        }
        if candidates.iter().any(|&k| k == 0) {
            return Err(Error::config("tail-drop candidates must be >= 1"));
        }
        if candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("tail-drop candidates must be strictly increasing"));
        }
        if weights.len() != candidates.len() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("tail-drop weights must be non-negative, one per candidate"));
        }
        Ok(Self {
            candidates,
            weights,
        })
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn k_max(&self) -> usize {
        *self.candidates.last().expect("non-empty")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelMask {
        let dist = WeightedIndex::new(&self.weights).expect("validated weights");
        let k = self.candidates[dist.sample(rng)];
        ChannelMask::new(k, self.k_max()).expect("candidate within range")
    }
}

/// Zeroes channels past `k`; the shape is preserved.
pub fn apply_mask(proj: &ProjectedGrid, mask: &ChannelMask) -> Result<ProjectedGrid> {
    if proj.channels() != mask.len() {
        return Err(Error::data(format!(
            "mask length {} does not match {} projected channels",
            mask.len(),
            proj.channels()
        )));
    }
    let mut data = proj.data.clone();
    let k = mask.k();
    for mut lane in data.lanes_mut(Axis(3)) {
        for v in lane.iter_mut().skip(k) {
            *v = 0.0;
        }
    }
    Ok(ProjectedGrid { data })
}

const BASIS_MAGIC: &[u8; 4] = b"PCAB";
const BASIS_VERSION: u32 = 1;
pub const BASIS_HEADER_LEN: usize = 24;

pub fn basis_file_size(dim: usize, k_max: usize) -> usize {
    BASIS_HEADER_LEN + 4 * (dim + k_max * dim + k_max)
}

/// `PCAB`, version u32, C u32, k_m u32, n_fitted u64, then little-endian
/// float32 mean `[C]`, components `[k_m * C]`, eigenvalues `[k_m]`.
pub fn basis_to_bytes(basis: &PcaBasis) -> Vec<u8> {
    let mut out = Vec::with_capacity(basis_file_size(basis.dim(), basis.k_max()));
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    out.extend_from_slice(&(basis.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(basis.k_max() as u32).to_le_bytes());
    out.extend_from_slice(&basis.n_fitted.to_le_bytes());
    for v in basis
        .mean
        .iter()
        .chain(basis.components.iter())
        .chain(basis.eigenvalues.iter())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_basis(basis: &PcaBasis, path: &Path) -> Result<()> {
    crate::dataset::write_atomic(path, &basis_to_bytes(basis))
}

pub fn load_basis(path: &Path) -> Result<PcaBasis> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < BASIS_HEADER_LEN {
        return Err(Error::format(path, "truncated PCA basis header"));
    }
    if &bytes[..4] != BASIS_MAGIC {
        return Err(Error::format(path, "bad magic, not a PCA basis file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BASIS_VERSION {
        return Err(Error::format(path, format!("unsupported PCA basis version {version}")));
    }
    let dim = u32_at(8) as usize;
    let k_max = u32_at(12) as usize;
    let n_fitted = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if bytes.len() != basis_file_size(dim, k_max) {
        return Err(Error::format(
            path,
            format!(
                "truncated PCA basis: {} bytes, expected {}",
                bytes.len(),
                basis_file_size(dim, k_max)
            ),
        ));
    }
    let floats: Vec<f32> = bytes[BASIS_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mean = Array1::from(floats[..dim].to_vec());
    let components = Array2::from_shape_vec((k_max, dim), floats[dim..dim + k_max * dim].to_vec())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let eigenvalues = Array1::from(floats[dim + k_max * dim..].to_vec());
    Ok(PcaBasis {
        mean,
        components,
        eigenvalues,
        n_fitted,
    })
}

/// Hex SHA-256 of the serialised basis.
pub fn basis_hash(basis: &PcaBasis) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(basis_to_bytes(basis)))
}
