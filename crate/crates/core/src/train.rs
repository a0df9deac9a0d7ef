//! Denoiser pretraining and control training (branch + aligner, denoiser
//! frozen) with tail drop, logging and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use log::info;
use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::array_to_tensor;
use crate::dataset::StoredClip;
use crate::dit::{encode_latent, flow_loss, standard_normal, training_loss};
use crate::error::{Error, Result};
use crate::model::{Model, DENOISER};
use crate::pca::{apply_mask, project, whiten, ChannelMask, PcaBasis, ProjectedGrid, TailDropPolicy};
use crate::vfm::{extract_features, VfmBackend};
use crate::video::VideoClip;

/// Adam with `(beta1, beta2)` moments and no weight decay; state is keyed by
/// parameter name so it can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params {
            // Detached so optimizer state never holds on to the autograd graph.
            let Some(g) = grads.get(var.as_tensor()).map(|g| g.detach()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            if self.lr != 0.0 {
                let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
                let delta = (((&m / bc1)? / denom)? * self.lr)?;
                var.set(&(var.as_tensor().detach() - delta)?)?;
            }
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// A training clip with its latent and (optionally whitened) projected
/// features, both covering the full clip.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub clip: VideoClip,
    pub features: ProjectedGrid,
}

/// Upscale, encode, project and (optionally) whiten one clip.
pub fn condition_features(
    clip: &VideoClip,
    backend: &dyn VfmBackend,
    scale: usize,
    basis: &PcaBasis,
    whitened: bool,
) -> Result<ProjectedGrid> {
    let grid = extract_features(clip, backend, scale, basis.dim())?;
    let proj = project(&grid, basis)?;
    if whitened {
        whiten(&proj, basis)
    } else {
        Ok(proj)
    }
}

pub fn prepare_clips(
    clips: &[StoredClip],
    backend: &dyn VfmBackend,
    scale: usize,
    basis: &PcaBasis,
    whitened: bool,
) -> Result<Vec<PreparedClip>> {
    clips
        .iter()
        .map(|c| {
            Ok(PreparedClip {
                id: c.id.clone(),
                features: condition_features(&c.real, backend, scale, basis, whitened)?,
                clip: c.real.clone(),
            })
        })
        .collect()
}

/// Start index of a uniformly placed window of `len` frames.
pub fn random_crop_start<R: Rng + ?Sized>(clip_len: usize, len: usize, rng: &mut R) -> Result<usize> {
    if len == 0 || clip_len < len {
        return Err(Error::data(format!(
            "clip has {clip_len} frames, cannot crop a chunk of {len}"
        )));
    }
    Ok(rng.random_range(0..=clip_len - len))
}

pub fn random_crop_chunk<R: Rng + ?Sized>(clip: &VideoClip, len: usize, rng: &mut R) -> Result<VideoClip> {
    let start = random_crop_start(clip.num_frames(), len, rng)?;
    clip.slice_frames(start, len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    pub chunk_frames: usize,
    pub policy: TailDropPolicy,
    pub seed: u64,
    pub checkpoint_every: u64,
}

/// Generator for step `step`: independent of everything that happened
/// before, so a resumed run draws the same numbers.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One sampled training example.
#[derive(Debug, Clone)]
pub struct Draw {
    pub clip: usize,
    pub start: usize,
    pub mask: ChannelMask,
}

fn chunk_tensors(
    data: &PreparedClip,
    start: usize,
    len: usize,
    mask: Option<&ChannelMask>,
    dtype: DType,
) -> Result<(Tensor, Option<Tensor>)> {
    let clip = data.clip.slice_frames(start, len)?;
    let z0 = array_to_tensor(&encode_latent(&clip)?, dtype)?;
    let cond = match mask {
        Some(mask) => {
            let feats = ProjectedGrid {
                data: data.features.data.slice(s![start..start + len, .., .., ..]).to_owned(),
            };
            Some(array_to_tensor(&apply_mask(&feats, mask)?.data, dtype)?)
        }
        None => None,
    };
    Ok((z0, cond))
}

fn check_finite(loss: f64, what: &str, clip_id: &str, step: u64, dump_dir: Option<&Path>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let msg = format!("non-finite {what} loss at step {step} on clip {clip_id}");
    if let Some(dir) = dump_dir {
        let path = dir.join(format!("nan_step{step:06}.txt"));
        let _ = fs::create_dir_all(dir);
        let _ = fs::write(&path, format!("step\t{step}\nclip\t{clip_id}\nloss\t{loss}\n"));
        return Err(Error::numerical(format!("{msg} (diagnostics in {})", path.display())));
    }
    Err(Error::numerical(msg))
}

/// Unconditional training of the denoiser, which is frozen afterwards. The
/// velocity error is scaled by `t`, i.e. measured on the implied clean
/// latent, so that large `t` is not drowned out by near-clean samples. The
/// branch is re-copied from the result.
pub fn pretrain_denoiser(model: &Model, data: &[PreparedClip], steps: u64, lr: f64, chunk: usize, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::data("no training clips"));
    }
    let params = model.group(DENOISER);
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let mut rng = step_rng(seed ^ 0x0de0_15e5, step);
        let i = rng.random_range(0..data.len());
        let start = random_crop_start(data[i].clip.num_frames(), chunk, &mut rng)?;
        let (z0, _) = chunk_tensors(&data[i], start, chunk, None, model.dtype())?;
        let t: f64 = rng.random_range(0.0..1.0);
        let eps = standard_normal(&mut rng, z0.dims(), z0.dtype())?;
        let loss = (flow_loss(&z0, &eps, t, |z, t| model.predict(z, t, None))? * (t * t))?;
        let value = crate::nn::scalar(&loss)?;
        check_finite(value, "pretraining", &data[i].id, step, None)?;
        adam.update(&params, &loss.backward()?)?;
        losses.push(value);
        if step % 100 == 0 {
            info!("pretrain step {step} loss {value:.5}");
        }
    }
    model.init_branch()?;
    Ok(losses)
}

/// Mutable training state: model parameters live in the model itself.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            adam: Adam::new(lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub k: usize,
}

/// Draws the examples of step `step` (one per batch element).
pub fn draw_step(cfg: &TrainConfig, data: &[PreparedClip], step: u64) -> Result<(Vec<Draw>, ChaCha8Rng)> {
    let mut rng = step_rng(cfg.seed, step);
    let mut draws = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch.max(1) {
        let clip = rng.random_range(0..data.len());
        let start = random_crop_start(data[clip].clip.num_frames(), cfg.chunk_frames, &mut rng)?;
        let mask = cfg.policy.sample(&mut rng);
        draws.push(Draw { clip, start, mask });
    }
    Ok((draws, rng))
}

/// Forward/backward on one batch and an optimizer update of branch and
/// aligner. Returns the batch-mean loss and the first sampled `k`.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &[PreparedClip],
    dump_dir: Option<&Path>,
) -> Result<StepRecord> {
    if data.is_empty() {
        return Err(Error::data("no training clips"));
    }
    let step = state.step + 1;
    let (draws, mut rng) = draw_step(cfg, data, step)?;
    let mut total: Option<Tensor> = None;
    for d in &draws {
        let (z0, cond) = chunk_tensors(&data[d.clip], d.start, cfg.chunk_frames, Some(&d.mask), model.dtype())?;
        let cond = model.condition(&cond.expect("mask given"))?;
        let loss = training_loss(&z0, &mut rng, |z, t| model.predict(z, t, Some(&cond)))?;
        check_finite(crate::nn::scalar(&loss)?, "training", &data[d.clip].id, step, dump_dir)?;
        total = Some(match total {
            Some(t) => (t + loss)?,
            None => loss,
        });
    }
    let loss = (total.expect("batch >= 1") / draws.len() as f64)?;
    let value = crate::nn::scalar(&loss)?;
    let grads = loss.backward()?;
    state.adam.lr = cfg.lr;
    state.adam.update(&model.trainable(), &grads)?;
    state.step = step;
    Ok(StepRecord {
        step,
        loss: value,
        k: draws[0].mask.k(),
    })
}

/// Deterministic evaluation loss: every clip from frame 0, a fixed
/// stratified grid of `t`, fixed noise, averaged over the given `k` values.
pub fn probe_loss(model: &Model, data: &[PreparedClip], chunk: usize, ks: &[usize], seed: u64) -> Result<f64> {
    const T_GRID: usize = 8;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (ci, d) in data.iter().enumerate() {
        let k_max = d.features.channels();
        let (z0, _) = chunk_tensors(d, 0, chunk, None, model.dtype())?;
        let mut rng = step_rng(seed ^ 0x9e37_79b9, ci as u64);
        for &k in ks {
            let mask = ChannelMask::new(k, k_max)?;
            let (_, cond) = chunk_tensors(d, 0, chunk, Some(&mask), model.dtype())?;
            let cond = model.condition(&cond.expect("mask given"))?.detach();
            for i in 0..T_GRID {
                let t = (i as f64 + 0.5) / T_GRID as f64;
                let eps = standard_normal(&mut rng, z0.dims(), model.dtype())?;
                let l = flow_loss(&z0, &eps, t, |z, t| model.predict(z, t, Some(&cond)))?;
                sum += crate::nn::scalar(&l)?;
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

/// Appends `step\tloss\tk` lines.
pub fn append_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}\t{}\t{}", r.step, r.loss, r.k).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Steps at which checkpoints are written: every `every` steps and the last.
pub fn checkpoint_schedule(steps: u64, every: u64) -> Vec<u64> {
    let mut out: Vec<u64> = if every == 0 {
        Vec::new()
    } else {
        (1..=steps / every).map(|i| i * every).collect()
    };
    if steps > 0 && out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

/// Seeded whole-clip latent for sampling-noise draws.
pub fn latent_noise(seed: u64, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(&mut rng, dims, dtype)
}

/// Full-clip projected features (for inference) as a plain array.
pub fn masked_features(features: &ProjectedGrid, k: usize) -> Result<Array4<f32>> {
    let mask = ChannelMask::new(k, features.channels())?;
    Ok(apply_mask(features, &mask)?.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert!(random_crop_start(200, 93, &mut rng).unwrap() <= 107);
        }
        assert_eq!(random_crop_start(17, 17, &mut rng).unwrap(), 0);
        assert!(random_crop_start(16, 17, &mut rng).is_err());
        let a = random_crop_start(200, 93, &mut step_rng(5, 9)).unwrap();
        let b = random_crop_start(200, 93, &mut step_rng(5, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule() {
        assert_eq!(checkpoint_schedule(250, 100), vec![100, 200, 250]);
        assert_eq!(checkpoint_schedule(200, 100), vec![100, 200]);
        assert_eq!(checkpoint_schedule(5, 0), vec![5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &candle_core::Device::Cpu).unwrap()).unwrap();
        let loss = (var.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1);
        adam.update(&[("p".into(), var.clone())], &grads).unwrap();
        let v = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_values() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &candle_core::Device::Cpu).unwrap()).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        let mut adam = Adam::new(0.0);
        adam.update(&[("p".into(), var.clone())], &loss.backward().unwrap()).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }
}

/// Where a training run writes its log and checkpoints, plus the metadata
/// every checkpoint carries.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub meta: Vec<(String, String)>,
    pub config_text: String,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.txt")
    }
}

/// Runs control training from `state.step + 1` to `cfg.steps`, appending to
/// the log and writing checkpoints on schedule. Returns the final state.
pub fn run_training(
    model: &Model,
    data: &[PreparedClip],
    cfg: &TrainConfig,
    mut state: TrainState,
    out: Option<&RunOutput>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainState> {
    if data.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(Error::config(format!("train.lr must be >= 0, got {}", cfg.lr)));
    }
    let schedule = checkpoint_schedule(cfg.steps, cfg.checkpoint_every);
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    while state.step < cfg.steps {
        let rec = train_step(model, &mut state, cfg, data, out.map(|o| o.dir.as_path()))?;
        on_step(&rec);
        if let Some(o) = out {
            append_log(&o.log_path(), &[rec])?;
            if schedule.contains(&rec.step) {
                let meta: Vec<(&str, String)> = o.meta.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
                crate::checkpoint::Checkpoint::capture(model, &state, &meta, &o.config_text)?
                    .save(&checkpoint_path(&o.dir, rec.step))?;
                info!("checkpoint at step {}", rec.step);
            }
        }
        if rec.step % 100 == 0 {
            info!("step {} loss {:.5} k {}", rec.step, rec.loss, rec.k);
        }
    }
    Ok(state)
}
