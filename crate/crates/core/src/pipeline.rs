//! End-to-end commands over a [`Config`]: dataset generation, PCA fitting,
//! training, inference, evaluation and shape reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::info;
use ndarray::ArrayView3;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::dataset::{load_clip, load_dataset, read_frames, write_atomic, write_dataset, write_frames, Manifest, REAL_PREFIX};
use crate::error::{Error, Result};
use crate::infer::{dry_run_shapes, PipelineDims, ShapeReport, Translator};
use crate::metrics::{
    clip_real_score, embed_patches, fid, kid, mask_consistency, prototypes, semantics_aware_pairs, warp_ssim_window,
    ToyEmbedder,
};
use crate::model::Model;
use crate::pca::{basis_hash, fit_incremental, load_basis, sample_fitting_frames, save_basis, stabilize_signs, PcaBasis};
use crate::scene::generate_clip;
use crate::train::{prepare_clips, pretrain_denoiser, run_training, RunOutput, TrainState};
use crate::vfm::{extract_features, ToyVfm};
use crate::video::VideoClip;

pub const FINAL_CHECKPOINT: &str = "final.bin";

pub fn backend(cfg: &Config) -> ToyVfm {
    ToyVfm::new(cfg.vfm.channels, cfg.vfm.seed)
}

pub fn gen(cfg: &Config) -> Result<Manifest> {
    write_dataset(&cfg.scene_specs(), &cfg.root())
}

/// Fits the basis on one sampled frame per clip and saves it.
pub fn fit_pca(cfg: &Config) -> Result<PcaBasis> {
    let root = cfg.root();
    let manifest = Manifest::read(&root)?;
    let vfm = backend(cfg);
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (id, f) in sample_fitting_frames(&manifest, cfg.pca.seed)? {
        let clip = load_clip(&root, &id)?;
        let grid = extract_features(&clip.real.slice_frames(f, 1)?, &vfm, cfg.vfm.scale, cfg.vfm.channels)?;
        let c = grid.data.dim().3;
        let flat = grid
            .data
            .to_shape((grid.data.len() / c, c))
            .map_err(|e| Error::data(e.to_string()))?;
        rows.extend(flat.rows().into_iter().map(|r| r.to_vec()));
    }
    let basis = stabilize_signs(&fit_incremental(rows, cfg.pca.k_max, cfg.pca.batch)?)?;
    save_basis(&basis, &cfg.basis_path())?;
    info!("basis {} fitted on {} vectors", basis_hash(&basis), basis.n_fitted);
    Ok(basis)
}

pub fn train_dir(cfg: &Config) -> PathBuf {
    cfg.resolve(&cfg.train.out)
}

/// Pretrains the denoiser, then trains the control branch and aligner.
/// Resumes from `resume` when given (pretraining is skipped; the checkpoint
/// holds the denoiser).
pub fn train(cfg: &Config, resume: Option<&Path>, meta: &[(String, String)]) -> Result<PathBuf> {
    let basis_path = cfg.basis_path();
    let basis = load_basis(&basis_path)?;
    if basis.k_max() != cfg.pca.k_max || basis.dim() != cfg.vfm.channels {
        return Err(Error::config(format!(
            "basis {} has k_m = {}, C = {}; config expects {} and {}",
            basis_path.display(),
            basis.k_max(),
            basis.dim(),
            cfg.pca.k_max,
            cfg.vfm.channels
        )));
    }
    let clips = load_dataset(&cfg.root())?;
    let vfm = backend(cfg);
    let data = prepare_clips(&clips, &vfm, cfg.vfm.scale, &basis, cfg.pca.whiten)?;
    let model = Model::new(cfg.model_config()?, cfg.train.seed, DType::F32)?;
    let tc = cfg.train_config()?;
    let state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            check_basis(&ck, &basis, p)?;
            ck.restore(&model)?
        }
        None => {
            let losses = pretrain_denoiser(
                &model,
                &data,
                cfg.train.pretrain_steps,
                cfg.train.pretrain_lr,
                cfg.train.chunk_frames,
                cfg.train.seed,
            )?;
            if let Some(l) = losses.last() {
                info!("denoiser pretraining done, last loss {l:.5}");
            }
            model.init_branch()?;
            TrainState::new(cfg.train.lr)
        }
    };
    let mut all_meta = meta.to_vec();
    all_meta.push(("basis_path".into(), basis_path.display().to_string()));
    all_meta.push(("basis_hash".into(), basis_hash(&basis)));
    let out = RunOutput {
        dir: train_dir(cfg),
        meta: all_meta,
        config_text: cfg.to_text(),
    };
    let state = run_training(&model, &data, &tc, state, Some(&out), |_| {})?;
    let meta: Vec<(&str, String)> = out.meta.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let path = out.dir.join(FINAL_CHECKPOINT);
    Checkpoint::capture(&model, &state, &meta, &out.config_text)?.save(&path)?;
    Ok(path)
}

fn check_basis(ck: &Checkpoint, basis: &PcaBasis, path: &Path) -> Result<()> {
    match ck.meta.get("basis_hash") {
        Some(h) if *h != basis_hash(basis) => Err(Error::data(format!(
            "{}: checkpoint was trained with basis {h}, loaded basis is {}",
            path.display(),
            basis_hash(basis)
        ))),
        _ => Ok(()),
    }
}

/// Loads a trained model and its basis.
pub fn load_trained(cfg: &Config, ckpt: &Path) -> Result<(Model, PcaBasis)> {
    let basis = load_basis(&cfg.basis_path())?;
    let ck = Checkpoint::load(ckpt)?;
    check_basis(&ck, &basis, ckpt)?;
    let model = Model::new(cfg.model_config()?, cfg.train.seed, DType::F32)?;
    ck.restore(&model)?;
    Ok((model, basis))
}

/// Translates the sim clip of every dataset entry into `out`.
pub fn infer(cfg: &Config, k: usize, seed: u64, long: bool, out: &Path) -> Result<Manifest> {
    if k == 0 || k > cfg.pca.k_max {
        return Err(Error::config(format!("k = {k} is outside the valid range [1, {}]", cfg.pca.k_max)));
    }
    let ckpt = cfg.resolve(&cfg.infer.checkpoint);
    let (model, basis) = load_trained(cfg, &ckpt)?;
    let vfm = backend(cfg);
    let tr = Translator {
        model: &model,
        backend: &vfm,
        basis: &basis,
        whiten: cfg.pca.whiten,
    };
    let root = cfg.root();
    let manifest = Manifest::read(&root)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for e in &manifest.entries {
        let clip = load_clip(&root, &e.clip_id)?;
        let gen = if long {
            tr.translate_long(&clip.sim, cfg.infer.chunk_frames, k, cfg.infer.steps, seed)?
        } else {
            tr.translate(&clip.sim, k, cfg.infer.steps, seed)?
        };
        let dir = out.join(&e.clip_id);
        fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        write_frames(&dir, REAL_PREFIX, &gen)?;
        info!("translated {}", e.clip_id);
    }
    write_atomic(&out.join(crate::dataset::MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Scores of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clip_real: f64,
    pub warp_ssim: f64,
    pub sfid: f64,
    pub skid: f64,
    pub miou: f64,
    pub per_class: BTreeMap<u8, f64>,
}

impl EvalReport {
    /// Tab-separated `metric\tvalue` lines plus a per-class IoU block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("clip_real", self.clip_real),
            ("warp_ssim", self.warp_ssim),
            ("sfid", self.sfid),
            ("skid", self.skid),
            ("miou", self.miou),
        ] {
            let _ = writeln!(out, "{k}\t{v:.6}");
        }
        let items: Vec<String> = self.per_class.iter().map(|(c, v)| format!("\"{c}\": {v:.6}")).collect();
        let _ = writeln!(out, "per_class_iou\t{{{}}}", items.join(", "));
        out
    }
}

fn all_frames<'a>(clips: impl Iterator<Item = &'a VideoClip>) -> Vec<ArrayView3<'a, f32>> {
    clips.flat_map(|c| (0..c.num_frames()).map(move |f| c.frame(f))).collect()
}

/// Scores generated clips in `gen_dir` against the dataset in `ref_dir`.
pub fn eval(cfg: &Config, gen_dir: &Path, ref_dir: &Path) -> Result<EvalReport> {
    let refs = load_dataset(ref_dir)?;
    let gens: Vec<VideoClip> = refs
        .iter()
        .map(|c| read_frames(&gen_dir.join(&c.id), REAL_PREFIX))
        .collect::<Result<_>>()?;
    let embedder = ToyEmbedder::default();
    let real_frames = all_frames(refs.iter().map(|c| &c.real));
    let sim_frames = all_frames(refs.iter().map(|c| &c.sim));
    let gen_frames = all_frames(gens.iter());
    if gen_frames.len() != sim_frames.len() {
        return Err(Error::data("generated clips do not match the reference frame counts"));
    }
    let (t_p, t_n) = prototypes(&real_frames, &sim_frames, &embedder)?;
    let mut clip_real = 0.0;
    let mut warp = 0.0;
    let mut class_sum: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    let mut miou = 0.0;
    for (c, g) in refs.iter().zip(&gens) {
        if g.dims() != c.sim.dims() {
            return Err(Error::data(format!(
                "clip {}: generated dims {:?} differ from reference {:?}",
                c.id,
                g.dims(),
                c.sim.dims()
            )));
        }
        clip_real += clip_real_score(g, &t_p, &t_n, &embedder)?;
        let flow = generate_clip(&c.spec)?.flow;
        warp += warp_ssim_window(g, &flow, cfg.eval.window)?;
        let m = mask_consistency(g, &c.masks)?;
        miou += m.miou;
        for (k, v) in m.per_class {
            let e = class_sum.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let n = refs.len() as f64;
    let pairs = semantics_aware_pairs(&sim_frames, &real_frames, &embedder, cfg.eval.patch, cfg.eval.pairs, cfg.eval.seed)?;
    let gen_locs: Vec<_> = pairs.pairs.iter().map(|&(i, _)| pairs.cg[i]).collect();
    let real_locs: Vec<_> = pairs.pairs.iter().map(|&(_, j)| pairs.real[j]).collect();
    let fa = embed_patches(&gen_frames, &gen_locs, pairs.patch, &embedder)?;
    let fb = embed_patches(&real_frames, &real_locs, pairs.patch, &embedder)?;
    Ok(EvalReport {
        clip_real: clip_real / n,
        warp_ssim: warp / n,
        sfid: fid(&fa, &fb)?,
        skid: kid(&fa, &fb)?,
        miou: miou / n,
        per_class: class_sum.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
    })
}

pub fn shapes(cfg: &Config) -> Result<ShapeReport> {
    let m = cfg.model_config()?;
    dry_run_shapes(&PipelineDims {
        frames: cfg.data.frames,
        height: cfg.data.height,
        width: cfg.data.width,
        channels: cfg.vfm.channels,
        k_max: cfg.pca.k_max,
        aligner: m.aligner,
    })
}
