use candle_core::{DType, Var};
use featbridge::aligner::AlignerConfig;
use featbridge::dataset::StoredClip;
use featbridge::dit::{standard_normal, DitConfig, LATENT_DIM};
use featbridge::infer::Translator;
use featbridge::model::{Model, ModelConfig};
use featbridge::pca::{fit_incremental, TailDropPolicy};
use featbridge::scene::{generate_clip, SceneSpec};
use featbridge::train::{prepare_clips, pretrain_denoiser, run_training, PreparedClip, TrainConfig, TrainState};
use featbridge::vfm::{extract_features, ToyVfm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        aligner: AlignerConfig {
            scale: 2,
            in_channels: 8,
            hidden: 8,
            out_channels: 16,
            temporal_ratio: 4,
            temporal_kernel: 5,
        },
        dit: DitConfig {
            depth: 4,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 16,
        },
        interval: 2,
    }
}

struct Setup {
    clips: Vec<StoredClip>,
    data: Vec<PreparedClip>,
    vfm: ToyVfm,
    basis: featbridge::pca::PcaBasis,
}

fn setup() -> Setup {
    let clips: Vec<StoredClip> = (0..2)
        .map(|i| {
            let spec = SceneSpec::new(i, 2, 9, 64, 64);
            let p = generate_clip(&spec).unwrap();
            StoredClip {
                id: format!("c{i}"),
                spec,
                real: p.real,
                sim: p.sim,
                masks: p.masks,
            }
        })
        .collect();
    let vfm = ToyVfm::new(16, 3);
    let g = extract_features(&clips[0].real.slice_frames(0, 1).unwrap(), &vfm, 2, 16).unwrap();
    let rows: Vec<Vec<f32>> = g.data.to_shape((64, 16)).unwrap().rows().into_iter().map(|r| r.to_vec()).collect();
    let basis = fit_incremental(rows, 8, 64).unwrap();
    let data = prepare_clips(&clips, &vfm, 2, &basis, true).unwrap();
    Setup { clips, data, vfm, basis }
}

fn train_config(steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        lr,
        batch: 1,
        chunk_frames: 5,
        policy: TailDropPolicy::uniform(vec![2, 4, 8]).unwrap(),
        seed: 7,
        checkpoint_every: 0,
    }
}

fn losses(model: &Model, data: &[PreparedClip], tc: &TrainConfig) -> Vec<u64> {
    let mut out = Vec::new();
    run_training(model, data, tc, TrainState::new(tc.lr), None, |r| out.push(r.loss.to_bits())).unwrap();
    out
}

#[test]
fn identical_runs_give_identical_losses() {
    let s = setup();
    let tc = train_config(50, 1e-3);
    let a = losses(&Model::new(small_config(), 1, DType::F32).unwrap(), &s.data, &tc);
    let b = losses(&Model::new(small_config(), 1, DType::F32).unwrap(), &s.data, &tc);
    assert_eq!(a.len(), 50);
    assert_eq!(a, b);
}

#[test]
fn zero_lr_changes_nothing() {
    let s = setup();
    let model = Model::new(small_config(), 2, DType::F32).unwrap();
    let before = model.params.hash("").unwrap();
    let l = losses(&model, &s.data, &train_config(3, 0.0));
    assert!(l.iter().all(|b| f64::from_bits(*b).is_finite()));
    assert_eq!(model.params.hash("").unwrap(), before);
}

#[test]
fn output_depends_on_condition_after_one_step() {
    let s = setup();
    let model = Model::new(small_config(), 3, DType::F32).unwrap();
    pretrain_denoiser(&model, &s.data, 20, 1e-3, 5, 3).unwrap();
    run_training(&model, &s.data, &train_config(1, 1e-3), TrainState::new(1e-3), None, |_| {}).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = standard_normal(&mut rng, &[2, 4, 4, LATENT_DIM], DType::F32).unwrap();
    let cond = Var::from_tensor(&standard_normal(&mut rng, &[2, 4, 4, 16], DType::F32).unwrap()).unwrap();
    let out = model.predict(&z, 0.5, Some(cond.as_tensor())).unwrap();
    let grads = out.sqr().unwrap().sum_all().unwrap().backward().unwrap();
    let g = grads.get(cond.as_tensor()).unwrap();
    let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
    assert!(norm > 0.0);
}

#[test]
fn translation_is_clamped_and_single_chunk_long_matches() {
    let s = setup();
    let model = Model::new(small_config(), 4, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, var) in model.params.with_prefix("denoiser.out.") {
        let noise = standard_normal(&mut rng, var.dims(), DType::F32).unwrap();
        var.set(&(noise * 0.5).unwrap()).unwrap();
        assert!(!name.is_empty());
    }
    let tr = Translator {
        model: &model,
        backend: &s.vfm,
        basis: &s.basis,
        whiten: true,
    };
    let sim = s.clips[0].sim.slice_frames(0, 5).unwrap();
    let a = tr.translate(&sim, 4, 3, 9).unwrap();
    assert!(a.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    let b = tr.translate_long(&sim, 5, 4, 3, 9).unwrap();
    assert_eq!(a.frames, b.frames);
    assert!(tr.translate(&sim, 9, 3, 9).is_err());
}
