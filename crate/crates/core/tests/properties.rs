use candle_core::{DType, Device, Tensor};
use featbridge::aligner::{aligned_shape, Aligner, AlignerConfig};
use featbridge::config::Config;
use featbridge::dit::{decode_latent, encode_latent, euler_sample, inject, standard_normal, Dit, DitConfig, LATENT_DIM};
use featbridge::metrics::{clip_real, fid, kid, normalize, warp_ssim};
use featbridge::nn::{Builder, ParamMap};
use featbridge::pca::{apply_mask, fit_incremental, ChannelMask, ProjectedGrid, TailDropPolicy};
use featbridge::scene::{generate_clip, SceneSpec};
use featbridge::train::{checkpoint_schedule, step_rng};
use featbridge::vfm::{extract_features, ToyVfm};
use featbridge::VideoClip;
use ndarray::{s, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn random_clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = Array4::from_shape_fn((t, h, w, 3), |_| rand::Rng::random::<f32>(&mut rng));
    VideoClip::new(frames, 8.0).unwrap()
}

proptest! {
    #![proptest_config(cases(6))]

    #[test]
    fn scene_values_labels_and_silhouettes(seed in 0u64..1000, objects in 1usize..5, t in 5usize..9) {
        let spec = SceneSpec::new(seed, objects, t, 64, 64);
        let p = generate_clip(&spec).unwrap();
        prop_assert!(p.sim.frames.iter().chain(p.real.frames.iter()).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(p.masks.iter().all(|&m| (m as usize) <= objects));
        prop_assert_eq!(generate_clip(&spec).unwrap().real.frames, p.real.frames);
    }

    #[test]
    fn feature_shape_law(t in 1usize..3, hb in 1usize..3, wb in 1usize..3, s_idx in 0usize..3, c in 1usize..9) {
        let scale = [1usize, 2, 4][s_idx];
        let clip = random_clip(t, 16 * hb, 16 * wb, 3);
        let g = extract_features(&clip, &ToyVfm::new(c, 1), scale, c).unwrap();
        prop_assert_eq!(g.data.dim(), (t, hb * scale, wb * scale, c));
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn aligner_shape_law(
        s_idx in 0usize..3, c_in in 1usize..6, hidden_m in 1usize..3, out in 1usize..6,
        r in 1usize..5, extra in 0usize..3, n in 0usize..3, gh in 1usize..3, gw in 1usize..3,
    ) {
        let scale = [1usize, 2, 4][s_idx];
        let cfg = AlignerConfig { scale, in_channels: c_in, hidden: 8 * hidden_m, out_channels: out, temporal_ratio: r, temporal_kernel: r + extra };
        let t = 1 + r * n;
        let input = [t, gh * scale, gw * scale, c_in];
        let (aligned, cond) = aligned_shape(&cfg, input).unwrap();
        prop_assert_eq!(aligned, [t, gh, gw, 8 * hidden_m]);
        prop_assert_eq!(cond, [1 + n, gh, gw, out]);
        let mut params = ParamMap::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Aligner::new(&mut Builder::new(&mut params, &mut rng), cfg).unwrap();
        let x = Tensor::zeros(input.to_vec(), DType::F32, &Device::Cpu).unwrap();
        let got = a.spatial_align(&x).unwrap();
        prop_assert_eq!(got.dims(), &aligned[..]);
        let got = a.forward(&x).unwrap();
        prop_assert_eq!(got.dims(), &cond[..]);
    }

    #[test]
    fn spatial_align_is_framewise(f in 0usize..5, seed in 0u64..100) {
        let cfg = AlignerConfig { scale: 2, in_channels: 3, hidden: 8, out_channels: 4, temporal_ratio: 4, temporal_kernel: 5 };
        let mut params = ParamMap::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Aligner::new(&mut Builder::new(&mut params, &mut rng), cfg).unwrap();
        let x = standard_normal(&mut rng, &[5, 4, 4, 3], DType::F32).unwrap();
        let mut arr = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let per = 4 * 4 * 3;
        arr[f * per..(f + 1) * per].iter_mut().for_each(|v| *v = 0.0);
        let y = Tensor::from_vec(arr, (5, 4, 4, 3), &Device::Cpu).unwrap();
        let base = a.spatial_align(&x).unwrap();
        let moved = a.spatial_align(&y).unwrap();
        for t in 0..5 {
            let d = (base.get(t).unwrap() - moved.get(t).unwrap()).unwrap().abs().unwrap()
                .flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
            if t != f {
                prop_assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn latent_roundtrip_is_exact(n in 0usize..3, hb in 1usize..3, wb in 1usize..3, seed in 0u64..1000) {
        let clip = random_clip(1 + 4 * n, 16 * hb, 16 * wb, seed);
        let back = decode_latent(&encode_latent(&clip).unwrap(), clip.fps).unwrap();
        prop_assert!(back.frames.iter().zip(clip.frames.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn prefix_mask_and_k_monotonicity(k1 in 1usize..33, k2 in 1usize..33, seed in 0u64..100) {
        let (k1, k2) = (k1.min(k2), k1.max(k2));
        let bits = ChannelMask::new(k1, 32).unwrap().bits();
        let expect: Vec<f32> = (0..32).map(|i| if i < k1 { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(bits, expect);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((2, 2, 2, 32), |_| rand::Rng::random::<f32>(&mut rng) + 0.1);
        let proj = ProjectedGrid { data };
        let a = apply_mask(&proj, &ChannelMask::new(k1, 32).unwrap()).unwrap();
        let b = apply_mask(&proj, &ChannelMask::new(k2, 32).unwrap()).unwrap();
        let diff = &b.data - &a.data;
        prop_assert!(diff.slice(s![.., .., .., ..k1]).iter().all(|v| *v == 0.0));
        prop_assert!(diff.slice(s![.., .., .., k2..]).iter().all(|v| *v == 0.0));
        prop_assert!(diff.slice(s![.., .., .., k1..k2]).iter().all(|v| *v != 0.0));
    }

    #[test]
    fn clip_real_is_scale_invariant(c in 0.01f32..100.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || normalize(&[rand::Rng::random::<f32>(&mut rng) + 0.1, rand::Rng::random::<f32>(&mut rng) + 0.1, 0.3]).unwrap();
        let (x, tp, tn) = (unit(), unit(), unit());
        let scaled: Vec<f32> = x.iter().map(|v| v * c).collect();
        let a = clip_real(&x, &tp, &tn).unwrap();
        let b = clip_real(&normalize(&scaled).unwrap(), &tp, &tn).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn fid_and_kid_are_symmetric(seed in 0u64..1000, n in 3usize..20, m in 3usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |k: usize| -> Vec<Vec<f32>> {
            (0..k).map(|_| (0..3).map(|_| rand::Rng::random::<f32>(&mut rng)).collect()).collect()
        };
        let (a, b) = (rows(n), rows(m));
        prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((kid(&a, &b).unwrap() - kid(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert_eq!(kid(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn warp_ssim_in_range(seed in 0u64..1000, u in -3.0f32..3.0, v in -3.0f32..3.0) {
        let clip = random_clip(3, 16, 16, seed);
        let mut flow = Array4::zeros((2, 16, 16, 2));
        flow.slice_mut(s![.., .., .., 0]).fill(u);
        flow.slice_mut(s![.., .., .., 1]).fill(v);
        let w = warp_ssim(&clip, &flow).unwrap();
        prop_assert!((-100.0..=100.0).contains(&w));
    }

    #[test]
    fn config_round_trip(lr in 1e-7f64..1.0, k in 1usize..33, steps in 1u64..100_000, whiten: bool) {
        let text = format!("[data]\nroot = r\n[train]\nlr = {lr}\nsteps = {steps}\n[infer]\nk = {k}\n[pca]\nwhiten = {whiten}\n");
        let cfg = Config::parse(&text).unwrap();
        prop_assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn schedule_ends_at_final_step(steps in 1u64..2000, every in 0u64..300) {
        let s = checkpoint_schedule(steps, every);
        prop_assert_eq!(s.last().copied(), Some(steps));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        if every > 0 {
            prop_assert!(s.iter().all(|&x| x % every == 0 || x == steps));
            prop_assert_eq!(s.len() as u64, steps / every + u64::from(steps % every != 0));
        }
    }

    #[test]
    fn pca_components_orthonormal(seed in 0u64..1000, dim in 4usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..dim).map(|j| rand::Rng::random::<f32>(&mut rng) * (1.0 + j as f32)).collect())
            .collect();
        let b = fit_incremental(rows, dim / 2, 64).unwrap();
        prop_assert!(b.orthonormality_error() < 1e-5);
    }
}

#[test]
fn zero_residuals_leave_forward_unchanged() {
    let cfg = DitConfig { depth: 4, width: 8, heads: 2, mlp_ratio: 2, head_hidden: 8 };
    let mut params = ParamMap::new(DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dit = Dit::new(&mut Builder::new(&mut params, &mut rng), cfg).unwrap();
    for (_, v) in params.iter() {
        v.set(&(standard_normal(&mut rng, v.dims(), DType::F32).unwrap() * 0.1).unwrap()).unwrap();
    }
    let z = standard_normal(&mut rng, &[2, 2, 2, LATENT_DIM], DType::F32).unwrap();
    let zeros: Vec<Tensor> = (0..2).map(|_| Tensor::zeros((2, 4, 8), DType::F32, &Device::Cpu).unwrap()).collect();
    let a = dit.forward(&z, 0.3, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let b = dit.forward(&z, 0.3, Some((&zeros, 2))).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(a.iter().any(|v| *v != 0.0));
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let h = standard_normal(&mut rng, &[2, 4, 8], DType::F32).unwrap();
    let same = inject(&h, &zeros, 1, 2).unwrap();
    assert_eq!(same.flatten_all().unwrap().to_vec1::<f32>().unwrap(), h.flatten_all().unwrap().to_vec1::<f32>().unwrap());
}

#[test]
fn euler_converges_at_first_order() {
    // dz/dt = a z integrated from t = 1 to 0 has the exact solution z(1) e^{-a}.
    let a = 1.3f64;
    let eps = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
    let exact: Vec<f64> = eps.to_vec1::<f64>().unwrap().iter().map(|v| v * (-a).exp()).collect();
    let err = |steps: usize| {
        let z = euler_sample(&eps, steps, |z, _| Ok((z * a)?), |z, _| Ok(z)).unwrap();
        z.to_vec1::<f64>().unwrap().iter().zip(&exact).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let errs: Vec<f64> = [8usize, 16, 32, 64].iter().map(|&n| err(n)).collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 0.9, "order {order} from {errs:?}");
    }
}

#[test]
fn every_candidate_appears_in_1000_steps() {
    let policy = TailDropPolicy::uniform(vec![3, 8, 16, 32]).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for step in 1..=1000 {
        seen.insert(policy.sample(&mut step_rng(0, step)).k());
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![3, 8, 16, 32]);
}
