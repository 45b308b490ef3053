//! Library kernels against the scalar-loop references in `common`.

mod common;

use common::*;
use proteus_core::aml::{downsample_to_latent, motion_heatmap, weighted_loss, FlowField, MotionWeightMap};
use proteus_core::denoiser::inject_identity_residual;
use proteus_core::diffusion::{forward_diffuse as lib_diffuse, mse_noise_loss, NoiseSchedule};
use proteus_core::gradcheck::tiny_sample;
use proteus_core::mif::QFormer;
use proteus_core::model::{LossMode, ModelConfig, Prepared, ProteusModel};
use proteus_core::nn::{AdaLayerNorm, Attention, Ctx, ParamStore};
use proteus_core::{Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn assert_close<T: Scalar>(got: &[f64], want: &[f64], what: &str) {
    let err = max_abs_diff(got, want);
    let tol = tol::<T>(want);
    assert!(err <= tol, "{what} ({}): max error {err:.3e} > {tol:.3e}", T::DTYPE.name());
}

macro_rules! both {
    ($name:ident, $f32:ident, $f64:ident) => {
        #[test]
        fn $f32() {
            $name::<f32>();
        }
        #[test]
        fn $f64() {
            $name::<f64>();
        }
    };
}

fn cumulative_product<T: Scalar>() {
    for steps in [2, 50, 200, 1000] {
        let s = NoiseSchedule::linear(steps).unwrap();
        assert_close::<f64>(s.alpha_bar(), &alpha_bar(steps), "alpha_bar");
    }
}
both!(cumulative_product, cumulative_product_f32, cumulative_product_f64);

fn diffuse<T: Scalar>() {
    let s = NoiseSchedule::linear(200).unwrap();
    let ab = alpha_bar(200);
    let z0 = randn::<T>(&[2, 12, 2, 3], 1);
    let eps = randn::<T>(&[2, 12, 2, 3], 2);
    for t in [0, 17, 100, 199] {
        let got = lib_diffuse(&z0, t, &eps, &s).unwrap();
        let want = forward_diffuse(&z0.to_f64_vec(), &eps.to_f64_vec(), ab[t]);
        assert_close::<T>(&got.to_f64_vec(), &want, "forward_diffuse");
    }
    assert!(lib_diffuse(&z0, 200, &eps, &s).is_err());
}
both!(diffuse, diffuse_f32, diffuse_f64);

fn mse_loss<T: Scalar>() {
    let a = randn::<T>(&[3, 7], 3);
    let b = randn::<T>(&[3, 7], 4);
    let (per, mean) = mse_noise_loss(&a, &b).unwrap();
    let want = mse(&a.to_f64_vec(), &b.to_f64_vec());
    assert_close::<T>(&[mean.as_f64()], &[want], "mse");
    let per_want: Vec<f64> = a.to_f64_vec().iter().zip(b.to_f64_vec()).map(|(x, y)| (x - y).powi(2)).collect();
    assert_close::<T>(&per.to_f64_vec(), &per_want, "per-element mse");
}
both!(mse_loss, mse_loss_f32, mse_loss_f64);

fn attention_module<T: Scalar>() {
    let mut store = ParamStore::<T>::new();
    let attn = Attention::new(&mut store, &mut rng(5), "a", 8, 2);
    let (xq, xkv) = (randn::<T>(&[3, 8], 6), randn::<T>(&[5, 8], 7));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let out = attn.forward(&cx, cx.input(xq.clone()), cx.input(xkv.clone())).unwrap();
    let want = attention(&store, "a", &xq.to_f64_vec(), &xkv.to_f64_vec(), 3, 5, 8, 2);
    assert_close::<T>(&tape.value(out).to_f64_vec(), &want, "attention");
}
both!(attention_module, attention_f32, attention_f64);

fn ada_norm<T: Scalar>() {
    let mut store = ParamStore::<T>::new();
    let norm = AdaLayerNorm::new(&mut store, &mut rng(8), "n", 4, 6);
    store.perturb(0.3, &mut rng(9));
    let (x, c) = (randn::<T>(&[5, 6], 10), randn::<T>(&[1, 4], 11));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let out = norm.forward(&cx, cx.input(x.clone()), cx.input(c.clone())).unwrap();
    let want = ada_layer_norm(&store, "n", &x.to_f64_vec(), 5, 6, &c.to_f64_vec());
    assert_close::<T>(&tape.value(out).to_f64_vec(), &want, "adaLN");
}
both!(ada_norm, ada_norm_f32, ada_norm_f64);

fn qformer<T: Scalar>() {
    let (d, heads, nid, nv) = (8, 2, 3, 6);
    let mut store = ParamStore::<T>::new();
    let q = QFormer::new(&mut store, &mut rng(12), "q", d, heads, 2).unwrap();
    store.perturb(0.2, &mut rng(13));
    let (tid, vis) = (randn::<T>(&[nid, d], 14), randn::<T>(&[nv, d], 15));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);

    // Single layer on an arbitrary state.
    let w = randn::<T>(&[4, d], 16);
    let out = q.layers[0].forward(&cx, cx.input(w.clone()), cx.input(vis.clone())).unwrap();
    let want = qformer_layer(&store, "q.layers.0", &w.to_f64_vec(), &vis.to_f64_vec(), 4, nv, d, heads);
    assert_close::<T>(&tape.value(out).to_f64_vec(), &want, "qformer layer");

    // Full fusion: W0 = [queries; T_identity] through both layers.
    let fused = q.fuse(&cx, cx.input(tid.clone()), cx.input(vis.clone())).unwrap();
    let mut w0 = param(&store, "q.queries");
    w0.extend(tid.to_f64_vec());
    let n = 32 + nid;
    let mut want = w0;
    for l in 0..2 {
        want = qformer_layer(&store, &format!("q.layers.{l}"), &want, &vis.to_f64_vec(), n, nv, d, heads);
    }
    assert_eq!(tape.shape(fused), vec![n, d]);
    assert_close::<T>(&tape.value(fused).to_f64_vec(), &want, "qformer fuse");
}
both!(qformer, qformer_f32, qformer_f64);

fn injection<T: Scalar>() {
    let mut store = ParamStore::<T>::new();
    let attn = Attention::new(&mut store, &mut rng(17), "inj", 8, 4);
    let (z, w) = (randn::<T>(&[6, 8], 18), randn::<T>(&[4, 8], 19));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let out = inject_identity_residual(&cx, &attn, cx.input(z.clone()), cx.input(w.clone())).unwrap();
    let want = add(&z.to_f64_vec(), &attention(&store, "inj", &z.to_f64_vec(), &w.to_f64_vec(), 6, 4, 8, 4));
    assert_close::<T>(&tape.value(out).to_f64_vec(), &want, "injection");

    // A zero identity sequence leaves the tokens unchanged bit for bit.
    let zero = inject_identity_residual(&cx, &attn, cx.input(z.clone()), cx.input(Tensor::zeros(&[4, 8]))).unwrap();
    assert_eq!(*tape.value(zero), z);
}
both!(injection, injection_f32, injection_f64);

fn random_flows(n: usize, w: usize, h: usize, seed: u64) -> Vec<FlowField> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| FlowField {
            width: w,
            height: h,
            u: (0..w * h).map(|_| r.gen_range(-3.0..3.0)).collect(),
            v: (0..w * h).map(|_| r.gen_range(-3.0..3.0)).collect(),
        })
        .collect()
}

#[test]
fn heatmap_matches_oracle() {
    let (f, h, w) = (4, 5, 7);
    let mut r = rng(20);
    let mask: Vec<f64> = (0..f * h * w).map(|_| (r.gen::<f64>() < 0.4) as u8 as f64).collect();
    let mask_t = Tensor::new(&[f, h, w], mask.clone()).unwrap();
    for flows in [random_flows(f - 1, w, h, 21), random_flows(f, w, h, 22)] {
        let got = motion_heatmap(&flows, &mask_t).unwrap();
        let mags: Vec<Vec<f64>> = flows.iter().map(|fl| fl.u.iter().zip(&fl.v).map(|(u, v)| (u * u + v * v).sqrt()).collect()).collect();
        let want = heatmap(&mags, &mask, f, h * w);
        assert_close::<f64>(got.data(), &want, "heatmap");
    }
    // Static clip maps to zero; uniform motion maps to 0.5 on the mask.
    let still = vec![FlowField::zeros(w, h); f - 1];
    assert!(motion_heatmap(&still, &mask_t).unwrap().data().iter().all(|&v| v == 0.0));
    let mut uniform = still;
    for fl in &mut uniform {
        fl.u.iter_mut().for_each(|u| *u = 2.0);
    }
    let g = motion_heatmap(&uniform, &mask_t).unwrap();
    for (v, m) in g.data().iter().zip(&mask) {
        assert_eq!(*v, if *m > 0.5 { 0.5 } else { 0.0 });
    }
}

fn pooling<T: Scalar>() {
    let heat = Tensor::<T>::from_fn(&[3, 16, 24], |i| T::of(((i * 37) % 101) as f64 / 101.0));
    let got = downsample_to_latent(&heat, 8).unwrap();
    let want = pool(&heat.to_f64_vec(), 3, 16, 24, 8);
    assert_eq!(got.m_prime.shape(), &[3, 2, 3]);
    assert_close::<T>(&got.m_prime.to_f64_vec(), &want, "pooling");
    assert!(downsample_to_latent(&heat, 5).is_err());
}
both!(pooling, pooling_f32, pooling_f64);

fn weighted<T: Scalar>() {
    let (f, c, h, w) = (3, 4, 2, 3);
    let loss = Tensor::<T>::from_fn(&[f, c, h, w], |i| T::of(((i * 13) % 17) as f64 / 7.0));
    let m = MotionWeightMap {
        m_prime: Tensor::<T>::from_fn(&[f, h, w], |i| T::of(((i * 5) % 9) as f64 / 9.0)),
    };
    for lambda in [0.0, 0.5, 1.0, 3.0] {
        let got = weighted_loss(&loss, &m, lambda).unwrap();
        let want = weighted_loss_oracle(&loss, &m, lambda);
        assert_close::<T>(&[got.as_f64()], &[want], "weighted loss");
    }
    assert!(weighted_loss(&loss, &m, -1.0).is_err());
}
both!(weighted, weighted_f32, weighted_f64);

fn weighted_loss_oracle<T: Scalar>(loss: &Tensor<T>, m: &MotionWeightMap<T>, lambda: f64) -> f64 {
    let s = loss.shape();
    common::weighted_loss(&loss.to_f64_vec(), &m.m_prime.to_f64_vec(), s[0], s[1], s[2] * s[3], lambda)
}

/// The training loss of every mode against the plain and weighted mean
/// squared error of the model's own prediction.
fn model_losses<T: Scalar>() {
    let config = ModelConfig::tiny();
    let (model, mut store) = ProteusModel::new::<T>(config, 3).unwrap();
    store.perturb(0.05, &mut rng(23));
    let sample = tiny_sample(4).unwrap().cast::<T>();
    let item = Prepared::from_sample(&sample).unwrap();
    let schedule = NoiseSchedule::linear(config.timesteps).unwrap();
    let eps = randn::<T>(&config.latent_shape(), 24);
    let t = 21;
    let z0 = item.z0.to_f64_vec();
    let zt_want = forward_diffuse(&z0, &eps.to_f64_vec(), alpha_bar(config.timesteps)[t]);
    let zt = lib_diffuse(&item.z0, t, &eps, &schedule).unwrap();
    assert_close::<T>(&zt.to_f64_vec(), &zt_want, "z_t");

    let shape = config.latent_shape();
    let pooled = pool(&sample.heatmap.to_f64_vec(), shape[0], config.height, config.width, 8);
    assert_close::<T>(&item.motion.m_prime.to_f64_vec(), &pooled, "motion pooling");
    for mode in LossMode::ALL {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let lambda = 0.7;
        let loss = model.loss(&cx, &item, &schedule, t, &eps, mode, lambda, false).unwrap();
        let c = model.condition(&cx, &item.prompts, &item.reference, mode, false).unwrap();
        let pred = model.predict(&cx, &zt, t, &c).unwrap();
        let pred = tape.value(pred).to_f64_vec();
        let per: Vec<f64> = pred.iter().zip(eps.to_f64_vec()).map(|(p, e)| (p - e).powi(2)).collect();
        let want = if mode.uses_motion() {
            common::weighted_loss(&per, &pooled, shape[0], shape[1], shape[2] * shape[3], lambda)
        } else {
            per.iter().sum::<f64>() / per.len() as f64
        };
        assert_close::<T>(&[tape.value(loss).data()[0].as_f64()], &[want], &format!("loss {mode}"));
    }
}
both!(model_losses, model_losses_f32, model_losses_f64);

#[test]
fn diffusion_moments_match_closed_form() {
    let s = NoiseSchedule::linear(200).unwrap();
    let n = 200_000;
    let z0 = Tensor::<f64>::full(&[n], 0.8);
    let eps = randn::<f64>(&[n], 25);
    for t in [10, 120] {
        let zt = lib_diffuse(&z0, t, &eps, &s).unwrap();
        let (a, sg) = s.coefficients(t);
        let mean = zt.data().iter().sum::<f64>() / n as f64;
        let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // Five standard errors.
        assert!((mean - a * 0.8).abs() < 5.0 * sg / (n as f64).sqrt(), "mean {mean}");
        assert!((var / (sg * sg) - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }
}
