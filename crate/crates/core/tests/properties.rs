//! Property tests for distribution, data, evaluation and classifier invariants.

use eavae::classifier::{entropy, Mlp, N_CLASSES};
use eavae::data::{self, Dataset, GainDist, PixelRange};
use eavae::distributions::{
    kl_gamma_to_prior, kl_laplace_to_std, kl_normal_to_std, rsample_gamma_var, rsample_laplace_var, rsample_normal_var,
    ScalarSPosterior, GAMMA_PRIOR_SCALE,
};
use eavae::distributions::{Likelihood, ZFamily};
use eavae::eval::{binned_curves, nnls, normalization_index};
use eavae::models::{Activation, Model, ModelSpec, OutputActivation, Variant};
use eavae::stats::{exceedance, sample_std};
use eavae::training::{argmin_earliest, elbo_loss, train, Schedule, TrainConfig};
use ndgrad::{Graph, RngStream, Tensor, Var};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kls_are_nonnegative(mu in -5.0f64..5.0, log_scale in -4.0f64..3.0) {
        let s = log_scale.exp();
        prop_assert!(kl_laplace_to_std(&[mu], &[s]).unwrap()[0] >= -1e-15);
        prop_assert!(kl_normal_to_std(&[mu], &[s]).unwrap()[0] >= -1e-15);
        prop_assert!(kl_gamma_to_prior(s).unwrap() >= -1e-15);
        let kl_s = ScalarSPosterior::SoftplusLaplace { mu, b: s }.kl_to_prior().unwrap();
        prop_assert!(kl_s >= -1e-15);
    }

    #[test]
    fn contrast_is_homogeneous(c in -5.0f64..5.0, seed in 0u64..1000) {
        let mut rng = RngStream::seeded(seed);
        let x = rng.normals(64);
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let (a, b) = (sample_std(&cx), c.abs() * sample_std(&x));
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn exceedance_invariant_under_monotone_maps(seed in 0u64..1000) {
        let mut rng = RngStream::seeded(seed);
        let a: Vec<f64> = (0..30).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let mut b: Vec<f64> = (0..10).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        b.push(a[3]); // a tie
        let f = |v: &f64| v.ln() * 3.0 + v.powi(3);
        let fa: Vec<f64> = a.iter().map(f).collect();
        let fb: Vec<f64> = b.iter().map(f).collect();
        prop_assert_eq!(exceedance(&a, &b), exceedance(&fa, &fb));
    }

    #[test]
    fn normalization_index_ignores_offset(alpha in -3.0f64..3.0, beta in -10.0f64..10.0, seed in 0u64..1000) {
        let mut rng = RngStream::seeded(seed);
        let l = rng.normals(20);
        let z: Vec<f64> = l.iter().map(|v| alpha * v + beta).collect();
        prop_assert!((normalization_index(&z, &l).unwrap() - alpha).abs() < 1e-10);
    }

    #[test]
    fn nnls_is_feasible_and_residuals_never_increase(seed in 0u64..1000) {
        let mut rng = RngStream::seeded(seed);
        let (rows, cols) = (25, 6);
        let a = rng.normals(rows * cols);
        let b = rng.normals(rows);
        let sol = nnls(&a, &b, rows, cols, 1e-12, 500).unwrap();
        prop_assert!(sol.x.iter().all(|&v| v >= 0.0));
        for w in sol.residuals.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_logit_shift(shift in -50.0f64..50.0, seed in 0u64..1000) {
        let mlp = Mlp::new(4, &[6], seed);
        let mut rng = RngStream::seeded(seed);
        let x = rng.normals(3 * 4);
        let p = mlp.probabilities(&x).unwrap();
        let logits = mlp.logits(&x).unwrap();
        for r in 0..3 {
            let row = &logits[r * N_CLASSES..(r + 1) * N_CLASSES];
            let m = row.iter().map(|v| v + shift).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v + shift - m).exp()).sum();
            for k in 0..N_CLASSES {
                prop_assert!((p[r * N_CLASSES + k] - (row[k] + shift - m).exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entropy_within_uniform_bound(seed in 0u64..1000) {
        let mut rng = RngStream::seeded(seed);
        let w: Vec<f64> = (0..N_CLASSES).map(|_| rng.uniform().powi(4)).collect();
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / total).collect();
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (N_CLASSES as f64).ln() + 1e-12);
    }

    #[test]
    fn loss_terms_sum_to_total(seed in 0u64..200, b1 in 0.0f64..5.0, b2 in 0.0f64..5.0, v in 0usize..4) {
        let variant = [Variant::Vae, Variant::EavaeSoftplusLaplace, Variant::EavaeLognormal, Variant::EavaeGamma][v];
        let model = Model::new(tiny_spec(variant), seed).unwrap();
        let x = RngStream::seeded(seed + 1).normals(5 * 9);
        let cfg = TrainConfig { beta1: Schedule::constant(b1), beta2: Schedule::constant(b2), ..tiny_train(1) };
        let t = elbo_loss(&model, &x, 0, &cfg, &mut RngStream::seeded(seed)).unwrap();
        prop_assert!((t.recon + t.kl_z + t.kl_s - t.total).abs() <= 1e-12 * t.total.abs().max(1.0));
    }
}

fn tiny_spec(variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        input_dim: 9,
        latent_dim: 3,
        encoder_hidden: vec![6],
        decoder_hidden: vec![],
        s_encoder_hidden: if variant == Variant::EavaeGamma { vec![3] } else { vec![] },
        activation: Activation::Softplus,
        z_family: ZFamily::Laplace,
        likelihood: Likelihood::Normal { sigma_obs: 0.5 },
        output: OutputActivation::Identity,
        center_input: false,
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        beta1: Schedule::constant(1.0),
        beta2: Schedule::constant(1.0),
        lr: 3e-3,
        weight_decay: 0.0,
        epochs,
        batch_size: 16,
        seed: 5,
        patience: None,
        val_fraction: 0.2,
        clip_grad_norm: None,
    }
}

#[test]
fn kl_is_zero_only_at_the_prior() {
    assert_eq!(kl_laplace_to_std(&[0.0], &[1.0]).unwrap()[0], 0.0);
    assert_eq!(kl_normal_to_std(&[0.0], &[1.0]).unwrap()[0], 0.0);
    assert!(kl_gamma_to_prior(GAMMA_PRIOR_SCALE).unwrap().abs() < 1e-15);
    assert_eq!(ScalarSPosterior::LogNormal { nu: 0.0, var: 1.0 }.kl_to_prior().unwrap(), 0.0);
    for (mu, s) in [(1e-3, 1.0), (0.0, 1.001), (-0.5, 0.7)] {
        assert!(kl_laplace_to_std(&[mu], &[s]).unwrap()[0] > 0.0);
        assert!(kl_normal_to_std(&[mu], &[s]).unwrap()[0] > 0.0);
    }
    assert!(kl_gamma_to_prior(GAMMA_PRIOR_SCALE * 1.001).unwrap() > 0.0);
}

/// Pathwise gradient of mean g(sample) versus finite differences of the same
/// Monte Carlo mean at a matched seed.
fn pathwise_check(sampler: &dyn Fn(&mut Graph, Var, Var, &mut RngStream) -> Var, p0: f64, p1: f64) {
    const N: usize = 100_000;
    const H: f64 = 1e-5;
    let g_of = |x: f64| (0.7 * x).sin() + 0.1 * x * x;
    let mc_mean = |a: f64, b: f64| {
        let mut g = Graph::new();
        let va = g.input(&Tensor::full(&[N], a));
        let vb = g.input(&Tensor::full(&[N], b));
        let s = sampler(&mut g, va, vb, &mut RngStream::seeded(77));
        g.data(s).iter().map(|&x| g_of(x)).sum::<f64>() / N as f64
    };
    let mut g = Graph::new();
    let va = g.input(&Tensor::full(&[N], p0).with_requires_grad(true));
    let vb = g.input(&Tensor::full(&[N], p1).with_requires_grad(true));
    let s = sampler(&mut g, va, vb, &mut RngStream::seeded(77));
    // chain rule through the sample, with g'(x)/N as constant weights
    let weights: Vec<f64> = g.data(s).iter().map(|&x| (0.7 * (0.7 * x).cos() + 0.2 * x) / N as f64).collect();
    let w = g.constant(Tensor::new(&[N], weights).unwrap());
    let prod = g.mul(s, w).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let ad = [grads.get(va).unwrap().iter().sum::<f64>(), grads.get(vb).unwrap().iter().sum::<f64>()];
    let fd = [
        (mc_mean(p0 + H, p1) - mc_mean(p0 - H, p1)) / (2.0 * H),
        (mc_mean(p0, p1 + H) - mc_mean(p0, p1 - H)) / (2.0 * H),
    ];
    for k in 0..2 {
        let rel = (ad[k] - fd[k]).abs() / fd[k].abs().max(1e-8);
        assert!(rel < 1e-3, "param {k}: ad {} fd {} rel {rel:e}", ad[k], fd[k]);
    }
}

#[test]
fn pathwise_gradients_match_mc_finite_differences() {
    pathwise_check(&|g, a, b, rng| rsample_laplace_var(g, a, b, rng).unwrap(), 0.3, -0.4);
    pathwise_check(&|g, a, b, rng| rsample_normal_var(g, a, b, rng).unwrap(), -0.2, 0.3);
    // Gamma has a single parameter; the second input is added so both slots carry gradient
    pathwise_check(
        &|g, a, b, rng| {
            let s = rsample_gamma_var(g, a, rng).unwrap();
            g.add(s, b).unwrap()
        },
        -0.3,
        0.2,
    );
}

#[test]
fn softplus_transform_leaves_kl_unchanged() {
    // MC estimate of E_q[ln q_s(s) − ln p_s(s)] with densities in s-space
    let (mu, b) = (0.8, 0.6);
    let ln_lap = |u: f64, m: f64, sc: f64| -(u - m).abs() / sc - (2.0 * sc).ln();
    let ln_qs = |s: f64, m: f64, sc: f64| {
        let u = s + (-(-s).exp()).ln_1p();
        ln_lap(u, m, sc) - (-(-s).exp()).ln_1p()
    };
    let post = ScalarSPosterior::SoftplusLaplace { mu, b };
    let mut rng = RngStream::seeded(3);
    let n = 200_000;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let s = post.rsample(&mut rng).unwrap();
            ln_qs(s, mu, b) - ln_qs(s, 0.0, 1.0)
        })
        .collect();
    let est = vals.iter().sum::<f64>() / n as f64;
    let se = sample_std(&vals) / (n as f64).sqrt();
    let closed = post.kl_to_prior().unwrap();
    assert!((est - closed).abs() < 4.0 * se, "MC {est} ± {se} vs {closed}");
}

#[test]
fn binned_estimators_match_direct_formulas() {
    // four planted bins of five images each, contrasts strictly separated
    let (dims, per_bin, bins) = (3, 5, 4);
    let n = per_bin * bins;
    let mut rng = RngStream::seeded(8);
    let contrast: Vec<f64> = (0..n).map(|i| (i / per_bin) as f64 + rng.uniform_range(0.0, 0.5)).collect();
    let mu = rng.normals(n * dims);
    let var: Vec<f64> = (0..n * dims).map(|_| rng.uniform_range(0.1, 2.0)).collect();
    let curve = binned_curves(&contrast, &mu, &var, dims, bins).unwrap();
    assert_eq!(curve.counts, vec![per_bin; bins]);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let svar = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    for b in 0..bins {
        let rows: Vec<usize> = (b * per_bin..(b + 1) * per_bin).collect();
        let nb = per_bin as f64;
        let norms: Vec<f64> = rows.iter().map(|&i| (0..dims).map(|j| mu[i * dims + j].powi(2)).sum::<f64>().sqrt()).collect();
        let dim_vars: Vec<f64> = (0..dims).map(|j| svar(&rows.iter().map(|&i| mu[i * dims + j]).collect::<Vec<_>>())).collect();
        let all_var: Vec<f64> = rows.iter().flat_map(|&i| (0..dims).map(move |j| i * dims + j)).map(|k| var[k]).collect();
        let expect = [
            (curve.sm[b], mean(&norms)),
            (curve.sv[b], mean(&dim_vars)),
            (curve.nv[b], mean(&all_var)),
            (curve.eps_sm[b], (svar(&norms)).sqrt() / nb.sqrt()),
            (curve.eps_sv[b], mean(&dim_vars.iter().map(|v| (2.0 / (nb - 1.0)).sqrt() * v).collect::<Vec<_>>()) / (dims as f64).sqrt()),
            (curve.eps_nv[b], svar(&all_var).sqrt() / (nb.sqrt() * (dims as f64).sqrt())),
        ];
        for (k, (got, want)) in expect.iter().enumerate() {
            assert!((got - want).abs() < 1e-12, "bin {b} stat {k}: {got} vs {want}");
        }
    }
}

#[test]
fn unit_gain_noiseless_augmentation_is_a_half_shift() {
    let (raw, _) = data::synth_digits(5, 2);
    let ds = data::idx_to_dataset(&raw, "d".into()).unwrap();
    let aug = data::augment_contrast(&ds, GainDist::Fixed { c: 1.0 }, 0.0, 1, 0).unwrap();
    assert_eq!(aug.len(), ds.len());
    for (a, x) in aug.images.iter().zip(&ds.images) {
        assert!((a - (x - 0.5)).abs() < 1e-15);
    }
}

#[test]
fn pixel_shuffle_destroys_pair_correlations() {
    let (raw, _) = data::synth_digits(5000, 4);
    let ds = data::idx_to_dataset(&raw, "d".into()).unwrap();
    let sh = data::pixel_shuffle(&ds, 1).unwrap();
    let m = ds.input_dim();
    let corr = |d: &Dataset, p: usize, q: usize| {
        let a: Vec<f64> = (0..d.len()).map(|i| d.images[i * m + p]).collect();
        let b: Vec<f64> = (0..d.len()).map(|i| d.images[i * m + q]).collect();
        let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    // pairs of pixels that vary in the data, drawn from the central region
    let mut rng = RngStream::seeded(9);
    let varying: Vec<usize> = (0..m).filter(|&p| sample_std(&(0..ds.len()).map(|i| ds.images[i * m + p]).collect::<Vec<_>>()) > 0.05).collect();
    let pairs: Vec<(usize, usize)> = (0..100)
        .map(|_| loop {
            let (p, q) = (varying[rng.below(varying.len())], varying[rng.below(varying.len())]);
            if p != q {
                break (p, q);
            }
        })
        .collect();
    let before = pairs.iter().map(|&(p, q)| corr(&ds, p, q).abs()).sum::<f64>() / 100.0;
    let after = pairs.iter().map(|&(p, q)| corr(&sh, p, q).abs()).sum::<f64>() / 100.0;
    assert!(after < 0.05, "mean |corr| after shuffle {after} (before {before})");
    assert!(before > after);
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let ds = Dataset::new(RngStream::seeded(1).normals(120 * 9), 3, 3, PixelRange::Free, "noise").unwrap();
    let run = || train(Model::new(tiny_spec(Variant::EavaeSoftplusLaplace), 2).unwrap(), &ds.images[..96 * 9], &ds.images[96 * 9..], &tiny_train(6)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let val: Vec<f64> = a.log.iter().map(|l| l.val_total).collect();
    assert_eq!(Some(a.checkpoint.best_epoch), argmin_earliest(&val));
    assert_eq!(a.checkpoint.best_val_loss, val[a.checkpoint.best_epoch]);
}

#[test]
fn patience_stops_early() {
    let ds = Dataset::new(RngStream::seeded(1).normals(60 * 9), 3, 3, PixelRange::Free, "noise").unwrap();
    // steps far below f64 resolution leave the validation loss exactly flat
    let cfg = TrainConfig {
        lr: 1e-300,
        patience: Some(2),
        ..tiny_train(40)
    };
    let r = train(Model::new(tiny_spec(Variant::Vae), 0).unwrap(), &ds.images[..48 * 9], &ds.images[48 * 9..], &cfg).unwrap();
    assert_eq!(r.log.len(), 3);
    assert_eq!(r.checkpoint.best_epoch, 0);
}
