//! Parameter gradients of the full training objective against central
//! finite differences, with the reparameterization noise held fixed.

use eavae::distributions::{Likelihood, ZFamily};
use eavae::models::{Activation, Model, ModelSpec, OutputActivation, Variant};
use eavae::training::elbo_graph;
use ndgrad::{Graph, RngStream};

const H: f64 = 1e-6;
const NOISE_SEED: u64 = 99;

pub fn spec(variant: Variant, z_family: ZFamily, likelihood: Likelihood) -> ModelSpec {
    let bernoulli = likelihood == Likelihood::Bernoulli;
    ModelSpec {
        variant,
        input_dim: 6,
        latent_dim: 3,
        encoder_hidden: vec![5],
        decoder_hidden: if bernoulli { vec![4] } else { vec![] },
        s_encoder_hidden: if variant == Variant::EavaeGamma { vec![3] } else { vec![] },
        activation: Activation::Softplus,
        z_family,
        likelihood,
        output: if bernoulli { OutputActivation::Sigmoid } else { OutputActivation::Identity },
        center_input: false,
    }
}

pub fn batch(likelihood: Likelihood, rng: &mut RngStream) -> Vec<f64> {
    (0..4 * 6)
        .map(|_| match likelihood {
            Likelihood::Bernoulli => rng.uniform_range(0.05, 0.95),
            Likelihood::Normal { .. } => rng.uniform_range(-1.0, 1.0),
        })
        .collect()
}

pub fn loss(model: &Model, x: &[f64], betas: (f64, f64)) -> f64 {
    let mut g = Graph::new();
    let (v, _) = elbo_graph(&mut g, model, x, betas, &mut RngStream::seeded(NOISE_SEED)).unwrap();
    g.item(v)
}

/// ‖ad − fd‖ / ‖fd‖ over every parameter.
pub fn rel_err(mut model: Model, x: &[f64], betas: (f64, f64)) -> f64 {
    model.params_mut().zero_grad();
    let mut g = Graph::new();
    let (v, _) = elbo_graph(&mut g, &model, x, betas, &mut RngStream::seeded(NOISE_SEED)).unwrap();
    g.backward_into(v, model.params_mut()).unwrap();
    let ad: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, _, t)| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let (mut diff, mut norm) = (0.0, 0.0);
    for (k, grads) in ad.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params_mut().tensors_mut().nth(k).unwrap().data()[i];
            let mut at = |v: f64| {
                model.params_mut().tensors_mut().nth(k).unwrap().data_mut()[i] = v;
                loss(&model, x, betas)
            };
            let fd = (at(orig + H) - at(orig - H)) / (2.0 * H);
            at(orig);
            diff += (a - fd).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-8)
}

/// Largest relative error over three random initializations.
pub fn worst_rel_err(variant: Variant, z_family: ZFamily, likelihood: Likelihood, betas: (f64, f64)) -> f64 {
    (0..3)
        .map(|seed| {
            let model = Model::new(spec(variant, z_family, likelihood), seed).unwrap();
            let x = batch(likelihood, &mut RngStream::seeded(100 + seed));
            rel_err(model, &x, betas)
        })
        .fold(0.0, f64::max)
}

/// The full objectives: Laplace VAE, softplus-Laplace EA-VAE, Bernoulli VAE,
/// log-normal EA-VAE (both likelihoods) and the Gamma EA-VAE.
pub fn loss_suite() -> Vec<(&'static str, f64)> {
    let normal = Likelihood::Normal { sigma_obs: 0.5 };
    vec![
        ("laplace-vae", worst_rel_err(Variant::Vae, ZFamily::Laplace, normal, (0.7, 1.0))),
        ("softplus-laplace-eavae", worst_rel_err(Variant::EavaeSoftplusLaplace, ZFamily::Laplace, normal, (0.7, 2.5))),
        ("bernoulli-vae", worst_rel_err(Variant::Vae, ZFamily::Normal, Likelihood::Bernoulli, (4.0, 1.0))),
        ("lognormal-eavae-bernoulli", worst_rel_err(Variant::EavaeLognormal, ZFamily::Normal, Likelihood::Bernoulli, (4.0, 1.5))),
        (
            "lognormal-eavae-normal",
            worst_rel_err(Variant::EavaeLognormal, ZFamily::Normal, Likelihood::Normal { sigma_obs: 0.3 }, (1.0, 1.0)),
        ),
        ("gamma-eavae", worst_rel_err(Variant::EavaeGamma, ZFamily::Laplace, normal, (1.0, 0.8))),
    ]
}
