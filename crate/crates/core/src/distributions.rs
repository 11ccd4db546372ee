//! Posterior families, reparameterized sampling, closed-form KL terms and
//! reconstruction likelihoods.
//!
//! Every family comes in two forms: plain functions over `f64` slices used
//! by evaluation code, and graph functions (suffix `_var`) used inside the
//! training objective. Encoders emit log-scale parameters, so the graph
//! versions take `log b`, `log σ²` and `log θ`.

use ndgrad::linalg::softplus;
use ndgrad::{Graph, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

/// Fixed Gamma shape for the scale variable.
pub const GAMMA_SHAPE: f64 = 2.0;
/// Gamma prior scale chosen so that `kθ² = 1`.
pub const GAMMA_PRIOR_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Clamp applied to Bernoulli means before taking logarithms.
pub const BERNOULLI_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZFamily {
    Laplace,
    Normal,
}

impl ZFamily {
    /// Variance of the unit prior (Laplace(0,1) → 2, Normal(0,1) → 1).
    pub fn prior_variance(self) -> f64 {
        match self {
            ZFamily::Laplace => 2.0,
            ZFamily::Normal => 1.0,
        }
    }

    /// Variance of a posterior with the given scale parameter (b or σ²).
    pub fn variance(self, scale: f64) -> f64 {
        match self {
            ZFamily::Laplace => 2.0 * scale * scale,
            ZFamily::Normal => scale,
        }
    }

    pub fn std(self, scale: f64) -> f64 {
        self.variance(scale).sqrt()
    }

    /// Maps the encoder's log-scale output to the family's scale parameter.
    pub fn scale_from_log(self, log_scale: f64) -> f64 {
        log_scale.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SFamily {
    SoftplusLaplace,
    LogNormal,
    Gamma,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacePosterior {
    pub mu: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalPosterior {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Posterior over the local latents `z` of one image.
#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorParams {
    Laplace(LaplacePosterior),
    Normal(NormalPosterior),
}

impl PosteriorParams {
    pub fn from_log_scale(family: ZFamily, mu: Vec<f64>, log_scale: &[f64]) -> Self {
        let scale: Vec<f64> = log_scale.iter().map(|v| v.exp()).collect();
        match family {
            ZFamily::Laplace => PosteriorParams::Laplace(LaplacePosterior { mu, b: scale }),
            ZFamily::Normal => PosteriorParams::Normal(NormalPosterior { mu, var: scale }),
        }
    }

    pub fn family(&self) -> ZFamily {
        match self {
            PosteriorParams::Laplace(_) => ZFamily::Laplace,
            PosteriorParams::Normal(_) => ZFamily::Normal,
        }
    }

    pub fn dims(&self) -> usize {
        self.mean().len()
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            PosteriorParams::Laplace(p) => &p.mu,
            PosteriorParams::Normal(p) => &p.mu,
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        match self {
            PosteriorParams::Laplace(p) => p.b.iter().map(|b| 2.0 * b * b).collect(),
            PosteriorParams::Normal(p) => p.var.clone(),
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }

    pub fn kl_to_prior(&self) -> Result<Vec<f64>> {
        match self {
            PosteriorParams::Laplace(p) => kl_laplace_to_std(&p.mu, &p.b),
            PosteriorParams::Normal(p) => kl_normal_to_std(&p.mu, &p.var),
        }
    }

    pub fn rsample(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            PosteriorParams::Laplace(p) => p.rsample(rng),
            PosteriorParams::Normal(p) => p.rsample(rng),
        }
    }
}

impl LaplacePosterior {
    pub fn rsample(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.b.iter().try_for_each(|&b| ensure_positive("Laplace scale", b))?;
        Ok(self
            .mu
            .iter()
            .zip(&self.b)
            .map(|(m, b)| m + b * rng.standard_laplace())
            .collect())
    }
}

impl NormalPosterior {
    pub fn rsample(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.var.iter().try_for_each(|&v| ensure_positive("Normal variance", v))?;
        Ok(self
            .mu
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * rng.standard_normal())
            .collect())
    }
}

/// Posterior over the global scale variable `s` of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ScalarSPosterior {
    /// `s = softplus(u)`, `u ~ Laplace(mu, b)`.
    SoftplusLaplace { mu: f64, b: f64 },
    /// `s = exp(u)`, `u ~ Normal(nu, var)`.
    LogNormal { nu: f64, var: f64 },
    /// `s ~ Gamma(k = 2, theta)`.
    Gamma { theta: f64 },
}

impl ScalarSPosterior {
    pub fn family(&self) -> SFamily {
        match self {
            ScalarSPosterior::SoftplusLaplace { .. } => SFamily::SoftplusLaplace,
            ScalarSPosterior::LogNormal { .. } => SFamily::LogNormal,
            ScalarSPosterior::Gamma { .. } => SFamily::Gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarSPosterior::SoftplusLaplace { b, .. } => ensure_positive("softplus-Laplace scale", b),
            ScalarSPosterior::LogNormal { var, .. } => ensure_positive("log-normal variance", var),
            ScalarSPosterior::Gamma { theta } => ensure_positive("Gamma scale", theta),
        }
    }

    pub fn rsample(&self, rng: &mut RngStream) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            ScalarSPosterior::SoftplusLaplace { mu, b } => softplus(mu + b * rng.standard_laplace()),
            ScalarSPosterior::LogNormal { nu, var } => (nu + var.sqrt() * rng.standard_normal()).exp(),
            ScalarSPosterior::Gamma { theta } => theta * rng.standard_gamma_shape2(),
        })
    }

    pub fn kl_to_prior(&self) -> Result<f64> {
        match *self {
            ScalarSPosterior::SoftplusLaplace { mu, b } => kl_softplus_laplace(mu, b),
            ScalarSPosterior::LogNormal { nu, var } => Ok(kl_normal_to_std(&[nu], &[var])?[0]),
            ScalarSPosterior::Gamma { theta } => kl_gamma_to_prior(theta),
        }
    }
}

/// Posterior mean of `s`: exact for Gamma and log-normal, Monte Carlo for softplus-Laplace.
pub fn posterior_mean_s(post: &ScalarSPosterior, n_samples: usize, rng: &mut RngStream) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("posterior_mean_s needs at least one sample"));
    }
    post.validate()?;
    Ok(match *post {
        ScalarSPosterior::Gamma { theta } => GAMMA_SHAPE * theta,
        ScalarSPosterior::LogNormal { nu, var } => (nu + 0.5 * var).exp(),
        ScalarSPosterior::SoftplusLaplace { mu, b } => {
            (0..n_samples).map(|_| softplus(mu + b * rng.standard_laplace())).sum::<f64>() / n_samples as f64
        }
    })
}

/// Per-dimension KL(Laplace(μ, b) ‖ Laplace(0, 1)) = −1 + |μ| − ln b + b·e^{−|μ|/b}.
pub fn kl_laplace_to_std(mu: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != b.len() {
        return Err(Error::Dimension {
            what: "Laplace KL scale vector",
            expected: mu.len(),
            actual: b.len(),
        });
    }
    mu.iter()
        .zip(b)
        .map(|(&m, &b)| {
            ensure_positive("Laplace scale", b)?;
            Ok(-1.0 + m.abs() - b.ln() + b * (-m.abs() / b).exp())
        })
        .collect()
}

/// Per-dimension KL(N(μ, σ²) ‖ N(0, 1)) = ½(−1 + μ² − ln σ² + σ²).
pub fn kl_normal_to_std(mu: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != var.len() {
        return Err(Error::Dimension {
            what: "Normal KL variance vector",
            expected: mu.len(),
            actual: var.len(),
        });
    }
    mu.iter()
        .zip(var)
        .map(|(&m, &v)| {
            ensure_positive("Normal variance", v)?;
            Ok(0.5 * (-1.0 + m * m - v.ln() + v))
        })
        .collect()
}

/// KL(Gamma(2, θ) ‖ Gamma(2, θ₀)) = 2(r − 1 − ln r), r = θ/θ₀.
pub fn kl_gamma_to_prior(theta: f64) -> Result<f64> {
    ensure_positive("Gamma scale", theta)?;
    let r = theta / GAMMA_PRIOR_SCALE;
    Ok(GAMMA_SHAPE * (r - 1.0 - r.ln()))
}

/// KL of the softplus-transformed Laplace; invariant under the shared
/// invertible map, so it equals the pre-activation Laplace KL.
pub fn kl_softplus_laplace(mu_s: f64, b_s: f64) -> Result<f64> {
    Ok(kl_laplace_to_std(&[mu_s], &[b_s])?[0])
}

/// Observation model of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Likelihood {
    /// Isotropic Normal with fixed observation noise.
    Normal { sigma_obs: f64 },
    /// Independent Bernoulli pixels.
    Bernoulli,
}

impl Likelihood {
    /// `M/2 · ln(2πσ²)` for Normal likelihoods; zero otherwise. Excluded from gradients.
    pub fn log_normalizer(&self, m: usize) -> f64 {
        match *self {
            Likelihood::Normal { sigma_obs } => {
                0.5 * m as f64 * (2.0 * std::f64::consts::PI * sigma_obs * sigma_obs).ln()
            }
            Likelihood::Bernoulli => 0.0,
        }
    }
}

/// Reconstruction loss of one image (negative log-likelihood without the constant).
pub fn likelihood_terms(x: &[f64], xhat: &[f64], likelihood: Likelihood) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::Dimension {
            what: "reconstruction length",
            expected: x.len(),
            actual: xhat.len(),
        });
    }
    match likelihood {
        Likelihood::Normal { sigma_obs } => {
            ensure_positive("sigma_obs", sigma_obs)?;
            let sse: f64 = x.iter().zip(xhat).map(|(a, b)| (b - a) * (b - a)).sum();
            Ok(sse / (2.0 * sigma_obs * sigma_obs))
        }
        Likelihood::Bernoulli => {
            if xhat.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid("Bernoulli likelihood needs means in [0, 1]"));
            }
            Ok(-x
                .iter()
                .zip(xhat)
                .map(|(&t, &p)| {
                    let p = p.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
                    t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                })
                .sum::<f64>())
        }
    }
}

// Graph versions. All take `[rows, dims]` parameter nodes and return
// elementwise results of the same shape unless stated otherwise.

/// Elementwise Laplace KL from `(μ, ln b)`.
pub fn kl_laplace_var(g: &mut Graph, mu: Var, log_b: Var) -> Result<Var> {
    let abs_mu = g.abs(mu);
    let inv_b = {
        let neg = g.neg(log_b);
        g.exp(neg)
    };
    let ratio = g.mul(abs_mu, inv_b)?;
    // b·e^{−|μ|/b} = e^{ln b − |μ|/b}
    let expo = g.sub(log_b, ratio)?;
    let tail = g.exp(expo);
    let t = g.sub(abs_mu, log_b)?;
    let t = g.add(t, tail)?;
    Ok(g.add_scalar(t, -1.0))
}

/// Elementwise Normal KL from `(μ, ln σ²)`.
pub fn kl_normal_var(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let t = g.sub(mu2, log_var)?;
    let t = g.add(t, var)?;
    let t = g.add_scalar(t, -1.0);
    Ok(g.scale(t, 0.5))
}

/// Gamma KL from `ln θ`, computed through `ln r` so it is exactly zero at the prior.
pub fn kl_gamma_var(g: &mut Graph, log_theta: Var) -> Result<Var> {
    let log_r = g.add_scalar(log_theta, -GAMMA_PRIOR_SCALE.ln());
    let r = g.exp(log_r);
    let t = g.sub(r, log_r)?;
    let t = g.add_scalar(t, -1.0);
    Ok(g.scale(t, GAMMA_SHAPE))
}

/// `μ + b·ε` with a parameter-free Laplace draw `ε`.
pub fn rsample_laplace_var(g: &mut Graph, mu: Var, log_b: Var, rng: &mut RngStream) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let n = shape.iter().product();
    let eps = g.constant(Tensor::new(&shape, rng.laplaces(n))?);
    let b = g.exp(log_b);
    let step = g.mul(b, eps)?;
    Ok(g.add(mu, step)?)
}

/// `μ + σ·ε` with a parameter-free standard normal draw `ε`.
pub fn rsample_normal_var(g: &mut Graph, mu: Var, log_var: Var, rng: &mut RngStream) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let n = shape.iter().product();
    let eps = g.constant(Tensor::new(&shape, rng.normals(n))?);
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let step = g.mul(sd, eps)?;
    Ok(g.add(mu, step)?)
}

/// `θ·(e₁ + e₂)`; gradient flows only through θ.
pub fn rsample_gamma_var(g: &mut Graph, log_theta: Var, rng: &mut RngStream) -> Result<Var> {
    let shape = g.shape(log_theta).to_vec();
    let n = shape.iter().product();
    let draws: Vec<f64> = (0..n).map(|_| rng.standard_gamma_shape2()).collect();
    let base = g.constant(Tensor::new(&shape, draws)?);
    let theta = g.exp(log_theta);
    Ok(g.mul(theta, base)?)
}

/// Row-wise reconstruction loss `[rows]` for a `[rows, M]` reconstruction.
pub fn likelihood_var(g: &mut Graph, x: Var, xhat: Var, likelihood: Likelihood) -> Result<Var> {
    match likelihood {
        Likelihood::Normal { sigma_obs } => {
            ensure_positive("sigma_obs", sigma_obs)?;
            let d = g.sub(xhat, x)?;
            let sq = g.square(d);
            let row = g.sum_last(sq);
            Ok(g.scale(row, 1.0 / (2.0 * sigma_obs * sigma_obs)))
        }
        Likelihood::Bernoulli => {
            let p = g.clamp(xhat, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
            let lp = g.log(p);
            let one_minus = {
                let n = g.neg(p);
                g.add_scalar(n, 1.0)
            };
            let lq = g.log(one_minus);
            let one_minus_x = {
                let n = g.neg(x);
                g.add_scalar(n, 1.0)
            };
            let a = g.mul(x, lp)?;
            let b = g.mul(one_minus_x, lq)?;
            let s = g.add(a, b)?;
            let row = g.sum_last(s);
            Ok(g.neg(row))
        }
    }
}
