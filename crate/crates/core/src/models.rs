//! Encoder/decoder networks for the standard VAE and the three
//! explaining-away variants.
//!
//! Latent slot layout: every variant owns `latent_dim` slots. The standard
//! VAE and the Gamma variant use all of them for `z`; the homogeneous
//! variants (softplus-Laplace, log-normal) give the last slot of the shared
//! posterior heads to the pre-activation of `s`.

use ndgrad::{Graph, ParamId, ParamSet, RngStream, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    self, Likelihood, PosteriorParams, SFamily, ScalarSPosterior, ZFamily, GAMMA_PRIOR_SCALE,
};
use crate::error::{Error, Result};
use crate::stats::pixel_std;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vae,
    EavaeSoftplusLaplace,
    EavaeLognormal,
    EavaeGamma,
}

impl Variant {
    pub fn s_family(self) -> Option<SFamily> {
        match self {
            Variant::Vae => None,
            Variant::EavaeSoftplusLaplace => Some(SFamily::SoftplusLaplace),
            Variant::EavaeLognormal => Some(SFamily::LogNormal),
            Variant::EavaeGamma => Some(SFamily::Gamma),
        }
    }

    pub fn is_explaining_away(self) -> bool {
        self != Variant::Vae
    }

    /// `s` shares the posterior heads with `z`.
    pub fn is_homogeneous(self) -> bool {
        matches!(self, Variant::EavaeSoftplusLaplace | Variant::EavaeLognormal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// Empty for the linear patch decoder.
    pub decoder_hidden: Vec<usize>,
    /// Hidden widths of the separate `s` encoder (Gamma variant only).
    #[serde(default)]
    pub s_encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub z_family: ZFamily,
    pub likelihood: Likelihood,
    pub output: OutputActivation,
    /// Subtract each image's mean pixel before it enters the encoder.
    #[serde(default)]
    pub center_input: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model.input_dim must be positive"));
        }
        let min_latent = if self.variant.is_homogeneous() { 2 } else { 1 };
        if self.latent_dim < min_latent {
            return Err(Error::invalid(format!(
                "model.latent_dim must be at least {min_latent} for {:?}",
                self.variant
            )));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).chain(&self.s_encoder_hidden).any(|&w| w == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        match self.likelihood {
            Likelihood::Bernoulli if self.output != OutputActivation::Sigmoid => {
                return Err(Error::invalid("Bernoulli likelihood requires sigmoid output"))
            }
            Likelihood::Normal { sigma_obs } if !(sigma_obs > 0.0 && sigma_obs.is_finite()) => {
                return Err(Error::invalid("model.likelihood.sigma_obs must be positive"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of local latents `z`.
    pub fn z_dim(&self) -> usize {
        if self.variant.is_homogeneous() {
            self.latent_dim - 1
        } else {
            self.latent_dim
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let a = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform_range(-a, a)).collect();
        Linear {
            w: params.add(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w).expect("sized")),
            b: params.add(format!("{name}.b"), Tensor::vector(b)),
        }
    }

    fn constant(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Self {
        Linear {
            w: params.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: params.add(format!("{name}.b"), Tensor::full(&[fan_out], bias)),
        }
    }

    fn apply(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        Ok(g.affine(x, w, b)?)
    }
}

/// Graph nodes of the `s` posterior parameters, each `[rows, 1]`.
#[derive(Clone, Copy, Debug)]
pub enum SVars {
    SoftplusLaplace { mu: Var, log_b: Var },
    LogNormal { nu: Var, log_var: Var },
    Gamma { log_theta: Var },
}

#[derive(Clone, Copy, Debug)]
pub struct GraphEncoding {
    pub z_mu: Var,
    pub z_log_scale: Var,
    pub s: Option<SVars>,
}

/// Graph nodes of one stochastic pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct GraphPass {
    pub encoding: GraphEncoding,
    pub z: Var,
    pub s: Option<Var>,
    pub xhat: Var,
    /// Per-row reconstruction loss `[rows]`.
    pub recon: Var,
    /// Per-row summed KL of `z` `[rows]`.
    pub kl_z: Var,
    /// Per-row KL of `s` `[rows]`.
    pub kl_s: Option<Var>,
}

/// Numeric posteriors of a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub n: usize,
    pub z_dim: usize,
    pub z_family: ZFamily,
    /// Row-major `[n, z_dim]`.
    pub z_mu: Vec<f64>,
    /// Family scale parameter (b or σ²), row-major `[n, z_dim]`.
    pub z_scale: Vec<f64>,
    /// One entry per image for explaining-away variants, empty otherwise.
    pub s: Vec<ScalarSPosterior>,
}

impl Encoding {
    pub fn mu_row(&self, i: usize) -> &[f64] {
        &self.z_mu[i * self.z_dim..(i + 1) * self.z_dim]
    }

    pub fn scale_row(&self, i: usize) -> &[f64] {
        &self.z_scale[i * self.z_dim..(i + 1) * self.z_dim]
    }

    pub fn variance_row(&self, i: usize) -> Vec<f64> {
        self.scale_row(i).iter().map(|&v| self.z_family.variance(v)).collect()
    }

    pub fn posterior(&self, i: usize) -> PosteriorParams {
        let mu = self.mu_row(i).to_vec();
        let scale = self.scale_row(i).to_vec();
        match self.z_family {
            ZFamily::Laplace => PosteriorParams::Laplace(distributions::LaplacePosterior { mu, b: scale }),
            ZFamily::Normal => PosteriorParams::Normal(distributions::NormalPosterior { mu, var: scale }),
        }
    }

    /// Posterior width u: mean posterior standard deviation over the given units (all if `None`).
    pub fn width(&self, i: usize, units: Option<&[usize]>) -> f64 {
        let row = self.scale_row(i);
        match units {
            Some(u) => u.iter().map(|&j| self.z_family.std(row[j])).sum::<f64>() / u.len() as f64,
            None => row.iter().map(|&v| self.z_family.std(v)).sum::<f64>() / row.len() as f64,
        }
    }

    pub fn widths(&self, units: Option<&[usize]>) -> Vec<f64> {
        (0..self.n).map(|i| self.width(i, units)).collect()
    }
}

/// Single-image stochastic forward pass with unweighted loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub posterior_z: PosteriorParams,
    pub posterior_s: Option<ScalarSPosterior>,
    pub z_sample: Vec<f64>,
    pub s_sample: Option<f64>,
    pub reconstruction: Vec<f64>,
    pub recon_loss: f64,
    pub kl_z: f64,
    pub kl_s: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    encoder: Vec<Linear>,
    head_mu: Linear,
    head_log_scale: Linear,
    s_encoder: Vec<Linear>,
    s_head: Option<Linear>,
    decoder: Vec<Linear>,
    decoder_out: Linear,
}

const ENCODE_CHUNK: usize = 256;

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::seeded(seed).fork(0x1417);
        let mut params = ParamSet::new();
        let d = spec.latent_dim;

        let mut encoder = Vec::new();
        let mut width = spec.input_dim;
        for (i, &h) in spec.encoder_hidden.iter().enumerate() {
            encoder.push(Linear::new(&mut params, &format!("enc.{i}"), width, h, &mut rng));
            width = h;
        }
        let head_mu = Linear::constant(&mut params, "enc.mu", width, d, 0.0);
        let head_log_scale = Linear::constant(&mut params, "enc.log_scale", width, d, 0.0);

        let mut s_encoder = Vec::new();
        let mut s_head = None;
        if spec.variant == Variant::EavaeGamma {
            let mut width = spec.input_dim;
            for (i, &h) in spec.s_encoder_hidden.iter().enumerate() {
                s_encoder.push(Linear::new(&mut params, &format!("s_enc.{i}"), width, h, &mut rng));
                width = h;
            }
            s_head = Some(Linear::constant(&mut params, "s_enc.log_theta", width, 1, GAMMA_PRIOR_SCALE.ln()));
        }

        let mut decoder = Vec::new();
        let mut width = spec.z_dim();
        for (i, &h) in spec.decoder_hidden.iter().enumerate() {
            decoder.push(Linear::new(&mut params, &format!("dec.{i}"), width, h, &mut rng));
            width = h;
        }
        let decoder_out = Linear::new(&mut params, "dec.out", width, spec.input_dim, &mut rng);

        Ok(Model {
            spec,
            params,
            encoder,
            head_mu,
            head_log_scale,
            s_encoder,
            s_head,
            decoder,
            decoder_out,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn z_dim(&self) -> usize {
        self.spec.z_dim()
    }

    /// Number of grid axes for generation: z slots plus one for `s` when present.
    pub fn generative_dims(&self) -> usize {
        self.z_dim() + usize::from(self.spec.variant.is_explaining_away())
    }

    fn activate(&self, g: &mut Graph, x: Var) -> Var {
        match self.spec.activation {
            Activation::Softplus => g.softplus(x),
            Activation::Relu => g.relu(x),
        }
    }

    fn mlp(&self, g: &mut Graph, layers: &[Linear], mut h: Var) -> Result<Var> {
        for layer in layers {
            let a = layer.apply(g, &self.params, h)?;
            h = self.activate(g, a);
        }
        Ok(h)
    }

    fn check_rows(&self, data: &[f64], cols: usize, what: &'static str) -> Result<usize> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::Dimension {
                what,
                expected: cols,
                actual: data.len(),
            });
        }
        Ok(data.len() / cols)
    }

    /// Encoder input tensor, mean-centered per image when configured.
    fn encoder_input(&self, x: &[f64]) -> Result<Tensor> {
        let m = self.spec.input_dim;
        let n = self.check_rows(x, m, "encoder input length")?;
        let mut data = x.to_vec();
        if self.spec.center_input {
            for row in data.chunks_mut(m) {
                let mean = row.iter().sum::<f64>() / m as f64;
                row.iter_mut().for_each(|v| *v -= mean);
            }
        }
        Ok(Tensor::new(&[n, m], data)?)
    }

    /// Builds the posterior parameter nodes for a `[rows, M]` input node.
    pub fn encode_graph(&self, g: &mut Graph, x_in: Var) -> Result<GraphEncoding> {
        let h = self.mlp(g, &self.encoder, x_in)?;
        let mu = self.head_mu.apply(g, &self.params, h)?;
        let ls = self.head_log_scale.apply(g, &self.params, h)?;
        let d = self.spec.latent_dim;
        match self.spec.variant {
            Variant::Vae => Ok(GraphEncoding {
                z_mu: mu,
                z_log_scale: ls,
                s: None,
            }),
            Variant::EavaeSoftplusLaplace | Variant::EavaeLognormal => {
                let z_mu = g.slice(mu, 0, d - 1)?;
                let z_log_scale = g.slice(ls, 0, d - 1)?;
                let s_mu = g.slice(mu, d - 1, d)?;
                let s_ls = g.slice(ls, d - 1, d)?;
                let s = if self.spec.variant == Variant::EavaeSoftplusLaplace {
                    SVars::SoftplusLaplace { mu: s_mu, log_b: s_ls }
                } else {
                    SVars::LogNormal { nu: s_mu, log_var: s_ls }
                };
                Ok(GraphEncoding {
                    z_mu,
                    z_log_scale,
                    s: Some(s),
                })
            }
            Variant::EavaeGamma => {
                let hs = self.mlp(g, &self.s_encoder, x_in)?;
                let head = self.s_head.as_ref().expect("gamma variant owns an s head");
                let log_theta = head.apply(g, &self.params, hs)?;
                Ok(GraphEncoding {
                    z_mu: mu,
                    z_log_scale: ls,
                    s: Some(SVars::Gamma { log_theta }),
                })
            }
        }
    }

    /// Pre-output decoder `f(z)` scaled by `s` and passed through `h`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, s: Option<Var>) -> Result<Var> {
        let h = self.mlp(g, &self.decoder, z)?;
        let mut out = self.decoder_out.apply(g, &self.params, h)?;
        if let Some(s) = s {
            out = g.mul(out, s)?;
        }
        Ok(match self.spec.output {
            OutputActivation::Identity => out,
            OutputActivation::Sigmoid => g.sigmoid(out),
        })
    }

    fn sample_z(&self, g: &mut Graph, enc: &GraphEncoding, rng: &mut RngStream) -> Result<Var> {
        match self.spec.z_family {
            ZFamily::Laplace => distributions::rsample_laplace_var(g, enc.z_mu, enc.z_log_scale, rng),
            ZFamily::Normal => distributions::rsample_normal_var(g, enc.z_mu, enc.z_log_scale, rng),
        }
    }

    fn sample_s(&self, g: &mut Graph, s: SVars, rng: &mut RngStream) -> Result<Var> {
        Ok(match s {
            SVars::SoftplusLaplace { mu, log_b } => {
                let u = distributions::rsample_laplace_var(g, mu, log_b, rng)?;
                g.softplus(u)
            }
            SVars::LogNormal { nu, log_var } => {
                let u = distributions::rsample_normal_var(g, nu, log_var, rng)?;
                g.exp(u)
            }
            SVars::Gamma { log_theta } => distributions::rsample_gamma_var(g, log_theta, rng)?,
        })
    }

    fn kl_s(&self, g: &mut Graph, s: SVars) -> Result<Var> {
        let kl = match s {
            SVars::SoftplusLaplace { mu, log_b } => distributions::kl_laplace_var(g, mu, log_b)?,
            SVars::LogNormal { nu, log_var } => distributions::kl_normal_var(g, nu, log_var)?,
            SVars::Gamma { log_theta } => distributions::kl_gamma_var(g, log_theta)?,
        };
        Ok(g.sum_last(kl))
    }

    /// One stochastic pass over a `[rows, M]` batch: encode, sample, decode, score.
    pub fn pass_graph(&self, g: &mut Graph, x: &[f64], rng: &mut RngStream) -> Result<GraphPass> {
        let input = self.encoder_input(x)?;
        let rows = input.shape()[0];
        let x_in = g.constant(input);
        let target = g.constant(Tensor::new(&[rows, self.spec.input_dim], x.to_vec())?);
        let encoding = self.encode_graph(g, x_in)?;
        let z = self.sample_z(g, &encoding, rng)?;
        let s = match encoding.s {
            Some(sv) => Some(self.sample_s(g, sv, rng)?),
            None => None,
        };
        let xhat = self.decode_graph(g, z, s)?;
        let recon = distributions::likelihood_var(g, target, xhat, self.spec.likelihood)?;
        let kl_z = match self.spec.z_family {
            ZFamily::Laplace => distributions::kl_laplace_var(g, encoding.z_mu, encoding.z_log_scale)?,
            ZFamily::Normal => distributions::kl_normal_var(g, encoding.z_mu, encoding.z_log_scale)?,
        };
        let kl_z = g.sum_last(kl_z);
        let kl_s = match encoding.s {
            Some(sv) => Some(self.kl_s(g, sv)?),
            None => None,
        };
        Ok(GraphPass {
            encoding,
            z,
            s,
            xhat,
            recon,
            kl_z,
            kl_s,
        })
    }

    fn s_posteriors(&self, g: &Graph, s: SVars) -> Vec<ScalarSPosterior> {
        match s {
            SVars::SoftplusLaplace { mu, log_b } => g
                .data(mu)
                .iter()
                .zip(g.data(log_b))
                .map(|(&mu, &lb)| ScalarSPosterior::SoftplusLaplace { mu, b: lb.exp() })
                .collect(),
            SVars::LogNormal { nu, log_var } => g
                .data(nu)
                .iter()
                .zip(g.data(log_var))
                .map(|(&nu, &lv)| ScalarSPosterior::LogNormal { nu, var: lv.exp() })
                .collect(),
            SVars::Gamma { log_theta } => g
                .data(log_theta)
                .iter()
                .map(|&lt| ScalarSPosterior::Gamma { theta: lt.exp() })
                .collect(),
        }
    }

    fn encode_chunk(&self, x: &[f64]) -> Result<Encoding> {
        let mut g = Graph::new();
        let input = self.encoder_input(x)?;
        let n = input.shape()[0];
        let x_in = g.constant(input);
        let enc = self.encode_graph(&mut g, x_in)?;
        Ok(Encoding {
            n,
            z_dim: self.z_dim(),
            z_family: self.spec.z_family,
            z_mu: g.data(enc.z_mu).to_vec(),
            z_scale: g.data(enc.z_log_scale).iter().map(|v| v.exp()).collect(),
            s: enc.s.map(|s| self.s_posteriors(&g, s)).unwrap_or_default(),
        })
    }

    /// Deterministic posteriors for a row-major batch of images.
    pub fn encode_batch(&self, x: &[f64]) -> Result<Encoding> {
        let m = self.spec.input_dim;
        let n = self.check_rows(x, m, "encoder input length")?;
        let parts: Vec<Encoding> = x
            .par_chunks(ENCODE_CHUNK * m)
            .map(|chunk| self.encode_chunk(chunk))
            .collect::<Result<_>>()?;
        let mut out = Encoding {
            n,
            z_dim: self.z_dim(),
            z_family: self.spec.z_family,
            z_mu: Vec::with_capacity(n * self.z_dim()),
            z_scale: Vec::with_capacity(n * self.z_dim()),
            s: Vec::new(),
        };
        for p in parts {
            out.z_mu.extend(p.z_mu);
            out.z_scale.extend(p.z_scale);
            out.s.extend(p.s);
        }
        Ok(out)
    }

    /// Posteriors of one image.
    pub fn encode(&self, x: &[f64]) -> Result<(PosteriorParams, Option<ScalarSPosterior>)> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                what: "image length",
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        let enc = self.encode_chunk(x)?;
        Ok((enc.posterior(0), enc.s.first().copied()))
    }

    /// Decodes row-major `z` (`[n, z_dim]`) with optional per-row `s`.
    pub fn decode(&self, z: &[f64], s: Option<&[f64]>) -> Result<Vec<f64>> {
        let dz = self.z_dim();
        let n = self.check_rows(z, dz, "latent sample length")?;
        if self.spec.variant.is_explaining_away() != s.is_some() {
            return Err(Error::invalid(format!(
                "{:?} decoder {} a scale sample",
                self.spec.variant,
                if s.is_some() { "does not take" } else { "needs" }
            )));
        }
        let m = self.spec.input_dim;
        let rows: Vec<usize> = (0..n).collect();
        let parts: Vec<Vec<f64>> = rows
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| {
                let (a, b) = (chunk[0], chunk[chunk.len() - 1] + 1);
                let mut g = Graph::new();
                let zv = g.constant(Tensor::new(&[b - a, dz], z[a * dz..b * dz].to_vec())?);
                let sv = match s {
                    Some(s) => {
                        if s.len() != n {
                            return Err(Error::Dimension {
                                what: "scale sample count",
                                expected: n,
                                actual: s.len(),
                            });
                        }
                        Some(g.constant(Tensor::new(&[b - a, 1], s[a..b].to_vec())?))
                    }
                    None => None,
                };
                let out = self.decode_graph(&mut g, zv, sv)?;
                Ok(g.data(out).to_vec())
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(n * m);
        parts.into_iter().for_each(|p| out.extend(p));
        Ok(out)
    }

    /// Single image from one latent point.
    pub fn generate(&self, z: &[f64], s: Option<f64>) -> Result<Vec<f64>> {
        if z.len() != self.z_dim() {
            return Err(Error::Dimension {
                what: "latent point",
                expected: self.z_dim(),
                actual: z.len(),
            });
        }
        self.decode(z, s.as_ref().map(std::slice::from_ref))
    }

    /// Single-sample stochastic forward of one image.
    pub fn forward(&self, x: &[f64], rng: &mut RngStream) -> Result<ForwardResult> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                what: "image length",
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        let mut g = Graph::new();
        let pass = self.pass_graph(&mut g, x, rng)?;
        let enc = &pass.encoding;
        let posterior_z = PosteriorParams::from_log_scale(self.spec.z_family, g.data(enc.z_mu).to_vec(), g.data(enc.z_log_scale));
        Ok(ForwardResult {
            posterior_z,
            posterior_s: enc.s.map(|s| self.s_posteriors(&g, s)[0]),
            z_sample: g.data(pass.z).to_vec(),
            s_sample: pass.s.map(|s| g.data(s)[0]),
            reconstruction: g.data(pass.xhat).to_vec(),
            recon_loss: g.data(pass.recon)[0],
            kl_z: g.data(pass.kl_z)[0],
            kl_s: pass.kl_s.map(|k| g.data(k)[0]),
        })
    }

    /// Contrast of decoded images over the Cartesian product of per-slot axes.
    /// Axis order: z slots, then `s` for explaining-away variants.
    pub fn latent_grid_contrast(&self, axes: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>> {
        if axes.len() != self.generative_dims() {
            return Err(Error::Dimension {
                what: "latent grid axes",
                expected: self.generative_dims(),
                actual: axes.len(),
            });
        }
        if axes.iter().any(|a| a.is_empty()) {
            return Err(Error::invalid("latent grid axes must be nonempty"));
        }
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        self.contrast_at(points)
    }

    /// Contrast on `n` random directions of the z-shell at `radius`, with `s` fixed.
    pub fn shell_contrast(&self, radius: f64, n: usize, s: Option<f64>, rng: &mut RngStream) -> Result<Vec<(Vec<f64>, f64)>> {
        let dz = self.z_dim();
        let points = (0..n)
            .map(|_| {
                let mut v = rng.normals(dz);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                v.iter_mut().for_each(|x| *x *= radius / norm);
                if let Some(s) = s {
                    v.push(s);
                }
                v
            })
            .collect();
        self.contrast_at(points)
    }

    fn contrast_at(&self, points: Vec<Vec<f64>>) -> Result<Vec<(Vec<f64>, f64)>> {
        let dz = self.z_dim();
        let ea = self.spec.variant.is_explaining_away();
        let z: Vec<f64> = points.iter().flat_map(|p| p[..dz].iter().copied()).collect();
        let s: Option<Vec<f64>> = ea.then(|| points.iter().map(|p| p[dz]).collect());
        let images = self.decode(&z, s.as_deref())?;
        Ok(points
            .into_iter()
            .zip(images.chunks(self.spec.input_dim))
            .map(|(p, img)| (p, pixel_std(img)))
            .collect())
    }
}
