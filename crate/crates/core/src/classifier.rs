//! Digit classifier on posterior samples and its predictive entropy.

use ndgrad::{AdamConfig, AdamState, Graph, ParamId, ParamSet, RngStream, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Encoding, Model};
use crate::stats::{self, TTest};

pub const N_CLASSES: usize = 10;
pub const ENTROPY_SAMPLES: usize = 64;

fn default_hidden() -> Vec<usize> {
    vec![50, 50]
}
fn default_epochs() -> usize {
    1000
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Draw fresh posterior samples every epoch.
    #[serde(default = "default_true")]
    pub resample: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            hidden: default_hidden(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            resample: true,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("classifier epochs, batch size and widths must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("classifier lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    input_dim: usize,
    params: ParamSet,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = RngStream::seeded(seed).fork(0xC1A5);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for (i, &fan_out) in hidden.iter().chain(std::iter::once(&N_CLASSES)).enumerate() {
            let a = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform_range(-a, a)).collect();
            layers.push((
                params.add(format!("mlp.{i}.w"), Tensor::new(&[fan_in, fan_out], w).expect("sized")),
                params.add(format!("mlp.{i}.b"), Tensor::vector(b)),
            ));
            fan_in = fan_out;
        }
        Mlp { input_dim, params, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn logits_graph(&self, g: &mut Graph, x: &[f64], rows: usize) -> Result<ndgrad::Var> {
        let mut h = g.constant(Tensor::new(&[rows, self.input_dim], x.to_vec())?);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
            h = g.affine(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Row-major logits `[rows, 10]`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let rows = self.rows(x)?;
        let mut g = Graph::new();
        let out = self.logits_graph(&mut g, x, rows)?;
        Ok(g.data(out).to_vec())
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(ndgrad::linalg::softmax_rows(&self.logits(x)?, N_CLASSES))
    }

    fn rows(&self, x: &[f64]) -> Result<usize> {
        if x.is_empty() || x.len() % self.input_dim != 0 {
            return Err(Error::Dimension {
                what: "classifier input length",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(x.len() / self.input_dim)
    }
}

/// Width of a posterior sample fed to the classifier: `z` plus `s` when present.
pub fn feature_dim(model: &Model) -> usize {
    model.z_dim() + usize::from(model.spec().variant.is_explaining_away())
}

/// One joint posterior sample per encoded image, row-major `[n, feature_dim]`.
pub fn posterior_features(enc: &Encoding, rng: &mut RngStream) -> Result<Vec<f64>> {
    let width = enc.z_dim + usize::from(!enc.s.is_empty());
    let mut out = Vec::with_capacity(enc.n * width);
    for i in 0..enc.n {
        out.extend(enc.posterior(i).rsample(rng)?);
        if let Some(s) = enc.s.get(i) {
            out.push(s.rsample(rng)?);
        }
    }
    Ok(out)
}

fn check_labels(labels: &[u8]) -> Result<()> {
    let mut seen = [false; 256];
    labels.iter().for_each(|&l| seen[l as usize] = true);
    let distinct = seen.iter().filter(|&&s| s).count();
    if distinct != N_CLASSES || labels.iter().any(|&l| l as usize >= N_CLASSES) {
        return Err(Error::invalid(format!(
            "classifier needs labels 0..{N_CLASSES}, found {distinct} distinct label(s)"
        )));
    }
    Ok(())
}

/// Cross-entropy training on features produced per epoch by `features(epoch)`.
pub fn train_on_features<F>(input_dim: usize, labels: &[u8], spec: &MlpSpec, seed: u64, mut features: F) -> Result<Mlp>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    spec.validate()?;
    check_labels(labels)?;
    let n = labels.len();
    let mut mlp = Mlp::new(input_dim, &spec.hidden, seed);
    let mut adam = AdamState::new(&mlp.params, AdamConfig::with_lr(spec.lr));
    let master = RngStream::seeded(seed).fork(0x7EA1);
    let mut x = features(0)?;
    for epoch in 0..spec.epochs {
        if spec.resample && epoch > 0 {
            x = features(epoch)?;
        }
        if x.len() != n * input_dim {
            return Err(Error::Dimension {
                what: "classifier feature matrix",
                expected: n * input_dim,
                actual: x.len(),
            });
        }
        let order = master.fork(epoch as u64).permutation(n);
        for batch in order.chunks(spec.batch_size) {
            let bx: Vec<f64> = batch.iter().flat_map(|&i| x[i * input_dim..(i + 1) * input_dim].iter().copied()).collect();
            let mut onehot = vec![0.0; batch.len() * N_CLASSES];
            batch.iter().enumerate().for_each(|(r, &i)| onehot[r * N_CLASSES + labels[i] as usize] = 1.0);
            let mut g = Graph::new();
            let logits = mlp.logits_graph(&mut g, &bx, batch.len())?;
            let logp = g.log_softmax(logits);
            let t = g.constant(Tensor::new(&[batch.len(), N_CLASSES], onehot)?);
            let picked = g.mul(logp, t)?;
            let total = g.sum(picked);
            let loss = g.scale(total, -1.0 / batch.len() as f64);
            if !g.item(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: 0,
                    detail: "classifier cross-entropy".into(),
                });
            }
            mlp.params.zero_grad();
            g.backward_into(loss, &mut mlp.params)?;
            adam.step(&mut mlp.params)?;
        }
    }
    Ok(mlp)
}

/// Trains on posterior samples of a frozen model, resampled every epoch.
pub fn train_mlp(model: &Model, ds: &Dataset, spec: &MlpSpec, seed: u64) -> Result<Mlp> {
    let labels = ds.labels.as_deref().ok_or_else(|| Error::invalid("classifier needs a labeled dataset"))?;
    check_labels(labels)?;
    let enc = model.encode_batch(&ds.images)?;
    let master = RngStream::seeded(seed).fork(0x5A3F);
    train_on_features(feature_dim(model), labels, spec, seed, |epoch| {
        posterior_features(&enc, &mut master.fork(epoch as u64))
    })
}

/// Fraction of images whose entropy-averaged prediction matches the label.
pub fn accuracy(mlp: &Mlp, model: &Model, ds: &Dataset, n_samples: usize, seed: u64) -> Result<f64> {
    let labels = ds.labels.as_deref().ok_or_else(|| Error::invalid("accuracy needs a labeled dataset"))?;
    let reports = predict_batch(mlp, model, &ds.images, n_samples, seed)?;
    let hits = reports.iter().zip(labels).filter(|(r, &l)| r.label == l as usize).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionReport {
    pub mean_probs: Vec<f64>,
    pub entropy: f64,
    pub label: usize,
}

impl PredictionReport {
    pub fn from_mean(mean_probs: Vec<f64>) -> Self {
        let label = (0..mean_probs.len()).max_by(|&a, &b| mean_probs[a].total_cmp(&mean_probs[b]).then(b.cmp(&a))).unwrap_or(0);
        PredictionReport {
            entropy: entropy(&mean_probs),
            mean_probs,
            label,
        }
    }
}

fn report_from_encoding(mlp: &Mlp, enc: &Encoding, i: usize, n_samples: usize, rng: &mut RngStream) -> Result<PredictionReport> {
    let post = enc.posterior(i);
    let s = enc.s.get(i);
    let mut x = Vec::with_capacity(n_samples * mlp.input_dim);
    for _ in 0..n_samples {
        x.extend(post.rsample(rng)?);
        if let Some(s) = s {
            x.push(s.rsample(rng)?);
        }
    }
    let probs = mlp.probabilities(&x)?;
    let mut mean = vec![0.0; N_CLASSES];
    for row in probs.chunks(N_CLASSES) {
        mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= n_samples as f64);
    Ok(PredictionReport::from_mean(mean))
}

/// Averaged prediction over `n_samples` posterior draws for one image.
pub fn predictive_entropy(mlp: &Mlp, model: &Model, image: &[f64], n_samples: usize, seed: u64) -> Result<PredictionReport> {
    if n_samples == 0 {
        return Err(Error::invalid("predictive entropy needs at least one sample"));
    }
    let enc = model.encode_batch(image)?;
    report_from_encoding(mlp, &enc, 0, n_samples, &mut RngStream::seeded(seed).fork(0))
}

/// Reports for a row-major batch; image `i` uses its own stream so results
/// do not depend on scheduling.
pub fn predict_batch(mlp: &Mlp, model: &Model, images: &[f64], n_samples: usize, seed: u64) -> Result<Vec<PredictionReport>> {
    if n_samples == 0 {
        return Err(Error::invalid("predictive entropy needs at least one sample"));
    }
    let enc = model.encode_batch(images)?;
    let master = RngStream::seeded(seed);
    (0..enc.n)
        .into_par_iter()
        .map(|i| report_from_encoding(mlp, &enc, i, n_samples, &mut master.fork(i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyCurve {
    pub a: u8,
    pub b: u8,
    pub entropies: Vec<f64>,
}

/// Intermediate morph range whose entropies are summed for the comparison.
pub const INTERMEDIATE: (f64, f64) = (0.25, 0.75);

/// Entropy along the morph between every unordered pair of prototypes.
pub fn morph_entropies(
    mlp: &Mlp,
    model: &Model,
    prototypes: &[(u8, Vec<f64>)],
    lambdas: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<EntropyCurve>> {
    let mut curves = Vec::new();
    for (ia, (la, xa)) in prototypes.iter().enumerate() {
        for (lb, xb) in &prototypes[ia + 1..] {
            let mut batch = Vec::with_capacity(lambdas.len() * xa.len());
            for &l in lambdas {
                batch.extend(crate::data::morph(xa, xb, l)?);
            }
            let pair_seed = seed ^ ((*la as u64) << 8 | *lb as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let entropies = predict_batch(mlp, model, &batch, n_samples, pair_seed)?.into_iter().map(|r| r.entropy).collect();
            curves.push(EntropyCurve { a: *la, b: *lb, entropies });
        }
    }
    Ok(curves)
}

pub fn intermediate_sum(curve: &EntropyCurve, lambdas: &[f64]) -> f64 {
    lambdas
        .iter()
        .zip(&curve.entropies)
        .filter(|(l, _)| **l >= INTERMEDIATE.0 && **l <= INTERMEDIATE.1)
        .map(|(_, h)| h)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyComparison {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub test: TTest,
}

/// Paired t-test of summed intermediate entropy, `first − second`, matched by label pair.
pub fn compare_entropy_curves(first: &[EntropyCurve], second: &[EntropyCurve], lambdas: &[f64]) -> Result<EntropyComparison> {
    if first.len() != second.len() || first.iter().zip(second).any(|(a, b)| (a.a, a.b) != (b.a, b.b)) {
        return Err(Error::invalid("entropy curves must cover the same label pairs in the same order"));
    }
    let f: Vec<f64> = first.iter().map(|c| intermediate_sum(c, lambdas)).collect();
    let s: Vec<f64> = second.iter().map(|c| intermediate_sum(c, lambdas)).collect();
    let test = stats::paired_t(&f, &s)?;
    Ok(EntropyComparison { first: f, second: s, test })
}
