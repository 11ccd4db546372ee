//! Objective assembly, the optimization loop with early stopping, and
//! checkpoint persistence.

use std::io::Write;
use std::path::Path;

use ndgrad::{AdamConfig, AdamState, Graph, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EAVAECP1";
pub const LOSS_LOG_HEADER: &str = "epoch,recon,kl_z,kl_s,total,val_total";

/// Piecewise-linear schedule over epochs, held constant outside its knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<(f64, f64)>);

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule(vec![(0.0, value)])
    }

    pub fn ramp(start_epoch: f64, from: f64, end_epoch: f64, to: f64) -> Self {
        Schedule(vec![(start_epoch, from), (end_epoch, to)])
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid(format!("{what}: schedule needs at least one point")));
        }
        if self.0.iter().any(|&(e, v)| !e.is_finite() || !v.is_finite() || v < 0.0) {
            return Err(Error::invalid(format!("{what}: schedule values must be finite and non-negative")));
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid(format!("{what}: schedule epochs must be strictly increasing")));
        }
        Ok(())
    }

    pub fn value(&self, epoch: f64) -> f64 {
        let pts = &self.0;
        if epoch <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((e0, v0), (e1, v1)) = (w[0], w[1]);
            if epoch <= e1 {
                return v0 + (epoch - e0) / (e1 - e0) * (v1 - v0);
            }
        }
        pts[pts.len() - 1].1
    }

    pub fn final_value(&self) -> f64 {
        self.0[self.0.len() - 1].1
    }

    /// Converts a β′ schedule (loss written as SSE + β′·KL) into the β that
    /// multiplies the KL when the likelihood keeps its 1/(2σ²) factor.
    pub fn from_beta_prime(&self, sigma_obs: f64) -> Self {
        let k = 1.0 / (2.0 * sigma_obs * sigma_obs);
        Schedule(self.0.iter().map(|&(e, v)| (e, v * k)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta1: Schedule,
    pub beta2: Schedule,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Gradient-norm clip; off when `None`.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.beta1.validate("train.beta1")?;
        self.beta2.validate("train.beta2")?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("train.weight_decay must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train.epochs and train.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("train.val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn betas(&self, epoch: usize) -> (f64, f64) {
        (self.beta1.value(epoch as f64), self.beta2.value(epoch as f64))
    }

    pub fn final_betas(&self) -> (f64, f64) {
        (self.beta1.final_value(), self.beta2.final_value())
    }
}

/// Batch-mean loss terms. KL terms are reported already multiplied by their
/// β so that `recon + kl_z + kl_s == total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_s: f64,
    pub total: f64,
    pub kl_z_raw: f64,
    pub kl_s_raw: f64,
}

impl LossBreakdown {
    fn add_weighted(&mut self, other: &LossBreakdown, w: f64) {
        self.recon += w * other.recon;
        self.kl_z += w * other.kl_z;
        self.kl_s += w * other.kl_s;
        self.total += w * other.total;
        self.kl_z_raw += w * other.kl_z_raw;
        self.kl_s_raw += w * other.kl_s_raw;
    }
}

/// Builds `mean(recon + β₁·KL_z + β₂·KL_s)` on `g` and returns the scalar node.
pub fn elbo_graph(
    g: &mut Graph,
    model: &Model,
    x: &[f64],
    betas: (f64, f64),
    rng: &mut RngStream,
) -> Result<(Var, LossBreakdown)> {
    let pass = model.pass_graph(g, x, rng)?;
    let wz = g.scale(pass.kl_z, betas.0);
    let mut rows = g.add(pass.recon, wz)?;
    if let Some(ks) = pass.kl_s {
        let ws = g.scale(ks, betas.1);
        rows = g.add(rows, ws)?;
    }
    let total = g.mean(rows);
    let mean = |g: &Graph, v: Var| g.data(v).iter().sum::<f64>() / g.data(v).len() as f64;
    let recon = mean(g, pass.recon);
    let kl_z_raw = mean(g, pass.kl_z);
    let kl_s_raw = pass.kl_s.map(|v| mean(g, v)).unwrap_or(0.0);
    Ok((
        total,
        LossBreakdown {
            recon,
            kl_z: betas.0 * kl_z_raw,
            kl_s: betas.1 * kl_s_raw,
            total: g.item(total),
            kl_z_raw,
            kl_s_raw,
        },
    ))
}

/// Loss of a batch at the schedule values of `epoch`.
pub fn elbo_loss(model: &Model, x: &[f64], epoch: usize, config: &TrainConfig, rng: &mut RngStream) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    Ok(elbo_graph(&mut g, model, x, config.betas(epoch), rng)?.1)
}

const EVAL_CHUNK: usize = 512;

/// Mean loss over a whole image set, evaluated chunk by chunk with a fixed stream.
pub fn evaluate_loss(model: &Model, x: &[f64], betas: (f64, f64), seed: u64) -> Result<LossBreakdown> {
    let m = model.spec().input_dim;
    let n = x.len() / m;
    if n == 0 {
        return Err(Error::invalid("cannot evaluate the loss of an empty set"));
    }
    let mut rng = RngStream::seeded(seed).fork(0xE7A1);
    let mut acc = LossBreakdown::default();
    for chunk in x.chunks(EVAL_CHUNK * m) {
        let mut g = Graph::new();
        let (_, terms) = elbo_graph(&mut g, model, chunk, betas, &mut rng)?;
        acc.add_weighted(&terms, (chunk.len() / m) as f64 / n as f64);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_s: f64,
    pub total: f64,
    pub val_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Index of the smallest value, earliest on ties.
pub fn argmin_earliest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains `model` on row-major `train` images and selects the epoch with the
/// best validation loss. Validation uses the final schedule values so that
/// losses are comparable across annealing epochs.
pub fn train(mut model: Model, train: &[f64], val: &[f64], config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    let m = model.spec().input_dim;
    if train.is_empty() || train.len() % m != 0 || val.len() % m != 0 {
        return Err(Error::invalid("training data must be a nonempty whole number of images"));
    }
    let n = train.len() / m;
    let val_set = if val.is_empty() { train } else { val };
    let master = RngStream::seeded(config.seed);
    let adam_cfg = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::with_lr(config.lr)
    };
    let mut adam = AdamState::new(model.params(), adam_cfg);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut since_best = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size * m);

    for epoch in 0..config.epochs {
        let betas = config.betas(epoch);
        let mut order_rng = master.fork(2 * epoch as u64 + 1);
        let mut noise_rng = master.fork(2 * epoch as u64 + 2);
        let order = order_rng.permutation(n);
        let mut acc = LossBreakdown::default();
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            for &i in idx {
                batch.extend_from_slice(&train[i * m..(i + 1) * m]);
            }
            model.params_mut().zero_grad();
            let mut g = Graph::new();
            let (loss, terms) = elbo_graph(&mut g, &model, &batch, betas, &mut noise_rng)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("recon={} kl_z={} kl_s={}", terms.recon, terms.kl_z, terms.kl_s),
                });
            }
            g.backward_into(loss, model.params_mut())?;
            if let Some(max) = config.clip_grad_norm {
                model.params_mut().clip_grad_norm(max);
            }
            adam.step(model.params_mut())?;
            acc.add_weighted(&terms, idx.len() as f64 / n as f64);
        }
        let val_loss = evaluate_loss(&model, val_set, config.final_betas(), config.seed)?.total;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: usize::MAX,
                detail: "validation loss".into(),
            });
        }
        log.push(EpochLog {
            epoch,
            recon: acc.recon,
            kl_z: acc.kl_z,
            kl_s: acc.kl_s,
            total: acc.total,
            val_total: val_loss,
        });
        log::debug!("epoch {epoch}: train {:.6} val {:.6}", acc.total, val_loss);
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params().iter().map(|(_, _, t)| t.data().to_vec()).collect()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch ran");
    for (t, data) in model.params_mut().tensors_mut().zip(snapshot) {
        t.data_mut().copy_from_slice(&data);
    }
    let checkpoint = Checkpoint::from_model(&model, config.clone(), best_epoch, best_val_loss);
    Ok(TrainResult { model, checkpoint, log })
}

/// Writes the per-epoch log as CSV, preceded by `# key=value` provenance lines.
pub fn write_loss_log(path: &Path, log: &[EpochLog], provenance: &[(String, String)]) -> Result<()> {
    let mut out = Vec::new();
    for (k, v) in provenance {
        writeln!(out, "# {k}={v}").expect("in-memory write");
    }
    writeln!(out, "{LOSS_LOG_HEADER}").expect("in-memory write");
    for e in log {
        writeln!(out, "{},{},{},{},{},{}", e.epoch, e.recon, e.kl_z, e.kl_s, e.total, e.val_total).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelSpec,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
    best_epoch: usize,
    best_val_loss: f64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
    /// `(name, shape, data)` in declaration order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: TrainConfig, best_epoch: usize, best_val_loss: f64) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            seed: config.seed,
            config,
            best_epoch,
            best_val_loss,
            tensors: model
                .params()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
                .collect(),
        }
    }

    /// Rebuilds the model, checking names and shapes against a fresh construction.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.spec.clone(), self.seed)?;
        if model.params().len() != self.tensors.len() {
            return Err(Error::Dimension {
                what: "checkpoint tensor count",
                expected: model.params().len(),
                actual: self.tensors.len(),
            });
        }
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for ((name, shape), (cname, cshape, _)) in expected.iter().zip(&self.tensors) {
            if name != cname || shape != cshape {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {cname} {cshape:?} does not match model tensor {name} {shape:?}"
                )));
            }
        }
        for (t, (_, _, data)) in model.params_mut().tensors_mut().zip(&self.tensors) {
            *t = Tensor::new(t.shape(), data.clone())?.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // JSON has no NaN/inf; such a header would write but never load
        if !self.best_val_loss.is_finite() {
            return Err(Error::invalid(format!("checkpoint loss must be finite, got {}", self.best_val_loss)));
        }
        let (header, blob) = self.header_and_blob();
        container::encode(CHECKPOINT_MAGIC, &serde_json::to_value(header)?, &blob)
    }

    fn header_and_blob(&self) -> (CheckpointHeader, Vec<f64>) {
        let mut offset = 0;
        let mut blob = Vec::new();
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                blob.extend_from_slice(data);
                e
            })
            .collect();
        (
            CheckpointHeader {
                model: self.spec.clone(),
                train: self.config.clone(),
                tensors,
                best_epoch: self.best_epoch,
                best_val_loss: self.best_val_loss,
                seed: self.seed,
            },
            blob,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (header, blob) = self.header_and_blob();
        container::write(path, CHECKPOINT_MAGIC, &serde_json::to_value(header)?, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (header, blob) = container::decode(path, CHECKPOINT_MAGIC, bytes)?;
        let header: CheckpointHeader = serde_json::from_value(header).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("bad checkpoint header: {e}"),
        })?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if numel != e.len || e.offset != expected_offset {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("inconsistent shape table entry for {}", e.name),
                });
            }
            let data = blob.get(e.offset..e.offset + e.len).ok_or_else(|| Error::Truncated {
                path: path.display().to_string(),
                detail: format!("blob ends before tensor {}", e.name),
            })?;
            tensors.push((e.name.clone(), e.shape.clone(), data.to_vec()));
            expected_offset += e.len;
        }
        if expected_offset != blob.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("blob holds {} values, shape table describes {}", blob.len(), expected_offset),
            });
        }
        Ok(Checkpoint {
            spec: header.model,
            config: header.train,
            best_epoch: header.best_epoch,
            best_val_loss: header.best_val_loss,
            seed: header.seed,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_vae_schedule() {
        let s = Schedule::ramp(100.0, 0.01, 200.0, 1.0);
        assert_eq!(s.value(0.0), 0.01);
        assert_eq!(s.value(100.0), 0.01);
        assert!((s.value(150.0) - 0.505).abs() < 1e-15);
        assert_eq!(s.value(200.0), 1.0);
        assert_eq!(s.value(4000.0), 1.0);
        let b2 = Schedule::ramp(100.0, 10.0, 200.0, 1.0);
        assert_eq!(b2.value(50.0), 10.0);
        assert!((b2.value(150.0) - 5.5).abs() < 1e-15);
        assert_eq!(b2.value(200.0), 1.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule(vec![]).validate("b").is_err());
        assert!(Schedule(vec![(1.0, 1.0), (1.0, 2.0)]).validate("b").is_err());
        assert!(Schedule(vec![(0.0, -1.0)]).validate("b").is_err());
        assert!(Schedule::constant(2.0).validate("b").is_ok());
    }

    #[test]
    fn beta_prime_conversion() {
        // β′ = 2σ²β
        let s = Schedule::constant(0.125).from_beta_prime(0.25);
        assert!((s.value(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmin_ties_go_to_earliest() {
        assert_eq!(argmin_earliest(&[3.0, 1.0, 2.0, 1.0]), Some(1));
        assert_eq!(argmin_earliest(&[f64::NAN, 2.0]), Some(1));
        assert_eq!(argmin_earliest(&[]), None);
    }
}
