//! Batch driver: JSON run configs, dataset materialization and one
//! subcommand per experiment. Every output file carries a provenance
//! block (config hash, checkpoint hash, seed, tool version).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndgrad::RngStream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::classifier::{self, MlpSpec};
use crate::data::{self, Dataset, GainDist, GsmSpec, PixelRange};
use crate::error::{Error, Result};
use crate::eval::{self, CorruptionKind};
use crate::models::{Encoding, Model, ModelSpec};
use crate::stats;
use crate::training::{self, Checkpoint, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Gsm,
    Digits,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub gain: GainDist,
    pub noise_std: f64,
    #[serde(default = "ten")]
    pub factor: usize,
}

fn ten() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub gsm: Option<GsmSpec>,
    #[serde(default)]
    pub idx: Option<IdxFiles>,
    /// Contrast augmentation applied to both splits (test split with factor 1).
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Rescale intensities so mean ± 3 std spans [0, 1].
    #[serde(default)]
    pub rescale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitSelection {
    Informative,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodProbe {
    /// Pixel-shuffled test images.
    Shuffle,
    /// The pixelwise average test image.
    Average,
    /// Gaussian white noise matched to the test intensity statistics.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bins: usize,
    pub units: UnitSelection,
    pub max_contrast: Option<f64>,
    /// Use at most this many test images.
    pub max_images: Option<usize>,
    pub lambdas: usize,
    pub blur_levels: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub ood_probes: Vec<OodProbe>,
    pub dn_fits: usize,
    pub dn_fraction: f64,
    pub bowtie_pairs: usize,
    pub grid_points: usize,
    pub grid_limit: f64,
    /// `s` values for the latent grid of explaining-away models.
    pub grid_s: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bins: 30,
            units: UnitSelection::Informative,
            max_contrast: None,
            max_images: None,
            lambdas: 21,
            blur_levels: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            noise_levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ood_probes: vec![OodProbe::Shuffle, OodProbe::Average, OodProbe::Noise],
            dn_fits: 5,
            dn_fraction: 0.8,
            bowtie_pairs: 100,
            grid_points: 7,
            grid_limit: 2.0,
            grid_s: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub mlp: MlpSpec,
    pub entropy_samples: usize,
    /// Another run directory whose `morph_entropy.csv` is compared by paired t-test.
    pub reference_run: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            mlp: MlpSpec::default(),
            entropy_samples: classifier::ENTROPY_SAMPLES,
            reference_run: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Defaults to `<out>/checkpoint.bin`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// Every accepted dotted key, as listed in `--help`.
pub const ACCEPTED_KEYS: &[&str] = &[
    "seed",
    "checkpoint",
    "data.source",
    "data.n_train",
    "data.n_test",
    "data.gsm.side",
    "data.gsm.k",
    "data.gsm.mixing",
    "data.gsm.mixing_seed",
    "data.gsm.noise_std",
    "data.gsm.amplitude",
    "data.idx.train_images",
    "data.idx.train_labels",
    "data.idx.test_images",
    "data.idx.test_labels",
    "data.augment.gain.kind",
    "data.augment.gain.c",
    "data.augment.gain.mu",
    "data.augment.gain.sigma",
    "data.augment.gain.min",
    "data.augment.gain.max",
    "data.augment.noise_std",
    "data.augment.factor",
    "data.rescale",
    "model.variant",
    "model.input_dim",
    "model.latent_dim",
    "model.encoder_hidden",
    "model.decoder_hidden",
    "model.s_encoder_hidden",
    "model.activation",
    "model.z_family",
    "model.likelihood.family",
    "model.likelihood.sigma_obs",
    "model.output",
    "model.center_input",
    "train.beta1",
    "train.beta2",
    "train.lr",
    "train.weight_decay",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.patience",
    "train.val_fraction",
    "train.clip_grad_norm",
    "eval.bins",
    "eval.units",
    "eval.max_contrast",
    "eval.max_images",
    "eval.lambdas",
    "eval.blur_levels",
    "eval.noise_levels",
    "eval.ood_probes",
    "eval.dn_fits",
    "eval.dn_fraction",
    "eval.bowtie_pairs",
    "eval.grid_points",
    "eval.grid_limit",
    "eval.grid_s",
    "classifier.mlp.hidden",
    "classifier.mlp.epochs",
    "classifier.mlp.batch_size",
    "classifier.mlp.lr",
    "classifier.mlp.resample",
    "classifier.entropy_samples",
    "classifier.reference_run",
];

/// `--help` epilogue: accepted keys grouped by parent, plus exit codes.
pub fn keys_help() -> String {
    let mut groups: Vec<(&str, Vec<&str>)> = Vec::new();
    for key in ACCEPTED_KEYS {
        let (parent, leaf) = key.rsplit_once('.').unwrap_or(("", key));
        match groups.iter_mut().find(|(p, _)| *p == parent) {
            Some((_, leaves)) => leaves.push(leaf),
            None => groups.push((parent, vec![leaf])),
        }
    }
    let mut out = String::from("Config keys (JSON; override with --set KEY=VALUE, VALUE parsed as JSON or else taken as a string):\n");
    for (parent, leaves) in groups {
        let _ = match parent {
            "" => writeln!(out, "  {}", leaves.join(", ")),
            p => writeln!(out, "  {p}.{{{}}}", leaves.join(",")),
        };
    }
    out.push_str("\nExit codes: 0 success, 1 runtime failure, 2 missing config, 3 invalid key, 4 missing checkpoint.");
    out
}

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub enum CliError {
    MissingConfig(String),
    InvalidKey { key: String, detail: String, suggestion: Option<String> },
    MissingCheckpoint(PathBuf),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(_) => 1,
            CliError::MissingConfig(_) => 2,
            CliError::InvalidKey { .. } => 3,
            CliError::MissingCheckpoint(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Run(_) => "runtime",
            CliError::MissingConfig(_) => "missing-config",
            CliError::InvalidKey { .. } => "invalid-key",
            CliError::MissingCheckpoint(_) => "missing-checkpoint",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Run(e) => e.to_string(),
            CliError::MissingConfig(m) => m.clone(),
            CliError::InvalidKey { key, detail, suggestion } => match suggestion {
                Some(s) => format!("invalid key `{key}`: {detail} (did you mean `{s}`?)"),
                None => format!("invalid key `{key}`: {detail}"),
            },
            CliError::MissingCheckpoint(p) => format!("checkpoint not found: {}", p.display()),
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.message(),
        });
        if let CliError::InvalidKey { key, suggestion, .. } = self {
            v["key"] = json!(key);
            v["suggestion"] = json!(suggestion);
        }
        v
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn nearest_key(key: &str) -> Option<String> {
    ACCEPTED_KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= key.len().max(4) / 2 + 2)
        .map(|(_, k)| k.to_string())
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::InvalidKey {
            key: key.to_string(),
            detail: "empty path segment".into(),
            suggestion: nearest_key(key),
        });
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(map) => map,
            other if other.is_null() => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just set")
            }
            _ => {
                return Err(CliError::InvalidKey {
                    key: key.to_string(),
                    detail: format!("`{}` is not an object", parts[..i].join(".")),
                    suggestion: nearest_key(key),
                })
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn parse_set(arg: &str) -> CliResult<(String, Value)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| CliError::InvalidKey {
        key: arg.to_string(),
        detail: "expected KEY=VALUE".into(),
        suggestion: None,
    })?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Unknown-field errors name the offending dotted key; other type errors map to exit 3 as well.
fn deserialize_config(value: Value) -> CliResult<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        // the path already ends at the offending field
        let key = e.path().to_string();
        let inner = e.into_inner().to_string();
        CliError::InvalidKey {
            suggestion: nearest_key(&key).filter(|s| *s != key),
            key,
            detail: inner,
        }
    })
}

/// Resolved configuration plus the canonical JSON it was parsed from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub value: Value,
    pub hash: String,
}

pub fn config_from_value(mut value: Value, sets: &[String], seed: Option<u64>) -> CliResult<LoadedConfig> {
    for s in sets {
        let (k, v) = parse_set(s)?;
        set_dotted(&mut value, &k, v)?;
    }
    if let Some(seed) = seed {
        set_dotted(&mut value, "seed", json!(seed))?;
        set_dotted(&mut value, "train.seed", json!(seed))?;
    }
    if value.get("train").is_some_and(|t| t.get("seed").is_none()) {
        let top = value.get("seed").cloned().unwrap_or(json!(0));
        set_dotted(&mut value, "train.seed", top)?;
    }
    let config = deserialize_config(value.clone())?;
    config.model.validate()?;
    config.train.validate()?;
    config.classifier.mlp.validate()?;
    // canonical form: serde_json maps are key-sorted
    let value = serde_json::to_value(&config).map_err(Error::from)?;
    let hash = sha256_hex(serde_json::to_string(&value).map_err(Error::from)?.as_bytes());
    Ok(LoadedConfig { config, value, hash })
}

pub fn load_config(path: &Path, sets: &[String], seed: Option<u64>) -> CliResult<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingConfig(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::MissingConfig(format!("config {} is not valid JSON: {e}", path.display())))?;
    config_from_value(value, sets, seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------- provenance and writers

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("checkpoint_hash".into(), self.checkpoint_hash.clone()),
            ("seed".into(), self.seed.to_string()),
            ("tool_version".into(), self.tool_version.clone()),
        ]
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, prov: &Provenance, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in prov.pairs() {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn write_json(path: &Path, prov: &Provenance, body: Value) -> Result<()> {
    let doc = json!({ "provenance": prov, "result": body });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------- data

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    RngStream::seeded(seed).fork(tag).next_u64()
}

fn raw_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Gsm => {
            let spec = d.gsm.as_ref().ok_or_else(|| Error::invalid("data.source = gsm needs data.gsm"))?;
            Ok((
                data::synth_gsm(spec, d.n_train, derive_seed(cfg.seed, 1))?,
                data::synth_gsm(spec, d.n_test, derive_seed(cfg.seed, 2))?,
            ))
        }
        DataSource::Digits => {
            let make = |n, tag| -> Result<Dataset> {
                let (raw, labels) = data::synth_digits(n, derive_seed(cfg.seed, tag));
                data::idx_to_dataset(&raw, "synthetic-digits".into())?.with_labels(labels)
            };
            Ok((make(d.n_train, 1)?, make(d.n_test, 2)?))
        }
        DataSource::Idx => {
            let f = d.idx.as_ref().ok_or_else(|| Error::invalid("data.source = idx needs data.idx"))?;
            let load = |img: &Path, lab: &Path, n: usize| -> Result<Dataset> {
                let ds = data::parse_idx(img)?.with_labels(data::parse_idx_labels(lab)?)?;
                Ok(if n > 0 && n < ds.len() { ds.subset(&(0..n).collect::<Vec<_>>()) } else { ds })
            };
            Ok((
                load(&f.train_images, &f.train_labels, d.n_train)?,
                load(&f.test_images, &f.test_labels, d.n_test)?,
            ))
        }
    }
}

/// Deterministic train/val/test datasets for a config.
pub fn materialize(cfg: &RunConfig) -> Result<Splits> {
    let (mut train, mut test) = raw_datasets(cfg)?;
    if let Some(a) = &cfg.data.augment {
        train = data::augment_contrast(&train, a.gain, a.noise_std, a.factor, derive_seed(cfg.seed, 3))?;
        test = data::augment_contrast(&test, a.gain, a.noise_std, 1, derive_seed(cfg.seed, 4))?;
    }
    if cfg.data.rescale {
        train = data::rescale_to_unit(&train)?;
        test = data::rescale_to_unit(&test)?;
    }
    if train.input_dim() != cfg.model.input_dim {
        return Err(Error::Dimension {
            what: "model.input_dim versus data",
            expected: train.input_dim(),
            actual: cfg.model.input_dim,
        });
    }
    let (train, val) = train.split(cfg.train.val_fraction, derive_seed(cfg.seed, 5))?;
    Ok(Splits { train, val, test })
}

pub fn eval_images(cfg: &RunConfig, test: Dataset) -> Dataset {
    match cfg.eval.max_images {
        Some(n) if n < test.len() => test.subset(&(0..n).collect::<Vec<_>>()),
        _ => test,
    }
}

// ---------------------------------------------------------------- pipeline pieces

pub fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Model, String)> {
    let bytes = std::fs::read(path).map_err(|_| CliError::MissingCheckpoint(path.to_path_buf()))?;
    let ck = Checkpoint::from_bytes(path, &bytes)?;
    Ok((ck.to_model()?, sha256_hex(&bytes)))
}

/// Units used by z statistics under the config's selection rule, with their scores.
pub fn select_units(cfg: &RunConfig, model: &Model, enc: &Encoding) -> Result<(Vec<usize>, Vec<f64>)> {
    match cfg.eval.units {
        UnitSelection::All => Ok(((0..enc.z_dim).collect(), Vec::new())),
        UnitSelection::Informative => {
            let scores = eval::unit_degradation_scores(model, enc, cfg.seed)?;
            Ok((eval::informative_units(&scores), scores))
        }
    }
}

fn units_arg(cfg: &RunConfig, units: &[usize]) -> Option<Vec<usize>> {
    (cfg.eval.units == UnitSelection::Informative).then(|| units.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContrastSummary {
    pub informative_units: Vec<usize>,
    pub unit_scores: Vec<f64>,
    pub prior_variance: f64,
    pub sigma_obs: Option<f64>,
    /// Spearman ρ(contrast, NV) over bins centered above σ_obs.
    pub nv_rho_above_sigma: Option<f64>,
    /// Pooled NV over images with contrast below σ_obs / 2.
    pub nv_low_contrast: Option<f64>,
    pub nv_low_relative_deviation: Option<f64>,
    pub low_contrast_images: usize,
    /// Spearman ρ(contrast, E[s]) over images.
    pub s_rho: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ContrastOutput {
    pub curve: eval::ContrastCurve,
    pub summary: ContrastSummary,
    pub contrast: Vec<f64>,
    pub s_means: Vec<f64>,
    pub receptive_fields: Vec<f64>,
}

pub fn run_contrast(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<ContrastOutput> {
    let max_c = cfg.eval.max_contrast;
    let enc = model.encode_batch(&test.images)?;
    let (units, scores) = select_units(cfg, model, &enc)?;
    let curve = eval::contrast_curves(test, &enc, &units, cfg.eval.bins, max_c)?;
    let sigma = match cfg.model.likelihood {
        crate::distributions::Likelihood::Normal { sigma_obs } => Some(sigma_obs),
        crate::distributions::Likelihood::Bernoulli => None,
    };
    let prior = cfg.model.z_family.prior_variance();
    let nv_rho = sigma.and_then(|s| {
        let (c, nv): (Vec<f64>, Vec<f64>) = curve.centers.iter().zip(&curve.nv).filter(|(c, _)| **c > s).map(|(a, b)| (*a, *b)).unzip();
        stats::spearman(&c, &nv).ok()
    });
    let (_, var) = eval::restricted_moments(&enc, &units);
    let d = units.len();
    let low: Vec<usize> = sigma
        .map(|s| (0..test.len()).filter(|&i| test.contrast[i] < s / 2.0).collect())
        .unwrap_or_default();
    let nv_low = (!low.is_empty()).then(|| stats::mean(&low.iter().flat_map(|&i| var[i * d..(i + 1) * d].iter().copied()).collect::<Vec<_>>()));
    let keep: Vec<usize> = (0..test.len()).filter(|&i| max_c.is_none_or(|c| test.contrast[i] <= c)).collect();
    let s_all = eval::s_posterior_means(&enc, cfg.seed)?;
    let (contrast, s_means): (Vec<f64>, Vec<f64>) = if s_all.is_empty() {
        (keep.iter().map(|&i| test.contrast[i]).collect(), Vec::new())
    } else {
        keep.iter().map(|&i| (test.contrast[i], s_all[i])).unzip()
    };
    let s_rho = (!s_means.is_empty()).then(|| stats::spearman(&contrast, &s_means).ok()).flatten();
    let receptive_fields = eval::sta_receptive_fields(test, &enc)?;
    Ok(ContrastOutput {
        summary: ContrastSummary {
            informative_units: units,
            unit_scores: scores,
            prior_variance: prior,
            sigma_obs: sigma,
            nv_rho_above_sigma: nv_rho,
            nv_low_relative_deviation: nv_low.map(|v| (v - prior).abs() / prior),
            nv_low_contrast: nv_low,
            low_contrast_images: low.len(),
            s_rho,
        },
        curve,
        contrast,
        s_means,
        receptive_fields,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UninformativeSummary {
    pub average_image_width: f64,
    pub average_image_s: Option<f64>,
    pub id_median_width: f64,
    /// p(u_ID > u_average).
    pub exceedance: f64,
    pub prior_std: f64,
}

pub fn run_uninformative(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<UninformativeSummary> {
    let enc = model.encode_batch(&test.images)?;
    let (units, _) = select_units(cfg, model, &enc)?;
    let u = units_arg(cfg, &units);
    let id = enc.widths(u.as_deref());
    let avg = data::average_image(test)?;
    let avg_enc = model.encode_batch(&avg)?;
    let s = eval::s_posterior_means(&avg_enc, cfg.seed)?;
    let w = avg_enc.width(0, u.as_deref());
    Ok(UninformativeSummary {
        average_image_width: w,
        average_image_s: s.first().copied(),
        id_median_width: stats::median(&id),
        exceedance: stats::exceedance(&id, &[w]),
        prior_std: cfg.model.z_family.prior_variance().sqrt(),
    })
}

pub fn run_morph(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<eval::MorphReport> {
    let enc = model.encode_batch(&test.images)?;
    let (units, _) = select_units(cfg, model, &enc)?;
    let protos = eval::class_prototypes(model, test, &enc, cfg.seed)?;
    eval::morph_analysis(model, &protos, cfg.eval.lambdas, units_arg(cfg, &units).as_deref())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorruptionOutput {
    pub blur: Vec<eval::CorruptionLevel>,
    pub noise: Vec<eval::CorruptionLevel>,
}

pub fn run_corrupt(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<CorruptionOutput> {
    let enc = model.encode_batch(&test.images)?;
    let (units, _) = select_units(cfg, model, &enc)?;
    let u = units_arg(cfg, &units);
    Ok(CorruptionOutput {
        blur: eval::corruption_sweep(test, model, CorruptionKind::Blur, &cfg.eval.blur_levels, u.as_deref(), cfg.seed)?,
        noise: eval::corruption_sweep(test, model, CorruptionKind::Pixel, &cfg.eval.noise_levels, u.as_deref(), cfg.seed)?,
    })
}

pub fn run_ood(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<eval::OodReport> {
    let enc = model.encode_batch(&test.images)?;
    let (units, _) = select_units(cfg, model, &enc)?;
    let mut probes: Vec<(&str, Vec<f64>)> = Vec::new();
    for p in &cfg.eval.ood_probes {
        match p {
            OodProbe::Shuffle => probes.push(("shuffle", data::pixel_shuffle(test, derive_seed(cfg.seed, 6))?.images)),
            OodProbe::Average => probes.push(("average", data::average_image(test)?)),
            OodProbe::Noise => {
                let mut rng = RngStream::seeded(derive_seed(cfg.seed, 7));
                let noise = Dataset::new(rng.normals(test.images.len()), test.width, test.height, PixelRange::Free, "noise")?;
                probes.push(("noise", data::match_intensity(&noise, test)?.images));
            }
        }
    }
    let refs: Vec<(&str, &[f64])> = probes.iter().map(|(t, v)| (*t, v.as_slice())).collect();
    eval::ood_report(model, test, &refs, units_arg(cfg, &units).as_deref(), cfg.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DnOutput {
    pub units: Vec<usize>,
    pub fit: eval::DnFit,
    pub bowtie: Vec<eval::BowtiePair>,
    /// Per image: contrast, normalization index, normalization factor (mean |μ|).
    pub per_image: Vec<(f64, f64, f64)>,
}

pub fn run_dn(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<DnOutput> {
    let enc = model.encode_batch(&test.images)?;
    let (units, _) = select_units(cfg, model, &enc)?;
    let rf_all = eval::sta_receptive_fields(test, &enc)?;
    let m = test.input_dim();
    let rf: Vec<f64> = units.iter().flat_map(|&j| rf_all[j * m..(j + 1) * m].iter().copied()).collect();
    let d = units.len();
    let l = eval::linear_responses(test, &rf, d);
    let (mu, _) = eval::restricted_moments(&enc, &units);
    let fit = eval::fit_divisive_normalization(&l, &mu, d, cfg.eval.dn_fits, cfg.eval.dn_fraction, cfg.seed)?;
    let all: Vec<usize> = (0..d).collect();
    let bowtie = if test.len() >= 8 && d >= 2 {
        eval::bowtie_analysis(&mu, d, &all, cfg.eval.bowtie_pairs, cfg.seed)?
    } else {
        Vec::new()
    };
    let per_image = (0..test.len())
        .map(|i| {
            let (z, li) = (&mu[i * d..(i + 1) * d], &l[i * d..(i + 1) * d]);
            let idx = eval::normalization_index(z, li).unwrap_or(f64::NAN);
            let factor = stats::mean(&z.iter().map(|v| v.abs()).collect::<Vec<_>>());
            (test.contrast[i], idx, factor)
        })
        .collect();
    Ok(DnOutput { units, fit, bowtie, per_image })
}

pub fn run_latent_grid(cfg: &RunConfig, model: &Model) -> Result<Vec<(Vec<f64>, f64)>> {
    let n = cfg.eval.grid_points.max(1);
    let lim = cfg.eval.grid_limit;
    let axis: Vec<f64> = (0..n).map(|i| if n == 1 { 0.0 } else { -lim + 2.0 * lim * i as f64 / (n - 1) as f64 }).collect();
    // two z axes swept, remaining z at the prior mean
    let mut axes: Vec<Vec<f64>> = (0..model.z_dim()).map(|j| if j < 2 { axis.clone() } else { vec![0.0] }).collect();
    if model.spec().variant.is_explaining_away() {
        axes.push(cfg.eval.grid_s.clone());
    }
    model.latent_grid_contrast(&axes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifyOutput {
    pub accuracy: f64,
    pub max_entropy: f64,
    pub curves: Vec<classifier::EntropyCurve>,
    pub lambdas: Vec<f64>,
    pub intermediate_sums: Vec<f64>,
}

pub fn run_classify(cfg: &RunConfig, model: &Model, splits: &Splits) -> Result<ClassifyOutput> {
    let mlp = classifier::train_mlp(model, &splits.train, &cfg.classifier.mlp, cfg.seed)?;
    let n = cfg.classifier.entropy_samples;
    let accuracy = classifier::accuracy(&mlp, model, &splits.test, n, cfg.seed)?;
    let enc = model.encode_batch(&splits.test.images)?;
    let protos = eval::class_prototypes(model, &splits.test, &enc, cfg.seed)?;
    let lambdas = eval::lambda_grid(cfg.eval.lambdas);
    let curves = classifier::morph_entropies(&mlp, model, &protos, &lambdas, n, cfg.seed)?;
    let max_entropy = curves.iter().flat_map(|c| c.entropies.iter().copied()).fold(0.0, f64::max);
    let intermediate_sums = curves.iter().map(|c| classifier::intermediate_sum(c, &lambdas)).collect();
    Ok(ClassifyOutput {
        accuracy,
        max_entropy,
        curves,
        lambdas,
        intermediate_sums,
    })
}

fn read_entropy_csv(path: &Path) -> Result<(Vec<classifier::EntropyCurve>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut curves: Vec<classifier::EntropyCurve> = Vec::new();
    let mut lambdas = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format {
            path: path.display().to_string(),
            detail: format!("bad entropy row `{line}`"),
        };
        if f.len() != 4 {
            return Err(bad());
        }
        let (a, b): (u8, u8) = (f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?);
        let (l, h): (f64, f64) = (f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?);
        match curves.last_mut() {
            Some(c) if (c.a, c.b) == (a, b) => c.entropies.push(h),
            _ => curves.push(classifier::EntropyCurve { a, b, entropies: vec![h] }),
        }
        if curves.len() == 1 {
            lambdas.push(l);
        }
    }
    Ok((curves, lambdas))
}

// ---------------------------------------------------------------- command line

#[derive(Parser, Debug)]
#[command(name = "eavae", version, about = "Explaining-away VAEs: training and posterior-uncertainty experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
#[command(after_help = keys_help())]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed (and train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Dotted-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the configured datasets and write them to the output directory.
    SynthData(Common),
    /// Train a model; writes checkpoint.bin and loss_log.csv.
    Train(Common),
    /// SM/SV/NV contrast curves, s versus contrast, receptive fields.
    EvalContrast(Common),
    /// Posterior width of the average image versus in-distribution widths.
    EvalUninformative(Common),
    /// Posterior width along prototype morphs for every label pair.
    EvalMorph(Common),
    /// Width under increasing blur and pixel noise.
    EvalCorrupt(Common),
    /// In-distribution versus out-of-distribution widths.
    EvalOod(Common),
    /// Divisive-normalization fit, bow-tie statistics, normalization index.
    EvalDn(Common),
    /// Contrast of decoded images over a latent grid.
    EvalLatentGrid(Common),
    /// Posterior-sample classifier and morph entropy curves.
    Classify(Common),
    /// Collate JSON summaries in the output directory into manifest.json.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData(c)
            | Command::Train(c)
            | Command::EvalContrast(c)
            | Command::EvalUninformative(c)
            | Command::EvalMorph(c)
            | Command::EvalCorrupt(c)
            | Command::EvalOod(c)
            | Command::EvalDn(c)
            | Command::EvalLatentGrid(c)
            | Command::Classify(c)
            | Command::Report(c) => c,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn prov(&self, checkpoint_hash: &str) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            checkpoint_hash: checkpoint_hash.to_string(),
            seed: self.cfg.seed,
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    fn model(&self) -> CliResult<(Model, String)> {
        load_checkpoint(&checkpoint_path(&self.cfg, &self.out))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let common = cli.command.common().clone();
    let config = common.config.as_ref().ok_or_else(|| CliError::MissingConfig("--config is required".into()))?;
    let loaded = load_config(config, &common.sets, common.seed)?;
    if let Some(n) = common.threads {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let ctx = Ctx {
        cfg: loaded.config,
        hash: loaded.hash,
        out: common.out.clone(),
    };
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    write_file(&ctx.path("resolved_config.json"), format!("{}\n", serde_json::to_string_pretty(&loaded.value).map_err(Error::from)?).as_bytes())?;
    match cli.command {
        Command::SynthData(_) => cmd_synth(&ctx),
        Command::Train(_) => cmd_train(&ctx),
        Command::EvalContrast(_) => cmd_contrast(&ctx),
        Command::EvalUninformative(_) => cmd_uninformative(&ctx),
        Command::EvalMorph(_) => cmd_morph(&ctx),
        Command::EvalCorrupt(_) => cmd_corrupt(&ctx),
        Command::EvalOod(_) => cmd_ood(&ctx),
        Command::EvalDn(_) => cmd_dn(&ctx),
        Command::EvalLatentGrid(_) => cmd_grid(&ctx),
        Command::Classify(_) => cmd_classify(&ctx),
        Command::Report(_) => cmd_report(&ctx),
    }
}

fn cmd_synth(ctx: &Ctx) -> CliResult<()> {
    let s = materialize(&ctx.cfg)?;
    let prov = ctx.prov("none");
    let mut summary = serde_json::Map::new();
    for (name, ds) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        ds.save(&ctx.path(&format!("{name}.ds")))?;
        summary.insert(
            name.into(),
            json!({
                "images": ds.len(),
                "width": ds.width,
                "height": ds.height,
                "contrast_median": stats::median(&ds.contrast),
                "contrast_p10": stats::quantile(&ds.contrast, 0.1),
                "contrast_p90": stats::quantile(&ds.contrast, 0.9),
            }),
        );
    }
    write_json(&ctx.path("data_summary.json"), &prov, Value::Object(summary))?;
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> CliResult<()> {
    let s = materialize(&ctx.cfg)?;
    let model = Model::new(ctx.cfg.model.clone(), ctx.cfg.seed)?;
    let res = training::train(model, &s.train.images, &s.val.images, &ctx.cfg.train)?;
    let bytes = res.checkpoint.to_bytes()?;
    let ck_path = checkpoint_path(&ctx.cfg, &ctx.out);
    write_file(&ck_path, &bytes)?;
    let prov = ctx.prov(&sha256_hex(&bytes));
    training::write_loss_log(&ctx.path("loss_log.csv"), &res.log, &prov.pairs())?;
    write_json(
        &ctx.path("train_summary.json"),
        &prov,
        json!({
            "epochs_run": res.log.len(),
            "best_epoch": res.checkpoint.best_epoch,
            "best_val_loss": res.checkpoint.best_val_loss,
        }),
    )?;
    Ok(())
}

fn cmd_contrast(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let test = eval_images(&ctx.cfg, materialize(&ctx.cfg)?.test);
    let o = run_contrast(&ctx.cfg, &model, &test)?;
    let prov = ctx.prov(&ck);
    let c = &o.curve;
    let rows: Vec<String> = (0..c.centers.len())
        .map(|i| {
            [c.centers[i], c.counts[i] as f64, c.sm[i], c.sv[i], c.nv[i], c.eps_sm[i], c.eps_sv[i], c.eps_nv[i]]
                .iter()
                .map(|v| fmt(*v))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_csv(&ctx.path("contrast_curves.csv"), &prov, "contrast,count,sm,sv,nv,eps_sm,eps_sv,eps_nv", &rows)?;
    if !o.s_means.is_empty() {
        let rows: Vec<String> = o.contrast.iter().zip(&o.s_means).map(|(c, s)| format!("{},{}", fmt(*c), fmt(*s))).collect();
        write_csv(&ctx.path("s_vs_contrast.csv"), &prov, "contrast,s_mean", &rows)?;
    }
    let m = test.input_dim();
    let rows: Vec<String> = o
        .receptive_fields
        .chunks(m)
        .enumerate()
        .map(|(j, rf)| format!("{j},{}", rf.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(",")))
        .collect();
    write_csv(&ctx.path("receptive_fields.csv"), &prov, "unit,pixels...", &rows)?;
    write_json(&ctx.path("contrast_summary.json"), &prov, serde_json::to_value(&o.summary).map_err(Error::from)?)?;
    Ok(())
}

fn cmd_uninformative(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let test = eval_images(&ctx.cfg, materialize(&ctx.cfg)?.test);
    let s = run_uninformative(&ctx.cfg, &model, &test)?;
    write_json(&ctx.path("uninformative_summary.json"), &ctx.prov(&ck), serde_json::to_value(&s).map_err(Error::from)?)?;
    Ok(())
}

fn cmd_morph(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let test = eval_images(&ctx.cfg, materialize(&ctx.cfg)?.test);
    let r = run_morph(&ctx.cfg, &model, &test)?;
    let prov = ctx.prov(&ck);
    let rows: Vec<String> = r
        .pairs
        .iter()
        .flat_map(|p| r.lambdas.iter().zip(&p.widths).map(move |(l, w)| format!("{},{},{},{}", p.a, p.b, fmt(*l), fmt(*w))))
        .collect();
    write_csv(&ctx.path("morph_widths.csv"), &prov, "a,b,lambda,width", &rows)?;
    write_json(
        &ctx.path("morph_summary.json"),
        &prov,
        json!({
            "pairs": r.pairs.len(),
            "central_peaks_l05": r.count_in_window(0.5),
            "window_table": r.window_table,
            "fits": r.pairs.iter().map(|p| json!({"a": p.a, "b": p.b, "fit": p.fit})).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn cmd_corrupt(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let test = eval_images(&ctx.cfg, materialize(&ctx.cfg)?.test);
    let o = run_corrupt(&ctx.cfg, &model, &test)?;
    let prov = ctx.prov(&ck);
    let rows: Vec<String> = [("blur", &o.blur), ("noise", &o.noise)]
        .iter()
        .flat_map(|(k, ls)| ls.iter().map(move |l| format!("{k},{},{},{}", fmt(l.level), fmt(l.mean_width), fmt(l.mean_s))))
        .collect();
    write_csv(&ctx.path("corruption.csv"), &prov, "kind,level,mean_width,mean_s", &rows)?;
    write_json(&ctx.path("corruption_summary.json"), &prov, serde_json::to_value(&o).map_err(Error::from)?)?;
    Ok(())
}

fn cmd_ood(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let test = eval_images(&ctx.cfg, materialize(&ctx.cfg)?.test);
    let r = run_ood(&ctx.cfg, &model, &test)?;
    let prov = ctx.prov(&ck);
    let mut rows = Vec::new();
    for src in std::iter::once(&r.id).chain(&r.probes) {
        for i in 0..src.widths.len() {
            let s = src.s_means.get(i).copied().unwrap_or(f64::NAN);
            rows.push(format!("{},{},{},{}", src.tag, fmt(src.widths[i]), fmt(s), fmt(src.exceedance[i])));
        }
    }
    write_csv(&ctx.path("ood_widths.csv"), &prov, "source,width,s_mean,exceedance", &rows)?;
    let sources: Vec<Value> = std::iter::once(&r.id)
        .chain(&r.probes)
        .map(|s| {
            json!({
                "tag": s.tag,
                "images": s.widths.len(),
                "median_width": s.median_width,
                "median_exceedance": s.median_exceedance,
                "mean_s": if s.s_means.is_empty() { Value::Null } else { json!(stats::mean(&s.s_means)) },
            })
        })
        .collect();
    write_json(&ctx.path("ood_summary.json"), &prov, json!({"id_p90": r.id_p90, "sources": sources}))?;
    Ok(())
}

fn cmd_dn(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let test = eval_images(&ctx.cfg, materialize(&ctx.cfg)?.test);
    let o = run_dn(&ctx.cfg, &model, &test)?;
    let prov = ctx.prov(&ck);
    let d = o.fit.dims;
    let mut rows = Vec::new();
    for j in 0..d {
        for i in (0..d).filter(|&i| i != j) {
            rows.push(format!("{},{},{}", o.units[j], o.units[i], fmt(o.fit.w(j, i))));
        }
    }
    write_csv(&ctx.path("dn_weights.csv"), &prov, "from_unit,to_unit,weight", &rows)?;
    let rows: Vec<String> = o.per_image.iter().map(|(c, n, f)| format!("{},{},{}", fmt(*c), fmt(*n), fmt(*f))).collect();
    write_csv(&ctx.path("normalization_index.csv"), &prov, "contrast,index,factor", &rows)?;
    let rows: Vec<String> = o
        .bowtie
        .iter()
        .map(|b| format!("{},{},{},{}", o.units[b.conditioning], o.units[b.conditioned], fmt(b.central_std), fmt(b.flanking_std)))
        .collect();
    write_csv(&ctx.path("bowtie.csv"), &prov, "conditioning,conditioned,central_std,flanking_std", &rows)?;
    let flanking_wider = o.bowtie.iter().filter(|b| b.flanking_std > b.central_std).count();
    write_json(
        &ctx.path("dn_summary.json"),
        &prov,
        json!({
            "units": o.units,
            "sigma2": o.fit.sigma2,
            "residuals": o.fit.residuals,
            "flagged": o.fit.flagged,
            "fits": o.fit.n_fits,
            "mean_weight": stats::mean(&o.fit.weights),
            "bowtie_pairs": o.bowtie.len(),
            "bowtie_flanking_wider": flanking_wider,
        }),
    )?;
    Ok(())
}

fn cmd_grid(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let pts = run_latent_grid(&ctx.cfg, &model)?;
    let prov = ctx.prov(&ck);
    let k = pts.first().map_or(0, |p| p.0.len());
    let header = (0..k)
        .map(|i| if model.spec().variant.is_explaining_away() && i + 1 == k { "s".to_string() } else { format!("z{i}") })
        .chain(std::iter::once("contrast".to_string()))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = pts
        .iter()
        .map(|(p, c)| p.iter().chain(std::iter::once(c)).map(|v| fmt(*v)).collect::<Vec<_>>().join(","))
        .collect();
    write_csv(&ctx.path("latent_grid.csv"), &prov, &header, &rows)?;
    Ok(())
}

fn cmd_classify(ctx: &Ctx) -> CliResult<()> {
    let (model, ck) = ctx.model()?;
    let mut splits = materialize(&ctx.cfg)?;
    splits.test = eval_images(&ctx.cfg, splits.test);
    let o = run_classify(&ctx.cfg, &model, &splits)?;
    let prov = ctx.prov(&ck);
    let rows: Vec<String> = o
        .curves
        .iter()
        .flat_map(|c| o.lambdas.iter().zip(&c.entropies).map(move |(l, h)| format!("{},{},{},{}", c.a, c.b, fmt(*l), fmt(*h))))
        .collect();
    write_csv(&ctx.path("morph_entropy.csv"), &prov, "a,b,lambda,entropy", &rows)?;
    let comparison = match &ctx.cfg.classifier.reference_run {
        Some(dir) => {
            let (reference, lambdas) = read_entropy_csv(&dir.join("morph_entropy.csv"))?;
            if lambdas != o.lambdas {
                return Err(Error::invalid("reference run used a different λ grid").into());
            }
            let c = classifier::compare_entropy_curves(&o.curves, &reference, &o.lambdas)?;
            serde_json::to_value(&c.test).map_err(Error::from)?
        }
        None => Value::Null,
    };
    write_json(
        &ctx.path("classifier_summary.json"),
        &prov,
        json!({
            "accuracy": o.accuracy,
            "max_entropy": o.max_entropy,
            "entropy_bound": (classifier::N_CLASSES as f64).ln(),
            "intermediate_range": classifier::INTERMEDIATE,
            "mean_intermediate_entropy": stats::mean(&o.intermediate_sums),
            "versus_reference": comparison,
        }),
    )?;
    Ok(())
}

fn cmd_report(ctx: &Ctx) -> CliResult<()> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(&ctx.out)
        .map_err(|e| Error::io(&ctx.out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_summary.json")))
        .collect();
    names.sort();
    let mut summaries = serde_json::Map::new();
    for p in names {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let v: Value = serde_json::from_str(&text).map_err(Error::from)?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        summaries.insert(name, v);
    }
    let ck = std::fs::read(checkpoint_path(&ctx.cfg, &ctx.out)).map(|b| sha256_hex(&b)).unwrap_or_else(|_| "none".into());
    write_json(&ctx.path("manifest.json"), &ctx.prov(&ck), Value::Object(summaries))?;
    Ok(())
}

/// Parses arguments, runs, prints structured errors; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
