//! Image collections and everything that produces or perturbs them.

use std::path::Path;

use ndgrad::RngStream;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::distributions::{GAMMA_PRIOR_SCALE, GAMMA_SHAPE};
use crate::error::{Error, Result};
use crate::stats::{mean, pixel_std};

pub const DATASET_MAGIC: &[u8; 8] = b"EAVAEDS1";
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Side of the canvas that 28×28 IDX digits are padded into.
pub const PADDED_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelRange {
    /// Intensities in [0, 1].
    Unit,
    /// Rescaled by a population constant and/or per-image centered.
    ZScored,
    /// Unbounded (synthetic or shifted).
    Free,
}

/// True generative variables of synthetic GSM images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsmLatents {
    pub k: usize,
    pub s: Vec<f64>,
    /// Row-major `[n, k]`.
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `[n, width·height]`.
    pub images: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub pixel_range: PixelRange,
    pub provenance: String,
    /// Per-image σ_pix.
    pub contrast: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    /// Population rescale constant, when one was applied.
    pub alpha: Option<f64>,
    pub latents: Option<GsmLatents>,
}

impl Dataset {
    pub fn new(images: Vec<f64>, width: usize, height: usize, pixel_range: PixelRange, provenance: impl Into<String>) -> Result<Self> {
        let m = width * height;
        if m == 0 || images.len() % m != 0 {
            return Err(Error::Dimension {
                what: "image buffer length (multiple of width·height)",
                expected: m,
                actual: images.len(),
            });
        }
        let contrast = images.chunks(m).map(pixel_std).collect();
        Ok(Dataset {
            images,
            width,
            height,
            pixel_range,
            provenance: provenance.into(),
            contrast,
            labels: None,
            alpha: None,
            latents: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Dimension {
                what: "label count",
                expected: self.len(),
                actual: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.input_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let m = self.input_dim();
        &self.images[i * m..(i + 1) * m]
    }

    pub fn recompute_contrast(&mut self) {
        let m = self.input_dim();
        self.contrast = self.images.chunks(m).map(pixel_std).collect();
    }

    /// New dataset from the given rows (labels and latents follow).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let m = self.input_dim();
        let mut images = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            width: self.width,
            height: self.height,
            pixel_range: self.pixel_range,
            provenance: self.provenance.clone(),
            contrast: idx.iter().map(|&i| self.contrast[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            alpha: self.alpha,
            latents: self.latents.as_ref().map(|lat| GsmLatents {
                k: lat.k,
                s: idx.iter().map(|&i| lat.s[i]).collect(),
                z: idx.iter().flat_map(|&i| lat.z[i * lat.k..(i + 1) * lat.k].iter().copied()).collect(),
            }),
        }
    }

    /// Seeded shuffled split into `(train, validation)`.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        let order = RngStream::seeded(seed).fork(0x5911).permutation(self.len());
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let (val, train) = order.split_at(n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// Indices grouped by label, in ascending label order.
    pub fn indices_by_label(&self) -> Result<Vec<(u8, Vec<usize>)>> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::invalid("dataset has no labels"))?;
        let mut groups: Vec<(u8, Vec<usize>)> = Vec::new();
        let mut distinct: Vec<u8> = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for l in distinct {
            groups.push((l, (0..labels.len()).filter(|&i| labels[i] == l).collect()));
        }
        Ok(groups)
    }

    fn map_images(&self, provenance: &str, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Dataset {
        let m = self.input_dim();
        let images: Vec<f64> = (0..self.len()).flat_map(|i| f(i, self.image(i))).collect();
        let mut out = self.clone();
        out.images = images;
        debug_assert_eq!(out.images.len(), self.len() * m);
        out.provenance = format!("{}+{provenance}", self.provenance);
        out.latents = None;
        out.recompute_contrast();
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_value(DatasetHeader {
            n: self.len(),
            width: self.width,
            height: self.height,
            pixel_range: self.pixel_range,
            provenance: self.provenance.clone(),
            labels: self.labels.clone(),
            alpha: self.alpha,
            latent_k: self.latents.as_ref().map(|l| l.k),
        })?;
        let mut blob = self.images.clone();
        if let Some(lat) = &self.latents {
            blob.extend_from_slice(&lat.s);
            blob.extend_from_slice(&lat.z);
        }
        container::write(path, DATASET_MAGIC, &header, &blob)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let (header, blob) = container::read(path, DATASET_MAGIC)?;
        let bad = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let h: DatasetHeader = serde_json::from_value(header).map_err(|e| bad(format!("bad dataset header: {e}")))?;
        let m = h.width * h.height;
        let k = h.latent_k.unwrap_or(0);
        let expected = h.n * m + h.latent_k.map_or(0, |k| h.n * (k + 1));
        if blob.len() != expected {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                detail: format!("blob holds {} values, header describes {expected}", blob.len()),
            });
        }
        let mut ds = Dataset::new(blob[..h.n * m].to_vec(), h.width, h.height, h.pixel_range, h.provenance)?;
        if let Some(labels) = h.labels {
            ds = ds.with_labels(labels)?;
        }
        ds.alpha = h.alpha;
        if h.latent_k.is_some() {
            let s = blob[h.n * m..h.n * m + h.n].to_vec();
            let z = blob[h.n * m + h.n..].to_vec();
            ds.latents = Some(GsmLatents { k, s, z });
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    n: usize,
    width: usize,
    height: usize,
    pixel_range: PixelRange,
    provenance: String,
    labels: Option<Vec<u8>>,
    alpha: Option<f64>,
    latent_k: Option<usize>,
}

// ---------------------------------------------------------------- IDX

#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let name = path.display().to_string();
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| Error::Truncated {
                path: name.clone(),
                detail: "IDX header".into(),
            })
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: name,
            expected: format!("{magic:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i).map(|v| v as usize)).collect::<Result<_>>()?;
    let payload: usize = dims.iter().product();
    if bytes.len() < 4 * (ndims + 1) + payload {
        return Err(Error::Truncated {
            path: name,
            detail: format!("payload has {} bytes, header declares {payload}", bytes.len() - 4 * (ndims + 1)),
        });
    }
    Ok(dims)
}

pub fn parse_idx_image_bytes(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let dims = idx_header(path, bytes, IDX_IMAGES_MAGIC, 3)?;
    let n = dims[0] * dims[1] * dims[2];
    Ok(IdxImages {
        rows: dims[1],
        cols: dims[2],
        pixels: bytes[16..16 + n].to_vec(),
    })
}

pub fn parse_idx_label_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = idx_header(path, bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(bytes[8..8 + dims[0]].to_vec())
}

/// Reads an IDX image file into a [0, 1] dataset; 28×28 images are centered in a 32×32 canvas.
pub fn parse_idx(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = parse_idx_image_bytes(path, &bytes)?;
    idx_to_dataset(&raw, format!("idx:{}", path.display()))
}

pub fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_label_bytes(path, &bytes)
}

pub fn idx_to_dataset(raw: &IdxImages, provenance: String) -> Result<Dataset> {
    let (r, c) = (raw.rows, raw.cols);
    let pad = r == 28 && c == 28;
    let (h, w) = if pad { (PADDED_SIDE, PADDED_SIDE) } else { (r, c) };
    let off = if pad { (PADDED_SIDE - 28) / 2 } else { 0 };
    let n = if r * c == 0 { 0 } else { raw.pixels.len() / (r * c) };
    let mut images = vec![0.0; n * h * w];
    for i in 0..n {
        for y in 0..r {
            for x in 0..c {
                images[i * h * w + (y + off) * w + x + off] = raw.pixels[i * r * c + y * c + x] as f64 / 255.0;
            }
        }
    }
    Dataset::new(images, w, h, PixelRange::Unit, provenance)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let n = images.pixels.len() / (images.rows * images.cols).max(1);
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

// ---------------------------------------------------------------- synthetic digits

type Pt = (f64, f64);

fn arc(c: Pt, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Vec<Pt> {
    let steps = (((to_deg - from_deg).abs() / 15.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            (c.0 + rx * a.cos(), c.1 + ry * a.sin())
        })
        .collect()
}

/// Stroke skeletons of the ten digits in a unit box (y grows downwards).
fn digit_strokes(d: u8) -> Vec<Vec<Pt>> {
    match d {
        0 => vec![arc((0.5, 0.5), 0.28, 0.4, 0.0, 360.0)],
        1 => vec![vec![(0.38, 0.22), (0.52, 0.1), (0.52, 0.9)]],
        2 => {
            let mut top = arc((0.5, 0.32), 0.27, 0.22, 190.0, 380.0);
            top.extend([(0.22, 0.9), (0.82, 0.9)]);
            vec![top]
        }
        3 => vec![arc((0.47, 0.3), 0.24, 0.2, 200.0, 450.0), arc((0.47, 0.69), 0.27, 0.21, 270.0, 520.0)],
        4 => vec![vec![(0.66, 0.9), (0.66, 0.1), (0.18, 0.64), (0.86, 0.64)]],
        5 => {
            let mut s = vec![(0.78, 0.1), (0.3, 0.1), (0.27, 0.46)];
            s.extend(arc((0.49, 0.65), 0.28, 0.25, 235.0, 510.0));
            vec![s]
        }
        6 => vec![vec![(0.7, 0.1), (0.44, 0.28), (0.3, 0.6)], arc((0.51, 0.67), 0.22, 0.22, 0.0, 360.0)],
        7 => vec![vec![(0.18, 0.1), (0.82, 0.1), (0.42, 0.9)]],
        8 => vec![arc((0.5, 0.29), 0.2, 0.19, 0.0, 360.0), arc((0.5, 0.7), 0.24, 0.21, 0.0, 360.0)],
        _ => vec![arc((0.5, 0.33), 0.22, 0.22, 0.0, 360.0), vec![(0.72, 0.33), (0.63, 0.9)]],
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one handwritten-style digit as 28×28 bytes.
pub fn render_digit(d: u8, rng: &mut RngStream) -> Vec<u8> {
    let rot = rng.uniform_range(-0.25, 0.25);
    let shear = rng.uniform_range(-0.3, 0.3);
    let sx = rng.uniform_range(0.75, 1.05);
    let sy = rng.uniform_range(0.85, 1.05);
    let (tx, ty) = (rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5));
    let radius = rng.uniform_range(0.9, 1.9);
    let (cr, sr) = (rot.cos(), rot.sin());
    let strokes: Vec<Vec<Pt>> = digit_strokes(d)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + 0.03 * rng.standard_normal(), y + 0.03 * rng.standard_normal());
                    let (u, v) = ((x - 0.5) * sx, (y - 0.5) * sy);
                    let u = u + shear * v;
                    let (u, v) = (cr * u - sr * v, sr * u + cr * v);
                    (14.0 + 20.0 * u + tx, 14.0 + 20.0 * v + ty)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0u8; 28 * 28];
    for py in 0..28 {
        for px in 0..28 {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let mut d = f64::INFINITY;
            for s in &strokes {
                for w in s.windows(2) {
                    d = d.min(segment_distance(p, w[0], w[1]));
                }
            }
            let v = (radius + 0.5 - d).clamp(0.0, 1.0);
            out[py * 28 + px] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// Procedural digit corpus in IDX layout (28×28 bytes, balanced labels in shuffled order).
pub fn synth_digits(n: usize, seed: u64) -> (IdxImages, Vec<u8>) {
    let master = RngStream::seeded(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    master.fork(0xD161).shuffle(&mut labels);
    let mut pixels = Vec::with_capacity(n * 784);
    for (i, &l) in labels.iter().enumerate() {
        let mut rng = master.fork(i as u64 + 1);
        pixels.extend(render_digit(l, &mut rng));
    }
    (IdxImages { rows: 28, cols: 28, pixels }, labels)
}

// ---------------------------------------------------------------- GSM patches

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixing {
    Random,
    Gabor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsmSpec {
    pub side: usize,
    pub k: usize,
    pub mixing: Mixing,
    pub mixing_seed: u64,
    /// Pixel noise standard deviation of the synthetic data.
    pub noise_std: f64,
    /// Global gain; contrast is about `amplitude · s · √(k / M)`.
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

impl GsmSpec {
    /// `[M, k]` mixing matrix with zero-mean, unit-norm columns.
    pub fn mixing_matrix(&self) -> Vec<f64> {
        let m = self.side * self.side;
        let mut rng = RngStream::seeded(self.mixing_seed).fork(0xA11A);
        let mut a = vec![0.0; m * self.k];
        for j in 0..self.k {
            let col: Vec<f64> = match self.mixing {
                Mixing::Random => rng.normals(m),
                Mixing::Gabor => {
                    let side = self.side as f64;
                    let (cx, cy) = (rng.uniform_range(0.2, 0.8) * side, rng.uniform_range(0.2, 0.8) * side);
                    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
                    let lambda = rng.uniform_range(0.25, 0.6) * side;
                    let sigma = 0.4 * lambda;
                    let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                    (0..m)
                        .map(|p| {
                            let (x, y) = ((p % self.side) as f64 + 0.5 - cx, (p / self.side) as f64 + 0.5 - cy);
                            let u = x * theta.cos() + y * theta.sin();
                            let env = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                            env * (2.0 * std::f64::consts::PI * u / lambda + phase).cos()
                        })
                        .collect()
                }
            };
            let mu = mean(&col);
            let norm = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>().sqrt().max(1e-300);
            for (i, v) in col.iter().enumerate() {
                a[i * self.k + j] = (v - mu) / norm;
            }
        }
        a
    }
}

/// `x = amplitude · s · A z + η`, `s ~ Gamma(2, 1/√2)`, `z ~ N(0, I)`, `η ~ N(0, noise²)`.
pub fn synth_gsm(spec: &GsmSpec, n: usize, seed: u64) -> Result<Dataset> {
    if spec.side == 0 || spec.k == 0 || spec.noise_std < 0.0 {
        return Err(Error::invalid("GSM spec needs positive side and k and non-negative noise"));
    }
    let m = spec.side * spec.side;
    let a = spec.mixing_matrix();
    let mut rng = RngStream::seeded(seed).fork(0x65A1);
    let mut images = Vec::with_capacity(n * m);
    let mut s_all = Vec::with_capacity(n);
    let mut z_all = Vec::with_capacity(n * spec.k);
    for _ in 0..n {
        let s = GAMMA_PRIOR_SCALE * rng.standard_gamma_shape2();
        let z = rng.normals(spec.k);
        for i in 0..m {
            let row = &a[i * spec.k..(i + 1) * spec.k];
            let v: f64 = row.iter().zip(&z).map(|(w, z)| w * z).sum();
            images.push(spec.amplitude * s * v + spec.noise_std * rng.standard_normal());
        }
        s_all.push(s);
        z_all.extend(z);
    }
    debug_assert!((GAMMA_SHAPE * GAMMA_PRIOR_SCALE * GAMMA_PRIOR_SCALE - 1.0).abs() < 1e-12);
    let mut ds = Dataset::new(images, spec.side, spec.side, PixelRange::Free, "gsm")?;
    ds.latents = Some(GsmLatents {
        k: spec.k,
        s: s_all,
        z: z_all,
    });
    Ok(ds)
}

// ---------------------------------------------------------------- transforms

/// Distribution of the contrast gain `c` in augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GainDist {
    Fixed { c: f64 },
    LogNormal { mu: f64, sigma: f64, min: f64, max: f64 },
}

impl Default for GainDist {
    fn default() -> Self {
        GainDist::LogNormal {
            mu: -1.0,
            sigma: 0.5,
            min: 0.02,
            max: 2.0,
        }
    }
}

impl GainDist {
    fn draw(&self, rng: &mut RngStream) -> f64 {
        match *self {
            GainDist::Fixed { c } => c,
            GainDist::LogNormal { mu, sigma, min, max } => (mu + sigma * rng.standard_normal()).exp().clamp(min, max),
        }
    }
}

/// `x_aug = c(x − ½) + η`, repeated `factor` times over the dataset.
pub fn augment_contrast(ds: &Dataset, gain: GainDist, noise_std: f64, factor: usize, seed: u64) -> Result<Dataset> {
    if ds.pixel_range != PixelRange::Unit {
        return Err(Error::invalid("contrast augmentation expects [0, 1] pixels"));
    }
    if factor == 0 || noise_std < 0.0 {
        return Err(Error::invalid("augmentation needs factor ≥ 1 and non-negative noise"));
    }
    let mut rng = RngStream::seeded(seed).fork(0xC0A7);
    let m = ds.input_dim();
    let mut images = Vec::with_capacity(factor * ds.images.len());
    let mut labels = Vec::new();
    for _ in 0..factor {
        for i in 0..ds.len() {
            let c = gain.draw(&mut rng);
            for &x in ds.image(i) {
                let eta = if noise_std > 0.0 { noise_std * rng.standard_normal() } else { 0.0 };
                images.push(c * (x - 0.5) + eta);
            }
        }
        if let Some(l) = &ds.labels {
            labels.extend_from_slice(l);
        }
    }
    debug_assert_eq!(images.len(), factor * ds.len() * m);
    let mut out = Dataset::new(images, ds.width, ds.height, PixelRange::Free, format!("{}+contrast-aug", ds.provenance))?;
    if ds.labels.is_some() {
        out = out.with_labels(labels)?;
    }
    Ok(out)
}

pub fn average_image(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::invalid("average image of an empty dataset"));
    }
    let m = ds.input_dim();
    let mut acc = vec![0.0; m];
    for i in 0..ds.len() {
        acc.iter_mut().zip(ds.image(i)).for_each(|(a, x)| *a += x);
    }
    let n = ds.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `(1 − λ)·a + λ·b`.
pub fn morph(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("morph weight {lambda} outside [0, 1]")));
    }
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "morph endpoint length",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect())
}

/// Half-sample symmetric reflection of `i` into `0..n` (period 2n).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = i.rem_euclid(2 * n);
    (if p < n { p } else { 2 * n - 1 - p }) as usize
}

pub fn gaussian_kernel(std: f64) -> Vec<f64> {
    let r = (3.0 * std).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * std * std)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with kernel standard deviation `eta_b`, radius ⌈3η_b⌉, reflect padding.
pub fn blur(image: &[f64], width: usize, height: usize, eta_b: f64) -> Result<Vec<f64>> {
    if eta_b < 0.0 || !eta_b.is_finite() {
        return Err(Error::invalid("blur level must be finite and non-negative"));
    }
    if image.len() != width * height {
        return Err(Error::Dimension {
            what: "blur image length",
            expected: width * height,
            actual: image.len(),
        });
    }
    if eta_b == 0.0 {
        return Ok(image.to_vec());
    }
    let k = gaussian_kernel(eta_b);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; image.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * image[y * width + reflect(x as isize + t as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; image.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(y as isize + t as isize - r, height) * width + x])
                .sum();
        }
    }
    Ok(out)
}

/// Adds N(0, η_p²) noise, then rescales to the original intensity range.
pub fn pixel_noise(image: &[f64], eta_p: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if eta_p < 0.0 || !eta_p.is_finite() {
        return Err(Error::invalid("noise level must be finite and non-negative"));
    }
    if eta_p == 0.0 {
        return Ok(image.to_vec());
    }
    let (lo, hi) = min_max(image);
    let noisy: Vec<f64> = image.iter().map(|x| x + eta_p * rng.standard_normal()).collect();
    let (nlo, nhi) = min_max(&noisy);
    if nhi == nlo {
        return Ok(vec![lo; image.len()]);
    }
    Ok(noisy.iter().map(|v| lo + (v - nlo) / (nhi - nlo) * (hi - lo)).collect())
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

pub fn blur_dataset(ds: &Dataset, eta_b: f64) -> Result<Dataset> {
    let mut err = None;
    let out = ds.map_images(&format!("blur{eta_b}"), |_, x| {
        blur(x, ds.width, ds.height, eta_b).unwrap_or_else(|e| {
            err.get_or_insert(e);
            x.to_vec()
        })
    });
    err.map_or(Ok(out), Err)
}

pub fn noise_dataset(ds: &Dataset, eta_p: f64, seed: u64) -> Result<Dataset> {
    let master = RngStream::seeded(seed).fork(0x0153);
    let mut err = None;
    let out = ds.map_images(&format!("noise{eta_p}"), |i, x| {
        pixel_noise(x, eta_p, &mut master.fork(i as u64)).unwrap_or_else(|e| {
            err.get_or_insert(e);
            x.to_vec()
        })
    });
    err.map_or(Ok(out), Err)
}

/// Independently permutes each pixel location across images.
pub fn pixel_shuffle(ds: &Dataset, seed: u64) -> Result<Dataset> {
    if ds.len() < 2 {
        return Err(Error::invalid("pixel shuffle needs at least two images"));
    }
    let m = ds.input_dim();
    let n = ds.len();
    let master = RngStream::seeded(seed).fork(0x5F1E);
    let mut images = ds.images.clone();
    for p in 0..m {
        let perm = master.fork(p as u64).permutation(n);
        for (dst, &src) in perm.iter().enumerate() {
            images[dst * m + p] = ds.images[src * m + p];
        }
    }
    let mut out = Dataset::new(images, ds.width, ds.height, ds.pixel_range, format!("{}+pixel-shuffle", ds.provenance))?;
    out.alpha = ds.alpha;
    Ok(out)
}

/// Population rescale so that mean ± 3 std of all pixels maps onto [0, 1].
/// Returns the dataset and `α = 6·std`.
pub fn rescale_to_unit(ds: &Dataset) -> Result<Dataset> {
    let mu = mean(&ds.images);
    let sd = crate::stats::sample_std(&ds.images);
    if !(sd > 0.0) {
        return Err(Error::invalid("cannot rescale a constant dataset"));
    }
    let alpha = 6.0 * sd;
    let mut out = ds.map_images("rescaled", |_, x| x.iter().map(|v| (v - mu) / alpha + 0.5).collect());
    out.alpha = Some(alpha);
    out.pixel_range = PixelRange::ZScored;
    out.provenance = format!("{}+rescaled", ds.provenance);
    Ok(out)
}

/// Subtracts each image's mean pixel.
pub fn center_images(ds: &Dataset) -> Dataset {
    let mut out = ds.map_images("centered", |_, x| {
        let mu = mean(x);
        x.iter().map(|v| v - mu).collect()
    });
    out.latents = ds.latents.clone();
    out.pixel_range = PixelRange::ZScored;
    out
}

/// Rescales every pixel of `ds` so its population mean and std match `reference`.
pub fn match_intensity(ds: &Dataset, reference: &Dataset) -> Result<Dataset> {
    let (mu, sd) = (mean(&ds.images), crate::stats::sample_std(&ds.images));
    let (rmu, rsd) = (mean(&reference.images), crate::stats::sample_std(&reference.images));
    if !(sd > 0.0) {
        return Err(Error::invalid("cannot match the intensity of a constant dataset"));
    }
    let mut out = ds.map_images("matched", |_, x| x.iter().map(|v| (v - mu) / sd * rsd + rmu).collect());
    out.pixel_range = reference.pixel_range;
    Ok(out)
}
