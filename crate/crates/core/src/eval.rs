//! Measurement battery over trained models: contrast statistics, receptive
//! fields, posterior width, morphing, corruption, out-of-distribution
//! comparison, bow-tie dependencies and the divisive-normalization fit.

use ndgrad::RngStream;
use serde::Serialize;

use crate::data::{self, Dataset};
use crate::distributions::posterior_mean_s;
use crate::error::{Error, Result};
use crate::models::{Encoding, Model};
use crate::stats::{self, mean, sample_var};

/// Samples used for Monte Carlo posterior means of `s`.
pub const S_MEAN_SAMPLES: usize = 256;

// ---------------------------------------------------------------- contrast curves

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ContrastCurve {
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
    pub sm: Vec<f64>,
    pub sv: Vec<f64>,
    pub nv: Vec<f64>,
    pub eps_sm: Vec<f64>,
    pub eps_sv: Vec<f64>,
    pub eps_nv: Vec<f64>,
}

/// Image indices sorted by contrast and cut into `n_bins` equal-count groups.
pub fn equal_count_bins(contrast: &[f64], n_bins: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..contrast.len()).collect();
    idx.sort_by(|&a, &b| contrast[a].total_cmp(&contrast[b]).then(a.cmp(&b)));
    let n_bins = n_bins.max(1).min(contrast.len().max(1));
    let (base, extra) = (contrast.len() / n_bins, contrast.len() % n_bins);
    let mut out = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        out.push(idx[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Statistics of one group of images. `mu` and `var` are row-major `[n, dims]`.
fn bin_statistics(members: &[usize], mu: &[f64], var: &[f64], dims: usize) -> (f64, f64, f64, f64, f64, f64) {
    let n = members.len() as f64;
    let d = dims as f64;
    let norms: Vec<f64> = members
        .iter()
        .map(|&i| mu[i * dims..(i + 1) * dims].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let sm = mean(&norms);
    let eps_sm = (sample_var(&norms) / n).sqrt();
    let per_dim_var: Vec<f64> = (0..dims)
        .map(|j| sample_var(&members.iter().map(|&i| mu[i * dims + j]).collect::<Vec<_>>()))
        .collect();
    let sv = mean(&per_dim_var);
    let eps_sv = mean(&per_dim_var.iter().map(|v| (2.0 / (n - 1.0)).sqrt() * v).collect::<Vec<_>>()) / d.sqrt();
    let all_var: Vec<f64> = members.iter().flat_map(|&i| var[i * dims..(i + 1) * dims].iter().copied()).collect();
    let nv = mean(&all_var);
    let eps_nv = sample_var(&all_var).sqrt() / (n.sqrt() * d.sqrt());
    (sm, sv, nv, eps_sm, eps_sv, eps_nv)
}

/// Equal-count binned SM/SV/NV and their errors; bins with fewer than two images are dropped.
pub fn binned_curves(contrast: &[f64], mu: &[f64], var: &[f64], dims: usize, n_bins: usize) -> Result<ContrastCurve> {
    let n = contrast.len();
    if mu.len() != n * dims || var.len() != n * dims {
        return Err(Error::Dimension {
            what: "posterior moments for binned curves",
            expected: n * dims,
            actual: mu.len().min(var.len()),
        });
    }
    if dims == 0 {
        return Err(Error::invalid("binned curves need at least one latent dimension"));
    }
    let mut curve = ContrastCurve::default();
    for members in equal_count_bins(contrast, n_bins) {
        if members.len() < 2 {
            log::warn!("dropping contrast bin with {} image(s)", members.len());
            continue;
        }
        let (sm, sv, nv, esm, esv, env) = bin_statistics(&members, mu, var, dims);
        curve.centers.push(mean(&members.iter().map(|&i| contrast[i]).collect::<Vec<_>>()));
        curve.counts.push(members.len());
        curve.sm.push(sm);
        curve.sv.push(sv);
        curve.nv.push(nv);
        curve.eps_sm.push(esm);
        curve.eps_sv.push(esv);
        curve.eps_nv.push(env);
    }
    Ok(curve)
}

/// Posterior means and variances restricted to `units`, row-major `[n, |units|]`.
pub fn restricted_moments(enc: &Encoding, units: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(enc.n * units.len());
    let mut var = Vec::with_capacity(enc.n * units.len());
    for i in 0..enc.n {
        let (m, v) = (enc.mu_row(i), enc.variance_row(i));
        for &j in units {
            mu.push(m[j]);
            var.push(v[j]);
        }
    }
    (mu, var)
}

pub fn all_units(enc: &Encoding) -> Vec<usize> {
    (0..enc.z_dim).collect()
}

/// Contrast curves of `model` over `ds`, optionally ignoring images above `max_contrast`.
pub fn contrast_curves(
    ds: &Dataset,
    enc: &Encoding,
    units: &[usize],
    n_bins: usize,
    max_contrast: Option<f64>,
) -> Result<ContrastCurve> {
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| max_contrast.is_none_or(|c| ds.contrast[i] <= c)).collect();
    let (mu, var) = restricted_moments(enc, units);
    let d = units.len();
    let sel = |src: &[f64]| keep.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect::<Vec<_>>();
    let contrast: Vec<f64> = keep.iter().map(|&i| ds.contrast[i]).collect();
    binned_curves(&contrast, &sel(&mu), &sel(&var), d, n_bins)
}

/// Posterior mean of `s` per image (empty for the standard VAE).
pub fn s_posterior_means(enc: &Encoding, seed: u64) -> Result<Vec<f64>> {
    let master = RngStream::seeded(seed).fork(0x5EA7);
    enc.s
        .iter()
        .enumerate()
        .map(|(i, p)| posterior_mean_s(p, S_MEAN_SAMPLES, &mut master.fork(i as u64)))
        .collect()
}

// ---------------------------------------------------------------- receptive fields

/// `RF_j = mean_x μ_j(x)·x`, row-major `[z_dim, M]`.
pub fn sta_receptive_fields(ds: &Dataset, enc: &Encoding) -> Result<Vec<f64>> {
    if enc.n != ds.len() || ds.is_empty() {
        return Err(Error::invalid("STA needs one nonempty encoding per image"));
    }
    let (m, d) = (ds.input_dim(), enc.z_dim);
    let mut rf = vec![0.0; d * m];
    for i in 0..ds.len() {
        let x = ds.image(i);
        for (j, &mu) in enc.mu_row(i).iter().enumerate() {
            rf[j * m..(j + 1) * m].iter_mut().zip(x).for_each(|(r, v)| *r += mu * v);
        }
    }
    let n = ds.len() as f64;
    rf.iter_mut().for_each(|v| *v /= n);
    Ok(rf)
}

/// Raw dot products of every image with every receptive field, `[n, d]`.
pub fn linear_responses(ds: &Dataset, rf: &[f64], d: usize) -> Vec<f64> {
    let m = ds.input_dim();
    ndgrad::linalg::matmul_bt(&ds.images, rf, ds.len(), m, d)
}

/// Optimal two-cluster split of 1-D scores. Returns membership of the
/// higher-mean cluster, or `None` when one side would be empty.
pub fn two_means_split(scores: &[f64]) -> Option<Vec<bool>> {
    if scores.len() < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    if sorted[0] == sorted[sorted.len() - 1] {
        return None;
    }
    let sse = |s: &[f64]| {
        let m = mean(s);
        s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0);
    for cut in 1..sorted.len() {
        if sorted[cut] == sorted[cut - 1] {
            continue;
        }
        let cost = sse(&sorted[..cut]) + sse(&sorted[cut..]);
        if cost < best.0 {
            best = (cost, cut);
        }
    }
    let mut high = vec![false; scores.len()];
    for &i in &idx[best.1..] {
        high[i] = true;
    }
    Some(high)
}

/// Decoder input at the posterior means (`z = μ`, `s = E[s]`).
fn mean_reconstruction(model: &Model, mu: &[f64], s: Option<&[f64]>) -> Result<Vec<f64>> {
    model.decode(mu, s)
}

/// Relative reconstruction change when each unit is clamped to its ensemble mean.
pub fn unit_degradation_scores(model: &Model, enc: &Encoding, seed: u64) -> Result<Vec<f64>> {
    let d = enc.z_dim;
    let s_means = s_posterior_means(enc, seed)?;
    let s = (!s_means.is_empty()).then_some(s_means.as_slice());
    let base = mean_reconstruction(model, &enc.z_mu, s)?;
    let base_energy: f64 = base.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    (0..d)
        .map(|j| {
            let avg = mean(&(0..enc.n).map(|i| enc.z_mu[i * d + j]).collect::<Vec<_>>());
            let mut mu = enc.z_mu.clone();
            (0..enc.n).for_each(|i| mu[i * d + j] = avg);
            let rec = mean_reconstruction(model, &mu, s)?;
            Ok(rec.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / base_energy)
        })
        .collect()
}

/// Units in the higher-contribution cluster; all units when the split is degenerate.
pub fn informative_units(scores: &[f64]) -> Vec<usize> {
    match two_means_split(scores) {
        Some(high) => (0..scores.len()).filter(|&j| high[j]).collect(),
        None => {
            log::warn!("degenerate informative-unit clustering; keeping all units");
            (0..scores.len()).collect()
        }
    }
}

// ---------------------------------------------------------------- morphing

/// Least-squares `y ≈ c0 + c1·x + c2·x²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuadFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl QuadFit {
    pub fn vertex(&self) -> f64 {
        -self.c1 / (2.0 * self.c2)
    }

    /// Negative curvature with the maximum inside a window of width `l` centered on ½.
    pub fn peak_in_window(&self, l: f64) -> bool {
        self.c2 < 0.0 && (self.vertex() - 0.5).abs() <= l / 2.0
    }
}

fn solve3(mut a: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        for r in 0..3 {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..4 {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    Some([a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]])
}

pub fn quadratic_fit(x: &[f64], y: &[f64]) -> Result<QuadFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::invalid("quadratic fit needs at least three paired points"));
    }
    let mut s = [0.0; 5];
    let mut t = [0.0; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let mut p = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += p;
            if k < 3 {
                t[k] += p * yi;
            }
            p *= xi;
        }
    }
    let c = solve3([
        [s[0], s[1], s[2], t[0]],
        [s[1], s[2], s[3], t[1]],
        [s[2], s[3], s[4], t[2]],
    ])
    .ok_or_else(|| Error::invalid("quadratic fit is singular"))?;
    Ok(QuadFit { c0: c[0], c1: c[1], c2: c[2] })
}

pub fn lambda_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect()
}

/// Decoded class prototypes: decoder output at the class-average posterior mean.
pub fn class_prototypes(model: &Model, ds: &Dataset, enc: &Encoding, seed: u64) -> Result<Vec<(u8, Vec<f64>)>> {
    let s_means = s_posterior_means(enc, seed)?;
    let d = enc.z_dim;
    ds.indices_by_label()?
        .into_iter()
        .map(|(label, idx)| {
            let z: Vec<f64> = (0..d).map(|j| mean(&idx.iter().map(|&i| enc.z_mu[i * d + j]).collect::<Vec<_>>())).collect();
            let s = (!s_means.is_empty()).then(|| mean(&idx.iter().map(|&i| s_means[i]).collect::<Vec<_>>()));
            Ok((label, model.generate(&z, s)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MorphPair {
    pub a: u8,
    pub b: u8,
    pub widths: Vec<f64>,
    pub fit: QuadFit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MorphReport {
    pub lambdas: Vec<f64>,
    pub pairs: Vec<MorphPair>,
    /// `(L, fraction of pairs peaking inside the window)`.
    pub window_table: Vec<(f64, f64)>,
}

impl MorphReport {
    pub fn fraction_in_window(&self, l: f64) -> f64 {
        self.pairs.iter().filter(|p| p.fit.peak_in_window(l)).count() as f64 / self.pairs.len().max(1) as f64
    }

    pub fn count_in_window(&self, l: f64) -> usize {
        self.pairs.iter().filter(|p| p.fit.peak_in_window(l)).count()
    }
}

pub const WINDOWS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Width curves along prototype morphs for every unordered label pair.
pub fn morph_analysis(model: &Model, prototypes: &[(u8, Vec<f64>)], n_lambda: usize, units: Option<&[usize]>) -> Result<MorphReport> {
    if prototypes.len() < 2 {
        return Err(Error::invalid("morph analysis needs at least two labels"));
    }
    let lambdas = lambda_grid(n_lambda);
    let mut pairs = Vec::new();
    for (ia, (la, xa)) in prototypes.iter().enumerate() {
        for (lb, xb) in &prototypes[ia + 1..] {
            let mut batch = Vec::with_capacity(lambdas.len() * xa.len());
            for &l in &lambdas {
                batch.extend(data::morph(xa, xb, l)?);
            }
            let widths = model.encode_batch(&batch)?.widths(units);
            let fit = quadratic_fit(&lambdas, &widths)?;
            pairs.push(MorphPair { a: *la, b: *lb, widths, fit });
        }
    }
    let mut report = MorphReport {
        lambdas,
        pairs,
        window_table: Vec::new(),
    };
    report.window_table = WINDOWS.iter().map(|&l| (l, report.fraction_in_window(l))).collect();
    Ok(report)
}

// ---------------------------------------------------------------- corruption

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Blur,
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorruptionLevel {
    pub level: f64,
    pub mean_width: f64,
    /// Mean posterior mean of `s` (NaN for the standard VAE).
    pub mean_s: f64,
}

pub fn corruption_sweep(
    ds: &Dataset,
    model: &Model,
    kind: CorruptionKind,
    levels: &[f64],
    units: Option<&[usize]>,
    seed: u64,
) -> Result<Vec<CorruptionLevel>> {
    if levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("corruption levels must be sorted ascending"));
    }
    levels
        .iter()
        .map(|&level| {
            let corrupted = match kind {
                CorruptionKind::Blur => data::blur_dataset(ds, level)?,
                CorruptionKind::Pixel => data::noise_dataset(ds, level, seed)?,
            };
            let enc = model.encode_batch(&corrupted.images)?;
            let s = s_posterior_means(&enc, seed)?;
            Ok(CorruptionLevel {
                level,
                mean_width: mean(&enc.widths(units)),
                mean_s: if s.is_empty() { f64::NAN } else { mean(&s) },
            })
        })
        .collect()
}

// ---------------------------------------------------------------- out of distribution

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodSource {
    pub tag: String,
    pub widths: Vec<f64>,
    pub s_means: Vec<f64>,
    /// `p(u_ID > u)` for each probe image.
    pub exceedance: Vec<f64>,
    pub median_width: f64,
    pub median_exceedance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodReport {
    pub id: OodSource,
    pub probes: Vec<OodSource>,
    pub id_p90: f64,
}

fn source(tag: &str, model: &Model, images: &[f64], id_widths: &[f64], units: Option<&[usize]>, seed: u64) -> Result<OodSource> {
    let enc = model.encode_batch(images)?;
    let widths = enc.widths(units);
    let exceedance: Vec<f64> = widths.iter().map(|&u| stats::exceedance(id_widths, &[u])).collect();
    Ok(OodSource {
        tag: tag.to_string(),
        median_width: stats::median(&widths),
        median_exceedance: stats::median(&exceedance),
        s_means: s_posterior_means(&enc, seed)?,
        widths,
        exceedance,
    })
}

/// Widths of in-distribution images versus each probe set (each a row-major image buffer).
pub fn ood_report(model: &Model, id: &Dataset, probes: &[(&str, &[f64])], units: Option<&[usize]>, seed: u64) -> Result<OodReport> {
    let id_widths = model.encode_batch(&id.images)?.widths(units);
    let id_src = source("id", model, &id.images, &id_widths, units, seed)?;
    let probes = probes
        .iter()
        .map(|(tag, imgs)| source(tag, model, imgs, &id_widths, units, seed))
        .collect::<Result<_>>()?;
    Ok(OodReport {
        id_p90: stats::quantile(&id_widths, 0.9),
        id: id_src,
        probes,
    })
}

// ---------------------------------------------------------------- bow-tie

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BowtiePair {
    pub conditioning: usize,
    pub conditioned: usize,
    pub central_std: f64,
    pub flanking_std: f64,
}

/// Conditional spread of one latent's posterior means across quartiles of another's.
pub fn bowtie_analysis(mu: &[f64], dims: usize, units: &[usize], n_pairs: usize, seed: u64) -> Result<Vec<BowtiePair>> {
    let n = mu.len() / dims.max(1);
    if n < 8 {
        return Err(Error::invalid("bow-tie analysis needs at least 8 images"));
    }
    if units.len() < 2 {
        return Err(Error::invalid("bow-tie analysis needs at least two informative latents"));
    }
    let mut rng = RngStream::seeded(seed).fork(0xB077);
    (0..n_pairs)
        .map(|_| {
            let a = units[rng.below(units.len())];
            let mut b = units[rng.below(units.len() - 1)];
            if b == a {
                b = units[units.len() - 1];
            }
            let cond: Vec<f64> = (0..n).map(|i| mu[i * dims + a]).collect();
            let quarters = equal_count_bins(&cond, 4);
            let pick = |qs: &[usize]| -> Vec<f64> { qs.iter().flat_map(|&q| quarters[q].iter().map(|&i| mu[i * dims + b])).collect() };
            Ok(BowtiePair {
                conditioning: a,
                conditioned: b,
                central_std: stats::sample_std(&pick(&[1, 2])),
                flanking_std: stats::sample_std(&pick(&[0, 3])),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- divisive normalization

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NnlsResult {
    pub x: Vec<f64>,
    pub sweeps: usize,
    /// Squared residual ‖Ax − b‖² after each sweep.
    pub residuals: Vec<f64>,
}

/// Non-negative least squares by projected coordinate descent on the normal equations.
/// `a` is row-major `[rows, cols]`.
pub fn nnls(a: &[f64], b: &[f64], rows: usize, cols: usize, tol: f64, max_sweeps: usize) -> Result<NnlsResult> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(Error::invalid("nnls: inconsistent system dimensions"));
    }
    let g = ndgrad::linalg::matmul_at(a, a, cols, rows, cols);
    let h = ndgrad::linalg::matmul_at(a, b, cols, rows, 1);
    let btb: f64 = b.iter().map(|v| v * v).sum();
    let mut x = vec![0.0; cols];
    // gradient of ½‖Ax − b‖² is Gx − h
    let mut grad: Vec<f64> = h.iter().map(|v| -v).collect();
    let mut residuals = Vec::new();
    let resid = |x: &[f64], grad: &[f64]| {
        // ‖Ax−b‖² = xᵀGx − 2hᵀx + bᵀb = xᵀ(grad − h) ... expressed via grad = Gx − h
        let xgx_minus: f64 = x.iter().zip(grad).zip(&h).map(|((xi, gi), hi)| xi * (gi + hi) - 2.0 * hi * xi).sum();
        (xgx_minus + btb).max(0.0)
    };
    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for k in 0..cols {
            let gkk = g[k * cols + k];
            if gkk <= 0.0 {
                continue;
            }
            let new = (x[k] - grad[k] / gkk).max(0.0);
            let delta = new - x[k];
            if delta != 0.0 {
                x[k] = new;
                for (r, gr) in grad.iter_mut().enumerate() {
                    *gr += g[r * cols + k] * delta;
                }
                max_step = max_step.max((delta * gkk).abs());
            }
        }
        residuals.push(resid(&x, &grad));
        if max_step <= tol * scale {
            break;
        }
    }
    Ok(NnlsResult { x, sweeps, residuals })
}

pub const DN_THRESHOLD: f64 = 1e-3;
pub const DN_TOL: f64 = 1e-10;
pub const DN_MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DnFit {
    pub dims: usize,
    /// `weights[j * dims + i] = w_ji`; the diagonal is zero.
    pub weights: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Mean squared residual of the linearized fit per latent.
    pub residuals: Vec<f64>,
    /// Latents whose samples were all excluded.
    pub flagged: Vec<bool>,
    pub n_fits: usize,
}

impl DnFit {
    pub fn w(&self, j: usize, i: usize) -> f64 {
        self.weights[j * self.dims + i]
    }
}

/// Single fit of `(L_i/z_i)² = Σ_{j≠i} w_ji L_j² + σ_i²` over the given sample rows.
fn dn_fit_once(l: &[f64], z: &[f64], d: usize, rows: &[usize], threshold: f64) -> Result<DnFit> {
    let mut fit = DnFit {
        dims: d,
        weights: vec![0.0; d * d],
        sigma2: vec![0.0; d],
        residuals: vec![f64::NAN; d],
        flagged: vec![false; d],
        n_fits: 1,
    };
    for i in 0..d {
        let used: Vec<usize> = rows.iter().copied().filter(|&r| z[r * d + i].abs() > threshold).collect();
        if used.is_empty() {
            fit.flagged[i] = true;
            continue;
        }
        let cols = d; // d−1 weights plus the intercept
        let mut a = Vec::with_capacity(used.len() * cols);
        let mut y = Vec::with_capacity(used.len());
        for &r in &used {
            for j in (0..d).filter(|&j| j != i) {
                a.push(l[r * d + j] * l[r * d + j]);
            }
            a.push(1.0);
            let q = l[r * d + i] / z[r * d + i];
            y.push(q * q);
        }
        let sol = nnls(&a, &y, used.len(), cols, DN_TOL, DN_MAX_SWEEPS)?;
        for (k, j) in (0..d).filter(|&j| j != i).enumerate() {
            fit.weights[j * d + i] = sol.x[k];
        }
        fit.sigma2[i] = sol.x[cols - 1];
        fit.residuals[i] = sol.residuals.last().copied().unwrap_or(f64::NAN) / used.len() as f64;
    }
    Ok(fit)
}

/// Average of `n_fits` fits on random subsamples of `fraction` of the rows
/// (a single full-data fit when `n_fits == 1` and `fraction == 1`).
pub fn fit_divisive_normalization(l: &[f64], z: &[f64], d: usize, n_fits: usize, fraction: f64, seed: u64) -> Result<DnFit> {
    if l.len() != z.len() || d == 0 || l.len() % d != 0 {
        return Err(Error::invalid("divisive normalization: L and z must both be [n, d]"));
    }
    if n_fits == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("divisive normalization: need n_fits ≥ 1 and fraction in (0, 1]"));
    }
    let n = l.len() / d;
    let take = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let master = RngStream::seeded(seed).fork(0xD1F5);
    let mut acc: Option<DnFit> = None;
    for f in 0..n_fits {
        let mut rows = master.fork(f as u64).permutation(n);
        rows.truncate(take);
        rows.sort_unstable();
        let fit = dn_fit_once(l, z, d, &rows, DN_THRESHOLD)?;
        acc = Some(match acc {
            None => fit,
            Some(mut a) => {
                a.weights.iter_mut().zip(&fit.weights).for_each(|(x, y)| *x += y);
                a.sigma2.iter_mut().zip(&fit.sigma2).for_each(|(x, y)| *x += y);
                a.residuals.iter_mut().zip(&fit.residuals).for_each(|(x, y)| *x += y);
                a.flagged.iter_mut().zip(&fit.flagged).for_each(|(x, y)| *x |= y);
                a
            }
        });
    }
    let mut fit = acc.expect("n_fits ≥ 1");
    let k = n_fits as f64;
    fit.weights.iter_mut().for_each(|v| *v /= k);
    fit.sigma2.iter_mut().for_each(|v| *v /= k);
    fit.residuals.iter_mut().for_each(|v| *v /= k);
    fit.n_fits = n_fits;
    Ok(fit)
}

/// Slope of posterior means regressed on linear responses across latents for one image.
pub fn normalization_index(z: &[f64], l: &[f64]) -> Result<f64> {
    Ok(stats::linear_fit(l, z)?.0)
}
