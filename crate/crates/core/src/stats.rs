//! Small descriptive and inferential statistics used across the battery.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (N−1 denominator); NaN for fewer than two values.
pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_var(xs).sqrt()
}

/// Image contrast σ_pix: across-pixel sample standard deviation.
pub fn pixel_std(x: &[f64]) -> f64 {
    sample_std(x)
}

/// Linear-interpolated quantile, `q ∈ [0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "spearman sample lengths",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least two pairs"));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Two-sample Kolmogorov–Smirnov statistic D = sup |F_a − F_b|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("KS statistic needs nonempty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let v = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= v {
            i += 1;
        }
        while j < sb.len() && sb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub mean_diff: f64,
}

/// Paired t-test on `a − b` with a two-sided p-value.
/// All-zero differences give t = 0, p = 1.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "paired t-test sample lengths",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let sd = sample_std(&d);
    let df = n - 1.0;
    if sd == 0.0 {
        let (t, p) = if md == 0.0 {
            (0.0, 1.0)
        } else {
            (md.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest { t, p, df, mean_diff: md });
    }
    let t = md / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df, mean_diff: md })
}

/// Empirical `p(a > b)` over all cross pairs, ties counted as one half.
pub fn exceedance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut sa = a.to_vec();
    sa.sort_by(f64::total_cmp);
    let n = sa.len();
    let mut total = 0.0;
    for &v in b {
        let below = sa.partition_point(|&x| x < v);
        let upto = sa.partition_point(|&x| x <= v);
        total += (n - upto) as f64 + 0.5 * (upto - below) as f64;
    }
    total / (n as f64 * b.len() as f64)
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("linear fit needs at least two paired points"));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("linear fit: zero variance in regressor"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}
