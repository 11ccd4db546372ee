//! Adaptive Gauss-Kronrod quadrature and the closed-form KL suite built on it.
//! The s-families are integrated in s-space, with explicit change-of-variable
//! densities.

use eavae::distributions::{
    kl_gamma_to_prior, kl_laplace_to_std, kl_normal_to_std, ScalarSPosterior, GAMMA_PRIOR_SCALE,
};

// 7-point Gauss / 15-point Kronrod nodes on [-1, 1].
const XK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

pub fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let pair = f(c - h * XK[i]) + f(c + h * XK[i]);
        k += WK[i] * pair;
        if i % 2 == 1 {
            g += WG[i / 2] * pair;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Globally adaptive: keeps splitting the interval with the largest error
/// estimate until the total estimate drops below `tol`.
pub fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let mut parts = vec![(a, b, gk15(f, a, b))];
    for _ in 0..2000 {
        let total_err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if total_err <= tol {
            break;
        }
        let worst = (0..parts.len()).max_by(|&i, &j| parts[i].2 .1.total_cmp(&parts[j].2 .1)).unwrap();
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(f, lo, mid)));
        parts.push((mid, hi, gk15(f, mid, hi)));
    }
    parts.iter().map(|p| p.2 .0).sum()
}

/// Integrates over consecutive breakpoints (sorted and deduplicated here).
pub fn integrate(f: &dyn Fn(f64) -> f64, mut points: Vec<f64>) -> f64 {
    points.sort_by(f64::total_cmp);
    points.dedup();
    points.windows(2).map(|w| adaptive(f, w[0], w[1], 1e-10)).sum()
}

/// q ln(q/p) from log densities, zero where q underflows.
pub fn kl_integrand(log_q: f64, log_p: f64) -> f64 {
    let q = log_q.exp();
    if q == 0.0 {
        0.0
    } else {
        q * (log_q - log_p)
    }
}

pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    grid(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

pub fn ln_laplace(x: f64, mu: f64, b: f64) -> f64 {
    -(x - mu).abs() / b - (2.0 * b).ln()
}

pub fn ln_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (x - mu).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

pub fn ln_gamma2(x: f64, theta: f64) -> f64 {
    // k = 2: Γ(2) = 1
    x.ln() - x / theta - 2.0 * theta.ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Pre-activation of `s = softplus(u)` and ln |du/ds|.
pub fn inv_softplus(s: f64) -> (f64, f64) {
    let u = s + (-(-s).exp()).ln_1p();
    let log_jac = -(-(-s).exp()).ln_1p();
    (u, log_jac)
}

/// Worst absolute error of each closed-form KL over its 10×10 grid.
pub fn kl_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for &mu in &grid(-3.0, 3.0, 10) {
        for &b in &log_grid(0.05, 5.0, 10) {
            let f = |x: f64| kl_integrand(ln_laplace(x, mu, b), ln_laplace(x, 0.0, 1.0));
            let num = integrate(&f, vec![mu - 45.0 * b, mu, 0.0, mu + 45.0 * b]);
            worst = worst.max((num - kl_laplace_to_std(&[mu], &[b]).unwrap()[0]).abs());
        }
    }
    out.push(("laplace", worst));

    let mut worst: f64 = 0.0;
    for &mu in &grid(-3.0, 3.0, 10) {
        for &var in &log_grid(0.01, 10.0, 10) {
            let sd = var.sqrt();
            let f = |x: f64| kl_integrand(ln_normal(x, mu, var), ln_normal(x, 0.0, 1.0));
            let num = integrate(&f, vec![mu - 12.0 * sd, mu, mu + 12.0 * sd]);
            worst = worst.max((num - kl_normal_to_std(&[mu], &[var]).unwrap()[0]).abs());
        }
    }
    out.push(("normal", worst));

    // one free parameter; the 100 grid points are laid out as 10×10 in log θ
    let mut worst: f64 = 0.0;
    for &theta in &log_grid(0.02, 20.0, 100) {
        let f = |x: f64| if x <= 0.0 { 0.0 } else { kl_integrand(ln_gamma2(x, theta), ln_gamma2(x, GAMMA_PRIOR_SCALE)) };
        let num = integrate(&f, vec![0.0, theta, 2.0 * theta, 10.0 * theta, 80.0 * theta]);
        worst = worst.max((num - kl_gamma_to_prior(theta).unwrap()).abs());
    }
    out.push(("gamma", worst));

    let mut worst: f64 = 0.0;
    for &mu in &grid(-3.0, 3.0, 10) {
        for &b in &log_grid(0.05, 2.0, 10) {
            let density = |s: f64, m: f64, scale: f64| {
                let (u, log_jac) = inv_softplus(s);
                ln_laplace(u, m, scale) + log_jac
            };
            let f = |s: f64| if s <= 0.0 { 0.0 } else { kl_integrand(density(s, mu, b), density(s, 0.0, 1.0)) };
            let lo = softplus(mu - 40.0 * b);
            let hi = softplus(mu + 40.0 * b);
            let mut pts = vec![lo, softplus(mu), hi, softplus(mu - 5.0 * b), softplus(mu + 5.0 * b)];
            if lo < 2f64.ln() && 2f64.ln() < hi {
                pts.push(2f64.ln());
            }
            let num = integrate(&f, pts);
            let closed = ScalarSPosterior::SoftplusLaplace { mu, b }.kl_to_prior().unwrap();
            worst = worst.max((num - closed).abs());
        }
    }
    out.push(("softplus-laplace", worst));

    let mut worst: f64 = 0.0;
    for &nu in &grid(-2.0, 2.0, 10) {
        for &var in &log_grid(0.01, 2.0, 10) {
            let sd = var.sqrt();
            let density = |s: f64, m: f64, v: f64| ln_normal(s.ln(), m, v) - s.ln();
            let f = |s: f64| if s <= 0.0 { 0.0 } else { kl_integrand(density(s, nu, var), density(s, 0.0, 1.0)) };
            // breakpoints every half std in log s; the range spans many decades
            let pts: Vec<f64> = (-24..=24).map(|k| (nu + 0.5 * k as f64 * sd).exp()).collect();
            let num = integrate(&f, pts);
            let closed = ScalarSPosterior::LogNormal { nu, var }.kl_to_prior().unwrap();
            worst = worst.max((num - closed).abs());
        }
    }
    out.push(("log-normal", worst));
    out
}
