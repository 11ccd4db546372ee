//! Responses generated from the divisive normalization model with planted weights.

use eavae::eval::fit_divisive_normalization;
use ndgrad::RngStream;

pub const D: usize = 32;
pub const N: usize = 5000;
pub const DENSITY: f64 = 0.2;

pub struct Planted {
    pub w: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub l: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn plant(seed: u64) -> Planted {
    let mut rng = RngStream::seeded(seed);
    let mut w = vec![0.0; D * D];
    for j in 0..D {
        for i in (0..D).filter(|&i| i != j) {
            if rng.bernoulli(DENSITY) {
                w[j * D + i] = rng.uniform_range(0.05, 0.5);
            }
        }
    }
    let sigma2: Vec<f64> = (0..D).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let l = rng.normals(N * D);
    let mut z = vec![0.0; N * D];
    for r in 0..N {
        let row = &l[r * D..(r + 1) * D];
        for i in 0..D {
            let energy: f64 = (0..D).filter(|&j| j != i).map(|j| w[j * D + i] * row[j] * row[j]).sum();
            z[r * D + i] = row[i] / (sigma2[i] + energy).sqrt();
        }
    }
    Planted { w, sigma2, l, z }
}

pub fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative weight error (Frobenius) and worst σ² relative error of a full-data fit.
pub fn plant_and_recover(seed: u64) -> (f64, f64) {
    let p = plant(seed);
    let fit = fit_divisive_normalization(&p.l, &p.z, D, 1, 1.0, 0).unwrap();
    let w_err = norm(fit.weights.iter().zip(&p.w).map(|(a, b)| a - b)) / norm(p.w.iter().copied());
    let s_err = (0..D).map(|i| (fit.sigma2[i] - p.sigma2[i]).abs() / p.sigma2[i]).fold(0.0, f64::max);
    (w_err, s_err)
}
