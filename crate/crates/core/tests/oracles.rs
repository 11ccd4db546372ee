//! Library results against independent reference implementations written here.

mod common;

use eavae::data::{self, GsmSpec, Mixing};
use eavae::distributions::NormalPosterior;
use eavae::eval::bowtie_analysis;
use eavae::stats;
use ndgrad::{AdamConfig, AdamState, Graph, ParamSet, RngStream, Tensor};

/// SplitMix64, kept separate from the library's ChaCha streams.
struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on (0, 1).
    fn uniform(&mut self) -> f64 {
        ((self.next() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        (-2.0 * self.uniform().ln()).sqrt() * (2.0 * std::f64::consts::PI * self.uniform()).cos()
    }

    /// Gamma(2, 1) as the sum of two unit exponentials.
    fn gamma2(&mut self) -> f64 {
        -self.uniform().ln() - self.uniform().ln()
    }
}

fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Direct 2-D convolution with the full (2r+1)² Gaussian window, mirror padding by repeated folding.
fn reference_blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let fold = |mut i: i64, n: i64| {
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (mut acc, mut total) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += k * img[fold(y + dy, h as i64) * w + fold(x + dx, w as i64)];
                    total += k;
                }
            }
            out[y as usize * w + x as usize] = acc / total;
        }
    }
    out
}

#[test]
fn blur_matches_direct_convolution_and_flattens_at_half_width() {
    let mut rng = SplitMix(4);
    let img: Vec<f64> = (0..32 * 32).map(|_| rng.uniform()).collect();
    for sigma in [0.7, 2.0, 5.0, 16.0] {
        let lib = data::blur(&img, 32, 32, sigma).unwrap();
        let reference = reference_blur(&img, 32, 32, sigma);
        let worst = lib.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "sigma {sigma}: {worst:e}");
    }
    // non-square images exercise the two passes separately
    let rect: Vec<f64> = (0..7 * 3).map(|_| rng.uniform()).collect();
    let worst = data::blur(&rect, 7, 3, 1.5).unwrap().iter().zip(&reference_blur(&rect, 7, 3, 1.5)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12);

    let flat = data::blur(&img, 32, 32, 16.0).unwrap();
    assert!(sample_std(&flat) < 0.05 * sample_std(&img), "{} vs {}", sample_std(&flat), sample_std(&img));
}

#[test]
fn gsm_mean_contrast_matches_an_independent_sampler() {
    let spec = GsmSpec {
        side: 8,
        k: 64,
        mixing: Mixing::Gabor,
        mixing_seed: 7,
        noise_std: 0.05,
        amplitude: 0.5,
    };
    let n = 10_000;
    let ds = data::synth_gsm(&spec, n, 1).unwrap();
    let lib_mean = ds.contrast.iter().sum::<f64>() / n as f64;

    let a = spec.mixing_matrix();
    let m = 64;
    let mut rng = SplitMix(99);
    let mut total = 0.0;
    for _ in 0..n {
        let s = rng.gamma2() / 2f64.sqrt();
        let z: Vec<f64> = (0..spec.k).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..m)
            .map(|i| spec.amplitude * s * (0..spec.k).map(|j| a[i * spec.k + j] * z[j]).sum::<f64>() + spec.noise_std * rng.normal())
            .collect();
        total += sample_std(&x);
    }
    let mc_mean = total / n as f64;
    assert!((lib_mean - mc_mean).abs() < 0.05 * mc_mean, "{lib_mean} vs {mc_mean}");
}

#[test]
fn normal_rsample_moments() {
    let q = NormalPosterior { mu: vec![1.0; 100_000], var: vec![0.25; 100_000] };
    let x = q.rsample(&mut RngStream::seeded(8)).unwrap();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = sample_std(&x).powi(2);
    assert!((mean - 1.0).abs() < 0.03, "{mean}");
    assert!((var - 0.25).abs() < 0.03 * 0.25, "{var}");
}

#[test]
fn bowtie_separates_independent_from_scale_mixed_latents() {
    let n = 10_000;
    let mut rng = SplitMix(5);
    let independent: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
    for p in bowtie_analysis(&independent, 2, &[0, 1], 2, 0).unwrap() {
        let ratio = p.central_std / p.flanking_std;
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }
    // a shared positive factor makes the conditioned spread grow with the conditioning magnitude
    let mixed: Vec<f64> = (0..n)
        .flat_map(|_| {
            let s = rng.gamma2();
            [s * rng.normal(), s * rng.normal()]
        })
        .collect();
    for p in bowtie_analysis(&mixed, 2, &[0, 1], 2, 0).unwrap() {
        assert!(p.flanking_std > 1.2 * p.central_std, "{} vs {}", p.flanking_std, p.central_std);
    }
}

/// Two-sample KS by evaluating both empirical CDFs at every observed value.
fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], v: f64| s.iter().filter(|x| **x <= v).count() as f64 / s.len() as f64;
    a.iter().chain(b).map(|&v| (cdf(a, v) - cdf(b, v)).abs()).fold(0.0, f64::max)
}

/// Two-sided p of Student's t. With x = √ν·tanθ the density is ∝ cos^(ν−1)θ on (−π/2, π/2).
fn brute_t_p(t: f64, nu: f64) -> f64 {
    use common::quadrature::integrate;
    let f = |th: f64| th.cos().powf(nu - 1.0);
    let theta0 = (t.abs() / nu.sqrt()).atan();
    let half = std::f64::consts::FRAC_PI_2;
    integrate(&f, vec![theta0, half]) / integrate(&f, vec![0.0, half])
}

#[test]
fn ks_and_paired_t_match_brute_force() {
    let mut rng = SplitMix(21);
    let a: Vec<f64> = (0..23).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..23).map(|_| 0.4 + 1.3 * rng.normal()).collect();
    let short: Vec<f64> = b[..17].to_vec();
    assert!((stats::ks_statistic(&a, &short).unwrap() - brute_ks(&a, &short)).abs() < 1e-10);
    // ties across samples
    let c = [1.0, 2.0, 2.0, 3.0, 5.0];
    let d = [2.0, 2.0, 4.0, 5.0];
    assert!((stats::ks_statistic(&c, &d).unwrap() - brute_ks(&c, &d)).abs() < 1e-10);

    let t = stats::paired_t(&a, &b).unwrap();
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let t_ref = mean / (sample_std(&diffs) / n.sqrt());
    assert!((t.t - t_ref).abs() < 1e-10, "{} vs {t_ref}", t.t);
    assert!((t.p - brute_t_p(t_ref, n - 1.0)).abs() < 1e-10, "{} vs {}", t.p, brute_t_p(t_ref, n - 1.0));
    assert_eq!(t.df, n - 1.0);
}

#[test]
fn one_parameter_decoder_reaches_the_least_squares_optimum() {
    // x ≈ w·c with squared error; the optimum is Σxc / Σc²
    let mut rng = SplitMix(3);
    let c: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
    let x: Vec<f64> = c.iter().map(|v| 2.5 * v + 0.3 * rng.normal()).collect();
    let optimum = x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / c.iter().map(|v| v * v).sum::<f64>();

    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::vector(vec![0.0]));
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(0.05));
    let (ct, xt) = (Tensor::new(&[200, 1], c.clone()).unwrap(), Tensor::new(&[200, 1], x.clone()).unwrap());
    for _ in 0..2000 {
        params.zero_grad();
        let mut g = Graph::new();
        let wv = g.param(&params, w);
        let cv = g.constant(ct.clone());
        let xv = g.constant(xt.clone());
        let pred = g.mul(cv, wv).unwrap();
        let r = g.sub(xv, pred).unwrap();
        let sq = g.square(r);
        let loss = g.mean(sq);
        g.backward_into(loss, &mut params).unwrap();
        adam.step(&mut params).unwrap();
    }
    let got = params.get(w).data()[0];
    assert!((got - optimum).abs() < 1e-3, "{got} vs {optimum}");
}
