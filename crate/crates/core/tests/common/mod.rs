//! Test-only helpers shared by the integration targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rbm_pb::Species;

/// Full-interaction overdamped Langevin dynamics on `(a, l)` with
/// reflecting walls: every pair interacts with weight `|Q|/N`.
pub struct AllPairs1d {
    pub nu: f64,
    pub free_charge: f64,
    pub a: f64,
    pub l: f64,
    pub tau: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub abs_q: f64,
    rng: ChaCha8Rng,
}

impl AllPairs1d {
    pub fn new(nu: f64, free_charge: f64, a: f64, l: f64, tau: f64, n_plus: usize, n_minus: usize, q: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_plus + n_minus;
        let x = (0..n).map(|_| rng.random_range(a..l)).collect();
        let z = (0..n).map(|i| if i < n_plus { 1.0 } else { -1.0 }).collect();
        Self { nu, free_charge, a, l, tau, x, z, abs_q: q * n as f64, rng }
    }

    fn reflect(&self, mut y: f64) -> f64 {
        loop {
            if y > self.l {
                y = 2.0 * self.l - y;
            } else if y < self.a {
                y = 2.0 * self.a - y;
            } else {
                return y;
            }
        }
    }

    pub fn step(&mut self) {
        let n = self.x.len();
        // The field of a charged sheet at distance: sign(r) / (2ν).
        let kernel = |r: f64| if r == 0.0 { 0.0 } else { r.signum() / (2.0 * self.nu) };
        let weight = self.abs_q / n as f64;
        let external = self.free_charge / (4.0 * self.nu);
        let drift: Vec<f64> = (0..n)
            .map(|i| {
                let pair: f64 = (0..n).filter(|&k| k != i).map(|k| self.z[k] * kernel(self.x[i] - self.x[k])).sum();
                self.z[i] * (external + weight * pair)
            })
            .collect();
        let amp = (2.0 * self.tau).sqrt();
        for i in 0..n {
            let g: f64 = StandardNormal.sample(&mut self.rng);
            let y = self.x[i] + drift[i] * self.tau + amp * g;
            self.x[i] = self.reflect(y);
        }
    }

    pub fn positions(&self, s: Species) -> impl Iterator<Item = f64> + '_ {
        self.x.iter().zip(&self.z).filter(move |(_, &z)| z == s.z()).map(|(&x, _)| x)
    }
}

/// Normalised histogram of samples on `bins` equal bins of `[lo, hi]`.
pub fn pooled_pdf(lo: f64, hi: f64, bins: usize, samples: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for x in samples {
        assert!((lo..=hi).contains(&x), "sample {x} outside [{lo}, {hi}]");
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let total = counts.iter().sum::<u64>() as f64;
    counts.iter().map(|&c| c as f64 / (total * width)).collect()
}

/// `Σ |p - q| · width`.
pub fn l1(p: &[f64], q: &[f64], width: f64) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs() * width).sum()
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}
