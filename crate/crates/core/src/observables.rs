//! Statistics of particle ensembles: binned densities, bulk densities at the
//! artificial wall, recovered potentials, weak errors, kernel density
//! fields, capacitance curves and a two-sample symmetry test.

use crate::error::{ensure_positive, Error, Result};
use crate::geometry::{norm, sub, unit_ball_volume, Point, SimDomain, BOUNDARY_TOL};
use crate::rbm::{ParticleEnsemble, Species};
use crate::reference::GridSolution;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

/// `n` equal bins on `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

/// How a bin's measure is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinMeasure {
    /// Interval length.
    Linear,
    /// Volume of the shell between the two radii in this dimension.
    Radial(usize),
}

impl BinMeasure {
    pub fn for_domain<const D: usize>(domain: &SimDomain<D>) -> Self {
        if domain.is_shell() {
            BinMeasure::Radial(D)
        } else {
            BinMeasure::Linear
        }
    }

    pub fn measure(self, lo: f64, hi: f64) -> f64 {
        match self {
            BinMeasure::Linear => hi - lo,
            BinMeasure::Radial(d) => unit_ball_volume(d) * (hi.powi(d as i32) - lo.powi(d as i32)),
        }
    }

    /// Density of the measure at radius `r` (`1`, `2πr`, `4πr²`).
    pub fn weight(self, r: f64) -> f64 {
        match self {
            BinMeasure::Linear => 1.0,
            BinMeasure::Radial(d) => d as f64 * unit_ball_volume(d) * r.powi(d as i32 - 1),
        }
    }
}

/// Pooled, normalised histogram of one species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub bin_edges: Vec<f64>,
    /// Probability density per unit measure; `Σ pdf · measure = 1`.
    pub pdf: Vec<f64>,
    pub counts: Vec<u64>,
    pub species: Species,
    /// `Q_±` of the species, so that `charge_scale · pdf` is the charge density.
    pub charge_scale: f64,
    pub frame_count: usize,
    pub measure: BinMeasure,
    /// Samples outside the bin range that were skipped.
    pub skipped: u64,
}

impl DensityEstimate {
    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn bin_measures(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| self.measure.measure(w[0], w[1])).collect()
    }

    pub fn charge_density(&self) -> Vec<f64> {
        self.pdf.iter().map(|p| p * self.charge_scale).collect()
    }

    /// `Σ pdf · measure`.
    pub fn total_mass(&self) -> f64 {
        self.pdf.iter().zip(self.bin_measures()).map(|(p, m)| p * m).sum()
    }

    /// `Σ_bins |own(bin) - ∫_bin g / measure| · measure` where `own` is the
    /// charge density when `charge` is set and the pdf otherwise; `g` is
    /// averaged over each bin with Simpson's rule in the bin measure.
    pub fn l1_distance<F: Fn(f64) -> f64>(&self, g: F, charge: bool) -> f64 {
        let own = if charge { self.charge_density() } else { self.pdf.clone() };
        self.bin_edges
            .windows(2)
            .zip(&own)
            .map(|(w, v)| {
                let m = self.measure.measure(w[0], w[1]);
                let avg = bin_average(&g, w[0], w[1], self.measure);
                (v - avg).abs() * m
            })
            .sum()
    }

    /// Rows `bin_center,pdf,charge_density`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_center,pdf,charge_density")?;
        for ((c, p), q) in self.centers().iter().zip(&self.pdf).zip(self.charge_density()) {
            writeln!(w, "{c},{p},{q}")?;
        }
        Ok(())
    }
}

/// Measure-weighted average of `g` over `[lo, hi]` by composite Simpson.
fn bin_average<F: Fn(f64) -> f64>(g: &F, lo: f64, hi: f64, measure: BinMeasure) -> f64 {
    const PANELS: usize = 8;
    let h = (hi - lo) / PANELS as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..=PANELS {
        let x = lo + k as f64 * h;
        let c = if k == 0 || k == PANELS { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        let w = measure.weight(x);
        num += c * w * g(x);
        den += c * w;
    }
    num / den
}

/// Accumulates pooled counts over frames.
#[derive(Debug, Clone)]
pub struct HistogramAccumulator {
    edges: Vec<f64>,
    counts: Vec<u64>,
    species: Species,
    measure: BinMeasure,
    strict: bool,
    frames: usize,
    skipped: u64,
    charge_scale: f64,
}

impl HistogramAccumulator {
    /// `strict` turns samples outside the edges into a coverage error;
    /// otherwise they are counted as skipped, and still count towards the
    /// normalization so the pdf integrates to the covered fraction.
    pub fn new(edges: Vec<f64>, species: Species, measure: BinMeasure, strict: bool) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter {
                name: "bin_edges",
                reason: "need at least two strictly increasing edges".to_string(),
            });
        }
        let n = edges.len() - 1;
        Ok(Self { edges, counts: vec![0; n], species, measure, strict, frames: 0, skipped: 0, charge_scale: 0.0 })
    }

    fn bin_of(&self, r: f64) -> Option<usize> {
        let n = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[n]);
        if r < lo - BOUNDARY_TOL || r > hi + BOUNDARY_TOL {
            return None;
        }
        let k = self.edges.partition_point(|&e| e <= r);
        Some(k.saturating_sub(1).min(n - 1))
    }

    pub fn add_sample(&mut self, r: f64) -> Result<()> {
        match self.bin_of(r) {
            Some(k) => self.counts[k] += 1,
            None if self.strict => {
                return Err(Error::Coverage { position: r, lo: self.edges[0], hi: *self.edges.last().unwrap() })
            }
            None => self.skipped += 1,
        }
        Ok(())
    }

    pub fn add_frame<const D: usize>(&mut self, frame: &ParticleEnsemble<D>, domain: &SimDomain<D>) -> Result<()> {
        for x in frame.positions_of(self.species) {
            self.add_sample(domain.radial_coordinate(x))?;
        }
        self.frames += 1;
        self.charge_scale = frame.species_charge(self.species);
        Ok(())
    }

    pub fn finish(&self) -> Result<DensityEstimate> {
        if self.frames == 0 {
            return Err(Error::NoFrames);
        }
        let total = self.counts.iter().sum::<u64>() + self.skipped;
        let pdf = self
            .counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, w)| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / (total as f64 * self.measure.measure(w[0], w[1]))
                }
            })
            .collect();
        Ok(DensityEstimate {
            bin_edges: self.edges.clone(),
            pdf,
            counts: self.counts.clone(),
            species: self.species,
            charge_scale: self.charge_scale,
            frame_count: self.frames,
            measure: self.measure,
            skipped: self.skipped,
        })
    }
}

/// Pooled histogram of `species` over `frames`; radial in a shell.
pub fn histogram_density<const D: usize>(
    frames: &[ParticleEnsemble<D>],
    species: Species,
    bin_edges: &[f64],
    domain: &SimDomain<D>,
) -> Result<DensityEstimate> {
    let mut acc = HistogramAccumulator::new(bin_edges.to_vec(), species, BinMeasure::for_domain(domain), true)?;
    for f in frames {
        acc.add_frame(f, domain)?;
    }
    acc.finish()
}

/// Charge density `Q_± · 2 N_±(D_h) / (α(d) h^d N_±)` in the half ball
/// `D_h = {x ∈ Ω_L : |x - x̄| <= h}`, averaged over frames.
pub fn bulk_density<const D: usize>(
    frames: &[ParticleEnsemble<D>],
    x_bar: &Point<D>,
    h: f64,
    species: Species,
    domain: &SimDomain<D>,
) -> Result<f64> {
    ensure_positive("h", h)?;
    let (lo, hi) = domain.bounds();
    if h >= hi - lo {
        return Err(Error::InvalidParameter { name: "h", reason: format!("must be below L - R = {}", hi - lo) });
    }
    if (domain.radial_coordinate(x_bar) - hi).abs() > 1e-9 {
        return Err(Error::InvalidParameter { name: "x_bar", reason: "must lie on the artificial wall".to_string() });
    }
    if frames.is_empty() {
        return Err(Error::NoFrames);
    }
    let half_ball = 0.5 * unit_ball_volume(D) * h.powi(D as i32);
    let sum: f64 = frames
        .iter()
        .map(|f| {
            let n = f.count(species);
            if n == 0 {
                return 0.0;
            }
            let inside = f.positions_of(species).filter(|x| norm(&sub(x, x_bar)) <= h).count();
            f.species_charge(species) * inside as f64 / (half_ball * n as f64)
        })
        .sum();
    Ok(sum / frames.len() as f64)
}

/// `Φ = ½ ln(ρ_- / ρ_+)` per bin from charge densities; `None` where
/// either density vanishes.
pub fn potential_from_densities(rho_plus: &DensityEstimate, rho_minus: &DensityEstimate) -> Result<Vec<Option<f64>>> {
    if rho_plus.bin_edges != rho_minus.bin_edges {
        return Err(Error::InvalidParameter { name: "bin_edges", reason: "densities must share bins".to_string() });
    }
    Ok(potential_from_values(&rho_plus.charge_density(), &rho_minus.charge_density()))
}

pub fn potential_from_values(rho_plus: &[f64], rho_minus: &[f64]) -> Vec<Option<f64>> {
    rho_plus
        .iter()
        .zip(rho_minus)
        .map(|(&p, &m)| (p > 0.0 && m > 0.0).then(|| 0.5 * (m / p).ln()))
        .collect()
}

/// Test functions for weak errors on `(a, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Linear,
    Quadratic,
    Cosine,
    Bump,
}

impl TestFunction {
    pub const ALL: [TestFunction; 4] = [TestFunction::Linear, TestFunction::Quadratic, TestFunction::Cosine, TestFunction::Bump];

    pub fn id(self) -> &'static str {
        match self {
            TestFunction::Linear => "f1",
            TestFunction::Quadratic => "f2",
            TestFunction::Cosine => "f3",
            TestFunction::Bump => "f4",
        }
    }

    /// `x`, `x²`, `cos(x/8)`, `exp(-(x - L/2)²/4)`.
    pub fn eval(self, x: f64, l: f64) -> f64 {
        match self {
            TestFunction::Linear => x,
            TestFunction::Quadratic => x * x,
            TestFunction::Cosine => (x / 8.0).cos(),
            TestFunction::Bump => (-(x - 0.5 * l).powi(2) / 4.0).exp(),
        }
    }
}

/// Relative root-mean-square error of one (function, species) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub test_function: TestFunction,
    pub species: Species,
    pub n_plus: usize,
    pub repetitions: usize,
    pub rmse: f64,
}

/// `sqrt(mean_m ((f̄_m - ref)/ref)²)`.
pub fn weak_error(sample_means: &[f64], reference: f64) -> Result<f64> {
    if reference == 0.0 {
        return Err(Error::DegenerateReference);
    }
    if sample_means.is_empty() {
        return Err(Error::NoFrames);
    }
    let m = sample_means.len() as f64;
    Ok((sample_means.iter().map(|f| ((f - reference) / reference).powi(2)).sum::<f64>() / m).sqrt())
}

/// Mean of `f` over the particles of one species in a frame.
pub fn sample_mean(frame: &ParticleEnsemble<1>, species: Species, f: TestFunction, l: f64) -> f64 {
    let (sum, n) = frame.positions_of(species).fold((0.0, 0usize), |(s, n), x| (s + f.eval(x[0], l), n + 1));
    sum / n as f64
}

/// `∫ f ρ± / ∫ ρ±` for the Boltzmann densities of `sol`, by the trapezoid rule.
pub fn reference_moment(sol: &GridSolution, species: Species, f: TestFunction) -> f64 {
    let (p, m) = sol.densities();
    let rho = if species == Species::Plus { p } else { m };
    let l = sol.problem.l;
    let weighted: Vec<f64> = sol.nodes.iter().zip(&rho).map(|(x, r)| f.eval(*x, l) * r).collect();
    sol.integrate(&weighted) / sol.integrate(&rho)
}

/// Projection used for planar density fields of 3D samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdePlane {
    /// `(x, y)`.
    XOy,
    /// `(y, z)`.
    YOz,
    /// `(r, φ)` with `φ = atan2(y, x)` in `[0, 2π)`.
    RPhi,
}

impl KdePlane {
    pub fn project(self, x: &Point<3>) -> (f64, f64) {
        match self {
            KdePlane::XOy => (x[0], x[1]),
            KdePlane::YOz => (x[1], x[2]),
            KdePlane::RPhi => (norm(x), azimuth(x)),
        }
    }
}

/// Azimuthal angle in `[0, 2π)`.
pub fn azimuth(x: &Point<3>) -> f64 {
    let phi = x[1].atan2(x[0]);
    if phi < 0.0 {
        phi + 2.0 * PI
    } else {
        phi
    }
}

/// Density field on a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2d {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `values[i][j]` at `(u[i], v[j])`.
    pub values: Vec<Vec<f64>>,
    pub bandwidth: (f64, f64),
}

impl Field2d {
    /// Riemann sum over the grid cells.
    pub fn integral(&self) -> f64 {
        let du = self.u[1] - self.u[0];
        let dv = self.v[1] - self.v[0];
        self.values.iter().flatten().sum::<f64>() * du * dv
    }

    /// Dense grid: a header row of `v` coordinates, then one row per `u`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = self.v.iter().map(|v| v.to_string()).collect();
        writeln!(w, "u\\v,{}", header.join(","))?;
        for (u, row) in self.u.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{u},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Scott's rule `σ n^{-1/6}` for a two-dimensional sample.
pub fn scott_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt() * n.powf(-1.0 / 6.0)
}

/// Gaussian product-kernel density of the projected samples, normalised to
/// integrate to one over the plane. Kernels are truncated at five bandwidths.
pub fn planar_kde(samples: &[Point<3>], plane: KdePlane, bandwidth: Option<(f64, f64)>, u: &[f64], v: &[f64]) -> Result<Field2d> {
    if samples.is_empty() {
        return Err(Error::NoFrames);
    }
    if u.len() < 2 || v.len() < 2 {
        return Err(Error::InvalidParameter { name: "grid", reason: "need at least two points per axis".to_string() });
    }
    let projected: Vec<(f64, f64)> = samples.iter().map(|x| plane.project(x)).collect();
    let (hu, hv) = bandwidth.unwrap_or_else(|| {
        let us: Vec<f64> = projected.iter().map(|p| p.0).collect();
        let vs: Vec<f64> = projected.iter().map(|p| p.1).collect();
        (scott_bandwidth(&us), scott_bandwidth(&vs))
    });
    ensure_positive("bandwidth", hu.min(hv))?;
    let du = u[1] - u[0];
    let dv = v[1] - v[0];
    let mut values = vec![vec![0.0; v.len()]; u.len()];
    let norm_const = 1.0 / (2.0 * PI * hu * hv * projected.len() as f64);
    for &(pu, pv) in &projected {
        let i0 = (((pu - 5.0 * hu) - u[0]) / du).floor().max(0.0) as usize;
        let i1 = ((((pu + 5.0 * hu) - u[0]) / du).ceil().max(0.0) as usize).min(u.len() - 1);
        let j0 = (((pv - 5.0 * hv) - v[0]) / dv).floor().max(0.0) as usize;
        let j1 = ((((pv + 5.0 * hv) - v[0]) / dv).ceil().max(0.0) as usize).min(v.len() - 1);
        if i0 > i1 || j0 > j1 {
            continue;
        }
        let kv: Vec<f64> = (j0..=j1).map(|j| (-0.5 * ((v[j] - pv) / hv).powi(2)).exp()).collect();
        for (i, row) in values.iter_mut().enumerate().take(i1 + 1).skip(i0) {
            let ku = (-0.5 * ((u[i] - pu) / hu).powi(2)).exp();
            for (j, k) in (j0..=j1).zip(&kv) {
                row[j] += norm_const * ku * k;
            }
        }
    }
    Ok(Field2d { u: u.to_vec(), v: v.to_vec(), values, bandwidth: (hu, hv) })
}

/// Normalised histogram of the azimuth over samples with `|x| <= r_max`.
/// Returns bin centres and densities per radian.
pub fn azimuthal_density(samples: &[Point<3>], r_max: f64, n_bins: usize) -> (Vec<f64>, Vec<f64>) {
    let width = 2.0 * PI / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    for x in samples.iter().filter(|x| norm(x) <= r_max) {
        let k = ((azimuth(x) / width) as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let total = counts.iter().sum::<u64>().max(1) as f64;
    let centers = (0..n_bins).map(|k| (k as f64 + 0.5) * width).collect();
    let density = counts.iter().map(|&c| c as f64 / (total * width)).collect();
    (centers, density)
}

/// One point of a differential capacitance curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitancePoint {
    pub free_charge: f64,
    pub voltage: f64,
    pub capacitance: f64,
}

/// `V = Φ(a) - Φ(L)`.
pub fn voltage(sol: &GridSolution) -> f64 {
    sol.phi[0] - sol.phi[sol.phi.len() - 1]
}

/// Evaluates `V(Q_f)` on the grid with `runner` and differentiates
/// `C = dQ_f/dV` by central differences (one-sided at the ends).
pub fn capacitance_curve<F>(free_charges: &[f64], mut runner: F) -> Result<Vec<CapacitancePoint>>
where
    F: FnMut(f64) -> Result<f64>,
{
    if free_charges.len() < 3 {
        return Err(Error::CapacitanceGrid("need at least three free-charge values".to_string()));
    }
    for w in free_charges.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::CapacitanceGrid(format!(
                "free charges must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let volts = free_charges.iter().map(|&q| runner(q)).collect::<Result<Vec<f64>>>()?;
    capacitance_from_samples(free_charges, &volts)
}

/// Central-difference capacitance from precomputed `(Q_f, V)` samples.
pub fn capacitance_from_samples(free_charges: &[f64], volts: &[f64]) -> Result<Vec<CapacitancePoint>> {
    let n = free_charges.len();
    if n < 3 || volts.len() != n {
        return Err(Error::CapacitanceGrid("need at least three matching (Q_f, V) samples".to_string()));
    }
    let increasing = volts[1] > volts[0];
    for k in 1..n {
        if (volts[k] > volts[k - 1]) != increasing || volts[k] == volts[k - 1] {
            return Err(Error::CapacitanceGrid(format!(
                "voltage is not monotone on [{}, {}]",
                free_charges[k - 1], free_charges[k]
            )));
        }
    }
    Ok((0..n)
        .map(|k| {
            let (i, j) = (k.saturating_sub(1), (k + 1).min(n - 1));
            CapacitancePoint {
                free_charge: free_charges[k],
                voltage: volts[k],
                capacitance: (free_charges[j] - free_charges[i]) / (volts[j] - volts[i]),
            }
        })
        .collect())
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_survival(lambda))
}

/// `Q_KS(λ) = 2 Σ_{k>=1} (-1)^{k-1} e^{-2k²λ²}`.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainShape;
    use crate::reference::{solve_pb_1d, PbProblem, NewtonOptions};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line() -> SimDomain<1> {
        SimDomain::interval(1.0, 15.0).unwrap()
    }

    fn frame_1d(xs: &[f64], species: Species, q: f64) -> ParticleEnsemble<1> {
        ParticleEnsemble::new(xs.iter().map(|&x| [x]).collect(), vec![species; xs.len()], q).unwrap()
    }

    #[test]
    fn uniform_samples_give_flat_pdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..140_000).map(|_| rng.random_range(1.0..15.0)).collect();
        let f = frame_1d(&xs, Species::Plus, 1.0 / 140_000.0);
        let est = histogram_density(&[f], Species::Plus, &uniform_edges(1.0, 15.0, 100), &line()).unwrap();
        let per_bin: f64 = 1400.0;
        for p in &est.pdf {
            assert!((p - 1.0 / 14.0).abs() <= 3.0 / per_bin.sqrt() * (1.0 / 14.0) + 1e-12, "{p}");
        }
        assert_relative_eq!(est.total_mass(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(est.charge_scale, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_sample_single_bin() {
        let f = frame_1d(&[4.0], Species::Minus, 1.0);
        let est = histogram_density(&[f.clone()], Species::Minus, &[1.0, 15.0], &line()).unwrap();
        assert_relative_eq!(est.pdf[0], 1.0 / 14.0);
        let twice = histogram_density(&[f.clone(), f], Species::Minus, &[1.0, 15.0], &line()).unwrap();
        assert_eq!(twice.pdf, est.pdf);
    }

    #[test]
    fn coverage_is_enforced() {
        let f = frame_1d(&[16.0], Species::Plus, 1.0);
        let err = histogram_density(&[f.clone()], Species::Plus, &uniform_edges(1.0, 15.0, 10), &line()).unwrap_err();
        assert!(matches!(err, Error::Coverage { .. }));
        let mut lenient = HistogramAccumulator::new(uniform_edges(1.0, 15.0, 10), Species::Plus, BinMeasure::Linear, false).unwrap();
        lenient.add_frame(&f, &line()).unwrap();
        assert_eq!(lenient.finish().unwrap().skipped, 1);
        lenient.add_frame(&frame_1d(&[2.0], Species::Plus, 1.0), &line()).unwrap();
        let est = lenient.finish().unwrap();
        assert_relative_eq!(est.total_mass(), 0.5, epsilon = 1e-12);
        assert!(matches!(
            histogram_density::<1>(&[], Species::Plus, &[1.0, 2.0], &line()),
            Err(Error::NoFrames)
        ));
    }

    #[test]
    fn radial_normalisation() {
        let shell = SimDomain::<3>::new(DomainShape::Shell { inner: 1.0, outer: 10.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = crate::rbm::InitialDistribution::filling(&shell);
        let ens = ParticleEnsemble::sample(&shell, 20_000, 0, 1e-3, &init, &mut rng).unwrap();
        let est = histogram_density(&[ens], Species::Plus, &uniform_edges(1.0, 10.0, 60), &shell).unwrap();
        assert_relative_eq!(est.total_mass(), 1.0, epsilon = 1e-9);
        // uniform in volume: constant pdf 1/|Ω_L|
        let l1 = est.l1_distance(|_| 1.0 / shell.volume(), false);
        assert!(l1 < 0.05, "{l1}");
    }

    #[test]
    fn bulk_density_examples() {
        let mut xs = vec![14.7; 40];
        xs.extend(std::iter::repeat_n(5.0, 960));
        let f = frame_1d(&xs, Species::Plus, 1e-3);
        let d = bulk_density(&[f], &[15.0], 0.5, Species::Plus, &line()).unwrap();
        assert_relative_eq!(d, 0.08, max_relative = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random_range(1.0..15.0)).collect();
        let u = frame_1d(&xs, Species::Plus, 1e-5);
        let d = bulk_density(&[u], &[15.0], 1.0, Species::Plus, &line()).unwrap();
        assert!((d - 1.0 / 14.0).abs() < 3.0 * (1.0 / 14.0) / (100_000.0f64 / 14.0).sqrt(), "{d}");

        let empty = frame_1d(&[3.0], Species::Plus, 1.0);
        assert_eq!(bulk_density(&[empty.clone()], &[15.0], 1.0, Species::Plus, &line()).unwrap(), 0.0);
        assert_eq!(bulk_density(&[empty.clone()], &[15.0], 1.0, Species::Minus, &line()).unwrap(), 0.0);
        assert!(bulk_density(&[empty.clone()], &[14.0], 1.0, Species::Plus, &line()).is_err());
        assert!(bulk_density(&[empty], &[15.0], 20.0, Species::Plus, &line()).is_err());
    }

    #[test]
    fn potential_recovery() {
        assert_eq!(potential_from_values(&[0.2, 0.3], &[0.2, 0.3]), vec![Some(0.0), Some(0.0)]);
        let p = potential_from_values(&[1.0], &[std::f64::consts::E.powi(2)]);
        assert_relative_eq!(p[0].unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(potential_from_values(&[0.0, 1.0], &[1.0, -1.0]), vec![None, None]);
    }

    proptest! {
        #[test]
        fn boltzmann_densities_recover_potential(phi in prop::collection::vec(-5.0f64..5.0, 1..20), rho in 1e-3f64..10.0) {
            let p: Vec<f64> = phi.iter().map(|f| rho * (-f).exp()).collect();
            let m: Vec<f64> = phi.iter().map(|f| rho * f.exp()).collect();
            for (got, want) in potential_from_values(&p, &m).iter().zip(&phi) {
                prop_assert!((got.unwrap() - want).abs() < 1e-12);
            }
        }

        #[test]
        fn weak_error_ignores_order(mut v in prop::collection::vec(0.5f64..1.5, 2..30), seed in any::<u64>()) {
            let a = weak_error(&v, 1.0).unwrap();
            use rand::seq::SliceRandom;
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((weak_error(&v, 1.0).unwrap() - a).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn weak_error_examples() {
        assert_eq!(weak_error(&[2.0, 2.0], 2.0).unwrap(), 0.0);
        assert_relative_eq!(weak_error(&[1.1], 1.0).unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(weak_error(&[1.0], 0.0), Err(Error::DegenerateReference));
    }

    #[test]
    fn reference_moments_of_flat_density() {
        let s = solve_pb_1d(1.0, 0.1, 0.0, 1.0, 15.0, 1401, 1e-10).unwrap();
        assert_relative_eq!(reference_moment(&s, Species::Plus, TestFunction::Linear), 8.0, epsilon = 1e-9);
        // ∫ x² / 14 over (1, 15) = (3375 - 1) / 42
        assert_relative_eq!(reference_moment(&s, Species::Minus, TestFunction::Quadratic), 3374.0 / 42.0, max_relative = 1e-6);
    }

    #[test]
    fn kde_normalisation_and_rotation_symmetry() {
        let shell = SimDomain::<3>::new(DomainShape::Shell { inner: 1.0, outer: 10.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = crate::rbm::InitialDistribution::new(1.0, 6.0);
        let ens = ParticleEnsemble::sample(&shell, 20_000, 0, 1e-3, &init, &mut rng).unwrap();
        let grid = uniform_edges(-10.0, 10.0, 80);
        let f = planar_kde(ens.positions(), KdePlane::XOy, None, &grid, &grid).unwrap();
        assert!((f.integral() - 1.0).abs() <= 0.02, "{}", f.integral());
        // 90° rotation maps (i, j) to (j, n - i)
        let n = grid.len() - 1;
        let peak = f.values.iter().flatten().cloned().fold(0.0, f64::max);
        let mut worst = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                worst = worst.max((f.values[i][j] - f.values[j][n - i]).abs());
            }
        }
        assert!(worst < 0.15 * peak, "{worst} vs {peak}");
    }

    #[test]
    fn azimuth_convention() {
        assert_relative_eq!(azimuth(&[0.0, 1.5, 0.0]), PI / 2.0);
        assert_relative_eq!(azimuth(&[0.0, -1.0, 0.0]), 1.5 * PI);
        let (c, d) = azimuthal_density(&[[0.0, 2.0, 0.0], [0.0, 20.0, 0.0]], 3.0, 4);
        assert_eq!(c.len(), 4);
        assert_relative_eq!(d[1], 1.0 / (PI / 2.0));
        assert_eq!(KdePlane::RPhi.project(&[0.0, 1.5, 0.0]), (1.5, PI / 2.0));
    }

    #[test]
    fn capacitance_of_linear_regime() {
        // truncated Debye–Hückel: V = σ/κ (cosh κΛ - 1)/sinh κΛ with σ = Q_f/(2ν)
        let (nu, rho, a, l) = (1.0, 0.0218, 1.0, 15.0);
        let k = (2.0f64 * rho / nu).sqrt();
        let lam = k * (l - a);
        let c_exact = 2.0 * nu * k * lam.sinh() / (lam.cosh() - 1.0);
        let curve = capacitance_curve(&[0.002, 0.004, 0.006, 0.008], |qf| {
            let s = PbProblem::planar(nu, rho, qf / (2.0 * nu), a, l).solve(2801, &NewtonOptions::default())?;
            Ok(voltage(&s))
        })
        .unwrap();
        for p in &curve {
            assert_relative_eq!(p.capacitance, c_exact, max_relative = 1e-3);
        }
        assert!(matches!(capacitance_curve(&[1.0, 1.0, 2.0], |q| Ok(q)), Err(Error::CapacitanceGrid(_))));
        assert!(matches!(capacitance_from_samples(&[1.0, 2.0, 3.0], &[0.1, 0.3, 0.2]), Err(Error::CapacitanceGrid(_))));
    }

    #[test]
    fn ks_detects_shift_and_accepts_same_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
        let (d, _) = ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn ks_pvalues_are_roughly_uniform_under_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trials = 400;
        let mut small = 0;
        for _ in 0..trials {
            let a: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
            if ks_two_sample(&a, &b).1 < 0.1 {
                small += 1;
            }
        }
        let frac = small as f64 / trials as f64;
        assert!((0.05..0.16).contains(&frac), "{frac}");
    }
}
