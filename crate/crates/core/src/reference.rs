//! Finite-difference Newton solver for the truncated Poisson–Boltzmann
//! problem in planar 1D and in radial 3D.
//!
//! Unknowns live on a uniform grid including both end points. Neumann data
//! enter through second-order ghost points, `φ_{-1} = φ_1 + 2hσ_f` at the
//! membrane and `φ_n = φ_{n-2}` at the outer wall, and the Jacobian is
//! tridiagonal.

use crate::error::{ensure_positive, Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

/// Coordinate system of the 1D reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdGeometry {
    /// `-ν Φ'' = ρ∞(e^{-Φ} - e^{Φ})` on `(a, L)`.
    Planar,
    /// `-ν Φ'' - (2ν/r) Φ' = ρ∞(e^{-Φ} - e^{Φ})` on `(R, L)`.
    Radial,
}

impl FdGeometry {
    /// Measure of the slab/shell element at `x`: `1` or `4πr²`.
    pub fn weight(self, x: f64) -> f64 {
        match self {
            FdGeometry::Planar => 1.0,
            FdGeometry::Radial => 4.0 * PI * x * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Sup-norm residual target, raised to the round-off floor of the grid when that is larger.
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iterations: 50, max_halvings: 30 }
    }
}

/// A boundary value problem to be discretised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbProblem {
    pub geometry: FdGeometry,
    pub nu: f64,
    pub rho_inf: f64,
    /// Surface charge density on the membrane, `-∂Φ/∂r = σ_f`.
    pub sigma_f: f64,
    pub a: f64,
    pub l: f64,
}

impl PbProblem {
    pub fn planar(nu: f64, rho_inf: f64, sigma_f: f64, a: f64, l: f64) -> Self {
        Self { geometry: FdGeometry::Planar, nu, rho_inf, sigma_f, a, l }
    }

    /// Radial problem for a point free charge `Q_f` inside a cell of radius `R`.
    pub fn radial(nu: f64, rho_inf: f64, free_charge: f64, r: f64, l: f64) -> Self {
        let sigma_f = free_charge / (4.0 * PI * r * r * nu);
        Self { geometry: FdGeometry::Radial, nu, rho_inf, sigma_f, a: r, l }
    }

    pub fn with_rho_inf(mut self, rho_inf: f64) -> Self {
        self.rho_inf = rho_inf;
        self
    }

    pub fn with_outer(mut self, l: f64) -> Self {
        self.l = l;
        self
    }

    fn validate(&self) -> Result<()> {
        ensure_positive("nu", self.nu)?;
        ensure_positive("rho_inf", self.rho_inf)?;
        if !(self.a > 0.0 && self.a < self.l && self.l.is_finite()) {
            return Err(Error::InvalidDomain(format!("need 0 < a < L, got ({}, {})", self.a, self.l)));
        }
        if !self.sigma_f.is_finite() {
            return Err(Error::InvalidParameter { name: "sigma_f", reason: "must be finite".into() });
        }
        Ok(())
    }

    /// Solves on `n_nodes` equispaced nodes, starting Newton from `Φ ≡ 0`.
    pub fn solve(&self, n_nodes: usize, opts: &NewtonOptions) -> Result<GridSolution> {
        self.validate()?;
        if n_nodes < 16 {
            return Err(Error::InvalidParameter {
                name: "n_nodes",
                reason: format!("need at least 16 nodes, got {n_nodes}"),
            });
        }
        ensure_positive("tol", opts.tol)?;
        let h = (self.l - self.a) / (n_nodes - 1) as f64;
        let nodes: Vec<f64> = (0..n_nodes).map(|j| self.a + j as f64 * h).collect();
        let mut phi = vec![0.0; n_nodes];
        let mut res = self.residual(&nodes, h, &phi);
        let mut norm = sup(&res);
        let mut iterations = 0;
        let mut history = vec![norm];
        while norm > opts.tol.max(self.roundoff_floor(h, &phi)) {
            if iterations == opts.max_iterations {
                return Err(Error::NewtonDivergence { iterations, residual: norm });
            }
            iterations += 1;
            let (lower, diag, upper) = self.jacobian(&nodes, h, &phi);
            let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
            let delta = thomas(&lower, &diag, &upper, &rhs);
            let mut step = 1.0;
            let mut trial: Vec<f64>;
            let mut trial_res: Vec<f64>;
            let mut halvings = 0;
            loop {
                trial = phi.iter().zip(&delta).map(|(p, d)| p + step * d).collect();
                trial_res = self.residual(&nodes, h, &trial);
                let trial_norm = sup(&trial_res);
                if trial_norm < norm || halvings == opts.max_halvings {
                    break;
                }
                step *= 0.5;
                halvings += 1;
            }
            phi = trial;
            res = trial_res;
            norm = sup(&res);
            history.push(norm);
            if !norm.is_finite() {
                return Err(Error::NewtonDivergence { iterations, residual: norm });
            }
        }
        Ok(GridSolution { problem: *self, nodes, phi, h, residual_norm: norm, residual_history: history })
    }

    /// Residual size attainable in double precision at `phi`.
    fn roundoff_floor(&self, h: f64, phi: &[f64]) -> f64 {
        let m = sup(phi);
        let scale = 4.0 * self.nu / (h * h) * m + 2.0 * self.nu * self.sigma_f.abs() / h + 2.0 * self.rho_inf * m.exp();
        16.0 * f64::EPSILON * scale
    }

    fn radial_coefficient(&self, x: f64, h: f64) -> f64 {
        match self.geometry {
            FdGeometry::Planar => 0.0,
            FdGeometry::Radial => self.nu / (x * h),
        }
    }

    fn residual(&self, x: &[f64], h: f64, phi: &[f64]) -> Vec<f64> {
        let n = phi.len();
        let nu_h2 = self.nu / (h * h);
        (0..n)
            .map(|j| {
                let left = if j == 0 { phi[1] + 2.0 * h * self.sigma_f } else { phi[j - 1] };
                let right = if j == n - 1 { phi[n - 2] } else { phi[j + 1] };
                let c = self.radial_coefficient(x[j], h);
                -nu_h2 * (left - 2.0 * phi[j] + right) - c * (right - left)
                    - self.rho_inf * ((-phi[j]).exp() - phi[j].exp())
            })
            .collect()
    }

    fn jacobian(&self, x: &[f64], h: f64, phi: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = phi.len();
        let nu_h2 = self.nu / (h * h);
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let diag = phi
            .iter()
            .map(|p| 2.0 * nu_h2 + self.rho_inf * ((-p).exp() + p.exp()))
            .collect();
        for j in 0..n {
            let c = self.radial_coefficient(x[j], h);
            if j == 0 {
                upper[j] = -2.0 * nu_h2;
            } else if j == n - 1 {
                lower[j] = -2.0 * nu_h2;
            } else {
                lower[j] = -nu_h2 + c;
                upper[j] = -nu_h2 - c;
            }
        }
        (lower, diag, upper)
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, r| m.max(r.abs()))
}

/// Tridiagonal solve; `lower[0]` and `upper[n-1]` are ignored.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for j in 1..n {
        let m = diag[j] - lower[j] * c[j - 1];
        c[j] = if j < n - 1 { upper[j] / m } else { 0.0 };
        d[j] = (rhs[j] - lower[j] * d[j - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for j in (0..n - 1).rev() {
        x[j] = d[j] - c[j] * x[j + 1];
    }
    x
}

/// Converged nodal solution.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub problem: PbProblem,
    pub nodes: Vec<f64>,
    pub phi: Vec<f64>,
    pub h: f64,
    pub residual_norm: f64,
    /// Sup-norm residual before the first and after every Newton iteration.
    pub residual_history: Vec<f64>,
}

impl GridSolution {
    /// Linear interpolation of `Φ`; clamps outside the grid.
    pub fn phi_at(&self, x: f64) -> f64 {
        interpolate(&self.nodes, &self.phi, x)
    }

    /// Nodal `Φ'`: central differences inside, the boundary data at the ends.
    pub fn derivative(&self) -> Vec<f64> {
        let n = self.phi.len();
        (0..n)
            .map(|j| {
                if j == 0 {
                    -self.problem.sigma_f
                } else if j == n - 1 {
                    0.0
                } else {
                    (self.phi[j + 1] - self.phi[j - 1]) / (2.0 * self.h)
                }
            })
            .collect()
    }

    /// Nodal `(ρ+, ρ-)`.
    pub fn densities(&self) -> (Vec<f64>, Vec<f64>) {
        densities_from_phi(self.problem.rho_inf, &self.phi)
    }

    /// `∫ w f` by the trapezoid rule on the nodes.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        let g = self.problem.geometry;
        trapezoid(&self.nodes, |j| g.weight(self.nodes[j]) * f[j])
    }

    /// `Q_±` carried by the Boltzmann densities of this solution.
    pub fn species_charges(&self) -> (f64, f64) {
        let (p, m) = self.densities();
        (self.integrate(&p), self.integrate(&m))
    }

    /// `ν ∮ ∂Φ/∂n + ∫(ρ+ - ρ-)`, which vanishes for an exact solution.
    pub fn conservation_defect(&self) -> f64 {
        let (p, m) = self.densities();
        let net: Vec<f64> = p.iter().zip(&m).map(|(a, b)| a - b).collect();
        let g = self.problem.geometry;
        // outward derivative at the membrane is -Φ'(a) = σ_f; zero at the wall
        self.problem.nu * self.problem.sigma_f * g.weight(self.problem.a) + self.integrate(&net)
    }

    /// CSV rows `x,phi,rho_plus,rho_minus` with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (p, m) = self.densities();
        writeln!(w, "x,phi,rho_plus,rho_minus")?;
        for j in 0..self.nodes.len() {
            writeln!(w, "{},{},{},{}", self.nodes[j], self.phi[j], p[j], m[j])?;
        }
        Ok(())
    }
}

/// Pointwise Boltzmann densities `ρ± = ρ∞ e^{∓Φ}`.
pub fn densities_from_phi(rho_inf: f64, phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    phi.iter().map(|p| (rho_inf * (-p).exp(), rho_inf * p.exp())).unzip()
}

pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x).clamp(1, n - 1);
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

fn trapezoid(xs: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    (1..xs.len()).map(|j| 0.5 * (xs[j] - xs[j - 1]) * (f(j) + f(j - 1))).sum()
}

/// Planar solve from positional arguments.
pub fn solve_pb_1d(nu: f64, rho_inf: f64, sigma_f: f64, a: f64, l: f64, n_nodes: usize, tol: f64) -> Result<GridSolution> {
    PbProblem::planar(nu, rho_inf, sigma_f, a, l).solve(n_nodes, &NewtonOptions { tol, ..Default::default() })
}

/// `Radial` solve for a point free charge `Q_f`.
pub fn solve_pb_radial3d(nu: f64, rho_inf: f64, free_charge: f64, r: f64, l: f64, n_nodes: usize, tol: f64) -> Result<GridSolution> {
    PbProblem::radial(nu, rho_inf, free_charge, r, l).solve(n_nodes, &NewtonOptions { tol, ..Default::default() })
}

/// Finds `ρ∞` such that the solution carries positive charge `q_plus`
/// (`∫ ρ∞ e^{-Φ} = Q_+`), by bisection in `log ρ∞`.
pub fn solve_with_positive_charge(
    problem: PbProblem,
    q_plus: f64,
    n_nodes: usize,
    opts: &NewtonOptions,
) -> Result<GridSolution> {
    ensure_positive("q_plus", q_plus)?;
    let charge = |log_rho: f64| -> Result<(f64, GridSolution)> {
        let sol = problem.with_rho_inf(log_rho.exp()).solve(n_nodes, opts)?;
        Ok((sol.species_charges().0 - q_plus, sol))
    };
    let (mut lo, mut hi) = (-30.0f64, 10.0f64);
    let (f_lo, _) = charge(lo)?;
    let (f_hi, _) = charge(hi)?;
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::InvalidParameter {
            name: "q_plus",
            reason: format!("no far-field density in [e^{lo}, e^{hi}] yields Q+ = {q_plus}"),
        });
    }
    let mut best = None;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let (f, sol) = charge(mid)?;
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        best = Some(sol);
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(best.expect("at least one bisection step"))
}

/// `‖Φ_L - Φ_{L_ref}‖_{L1(Ω_L)}` for each `L`, with all solves on grids of
/// spacing `h` so the nodes of every truncation coincide with reference nodes.
pub fn truncation_study(problem: PbProblem, l_list: &[f64], l_ref: f64, h: f64, opts: &NewtonOptions) -> Result<Vec<(f64, f64)>> {
    ensure_positive("h", h)?;
    if let Some(&bad) = l_list.iter().find(|&&l| l > l_ref / 2.0 && l != l_ref) {
        return Err(Error::InvalidParameter {
            name: "l_list",
            reason: format!("L = {bad} exceeds half the reference length {l_ref}"),
        });
    }
    let nodes_for = |l: f64| ((l - problem.a) / h).round() as usize + 1;
    let reference = problem.with_outer(l_ref).solve(nodes_for(l_ref), opts)?;
    l_list
        .iter()
        .map(|&l| {
            let sol = problem.with_outer(l).solve(nodes_for(l), opts)?;
            let diff: Vec<f64> = sol
                .nodes
                .iter()
                .zip(&sol.phi)
                .map(|(&x, &p)| (p - reference.phi_at(x)).abs())
                .collect();
            Ok((l, sol.integrate(&diff)))
        })
        .collect()
}

/// Outcome of checking `|Φ|` and `|Φ'|` against the exponential envelope
/// `|σ_f| e^{-κ dist} / κ` and `|σ_f| e^{-κ dist}`, `κ = sqrt(2ρ∞)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayReport {
    pub holds: bool,
    /// Largest `|Φ| / bound` over the checked nodes.
    pub max_ratio_phi: f64,
    /// Largest `|Φ'| / bound` over the checked nodes.
    pub max_ratio_derivative: f64,
    /// Largest amount by which either quantity exceeds `slack · bound`.
    pub max_violation: f64,
}

pub const DECAY_SLACK: f64 = 1.05;

/// Envelope of `|Φ|` at distance `dist` from the membrane.
pub fn decay_bound(sigma_f: f64, rho_inf: f64, dist: f64) -> f64 {
    let k = (2.0 * rho_inf).sqrt();
    sigma_f.abs() / k * (-k * dist).exp()
}

/// Checks the decay envelopes at every node with `x <= upto` (all nodes
/// when `None`). Intended for planar solutions with `ν = 1`.
pub fn decay_bound_check(sol: &GridSolution, upto: Option<f64>) -> DecayReport {
    let p = sol.problem;
    let k = (2.0 * p.rho_inf).sqrt();
    let upto = upto.unwrap_or(f64::INFINITY);
    let dphi = sol.derivative();
    let mut report = DecayReport { holds: true, max_ratio_phi: 0.0, max_ratio_derivative: 0.0, max_violation: 0.0 };
    for j in 0..sol.nodes.len() {
        let x = sol.nodes[j];
        if x > upto {
            break;
        }
        let b_phi = decay_bound(p.sigma_f, p.rho_inf, x - p.a);
        let b_der = b_phi * k;
        for (value, bound, ratio) in [
            (sol.phi[j].abs(), b_phi, &mut report.max_ratio_phi),
            (dphi[j].abs(), b_der, &mut report.max_ratio_derivative),
        ] {
            if bound > 0.0 {
                *ratio = ratio.max(value / bound);
            }
            let over = value - DECAY_SLACK * bound;
            if over > 0.0 {
                report.holds = false;
                report.max_violation = report.max_violation.max(over);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn opts() -> NewtonOptions {
        NewtonOptions::default()
    }

    #[test]
    fn zero_charge_gives_zero_potential() {
        let s = solve_pb_1d(1.0, 0.0218, 0.0, 1.0, 15.0, 200, 1e-10).unwrap();
        assert!(s.phi.iter().all(|&p| p == 0.0));
        let r = solve_pb_radial3d(1.0, 0.1, 0.0, 1.0, 10.0, 200, 1e-10).unwrap();
        assert!(r.phi.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn small_charge_matches_debye_huckel() {
        let s = solve_pb_1d(1.0, 0.0218, 0.01, 1.0, 15.0, 2801, 1e-12).unwrap();
        let k = (2.0f64 * 0.0218).sqrt();
        assert_relative_eq!(k, 0.2088, epsilon = 1e-4);
        let gap = |f: &dyn Fn(f64) -> f64, upto: f64| {
            s.nodes
                .iter()
                .zip(&s.phi)
                .filter(|(x, _)| **x <= upto)
                .map(|(x, p)| (p - f(*x)).abs())
                .fold(0.0, f64::max)
        };
        // linearization honouring the outer Neumann wall
        let walled = |x: f64| 0.01 / k * (k * (15.0 - x)).cosh() / (k * 14.0).sinh();
        assert!(gap(&walled, 15.0) <= 5e-4);
        // free-space linearization away from the wall
        let free = |x: f64| 0.01 / k * (-k * (x - 1.0)).exp();
        assert!(gap(&free, 4.0) <= 5e-4);
        // at the wall the two linearizations differ by the reflected tail
        assert!((walled(15.0) - free(15.0)) > 2.5e-3);
    }

    #[test]
    fn linear_planar_solution_with_both_walls() {
        // exact solution of the linearized problem with Neumann data at both ends
        let (nu, rho, sigma, a, l) = (1.0, 0.5, 1e-4, 1.0, 6.0);
        let s = solve_pb_1d(nu, rho, sigma, a, l, 4001, 1e-11).unwrap();
        let k = (2.0 * rho / nu as f64).sqrt();
        let exact = |x: f64| sigma / k * ((k * (l - x)).cosh() / (k * (l - a)).sinh());
        for (x, p) in s.nodes.iter().zip(&s.phi) {
            assert_relative_eq!(*p, exact(*x), max_relative = 1e-4);
        }
    }

    fn richardson_ratio(problem: PbProblem, cells: usize) -> f64 {
        let fine = problem.solve(16 * cells + 1, &opts()).unwrap();
        let err = |c: usize| {
            let s = problem.solve(c + 1, &opts()).unwrap();
            let stride = 16 * cells / c;
            s.phi.iter().enumerate().map(|(j, p)| (p - fine.phi[j * stride]).abs()).fold(0.0, f64::max)
        };
        err(cells) / err(2 * cells)
    }

    #[test]
    fn second_order_self_convergence() {
        let r1 = richardson_ratio(PbProblem::planar(1.0, 0.0906, 1.0, 1.0, 15.0), 100);
        assert!((3.6..4.4).contains(&r1), "{r1}");
        let r3 = richardson_ratio(PbProblem::radial(1.0, 0.05, 5.0, 1.0, 10.0), 100);
        assert!((3.6..4.4).contains(&r3), "{r3}");
    }

    #[test]
    fn radial_linear_regime_is_screened_coulomb() {
        // κ = 1; the outer wall is far enough that the growing mode is negligible near the cell
        let (nu, rho, r0, l) = (1.0, 0.5, 1.0, 25.0);
        let free_charge = 0.01 * 4.0 * PI * r0 * r0 * nu;
        let s = solve_pb_radial3d(nu, rho, free_charge, r0, l, 4801, 1e-11).unwrap();
        let fit: Vec<(f64, f64)> = s
            .nodes
            .iter()
            .zip(&s.phi)
            .filter(|(x, _)| **x <= 10.0)
            .map(|(x, p)| (*x, (x * p).ln()))
            .collect();
        let n = fit.len() as f64;
        let mx = fit.iter().map(|p| p.0).sum::<f64>() / n;
        let my = fit.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = fit.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let amp = (my - slope * mx).exp();
        assert_relative_eq!(-slope, 1.0, max_relative = 1e-2);
        for (x, p) in s.nodes.iter().zip(&s.phi).filter(|(x, _)| **x <= 10.0) {
            let y = amp / x * (slope * x).exp();
            assert!(((p - y) / p).abs() <= 1e-2);
        }
        // closed form of the linearized problem with σ_f = 0.01: A = σ R² e^{κR} / (1 + κR)
        assert_relative_eq!(amp, 0.01 * 1f64.exp() / 2.0, max_relative = 1e-2);
    }

    #[test]
    fn boltzmann_identities() {
        let s = solve_pb_1d(1.0, 0.0906, 1.0, 1.0, 15.0, 500, 1e-10).unwrap();
        let (p, m) = s.densities();
        for j in 0..p.len() {
            assert_relative_eq!(p[j] * m[j], 0.0906 * 0.0906, max_relative = 1e-12);
            if s.phi[j] > 0.0 {
                assert!(p[j] < 0.0906 && 0.0906 < m[j]);
            }
        }
        let (p0, m0) = densities_from_phi(0.3, &[0.0; 4]);
        assert_eq!(p0, vec![0.3; 4]);
        assert_eq!(m0, vec![0.3; 4]);
    }

    #[test]
    fn conservation_is_second_order() {
        for problem in [PbProblem::planar(1.0, 0.0906, 1.0, 1.0, 15.0), PbProblem::radial(1.0, 0.05, 5.0, 1.0, 10.0)] {
            // relative to the membrane flux
            let flux = problem.nu * problem.sigma_f * problem.geometry.weight(problem.a);
            let d1 = problem.solve(201, &opts()).unwrap().conservation_defect().abs() / flux;
            let d2 = problem.solve(401, &opts()).unwrap().conservation_defect().abs() / flux;
            assert!(d1 < 5e-3, "{d1}");
            assert!(d2 < d1 / 3.5 || d2 < 1e-12, "{d1} {d2}");
        }
    }

    #[test]
    fn newton_converges_from_zero_for_strong_charge() {
        let s = solve_pb_1d(0.01, 0.0291, 2.0, 1.0, 15.0, 1401, 1e-10).unwrap();
        assert!(s.residual_norm <= 1e-10);
        assert!(s.phi[0] > 0.0);
        for w in s.residual_history[1..].windows(2) {
            assert!(w[1] < w[0], "{:?}", s.residual_history);
        }
    }

    #[test]
    fn newton_reports_divergence() {
        let err = PbProblem::planar(0.01, 0.0291, 2.0, 1.0, 15.0)
            .solve(1401, &NewtonOptions { max_iterations: 1, ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, Error::NewtonDivergence { iterations: 1, .. }));
        assert!(solve_pb_1d(1.0, 0.1, 1.0, 1.0, 15.0, 8, 1e-10).is_err());
    }

    #[test]
    fn fitted_far_field_density() {
        let s = solve_with_positive_charge(PbProblem::planar(1.0, 1.0, 1.0, 1.0, 15.0), 1.0, 1401, &opts()).unwrap();
        assert_relative_eq!(s.species_charges().0, 1.0, max_relative = 1e-8);
        // net ion charge balances the membrane charge: Q- - Q+ = ν σ_f
        let (qp, qm) = s.species_charges();
        assert_relative_eq!(qm - qp, 1.0, max_relative = 1e-3);
        assert!((0.085..0.095).contains(&s.problem.rho_inf), "{}", s.problem.rho_inf);
    }

    #[test]
    fn truncation_errors_decay_exponentially() {
        let p = PbProblem::planar(1.0, 0.0218, 0.5, 1.0, 10.0);
        let ls = [6.0, 9.0, 12.0, 15.0, 18.0, 21.0];
        let table = truncation_study(p, &ls, 60.0, 0.01, &opts()).unwrap();
        for w in table.windows(2) {
            assert!(w[1].1 < w[0].1, "{table:?}");
        }
        let pts: Vec<(f64, f64)> = table.iter().map(|(l, e)| (*l, e.ln())).collect();
        assert!(correlation(&pts) <= -0.99, "{table:?}");
        let same = truncation_study(p, &[60.0], 60.0, 0.01, &opts()).unwrap();
        assert_eq!(same[0].1, 0.0);
        assert!(truncation_study(p, &[40.0], 60.0, 0.01, &opts()).is_err());
    }

    fn correlation(p: &[(f64, f64)]) -> f64 {
        let n = p.len() as f64;
        let mx = p.iter().map(|v| v.0).sum::<f64>() / n;
        let my = p.iter().map(|v| v.1).sum::<f64>() / n;
        let sxy: f64 = p.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum();
        let sxx: f64 = p.iter().map(|v| (v.0 - mx).powi(2)).sum();
        let syy: f64 = p.iter().map(|v| (v.1 - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn decay_envelope() {
        assert_relative_eq!(decay_bound(0.5, 0.0218, 0.0), 0.5 / (0.0436f64).sqrt());
        let zero = solve_pb_1d(1.0, 0.0218, 0.0, 1.0, 30.0, 300, 1e-10).unwrap();
        assert!(decay_bound_check(&zero, None).holds);
        // untruncated proxy: solve far beyond the checked range
        let far = solve_pb_1d(1.0, 0.0218, 0.5, 1.0, 60.0, 5901, 1e-10).unwrap();
        let r = decay_bound_check(&far, Some(30.0));
        assert!(r.holds, "{r:?}");
        assert!(r.max_ratio_phi <= 1.0 && r.max_ratio_derivative <= 1.0 + 1e-3);
    }

    #[test]
    fn csv_rows() {
        let s = solve_pb_1d(1.0, 0.1, 0.2, 1.0, 5.0, 20, 1e-10).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.starts_with("x,phi,rho_plus,rho_minus\n1,"));
    }

    #[test]
    fn interpolation() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.0, 10.0, 30.0];
        assert_eq!(interpolate(&xs, &ys, 0.5), 5.0);
        assert_eq!(interpolate(&xs, &ys, 1.5), 20.0);
        assert_eq!(interpolate(&xs, &ys, 2.0), 30.0);
        assert_eq!(interpolate(&xs, &ys, -1.0), 0.0);
    }
}
