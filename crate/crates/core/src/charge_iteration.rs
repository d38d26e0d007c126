//! Fixed-point search for the positive charge `Q_+` that reproduces a
//! prescribed far-field concentration `ρ∞` at the artificial wall.
//!
//! Each round simulates for `T_c`, time-averages the bulk densities at `x̄`
//! over the tail of the window and adds or removes equal numbers of both
//! species in proportion to the mismatch of `ρ+ρ-` with `ρ∞²`.

use crate::error::{ensure_positive, Error, Result};
use crate::geometry::{unit_ball_volume, Point};
use crate::observables::bulk_density;
use crate::rbm::{Dynamics, InitialDistribution, ParticleEnsemble, Simulation, Species};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// How the bulk mismatch is turned into the signed error `Err`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMeasure {
    /// `sign(I) sqrt|I|` with `I = ρ+ρ- - ρ∞²`.
    SignedRoot,
    /// `sqrt(ρ+ρ-) - ρ∞`.
    #[default]
    GeometricGap,
}

impl ErrorMeasure {
    pub fn evaluate(self, bulk_plus: f64, bulk_minus: f64, rho_inf: f64) -> f64 {
        match self {
            ErrorMeasure::SignedRoot => {
                let i = bulk_plus * bulk_minus - rho_inf * rho_inf;
                i.signum() * i.abs().sqrt()
            }
            ErrorMeasure::GeometricGap => (bulk_plus * bulk_minus).sqrt() - rho_inf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeIterationConfig {
    pub rho_inf: f64,
    /// Simulated time per round.
    pub t_c: f64,
    /// Charge per particle.
    pub q: f64,
    /// Radius of the half ball at the wall.
    pub h: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub initial_q_plus: f64,
    /// Trailing fraction of each round used for the time average.
    pub average_fraction: f64,
    pub measure: ErrorMeasure,
}

impl ChargeIterationConfig {
    pub fn new(rho_inf: f64, t_c: f64, q: f64, epsilon: f64) -> Self {
        Self {
            rho_inf,
            t_c,
            q,
            h: 1.0,
            epsilon,
            max_iters: 20,
            initial_q_plus: 1.0,
            average_fraction: 0.25,
            measure: ErrorMeasure::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        ensure_positive("rho_inf", self.rho_inf)?;
        ensure_positive("t_c", self.t_c)?;
        ensure_positive("q", self.q)?;
        ensure_positive("h", self.h)?;
        ensure_positive("epsilon", self.epsilon)?;
        ensure_positive("initial_q_plus", self.initial_q_plus)?;
        if !(self.average_fraction > 0.0 && self.average_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "average_fraction",
                reason: format!("must lie in (0, 1], got {}", self.average_fraction),
            });
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter { name: "max_iters", reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// One round of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `Q_+` during the round.
    pub q_plus: f64,
    pub bulk_plus: f64,
    pub bulk_minus: f64,
    pub err: f64,
    /// Signed change in the number of particles of each species after the round.
    pub delta_n: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub q_plus: f64,
    pub err: f64,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// A removal was cut short to keep one particle of each species.
    pub hit_floor: bool,
}

impl IterationState {
    /// Rows `iteration,Q_plus,bulk_rho_plus,bulk_rho_minus,Err`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,Q_plus,bulk_rho_plus,bulk_rho_minus,Err")?;
        for r in &self.history {
            writeln!(w, "{},{},{},{},{}", r.iteration, r.q_plus, r.bulk_plus, r.bulk_minus, r.err)?;
        }
        Ok(())
    }
}

/// `ΔQ = α(d) L^d |Err| / 2`.
pub fn charge_change(d: usize, l: f64, err: f64) -> f64 {
    0.5 * unit_ball_volume(d) * l.powi(d as i32) * err.abs()
}

/// `⌊ΔQ / q⌋`, with a relative guard so that exact multiples are not lost
/// to rounding.
pub fn particle_change(delta_q: f64, q: f64) -> usize {
    (delta_q / q * (1.0 + 1e-12)).floor() as usize
}

/// Point of the artificial wall used for the bulk densities: `L` or `(L, 0, 0)`.
pub fn wall_point<const D: usize>(l: f64) -> Point<D> {
    let mut x = [0.0; D];
    x[0] = l;
    x
}

/// Initial counts for a given `Q_+`: `N_+ = Q_+/q`, `N_- = (Q_+ + excess)/q`,
/// with `N_-` bumped by one if needed so that pairs fill the batches.
pub fn initial_counts(q_plus: f64, excess: f64, q: f64, batch_size: usize) -> (usize, usize) {
    let n_plus = ((q_plus / q).round() as usize).max(1);
    let mut n_minus = (((q_plus + excess) / q).round() as usize).max(1);
    while (n_plus + n_minus) % batch_size != 0 {
        n_minus += 1;
    }
    (n_plus, n_minus)
}

/// Time-averaged bulk densities over the last `window` steps of a run.
fn simulate_and_average<const D: usize>(
    sim: &mut Simulation<D>,
    n_steps: u64,
    window: u64,
    x_bar: &Point<D>,
    h: f64,
) -> Result<(f64, f64)> {
    let domain = sim.dynamics().domain;
    let (mut sp, mut sm, mut frames) = (0.0, 0.0, 0usize);
    let mut failure = None;
    sim.run(n_steps, |_, ens| {
        if failure.is_some() {
            return;
        }
        frames += 1;
        if frames as u64 > n_steps - window {
            let frame = std::slice::from_ref(ens);
            match (
                bulk_density(frame, x_bar, h, Species::Plus, &domain),
                bulk_density(frame, x_bar, h, Species::Minus, &domain),
            ) {
                (Ok(p), Ok(m)) => {
                    sp += p;
                    sm += m;
                }
                (Err(e), _) | (_, Err(e)) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((sp / window as f64, sm / window as f64))
}

/// Runs the iteration from `config.initial_q_plus`. The returned simulation
/// holds the final ensemble.
pub fn iterate_q_plus<const D: usize>(
    dynamics: Dynamics<D>,
    init: &InitialDistribution,
    config: &ChargeIterationConfig,
    seed: u64,
) -> Result<(IterationState, Simulation<D>)> {
    config.validate()?;
    if dynamics.tau <= 0.0 {
        return Err(Error::InvalidParameter { name: "tau", reason: "must be > 0".into() });
    }
    let excess = dynamics.params.ion_excess_charge(&dynamics.domain);
    let (n_plus, n_minus) = initial_counts(config.initial_q_plus, excess, config.q, dynamics.batch_size);
    let mut sim = Simulation::from_initial(dynamics, n_plus, n_minus, config.q, init, seed)?;
    let (_, l) = dynamics.domain.bounds();
    let x_bar = wall_point::<D>(l);
    let n_steps = ((config.t_c / dynamics.tau).round() as u64).max(1);
    let window = ((n_steps as f64 * config.average_fraction).round() as u64).clamp(1, n_steps);

    let mut state = IterationState {
        q_plus: sim.ensemble().species_charge(Species::Plus),
        err: f64::INFINITY,
        iteration: 0,
        history: Vec::new(),
        converged: false,
        hit_floor: false,
    };
    while state.iteration < config.max_iters {
        state.iteration += 1;
        let (bp, bm) = simulate_and_average(&mut sim, n_steps, window, &x_bar, config.h)?;
        let err = config.measure.evaluate(bp, bm, config.rho_inf);
        let mut record = IterationRecord {
            iteration: state.iteration,
            q_plus: state.q_plus,
            bulk_plus: bp,
            bulk_minus: bm,
            err,
            delta_n: 0,
        };
        state.err = err;
        if err.abs() <= config.epsilon {
            state.history.push(record);
            state.converged = true;
            break;
        }
        let dn = particle_change(charge_change(D, l, err), config.q);
        if bp * bm < config.rho_inf * config.rho_inf {
            sim.add_pairs(dn, init);
            record.delta_n = dn as i64;
        } else {
            let removed = sim.remove_pairs(dn);
            state.hit_floor |= removed < dn;
            record.delta_n = -(removed as i64);
        }
        state.history.push(record);
        state.q_plus = sim.ensemble().species_charge(Species::Plus);
    }
    Ok((state, sim))
}

/// Equilibrium bulk `sqrt(ρ+ρ-)` at the wall for a fixed `Q_+`.
pub fn bulk_geometric_mean<const D: usize>(
    dynamics: Dynamics<D>,
    init: &InitialDistribution,
    q_plus: f64,
    q: f64,
    t: f64,
    h: f64,
    seed: u64,
) -> Result<(f64, ParticleEnsemble<D>)> {
    let excess = dynamics.params.ion_excess_charge(&dynamics.domain);
    let (n_plus, n_minus) = initial_counts(q_plus, excess, q, dynamics.batch_size);
    let mut sim = Simulation::from_initial(dynamics, n_plus, n_minus, q, init, seed)?;
    let (_, l) = dynamics.domain.bounds();
    let n_steps = ((t / dynamics.tau).round() as u64).max(1);
    let window = (n_steps / 4).max(1);
    let (bp, bm) = simulate_and_average(&mut sim, n_steps, window, &wall_point::<D>(l), h)?;
    Ok(((bp * bm).sqrt(), sim.into_ensemble()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SimDomain;
    use crate::kernels::PhysicalParams;
    use crate::sde::ReflectionScheme;
    use approx::assert_relative_eq;

    #[test]
    fn update_size_examples() {
        let dq = charge_change(1, 30.0, 0.01);
        assert_relative_eq!(dq, 0.3, max_relative = 1e-12);
        assert_eq!(particle_change(dq, 1e-4), 3000);
        assert_relative_eq!(1e-4 * particle_change(dq, 1e-4) as f64, 0.3, max_relative = 1e-12);
        assert_eq!(particle_change(0.5e-4, 1e-4), 0);
    }

    #[test]
    fn error_measures() {
        let r = 0.02;
        assert_eq!(ErrorMeasure::SignedRoot.evaluate(r, r, r), 0.0);
        assert_relative_eq!(ErrorMeasure::SignedRoot.evaluate(0.03, 0.03, 0.05), -0.04, max_relative = 1e-12);
        assert_relative_eq!(ErrorMeasure::GeometricGap.evaluate(0.01, 0.04, 0.05), -0.03, max_relative = 1e-12);
        assert!(ErrorMeasure::GeometricGap.evaluate(0.06, 0.06, 0.05) > 0.0);
    }

    #[test]
    fn counts_fill_pairs() {
        assert_eq!(initial_counts(1.0, 1.0, 1e-4, 2), (10_000, 20_000));
        let (p, m) = initial_counts(0.5, 0.3, 0.1, 2);
        assert_eq!((p + m) % 2, 0);
        assert!((p as f64 - 5.0).abs() < 1e-9 && m >= 8);
    }

    fn small_problem() -> Dynamics<1> {
        let params = PhysicalParams::<1>::new(1.0, 0.4).unwrap().with_rho_inf(0.05).unwrap();
        let line = SimDomain::interval(1.0, 8.0).unwrap();
        Dynamics::new(params, line, ReflectionScheme::Reflection, 0.05).unwrap()
    }

    #[test]
    fn iteration_keeps_invariants() {
        let dynamics = small_problem();
        let mut cfg = ChargeIterationConfig::new(0.05, 5.0, 2e-3, 1e-9);
        cfg.max_iters = 4;
        cfg.initial_q_plus = 0.05;
        let init = InitialDistribution::filling(&dynamics.domain);
        let (state, sim) = iterate_q_plus(dynamics, &init, &cfg, 3).unwrap();
        assert_eq!(state.history.len(), state.iteration);
        assert!(!state.converged);
        assert!(state.history.iter().all(|r| r.q_plus > 0.0 && r.q_plus.is_finite()));
        // far too little charge at the start: the first update must add particles
        assert!(state.history[0].delta_n > 0);
        assert!(sim.ensemble().is_charge_balanced(0.2));
        let mut csv = Vec::new();
        state.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }

    #[test]
    fn removal_stops_at_one_particle() {
        let dynamics = small_problem();
        // absurdly low target: every round wants to remove everything
        let mut cfg = ChargeIterationConfig::new(1e-6, 1.0, 1e-2, 1e-12);
        cfg.max_iters = 2;
        let init = InitialDistribution::filling(&dynamics.domain);
        let (state, sim) = iterate_q_plus(dynamics, &init, &cfg, 1).unwrap();
        assert!(state.hit_floor);
        assert_eq!(sim.ensemble().n_plus(), 1);
        assert!(state.q_plus > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let dynamics = small_problem();
        let init = InitialDistribution::filling(&dynamics.domain);
        let cfg = ChargeIterationConfig::new(0.05, 5.0, 2e-3, 0.0);
        assert!(iterate_q_plus(dynamics, &init, &cfg, 1).is_err());
    }
}
