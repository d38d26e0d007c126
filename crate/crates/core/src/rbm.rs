//! Random Batch dynamics for the charged particle system.
//!
//! Every step the particles are reshuffled into batches of size `p` and only
//! interact inside their batch, with the coupling `z^i z^k |Q| (N-1)/N`
//! averaged over the `p - 1` partners. In 1D the bounded force `sgn(x)/(2ν)`
//! is integrated explicitly. For `d >= 2` the singular pair flow of a batch
//! of two is solved in closed form, then the external field, the noise and
//! the boundary are applied (Lie splitting).

use crate::error::{ensure_positive, Error, Result};
use crate::geometry::{add, norm, scale, sub, unit_ball_volume, Point, SimDomain};
use crate::kernels::{coulomb_force_unchecked, external_field, PhysicalParams};
use crate::sde::{
    apply_boundary, em_step, NoiseStream, ReflectionScheme, RngSpec, CONTROL_STREAM, NOISE_BLOCK,
    SHUFFLE_STREAM,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Plus,
    Minus,
}

impl Species {
    #[inline]
    pub fn z(self) -> f64 {
        match self {
            Species::Plus => 1.0,
            Species::Minus => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Species::Plus => "plus",
            Species::Minus => "minus",
        }
    }

    pub const BOTH: [Species; 2] = [Species::Plus, Species::Minus];
}

/// Uniform initial law on `lo <= r <= hi`, where `r` is the coordinate in 1D
/// and the radius in a shell (uniform in volume).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution {
    pub lo: f64,
    pub hi: f64,
}

impl InitialDistribution {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// The whole domain.
    pub fn filling<const D: usize>(domain: &SimDomain<D>) -> Self {
        let (lo, hi) = domain.bounds();
        Self { lo, hi }
    }

    pub fn validate<const D: usize>(&self, domain: &SimDomain<D>) -> Result<()> {
        let (lo, hi) = domain.bounds();
        if !(self.lo >= lo && self.hi <= hi && self.lo < self.hi) {
            return Err(Error::InvalidParameter {
                name: "init",
                reason: format!(
                    "[{}, {}] must be a non-empty subrange of [{lo}, {hi}]",
                    self.lo, self.hi
                ),
            });
        }
        Ok(())
    }

    pub fn sample<const D: usize, R: Rng>(&self, domain: &SimDomain<D>, rng: &mut R) -> Point<D> {
        let u: f64 = rng.random();
        if !domain.is_shell() {
            let mut x = [0.0; D];
            x[0] = self.lo + u * (self.hi - self.lo);
            return x;
        }
        let d = D as i32;
        let r = (self.lo.powi(d) + u * (self.hi.powi(d) - self.lo.powi(d))).powf(1.0 / D as f64);
        loop {
            let v: Point<D> = std::array::from_fn(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng));
            let n = norm(&v);
            if n > 1e-12 {
                return scale(&v, r / n);
            }
        }
    }
}

/// Positions and charges of the numerical particles.
///
/// Each particle carries charge `±q`; `Q_± = q N_±` and `|Q| = q N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble<const D: usize> {
    positions: Vec<Point<D>>,
    species: Vec<Species>,
    ids: Vec<u64>,
    charge_per_particle: f64,
    next_id: u64,
}

impl<const D: usize> ParticleEnsemble<D> {
    pub fn new(positions: Vec<Point<D>>, species: Vec<Species>, q: f64) -> Result<Self> {
        ensure_positive("q", q)?;
        if positions.len() != species.len() {
            return Err(Error::InvalidParameter {
                name: "species",
                reason: "one species tag per position required".to_string(),
            });
        }
        let n = positions.len() as u64;
        Ok(Self {
            positions,
            species,
            ids: (0..n).collect(),
            charge_per_particle: q,
            next_id: n,
        })
    }

    /// `n_plus` and `n_minus` i.i.d. draws from `init`; positives first.
    pub fn sample<R: Rng>(
        domain: &SimDomain<D>,
        n_plus: usize,
        n_minus: usize,
        q: f64,
        init: &InitialDistribution,
        rng: &mut R,
    ) -> Result<Self> {
        init.validate(domain)?;
        let positions = (0..n_plus + n_minus).map(|_| init.sample(domain, rng)).collect();
        let species = std::iter::repeat_n(Species::Plus, n_plus)
            .chain(std::iter::repeat_n(Species::Minus, n_minus))
            .collect();
        Self::new(positions, species, q)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point<D>] {
        &self.positions
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn q(&self) -> f64 {
        self.charge_per_particle
    }

    pub fn count(&self, s: Species) -> usize {
        self.species.iter().filter(|&&t| t == s).count()
    }

    pub fn n_plus(&self) -> usize {
        self.count(Species::Plus)
    }

    pub fn n_minus(&self) -> usize {
        self.count(Species::Minus)
    }

    /// `|Q| = Q_+ + Q_-`.
    pub fn abs_charge(&self) -> f64 {
        self.charge_per_particle * self.len() as f64
    }

    pub fn species_charge(&self, s: Species) -> f64 {
        self.charge_per_particle * self.count(s) as f64
    }

    /// `Q_- - Q_+`.
    pub fn excess_negative_charge(&self) -> f64 {
        self.charge_per_particle * (self.n_minus() as f64 - self.n_plus() as f64)
    }

    /// Whether `Q_- - Q_+` matches `expected` to within one particle charge.
    pub fn is_charge_balanced(&self, expected: f64) -> bool {
        (self.excess_negative_charge() - expected).abs()
            <= self.charge_per_particle * (1.0 + 1e-9)
    }

    /// Positions of one species.
    pub fn positions_of(&self, s: Species) -> impl Iterator<Item = &Point<D>> + '_ {
        self.positions
            .iter()
            .zip(&self.species)
            .filter(move |(_, &t)| t == s)
            .map(|(x, _)| x)
    }

    fn push(&mut self, x: Point<D>, s: Species) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.positions.push(x);
        self.species.push(s);
        self.ids.push(id);
        id
    }
}

/// A random partition of `0..N` into batches of `p` consecutive entries of a
/// uniformly random permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPartition {
    order: Vec<u32>,
    batch_size: usize,
    step_index: u64,
}

impl BatchPartition {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn batches(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.order.chunks(self.batch_size)
    }

    /// `slot[i]` is the position of particle `i` in the permutation, so its
    /// batch is `slot[i] / p`.
    pub fn slots(&self) -> Vec<u32> {
        let mut slot = vec![0u32; self.order.len()];
        for (k, &i) in self.order.iter().enumerate() {
            slot[i as usize] = k as u32;
        }
        slot
    }

    /// Members of the batch occupying slot `k`.
    pub fn batch_at_slot(&self, k: usize) -> &[u32] {
        let b = k / self.batch_size;
        &self.order[b * self.batch_size..(b + 1) * self.batch_size]
    }
}

/// Fisher–Yates shuffle of `0..n`, cut into batches of `p`.
pub fn shuffle_batches<R: Rng>(n: usize, p: usize, rng: &mut R, step_index: u64) -> Result<BatchPartition> {
    if p < 2 || n == 0 || n % p != 0 {
        return Err(Error::InvalidBatchSize { n, p });
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    Ok(BatchPartition { order, batch_size: p, step_index })
}

/// Drift of particle `i` in 1D: `z^i E_f + (1/(p-1)) Σ_k z^i z^k |Q| (N-1)/N F(X^i - X^k)`
/// over the other members of its batch.
pub fn batch_drift_1d(
    ensemble: &ParticleEnsemble<1>,
    partition: &BatchPartition,
    params: &PhysicalParams<1>,
    domain: &SimDomain<1>,
    i: usize,
) -> Result<f64> {
    let slot = partition
        .order
        .iter()
        .position(|&k| k as usize == i)
        .ok_or(Error::InvalidParameter {
            name: "i",
            reason: "particle not covered by the partition".to_string(),
        })?;
    let coupling = interaction_coupling(ensemble);
    let e = external_field(params, domain, &ensemble.positions[i])?;
    Ok(drift_1d(
        ensemble.positions(),
        ensemble.species(),
        partition.batch_at_slot(slot),
        i,
        e[0],
        coupling,
        params.nu,
    ))
}

/// `|Q| (N-1) / N`.
fn interaction_coupling<const D: usize>(ensemble: &ParticleEnsemble<D>) -> f64 {
    let n = ensemble.len() as f64;
    ensemble.abs_charge() * (n - 1.0) / n
}

#[inline]
fn drift_1d<const D: usize>(
    positions: &[Point<D>],
    species: &[Species],
    batch: &[u32],
    i: usize,
    field: f64,
    coupling: f64,
    nu: f64,
) -> f64 {
    let zi = species[i].z();
    let xi = positions[i][0];
    let mut sum = 0.0;
    for &k in batch {
        let k = k as usize;
        if k != i {
            sum += species[k].z() * coulomb_force_unchecked(nu, &[xi - positions[k][0]])[0];
        }
    }
    zi * field + zi * coupling * sum / (batch.len() - 1) as f64
}

/// Exact flow of the pair interaction of a batch of two over time `tau`.
///
/// `|X^i - X^k|^d` evolves linearly with slope
/// `β = 2 z^i z^k |Q| (N-1) / (α(d) ν N)`; the midpoint is fixed. When an
/// attracting pair would collapse within the step both particles land on
/// the midpoint. Coincident particles are left where they are.
pub fn pair_splitting_exact<const D: usize>(
    xi: &Point<D>,
    xk: &Point<D>,
    zi: f64,
    zk: f64,
    tau: f64,
    abs_q: f64,
    n: usize,
    nu: f64,
) -> (Point<D>, Point<D>) {
    let diff = sub(xi, xk);
    let r = norm(&diff);
    let n = n as f64;
    let beta = 2.0 * zi * zk * abs_q * (n - 1.0) / (unit_ball_volume(D) * nu * n);
    if r == 0.0 || beta * tau == 0.0 {
        return (*xi, *xk);
    }
    let s = r.powi(D as i32) + beta * tau;
    let mid = scale(&add(xi, xk), 0.5);
    if s < 0.0 {
        return (mid, mid);
    }
    let root = match D {
        2 => s.sqrt(),
        3 => s.cbrt(),
        _ => s.powf(1.0 / D as f64),
    };
    let half = 0.5 * root / r;
    let offset = scale(&diff, half);
    (add(&mid, &offset), sub(&mid, &offset))
}

/// Everything that stays fixed over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics<const D: usize> {
    pub params: PhysicalParams<D>,
    pub domain: SimDomain<D>,
    pub scheme: ReflectionScheme,
    pub tau: f64,
    pub batch_size: usize,
}

impl<const D: usize> Dynamics<D> {
    pub fn new(
        params: PhysicalParams<D>,
        domain: SimDomain<D>,
        scheme: ReflectionScheme,
        tau: f64,
    ) -> Result<Self> {
        Self::with_batch_size(params, domain, scheme, tau, 2)
    }

    pub fn with_batch_size(
        params: PhysicalParams<D>,
        domain: SimDomain<D>,
        scheme: ReflectionScheme,
        tau: f64,
        batch_size: usize,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "tau",
                reason: format!("must be finite and >= 0, got {tau}"),
            });
        }
        scheme.validate()?;
        params.validate_for(&domain)?;
        if batch_size < 2 || (D > 1 && batch_size != 2) {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                reason: format!("must be 2 for d >= 2 and at least 2 in 1D, got {batch_size}"),
            });
        }
        Ok(Self { params, domain, scheme, tau, batch_size })
    }
}

/// Random Batch simulation: owns the ensemble, the per-particle noise
/// streams and the shuffler.
#[derive(Debug, Clone)]
pub struct Simulation<const D: usize> {
    ensemble: ParticleEnsemble<D>,
    dynamics: Dynamics<D>,
    seed: u64,
    shuffler: ChaCha8Rng,
    control: ChaCha8Rng,
    step: u64,
    noise: bool,
}

impl<const D: usize> Simulation<D> {
    pub fn new(ensemble: ParticleEnsemble<D>, dynamics: Dynamics<D>, seed: u64) -> Result<Self> {
        if ensemble.len() % dynamics.batch_size != 0 {
            return Err(Error::InvalidBatchSize { n: ensemble.len(), p: dynamics.batch_size });
        }
        let spec = RngSpec::new(seed, 0);
        let mut control = spec.stream(CONTROL_STREAM).generator();
        // skip whatever the caller may have drawn from the same stream for the initial ensemble
        control.set_word_pos(1 << 40);
        Ok(Self {
            ensemble,
            dynamics,
            seed,
            shuffler: spec.stream(SHUFFLE_STREAM).generator(),
            control,
            step: 0,
            noise: true,
        })
    }

    /// Samples the initial ensemble from the control stream of `seed`.
    pub fn from_initial(
        dynamics: Dynamics<D>,
        n_plus: usize,
        n_minus: usize,
        q: f64,
        init: &InitialDistribution,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngSpec::new(seed, CONTROL_STREAM).generator();
        let ensemble = ParticleEnsemble::sample(&dynamics.domain, n_plus, n_minus, q, init, &mut rng)?;
        Self::new(ensemble, dynamics, seed)
    }

    /// Test hook: turn the Brownian increments off (they are still drawn so
    /// stream positions stay aligned).
    pub fn set_noise(&mut self, enabled: bool) {
        self.noise = enabled;
    }

    pub fn ensemble(&self) -> &ParticleEnsemble<D> {
        &self.ensemble
    }

    pub fn dynamics(&self) -> &Dynamics<D> {
        &self.dynamics
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn into_ensemble(self) -> ParticleEnsemble<D> {
        self.ensemble
    }

    /// One Random Batch step from positions frozen at the start of the step.
    pub fn step(&mut self) -> Result<()> {
        let n = self.ensemble.len();
        let dynamics = self.dynamics;
        let partition = shuffle_batches(n, dynamics.batch_size, &mut self.shuffler, self.step)?;
        let slot = partition.slots();
        let coupling = interaction_coupling(&self.ensemble);
        let abs_q = self.ensemble.abs_charge();
        let (noise, seed, step) = (self.noise, self.seed, self.step);
        let positions = &self.ensemble.positions;
        let species = &self.ensemble.species;
        let Dynamics { params, domain, scheme, tau, .. } = dynamics;

        // d >= 2: exact pair flow, once per batch
        let split: Vec<(Point<D>, Point<D>)> = if D == 1 {
            Vec::new()
        } else {
            partition
                .order
                .par_chunks(2)
                .with_min_len(512)
                .map(|b| {
                    let (i, k) = (b[0] as usize, b[1] as usize);
                    let (yi, yk) = pair_splitting_exact(
                        &positions[i],
                        &positions[k],
                        species[i].z(),
                        species[k].z(),
                        tau,
                        abs_q,
                        n,
                        params.nu,
                    );
                    Ok((apply_boundary(&yi, &domain, scheme)?, apply_boundary(&yk, &domain, scheme)?))
                })
                .collect::<Result<_>>()?
        };

        let mut next = vec![[0.0; D]; n];
        next.par_chunks_mut(NOISE_BLOCK).enumerate().try_for_each(|(block, out)| -> Result<()> {
            let mut stream = NoiseStream::for_block(seed, step, block);
            for (j, out) in out.iter_mut().enumerate() {
                let i = block * NOISE_BLOCK + j;
                let mut gauss = stream.gaussian::<D>();
                if !noise {
                    gauss = [0.0; D];
                }
                let zi = species[i].z();
                *out = if D == 1 {
                    let batch = partition.batch_at_slot(slot[i] as usize);
                    let e = external_field(&params, &domain, &positions[i])?[0];
                    let mut drift = [0.0; D];
                    drift[0] = drift_1d(positions, species, batch, i, e, coupling, params.nu);
                    apply_boundary(&em_step(&positions[i], &drift, tau, &gauss), &domain, scheme)?
                } else {
                    let s = slot[i] as usize;
                    let pair = &split[s / 2];
                    let y = if s % 2 == 0 { pair.0 } else { pair.1 };
                    let drift = scale(&external_field(&params, &domain, &y)?, zi);
                    apply_boundary(&em_step(&y, &drift, tau, &gauss), &domain, scheme)?
                };
            }
            Ok(())
        })?;
        self.ensemble.positions = next;
        self.step += 1;
        Ok(())
    }

    /// Runs `n_steps` steps, calling `hook(step_index, ensemble)` after each
    /// one (step indices start at 1).
    pub fn run<F>(&mut self, n_steps: u64, mut hook: F) -> Result<()>
    where
        F: FnMut(u64, &ParticleEnsemble<D>),
    {
        for _ in 0..n_steps {
            self.step()?;
            hook(self.step, &self.ensemble);
        }
        Ok(())
    }

    /// Runs `n_steps` steps and returns snapshots taken after the steps
    /// listed in `record_at` (1-based, relative to the start of this call).
    pub fn simulate(&mut self, n_steps: u64, record_at: &[u64]) -> Result<Vec<ParticleEnsemble<D>>> {
        let start = self.step;
        let mut frames = Vec::with_capacity(record_at.len());
        self.run(n_steps, |step, ens| {
            if record_at.contains(&(step - start)) {
                frames.push(ens.clone());
            }
        })?;
        Ok(frames)
    }

    /// Adds `n_each` particles of each species, drawn from `init`.
    pub fn add_pairs(&mut self, n_each: usize, init: &InitialDistribution) {
        for s in Species::BOTH {
            for _ in 0..n_each {
                let x = init.sample(&self.dynamics.domain, &mut self.control);
                self.ensemble.push(x, s);
            }
        }
    }

    /// Removes up to `n_each` uniformly chosen particles of each species,
    /// never leaving fewer than one of a species. Returns how many of each
    /// were removed; the same number is taken from both species.
    pub fn remove_pairs(&mut self, n_each: usize) -> usize {
        let available = self.ensemble.n_plus().min(self.ensemble.n_minus()).saturating_sub(1);
        let n_each = n_each.min(available);
        if n_each == 0 {
            return 0;
        }
        let mut doomed = vec![false; self.ensemble.len()];
        for s in Species::BOTH {
            let members: Vec<usize> = (0..self.ensemble.len())
                .filter(|&i| self.ensemble.species[i] == s)
                .collect();
            for k in rand::seq::index::sample(&mut self.control, members.len(), n_each) {
                doomed[members[k]] = true;
            }
        }
        let mut keep = doomed.iter().map(|d| !d);
        self.ensemble.positions.retain(|_| keep.next().unwrap());
        let mut keep = doomed.iter().map(|d| !d);
        self.ensemble.species.retain(|_| keep.next().unwrap());
        let mut keep = doomed.iter().map(|d| !d);
        self.ensemble.ids.retain(|_| keep.next().unwrap());
        n_each
    }
}
