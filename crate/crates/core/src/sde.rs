//! Euler–Maruyama steps for the reflected overdamped Langevin dynamics.
//!
//! The reflecting process is approximated after each drift-diffusion step
//! by one of three boundary schemes built on the orthogonal projection `π`
//! onto `∂Ω_L`: projection `x ← π(x)`, reflection `x ← 2π(x) - x`, and
//! penalization `x ← x - λ(x - π(x))`.

use crate::error::{Error, Result};
use crate::geometry::{Point, SimDomain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Maximum number of boundary applications per step for projection and
/// reflection before giving up.
pub const MAX_BOUNDARY_APPLICATIONS: usize = 8;

/// Stream reserved for the batch shuffler.
pub const SHUFFLE_STREAM: u64 = u64::MAX;
/// Stream reserved for initial sampling and particle insertion/removal.
pub const CONTROL_STREAM: u64 = u64::MAX - 1;
/// Stream used to derive per-repetition master seeds.
const REPETITION_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionScheme {
    Projection,
    #[default]
    Reflection,
    Penalization { lambda: f64 },
}

impl ReflectionScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReflectionScheme::Penalization { lambda } if !(lambda > 0.0 && lambda <= 1.0) => {
                Err(Error::InvalidParameter {
                    name: "lambda",
                    reason: format!("penalization weight must lie in (0, 1], got {lambda}"),
                })
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ReflectionScheme::Projection => "projection".to_string(),
            ReflectionScheme::Reflection => "reflection".to_string(),
            ReflectionScheme::Penalization { lambda } => format!("penalization({lambda})"),
        }
    }
}

/// Identifies one independent random stream: a master seed plus a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    /// The generator for this stream, positioned at its start.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Same master seed, different stream.
    pub fn stream(&self, stream_id: u64) -> Self {
        Self { master_seed: self.master_seed, stream_id }
    }

    /// Master seed for repetition `index` of an experiment.
    pub fn repetition_seed(master_seed: u64, index: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(REPETITION_STREAM);
        rng.set_word_pos(2 * index as u128);
        rand::RngCore::next_u64(&mut rng)
    }
}

/// Particles per noise block.
pub const NOISE_BLOCK: usize = 1024;

/// Sequential source of standard normal vectors.
///
/// The noise of a step comes from one stream per block of [`NOISE_BLOCK`]
/// consecutive particle indices, keyed by `(master_seed, step, block)`, so
/// blocks can be processed in any order or on any number of workers.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(spec: RngSpec) -> Self {
        Self { rng: spec.generator() }
    }

    /// Stream for `block` at step `step`.
    pub fn for_block(master_seed: u64, step: u64, block: usize) -> Self {
        assert!(step < REPETITION_STREAM, "step index collides with a reserved stream");
        let mut rng = RngSpec::new(master_seed, step).generator();
        rng.set_word_pos((block as u128) << 40);
        Self { rng }
    }

    #[inline]
    pub fn gaussian<const D: usize>(&mut self) -> Point<D> {
        std::array::from_fn(|_| StandardNormal.sample(&mut self.rng))
    }
}

/// `x + drift τ + sqrt(2τ) ξ`, with no boundary handling.
#[inline]
pub fn em_step<const D: usize>(
    x: &Point<D>,
    drift: &Point<D>,
    tau: f64,
    gauss: &Point<D>,
) -> Point<D> {
    let amp = (2.0 * tau).sqrt();
    std::array::from_fn(|k| x[k] + drift[k] * tau + amp * gauss[k])
}

/// Applies the boundary scheme to a point produced by [`em_step`].
///
/// Projection and reflection are repeated until the point is back in the
/// closed domain, at most [`MAX_BOUNDARY_APPLICATIONS`] times. Penalization
/// is applied once; with `λ < 1` it moves an exterior point only part of the
/// way back, and later steps keep pushing it.
pub fn apply_boundary<const D: usize>(
    x: &Point<D>,
    domain: &SimDomain<D>,
    scheme: ReflectionScheme,
) -> Result<Point<D>> {
    if domain.contains(x) {
        return Ok(*x);
    }
    if let ReflectionScheme::Penalization { lambda } = scheme {
        let p = domain.project_to_boundary(x);
        return Ok(std::array::from_fn(|k| x[k] - lambda * (x[k] - p[k])));
    }
    let mut y = *x;
    for _ in 0..MAX_BOUNDARY_APPLICATIONS {
        let p = domain.project_to_boundary(&y);
        y = match scheme {
            ReflectionScheme::Projection => p,
            _ => std::array::from_fn(|k| 2.0 * p[k] - y[k]),
        };
        if domain.contains(&y) {
            return Ok(y);
        }
    }
    Err(Error::ReflectionFailure {
        distance: domain.exterior_distance(&y),
        attempts: MAX_BOUNDARY_APPLICATIONS,
    })
}
