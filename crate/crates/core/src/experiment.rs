//! Experiment configuration, named presets and the pipelines behind the
//! `rbmpb` command-line tool.
//!
//! A configuration is a JSON object. It may name a `preset`, in which case
//! the remaining keys override the preset's values (nested blocks are merged
//! key by key). Every pipeline writes CSV files that start with `#` comment
//! lines carrying the SHA-256 hash of the run manifest, plus the manifest
//! itself as `manifest.json`.

use crate::charge_iteration::{iterate_q_plus, ChargeIterationConfig, ErrorMeasure, IterationState};
use crate::error::{Error, Result};
use crate::geometry::{DomainShape, Point, SimDomain};
use crate::kernels::PhysicalParams;
use crate::observables::{
    azimuthal_density, capacitance_curve, capacitance_from_samples, planar_kde, potential_from_densities,
    reference_moment, sample_mean, uniform_edges, voltage, weak_error, BinMeasure, CapacitancePoint,
    DensityEstimate, Field2d, HistogramAccumulator, KdePlane, MseReport, TestFunction,
};
use crate::rbm::{Dynamics, InitialDistribution, Simulation, Species};
use crate::reference::{solve_with_positive_charge, truncation_study, GridSolution, NewtonOptions, PbProblem};
use crate::sde::{ReflectionScheme, RngSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Width of the shell next to the cell used for angular densities.
pub const NEAR_CELL_WIDTH: f64 = 1.0;
/// Azimuthal bins of the angular density.
pub const ANGULAR_BINS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Simulate,
    FdSolve,
    IterateQ,
    Capacitance,
    Convergence,
    TruncationStudy,
    KdePlanes,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::Simulate,
        Pipeline::FdSolve,
        Pipeline::IterateQ,
        Pipeline::Capacitance,
        Pipeline::Convergence,
        Pipeline::TruncationStudy,
        Pipeline::KdePlanes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Simulate => "simulate",
            Pipeline::FdSolve => "fd-solve",
            Pipeline::IterateQ => "iterate-q",
            Pipeline::Capacitance => "capacitance",
            Pipeline::Convergence => "convergence",
            Pipeline::TruncationStudy => "truncation-study",
            Pipeline::KdePlanes => "kde-planes",
        }
    }
}

/// Settings of the charge iteration, required when `rho_inf` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSettings {
    /// Charge per particle.
    pub q: f64,
    pub t_c: f64,
    pub epsilon: f64,
    #[serde(default = "one")]
    pub h: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "one")]
    pub initial_q_plus: f64,
    #[serde(default)]
    pub measure: ErrorMeasure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSettings {
    pub l_list: Vec<f64>,
    pub l_ref: f64,
    /// Grid spacing shared by all truncations.
    pub spacing: f64,
}

/// Full parameter block of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dim: usize,
    pub nu: f64,
    /// `Q_f`.
    pub free_charge: f64,
    /// Position of the free charge inside the cell (d >= 2); the centre if absent.
    #[serde(default)]
    pub free_charge_at: Option<Vec<f64>>,
    /// Cell boundary `a` (1D) or radius `R`.
    pub inner: f64,
    /// Artificial wall `L`.
    pub outer: f64,
    #[serde(default)]
    pub q_plus: Option<f64>,
    #[serde(default)]
    pub n_plus: Option<usize>,
    #[serde(default)]
    pub rho_inf: Option<f64>,
    #[serde(default)]
    pub iteration: Option<IterationSettings>,
    #[serde(default)]
    pub scheme: ReflectionScheme,
    pub tau: f64,
    /// Simulated time of a run (or of the measurement run after a charge iteration).
    pub t_final: f64,
    /// Frames in the time average, taken every `frame_stride` steps up to the end of the run.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_frame_stride")]
    pub frame_stride: usize,
    /// Radial (or coordinate) range of the initial distribution; the whole domain if absent.
    #[serde(default)]
    pub init: Option<[f64; 2]>,
    /// Histogram bins; 100 in 1D and 60 in a shell if absent.
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub n_plus_list: Vec<usize>,
    #[serde(default)]
    pub free_charge_grid: Vec<f64>,
    #[serde(default = "default_true")]
    pub particle_capacitance: bool,
    #[serde(default)]
    pub truncation: Option<TruncationSettings>,
    #[serde(default = "default_fd_spacing")]
    pub fd_spacing: f64,
    #[serde(default = "default_kde_grid")]
    pub kde_grid: usize,
}

fn one() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    20
}
fn default_name() -> String {
    "custom".to_string()
}
fn default_frames() -> usize {
    100
}
fn default_frame_stride() -> usize {
    10
}
fn default_seed() -> u64 {
    1
}
fn default_repetitions() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_fd_spacing() -> f64 {
    0.005
}
fn default_kde_grid() -> usize {
    101
}

fn config_error(key: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{key}`: {reason}"))
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config_error(key, format!("must be finite and > 0, got {v}")))
    }
}

impl ExperimentConfig {
    fn base(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            nu: 1.0,
            free_charge: 2.0,
            free_charge_at: None,
            inner: 1.0,
            outer: 15.0,
            q_plus: None,
            n_plus: None,
            rho_inf: None,
            iteration: None,
            scheme: ReflectionScheme::Reflection,
            tau: 0.01,
            t_final: 50.0,
            frames: default_frames(),
            frame_stride: default_frame_stride(),
            init: None,
            bins: None,
            seed: default_seed(),
            repetitions: default_repetitions(),
            n_plus_list: Vec::new(),
            free_charge_grid: Vec::new(),
            particle_capacitance: true,
            truncation: None,
            fd_spacing: default_fd_spacing(),
            kde_grid: default_kde_grid(),
        }
    }

    /// Checks every field, naming the offending key on failure.
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(config_error("dim", format!("must be 1, 2 or 3, got {}", self.dim)));
        }
        check_positive("nu", self.nu)?;
        if !self.free_charge.is_finite() {
            return Err(config_error("free_charge", "must be finite"));
        }
        check_positive("inner", self.inner)?;
        if !(self.outer.is_finite() && self.outer > self.inner) {
            return Err(config_error("outer", format!("must exceed inner = {}, got {}", self.inner, self.outer)));
        }
        if let Some(at) = &self.free_charge_at {
            if self.dim == 1 {
                return Err(config_error("free_charge_at", "only meaningful for dim >= 2"));
            }
            if at.len() != self.dim {
                return Err(config_error("free_charge_at", format!("needs {} coordinates, got {}", self.dim, at.len())));
            }
            let r = at.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(r < self.inner) {
                return Err(config_error("free_charge_at", format!("must lie inside the cell (|x_c| = {r})")));
            }
        }
        match (self.n_plus, self.rho_inf) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(config_error("n_plus", "exactly one of `n_plus` and `rho_inf` must be given"));
            }
            (Some(n), None) => {
                if n == 0 {
                    return Err(config_error("n_plus", "must be at least 1"));
                }
                match self.q_plus {
                    Some(q) => check_positive("q_plus", q)?,
                    None => return Err(config_error("q_plus", "required together with `n_plus`")),
                }
            }
            (None, Some(rho)) => {
                check_positive("rho_inf", rho)?;
                if self.q_plus.is_some() {
                    return Err(config_error("q_plus", "not allowed with `rho_inf`; the charge is iterated"));
                }
                let it = self
                    .iteration
                    .as_ref()
                    .ok_or_else(|| config_error("iteration", "required together with `rho_inf`"))?;
                check_positive("iteration.q", it.q)?;
                check_positive("iteration.t_c", it.t_c)?;
                check_positive("iteration.epsilon", it.epsilon)?;
                check_positive("iteration.h", it.h)?;
                check_positive("iteration.initial_q_plus", it.initial_q_plus)?;
                if it.max_iters == 0 {
                    return Err(config_error("iteration.max_iters", "must be at least 1"));
                }
                if it.h >= self.outer - self.inner {
                    return Err(config_error("iteration.h", "must be below outer - inner"));
                }
            }
        }
        if let ReflectionScheme::Penalization { lambda } = self.scheme {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(config_error("scheme.lambda", format!("must lie in (0, 1], got {lambda}")));
            }
        }
        check_positive("tau", self.tau)?;
        check_positive("t_final", self.t_final)?;
        if self.frames == 0 {
            return Err(config_error("frames", "must be at least 1"));
        }
        if self.frame_stride == 0 {
            return Err(config_error("frame_stride", "must be at least 1"));
        }
        if (self.frames as u64 - 1) * self.frame_stride as u64 >= self.n_steps() {
            return Err(config_error(
                "frames",
                format!("{} frames every {} steps do not fit in {} steps", self.frames, self.frame_stride, self.n_steps()),
            ));
        }
        if let Some([lo, hi]) = self.init {
            if !(lo >= self.inner && hi <= self.outer && lo < hi) {
                return Err(config_error("init", format!("must be an increasing range inside [{}, {}]", self.inner, self.outer)));
            }
        }
        if self.bins == Some(0) {
            return Err(config_error("bins", "must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(config_error("repetitions", "must be at least 1"));
        }
        if self.n_plus_list.contains(&0) {
            return Err(config_error("n_plus_list", "entries must be at least 1"));
        }
        if self.free_charge_grid.iter().any(|q| !q.is_finite()) {
            return Err(config_error("free_charge_grid", "entries must be finite"));
        }
        if let Some(t) = &self.truncation {
            check_positive("truncation.l_ref", t.l_ref)?;
            check_positive("truncation.spacing", t.spacing)?;
            if t.l_list.is_empty() || t.l_list.iter().any(|&l| !(l > self.inner && l <= t.l_ref)) {
                return Err(config_error("truncation.l_list", "entries must lie in (inner, l_ref]"));
            }
        }
        check_positive("fd_spacing", self.fd_spacing)?;
        if self.kde_grid < 2 {
            return Err(config_error("kde_grid", "must be at least 2"));
        }
        Ok(())
    }

    /// Steps of one run of length `t_final`.
    pub fn n_steps(&self) -> u64 {
        ((self.t_final / self.tau).round() as u64).max(1)
    }

    /// Step indices (1-based) at which frames are recorded.
    pub fn frame_steps(&self) -> Vec<u64> {
        let n = self.n_steps();
        (0..self.frames as u64).rev().map(|k| n - k * self.frame_stride as u64).collect()
    }

    pub fn bin_count(&self) -> usize {
        self.bins.unwrap_or(if self.dim == 1 { 100 } else { 60 })
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        uniform_edges(self.inner, self.outer, self.bin_count())
    }

    pub fn fd_nodes(&self) -> usize {
        (((self.outer - self.inner) / self.fd_spacing).round() as usize + 1).max(16)
    }

    /// Charge per particle in direct-simulation mode.
    pub fn particle_charge(&self) -> Option<f64> {
        Some(self.q_plus? / self.n_plus? as f64)
    }

    pub fn is_centered(&self) -> bool {
        self.free_charge_at.as_ref().is_none_or(|x| x.iter().all(|&c| c == 0.0))
    }

    /// Membrane surface charge seen by the one-dimensional reference problem.
    pub fn surface_charge(&self, free_charge: f64) -> f64 {
        if self.dim == 1 {
            free_charge / (2.0 * self.nu)
        } else {
            free_charge / (4.0 * PI * self.inner * self.inner * self.nu)
        }
    }

    /// Reference boundary value problem for the given `Q_f` and `ρ∞`, if the
    /// geometry reduces to one dimension.
    pub fn reference_problem(&self, free_charge: f64, rho_inf: f64) -> Option<PbProblem> {
        match self.dim {
            1 => Some(PbProblem::planar(self.nu, rho_inf, self.surface_charge(free_charge), self.inner, self.outer)),
            3 if self.is_centered() => Some(PbProblem::radial(self.nu, rho_inf, free_charge, self.inner, self.outer)),
            _ => None,
        }
    }

    fn iteration_config(&self) -> Result<ChargeIterationConfig> {
        let (rho, it) = match (self.rho_inf, &self.iteration) {
            (Some(r), Some(it)) => (r, it),
            _ => return Err(config_error("rho_inf", "this pipeline needs `rho_inf` and an `iteration` block")),
        };
        let mut c = ChargeIterationConfig::new(rho, it.t_c, it.q, it.epsilon);
        c.h = it.h;
        c.max_iters = it.max_iters;
        c.initial_q_plus = it.initial_q_plus;
        c.measure = it.measure;
        Ok(c)
    }
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 17] = [
    "fig2",
    "fig2-desk",
    "fig3",
    "fig3-desk",
    "fig4",
    "fig4-desk",
    "fig5",
    "fig6",
    "fig7-nu1",
    "fig7-nu0.1",
    "fig7-nu0.01",
    "fig7-desk",
    "fig8",
    "fig9",
    "fig9-desk",
    "neutral",
    "truncation",
];

fn fig7(name: &str, nu: f64, t_final: f64) -> ExperimentConfig {
    ExperimentConfig {
        nu,
        free_charge: 10.0 * nu,
        inner: 1.0,
        outer: 10.0,
        q_plus: Some(20.0),
        n_plus: Some(10_000),
        tau: 0.01 * nu,
        t_final,
        ..ExperimentConfig::base(name, 3)
    }
}

fn fixed_rho_1d(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        outer: 30.0,
        rho_inf: Some(0.0218),
        iteration: Some(IterationSettings {
            q: 1e-4,
            t_c: 50.0,
            epsilon: 1e-5,
            h: 1.0,
            max_iters: 20,
            initial_q_plus: 1.0,
            measure: ErrorMeasure::GeometricGap,
        }),
        tau: 0.1,
        t_final: 50.0,
        frame_stride: 5,
        truncation: Some(TruncationSettings { l_list: vec![5.0, 10.0, 15.0, 20.0], l_ref: 40.0, spacing: 0.01 }),
        ..ExperimentConfig::base(name, 1)
    }
}

/// Expands a preset name into its parameter block.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let fig2 = ExperimentConfig {
        q_plus: Some(1.0),
        n_plus: Some(100_000),
        init: Some([7.0, 8.0]),
        ..ExperimentConfig::base("fig2", 1)
    };
    let fig3 = ExperimentConfig {
        nu: 0.01,
        free_charge: 0.04,
        q_plus: Some(0.4),
        n_plus: Some(100_000),
        tau: 0.0002,
        t_final: 2.0,
        frame_stride: 50,
        ..ExperimentConfig::base("fig3", 1)
    };
    let fig4 = ExperimentConfig {
        q_plus: Some(1.0),
        n_plus: Some(10_000),
        n_plus_list: vec![100, 1_000, 10_000, 100_000],
        repetitions: 100,
        t_final: 80.0,
        ..ExperimentConfig::base("fig4", 1)
    };
    let fig9 = ExperimentConfig {
        free_charge: 15.0,
        free_charge_at: Some(vec![0.0, 1.5, 0.0]),
        inner: 2.0,
        outer: 10.0,
        q_plus: Some(10.0),
        n_plus: Some(10_000),
        t_final: 30.0,
        ..ExperimentConfig::base("fig9", 3)
    };
    let cfg = match name {
        "fig2" => fig2,
        "fig2-desk" => ExperimentConfig { name: name.into(), n_plus: Some(10_000), ..fig2 },
        "fig3" => fig3,
        "fig3-desk" => ExperimentConfig { name: name.into(), n_plus: Some(10_000), ..fig3 },
        "fig4" => fig4,
        "fig4-desk" => ExperimentConfig {
            name: name.into(),
            n_plus_list: vec![100, 1_000, 10_000],
            repetitions: 50,
            ..fig4
        },
        "fig5" => fixed_rho_1d(name),
        "fig6" => ExperimentConfig {
            free_charge_grid: vec![1.0, 1.5, 2.0, 2.5, 3.0],
            iteration: Some(IterationSettings { max_iters: 10, ..fixed_rho_1d(name).iteration.unwrap() }),
            ..fixed_rho_1d(name)
        },
        "fig7-nu1" => fig7(name, 1.0, 50.0),
        "fig7-nu0.1" => fig7(name, 0.1, 20.0),
        "fig7-nu0.01" => fig7(name, 0.01, 5.0),
        "fig7-desk" => fig7(name, 1.0, 30.0),
        "fig8" => ExperimentConfig {
            free_charge: 6.0,
            inner: 1.0,
            outer: 10.0,
            rho_inf: Some(0.005),
            iteration: Some(IterationSettings {
                q: 1e-3,
                t_c: 40.0,
                epsilon: 1e-5,
                h: 1.0,
                max_iters: 10,
                initial_q_plus: 20.0,
                measure: ErrorMeasure::GeometricGap,
            }),
            t_final: 20.0,
            free_charge_grid: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            ..ExperimentConfig::base(name, 3)
        },
        "fig9" => fig9,
        "fig9-desk" => ExperimentConfig { name: name.into(), n_plus: Some(5_000), frames: 50, ..fig9 },
        "neutral" => ExperimentConfig {
            free_charge: 0.0,
            q_plus: Some(1.0),
            n_plus: Some(10_000),
            ..ExperimentConfig::base(name, 1)
        },
        "truncation" => ExperimentConfig {
            free_charge: 2.0,
            outer: 40.0,
            ..fixed_rho_1d(name)
        },
        other => {
            return Err(Error::Config(format!("unknown preset `{other}`; known presets: {}", PRESET_NAMES.join(", "))));
        }
    };
    Ok(cfg)
}

fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot @ Value::Object(_)) if v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses and validates a JSON configuration.
pub fn config_from_str(json: &str) -> Result<ExperimentConfig> {
    let mut value: Value = serde_json::from_str(json).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
    let Value::Object(map) = &mut value else {
        return Err(Error::Config("the configuration must be a JSON object".into()));
    };
    let merged = match map.remove("preset") {
        Some(Value::String(name)) => {
            let mut base = serde_json::to_value(preset(&name)?).expect("configs serialize");
            merge(&mut base, value);
            base
        }
        Some(_) => return Err(config_error("preset", "must be a string")),
        None => value,
    };
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(e.into_inner().to_string())
        } else {
            config_error(&path, e.into_inner())
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    config_from_str(&text)
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub pipeline: Pipeline,
    pub code_version: &'static str,
    pub config: &'a ExperimentConfig,
}

impl Manifest<'_> {
    pub fn new(pipeline: Pipeline, config: &ExperimentConfig) -> Manifest<'_> {
        Manifest { pipeline, code_version: env!("CARGO_PKG_VERSION"), config }
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn domain<const D: usize>(cfg: &ExperimentConfig) -> Result<SimDomain<D>> {
    let shape = if D == 1 {
        DomainShape::Interval { a: cfg.inner, l: cfg.outer }
    } else {
        DomainShape::Shell { inner: cfg.inner, outer: cfg.outer }
    };
    SimDomain::new(shape)
}

fn dynamics<const D: usize>(cfg: &ExperimentConfig, free_charge: f64) -> Result<Dynamics<D>> {
    let mut params = PhysicalParams::<D>::new(cfg.nu, free_charge)?;
    if let Some(at) = &cfg.free_charge_at {
        params = params.with_free_charge_at(std::array::from_fn(|k| at[k]));
    }
    if let Some(rho) = cfg.rho_inf {
        params = params.with_rho_inf(rho)?;
    }
    Dynamics::new(params, domain::<D>(cfg)?, cfg.scheme, cfg.tau)
}

fn initial<const D: usize>(cfg: &ExperimentConfig, dom: &SimDomain<D>) -> InitialDistribution {
    match cfg.init {
        Some([lo, hi]) => InitialDistribution::new(lo, hi),
        None => InitialDistribution::filling(dom),
    }
}

/// Particle counts `(N_+, N_-)` for a run with `N_+ = n_plus`.
fn counts<const D: usize>(dynamics: &Dynamics<D>, q_plus: f64, n_plus: usize) -> (usize, usize) {
    let q = q_plus / n_plus as f64;
    let excess = dynamics.params.ion_excess_charge(&dynamics.domain);
    let mut n_minus = (((q_plus + excess) / q).round() as usize).max(1);
    while (n_plus + n_minus) % dynamics.batch_size != 0 {
        n_minus += 1;
    }
    (n_plus, n_minus)
}

/// Time-averaged densities of one run.
#[derive(Debug, Clone)]
pub struct DensityRun {
    pub plus: DensityEstimate,
    pub minus: DensityEstimate,
    /// `½ ln(ρ-/ρ+)` per bin.
    pub potential: Vec<Option<f64>>,
    /// Finite-difference solution with matching charge, when the geometry is one-dimensional.
    pub reference: Option<GridSolution>,
}

impl DensityRun {
    pub fn centers(&self) -> Vec<f64> {
        self.plus.centers()
    }

    pub fn density(&self, s: Species) -> &DensityEstimate {
        match s {
            Species::Plus => &self.plus,
            Species::Minus => &self.minus,
        }
    }

    /// `Φ(inner) - Φ(outer)` from the recovered potential.
    pub fn voltage(&self) -> Result<f64> {
        let edges = &self.plus.bin_edges;
        boundary_voltage(&self.centers(), &self.potential, edges[0], edges[edges.len() - 1])
    }
}

/// Linear extrapolation of a binned potential to both ends of the range,
/// returning `Φ(a) - Φ(l)`.
pub fn boundary_voltage(centers: &[f64], phi: &[Option<f64>], a: f64, l: f64) -> Result<f64> {
    let defined: Vec<(f64, f64)> = centers.iter().zip(phi).filter_map(|(&c, p)| p.map(|p| (c, p))).collect();
    if defined.len() < 2 {
        return Err(Error::InvalidParameter { name: "bins", reason: "fewer than two bins carry both species".into() });
    }
    let extrapolate = |(x0, y0): (f64, f64), (x1, y1): (f64, f64), x: f64| y0 + (y1 - y0) * (x - x0) / (x1 - x0);
    let n = defined.len();
    Ok(extrapolate(defined[0], defined[1], a) - extrapolate(defined[n - 2], defined[n - 1], l))
}

/// Runs `cfg.n_steps()` steps and pools histograms over the recorded frames;
/// optionally keeps the sampled positions of both species.
fn record<const D: usize>(
    sim: &mut Simulation<D>,
    cfg: &ExperimentConfig,
    keep_samples: bool,
) -> Result<(DensityEstimate, DensityEstimate, [Vec<Point<D>>; 2])> {
    let dom = sim.dynamics().domain;
    let strict = !matches!(cfg.scheme, ReflectionScheme::Penalization { .. });
    let measure = BinMeasure::for_domain(&dom);
    let mut acc = [
        HistogramAccumulator::new(cfg.bin_edges(), Species::Plus, measure, strict)?,
        HistogramAccumulator::new(cfg.bin_edges(), Species::Minus, measure, strict)?,
    ];
    let mut samples: [Vec<Point<D>>; 2] = [Vec::new(), Vec::new()];
    let record_at = cfg.frame_steps();
    let start = sim.steps_taken();
    let mut failure = None;
    sim.run(cfg.n_steps(), |step, ens| {
        if failure.is_some() || record_at.binary_search(&(step - start)).is_err() {
            return;
        }
        for (a, s) in acc.iter_mut().zip(Species::BOTH) {
            if let Err(e) = a.add_frame(ens, &dom) {
                failure = Some(e);
            }
            if keep_samples {
                samples[(s == Species::Minus) as usize].extend(ens.positions_of(s));
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((acc[0].finish()?, acc[1].finish()?, samples))
}

fn density_run(plus: DensityEstimate, minus: DensityEstimate, reference: Option<GridSolution>) -> Result<DensityRun> {
    let potential = potential_from_densities(&plus, &minus)?;
    Ok(DensityRun { plus, minus, potential, reference })
}

fn newton() -> NewtonOptions {
    NewtonOptions { tol: 1e-10, ..Default::default() }
}

/// Reference solution carrying positive charge `q_plus`.
fn fitted_reference(cfg: &ExperimentConfig, q_plus: f64) -> Result<Option<GridSolution>> {
    match cfg.reference_problem(cfg.free_charge, 1.0) {
        Some(p) => Ok(Some(solve_with_positive_charge(p, q_plus, cfg.fd_nodes(), &newton())?)),
        None => Ok(None),
    }
}

fn direct_config(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<(f64, usize)> {
    match (cfg.q_plus, cfg.n_plus) {
        (Some(q), Some(n)) => Ok((q, n)),
        _ => Err(config_error("n_plus", format!("{} needs `q_plus` and `n_plus`", pipeline.name()))),
    }
}

fn simulate_dim<const D: usize>(cfg: &ExperimentConfig, keep_samples: bool) -> Result<(DensityRun, [Vec<Point<D>>; 2])> {
    let (q_plus, n_plus) = direct_config(cfg, Pipeline::Simulate)?;
    let dynamics = dynamics::<D>(cfg, cfg.free_charge)?;
    let (np, nm) = counts(&dynamics, q_plus, n_plus);
    let init = initial(cfg, &dynamics.domain);
    let mut sim = Simulation::from_initial(dynamics, np, nm, q_plus / n_plus as f64, &init, cfg.seed)?;
    let (plus, minus, samples) = record(&mut sim, cfg, keep_samples)?;
    let reference = if D == 2 { None } else { fitted_reference(cfg, q_plus)? };
    Ok((density_run(plus, minus, reference)?, samples))
}

macro_rules! by_dim {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.dim {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            d => Err(config_error("dim", format!("must be 1, 2 or 3, got {d}"))),
        }
    };
}

fn simulate_any<const D: usize>(cfg: &ExperimentConfig) -> Result<DensityRun> {
    Ok(simulate_dim::<D>(cfg, false)?.0)
}

/// Direct simulation with `N_+` particles carrying `Q_+`, time-averaged over the configured frames.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<DensityRun> {
    cfg.validate()?;
    by_dim!(cfg, simulate_any(cfg))
}

/// Finite-difference solution: at the given `ρ∞`, or with `ρ∞` fitted to `Q_+`.
pub fn run_fd_solve(cfg: &ExperimentConfig) -> Result<GridSolution> {
    cfg.validate()?;
    let missing = || config_error("dim", "the reference solver needs dim 1, or dim 3 with a centred free charge");
    match (cfg.rho_inf, cfg.q_plus) {
        (Some(rho), _) => cfg.reference_problem(cfg.free_charge, rho).ok_or_else(missing)?.solve(cfg.fd_nodes(), &newton()),
        (None, Some(q)) => fitted_reference(cfg, q)?.ok_or_else(missing),
        (None, None) => Err(config_error("rho_inf", "fd-solve needs `rho_inf` or `q_plus`")),
    }
}

/// Outcome of a charge iteration followed by a measurement run.
#[derive(Debug, Clone)]
pub struct IterationRun {
    pub state: IterationState,
    pub densities: DensityRun,
}

fn iterate_dim<const D: usize>(cfg: &ExperimentConfig, free_charge: f64, seed: u64) -> Result<IterationRun> {
    let ic = cfg.iteration_config()?;
    let dynamics = dynamics::<D>(cfg, free_charge)?;
    let init = initial(cfg, &dynamics.domain);
    let (state, mut sim) = iterate_q_plus(dynamics, &init, &ic, seed)?;
    let (plus, minus, _) = record(&mut sim, cfg, false)?;
    let reference = match cfg.reference_problem(free_charge, ic.rho_inf) {
        Some(p) if D != 2 => Some(p.solve(cfg.fd_nodes(), &newton())?),
        _ => None,
    };
    Ok(IterationRun { state, densities: density_run(plus, minus, reference)? })
}

/// Charge iteration at the configured `ρ∞`, then `t_final` of time-averaged measurement.
pub fn run_iterate_q(cfg: &ExperimentConfig) -> Result<IterationRun> {
    cfg.validate()?;
    by_dim!(cfg, iterate_dim(cfg, cfg.free_charge, cfg.seed))
}

/// Capacitance curves over `free_charge_grid` at fixed `ρ∞`.
#[derive(Debug, Clone)]
pub struct CapacitanceRun {
    pub reference: Vec<CapacitancePoint>,
    pub particle: Option<Vec<CapacitancePoint>>,
    pub iterations: Vec<IterationState>,
}

pub fn run_capacitance(cfg: &ExperimentConfig) -> Result<CapacitanceRun> {
    cfg.validate()?;
    let rho = cfg.rho_inf.ok_or_else(|| config_error("rho_inf", "capacitance needs a fixed `rho_inf`"))?;
    let grid = &cfg.free_charge_grid;
    let reference = capacitance_curve(grid, |qf| {
        let p = cfg
            .reference_problem(qf, rho)
            .ok_or_else(|| config_error("dim", "capacitance needs dim 1, or dim 3 with a centred free charge"))?;
        Ok(voltage(&p.solve(cfg.fd_nodes(), &newton())?))
    })?;
    if !cfg.particle_capacitance {
        return Ok(CapacitanceRun { reference, particle: None, iterations: Vec::new() });
    }
    let runs = grid
        .par_iter()
        .enumerate()
        .map(|(k, &qf)| {
            let seed = RngSpec::repetition_seed(cfg.seed, k as u64);
            by_dim!(cfg, iterate_dim(cfg, qf, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    let volts = runs.iter().map(|r| r.densities.voltage()).collect::<Result<Vec<_>>>()?;
    let particle = capacitance_from_samples(grid, &volts)?;
    Ok(CapacitanceRun {
        reference,
        particle: Some(particle),
        iterations: runs.into_iter().map(|r| r.state).collect(),
    })
}

/// Final-time sample means of every (species, test function) pair.
fn repetition_means(cfg: &ExperimentConfig, n_plus: usize, seed: u64) -> Result<[f64; 8]> {
    let q_plus = cfg.q_plus.expect("validated");
    let dynamics = dynamics::<1>(cfg, cfg.free_charge)?;
    let (np, nm) = counts(&dynamics, q_plus, n_plus);
    let init = initial(cfg, &dynamics.domain);
    let mut sim = Simulation::from_initial(dynamics, np, nm, q_plus / n_plus as f64, &init, seed)?;
    sim.run(cfg.n_steps(), |_, _| {})?;
    let mut out = [0.0; 8];
    for (k, (s, f)) in Species::BOTH.iter().flat_map(|&s| TestFunction::ALL.map(|f| (s, f))).enumerate() {
        out[k] = sample_mean(sim.ensemble(), s, f, cfg.outer);
    }
    Ok(out)
}

/// Relative root-MSE of test-function moments against the reference, for
/// every `N_+` in `n_plus_list` over `repetitions` independent runs.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Vec<MseReport>> {
    cfg.validate()?;
    let (q_plus, _) = direct_config(cfg, Pipeline::Convergence)?;
    if cfg.dim != 1 {
        return Err(config_error("dim", "convergence is defined for dim 1"));
    }
    if cfg.n_plus_list.is_empty() {
        return Err(config_error("n_plus_list", "convergence needs at least one particle count"));
    }
    let sol = fitted_reference(cfg, q_plus)?.expect("dim 1 has a reference");
    let m = cfg.repetitions;
    let mut rows = Vec::new();
    for (k, &n_plus) in cfg.n_plus_list.iter().enumerate() {
        let means = (0..m)
            .into_par_iter()
            .map(|r| repetition_means(cfg, n_plus, RngSpec::repetition_seed(cfg.seed, (k * m + r) as u64)))
            .collect::<Result<Vec<_>>>()?;
        for (j, (s, f)) in Species::BOTH.iter().flat_map(|&s| TestFunction::ALL.map(|f| (s, f))).enumerate() {
            let column: Vec<f64> = means.iter().map(|row| row[j]).collect();
            rows.push(MseReport {
                test_function: f,
                species: s,
                n_plus,
                repetitions: m,
                rmse: weak_error(&column, reference_moment(&sol, s, f))?,
            });
        }
    }
    Ok(rows)
}

/// `(L, ‖Φ_L - Φ_ref‖_1)` pairs at the configured `ρ∞`.
pub fn run_truncation(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let rho = cfg.rho_inf.ok_or_else(|| config_error("rho_inf", "truncation-study needs `rho_inf`"))?;
    let t = cfg.truncation.as_ref().ok_or_else(|| config_error("truncation", "truncation-study needs a `truncation` block"))?;
    let problem = cfg
        .reference_problem(cfg.free_charge, rho)
        .ok_or_else(|| config_error("dim", "truncation-study needs dim 1, or dim 3 with a centred free charge"))?;
    truncation_study(problem, &t.l_list, t.l_ref, t.spacing, &newton())
}

/// Planar density fields and angular densities of a three-dimensional run.
#[derive(Debug, Clone)]
pub struct KdeRun {
    pub densities: DensityRun,
    /// Positions of each species pooled over the recorded frames.
    pub samples: [Vec<Point<3>>; 2],
    pub fields: Vec<(KdePlane, Species, Field2d)>,
    /// `(species, bin centres, density)` of the azimuth within [`NEAR_CELL_WIDTH`] of the cell.
    pub angular: Vec<(Species, Vec<f64>, Vec<f64>)>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

pub fn run_kde_planes(cfg: &ExperimentConfig) -> Result<KdeRun> {
    cfg.validate()?;
    if cfg.dim != 3 {
        return Err(config_error("dim", "kde-planes needs dim 3"));
    }
    let (densities, samples) = simulate_dim::<3>(cfg, true)?;
    let l = cfg.outer;
    let g = cfg.kde_grid;
    let jobs: Vec<(KdePlane, Species)> = [KdePlane::XOy, KdePlane::YOz, KdePlane::RPhi]
        .iter()
        .flat_map(|&p| Species::BOTH.map(|s| (p, s)))
        .collect();
    let fields = jobs
        .par_iter()
        .map(|&(plane, s)| {
            let (u, v) = match plane {
                KdePlane::RPhi => (linspace(cfg.inner, l, g), linspace(0.0, 2.0 * PI, g)),
                _ => (linspace(-l, l, g), linspace(-l, l, g)),
            };
            let idx = (s == Species::Minus) as usize;
            Ok((plane, s, planar_kde(&samples[idx], plane, None, &u, &v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let angular = Species::BOTH
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let (c, d) = azimuthal_density(&samples[k], cfg.inner + NEAR_CELL_WIDTH, ANGULAR_BINS);
            (s, c, d)
        })
        .collect();
    Ok(KdeRun { densities, samples, fields, angular })
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn potential_csv(run: &DensityRun) -> Result<Vec<u8>> {
    render(|w| {
        writeln!(w, "x,phi")?;
        for (x, p) in run.centers().iter().zip(&run.potential) {
            match p {
                Some(p) => writeln!(w, "{x},{p}")?,
                None => writeln!(w, "{x},")?,
            }
        }
        Ok(())
    })
}

fn density_files(run: &DensityRun, files: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
    files.push(("density_plus.csv".into(), render(|w| run.plus.write_csv(w))?));
    files.push(("density_minus.csv".into(), render(|w| run.minus.write_csv(w))?));
    files.push(("potential.csv".into(), potential_csv(run)?));
    if let Some(sol) = &run.reference {
        files.push(("reference.csv".into(), render(|w| sol.write_csv(w))?));
    }
    Ok(())
}

fn capacitance_csv(points: &[CapacitancePoint]) -> Result<Vec<u8>> {
    render(|w| {
        writeln!(w, "Q_f,V,C")?;
        for p in points {
            writeln!(w, "{},{},{}", p.free_charge, p.voltage, p.capacitance)?;
        }
        Ok(())
    })
}

fn plane_tag(p: KdePlane) -> &'static str {
    match p {
        KdePlane::XOy => "xoy",
        KdePlane::YOz => "yoz",
        KdePlane::RPhi => "rphi",
    }
}

/// Computes the pipeline's outputs as `(file name, CSV body)` pairs.
pub fn compute_outputs(pipeline: Pipeline, cfg: &ExperimentConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    match pipeline {
        Pipeline::Simulate => density_files(&run_simulate(cfg)?, &mut files)?,
        Pipeline::FdSolve => {
            let sol = run_fd_solve(cfg)?;
            files.push(("fd_solution.csv".into(), render(|w| sol.write_csv(w))?));
        }
        Pipeline::IterateQ => {
            let run = run_iterate_q(cfg)?;
            files.push(("iteration.csv".into(), render(|w| run.state.write_csv(w))?));
            density_files(&run.densities, &mut files)?;
        }
        Pipeline::Capacitance => {
            let run = run_capacitance(cfg)?;
            files.push(("capacitance_fd.csv".into(), capacitance_csv(&run.reference)?));
            if let Some(p) = &run.particle {
                files.push(("capacitance_particle.csv".into(), capacitance_csv(p)?));
            }
            for (qf, state) in cfg.free_charge_grid.iter().zip(&run.iterations) {
                files.push((format!("iteration_qf{qf}.csv"), render(|w| state.write_csv(w))?));
            }
        }
        Pipeline::Convergence => {
            let rows = run_convergence(cfg)?;
            files.push((
                "convergence.csv".into(),
                render(|w| {
                    writeln!(w, "N_plus,species,f_id,rmse")?;
                    for r in &rows {
                        writeln!(w, "{},{},{},{}", r.n_plus, r.species.label(), r.test_function.id(), r.rmse)?;
                    }
                    Ok(())
                })?,
            ));
        }
        Pipeline::TruncationStudy => {
            let rows = run_truncation(cfg)?;
            files.push((
                "truncation.csv".into(),
                render(|w| {
                    writeln!(w, "L,l1_error")?;
                    for (l, e) in &rows {
                        writeln!(w, "{l},{e}")?;
                    }
                    Ok(())
                })?,
            ));
        }
        Pipeline::KdePlanes => {
            let run = run_kde_planes(cfg)?;
            density_files(&run.densities, &mut files)?;
            for (plane, s, field) in &run.fields {
                files.push((format!("kde_{}_{}.csv", plane_tag(*plane), s.label()), render(|w| field.write_csv(w))?));
            }
            for (s, c, d) in &run.angular {
                files.push((
                    format!("angular_{}.csv", s.label()),
                    render(|w| {
                        writeln!(w, "phi,density")?;
                        for (x, y) in c.iter().zip(d) {
                            writeln!(w, "{x},{y}")?;
                        }
                        Ok(())
                    })?,
                ));
            }
        }
    }
    Ok(files)
}

/// Files written so far; removed again unless the run completes.
struct OutputSet {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
}

impl OutputSet {
    fn open(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), created_dir, written: Vec::new() })
    }

    fn write(&mut self, name: &str, header: &str, body: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        f.write_all(header.as_bytes())?;
        f.write_all(body)?;
        f.flush()?;
        Ok(())
    }

    fn discard(self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Runs `pipeline` and writes its CSV outputs and `manifest.json` into
/// `out_dir`. Nothing is left behind on failure.
pub fn run_experiment(pipeline: Pipeline, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let manifest = Manifest::new(pipeline, cfg);
    let hash = manifest.hash();
    let header = format!(
        "# rbm-pb {}\n# pipeline: {}\n# config: {}\n# seed: {}\n# manifest_sha256: {hash}\n",
        manifest.code_version,
        pipeline.name(),
        cfg.name,
        cfg.seed
    );
    let files = compute_outputs(pipeline, cfg)?;
    let mut out = OutputSet::open(out_dir)?;
    let result = (|| {
        for (name, body) in &files {
            out.write(name, &header, body)?;
        }
        let doc = serde_json::json!({ "manifest_sha256": hash, "manifest": manifest });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        out.write("manifest.json", "", text.as_bytes())
    })();
    match result {
        Ok(()) => Ok(out.written.clone()),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}
