//! Truncated simulation domains.
//!
//! Two shapes are supported: the half interval `(a, L)` used for the planar
//! 1D problem, and the spherical shell `R <= |x| <= L` around a cell centred
//! at the origin for `d = 2, 3`. The outer wall is the artificial truncation
//! boundary; the inner one is the membrane.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A point (or vector) in `D` dimensions.
pub type Point<const D: usize> = [f64; D];

/// Tolerance for boundary membership, in nondimensional length units.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => PI,
        3 => 4.0 * PI / 3.0,
        _ => panic!("unsupported dimension {d}"),
    }
}

#[inline]
pub fn norm<const D: usize>(x: &Point<D>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn sub<const D: usize>(a: &Point<D>, b: &Point<D>) -> Point<D> {
    std::array::from_fn(|k| a[k] - b[k])
}

#[inline]
pub fn add<const D: usize>(a: &Point<D>, b: &Point<D>) -> Point<D> {
    std::array::from_fn(|k| a[k] + b[k])
}

#[inline]
pub fn scale<const D: usize>(a: &Point<D>, s: f64) -> Point<D> {
    std::array::from_fn(|k| a[k] * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainShape {
    /// Half domain `(a, l)` on the line.
    Interval { a: f64, l: f64 },
    /// `{x : inner <= |x| <= outer}`.
    Shell { inner: f64, outer: f64 },
}

/// The truncated region in which particles move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimDomain<const D: usize> {
    shape: DomainShape,
}

impl SimDomain<1> {
    pub fn interval(a: f64, l: f64) -> Result<Self> {
        Self::new(DomainShape::Interval { a, l })
    }
}

impl<const D: usize> SimDomain<D> {
    pub fn new(shape: DomainShape) -> Result<Self> {
        if !(1..=3).contains(&D) {
            return Err(Error::InvalidDomain(format!("dimension {D} not supported")));
        }
        match shape {
            DomainShape::Interval { a, l } => {
                if D != 1 {
                    return Err(Error::InvalidDomain(
                        "interval mode requires d = 1".to_string(),
                    ));
                }
                if !(a.is_finite() && l.is_finite() && 0.0 < a && a < l) {
                    return Err(Error::InvalidDomain(format!(
                        "interval needs 0 < a < L, got a = {a}, L = {l}"
                    )));
                }
            }
            DomainShape::Shell { inner, outer } => {
                if D < 2 {
                    return Err(Error::InvalidDomain("shell mode requires d >= 2".to_string()));
                }
                if !(inner.is_finite() && outer.is_finite() && 0.0 < inner && inner < outer) {
                    return Err(Error::InvalidDomain(format!(
                        "shell needs 0 < R < L, got R = {inner}, L = {outer}"
                    )));
                }
            }
        }
        Ok(Self { shape })
    }

    pub fn shape(&self) -> DomainShape {
        self.shape
    }

    /// Inner (membrane) and outer (artificial wall) radius or coordinate.
    pub fn bounds(&self) -> (f64, f64) {
        match self.shape {
            DomainShape::Interval { a, l } => (a, l),
            DomainShape::Shell { inner, outer } => (inner, outer),
        }
    }

    pub fn is_shell(&self) -> bool {
        matches!(self.shape, DomainShape::Shell { .. })
    }

    /// Coordinate used for radial statistics: `x` in 1D, `|x|` otherwise.
    #[inline]
    pub fn radial_coordinate(&self, x: &Point<D>) -> f64 {
        match self.shape {
            DomainShape::Interval { .. } => x[0],
            DomainShape::Shell { .. } => norm(x),
        }
    }

    /// Closed-domain membership, with [`BOUNDARY_TOL`] slack.
    #[inline]
    pub fn contains(&self, x: &Point<D>) -> bool {
        let (lo, hi) = self.bounds();
        let r = self.radial_coordinate(x);
        r >= lo - BOUNDARY_TOL && r <= hi + BOUNDARY_TOL
    }

    /// Distance from `x` to the closed domain (zero inside).
    pub fn exterior_distance(&self, x: &Point<D>) -> f64 {
        let (lo, hi) = self.bounds();
        let r = self.radial_coordinate(x);
        (lo - r).max(r - hi).max(0.0)
    }

    /// Nearest boundary point for an exterior `x`; interior points come back unchanged.
    ///
    /// A point at the exact centre of a shell has no preferred direction and
    /// is pushed out along the first coordinate axis.
    pub fn project_to_boundary(&self, x: &Point<D>) -> Point<D> {
        match self.shape {
            DomainShape::Interval { a, l } => {
                let mut out = *x;
                out[0] = x[0].clamp(a, l);
                out
            }
            DomainShape::Shell { inner, outer } => {
                let r = norm(x);
                let target = if r < inner {
                    inner
                } else if r > outer {
                    outer
                } else {
                    return *x;
                };
                if r == 0.0 {
                    let mut out = [0.0; D];
                    out[0] = target;
                    out
                } else {
                    scale(x, target / r)
                }
            }
        }
    }

    /// Outward unit normal of `Ω_L` at a boundary point.
    ///
    /// On the membrane it points into the cell, on the artificial wall away
    /// from the origin.
    pub fn outward_normal(&self, x: &Point<D>) -> Result<Point<D>> {
        let (lo, hi) = self.bounds();
        let r = self.radial_coordinate(x);
        let sign = if (r - lo).abs() <= BOUNDARY_TOL {
            -1.0
        } else if (r - hi).abs() <= BOUNDARY_TOL {
            1.0
        } else {
            return Err(Error::NotOnBoundary {
                distance: (r - lo).abs().min((r - hi).abs()),
            });
        };
        Ok(match self.shape {
            DomainShape::Interval { .. } => {
                let mut n = [0.0; D];
                n[0] = sign;
                n
            }
            DomainShape::Shell { .. } => scale(x, sign / r),
        })
    }

    /// `|Ω_L|`.
    pub fn volume(&self) -> f64 {
        match self.shape {
            DomainShape::Interval { a, l } => l - a,
            DomainShape::Shell { inner, outer } => {
                let d = D as i32;
                unit_ball_volume(D) * (outer.powi(d) - inner.powi(d))
            }
        }
    }
}
