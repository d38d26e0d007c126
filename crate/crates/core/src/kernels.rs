//! Coulomb kernels in one, two and three dimensions.
//!
//! `Ψ` is the fundamental solution of `-ν ΔΨ = δ`; the pair force is
//! `F = -∇Ψ`, which is repulsive for like charges.

use crate::error::{ensure_positive, Error, Result};
use crate::geometry::{norm, scale, sub, unit_ball_volume, DomainShape, Point, SimDomain};
use std::f64::consts::PI;

/// Physical parameters of the screened system in nondimensional units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams<const D: usize> {
    /// `(λ_D / L_c)^2`.
    pub nu: f64,
    /// Far-field concentration, when prescribed.
    pub rho_inf: Option<f64>,
    /// Total free charge `Q_f` inside the cell.
    pub free_charge: f64,
    /// Location of the point free charge (ignored in 1D).
    pub free_charge_at: Point<D>,
}

impl<const D: usize> PhysicalParams<D> {
    pub fn new(nu: f64, free_charge: f64) -> Result<Self> {
        ensure_positive("nu", nu)?;
        if !free_charge.is_finite() {
            return Err(Error::InvalidParameter {
                name: "free_charge",
                reason: "must be finite".to_string(),
            });
        }
        Ok(Self {
            nu,
            rho_inf: None,
            free_charge,
            free_charge_at: [0.0; D],
        })
    }

    pub fn with_rho_inf(mut self, rho_inf: f64) -> Result<Self> {
        ensure_positive("rho_inf", rho_inf)?;
        self.rho_inf = Some(rho_inf);
        Ok(self)
    }

    pub fn with_free_charge_at(mut self, x_c: Point<D>) -> Self {
        self.free_charge_at = x_c;
        self
    }

    /// Checks that the free charge sits strictly inside the cell.
    pub fn validate_for(&self, domain: &SimDomain<D>) -> Result<()> {
        if let DomainShape::Shell { inner, .. } = domain.shape() {
            if norm(&self.free_charge_at) >= inner {
                return Err(Error::InvalidParameter {
                    name: "free_charge_at",
                    reason: format!("must lie strictly inside the cell of radius {inner}"),
                });
            }
        }
        Ok(())
    }

    /// Net charge carried by the ions in `Ω_L`: the ions neutralise the
    /// free charge, or half of it in the 1D half-domain.
    pub fn ion_excess_charge(&self, domain: &SimDomain<D>) -> f64 {
        if domain.is_shell() {
            self.free_charge
        } else {
            0.5 * self.free_charge
        }
    }
}

/// `Ψ(x)`.
pub fn coulomb_potential<const D: usize>(nu: f64, x: &Point<D>) -> Result<f64> {
    let r = norm(x);
    match D {
        1 => Ok(-r / (2.0 * nu)),
        2 | 3 if r == 0.0 => Err(Error::Singularity),
        2 => Ok(-r.ln() / (2.0 * PI * nu)),
        3 => Ok(1.0 / (3.0 * unit_ball_volume(3) * nu * r)),
        _ => unreachable!("dimension {D}"),
    }
}

/// `F(x) = -∇Ψ(x)`; `F(0) = 0` in 1D.
pub fn coulomb_force<const D: usize>(nu: f64, x: &Point<D>) -> Result<Point<D>> {
    if D > 1 && x.iter().all(|&v| v == 0.0) {
        return Err(Error::Singularity);
    }
    Ok(coulomb_force_unchecked(nu, x))
}

/// Force without the singularity check, for the particle loops.
#[inline]
pub(crate) fn coulomb_force_unchecked<const D: usize>(nu: f64, x: &Point<D>) -> Point<D> {
    if D == 1 {
        let mut f = [0.0; D];
        f[0] = sign_or_zero(x[0]) / (2.0 * nu);
        return f;
    }
    let r = norm(x);
    let rd = r.powi(D as i32);
    scale(x, 1.0 / (D as f64 * unit_ball_volume(D) * nu * rd))
}

#[inline]
pub(crate) fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Field `E_f` of the free charge acting on the ions.
///
/// In the 1D half domain this is the constant `Q_f / (4ν)`: the point charge
/// at the origin contributes `Q_f/(2ν)` and the mirrored left-half ions,
/// carrying net charge `-Q_f/2`, subtract half of it.
pub fn external_field<const D: usize>(
    params: &PhysicalParams<D>,
    domain: &SimDomain<D>,
    x: &Point<D>,
) -> Result<Point<D>> {
    if params.free_charge == 0.0 {
        return Ok([0.0; D]);
    }
    if !domain.is_shell() {
        let mut e = [0.0; D];
        e[0] = params.free_charge / (4.0 * params.nu);
        return Ok(e);
    }
    let rel = sub(x, &params.free_charge_at);
    let f = coulomb_force(params.nu, &rel)?;
    Ok(scale(&f, params.free_charge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fd_gradient<const D: usize>(nu: f64, x: &Point<D>, h: f64) -> Point<D> {
        std::array::from_fn(|k| {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            (coulomb_potential(nu, &xp).unwrap() - coulomb_potential(nu, &xm).unwrap())
                / (2.0 * h)
        })
    }

    #[test]
    fn potential_examples() {
        assert_relative_eq!(coulomb_potential(1.0, &[3.0]).unwrap(), -1.5);
        assert_relative_eq!(coulomb_potential(1.0, &[1.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(
            coulomb_potential(1.0, &[0.0, 1.0, 0.0]).unwrap(),
            1.0 / (4.0 * PI),
            max_relative = 1e-14
        );
        assert_relative_eq!(coulomb_potential(1.0, &[1.0, 0.0, 0.0]).unwrap(), 0.07958, epsilon = 1e-5);
        assert_eq!(coulomb_potential(1.0, &[0.0, 0.0]), Err(Error::Singularity));
    }

    #[test]
    fn force_examples() {
        assert_eq!(coulomb_force(1.0, &[2.0]).unwrap(), [0.5]);
        assert_eq!(coulomb_force(1.0, &[0.0]).unwrap(), [0.0]);
        let f = coulomb_force(1.0, &[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(f[0], 1.0 / (4.0 * PI), max_relative = 1e-14);
        let f = coulomb_force(1.0, &[2.0, 0.0, 0.0]).unwrap();
        // frozen from central differences of Ψ with h = 1e-5
        let g = fd_gradient(1.0, &[2.0, 0.0, 0.0], 1e-5);
        assert_relative_eq!(f[0], -g[0], max_relative = 1e-8);
        assert_relative_eq!(f[0], 0.01989, epsilon = 1e-5);
        assert_eq!(coulomb_force(1.0, &[0.0; 3]), Err(Error::Singularity));
    }

    #[test]
    fn external_field_examples() {
        let line = SimDomain::interval(1.0, 15.0).unwrap();
        let p1 = PhysicalParams::<1>::new(1.0, 2.0).unwrap();
        assert_eq!(external_field(&p1, &line, &[5.0]).unwrap(), [0.5]);

        let shell = SimDomain::<3>::new(DomainShape::Shell { inner: 1.0, outer: 10.0 }).unwrap();
        let p3 = PhysicalParams::<3>::new(1.0, 10.0).unwrap();
        let e = external_field(&p3, &shell, &[2.0, 0.0, 0.0]).unwrap();
        let g = fd_gradient(1.0, &[2.0, 0.0, 0.0], 1e-5);
        assert_relative_eq!(e[0], -10.0 * g[0], max_relative = 1e-8);
        assert_relative_eq!(e[0], 0.1989, epsilon = 1e-4);

        let p0 = PhysicalParams::<3>::new(1.0, 0.0).unwrap();
        assert_eq!(external_field(&p0, &shell, &[3.0, 1.0, 0.0]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn free_charge_must_be_inside_cell() {
        let shell = SimDomain::<3>::new(DomainShape::Shell { inner: 2.0, outer: 10.0 }).unwrap();
        let p = PhysicalParams::<3>::new(1.0, 15.0).unwrap();
        assert!(p.with_free_charge_at([0.0, 1.5, 0.0]).validate_for(&shell).is_ok());
        assert!(p.with_free_charge_at([0.0, 2.5, 0.0]).validate_for(&shell).is_err());
        assert!(PhysicalParams::<1>::new(0.0, 1.0).is_err());
    }

    fn check_gradient<const D: usize>(x: Point<D>, nu: f64) -> std::result::Result<(), TestCaseError> {
        let r = norm(&x);
        prop_assume!((0.5..=20.0).contains(&r));
        let f = coulomb_force(nu, &x).unwrap();
        let g = fd_gradient(nu, &x, 1e-5 * r);
        let fnorm = norm(&f);
        for k in 0..D {
            prop_assert!((f[k] + g[k]).abs() <= 1e-6 * fnorm, "{:?} vs {:?}", f, g);
        }
        let neg = coulomb_force(nu, &scale(&x, -1.0)).unwrap();
        for k in 0..D {
            prop_assert_eq!(neg[k], -f[k]);
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn force_is_minus_gradient_1d(x in prop_oneof![-20.0f64..-0.5, 0.5f64..20.0], nu in 0.01f64..2.0) {
            check_gradient([x], nu)?;
        }

        #[test]
        fn force_is_minus_gradient_2d(x in -20.0f64..20.0, y in -20.0f64..20.0, nu in 0.01f64..2.0) {
            check_gradient([x, y], nu)?;
        }

        #[test]
        fn force_is_minus_gradient_3d(x in -12.0f64..12.0, y in -12.0f64..12.0, z in -12.0f64..12.0, nu in 0.01f64..2.0) {
            check_gradient([x, y, z], nu)?;
        }
    }
}
