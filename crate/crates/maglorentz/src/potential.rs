//! Radial obstacle potentials and their scaling.
//!
//! Three families:
//! - `HardDisk`: specular reflection, no interior dynamics.
//! - `SmoothCompact`: a C^2 repulsive profile phi supported on [0,1],
//!   entering the dynamics as eps^alpha * phi(d / eps) at physical distance d.
//! - `TruncatedPower`: r^{-s} cut off (and shifted to zero) at the hat-frame
//!   radius A = eps^{gamma-1}; physical support radius eps^gamma.
//!
//! Scattering and collision-time quadratures work in the "hat" frame where
//! lengths are measured in units of eps: there the smooth obstacle has unit
//! radius and potential eps^alpha * phi(r), the truncated one has radius A
//! and potential r^{-s} - A^{-s}, and the magnetic frequency is eps*B. A
//! hat-frame traversal time tau corresponds to physical time eps*tau.

use std::fmt;
use std::sync::Arc;

pub type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A radial profile with two derivatives, defined on [0, 1] and zero beyond.
#[derive(Clone)]
pub struct RadialProfile {
    pub name: String,
    phi: RadialFn,
    dphi: RadialFn,
    d2phi: RadialFn,
}

impl fmt::Debug for RadialProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RadialProfile({})", self.name)
    }
}

impl RadialProfile {
    pub fn new(name: impl Into<String>, phi: RadialFn, dphi: RadialFn, d2phi: RadialFn) -> Self {
        RadialProfile { name: name.into(), phi, dphi, d2phi }
    }

    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        if r >= 1.0 {
            0.0
        } else {
            (self.phi)(r)
        }
    }

    #[inline]
    pub fn dphi(&self, r: f64) -> f64 {
        if r >= 1.0 {
            0.0
        } else {
            (self.dphi)(r)
        }
    }

    #[inline]
    pub fn d2phi(&self, r: f64) -> f64 {
        if r >= 1.0 {
            0.0
        } else {
            (self.d2phi)(r)
        }
    }

    /// The reference profile (1 - r^2)^3: C^2 across the support edge,
    /// nonnegative and nonincreasing on [0, 1].
    pub fn poly_cubed() -> Self {
        RadialProfile::new(
            "poly_cubed",
            Arc::new(|r: f64| {
                let w = 1.0 - r * r;
                w * w * w
            }),
            Arc::new(|r: f64| {
                let w = 1.0 - r * r;
                -6.0 * r * w * w
            }),
            Arc::new(|r: f64| {
                let w = 1.0 - r * r;
                w * (30.0 * r * r - 6.0)
            }),
        )
    }

    /// Steep exponential wall approximating a hard disk: phi(r) = e^{k(1-r)} - 1.
    /// As k grows the turning point pins to r = 1 - O(1/k) and scattering
    /// approaches specular reflection. The exponent is clamped so phi stays a
    /// finite (astronomically large) barrier deep inside the core instead of
    /// overflowing; quadratures never sample past the turning point anyway.
    pub fn mollified_disk(steepness: f64) -> Self {
        let k = steepness;
        RadialProfile::new(
            format!("mollified_disk(k={k})"),
            Arc::new(move |r: f64| (k * (1.0 - r)).min(700.0).exp_m1()),
            Arc::new(move |r: f64| -k * (k * (1.0 - r)).min(700.0).exp()),
            Arc::new(move |r: f64| k * k * (k * (1.0 - r)).min(700.0).exp()),
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PotentialError {
    #[error("alpha = {0} outside (0, 1/8)")]
    BadAlpha(f64),
    #[error("eps = {0} must be in (0, 1)")]
    BadEps(f64),
    #[error("power-law exponent s = {0} must exceed 2")]
    BadExponent(f64),
    #[error("truncation exponent gamma = {0} outside (0, 1)")]
    BadGamma(f64),
    #[error("profile violates repulsivity at r = {r}: phi = {phi}, phi' = {dphi}")]
    BadProfile { r: f64, phi: f64, dphi: f64 },
}

/// Which potential, with scale parameters. Constructed through the checked
/// builders; parameter domains are validated once here.
#[derive(Debug, Clone)]
pub enum PotentialSpec {
    HardDisk {
        eps: f64,
    },
    SmoothCompact {
        eps: f64,
        alpha: f64,
        profile: RadialProfile,
    },
    TruncatedPower {
        eps: f64,
        s: f64,
        gamma: f64,
    },
}

impl PotentialSpec {
    pub fn hard_disk(eps: f64) -> Result<Self, PotentialError> {
        check_eps(eps)?;
        Ok(PotentialSpec::HardDisk { eps })
    }

    /// Smooth compact potential with the reference profile (1 - r^2)^3.
    pub fn smooth_compact(eps: f64, alpha: f64) -> Result<Self, PotentialError> {
        Self::smooth_compact_with_profile(eps, alpha, RadialProfile::poly_cubed())
    }

    pub fn smooth_compact_with_profile(
        eps: f64,
        alpha: f64,
        profile: RadialProfile,
    ) -> Result<Self, PotentialError> {
        check_eps(eps)?;
        if !(alpha > 0.0 && alpha < 0.125) {
            return Err(PotentialError::BadAlpha(alpha));
        }
        // repulsivity sampled on a grid: phi >= 0, phi' <= 0 on (0,1), zero beyond
        const N: usize = 1024;
        for i in 0..=N {
            let r = i as f64 / N as f64;
            let (p, dp) = (profile.phi(r), profile.dphi(r));
            if p < 0.0 || dp > 1e-12 {
                return Err(PotentialError::BadProfile { r, phi: p, dphi: dp });
            }
        }
        for r in [1.0, 1.5, 7.0] {
            let p = profile.phi(r);
            if p != 0.0 {
                return Err(PotentialError::BadProfile { r, phi: p, dphi: profile.dphi(r) });
            }
        }
        Ok(PotentialSpec::SmoothCompact { eps, alpha, profile })
    }

    pub fn truncated_power(eps: f64, s: f64, gamma: f64) -> Result<Self, PotentialError> {
        check_eps(eps)?;
        if !(s > 2.0) {
            return Err(PotentialError::BadExponent(s));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(PotentialError::BadGamma(gamma));
        }
        Ok(PotentialSpec::TruncatedPower { eps, s, gamma })
    }

    pub fn eps(&self) -> f64 {
        match self {
            PotentialSpec::HardDisk { eps }
            | PotentialSpec::SmoothCompact { eps, .. }
            | PotentialSpec::TruncatedPower { eps, .. } => *eps,
        }
    }

    /// Physical support radius: eps for hard disks and smooth compact
    /// potentials, eps^gamma for the truncated power law.
    pub fn support_radius(&self) -> f64 {
        match self {
            PotentialSpec::HardDisk { eps } => *eps,
            PotentialSpec::SmoothCompact { eps, .. } => *eps,
            PotentialSpec::TruncatedPower { eps, gamma, .. } => eps.powf(*gamma),
        }
    }

    pub fn is_hard_disk(&self) -> bool {
        matches!(self, PotentialSpec::HardDisk { .. })
    }

    /// Hat-frame view used by the scattering quadratures, or None for hard disks.
    pub fn prepared(&self) -> Option<PreparedPotential> {
        match self {
            PotentialSpec::HardDisk { .. } => None,
            PotentialSpec::SmoothCompact { eps, alpha, profile } => {
                let lambda = eps.powf(*alpha);
                let p = profile.clone();
                let p2 = profile.clone();
                let p3 = profile.clone();
                Some(PreparedPotential {
                    r0: 1.0,
                    eps: *eps,
                    u: Arc::new(move |r| lambda * p.phi(r)),
                    du: Arc::new(move |r| lambda * p2.dphi(r)),
                    d2u: Arc::new(move |r| lambda * p3.d2phi(r)),
                })
            }
            PotentialSpec::TruncatedPower { eps, s, gamma } => {
                let a = eps.powf(gamma - 1.0);
                let s = *s;
                let shift = a.powf(-s);
                Some(PreparedPotential {
                    r0: a,
                    eps: *eps,
                    u: Arc::new(move |r| if r >= a { 0.0 } else { r.powf(-s) - shift }),
                    du: Arc::new(move |r| if r >= a { 0.0 } else { -s * r.powf(-s - 1.0) }),
                    d2u: Arc::new(move |r| {
                        if r >= a {
                            0.0
                        } else {
                            s * (s + 1.0) * r.powf(-s - 2.0)
                        }
                    }),
                })
            }
        }
    }
}

fn check_eps(eps: f64) -> Result<(), PotentialError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(PotentialError::BadEps(eps));
    }
    Ok(())
}

/// Hat-frame potential data: support radius `r0`, potential `u(r)` with
/// u(r0) = 0, and its radial derivatives. Physical distance d maps to hat
/// radius r = d / eps; a hat-frame time tau is physical time eps * tau.
#[derive(Clone)]
pub struct PreparedPotential {
    pub r0: f64,
    pub eps: f64,
    pub u: RadialFn,
    pub du: RadialFn,
    pub d2u: RadialFn,
}

impl PreparedPotential {
    #[inline]
    pub fn u(&self, r: f64) -> f64 {
        (self.u)(r)
    }
    #[inline]
    pub fn du(&self, r: f64) -> f64 {
        (self.du)(r)
    }
    #[inline]
    pub fn d2u(&self, r: f64) -> f64 {
        (self.d2u)(r)
    }

    /// Physical potential at distance d from the obstacle center.
    #[inline]
    pub fn u_physical(&self, d: f64) -> f64 {
        self.u(d / self.eps)
    }

    /// Radial derivative of the physical potential at distance d.
    #[inline]
    pub fn du_physical(&self, d: f64) -> f64 {
        self.du(d / self.eps) / self.eps
    }
}

impl fmt::Debug for PreparedPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PreparedPotential(r0={}, eps={})", self.r0, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builders_enforce_domains() {
        assert!(PotentialSpec::smooth_compact(1e-3, 0.0).is_err());
        assert!(PotentialSpec::smooth_compact(1e-3, 0.125).is_err());
        assert!(PotentialSpec::smooth_compact(1e-3, 0.1).is_ok());
        assert!(PotentialSpec::smooth_compact(0.0, 0.1).is_err());
        assert!(PotentialSpec::truncated_power(1e-3, 2.0, 0.9).is_err());
        assert!(PotentialSpec::truncated_power(1e-3, 3.0, 1.0).is_err());
        assert!(PotentialSpec::truncated_power(1e-3, 3.0, 0.9).is_ok());
    }

    #[test]
    fn attractive_profile_rejected() {
        let bad = RadialProfile::new(
            "increasing",
            Arc::new(|r: f64| r * (1.0 - r)),
            Arc::new(|r: f64| 1.0 - 2.0 * r),
            Arc::new(|_| -2.0),
        );
        assert!(PotentialSpec::smooth_compact_with_profile(1e-3, 0.1, bad).is_err());
    }

    #[test]
    fn poly_cubed_derivatives_match_finite_differences() {
        let p = RadialProfile::poly_cubed();
        let h = 1e-6;
        for &r in &[0.1, 0.3, 0.55, 0.9, 0.99] {
            let fd1 = (p.phi(r + h) - p.phi(r - h)) / (2.0 * h);
            assert_abs_diff_eq!(fd1, p.dphi(r), epsilon = 1e-8);
            let fd2 = (p.dphi(r + h) - p.dphi(r - h)) / (2.0 * h);
            assert_abs_diff_eq!(fd2, p.d2phi(r), epsilon = 1e-6);
        }
    }

    #[test]
    fn prepared_smooth_scales_with_eps_alpha() {
        let eps = 1e-3;
        let alpha = 0.1;
        let spec = PotentialSpec::smooth_compact(eps, alpha).unwrap();
        let prep = spec.prepared().unwrap();
        assert_abs_diff_eq!(prep.u(0.0), eps.powf(alpha), epsilon = 1e-15);
        assert_eq!(prep.u(1.0), 0.0);
        assert_eq!(prep.r0, 1.0);
        // physical view agrees with hat view at matching radii
        let d = 0.4 * eps;
        assert_abs_diff_eq!(prep.u_physical(d), prep.u(0.4), epsilon = 1e-15);
    }

    #[test]
    fn prepared_truncated_vanishes_at_support_edge() {
        let spec = PotentialSpec::truncated_power(1e-2, 3.0, 0.9).unwrap();
        let prep = spec.prepared().unwrap();
        let a = 1e-2f64.powf(-0.1);
        assert_abs_diff_eq!(prep.r0, a, epsilon = 1e-14);
        assert_abs_diff_eq!(prep.u(a * (1.0 - 1e-12)), 0.0, epsilon = 1e-9);
        assert_eq!(prep.u(a), 0.0);
        assert!(prep.u(0.5 * a) > 0.0);
        // physical support radius is eps^gamma
        assert_abs_diff_eq!(spec.support_radius(), 1e-2f64.powf(0.9), epsilon = 1e-16);
    }

    #[test]
    fn mollified_disk_is_steep_and_repulsive() {
        let p = RadialProfile::mollified_disk(1e4);
        assert!(p.phi(0.999) > 1e3);
        assert!(p.phi(1.0) == 0.0);
        assert!(p.dphi(0.5) < 0.0);
        // clamped deep in the core: huge but finite
        assert!(p.phi(0.0).is_finite());
        assert!(p.phi(0.0) > 1e300);
    }
}
