//! Quenched Poisson scatterer environments, generated lazily cell-by-cell.
//!
//! Every cell's content is a pure function of (medium seed, cell index):
//! a per-cell ChaCha stream drives a Poisson count and uniform positions.
//! Visitation order and thread interleaving therefore cannot change the
//! sample, and backward/forward replays see identical disorder.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use crate::dynamics::{FieldParams, Obstacle};
use crate::potential::{PotentialSpec, RadialProfile};
use crate::vec2::Vec2;

#[derive(Debug, Clone)]
pub enum RegimeKind {
    WeakCoupling { alpha: f64 },
    Intermediate { alpha: f64 },
    BoltzmannGrad,
    LongRangeTruncated { gamma: f64, s: f64 },
}

#[derive(Debug, thiserror::Error)]
pub enum RegimeError {
    #[error("alpha = {0} outside (0, 1/8)")]
    BadAlpha(f64),
    #[error("gamma = {0} outside (6/7, 1)")]
    BadGamma(f64),
    #[error("power-law exponent s = {0} must exceed 2")]
    BadExponent(f64),
    #[error("eps = {0} must be in (0, 1)")]
    BadEps(f64),
    #[error("intensity mu = {0} must be nonnegative")]
    BadMu(f64),
}

/// A scaling regime: base intensity mu, scale eps, and the regime-dependent
/// derived quantities (effective intensity, obstacle radius, potential).
#[derive(Debug, Clone)]
pub struct ScalingRegime {
    pub kind: RegimeKind,
    pub mu: f64,
    pub eps: f64,
    profile: Option<RadialProfile>,
}

impl ScalingRegime {
    pub fn new(kind: RegimeKind, mu: f64, eps: f64) -> Result<Self, RegimeError> {
        if !(mu >= 0.0) {
            return Err(RegimeError::BadMu(mu));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(RegimeError::BadEps(eps));
        }
        match kind {
            RegimeKind::WeakCoupling { alpha } | RegimeKind::Intermediate { alpha } => {
                if !(alpha > 0.0 && alpha < 0.125) {
                    return Err(RegimeError::BadAlpha(alpha));
                }
            }
            RegimeKind::LongRangeTruncated { gamma, s } => {
                if !(gamma > 6.0 / 7.0 && gamma < 1.0) {
                    return Err(RegimeError::BadGamma(gamma));
                }
                if !(s > 2.0) {
                    return Err(RegimeError::BadExponent(s));
                }
            }
            RegimeKind::BoltzmannGrad => {}
        }
        Ok(ScalingRegime { kind, mu, eps, profile: None })
    }

    /// Override the smooth radial profile (reference profile otherwise).
    pub fn with_profile(mut self, profile: RadialProfile) -> Self {
        self.profile = Some(profile);
        self
    }

    /// Same regime at a different eps (profile carried over).
    pub fn with_eps(&self, eps: f64) -> Result<Self, RegimeError> {
        let mut r = ScalingRegime::new(self.kind.clone(), self.mu, eps)?;
        r.profile = self.profile.clone();
        Ok(r)
    }

    /// Effective obstacle intensity: mu * eps^{-(1+2alpha)} in the
    /// weak-coupling/intermediate regimes, mu / eps in the low-density ones.
    pub fn mu_eps(&self) -> f64 {
        match self.kind {
            RegimeKind::WeakCoupling { alpha } | RegimeKind::Intermediate { alpha } => {
                self.mu * self.eps.powf(-(1.0 + 2.0 * alpha))
            }
            RegimeKind::BoltzmannGrad | RegimeKind::LongRangeTruncated { .. } => self.mu / self.eps,
        }
    }

    /// Physical support radius of one obstacle.
    pub fn obstacle_radius(&self) -> f64 {
        match self.kind {
            RegimeKind::LongRangeTruncated { gamma, .. } => self.eps.powf(gamma),
            _ => self.eps,
        }
    }

    /// The potential this regime scatters with.
    pub fn potential(&self) -> PotentialSpec {
        match &self.kind {
            RegimeKind::WeakCoupling { alpha } | RegimeKind::Intermediate { alpha } => {
                match &self.profile {
                    Some(p) => {
                        PotentialSpec::smooth_compact_with_profile(self.eps, *alpha, p.clone()).unwrap()
                    }
                    None => PotentialSpec::smooth_compact(self.eps, *alpha).unwrap(),
                }
            }
            RegimeKind::BoltzmannGrad => PotentialSpec::hard_disk(self.eps).unwrap(),
            RegimeKind::LongRangeTruncated { gamma, s } => {
                PotentialSpec::truncated_power(self.eps, *s, *gamma).unwrap()
            }
        }
    }
}

/// Lazily generated Poisson medium. Cheap to clone (shared cell cache).
#[derive(Clone)]
pub struct MediumSample {
    inner: Arc<MediumInner>,
}

struct MediumInner {
    seed: u64,
    regime: ScalingRegime,
    cell_size: f64,
    mu_eps: f64,
    radius: f64,
    cells: RwLock<HashMap<(i64, i64), Arc<Vec<Obstacle>>>>,
}

/// Salt mixed into per-cell keys so different key uses of the same seed
/// cannot collide.
const CELL_SALT: u64 = 0x9e3779b97f4a7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl MediumSample {
    /// Cell size defaults to max(4 * obstacle radius, R_L / 8); with an
    /// infinite Larmor radius (zero-field reference runs) the R_L term is
    /// replaced by 1.
    pub fn new(seed: u64, regime: ScalingRegime, field: &FieldParams) -> Self {
        let radius = regime.obstacle_radius();
        let geom = if field.r_l.is_finite() { field.r_l / 8.0 } else { 1.0 };
        let cell_size = (4.0 * radius).max(geom);
        Self::with_cell_size(seed, regime, cell_size)
    }

    pub fn with_cell_size(seed: u64, regime: ScalingRegime, cell_size: f64) -> Self {
        assert!(cell_size > 0.0);
        let mu_eps = regime.mu_eps();
        let radius = regime.obstacle_radius();
        MediumSample {
            inner: Arc::new(MediumInner {
                seed,
                regime,
                cell_size,
                mu_eps,
                radius,
                cells: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    pub fn regime(&self) -> &ScalingRegime {
        &self.inner.regime
    }

    pub fn cell_size(&self) -> f64 {
        self.inner.cell_size
    }

    pub fn obstacle_radius(&self) -> f64 {
        self.inner.radius
    }

    pub fn mu_eps(&self) -> f64 {
        self.inner.mu_eps
    }

    fn cell_of(&self, p: Vec2) -> (i64, i64) {
        (
            (p.x / self.inner.cell_size).floor() as i64,
            (p.y / self.inner.cell_size).floor() as i64,
        )
    }

    /// The obstacles of one cell, materializing it on first touch.
    pub fn cell(&self, ci: i64, cj: i64) -> Arc<Vec<Obstacle>> {
        {
            let cells = self.inner.cells.read().unwrap();
            if let Some(v) = cells.get(&(ci, cj)) {
                return v.clone();
            }
        }
        let fresh = Arc::new(self.generate_cell(ci, cj));
        let mut cells = self.inner.cells.write().unwrap();
        // once-per-cell publication: under contention the first insert wins
        // (identical content either way, since generation is seed-pure)
        cells.entry((ci, cj)).or_insert(fresh).clone()
    }

    fn generate_cell(&self, ci: i64, cj: i64) -> Vec<Obstacle> {
        let inner = &*self.inner;
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&inner.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(ci as u64).to_le_bytes());
        key[16..24].copy_from_slice(&(cj as u64).to_le_bytes());
        key[24..32].copy_from_slice(&CELL_SALT.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let lambda = inner.mu_eps * inner.cell_size * inner.cell_size;
        let count = if lambda <= 0.0 {
            0
        } else {
            Poisson::new(lambda).unwrap().sample(&mut rng) as u64
        };
        let x0 = ci as f64 * inner.cell_size;
        let y0 = cj as f64 * inner.cell_size;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let cx = x0 + rng.gen::<f64>() * inner.cell_size;
            let cy = y0 + rng.gen::<f64>() * inner.cell_size;
            let id = splitmix64(cx.to_bits() ^ cy.to_bits().rotate_left(32) ^ inner.seed);
            out.push(Obstacle::new(Vec2::new(cx, cy), inner.radius).with_id(id));
        }
        out
    }

    /// All obstacles whose support intersects the disk of `radius` about
    /// `point`. Locality bound: radius <= 64 cell sizes.
    pub fn obstacles_near(&self, point: Vec2, radius: f64) -> Vec<Obstacle> {
        assert!(radius <= 64.0 * self.inner.cell_size, "query radius exceeds locality bound");
        let reach = radius + self.inner.radius;
        let (i0, j0) = self.cell_of(point - Vec2::new(reach, reach));
        let (i1, j1) = self.cell_of(point + Vec2::new(reach, reach));
        let mut out = Vec::new();
        for ci in i0..=i1 {
            for cj in j0..=j1 {
                for ob in self.cell(ci, cj).iter() {
                    if ob.c.dist(point) <= reach {
                        out.push(*ob);
                    }
                }
            }
        }
        out
    }

    /// Count of obstacle centers in an axis-aligned box (test helper and
    /// thinning checks).
    pub fn count_in_box(&self, lo: Vec2, hi: Vec2) -> usize {
        let (i0, j0) = self.cell_of(lo);
        let (i1, j1) = self.cell_of(hi);
        let mut n = 0;
        for ci in i0..=i1 {
            for cj in j0..=j1 {
                for ob in self.cell(ci, cj).iter() {
                    if ob.c.x >= lo.x && ob.c.x < hi.x && ob.c.y >= lo.y && ob.c.y < hi.y {
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

/// Monte Carlo estimate of the probability that the tracer's full Larmor
/// orbit survives: no obstacle center falls in the annulus
/// |dist(c, x_c) - R_L| < radius/2 around the orbit circle. That band has
/// area exactly 2 pi R_L * radius, so for a Poisson medium the closed-form
/// survival probability is e^{-2 pi R_L mu_eps radius}: e^{-2 pi R_L mu}
/// for hard disks at low density, e^{-2 pi R_L mu eps^{-2 alpha}} in the
/// weak-coupling regimes, e^{-2 pi R_L mu eps^{gamma - 1}} for the
/// truncated power law. The estimator exists to validate the medium
/// machinery against those identities.
pub fn survival_probability_full_orbit(
    regime: &ScalingRegime,
    field: &FieldParams,
    n_samples: u64,
    seed: u64,
) -> (f64, f64) {
    assert!(n_samples >= 1_000, "need at least 1e3 samples");
    assert!(field.r_l.is_finite());
    use rayon::prelude::*;
    let r_l = field.r_l;
    let half_width = regime.obstacle_radius() / 2.0;
    let survivors: u64 = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let medium = MediumSample::new(splitmix64(seed ^ splitmix64(k)), regime.clone(), field);
            let xc = Vec2::ZERO; // orbit center; Poisson law is translation invariant
            if orbit_annulus_empty(&medium, xc, r_l, half_width) {
                1u64
            } else {
                0u64
            }
        })
        .sum();
    let p = survivors as f64 / n_samples as f64;
    let se = (p * (1.0 - p) / n_samples as f64).sqrt();
    (p, se)
}

/// True when no obstacle center satisfies |dist(c, xc) - r_l| < half_width.
fn orbit_annulus_empty(medium: &MediumSample, xc: Vec2, r_l: f64, half_width: f64) -> bool {
    let cs = medium.cell_size();
    let outer = r_l + half_width;
    let (i0, j0) = medium.cell_of(xc - Vec2::new(outer, outer));
    let (i1, j1) = medium.cell_of(xc + Vec2::new(outer, outer));
    let diag = cs * std::f64::consts::SQRT_2 / 2.0;
    for ci in i0..=i1 {
        for cj in j0..=j1 {
            // cell-center distance prefilter against the ring band
            let center = Vec2::new((ci as f64 + 0.5) * cs, (cj as f64 + 0.5) * cs);
            let d = center.dist(xc);
            if d + diag < r_l - half_width || d - diag > r_l + half_width {
                continue;
            }
            for ob in medium.cell(ci, cj).iter() {
                if (ob.c.dist(xc) - r_l).abs() < half_width {
                    return false;
                }
            }
        }
    }
    true
}
