//! Kinetic solvers on the velocity circle: spectral collision kernels for the
//! limit equations, exact-characteristic transport, memory-kernel stepping,
//! and a direct simulation sampler.
//!
//! Every collision operator handled here is a convolution in the velocity
//! angle, so fields are stored on an equispaced angular grid and collisions
//! act as Fourier multipliers. Transport is semi-Lagrangian along the exact
//! cyclotron characteristics: spectral (hence exact) in angle, bilinear in
//! space. The only discretization error of the split solver is the splitting
//! itself plus spatial interpolation; in homogeneous mode both vanish.

use crate::dynamics::FieldParams;
use crate::microsim::derive_seed;
use crate::quad::integrate;
use crate::scattering::{AngleSampler, ScatteringError, ScatteringTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::{PI, TAU};
use std::io::{self, Write};
use std::sync::Arc;
use thiserror::Error;

type C64 = Complex<f64>;

/// Negative values above this floor are treated as spectral ringing and
/// clipped to zero after each step; anything below is left in place and
/// reported (the solver aborts below [`NEGATIVITY_ABORT`]).
const NEGATIVITY_CLIP: f64 = -1e-12;
/// Instability monitor threshold for `solve`.
const NEGATIVITY_ABORT: f64 = -1e-6;
/// Relative mass-drift budget for a full `solve`.
const MASS_DRIFT_ABORT: f64 = 1e-9;
/// Cap on expected jumps per sample path; larger rates are a setup error.
const MAX_EXPECTED_JUMPS: f64 = 1e6;

#[derive(Debug, Error)]
pub enum KineticError {
    #[error("operation requires a spatially homogeneous field")]
    NotHomogeneous,
    #[error("angular grid size {nphi} invalid: must be a power of two >= 4")]
    BadGrid { nphi: usize },
    #[error("bad time step: {detail}")]
    BadTimeStep { detail: String },
    #[error("memory lag {lag} periods not present in history (no extrapolation)")]
    MissingLag { lag: usize },
    #[error("mass drift {drift:.3e} at step {step} (t = {t:.6}) exceeds budget")]
    MassDrift { step: usize, t: f64, drift: f64 },
    #[error("density reached {min:.3e} at step {step} (t = {t:.6}); solver unstable")]
    NegativeDensity { step: usize, t: f64, min: f64 },
    #[error("kernel {kernel} does not support {op}")]
    UnsupportedKernel { kernel: &'static str, op: &'static str },
    #[error("jump rate {rate:.3e} over t_end {t_end:.3} exceeds the per-path budget; raise theta_min or shorten the run")]
    RateOverflow { rate: f64, t_end: f64 },
    #[error(transparent)]
    Scattering(#[from] ScatteringError),
}

// ---------------------------------------------------------------------------
// angular fields
// ---------------------------------------------------------------------------

/// What happens when a transport characteristic leaves the spatial box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryPolicy {
    Periodic,
    Absorbing,
}

/// Distribution on the circle of velocity angles, optionally resolved on a
/// spatial grid. Angle nodes sit at phi_j = j * 2pi/nphi; spatial cells are
/// centered at ((i+1/2) lx/nx, (j+1/2) ly/ny) on [0,lx) x [0,ly).
///
/// Mass is preserved by every deterministic step to machine accuracy (for
/// periodic or homogeneous fields). Small negative values produced by
/// spectral ringing are clipped to zero when above [`NEGATIVITY_CLIP`]; the
/// clip count is carried on the field.
#[derive(Clone, Debug)]
pub struct AngularField {
    nphi: usize,
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    boundary: BoundaryPolicy,
    /// Solver time the field is at.
    pub t: f64,
    clipped: u64,
    /// Cell-major rings: data[(iy*nx + ix)*nphi + j].
    data: Vec<f64>,
}

fn check_nphi(nphi: usize) {
    assert!(nphi >= 4 && nphi.is_power_of_two(), "nphi must be a power of two >= 4, got {nphi}");
}

impl AngularField {
    /// Spatially homogeneous field sampled from `f(phi)`.
    pub fn homogeneous(nphi: usize, f: impl Fn(f64) -> f64) -> Self {
        check_nphi(nphi);
        let data = (0..nphi).map(|j| f(TAU * j as f64 / nphi as f64)).collect();
        AngularField {
            nphi,
            nx: 1,
            ny: 1,
            lx: 1.0,
            ly: 1.0,
            boundary: BoundaryPolicy::Periodic,
            t: 0.0,
            clipped: 0,
            data,
        }
    }

    /// Gridded field sampled from `f(x, y, phi)` at cell centers.
    pub fn gridded(
        nphi: usize,
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
        boundary: BoundaryPolicy,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Self {
        check_nphi(nphi);
        assert!(nx >= 1 && ny >= 1, "grid must have at least one cell per axis");
        assert!(lx > 0.0 && ly > 0.0, "domain box must have positive extent");
        let (hx, hy) = (lx / nx as f64, ly / ny as f64);
        let mut data = Vec::with_capacity(nx * ny * nphi);
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = ((ix as f64 + 0.5) * hx, (iy as f64 + 0.5) * hy);
                for j in 0..nphi {
                    data.push(f(x, y, TAU * j as f64 / nphi as f64));
                }
            }
        }
        AngularField { nphi, nx, ny, lx, ly, boundary, t: 0.0, clipped: 0, data }
    }

    pub fn nphi(&self) -> usize {
        self.nphi
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn is_homogeneous(&self) -> bool {
        self.nx == 1 && self.ny == 1
    }
    pub fn boundary(&self) -> BoundaryPolicy {
        self.boundary
    }
    /// Angle of node `j`.
    pub fn phi(&self, j: usize) -> f64 {
        TAU * (j % self.nphi) as f64 / self.nphi as f64
    }
    pub fn values(&self) -> &[f64] {
        &self.data
    }
    pub fn value(&self, ix: usize, iy: usize, j: usize) -> f64 {
        self.data[(iy * self.nx + ix) * self.nphi + j]
    }
    pub fn ring(&self, ix: usize, iy: usize) -> &[f64] {
        let base = (iy * self.nx + ix) * self.nphi;
        &self.data[base..base + self.nphi]
    }
    /// Number of ringing clips applied so far.
    pub fn clipped(&self) -> u64 {
        self.clipped
    }

    /// Total integral of f over angle (and space for gridded fields).
    pub fn mass(&self) -> f64 {
        let cell = if self.is_homogeneous() {
            1.0
        } else {
            (self.lx / self.nx as f64) * (self.ly / self.ny as f64)
        };
        self.data.iter().sum::<f64>() * (TAU / self.nphi as f64) * cell
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Angular Fourier modes of one cell's ring, scaled so that
    /// f(phi_j) = sum_k modes[k] exp(2 pi i j k / nphi).
    pub fn modes_at(&self, ix: usize, iy: usize) -> Vec<C64> {
        let ops = SpectralOps::new(self.nphi);
        ops.modes(self.ring(ix, iy))
    }

    fn clip_ringing(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 && *v >= NEGATIVITY_CLIP {
                *v = 0.0;
                self.clipped += 1;
            }
        }
    }

    /// Versioned plain-text checkpoint: header lines then one CSV row
    /// (ix, iy, iphi, value) per grid node.
    pub fn write_checkpoint(&self, kernel_id: &str, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "# maglorentz-field v1")?;
        let mode = if self.is_homogeneous() { "homogeneous" } else { "gridded" };
        writeln!(
            w,
            "# mode {mode} nx {} ny {} lx {:.17e} ly {:.17e} boundary {:?}",
            self.nx, self.ny, self.lx, self.ly, self.boundary
        )?;
        writeln!(w, "# nphi {}", self.nphi)?;
        writeln!(w, "# kernel {kernel_id}")?;
        writeln!(w, "# t {:.17e}", self.t)?;
        writeln!(w, "ix,iy,iphi,value")?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                for j in 0..self.nphi {
                    writeln!(w, "{ix},{iy},{j},{:.17e}", self.value(ix, iy, j))?;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// spectral plumbing
// ---------------------------------------------------------------------------

struct SpectralOps {
    nphi: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl SpectralOps {
    fn new(nphi: usize) -> Self {
        let mut planner = FftPlanner::new();
        SpectralOps {
            nphi,
            fwd: planner.plan_fft_forward(nphi),
            inv: planner.plan_fft_inverse(nphi),
        }
    }

    fn modes(&self, ring: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = ring.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.nphi as f64;
        for c in &mut buf {
            *c *= s;
        }
        buf
    }

    fn ring(&self, modes: &[C64]) -> Vec<f64> {
        let mut buf = modes.to_vec();
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    /// Multiply each ring of `field` by per-mode `factors` (FFT bin order).
    fn apply_factors(&self, field: &mut AngularField, factors: &[C64]) {
        let n = self.nphi;
        let cells = field.data.len() / n;
        let work = |ring: &mut [f64]| {
            let mut buf: Vec<C64> = ring.iter().map(|&v| C64::new(v, 0.0)).collect();
            self.fwd.process(&mut buf);
            for (c, f) in buf.iter_mut().zip(factors) {
                *c *= f;
            }
            self.inv.process(&mut buf);
            let s = 1.0 / n as f64;
            for (v, c) in ring.iter_mut().zip(&buf) {
                *v = c.re * s;
            }
        };
        if cells >= 64 {
            field.data.par_chunks_mut(n).for_each(work);
        } else {
            field.data.chunks_mut(n).for_each(work);
        }
    }
}

/// Signed mode number of FFT bin `k` on a grid of `n` angles.
fn mode_of_bin(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Per-bin phase factors for the angular rotation f(phi) <- f(phi - beta).
/// The Nyquist bin has no conjugate partner and keeps only the real part of
/// its phase, which is exact whenever beta * nphi/2 is a multiple of pi.
fn rotation_factors(nphi: usize, beta: f64) -> Vec<C64> {
    (0..nphi)
        .map(|k| {
            let m = mode_of_bin(k, nphi) as f64;
            if 2 * k == nphi {
                C64::new((m * beta).cos(), 0.0)
            } else {
                C64::from_polar(1.0, -m * beta)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// collision kernels
// ---------------------------------------------------------------------------

/// How the per-period velocity shift of the memory kernel is read: rotate by
/// the scattering angle of the integration normal (the default), or by a
/// fixed reference angle independent of the normal. Both readings agree for
/// the k = 0 (Markovian) part; they differ only in the memory terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GbeShift {
    PerNormal,
    Fixed(f64),
}

/// Collision operator of one of the limit equations, acting as Fourier
/// multipliers on the angular modes. `lambda_0 = 0` always (mass), and
/// `Re lambda_k <= 0` (dissipative jump generator).
#[derive(Clone)]
pub enum CollisionKernel {
    /// Finite-eps linear Boltzmann operator: rate density mu_eps * eps per
    /// unit hat impact parameter, deflections from the table.
    BoltzmannEps { mu_eps: f64, eps: f64, table: Arc<ScatteringTable> },
    /// Magnetic linear Boltzmann with the full (truncated-range) cross
    /// section at unit coupling density mu.
    TruncatedBoltzmann { mu: f64, table: Arc<ScatteringTable> },
    /// Long-range Boltzmann regularized to deflections |theta| >= theta_min;
    /// only cutoff differences are physical.
    UncutBoltzmann { mu: f64, theta_min: f64, sampler: Arc<AngleSampler> },
    /// Angular diffusion with coefficient xi.
    Landau { xi: f64 },
    /// Hard-disk collision operator with self-recollision memory at integer
    /// Larmor periods; nu = 2 mu_eps eps is the collision frequency.
    HardDiskGbe { mu_eps: f64, eps: f64, t_l: f64, nu: f64, shift: GbeShift },
}

impl CollisionKernel {
    pub fn boltzmann_eps(mu_eps: f64, eps: f64, table: ScatteringTable) -> Self {
        assert!(mu_eps >= 0.0 && eps > 0.0);
        CollisionKernel::BoltzmannEps { mu_eps, eps, table: Arc::new(table) }
    }

    pub fn truncated_boltzmann(mu: f64, table: ScatteringTable) -> Self {
        assert!(mu >= 0.0);
        CollisionKernel::TruncatedBoltzmann { mu, table: Arc::new(table) }
    }

    pub fn uncut_boltzmann(
        mu: f64,
        table: &ScatteringTable,
        theta_min: f64,
    ) -> Result<Self, KineticError> {
        assert!(mu >= 0.0);
        let sampler = table.sampler(theta_min)?;
        Ok(CollisionKernel::UncutBoltzmann { mu, theta_min, sampler: Arc::new(sampler) })
    }

    pub fn landau(xi: f64) -> Self {
        assert!(xi >= 0.0);
        CollisionKernel::Landau { xi }
    }

    pub fn hard_disk_gbe(mu_eps: f64, eps: f64, field: &FieldParams, shift: GbeShift) -> Self {
        assert!(mu_eps >= 0.0 && eps > 0.0);
        assert!(field.t_l.is_finite(), "memory kernel needs a finite Larmor period");
        CollisionKernel::HardDiskGbe {
            mu_eps,
            eps,
            t_l: field.t_l,
            nu: 2.0 * mu_eps * eps,
            shift,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            CollisionKernel::BoltzmannEps { .. } => "boltzmann-eps",
            CollisionKernel::TruncatedBoltzmann { .. } => "truncated-boltzmann",
            CollisionKernel::UncutBoltzmann { .. } => "uncut-boltzmann",
            CollisionKernel::Landau { .. } => "landau",
            CollisionKernel::HardDiskGbe { .. } => "hard-disk-gbe",
        }
    }

    /// Fourier multipliers lambda_k in FFT bin order for an `nphi` grid.
    /// Conjugate symmetry is built in, lambda_0 is pinned to zero, real
    /// parts are clamped to <= 0, and the Nyquist bin is kept real.
    pub fn multipliers(&self, nphi: usize) -> Result<Vec<C64>, KineticError> {
        if nphi < 4 || !nphi.is_power_of_two() {
            return Err(KineticError::BadGrid { nphi });
        }
        let half: Vec<C64> = match self {
            CollisionKernel::Landau { xi } => (0..=nphi / 2)
                .map(|m| C64::new(-xi * (m * m) as f64, 0.0))
                .collect(),
            CollisionKernel::HardDiskGbe { nu, .. } => (0..=nphi / 2)
                .map(|m| {
                    let m2 = 4.0 * (m * m) as f64;
                    C64::new(-nu * m2 / (m2 - 1.0).max(1.0), 0.0)
                })
                .collect(),
            CollisionKernel::BoltzmannEps { mu_eps, eps, table } => {
                jump_multipliers(mu_eps * eps, table, &full_segments(table), nphi)
            }
            CollisionKernel::TruncatedBoltzmann { mu, table } => {
                jump_multipliers(*mu, table, &full_segments(table), nphi)
            }
            CollisionKernel::UncutBoltzmann { mu, sampler, .. } => {
                jump_multipliers(*mu, sampler.table(), &restricted_segments(sampler), nphi)
            }
        };
        let mut out = vec![C64::new(0.0, 0.0); nphi];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut lam = if k <= nphi / 2 { half[k] } else { half[nphi - k].conj() };
            lam.re = lam.re.min(0.0);
            if 2 * k == nphi {
                lam.im = 0.0;
            }
            *slot = lam;
        }
        out[0] = C64::new(0.0, 0.0);
        Ok(out)
    }

    fn jump_law(&self) -> Result<JumpLaw<'_>, KineticError> {
        match self {
            CollisionKernel::BoltzmannEps { mu_eps, eps, table } => Ok(JumpLaw::UniformRho {
                rate: mu_eps * eps * 2.0 * table.rho_max(),
                table,
            }),
            CollisionKernel::TruncatedBoltzmann { mu, table } => Ok(JumpLaw::UniformRho {
                rate: mu * 2.0 * table.rho_max(),
                table,
            }),
            CollisionKernel::UncutBoltzmann { mu, sampler, .. } => Ok(JumpLaw::FromSampler {
                rate: mu * sampler.admissible_measure(),
                sampler,
            }),
            CollisionKernel::Landau { .. } | CollisionKernel::HardDiskGbe { .. } => {
                Err(KineticError::UnsupportedKernel {
                    kernel: self.id(),
                    op: "jump-process sampling",
                })
            }
        }
    }

    /// Memory-term multipliers at lag `k >= 1` periods, computed by the
    /// mandated quadrature over collision normals on the angular grid: each
    /// grid normal contributes its hemisphere weight (v.n) times the history
    /// read at the velocity rotated back by k scattering angles (gain reads
    /// are pre-collisional, hence shifted k+1 times). The k >= 1 weight
    /// carries the (1 - e^{-nu T_L}) first-return factor.
    pub fn gbe_memory_multipliers(&self, nphi: usize, k: usize) -> Result<Vec<C64>, KineticError> {
        let CollisionKernel::HardDiskGbe { mu_eps, eps, t_l, nu, shift } = self else {
            return Err(KineticError::UnsupportedKernel { kernel: self.id(), op: "memory terms" });
        };
        if nphi < 4 || !nphi.is_power_of_two() {
            return Err(KineticError::BadGrid { nphi });
        }
        assert!(k >= 1, "memory lags start at one period");
        let w = mu_eps * eps * (-nu * t_l * k as f64).exp() * (1.0 - (-nu * t_l).exp());
        let dbeta = TAU / nphi as f64;
        let mut out = vec![C64::new(0.0, 0.0); nphi];
        if w == 0.0 {
            return Ok(out);
        }
        for (kbin, slot) in out.iter_mut().enumerate() {
            let m = mode_of_bin(kbin, nphi) as f64;
            if m == 0.0 {
                continue;
            }
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..nphi {
                let beta = j as f64 * dbeta;
                let cb = beta.cos();
                let arg = match shift {
                    GbeShift::PerNormal => {
                        if cb > 0.0 {
                            m * (k as f64 + 1.0) * (2.0 * beta - PI)
                        } else {
                            -m * k as f64 * (2.0 * beta - PI)
                        }
                    }
                    GbeShift::Fixed(theta_star) => {
                        let base = -m * k as f64 * theta_star;
                        if cb > 0.0 {
                            base + m * (2.0 * beta - PI)
                        } else {
                            base
                        }
                    }
                };
                acc += cb * C64::from_polar(1.0, arg);
            }
            let mut c = acc * (w * dbeta);
            if 2 * kbin == nphi {
                c.im = 0.0;
            }
            *slot = c;
        }
        Ok(out)
    }
}

enum JumpLaw<'a> {
    UniformRho { rate: f64, table: &'a ScatteringTable },
    FromSampler { rate: f64, sampler: &'a AngleSampler },
}

impl JumpLaw<'_> {
    fn rate(&self) -> f64 {
        match self {
            JumpLaw::UniformRho { rate, .. } | JumpLaw::FromSampler { rate, .. } => *rate,
        }
    }
    fn draw_deflection(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            JumpLaw::UniformRho { table, .. } => {
                let rho = (2.0 * rng.gen::<f64>() - 1.0) * table.rho_max();
                table.theta_of_rho(rho)
            }
            JumpLaw::FromSampler { sampler, .. } => sampler.sample(rng).1,
        }
    }
}

/// Integration segments covering the whole table, split at the deflection's
/// turning points and at rho = 0 where the two table sides meet.
fn full_segments(table: &ScatteringTable) -> Vec<(f64, f64)> {
    let rm = table.rho_max();
    let mut cuts = vec![-rm, 0.0, rm];
    cuts.extend_from_slice(table.turning_points());
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])).collect()
}

/// Admissible-set segments of a cutoff sampler, further split at turning
/// points so every segment is smooth.
fn restricted_segments(sampler: &AngleSampler) -> Vec<(f64, f64)> {
    let mut interior: Vec<f64> = sampler.table().turning_points().to_vec();
    interior.push(0.0);
    let mut segs = Vec::new();
    for (lo, hi) in sampler.intervals() {
        let mut cuts = vec![lo, hi];
        cuts.extend(interior.iter().copied().filter(|c| *c > lo && *c < hi));
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        segs.extend(cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])));
    }
    segs
}

/// lambda_m = mu_eff * int (e^{i m theta(rho)} - 1) drho over the segments,
/// for m = 0..=nphi/2. The integrand uses the unwrapped deflection; e^{i m
/// theta} is insensitive to winding so wrapped tables agree.
fn jump_multipliers(
    mu_eff: f64,
    table: &ScatteringTable,
    segments: &[(f64, f64)],
    nphi: usize,
) -> Vec<C64> {
    (0..=nphi / 2)
        .map(|m| {
            if m == 0 {
                return C64::new(0.0, 0.0);
            }
            let mf = m as f64;
            let mut acc = C64::new(0.0, 0.0);
            for &(a, b) in segments {
                let re = integrate(&|r: f64| (mf * table.theta_unwrapped(r)).cos() - 1.0, a, b, 1e-13, 1e-11).0;
                let im = integrate(&|r: f64| (mf * table.theta_unwrapped(r)).sin(), a, b, 1e-13, 1e-11).0;
                acc += C64::new(re, im);
            }
            acc * mu_eff
        })
        .collect()
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

/// Chord of the cyclotron characteristic ending at angle `phi` after `dt`:
/// the position displacement x(t+dt) - x(t) of a particle whose velocity
/// angle ends at phi.
fn cyclotron_chord(phi: f64, dt: f64, omega: f64) -> (f64, f64) {
    if omega.abs() * dt < 1e-8 {
        // straight-line limit; the O(omega dt^2) correction is below fp noise
        return (phi.cos() * dt, phi.sin() * dt);
    }
    let pb = phi - omega * dt;
    (((phi.sin() - pb.sin()) / omega), ((pb.cos() - phi.cos()) / omega))
}

fn bilinear(
    data: &[f64],
    nphi: usize,
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    boundary: BoundaryPolicy,
    j: usize,
    px: f64,
    py: f64,
) -> f64 {
    let gx = px / hx - 0.5;
    let gy = py / hy - 0.5;
    let (ix0, iy0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix0, gy - iy0);
    let fetch = |ix: i64, iy: i64| -> f64 {
        let (ix, iy) = match boundary {
            BoundaryPolicy::Periodic => (ix.rem_euclid(nx as i64), iy.rem_euclid(ny as i64)),
            BoundaryPolicy::Absorbing => {
                if ix < 0 || iy < 0 || ix >= nx as i64 || iy >= ny as i64 {
                    return 0.0;
                }
                (ix, iy)
            }
        };
        data[(iy as usize * nx + ix as usize) * nphi + j]
    };
    let (ix0, iy0) = (ix0 as i64, iy0 as i64);
    (1.0 - fx) * (1.0 - fy) * fetch(ix0, iy0)
        + fx * (1.0 - fy) * fetch(ix0 + 1, iy0)
        + (1.0 - fx) * fy * fetch(ix0, iy0 + 1)
        + fx * fy * fetch(ix0 + 1, iy0 + 1)
}

/// Advance the field along the free cyclotron flow for `dt`.
///
/// Homogeneous fields rotate exactly (a Fourier phase) for any dt. Gridded
/// fields use the semi-Lagrangian update at the exact characteristic feet,
/// spectral in angle and bilinear in space, and enforce the accuracy guard
/// dt <= T_L/16.
pub fn transport_step(field: &AngularField, dt: f64, fp: &FieldParams) -> AngularField {
    assert!(dt > 0.0 && dt.is_finite(), "transport needs a positive dt");
    let mut out = field.clone();
    let ops = SpectralOps::new(field.nphi);
    if fp.omega != 0.0 {
        let rot = rotation_factors(field.nphi, fp.omega * dt);
        ops.apply_factors(&mut out, &rot);
    }
    if !field.is_homogeneous() {
        assert!(
            dt <= fp.t_l / 16.0 * (1.0 + 1e-12),
            "gridded transport requires dt <= T_L/16 (dt = {dt}, T_L = {})",
            fp.t_l
        );
        let (nphi, nx, ny) = (field.nphi, field.nx, field.ny);
        let (hx, hy) = (field.lx / nx as f64, field.ly / ny as f64);
        let chords: Vec<(f64, f64)> =
            (0..nphi).map(|j| cyclotron_chord(field.phi(j), dt, fp.omega)).collect();
        let src = out.data.clone();
        let boundary = field.boundary;
        let gather = |(cell, ring): (usize, &mut [f64])| {
            let (ix, iy) = (cell % nx, cell / nx);
            let (cx, cy) = ((ix as f64 + 0.5) * hx, (iy as f64 + 0.5) * hy);
            for (j, v) in ring.iter_mut().enumerate() {
                let (dx, dy) = chords[j];
                *v = bilinear(&src, nphi, nx, ny, hx, hy, boundary, j, cx - dx, cy - dy);
            }
        };
        if nx * ny >= 64 {
            out.data.par_chunks_mut(nphi).enumerate().for_each(gather);
        } else {
            out.data.chunks_mut(nphi).enumerate().for_each(gather);
        }
    }
    out.clip_ringing();
    out.t += dt;
    out
}

/// Apply the collision semigroup exp(L dt) exactly in Fourier space.
pub fn collide_step(
    field: &AngularField,
    kernel: &CollisionKernel,
    dt: f64,
) -> Result<AngularField, KineticError> {
    assert!(dt >= 0.0 && dt.is_finite());
    let multipliers = kernel.multipliers(field.nphi)?;
    let mut out = field.clone();
    apply_collision_factors(&mut out, &exp_factors(&multipliers, dt));
    Ok(out)
}

fn exp_factors(multipliers: &[C64], dt: f64) -> Vec<C64> {
    multipliers.iter().map(|l| (l * dt).exp()).collect()
}

fn apply_collision_factors(field: &mut AngularField, factors: &[C64]) {
    let ops = SpectralOps::new(field.nphi);
    ops.apply_factors(field, factors);
    field.clip_ringing();
}

// ---------------------------------------------------------------------------
// memory stepping
// ---------------------------------------------------------------------------

/// Mode-space history of a homogeneous field at every step since t = 0,
/// read back at integer multiples of the Larmor period by the memory terms.
/// dt must divide T_L exactly so lag reads land on stored snapshots.
pub struct GbeHistory {
    nphi: usize,
    dt: f64,
    steps_per_period: usize,
    /// Index of the oldest retained snapshot (snapshots before it dropped).
    base: usize,
    /// modes[i] is the spectrum at t = (base + i) dt.
    modes: Vec<Vec<C64>>,
    /// coeffs[k-1] = memory multipliers at lag k, built on demand.
    coeffs: Vec<Vec<C64>>,
}

impl GbeHistory {
    pub fn new(f0: &AngularField, kernel: &CollisionKernel, dt: f64) -> Result<Self, KineticError> {
        let CollisionKernel::HardDiskGbe { t_l, .. } = kernel else {
            return Err(KineticError::UnsupportedKernel { kernel: kernel.id(), op: "memory stepping" });
        };
        if !f0.is_homogeneous() {
            return Err(KineticError::NotHomogeneous);
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(KineticError::BadTimeStep { detail: format!("dt = {dt}") });
        }
        let spp = (t_l / dt).round();
        if spp < 16.0 || ((spp * dt - t_l) / t_l).abs() > 1e-9 {
            return Err(KineticError::BadTimeStep {
                detail: format!("dt = {dt} must divide the period {t_l} into at least 16 steps"),
            });
        }
        let ops = SpectralOps::new(f0.nphi);
        Ok(GbeHistory {
            nphi: f0.nphi,
            dt,
            steps_per_period: spp as usize,
            base: 0,
            modes: vec![ops.modes(&f0.data)],
            coeffs: Vec::new(),
        })
    }

    pub fn t(&self) -> f64 {
        (self.base + self.modes.len() - 1) as f64 * self.dt
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Drop snapshots older than `steps * dt`. Later steps that need a
    /// dropped lag fail hard rather than extrapolate.
    pub fn truncate_before(&mut self, steps: usize) {
        if steps > self.base {
            let drop = (steps - self.base).min(self.modes.len().saturating_sub(1));
            self.modes.drain(..drop);
            self.base += drop;
        }
    }

    pub fn current_field(&self) -> AngularField {
        let ops = SpectralOps::new(self.nphi);
        let ring = ops.ring(self.modes.last().expect("history never empty"));
        let mut f = AngularField::homogeneous(self.nphi, |_| 0.0);
        f.data = ring;
        f.t = self.t();
        f.clip_ringing();
        f
    }

    fn spectrum_at(&self, index: usize, lag: usize) -> Result<&[C64], KineticError> {
        if index < self.base {
            return Err(KineticError::MissingLag { lag });
        }
        Ok(&self.modes[index - self.base])
    }

    /// Memory forcing M(t) at step `index`, or None when t < T_L.
    fn memory_at(&mut self, index: usize, kernel: &CollisionKernel) -> Result<Option<Vec<C64>>, KineticError> {
        let kmax = index / self.steps_per_period;
        if kmax == 0 {
            return Ok(None);
        }
        while self.coeffs.len() < kmax {
            let k = self.coeffs.len() + 1;
            self.coeffs.push(kernel.gbe_memory_multipliers(self.nphi, k)?);
        }
        let mut m = vec![C64::new(0.0, 0.0); self.nphi];
        for k in 1..=kmax {
            let past = self.spectrum_at(index - k * self.steps_per_period, k)?;
            for ((acc, c), p) in m.iter_mut().zip(&self.coeffs[k - 1]).zip(past) {
                *acc += c * p;
            }
        }
        Ok(Some(m))
    }
}

/// One dt of the memory equation: exact exponential for the Markovian part
/// (collision multipliers and magnetic rotation commute, both diagonal) and
/// trapezoidal coupling of the memory sum under the same semigroup:
/// f(t+dt) = E f(t) + dt/2 (E M(t) + M(t+dt)), E = exp((lambda - i m Omega) dt).
pub fn gbe_step(
    history: &mut GbeHistory,
    kernel: &CollisionKernel,
    fp: &FieldParams,
) -> Result<AngularField, KineticError> {
    let CollisionKernel::HardDiskGbe { t_l, .. } = kernel else {
        return Err(KineticError::UnsupportedKernel { kernel: kernel.id(), op: "memory stepping" });
    };
    if ((t_l - fp.t_l) / t_l).abs() > 1e-9 {
        return Err(KineticError::BadTimeStep {
            detail: format!("kernel period {t_l} does not match field period {}", fp.t_l),
        });
    }
    let n = history.nphi;
    let dt = history.dt;
    let lam = kernel.multipliers(n)?;
    let index = history.base + history.modes.len() - 1;
    let e: Vec<C64> = (0..n)
        .map(|k| {
            let m = mode_of_bin(k, n) as f64;
            let rot = if 2 * k == n {
                C64::new((m * fp.omega * dt).cos(), 0.0)
            } else {
                C64::from_polar(1.0, -m * fp.omega * dt)
            };
            (lam[k] * dt).exp() * rot
        })
        .collect();
    let m_now = history.memory_at(index, kernel)?;
    let m_next = history.memory_at(index + 1, kernel)?;
    let cur = history.modes.last().expect("history never empty").clone();
    let mut next = vec![C64::new(0.0, 0.0); n];
    for k in 0..n {
        let mut v = e[k] * cur[k];
        if let Some(mn) = &m_now {
            v += e[k] * mn[k] * (dt / 2.0);
        }
        if let Some(mn) = &m_next {
            v += mn[k] * (dt / 2.0);
        }
        next[k] = v;
    }
    history.modes.push(next);
    Ok(history.current_field())
}

// ---------------------------------------------------------------------------
// initial-value solver
// ---------------------------------------------------------------------------

pub struct SolveOutcome {
    pub field: AngularField,
    /// Requested checkpoints, snapped to step boundaries: (actual time, field).
    pub checkpoints: Vec<(f64, AngularField)>,
    /// Relative mass drift of the final state.
    pub mass_drift: f64,
    /// Most negative value seen at any step.
    pub min_value: f64,
}

/// Integrate the kinetic equation to `t_end` with step `dt`.
///
/// Multiplier kernels use Strang splitting transport(dt/2) collide(dt)
/// transport(dt/2); both sub-steps are exact, so the splitting is the whole
/// time error. The memory kernel runs through [`gbe_step`] (homogeneous
/// only). Aborts on mass drift beyond 1e-9 relative (periodic/homogeneous
/// fields) or density below -1e-6.
pub fn solve(
    f0: &AngularField,
    kernel: &CollisionKernel,
    fp: &FieldParams,
    t_end: f64,
    dt: f64,
    checkpoint_times: &[f64],
) -> Result<SolveOutcome, KineticError> {
    if !(dt > 0.0) || !dt.is_finite() || t_end < 0.0 {
        return Err(KineticError::BadTimeStep { detail: format!("dt = {dt}, t_end = {t_end}") });
    }
    let n_steps = (t_end / dt).round() as usize;
    if (n_steps as f64 * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(KineticError::BadTimeStep {
            detail: format!("t_end = {t_end} is not a multiple of dt = {dt}"),
        });
    }
    if !f0.is_homogeneous() && dt > fp.t_l / 16.0 * (1.0 + 1e-12) {
        return Err(KineticError::BadTimeStep {
            detail: format!("gridded transport requires dt <= T_L/16 = {:.6}", fp.t_l / 16.0),
        });
    }
    let gbe = matches!(kernel, CollisionKernel::HardDiskGbe { .. });
    let mut history = if gbe { Some(GbeHistory::new(f0, kernel, dt)?) } else { None };
    let factors = if gbe { Vec::new() } else { exp_factors(&kernel.multipliers(f0.nphi)?, dt) };

    // map step index -> positions in checkpoint_times snapped to it
    let mut snap: Vec<(usize, usize)> = checkpoint_times
        .iter()
        .enumerate()
        .map(|(pos, &ct)| ((ct / dt).round().max(0.0).min(n_steps as f64) as usize, pos))
        .collect();
    snap.sort_unstable();
    let mut checkpoints: Vec<(f64, AngularField)> = Vec::with_capacity(snap.len());
    let mut order: Vec<usize> = Vec::with_capacity(snap.len());

    let m0 = f0.mass();
    let track_mass = f0.is_homogeneous() || f0.boundary == BoundaryPolicy::Periodic;
    let mut f = f0.clone();
    let mut min_seen = f.min_value();
    let mut mass_drift = 0.0;
    let mut take = |step: usize, f: &AngularField, checkpoints: &mut Vec<(f64, AngularField)>, order: &mut Vec<usize>| {
        for &(s, pos) in &snap {
            if s == step {
                checkpoints.push((f.t, f.clone()));
                order.push(pos);
            }
        }
    };
    take(0, &f, &mut checkpoints, &mut order);
    for step in 1..=n_steps {
        if let Some(h) = history.as_mut() {
            f = gbe_step(h, kernel, fp)?;
        } else {
            f = transport_step(&f, dt / 2.0, fp);
            apply_collision_factors(&mut f, &factors);
            f = transport_step(&f, dt / 2.0, fp);
        }
        f.t = step as f64 * dt;
        let min = f.min_value();
        min_seen = min_seen.min(min);
        if min < NEGATIVITY_ABORT {
            return Err(KineticError::NegativeDensity { step, t: f.t, min });
        }
        if track_mass {
            mass_drift = ((f.mass() - m0) / m0.abs().max(f64::MIN_POSITIVE)).abs();
            if mass_drift > MASS_DRIFT_ABORT {
                return Err(KineticError::MassDrift { step, t: f.t, drift: mass_drift });
            }
        }
        take(step, &f, &mut checkpoints, &mut order);
    }
    // restore caller order of checkpoints
    let mut ordered: Vec<(f64, AngularField)> = Vec::with_capacity(checkpoints.len());
    let mut idx: Vec<usize> = (0..order.len()).collect();
    idx.sort_by_key(|&i| order[i]);
    for i in idx {
        ordered.push(checkpoints[i].clone());
    }
    Ok(SolveOutcome { field: f, checkpoints: ordered, mass_drift, min_value: min_seen })
}

// ---------------------------------------------------------------------------
// direct simulation
// ---------------------------------------------------------------------------

/// Histogram of sample paths on the angular grid (nodes phi_j = j 2pi/nphi,
/// bins centered on the nodes).
pub struct DsmcResult {
    pub counts: Vec<u64>,
    pub n: u64,
    pub nphi: usize,
    pub t_end: f64,
}

impl DsmcResult {
    fn dphi(&self) -> f64 {
        TAU / self.nphi as f64
    }

    /// Probability density per bin (integrates to 1 over the circle).
    pub fn density(&self) -> Vec<f64> {
        let s = 1.0 / (self.n as f64 * self.dphi());
        self.counts.iter().map(|&c| c as f64 * s).collect()
    }

    /// Per-bin standard error of the density estimate.
    pub fn stderr(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.counts
            .iter()
            .map(|&c| {
                let q = c as f64 / n;
                (q * (1.0 - q) / n).sqrt() / self.dphi()
            })
            .collect()
    }

    /// Monte Carlo estimate of (E cos k phi, E sin k phi).
    pub fn mode(&self, k: usize) -> (f64, f64) {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &c) in self.counts.iter().enumerate() {
            let a = k as f64 * self.dphi() * j as f64;
            re += c as f64 * a.cos();
            im += c as f64 * a.sin();
        }
        (re / self.n as f64, im / self.n as f64)
    }

    /// Standard error bound for either component of `mode(k)`.
    pub fn mode_stderr(&self, k: usize) -> f64 {
        let n = self.n as f64;
        let (re, im) = self.mode(k);
        let mut e2 = 0.0;
        for (j, &c) in self.counts.iter().enumerate() {
            let a = k as f64 * self.dphi() * j as f64;
            e2 += c as f64 * a.cos().powi(2).max(a.sin().powi(2));
        }
        let var = (e2 / n - re.powi(2).min(im.powi(2))).max(0.0);
        (var / n).sqrt()
    }
}

const DSMC_BLOCK: u64 = 8192;

/// Sample `n_particles` independent jump-process paths: exact cyclotron
/// rotation between exponential-clock collisions, deflections drawn from the
/// kernel's cross section. `f0_sampler` must return initial angles
/// distributed like the target initial state. Deterministic in `seed`
/// regardless of worker count.
pub fn dsmc_sample<F>(
    f0_sampler: F,
    kernel: &CollisionKernel,
    fp: &FieldParams,
    t_end: f64,
    n_particles: u64,
    nphi: usize,
    seed: u64,
) -> Result<DsmcResult, KineticError>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    if nphi < 4 || !nphi.is_power_of_two() {
        return Err(KineticError::BadGrid { nphi });
    }
    assert!(t_end >= 0.0 && n_particles > 0);
    let law = kernel.jump_law()?;
    let rate = law.rate();
    if rate * t_end > MAX_EXPECTED_JUMPS {
        return Err(KineticError::RateOverflow { rate, t_end });
    }
    let dphi = TAU / nphi as f64;
    let n_blocks = n_particles.div_ceil(DSMC_BLOCK);
    let counts = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut local = vec![0u64; nphi];
            let hi = ((b + 1) * DSMC_BLOCK).min(n_particles);
            for i in (b * DSMC_BLOCK)..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
                let mut phi = f0_sampler(&mut rng);
                let mut t = 0.0;
                if rate > 0.0 {
                    loop {
                        let tau = -(1.0 - rng.gen::<f64>()).ln() / rate;
                        if t + tau >= t_end {
                            break;
                        }
                        t += tau;
                        phi += fp.omega * tau;
                        phi -= law.draw_deflection(&mut rng);
                    }
                }
                phi += fp.omega * (t_end - t);
                let bin = (phi / dphi).round().rem_euclid(nphi as f64) as usize % nphi;
                local[bin] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; nphi],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
    Ok(DsmcResult { counts, n: n_particles, nphi, t_end })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FieldParams;
    use crate::potential::PotentialSpec;
    use crate::scattering::{cross_section, landau_diffusion_coefficient};
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    fn hd_table() -> &'static ScatteringTable {
        static T: OnceLock<ScatteringTable> = OnceLock::new();
        T.get_or_init(|| {
            cross_section(&PotentialSpec::hard_disk(0.05).unwrap(), &FieldParams::field_free(), 1024)
                .unwrap()
        })
    }

    fn smooth_table() -> &'static ScatteringTable {
        static T: OnceLock<ScatteringTable> = OnceLock::new();
        T.get_or_init(|| {
            cross_section(
                &PotentialSpec::smooth_compact(0.2, 0.1).unwrap(),
                &FieldParams::field_free(),
                1024,
            )
            .unwrap()
        })
    }

    fn lr_table() -> &'static ScatteringTable {
        static T: OnceLock<ScatteringTable> = OnceLock::new();
        T.get_or_init(|| {
            cross_section(
                &PotentialSpec::truncated_power(0.05, 3.0, 0.9).unwrap(),
                &FieldParams::field_free(),
                1024,
            )
            .unwrap()
        })
    }

    fn g_hat(m: i64) -> f64 {
        2.0 / (1.0 - 4.0 * (m * m) as f64)
    }

    fn max_ring_diff(a: &AngularField, b: &AngularField) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    // ------------------------------------------------------------------
    // transport
    // ------------------------------------------------------------------

    #[test]
    fn homogeneous_rotation_full_period_is_identity() {
        let fp = FieldParams::new(0.7);
        let f0 = AngularField::homogeneous(64, |p| 1.0 + p.cos() + 0.3 * (3.0 * p).sin());
        // a single full-period step (homogeneous rotation is exact at any dt)
        let f1 = transport_step(&f0, fp.t_l, &fp);
        assert!(max_ring_diff(&f0, &f1) <= 1e-12);
        // sixteen T_L/16 steps compose to the identity as well
        let mut f = f0.clone();
        for _ in 0..16 {
            f = transport_step(&f, fp.t_l / 16.0, &fp);
        }
        assert!(max_ring_diff(&f0, &f) <= 1e-12);
        assert_abs_diff_eq!(f.mass(), f0.mass(), epsilon = 1e-13 * f0.mass());
    }

    #[test]
    #[should_panic(expected = "dt <= T_L/16")]
    fn gridded_transport_enforces_step_guard() {
        let fp = FieldParams::new(1.0);
        let f = AngularField::gridded(8, 4, 4, 1.0, 1.0, BoundaryPolicy::Periodic, |_, _, _| 1.0);
        let _ = transport_step(&f, fp.t_l / 8.0, &fp);
    }

    #[test]
    fn gridded_spatially_uniform_matches_homogeneous() {
        let fp = FieldParams::new(0.9);
        let kernel = CollisionKernel::truncated_boltzmann(0.8, hd_table().clone());
        let init = |p: f64| 1.0 + 0.6 * p.cos() - 0.2 * (2.0 * p).sin();
        let fh = AngularField::homogeneous(64, init);
        let fg = AngularField::gridded(64, 8, 8, 2.0, 2.0, BoundaryPolicy::Periodic, |_, _, p| init(p));
        let dt = fp.t_l / 32.0;
        let oh = solve(&fh, &kernel, &fp, 16.0 * dt, dt, &[]).unwrap();
        let og = solve(&fg, &kernel, &fp, 16.0 * dt, dt, &[]).unwrap();
        for iy in 0..8 {
            for ix in 0..8 {
                for j in 0..64 {
                    assert!(
                        (og.field.value(ix, iy, j) - oh.field.value(0, 0, j)).abs() <= 1e-10,
                        "cell ({ix},{iy}) bin {j} diverged from the homogeneous solution"
                    );
                }
            }
        }
    }

    /// Straight-line semi-Lagrangian reference, same bilinear stencil.
    fn straight_advect(f: &AngularField, dt: f64) -> AngularField {
        let mut out = f.clone();
        let (nphi, nx, ny) = (f.nphi, f.nx, f.ny);
        let (hx, hy) = (f.lx / nx as f64, f.ly / ny as f64);
        for iy in 0..ny {
            for ix in 0..nx {
                let (cx, cy) = ((ix as f64 + 0.5) * hx, (iy as f64 + 0.5) * hy);
                for j in 0..nphi {
                    let p = f.phi(j);
                    out.data[(iy * nx + ix) * nphi + j] = bilinear(
                        &f.data,
                        nphi,
                        nx,
                        ny,
                        hx,
                        hy,
                        f.boundary,
                        j,
                        cx - p.cos() * dt,
                        cy - p.sin() * dt,
                    );
                }
            }
        }
        out
    }

    #[test]
    fn transport_approaches_straight_advection_quadratically_in_dt() {
        let init = |x: f64, y: f64, p: f64| {
            (1.0 + 0.5 * (TAU * x).sin()) * (1.0 + 0.3 * (TAU * y).cos()) * (1.0 + 0.5 * p.cos())
        };
        let f0 = AngularField::gridded(16, 32, 32, 1.0, 1.0, BoundaryPolicy::Periodic, init);
        // vanishing field: the curved feet coincide with the straight feet
        let weak = FieldParams::new(1e-12);
        let got = transport_step(&f0, 0.05, &weak);
        let want = straight_advect(&f0, 0.05);
        assert!(max_ring_diff(&got, &want) <= 1e-11);
        // finite field: the gap to straight advection shrinks like dt^2
        let fp = FieldParams::new(0.5);
        let err = |dt: f64| max_ring_diff(&transport_step(&f0, dt, &fp), &straight_advect(&f0, dt));
        let (e1, e2) = (err(0.04), err(0.02));
        let ratio = e1 / e2;
        assert!(
            (3.0..5.0).contains(&ratio),
            "expected quadratic shrinkage, got errors {e1:.3e}/{e2:.3e} (ratio {ratio:.2})"
        );
    }

    #[test]
    fn gridded_transport_preserves_mass_and_positivity() {
        let init = |x: f64, y: f64, p: f64| {
            let bump = (-20.0 * ((x - 0.5).powi(2) + (y - 0.4).powi(2))).exp();
            0.1 + bump * (1.0 + 0.9 * p.cos())
        };
        let f0 = AngularField::gridded(32, 24, 24, 1.0, 1.0, BoundaryPolicy::Periodic, init);
        let fp = FieldParams::new(2.0);
        let mut f = f0.clone();
        for _ in 0..5 {
            f = transport_step(&f, fp.t_l / 20.0, &fp);
        }
        assert!(((f.mass() - f0.mass()) / f0.mass()).abs() <= 1e-12);
        assert!(f.min_value() >= NEGATIVITY_CLIP);
    }

    // ------------------------------------------------------------------
    // collision multipliers
    // ------------------------------------------------------------------

    #[test]
    fn landau_mode_decays_exactly() {
        let xi = 0.37;
        let kernel = CollisionKernel::landau(xi);
        let f0 = AngularField::homogeneous(32, |p| 1.0 + 0.8 * (2.0 * p).cos());
        let dt = 0.63;
        let f1 = collide_step(&f0, &kernel, dt).unwrap();
        let want = (-xi * 4.0 * dt).exp();
        let m0 = f0.modes_at(0, 0);
        let m1 = f1.modes_at(0, 0);
        assert_abs_diff_eq!(m1[2].re / m0[2].re, want, epsilon = 1e-13);
        assert!(m1[2].im.abs() <= 1e-15 && (m1[0] - m0[0]).norm() <= 1e-15);
    }

    #[test]
    fn hard_disk_multiplier_matches_matrix_application() {
        // kernel multiplier vs brute-force operator application on the grid,
        // both checked against the closed form mu_eff (g_1 - 2) = -8/3 mu_eff
        let mu_eps = 44.0;
        let eps = 0.05;
        let mu_eff = mu_eps * eps;
        let kernel = CollisionKernel::boltzmann_eps(mu_eps, eps, hd_table().clone());
        let lam1 = kernel.multipliers(64).unwrap()[1];
        let nphi = 64;
        let mut out = vec![0.0; nphi];
        for (i, o) in out.iter_mut().enumerate() {
            let phi = TAU * i as f64 / nphi as f64;
            let f = |r: f64| {
                (phi + crate::scattering::hard_disk_angle(r).unwrap()).cos() - phi.cos()
            };
            *o = mu_eff * (integrate(&f, -1.0, 0.0, 1e-13, 1e-12).0
                + integrate(&f, 0.0, 1.0, 1e-13, 1e-12).0);
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in out.iter().enumerate() {
            let phi = TAU * i as f64 / nphi as f64;
            re += 2.0 * v * phi.cos() / nphi as f64;
            im += 2.0 * v * phi.sin() / nphi as f64;
        }
        let closed = -8.0 / 3.0 * mu_eff;
        assert_abs_diff_eq!(lam1.re, closed, epsilon = 1e-10);
        assert!(lam1.im.abs() <= 1e-12);
        assert_abs_diff_eq!(re, lam1.re, epsilon = 1e-10);
        assert!(im.abs() <= 1e-10);
    }

    #[test]
    fn multiplier_structure_tracks_field_asymmetry() {
        // field-free deflections are odd in rho, so multipliers are real;
        // a field skews the cross section and imaginary parts appear
        let lam0 = CollisionKernel::boltzmann_eps(2.0, 0.2, smooth_table().clone())
            .multipliers(32)
            .unwrap();
        for (k, l) in lam0.iter().enumerate() {
            assert!(l.re <= 0.0, "bin {k} gained mass");
            assert!(l.im.abs() <= 1e-10, "bin {k} imaginary at zero field: {:.3e}", l.im);
        }
        assert_eq!(lam0[0], C64::new(0.0, 0.0));
        let pot = PotentialSpec::smooth_compact(0.2, 0.1).unwrap();
        let table_b = cross_section(&pot, &FieldParams::new(0.8), 1024).unwrap();
        let lam_b = CollisionKernel::boltzmann_eps(2.0, 0.2, table_b).multipliers(32).unwrap();
        let im_max = lam_b.iter().map(|l| l.im.abs()).fold(0.0, f64::max);
        assert!(im_max > 1e-6, "field-skewed kernel unexpectedly symmetric (max im {im_max:.2e})");
        assert_eq!(lam_b[0], C64::new(0.0, 0.0));
        assert!(lam_b.iter().all(|l| l.re <= 0.0));
        assert!(lam_b[16].im == 0.0, "Nyquist bin must stay real");
    }

    #[test]
    fn uniform_state_is_a_fixed_point_of_every_kernel() {
        let uniform = AngularField::homogeneous(32, |_| 0.25);
        let kernels = [
            CollisionKernel::boltzmann_eps(3.0, 0.2, smooth_table().clone()),
            CollisionKernel::truncated_boltzmann(1.4, hd_table().clone()),
            CollisionKernel::uncut_boltzmann(0.9, lr_table(), 0.3).unwrap(),
            CollisionKernel::landau(0.5),
        ];
        for kernel in &kernels {
            let f1 = collide_step(&uniform, kernel, 0.8).unwrap();
            assert!(
                max_ring_diff(&uniform, &f1) <= 1e-14,
                "kernel {} moved the uniform state",
                kernel.id()
            );
        }
        // memory solver: three full periods
        let fp = FieldParams::new(TAU);
        let gbe = CollisionKernel::hard_disk_gbe(2.0, 0.25, &fp, GbeShift::PerNormal);
        let out = solve(&uniform, &gbe, &fp, 3.0, 1.0 / 16.0, &[]).unwrap();
        assert!(max_ring_diff(&uniform, &out.field) <= 1e-10);
    }

    #[test]
    fn dissipativity_mode_magnitudes_never_grow() {
        let kernels = [
            CollisionKernel::truncated_boltzmann(1.2, hd_table().clone()),
            CollisionKernel::uncut_boltzmann(0.7, lr_table(), 0.25).unwrap(),
            CollisionKernel::landau(0.4),
        ];
        for kernel in &kernels {
            let mut f = AngularField::homogeneous(32, |p| {
                1.0 + 0.7 * p.cos() + 0.4 * (2.0 * p).sin() + 0.2 * (5.0 * p).cos()
            });
            let mut prev: Vec<f64> = f.modes_at(0, 0).iter().map(|c| c.norm()).collect();
            for _ in 0..6 {
                f = collide_step(&f, kernel, 0.3).unwrap();
                let cur: Vec<f64> = f.modes_at(0, 0).iter().map(|c| c.norm()).collect();
                for k in 0..cur.len() {
                    assert!(
                        cur[k] <= prev[k] * (1.0 + 1e-14) + 1e-300,
                        "kernel {} grew mode bin {k}",
                        kernel.id()
                    );
                }
                prev = cur;
            }
        }
    }

    #[test]
    fn grazing_deflections_shrink_the_boltzmann_landau_gap_at_rate_two_alpha() {
        // L2 gap between the finite-eps operator and angular diffusion with
        // the operator's own quadratic coefficient, on a fixed smooth state
        // with modes 1..4 weighted 2^-m. The quartic remainder scales like
        // the squared coupling, i.e. eps^{2 alpha} per decade.
        let alpha = 0.1;
        let mu = 1.0;
        let eps_list = [1e-2, 1e-3];
        let probe = PotentialSpec::smooth_compact(0.01, alpha).unwrap();
        let lx = landau_diffusion_coefficient(&probe, mu, &eps_list).unwrap();
        let mut ds = Vec::new();
        for (i, &eps) in eps_list.iter().enumerate() {
            let xi_eps = lx.limit_sequence[i].1;
            let pot = PotentialSpec::smooth_compact(eps, alpha).unwrap();
            let table = cross_section(&pot, &FieldParams::field_free(), 1024).unwrap();
            let mu_eps = mu * eps.powf(-1.0 - 2.0 * alpha);
            let lam = CollisionKernel::boltzmann_eps(mu_eps, eps, table).multipliers(32).unwrap();
            let mut d2 = 0.0;
            for m in 1..=4usize {
                let dev = lam[m] + C64::new(xi_eps * (m * m) as f64, 0.0);
                let w = 0.5f64.powi(m as i32);
                d2 += 2.0 * w * w * dev.norm_sqr();
                assert!(lam[m].im.abs() <= 1e-10);
            }
            ds.push(d2.sqrt());
        }
        assert!(ds[1] < ds[0], "remainder must shrink with eps: {ds:?}");
        let slope = (ds[0] / ds[1]).log10();
        assert!(
            (slope - 2.0 * alpha).abs() <= 0.05,
            "remainder decay slope {slope:.4} not within 0.05 of {:.4}",
            2.0 * alpha
        );
    }

    // ------------------------------------------------------------------
    // memory stepping
    // ------------------------------------------------------------------

    #[test]
    fn memory_multipliers_match_the_hemisphere_integrals() {
        // the grid quadrature of the normal integral converges (second
        // order, the integrand kinks where v.n changes sign) to
        // w_k (g_{m(k+1)} - g_{mk}) with w_k the return-probability weight
        let fp = FieldParams::new(TAU);
        let (mu_eps, eps) = (1.6, 0.25);
        let kernel = CollisionKernel::hard_disk_gbe(mu_eps, eps, &fp, GbeShift::PerNormal);
        let nu = 2.0 * mu_eps * eps;
        for (nphi, tol) in [(256usize, 5e-3), (2048, 4e-4)] {
            for k in 1..=3usize {
                let got = kernel.gbe_memory_multipliers(nphi, k).unwrap();
                let w = mu_eps * eps * (-nu * fp.t_l * k as f64).exp()
                    * (1.0 - (-nu * fp.t_l).exp());
                for m in 1..=6i64 {
                    let want = w * (g_hat(m * (k as i64 + 1)) - g_hat(m * k as i64));
                    let g = got[m as usize];
                    assert!(
                        (g.re - want).abs() <= tol * w.max(1e-300) && g.im.abs() <= tol * w,
                        "nphi={nphi} k={k} m={m}: got ({:.6e},{:.2e}), want {want:.6e}",
                        g.re,
                        g.im
                    );
                }
                assert_eq!(got[0], C64::new(0.0, 0.0));
            }
        }
        // fixed-shift reading: e^{-i m k theta*} (g_m - 2) times the weight
        let theta_star = 1.1;
        let fixed = CollisionKernel::hard_disk_gbe(mu_eps, eps, &fp, GbeShift::Fixed(theta_star));
        let got = fixed.gbe_memory_multipliers(2048, 2).unwrap();
        let w = mu_eps * eps * (-nu * fp.t_l * 2.0).exp() * (1.0 - (-nu * fp.t_l).exp());
        for m in 1..=4i64 {
            let want = C64::from_polar(1.0, -(m as f64) * 2.0 * theta_star) * (g_hat(m) - 2.0) * w;
            assert!((got[m as usize] - want).norm() <= 4e-4 * w);
        }
    }

    #[test]
    fn memory_solver_reduces_to_markovian_before_one_period() {
        let fp = FieldParams::new(TAU);
        let (mu_eps, eps) = (4.0, 0.1);
        let gbe = CollisionKernel::hard_disk_gbe(mu_eps, eps, &fp, GbeShift::PerNormal);
        let markov = CollisionKernel::truncated_boltzmann(mu_eps * eps, hd_table().clone());
        let f0 = AngularField::homogeneous(64, |p| 1.0 + 0.7 * p.cos() + 0.2 * (3.0 * p).sin());
        let dt = fp.t_l / 16.0;
        let a = solve(&f0, &gbe, &fp, 14.0 * dt, dt, &[]).unwrap();
        let b = solve(&f0, &markov, &fp, 14.0 * dt, dt, &[]).unwrap();
        assert!(max_ring_diff(&a.field, &b.field) <= 1e-10);
    }

    #[test]
    fn memory_terms_vanish_at_high_collision_rate() {
        // nu T_L = 20: a clean return over a full period is e^{-20}-rare
        let fp = FieldParams::new(TAU);
        let (mu_eps, eps) = (20.0, 0.5);
        let gbe = CollisionKernel::hard_disk_gbe(mu_eps, eps, &fp, GbeShift::PerNormal);
        let markov = CollisionKernel::truncated_boltzmann(mu_eps * eps, hd_table().clone());
        let f0 = AngularField::homogeneous(32, |p| 1.0 + 0.9 * p.cos());
        let dt = fp.t_l / 16.0;
        let a = solve(&f0, &gbe, &fp, 2.5, dt, &[]).unwrap();
        let b = solve(&f0, &markov, &fp, 2.5, dt, &[]).unwrap();
        let rel = max_ring_diff(&a.field, &b.field)
            / a.field.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rel <= 1e-8, "relative memory imprint {rel:.3e} at nu T_L = 20");
    }

    #[test]
    fn memory_history_errors_are_hard() {
        let fp = FieldParams::new(TAU);
        let gbe = CollisionKernel::hard_disk_gbe(1.0, 0.3, &fp, GbeShift::PerNormal);
        let f0 = AngularField::homogeneous(32, |p| 1.0 + 0.5 * p.cos());
        // dt must divide the period into >= 16 steps
        assert!(matches!(
            GbeHistory::new(&f0, &gbe, 0.3),
            Err(KineticError::BadTimeStep { .. })
        ));
        // dropping prehistory makes later lag reads fail instead of extrapolating
        let dt = fp.t_l / 16.0;
        let mut h = GbeHistory::new(&f0, &gbe, dt).unwrap();
        for _ in 0..16 {
            gbe_step(&mut h, &gbe, &fp).unwrap();
        }
        h.truncate_before(8);
        let mut hit = None;
        for _ in 0..17 {
            if let Err(e) = gbe_step(&mut h, &gbe, &fp) {
                hit = Some(e);
                break;
            }
        }
        assert!(matches!(hit, Some(KineticError::MissingLag { .. })), "got {hit:?}");
        // gridded fields are rejected outright
        let fg = AngularField::gridded(32, 2, 2, 1.0, 1.0, BoundaryPolicy::Periodic, |_, _, _| 1.0);
        assert!(matches!(GbeHistory::new(&fg, &gbe, dt), Err(KineticError::NotHomogeneous)));
    }

    // ------------------------------------------------------------------
    // solve
    // ------------------------------------------------------------------

    #[test]
    fn landau_single_mode_solution_is_exact() {
        // rotation carries the phase, diffusion damps the amplitude; both
        // sub-steps are exact and commute in homogeneous mode
        let fp = FieldParams::new(1.7);
        let xi = 0.31;
        let kernel = CollisionKernel::landau(xi);
        let f0 = AngularField::homogeneous(64, |p| 1.0 + p.cos());
        let dt = fp.t_l / 16.0;
        let t_end = 20.0 * dt;
        let out = solve(&f0, &kernel, &fp, t_end, dt, &[]).unwrap();
        for j in 0..64 {
            let p = out.field.phi(j);
            let want = 1.0 + (-xi * t_end).exp() * (p - fp.omega * t_end).cos();
            assert_abs_diff_eq!(out.field.value(0, 0, j), want, epsilon = 1e-12);
        }
        assert!(out.mass_drift <= 1e-12);
    }

    #[test]
    fn solver_error_is_second_order_in_dt() {
        // with exact transport and collision the only time error is the
        // trapezoidal memory coupling, so halving dt gains a factor of four
        let fp = FieldParams::new(TAU);
        let gbe = CollisionKernel::hard_disk_gbe(2.5, 0.2, &fp, GbeShift::PerNormal);
        let f0 = AngularField::homogeneous(32, |p| 1.0 + 0.8 * p.cos());
        let t_end = 2.5;
        let reference = solve(&f0, &gbe, &fp, t_end, fp.t_l / 512.0, &[]).unwrap();
        let e = |dt: f64| {
            let out = solve(&f0, &gbe, &fp, t_end, dt, &[]).unwrap();
            max_ring_diff(&out.field, &reference.field)
        };
        let (e1, e2) = (e(fp.t_l / 16.0), e(fp.t_l / 32.0));
        let ratio = e1 / e2;
        assert!(
            (3.2..4.8).contains(&ratio),
            "halving dt changed the error by {ratio:.2} ({e1:.3e} -> {e2:.3e})"
        );
    }

    #[test]
    fn solver_checkpoints_and_instability_monitor() {
        let fp = FieldParams::new(2.0);
        let kernel = CollisionKernel::landau(0.2);
        let f0 = AngularField::homogeneous(32, |p| 1.0 + 0.4 * p.cos());
        let dt = fp.t_l / 16.0;
        let out = solve(&f0, &kernel, &fp, 8.0 * dt, dt, &[4.0 * dt, 8.0 * dt]).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        assert_abs_diff_eq!(out.checkpoints[0].0, 4.0 * dt, epsilon = 1e-12);
        assert_abs_diff_eq!(out.checkpoints[1].0, 8.0 * dt, epsilon = 1e-12);
        assert!(max_ring_diff(&out.checkpoints[1].1, &out.field) == 0.0);
        // a state already negative beyond the abort threshold is rejected
        let bad = AngularField::homogeneous(32, |p| p.cos());
        let err = solve(&bad, &kernel, &fp, 8.0 * dt, dt, &[]);
        assert!(matches!(err, Err(KineticError::NegativeDensity { .. })));
    }

    // ------------------------------------------------------------------
    // direct simulation
    // ------------------------------------------------------------------

    #[test]
    fn dsmc_zero_rate_is_pure_rotation() {
        let fp = FieldParams::new(1.3);
        let kernel = CollisionKernel::truncated_boltzmann(0.0, hd_table().clone());
        let phi0 = 0.3;
        let t_end = 2.1;
        let res =
            dsmc_sample(|_| phi0, &kernel, &fp, t_end, 4096, 64, 11).unwrap();
        let expect = ((phi0 + fp.omega * t_end) / (TAU / 64.0)).round().rem_euclid(64.0) as usize;
        assert_eq!(res.counts[expect], 4096);
        assert_eq!(res.counts.iter().sum::<u64>(), 4096);
    }

    #[test]
    fn dsmc_matches_closed_form_mode_decay_at_zero_field() {
        // hard-disk multipliers are known in closed form: mode m decays at
        // mu (g_m - 2); the sampler must agree within Monte Carlo error
        let fp = FieldParams::field_free();
        let mu = 1.0;
        let kernel = CollisionKernel::truncated_boltzmann(mu, hd_table().clone());
        let f0 = |rng: &mut ChaCha8Rng| loop {
            let p = rng.gen::<f64>() * TAU;
            let cap = 2.5 / TAU;
            if rng.gen::<f64>() * cap <= (1.0 + p.cos() + 0.5 * (2.0 * p).cos()) / TAU {
                return p;
            }
        };
        let t_end = 0.6;
        let res = dsmc_sample(f0, &kernel, &fp, t_end, 200_000, 256, 2024).unwrap();
        for (m, amp0) in [(1usize, 0.5), (2, 0.25)] {
            let lam = mu * (g_hat(m as i64) - 2.0);
            let want = amp0 * (lam * t_end).exp();
            let (re, im) = res.mode(m);
            let se = res.mode_stderr(m).max(1e-9);
            assert!(
                (re - want).abs() <= 3.0 * se + 1e-3,
                "mode {m}: got {re:.5}, want {want:.5}, se {se:.5}"
            );
            assert!(im.abs() <= 3.0 * se + 1e-3, "mode {m} sine component {im:.5}");
        }
    }

    #[test]
    fn dsmc_cutoff_halving_changes_observables_within_noise() {
        let fp = FieldParams::field_free();
        let mu = 0.6;
        let t_end = 1.0;
        let f0 = |rng: &mut ChaCha8Rng| loop {
            let p = rng.gen::<f64>() * TAU;
            if rng.gen::<f64>() * (2.0 / TAU) <= (1.0 + p.cos()) / TAU {
                return p;
            }
        };
        let run = |theta_min: f64, seed: u64| {
            let kernel = CollisionKernel::uncut_boltzmann(mu, lr_table(), theta_min).unwrap();
            dsmc_sample(f0, &kernel, &fp, t_end, 100_000, 128, seed).unwrap()
        };
        let a = run(0.4, 5);
        let b = run(0.2, 6);
        let (ra, _) = a.mode(1);
        let (rb, _) = b.mode(1);
        let se = (a.mode_stderr(1).powi(2) + b.mode_stderr(1).powi(2)).sqrt();
        assert!(
            (ra - rb).abs() <= 3.0 * se,
            "cutoff halving moved mode 1 by {:.4e} (3 sigma = {:.4e})",
            (ra - rb).abs(),
            3.0 * se
        );
    }

    #[test]
    fn dsmc_agrees_with_the_spectral_solver() {
        let fp = FieldParams::new(0.9);
        let kernel = CollisionKernel::boltzmann_eps(3.0, 0.2, smooth_table().clone());
        let init = |p: f64| (1.0 + p.cos()) / TAU;
        let f0 = AngularField::homogeneous(64, init);
        let t_end = 1.0;
        let out = solve(&f0, &kernel, &fp, t_end, t_end / 10.0, &[]).unwrap();
        let sampler = |rng: &mut ChaCha8Rng| loop {
            let p = rng.gen::<f64>() * TAU;
            if rng.gen::<f64>() * (2.0 / TAU) <= init(p) {
                return p;
            }
        };
        let res = dsmc_sample(sampler, &kernel, &fp, t_end, 200_000, 64, 77).unwrap();
        let dens = res.density();
        let se = res.stderr();
        let dphi = TAU / 64.0;
        let l1: f64 = (0..64)
            .map(|j| (dens[j] - out.field.value(0, 0, j)).abs() * dphi)
            .sum();
        let l1_noise: f64 = se.iter().map(|s| s * dphi).sum();
        assert!(
            l1 <= 3.0 * l1_noise,
            "L1 gap {l1:.4e} exceeds 3x Monte Carlo budget {:.4e}",
            3.0 * l1_noise
        );
    }

    #[test]
    fn dsmc_setup_rejects_unbounded_rates() {
        let fp = FieldParams::field_free();
        let kernel = CollisionKernel::uncut_boltzmann(1e7, lr_table(), 0.05).unwrap();
        let err = dsmc_sample(|_| 0.0, &kernel, &fp, 10.0, 100, 64, 1);
        assert!(matches!(err, Err(KineticError::RateOverflow { .. })));
        let landau = CollisionKernel::landau(0.3);
        assert!(matches!(
            dsmc_sample(|_| 0.0, &landau, &fp, 1.0, 10, 64, 1),
            Err(KineticError::UnsupportedKernel { .. })
        ));
    }

    #[test]
    fn checkpoint_format_is_versioned_and_complete() {
        let f = AngularField::homogeneous(8, |p| 1.0 + p.sin());
        let mut buf = Vec::new();
        f.write_checkpoint("landau", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# maglorentz-field v1\n"));
        assert!(text.contains("# kernel landau"));
        assert!(text.contains("ix,iy,iphi,value"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 9);
    }
}
