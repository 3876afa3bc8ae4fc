//! Explicit Dormand-Prince 5(4) integrator on a 4-component state.
//!
//! The state layout used by callers is `[x, y, vx, vy]`. Step size is chosen
//! by a PI controller on the embedded 4th-order error estimate; the last
//! stage is reused as the first stage of the next step (FSAL).
//!
//! Event crossings are located by bisection in the step interval, where the
//! trial state at interior time `tau` is produced by a single RK step of
//! size `tau` from the step's start state. That map is smooth in `tau` and
//! at least as accurate as the accepted step, so the bisection converges to
//! event-function values near machine precision.

pub type State4 = [f64; 4];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step size (also used as the initial trial step).
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-10, atol: 1e-12, h_max: 0.1, max_steps: 2_000_000 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OdeError {
    #[error("step count limit exceeded")]
    TooManySteps,
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
}

#[derive(Debug, Clone, Copy)]
pub enum EventOutcome {
    /// Event function reached zero at time `t` with state `y`.
    Event { t: f64, y: State4, g: f64 },
    /// Integration ran to `t_end` without an event sign change.
    Expired { y: State4 },
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// 4th-order weights minus 5th-order weights (error estimator)
const E1: f64 = 5179.0 / 57600.0 - B1;
const E3: f64 = 7571.0 / 16695.0 - B3;
const E4: f64 = 393.0 / 640.0 - B4;
const E5: f64 = -92097.0 / 339200.0 - B5;
const E6: f64 = 187.0 / 2100.0 - B6;
const E7: f64 = 1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

#[inline]
fn axpy4(out: &mut State4, y: &State4, h: f64, terms: &[(f64, &State4)]) {
    for i in 0..4 {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

/// One DP5 step of size `h` from `(t, y)` with `k1 = f(t, y)` given.
/// Returns `(y_new, k_last, err_norm)`; `k_last = f(t+h, y_new)` (FSAL stage).
fn dp5_step<F: Fn(f64, &State4) -> State4>(
    f: &F,
    t: f64,
    y: &State4,
    h: f64,
    k1: &State4,
    rtol: f64,
    atol: f64,
) -> (State4, State4, f64) {
    let mut ytmp = [0.0; 4];
    axpy4(&mut ytmp, y, h, &[(A21, k1)]);
    let k2 = f(t + C2 * h, &ytmp);
    axpy4(&mut ytmp, y, h, &[(A31, k1), (A32, &k2)]);
    let k3 = f(t + C3 * h, &ytmp);
    axpy4(&mut ytmp, y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]);
    let k4 = f(t + C4 * h, &ytmp);
    axpy4(&mut ytmp, y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
    let k5 = f(t + C5 * h, &ytmp);
    axpy4(&mut ytmp, y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]);
    let k6 = f(t + h, &ytmp);
    let mut ynew = [0.0; 4];
    axpy4(&mut ynew, y, h, &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = f(t + h, &ynew);
    let mut err_norm = 0.0f64;
    for i in 0..4 {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let sc = atol + rtol * y[i].abs().max(ynew[i].abs());
        let r = e / sc;
        err_norm += r * r;
    }
    err_norm = (err_norm / 4.0).sqrt();
    (ynew, k7, err_norm)
}

/// Internal driver: advances with adaptive steps, invoking `on_step` after
/// each accepted step with `(t_prev, y_prev, h, t_new, y_new)`. `on_step`
/// may return `false` to stop early.
fn drive<F, S>(f: &F, t0: f64, y0: State4, t_end: f64, opts: &OdeOptions, mut on_step: S) -> Result<State4, OdeError>
where
    F: Fn(f64, &State4) -> State4,
    S: FnMut(f64, &State4, f64, f64, &State4) -> bool,
{
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let mut h = opts.h_max.min(t_end - t0).max(1e-300);
    let mut err_prev: f64 = 1.0;
    let mut nsteps = 0usize;
    while t < t_end {
        if nsteps >= opts.max_steps {
            return Err(OdeError::TooManySteps);
        }
        nsteps += 1;
        if t + h > t_end {
            h = t_end - t;
        }
        let (ynew, k7, err) = dp5_step(f, t, &y, h, &k1, opts.rtol, opts.atol);
        if err <= 1.0 || h <= 1e-14 * t.abs().max(1.0) {
            // accept
            let t_new = t + h;
            let go_on = on_step(t, &y, h, t_new, &ynew);
            t = t_new;
            y = ynew;
            k1 = k7;
            if !go_on {
                return Ok(y);
            }
            // PI controller (Hairer's beta = 0.08)
            let e = err.max(1e-10);
            let fac = 0.9 * e.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            err_prev = e;
            h = (h * fac.clamp(0.2, 5.0)).min(opts.h_max);
        } else {
            // reject and shrink
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            h *= fac;
            if h < 1e-15 * t.abs().max(1.0) {
                return Err(OdeError::StepUnderflow(t));
            }
        }
    }
    Ok(y)
}

/// Integrate from `(t0, y0)` to `t_end`.
pub fn integrate_to<F>(f: &F, t0: f64, y0: State4, t_end: f64, opts: &OdeOptions) -> Result<State4, OdeError>
where
    F: Fn(f64, &State4) -> State4,
{
    drive(f, t0, y0, t_end, opts, |_, _, _, _, _| true)
}

/// Integrate from `(t0, y0)` until the scalar event `g(t, y)` changes sign
/// or `t_end` is reached. The crossing is refined until `|g| <= g_tol`
/// (or the bisection interval underflows).
pub fn integrate_until_event<F, G>(
    f: &F,
    t0: f64,
    y0: State4,
    t_end: f64,
    g: &G,
    g_tol: f64,
    opts: &OdeOptions,
) -> Result<EventOutcome, OdeError>
where
    F: Fn(f64, &State4) -> State4,
    G: Fn(f64, &State4) -> f64,
{
    let g0 = g(t0, &y0);
    if g0.abs() <= g_tol {
        return Ok(EventOutcome::Event { t: t0, y: y0, g: g0 });
    }
    integrate_until_event_signed(f, t0, y0, t_end, g, g_tol, g0.signum(), opts)
}

/// Like `integrate_until_event`, but the starting side of the event surface
/// is asserted by the caller instead of measured. Needed when the initial
/// state sits exactly on the surface (entry into an obstacle support): the
/// caller knows the trajectory moves to the `sign0` side first, and the
/// detector then waits for the return crossing.
pub fn integrate_until_event_signed<F, G>(
    f: &F,
    t0: f64,
    y0: State4,
    t_end: f64,
    g: &G,
    g_tol: f64,
    sign0: f64,
    opts: &OdeOptions,
) -> Result<EventOutcome, OdeError>
where
    F: Fn(f64, &State4) -> State4,
    G: Fn(f64, &State4) -> f64,
{
    let mut hit: Option<(f64, State4, f64)> = None;
    let mut g_prev = sign0;
    let y_final = drive(f, t0, y0, t_end, opts, |t_lo, y_lo, h, t_hi, y_hi| {
        let g_hi = g(t_hi, y_hi);
        if g_hi.signum() != sign0 || g_hi.abs() <= g_tol {
            // Bisection on tau in (0, h]: trial state via one RK step of size tau.
            let k1 = f(t_lo, y_lo);
            let eval = |tau: f64| -> (State4, f64) {
                if tau <= 0.0 {
                    return (*y_lo, g_prev * g_tol);
                }
                let (ytr, _, _) = dp5_step(f, t_lo, y_lo, tau, &k1, opts.rtol, opts.atol);
                let gv = g(t_lo + tau, &ytr);
                (ytr, gv)
            };
            let mut lo = 0.0f64;
            let mut hi = h;
            let (mut best_y, mut best_g) = (*y_hi, g_hi);
            let mut best_t = hi;
            for _ in 0..200 {
                if best_g.abs() <= g_tol || (hi - lo) <= f64::EPSILON * h {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let (ym, gm) = eval(mid);
                if gm.abs() < best_g.abs() {
                    best_y = ym;
                    best_g = gm;
                    best_t = mid;
                }
                if gm.signum() == sign0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hit = Some((t_lo + best_t, best_y, best_g));
            return false;
        }
        g_prev = g_hi;
        true
    })?;
    Ok(match hit {
        Some((t, y, gv)) => EventOutcome::Event { t, y, g: gv },
        None => EventOutcome::Expired { y: y_final },
    })
}
