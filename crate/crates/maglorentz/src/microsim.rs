//! Backward flow through a sampled medium, and Monte Carlo estimators on it.
//!
//! The transported density at (x, v, t) is f0 evaluated at the phase point
//! that evolves into (x, v) after time t. That point is reached by running
//! the dynamics backward, which this module does by the standard trick of
//! negating both the velocity and the field and running forward. All event
//! bookkeeping (collision log, pathology flags) is therefore stamped in
//! backward time: stamps are <= 0 and decrease along the log.
//!
//! Obstacle supports may overlap. The flow integrates one obstacle at a
//! time (the one whose boundary was crossed), ignoring forces from any
//! other support the path happens to traverse; such trajectories are
//! flagged (overlap / interference / recollision) and the restricted
//! estimator excludes them, so the approximation never contaminates the
//! flag-free statistics. For hard disks the one-at-a-time rule is exact.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::dynamics::{
    cyclotron_advance, cyclotron_center, first_obstacle_hit, integrate_in_potential,
    DynamicsError, FieldParams, Obstacle, PhaseState,
};
use crate::medium::{MediumSample, RegimeKind, ScalingRegime};
use crate::ode::{self, OdeOptions};
use crate::potential::PotentialSpec;
use crate::vec2::Vec2;

/// Source of obstacles for the flow loop. `near` must return every obstacle
/// whose support can intersect the disk of radius `radius` around `center`;
/// `query_cap` bounds the radius a single query may use.
pub trait ObstacleField {
    fn near(&self, center: Vec2, radius: f64) -> Vec<Obstacle>;
    fn support_radius(&self) -> f64;
    fn query_cap(&self) -> f64;
}

impl ObstacleField for MediumSample {
    fn near(&self, center: Vec2, radius: f64) -> Vec<Obstacle> {
        self.obstacles_near(center, radius)
    }
    fn support_radius(&self) -> f64 {
        self.obstacle_radius()
    }
    fn query_cap(&self) -> f64 {
        // obstacles_near refuses queries beyond 64 cells; stay strictly under
        63.0 * self.cell_size()
    }
}

/// Fixed obstacle list, for hand-built configurations.
#[derive(Debug, Clone)]
pub struct FixedObstacles {
    pub obstacles: Vec<Obstacle>,
    pub radius: f64,
}

impl FixedObstacles {
    pub fn new(centers: &[Vec2], radius: f64) -> Self {
        let obstacles = centers
            .iter()
            .enumerate()
            .map(|(i, &c)| Obstacle::new(c, radius).with_id(i as u64 + 1))
            .collect();
        FixedObstacles { obstacles, radius }
    }
}

impl ObstacleField for FixedObstacles {
    fn near(&self, center: Vec2, radius: f64) -> Vec<Obstacle> {
        let reach = radius + self.radius;
        self.obstacles.iter().filter(|o| o.c.dist(center) <= reach).copied().collect()
    }
    fn support_radius(&self) -> f64 {
        self.radius
    }
    fn query_cap(&self) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MicrosimError {
    #[error(
        "traversal failed at obstacle {obstacle_id} entered at backward time {t_entry:.6e}, \
         entry x = ({x:.6e}, {y:.6e}), v = ({vx:.6e}, {vy:.6e}): {source}"
    )]
    Traversal {
        obstacle_id: u64,
        t_entry: f64,
        x: f64,
        y: f64,
        vx: f64,
        vy: f64,
        source: DynamicsError,
    },
}

/// One support traversal. Stamps are backward times (<= 0); `t_entry`
/// decreases strictly along the log.
#[derive(Debug, Clone, Copy)]
pub struct CollisionRecord {
    pub t_entry: f64,
    /// Backward stamp of leaving the support (= `t_entry` for hard disks).
    pub t_exit: f64,
    pub obstacle: Obstacle,
    /// Impact parameter at entry in hat units (physical value / eps), the
    /// argument the scattering tables take.
    pub rho: f64,
    /// Velocity rotation across the traversal, wrapped to (-pi, pi].
    pub theta: f64,
    /// Field rotation Omega * (free-flight duration) of the arc following
    /// this record; for the last record, of the tail arc to the horizon.
    pub arc_angle: f64,
}

/// Pathology flags. Each carries the backward stamp of the first occurrence
/// (the largest stamp, since backward time decreases along the flow);
/// paired indices reference entries of `EventLog::collisions`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventFlags {
    /// Set when the trajectory starts strictly inside a support. The
    /// enclosing obstacles are excluded from the run to keep it defined.
    pub initial_inside: Option<f64>,
    /// Two hit obstacles with overlapping supports, flagged at the later hit.
    pub overlap: Option<(f64, usize, usize)>,
    /// Support of an earlier-hit obstacle touched again, either as a
    /// duplicate record (j > i+1) or by the geometric re-scan. For a tail-arc
    /// incursion j equals the record count (no following collision).
    pub recollision: Option<(f64, usize, usize)>,
    /// Support of a later-hit obstacle touched before its collision.
    pub interference: Option<(f64, usize, usize)>,
    /// A collision-free full cyclotron period.
    pub full_circle: Option<f64>,
    /// A collision-free window of the configured length.
    pub long_arc: Option<f64>,
}

impl EventFlags {
    pub fn any(&self) -> bool {
        self.initial_inside.is_some()
            || self.overlap.is_some()
            || self.recollision.is_some()
            || self.interference.is_some()
            || self.full_circle.is_some()
            || self.long_arc.is_some()
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub collisions: Vec<CollisionRecord>,
    pub flags: EventFlags,
    /// Flow horizon (the backward trajectory covers [-t_total, 0]).
    pub t_total: f64,
    /// Largest time spent inside a single support, the detector slack.
    pub max_collision_time: f64,
    /// Tangency candidates discarded during hit scans.
    pub grazing_degenerate: usize,
}

#[derive(Debug, Clone)]
pub enum SegmentKind {
    Free,
    /// Motion inside the support of `collisions[record]`; `path` is the
    /// accepted-step dense output, times relative to the segment start.
    Interaction { record: usize, path: Vec<(f64, PhaseState)> },
}

#[derive(Debug, Clone)]
pub struct Segment {
    /// Internal clock at the segment start (backward stamp is the negative).
    pub s0: f64,
    pub duration: f64,
    pub start: PhaseState,
    /// For free segments: the records whose exit/entry bound the arc.
    pub prev_record: Option<usize>,
    pub next_record: Option<usize>,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn end_state(&self, field: &FieldParams) -> PhaseState {
        match &self.kind {
            SegmentKind::Free => cyclotron_advance(&self.start, self.duration, field),
            SegmentKind::Interaction { path, .. } => {
                path.last().map(|(_, st)| *st).unwrap_or(self.start)
            }
        }
    }
}

/// Piecewise trajectory of the internal (reversed) run, contiguous in its
/// own forward clock.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub segments: Vec<Segment>,
    pub t_total: f64,
    /// Field of the internal run (the caller's field, reversed).
    pub field: FieldParams,
}

impl Trajectory {
    pub fn end_state(&self) -> PhaseState {
        match self.segments.last() {
            Some(seg) => seg.end_state(&self.field),
            None => PhaseState::new(Vec2::ZERO, Vec2::new(1.0, 0.0)),
        }
    }

    /// Vertex chain of positions sampled at most `ds` apart along every
    /// segment (interaction segments contribute their accepted steps).
    pub fn polyline(&self, ds: f64) -> Vec<Vec2> {
        assert!(ds > 0.0);
        let mut pts: Vec<Vec2> = Vec::new();
        let mut push = |p: Vec2| {
            if pts.last().map_or(true, |q| q.dist(p) > 0.0) {
                pts.push(p);
            }
        };
        for seg in &self.segments {
            match &seg.kind {
                SegmentKind::Free => {
                    let n = (seg.duration / ds).ceil().max(1.0) as usize;
                    for i in 0..=n {
                        let u = seg.duration * i as f64 / n as f64;
                        push(cyclotron_advance(&seg.start, u, &self.field).x);
                    }
                }
                SegmentKind::Interaction { path, .. } => {
                    for (_, st) in path {
                        push(st.x);
                    }
                }
            }
        }
        pts
    }
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    /// The phase point that evolves into the initial one after time t.
    pub final_state: PhaseState,
    pub trajectory: Trajectory,
    pub log: EventLog,
}

/// Default empty-window length for the long-arc flag: T_L * eps^alpha in
/// the coupled regimes (the exponent must stay below twice the coupling
/// exponent, which alpha does). In the low-density regimes sub-period arcs
/// are harmless, so the window is the full period and the flag coincides
/// with the full-circle one. None at zero field.
pub fn default_arc_window(regime: &ScalingRegime, field: &FieldParams) -> Option<f64> {
    if !field.t_l.is_finite() {
        return None;
    }
    Some(match regime.kind {
        RegimeKind::WeakCoupling { alpha } | RegimeKind::Intermediate { alpha } => {
            field.t_l * regime.eps.powf(alpha)
        }
        RegimeKind::BoltzmannGrad | RegimeKind::LongRangeTruncated { .. } => field.t_l,
    })
}

/// Backward flow for time `t` through a sampled medium.
pub fn flow(
    initial: &PhaseState,
    t: f64,
    sample: &MediumSample,
    pot: &PotentialSpec,
    field: &FieldParams,
) -> Result<FlowOutcome, MicrosimError> {
    debug_assert!(
        (pot.support_radius() - sample.obstacle_radius()).abs()
            <= 1e-12 * pot.support_radius(),
        "potential support inconsistent with the medium's obstacle radius"
    );
    flow_in_field(initial, t, sample, pot, field, default_arc_window(sample.regime(), field))
}

/// Same-obstacle re-hits this soon after a grazing touch are treated as the
/// tangency continuing and stepped past, breaking Zeno chains.
const GUARD_DT: f64 = 1e-11;
const GUARD_NUDGE: f64 = 1e-9;

/// Backward flow against an arbitrary obstacle field (the general form;
/// `flow` supplies the medium and the default arc window).
pub fn flow_in_field<F: ObstacleField + ?Sized>(
    initial: &PhaseState,
    t: f64,
    obstacles: &F,
    pot: &PotentialSpec,
    field: &FieldParams,
    arc_window: Option<f64>,
) -> Result<FlowOutcome, MicrosimError> {
    assert!(t > 0.0, "flow horizon must be positive");
    let fld = field.reversed();
    let mut state = initial.reversed();
    let mut s = 0.0f64;

    // supports containing the start point are excluded so the run stays
    // defined; the flag removes it from restricted estimates anyway
    let mut phantom: Vec<u64> = Vec::new();
    for ob in obstacles.near(initial.x, 0.0) {
        if ob.c.dist(initial.x) < ob.radius {
            phantom.push(ob.id);
        }
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut records: Vec<CollisionRecord> = Vec::new();
    let mut grazing = 0usize;
    let mut max_tau = 0.0f64;
    let mut last_exit_s = 0.0f64;
    let mut guard: Option<(u64, f64)> = None;

    let push_free = |segments: &mut Vec<Segment>, records: &[CollisionRecord], s0: f64, start: PhaseState, d: f64| {
        if d <= 0.0 {
            return;
        }
        if let Some(seg) = segments.last_mut() {
            if matches!(seg.kind, SegmentKind::Free) {
                seg.duration += d;
                return;
            }
        }
        segments.push(Segment {
            s0,
            duration: d,
            start,
            prev_record: records.len().checked_sub(1),
            next_record: None,
            kind: SegmentKind::Free,
        });
    };

    loop {
        let remaining = t - s;
        if remaining <= 0.0 {
            break;
        }
        let (query_c, query_r, hop) = if fld.omega != 0.0 {
            // the whole orbit lies on one circle; one query covers any hop
            (cyclotron_center(&state, &fld), fld.r_l, remaining.min(fld.t_l))
        } else {
            let hop = remaining.min(obstacles.query_cap() * 0.25);
            (state.x + state.v * (hop * 0.5), hop * 0.5, hop)
        };
        let mut cands = obstacles.near(query_c, query_r);
        if !phantom.is_empty() {
            cands.retain(|o| !phantom.contains(&o.id));
        }
        let scan = first_obstacle_hit(&state, cands.iter().copied(), &fld, hop);
        grazing += scan.grazing_degenerate;

        if let (Some(h), Some((gid, gs))) = (&scan.hit, guard) {
            if h.obstacle.id == gid && s + h.t - gs <= GUARD_DT {
                // tangency continuing: step just past it and rescan
                let d = GUARD_NUDGE.min(remaining);
                push_free(&mut segments, &records, s, state, d);
                state = cyclotron_advance(&state, d, &fld);
                s += d;
                guard = None;
                continue;
            }
        }

        match scan.hit {
            None => {
                // an empty full period at nonzero field is empty forever
                let d = if fld.omega != 0.0 && hop >= fld.t_l { remaining } else { hop };
                push_free(&mut segments, &records, s, state, d);
                state = cyclotron_advance(&state, d, &fld);
                s += d;
                if d == remaining {
                    s = t;
                }
                guard = None;
            }
            Some(hit) => {
                push_free(&mut segments, &records, s, state, hit.t);
                let s_entry = s + hit.t;
                let entry = hit.state;
                if let Some(seg) = segments.last_mut() {
                    if matches!(seg.kind, SegmentKind::Free) && seg.next_record.is_none() {
                        seg.next_record = Some(records.len());
                    }
                }
                if let Some(prev) = records.last_mut() {
                    prev.arc_angle = field.omega * (s_entry - last_exit_s);
                }

                let tr = integrate_in_potential(&entry, &hit.obstacle, pot, &fld).map_err(
                    |e| MicrosimError::Traversal {
                        obstacle_id: hit.obstacle.id,
                        t_entry: -s_entry,
                        x: entry.x.x,
                        y: entry.x.y,
                        vx: entry.v.x,
                        vy: entry.v.y,
                        source: e,
                    },
                )?;

                let budget = t - s_entry;
                if tr.tau > budget {
                    // horizon expires inside the support: integrate the
                    // interior motion for the exact leftover time
                    let cut = interior_state_at(&entry, &hit.obstacle, pot, &fld, budget)
                        .map_err(|e| MicrosimError::Traversal {
                            obstacle_id: hit.obstacle.id,
                            t_entry: -s_entry,
                            x: entry.x.x,
                            y: entry.x.y,
                            vx: entry.v.x,
                            vy: entry.v.y,
                            source: e,
                        })?;
                    let mut path: Vec<(f64, PhaseState)> =
                        tr.path.iter().copied().filter(|(u, _)| *u < budget).collect();
                    path.push((budget, cut));
                    let theta = rotation_angle(entry.v, cut.v);
                    records.push(CollisionRecord {
                        t_entry: -s_entry,
                        t_exit: -t,
                        obstacle: hit.obstacle,
                        rho: hit.rho / pot.eps(),
                        theta,
                        arc_angle: 0.0,
                    });
                    max_tau = max_tau.max(budget);
                    segments.push(Segment {
                        s0: s_entry,
                        duration: budget,
                        start: entry,
                        prev_record: None,
                        next_record: None,
                        kind: SegmentKind::Interaction { record: records.len() - 1, path },
                    });
                    state = cut;
                    last_exit_s = t;
                    break;
                }

                let theta = rotation_angle(entry.v, tr.exit.v);
                records.push(CollisionRecord {
                    t_entry: -s_entry,
                    t_exit: -(s_entry + tr.tau),
                    obstacle: hit.obstacle,
                    rho: hit.rho / pot.eps(),
                    theta,
                    arc_angle: 0.0,
                });
                max_tau = max_tau.max(tr.tau);
                let grazed = tr.tau == 0.0 && (tr.exit.v - entry.v).norm() == 0.0;
                segments.push(Segment {
                    s0: s_entry,
                    duration: tr.tau,
                    start: entry,
                    prev_record: None,
                    next_record: None,
                    kind: SegmentKind::Interaction { record: records.len() - 1, path: tr.path },
                });
                // the exit sits on the zero-potential shell, so unit speed is
                // exact there; project out the integrator's energy drift to
                // keep the next arc's geometry consistent with the field
                state = PhaseState::new(tr.exit.x, tr.exit.v.normalized());
                s = s_entry + tr.tau;
                last_exit_s = s;
                guard = if grazed { Some((hit.obstacle.id, s)) } else { None };
            }
        }
    }

    if let Some(last) = records.last_mut() {
        last.arc_angle = field.omega * (t - last_exit_s);
    }

    let mut log = EventLog {
        collisions: records,
        flags: EventFlags::default(),
        t_total: t,
        max_collision_time: max_tau,
        grazing_degenerate: grazing,
    };
    if !phantom.is_empty() {
        log.flags.initial_inside = Some(0.0);
    }
    let trajectory = Trajectory { segments, t_total: t, field: fld };
    log.flags.full_circle = detect_circ(&log, field, max_tau);
    log.flags.long_arc = arc_window.and_then(|w| detect_arc(&log, field, w));
    let (rec, inter, ov) = detect_recollision_interference_overlap(&trajectory, &log);
    log.flags.recollision = rec;
    log.flags.interference = inter;
    log.flags.overlap = ov;

    Ok(FlowOutcome { final_state: state.reversed(), trajectory, log })
}

/// Signed rotation carrying `from` to `to`, in (-pi, pi].
fn rotation_angle(from: Vec2, to: Vec2) -> f64 {
    let a = (-from.cross(to)).atan2(from.dot(to));
    if a == -PI {
        PI
    } else {
        -a
    }
}

/// Interior state after `dt` inside one support (no exit event expected).
fn interior_state_at(
    entry: &PhaseState,
    obstacle: &Obstacle,
    pot: &PotentialSpec,
    field: &FieldParams,
    dt: f64,
) -> Result<PhaseState, DynamicsError> {
    if pot.is_hard_disk() {
        // traversal is instantaneous, never enters here with dt > 0
        return Ok(*entry);
    }
    let prep = pot.prepared().expect("soft potential");
    let c = obstacle.c;
    let om = field.omega;
    let rhs = move |_t: f64, y: &ode::State4| -> ode::State4 {
        let rel = Vec2::new(y[0] - c.x, y[1] - c.y);
        let d = rel.norm();
        let f_rad = -prep.du_physical(d) / d;
        [y[2], y[3], om * (-y[3]) + f_rad * rel.x, om * y[2] + f_rad * rel.y]
    };
    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        h_max: 0.25 * obstacle.radius,
        max_steps: 20_000_000,
    };
    let y = ode::integrate_to(&rhs, 0.0, entry.to_state4(), dt, &opts)?;
    Ok(PhaseState::from_state4(&y))
}

/// First backward stamp bounding an inter-collision gap of at least
/// `threshold`, including the horizon ends, if any.
fn gap_at_least(log: &EventLog, threshold: f64) -> Option<f64> {
    let mut prev = 0.0f64;
    for r in &log.collisions {
        if prev - r.t_entry >= threshold {
            return Some(prev);
        }
        prev = r.t_entry;
    }
    if prev + log.t_total >= threshold {
        return Some(prev);
    }
    None
}

/// Flag a collision-free full cyclotron period. Gaps are measured between
/// consecutive entry stamps (plus the horizon ends), which overestimate the
/// free flight by at most one traversal time; lowering the threshold by
/// `tau_bound` keeps the detector conservative.
pub fn detect_circ(log: &EventLog, field: &FieldParams, tau_bound: f64) -> Option<f64> {
    if !field.t_l.is_finite() {
        return None;
    }
    gap_at_least(log, field.t_l - tau_bound)
}

/// Flag a collision-free window of length `window`, with the same slack as
/// `detect_circ` taken from the log's measured max traversal time.
pub fn detect_arc(log: &EventLog, field: &FieldParams, window: f64) -> Option<f64> {
    let _ = field;
    if !window.is_finite() {
        return None;
    }
    gap_at_least(log, window - log.max_collision_time)
}

/// Earliest time in [0, d] at which the free orbit from `start` is inside
/// the disk (c, a), if any.
fn free_arc_incidence(
    start: &PhaseState,
    d: f64,
    field: &FieldParams,
    c: Vec2,
    a: f64,
) -> Option<f64> {
    if start.x.dist(c) < a * (1.0 - 1e-12) {
        return Some(0.0);
    }
    if field.omega == 0.0 {
        let w = start.x - c;
        let b = start.v.dot(w);
        let q = w.norm_sq() - a * a;
        let disc = b * b - q;
        if disc <= 1e-13 * a * a {
            return None;
        }
        let u = -b - disc.sqrt();
        if u >= 0.0 && u <= d {
            Some(u)
        } else {
            None
        }
    } else {
        let o = cyclotron_center(start, field);
        let r = field.r_l;
        let dd = o.dist(c);
        if dd <= 1e-12 * r {
            return None; // concentric: constant clearance, start not inside
        }
        let cb = (r * r + dd * dd - a * a) / (2.0 * r * dd);
        if !(-1.0..1.0).contains(&cb) {
            return None; // disjoint, tangent, or enclosing (caught above)
        }
        let beta = cb.acos();
        let phi_c = (c - o).angle();
        let psi0 = (start.x - o).angle();
        let sweep = field.omega.abs() * d;
        let u_ang = if field.omega > 0.0 {
            (phi_c - beta - psi0).rem_euclid(2.0 * PI)
        } else {
            (psi0 - (phi_c + beta)).rem_euclid(2.0 * PI)
        };
        if u_ang <= sweep {
            Some(u_ang / field.omega.abs())
        } else {
            None
        }
    }
}

/// Geometric re-scan of the retained trajectory against every hit support.
/// Returns (recollision, interference, overlap) with first-occurrence
/// backward stamps and record indices.
///
/// A free arc can only dip into a non-adjacent support through overlap
/// leakage or tangency corner cases (an ordinary inward crossing would have
/// produced a collision record), so the scan mostly works on interaction
/// paths and start-inside arcs; duplicate obstacle ids in the log seed the
/// recollision flag directly.
pub fn detect_recollision_interference_overlap(
    traj: &Trajectory,
    log: &EventLog,
) -> (
    Option<(f64, usize, usize)>,
    Option<(f64, usize, usize)>,
    Option<(f64, usize, usize)>,
) {
    let n = log.collisions.len();
    let mut rec: Option<(f64, usize, usize)> = None;
    let mut inter: Option<(f64, usize, usize)> = None;
    let mut ov: Option<(f64, usize, usize)> = None;
    // first occurrence = largest backward stamp
    let better = |cur: &Option<(f64, usize, usize)>, t: f64| cur.map_or(true, |(tc, _, _)| t > tc);

    for j in 1..n {
        for i in 0..j {
            let (oi, oj) = (&log.collisions[i].obstacle, &log.collisions[j].obstacle);
            if oi.id != oj.id && oi.c.dist(oj.c) < oi.radius + oj.radius {
                let t = log.collisions[j].t_entry;
                if better(&ov, t) {
                    ov = Some((t, i, j));
                }
            }
        }
    }
    for j in 2..n {
        for i in 0..j - 1 {
            if log.collisions[i].obstacle.id == log.collisions[j].obstacle.id {
                let t = log.collisions[j].t_entry;
                if better(&rec, t) {
                    rec = Some((t, i, j));
                }
            }
        }
    }

    for seg in &traj.segments {
        match &seg.kind {
            SegmentKind::Free => {
                // the arc's endpoints legitimately touch the supports of its
                // bounding obstacles, so those ids are exempt wherever they
                // appear in the log (consecutive re-hits duplicate them)
                let p = seg.prev_record;
                let q = seg.next_record;
                let pid = p.map(|i| log.collisions[i].obstacle.id);
                let qid = q.map(|i| log.collisions[i].obstacle.id);
                for (k, r) in log.collisions.iter().enumerate() {
                    if Some(r.obstacle.id) == pid || Some(r.obstacle.id) == qid {
                        continue;
                    }
                    let ob = &r.obstacle;
                    if let Some(u) = free_arc_incidence(
                        &seg.start,
                        seg.duration,
                        &traj.field,
                        ob.c,
                        ob.radius,
                    ) {
                        let t = -(seg.s0 + u);
                        let after = q.unwrap_or(n);
                        if k < after {
                            if better(&rec, t) {
                                rec = Some((t, k, after));
                            }
                        } else if better(&inter, t) {
                            inter = Some((t, after, k));
                        }
                    }
                }
            }
            SegmentKind::Interaction { record, path } => {
                // own id exempt (the path is inside that support); adjacent
                // records exempt too, their interpenetration is the overlap
                // flag's business and keeps recollision indices non-adjacent
                let own = log.collisions[*record].obstacle.id;
                for (k, r) in log.collisions.iter().enumerate() {
                    if r.obstacle.id == own || k + 1 == *record || k == *record + 1 {
                        continue;
                    }
                    let ob = &r.obstacle;
                    for (u, st) in path {
                        if st.x.dist(ob.c) < ob.radius * (1.0 - 1e-12) {
                            let t = -(seg.s0 + u);
                            if k < *record {
                                if better(&rec, t) {
                                    rec = Some((t, k, *record));
                                }
                            } else if better(&inter, t) {
                                inter = Some((t, *record, k));
                            }
                            break;
                        }
                    }
                }
            }
        }
    }
    (rec, inter, ov)
}

/// Counts of flagged trajectories; `n` is the number scanned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathologyCounts {
    pub n: u64,
    pub initial_inside: u64,
    pub overlap: u64,
    pub recollision: u64,
    pub interference: u64,
    pub full_circle: u64,
    pub long_arc: u64,
}

impl PathologyCounts {
    pub fn record(&mut self, flags: &EventFlags) {
        self.n += 1;
        self.initial_inside += flags.initial_inside.is_some() as u64;
        self.overlap += flags.overlap.is_some() as u64;
        self.recollision += flags.recollision.is_some() as u64;
        self.interference += flags.interference.is_some() as u64;
        self.full_circle += flags.full_circle.is_some() as u64;
        self.long_arc += flags.long_arc.is_some() as u64;
    }

    pub fn merge(&mut self, o: &PathologyCounts) {
        self.n += o.n;
        self.initial_inside += o.initial_inside;
        self.overlap += o.overlap;
        self.recollision += o.recollision;
        self.interference += o.interference;
        self.full_circle += o.full_circle;
        self.long_arc += o.long_arc;
    }

    pub fn named(&self) -> [(&'static str, u64); 6] {
        [
            ("chi1", self.initial_inside),
            ("overlap", self.overlap),
            ("recollision", self.recollision),
            ("interference", self.interference),
            ("circ", self.full_circle),
            ("arc", self.long_arc),
        ]
    }

    pub fn fraction(&self, count: u64) -> f64 {
        count as f64 / self.n.max(1) as f64
    }
}

/// Monte Carlo estimate of the transported density over quenched media.
#[derive(Debug, Clone)]
pub struct FEpsEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Contributions from flag-free trajectories only (flagged ones count
    /// as zero), pointwise below `mean` for nonnegative densities.
    pub restricted_mean: Vec<f64>,
    pub restricted_stderr: Vec<f64>,
    pub pathology: PathologyCounts,
    pub n_seeds: u64,
}

pub type Observable = dyn Fn(&PhaseState) -> f64 + Sync;

/// Stable seed derivation for substreams (media, particles, blocks).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    splitmix64(seed ^ splitmix64(k))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

struct Partial {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    r_sum: Vec<f64>,
    r_sum_sq: Vec<f64>,
    counts: PathologyCounts,
}

impl Partial {
    fn new(np: usize) -> Self {
        Partial {
            sum: vec![0.0; np],
            sum_sq: vec![0.0; np],
            r_sum: vec![0.0; np],
            r_sum_sq: vec![0.0; np],
            counts: PathologyCounts::default(),
        }
    }
    fn fold(&mut self, o: &Partial) {
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sum_sq[i] += o.sum_sq[i];
            self.r_sum[i] += o.r_sum[i];
            self.r_sum_sq[i] += o.r_sum_sq[i];
        }
        self.counts.merge(&o.counts);
    }
}

/// Seeds per work block. Blocks are processed in order inside each task and
/// folded in block order afterwards, so results do not depend on the worker
/// count.
const SEED_BLOCK: u64 = 64;

/// Average of f0 carried by the exact backward flow, over `n_seeds`
/// independent media, evaluated at each probe state. The same quenched
/// medium serves every probe within one seed. At t = 0 the density is
/// returned exactly.
pub fn estimate_f_eps(
    f0: &Observable,
    probes: &[PhaseState],
    t: f64,
    regime: &ScalingRegime,
    field: &FieldParams,
    n_seeds: u64,
    seed: u64,
) -> Result<FEpsEstimate, MicrosimError> {
    assert!(n_seeds > 0 && !probes.is_empty());
    let np = probes.len();
    if t == 0.0 {
        let vals: Vec<f64> = probes.iter().map(|p| f0(p)).collect();
        return Ok(FEpsEstimate {
            mean: vals.clone(),
            stderr: vec![0.0; np],
            restricted_mean: vals,
            restricted_stderr: vec![0.0; np],
            pathology: PathologyCounts::default(),
            n_seeds,
        });
    }
    let pot = regime.potential();
    let n_blocks = (n_seeds + SEED_BLOCK - 1) / SEED_BLOCK;
    let partials: Vec<Result<Partial, MicrosimError>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut part = Partial::new(np);
            for k in b * SEED_BLOCK..((b + 1) * SEED_BLOCK).min(n_seeds) {
                let medium = MediumSample::new(derive_seed(seed, k), regime.clone(), field);
                for (i, probe) in probes.iter().enumerate() {
                    let out = flow(probe, t, &medium, &pot, field)?;
                    let v = f0(&out.final_state);
                    part.sum[i] += v;
                    part.sum_sq[i] += v * v;
                    let r = if out.log.flags.any() { 0.0 } else { v };
                    part.r_sum[i] += r;
                    part.r_sum_sq[i] += r * r;
                    part.counts.record(&out.log.flags);
                }
            }
            Ok(part)
        })
        .collect();

    let mut total = Partial::new(np);
    for p in partials {
        total.fold(&p?);
    }
    let n = n_seeds as f64;
    let sdev = |sum: f64, sq: f64| {
        if n_seeds < 2 {
            return 0.0;
        }
        let m = sum / n;
        ((sq / n - m * m).max(0.0) / (n - 1.0)).sqrt()
    };
    Ok(FEpsEstimate {
        mean: total.sum.iter().map(|s| s / n).collect(),
        stderr: total.sum.iter().zip(&total.sum_sq).map(|(&s, &q)| sdev(s, q)).collect(),
        restricted_mean: total.r_sum.iter().map(|s| s / n).collect(),
        restricted_stderr: total
            .r_sum
            .iter()
            .zip(&total.r_sum_sq)
            .map(|(&s, &q)| sdev(s, q))
            .collect(),
        pathology: total.counts,
        n_seeds,
    })
}

/// Per-seed flow summary, for detailed run dumps.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed_index: u64,
    pub final_state: PhaseState,
    pub n_collisions: usize,
    pub flags: EventFlags,
}

pub fn seed_outcomes(
    probe: &PhaseState,
    t: f64,
    regime: &ScalingRegime,
    field: &FieldParams,
    n_seeds: u64,
    seed: u64,
) -> Result<Vec<SeedOutcome>, MicrosimError> {
    let pot = regime.potential();
    (0..n_seeds)
        .into_par_iter()
        .map(|k| {
            let medium = MediumSample::new(derive_seed(seed, k), regime.clone(), field);
            let out = flow(probe, t, &medium, &pot, field)?;
            Ok(SeedOutcome {
                seed_index: k,
                final_state: out.final_state,
                n_collisions: out.log.collisions.len(),
                flags: out.log.flags,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PathologyRow {
    pub eps: f64,
    pub counts: PathologyCounts,
}

/// Empirical pathology frequencies across a decreasing eps list spanning at
/// least two decades (three or more entries).
pub fn pathology_scan(
    regime: &ScalingRegime,
    eps_list: &[f64],
    t: f64,
    n_seeds: u64,
    field: &FieldParams,
    seed: u64,
) -> Result<Vec<PathologyRow>, MicrosimError> {
    assert!(eps_list.len() >= 3, "need at least three eps values");
    assert!(eps_list.windows(2).all(|w| w[1] < w[0]), "eps list must decrease");
    assert!(
        eps_list[0] / eps_list[eps_list.len() - 1] >= 100.0 * (1.0 - 1e-12),
        "eps list must span at least two decades"
    );
    let probe = PhaseState::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
    let zero: &Observable = &|_s: &PhaseState| 0.0;
    eps_list
        .iter()
        .map(|&eps| {
            let reg = regime.with_eps(eps).expect("eps must stay in (0,1)");
            let est =
                estimate_f_eps(zero, &[probe], t, &reg, field, n_seeds, seed ^ eps.to_bits())?;
            Ok(PathologyRow { eps, counts: est.pathology })
        })
        .collect()
}

/// Log-log slopes of the flag frequencies across the scan rows, per flag,
/// where every row has a nonzero count.
pub fn pathology_slopes(rows: &[PathologyRow]) -> Vec<(&'static str, Option<f64>)> {
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let mut out = Vec::new();
    for idx in 0..6 {
        let name = rows[0].counts.named()[idx].0;
        let freqs: Vec<f64> = rows
            .iter()
            .map(|r| {
                let c = r.counts.named()[idx].1;
                r.counts.fraction(c)
            })
            .collect();
        let slope = if freqs.iter().all(|&f| f > 0.0) {
            Some(crate::stats::loglog_slope(&eps, &freqs))
        } else {
            None
        };
        out.push((name, slope));
    }
    out
}

/// Area of the set of points within `radius` of the trajectory, by adaptive
/// quadtree rasterization against the sampled polyline. Resolution runs to
/// radius/512, keeping the relative error a few tenths of a percent for
/// trajectories a few periods long.
pub fn tube_area(traj: &Trajectory, radius: f64) -> f64 {
    assert!(radius > 0.0);
    let pts = traj.polyline(radius / 8.0);
    if pts.len() < 2 {
        return PI * radius * radius;
    }
    let cell = radius;
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let key = |p: Vec2| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    for i in 0..pts.len() - 1 {
        let (a, b) = (pts[i], pts[i + 1]);
        let (k0, k1) = (key(a), key(b));
        for ki in k0.0.min(k1.0)..=k0.0.max(k1.0) {
            for kj in k0.1.min(k1.1)..=k0.1.max(k1.1) {
                buckets.entry((ki, kj)).or_default().push(i);
            }
        }
    }
    let seg_dist = |p: Vec2, i: usize| -> f64 {
        let (a, b) = (pts[i], pts[i + 1]);
        let ab = b - a;
        let len2 = ab.norm_sq();
        let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        p.dist(a + ab * t)
    };
    let dist = |p: Vec2, cutoff: f64| -> f64 {
        let reach = ((cutoff / cell).ceil() as i64) + 1;
        let (ci, cj) = key(p);
        let mut best = f64::INFINITY;
        for ki in ci - reach..=ci + reach {
            for kj in cj - reach..=cj + reach {
                if let Some(v) = buckets.get(&(ki, kj)) {
                    for &i in v {
                        best = best.min(seg_dist(p, i));
                    }
                }
            }
        }
        best
    };
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in &pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    lo = lo - Vec2::new(radius, radius);
    hi = hi + Vec2::new(radius, radius);

    let h_min = radius / 512.0;
    // classify a square cell by its center distance; a cell is decided when
    // the distance clears the half-diagonal margin, else subdivided
    fn classify(
        center: Vec2,
        half: f64,
        radius: f64,
        h_min: f64,
        dist: &dyn Fn(Vec2, f64) -> f64,
    ) -> f64 {
        let margin = half * std::f64::consts::SQRT_2;
        let d = dist(center, radius + margin);
        if d >= radius + margin {
            return 0.0;
        }
        if d <= radius - margin {
            return 4.0 * half * half;
        }
        if 2.0 * half <= h_min {
            return if d <= radius { 4.0 * half * half } else { 0.0 };
        }
        let q = half * 0.5;
        let mut acc = 0.0;
        for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
            acc += classify(center + Vec2::new(sx * q, sy * q) * 2.0, q, radius, h_min, dist);
        }
        acc
    }

    let h0 = radius;
    let nx = ((hi.x - lo.x) / h0).ceil() as i64;
    let ny = ((hi.y - lo.y) / h0).ceil() as i64;
    let mut area = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let c = Vec2::new(lo.x + (i as f64 + 0.5) * h0, lo.y + (j as f64 + 0.5) * h0);
            area += classify(c, h0 * 0.5, radius, h_min, &|p, cut| dist(p, cut));
        }
    }
    area
}
