//! CR3BP seeds: libration points and symmetric periodic orbit families tuned
//! to periods commensurate with π.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{cr3bp_field, jacobi_constant, mirror_xy, State, SystemParams};
use crate::error::{Error, Result};
use crate::linalg::{min_norm_solve, null_vector, solve_square};
use crate::propagation::{IntegratorConfig, Propagator};

/// Newton iterations allowed by the CR3BP correctors.
pub const MAX_CORRECTOR_ITERATIONS: usize = 25;
/// Tolerance on the half-period (or section) targets.
const TARGET_TOL: f64 = 1e-12;
/// Integrator tolerance used by the shooting correctors.
const SHOOTING_TOL: f64 = 1e-13;
/// Required full-period closure of an emitted seed.
pub const PERIODICITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibrationPoint {
    pub index: u8,
    pub position: Vector3<f64>,
    pub mu: f64,
}

impl LibrationPoint {
    pub fn state(&self) -> State {
        State::new(self.position.x, self.position.y, self.position.z, 0.0, 0.0, 0.0)
    }

    /// `(1−μ)/r1³ + μ/r2³` at the point.
    fn c2(&self) -> f64 {
        let p = self.position;
        let r1 = (p - Vector3::new(-self.mu, 0.0, 0.0)).norm();
        let r2 = (p - Vector3::new(1.0 - self.mu, 0.0, 0.0)).norm();
        (1.0 - self.mu) / r1.powi(3) + self.mu / r2.powi(3)
    }
}

fn collinear_gradient(x: f64, mu: f64) -> f64 {
    let d1 = x + mu;
    let d2 = x - 1.0 + mu;
    x - (1.0 - mu) * d1 / d1.abs().powi(3) - mu * d2 / d2.abs().powi(3)
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let fm = f(mid);
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The five CR3BP equilibria, `L1` between the primaries, `L2` beyond the
/// smaller one, `L3` beyond the larger one.
pub fn libration_points(mu: f64) -> Result<[LibrationPoint; 5]> {
    if !(mu > 0.0 && mu < 0.5) {
        return Err(Error::Domain(mu));
    }
    let g = |x: f64| collinear_gradient(x, mu);
    let eps = 1e-9;
    let x1 = bisect(g, -mu + eps, 1.0 - mu - eps);
    let x2 = bisect(g, 1.0 - mu + eps, 2.0);
    let x3 = bisect(g, -2.0, -mu - eps);
    let h = 3f64.sqrt() / 2.0;
    let mk = |index, x, y| LibrationPoint {
        index,
        position: Vector3::new(x, y, 0.0),
        mu,
    };
    Ok([
        mk(1, x1, 0.0),
        mk(2, x2, 0.0),
        mk(3, x3, 0.0),
        mk(4, 0.5 - mu, h),
        mk(5, 0.5 - mu, -h),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hemisphere {
    North,
    South,
}

impl Hemisphere {
    fn suffix(self) -> &'static str {
        match self {
            Hemisphere::North => "N",
            Hemisphere::South => "S",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Hemisphere::North => Hemisphere::South,
            Hemisphere::South => Hemisphere::North,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrbitKind {
    /// The equilibrium itself.
    Point,
    Lyapunov,
    Halo(Hemisphere),
    Vertical,
    Butterfly(Hemisphere),
    Nrho(Hemisphere),
    /// Planar orbits about the triangular points.
    Planar,
}

/// Family label such as `L2-halo-N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FamilyTag {
    pub point: u8,
    pub kind: OrbitKind,
}

impl FamilyTag {
    pub fn new(point: u8, kind: OrbitKind) -> Self {
        Self { point, kind }
    }

    /// Same family with the hemisphere swapped, if it has one.
    pub fn mirrored(&self) -> Self {
        let kind = match self.kind {
            OrbitKind::Halo(h) => OrbitKind::Halo(h.opposite()),
            OrbitKind::Butterfly(h) => OrbitKind::Butterfly(h.opposite()),
            OrbitKind::Nrho(h) => OrbitKind::Nrho(h.opposite()),
            k => k,
        };
        Self { kind, ..*self }
    }
}

impl fmt::Display for FamilyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-", self.point)?;
        match self.kind {
            OrbitKind::Point => write!(f, "point"),
            OrbitKind::Lyapunov => write!(f, "lyapunov"),
            OrbitKind::Vertical => write!(f, "vertical"),
            OrbitKind::Planar => write!(f, "planar"),
            OrbitKind::Halo(h) => write!(f, "halo-{}", h.suffix()),
            OrbitKind::Butterfly(h) => write!(f, "butterfly-{}", h.suffix()),
            OrbitKind::Nrho(h) => write!(f, "nrho-{}", h.suffix()),
        }
    }
}

impl FromStr for FamilyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Precondition(format!("unknown family tag '{s}'"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (point, kind) = rest.split_once('-').ok_or_else(bad)?;
        let point: u8 = point.parse().map_err(|_| bad())?;
        if !(1..=5).contains(&point) {
            return Err(bad());
        }
        let hemi = |h: &str| match h {
            "N" => Ok(Hemisphere::North),
            "S" => Ok(Hemisphere::South),
            _ => Err(bad()),
        };
        let kind = match kind.split_once('-') {
            None => match kind {
                "point" => OrbitKind::Point,
                "lyapunov" => OrbitKind::Lyapunov,
                "vertical" => OrbitKind::Vertical,
                "planar" => OrbitKind::Planar,
                _ => return Err(bad()),
            },
            Some(("halo", h)) => OrbitKind::Halo(hemi(h)?),
            Some(("butterfly", h)) => OrbitKind::Butterfly(hemi(h)?),
            Some(("nrho", h)) => OrbitKind::Nrho(hemi(h)?),
            _ => return Err(bad()),
        };
        Ok(Self { point, kind })
    }
}

impl From<FamilyTag> for String {
    fn from(t: FamilyTag) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for FamilyTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A CR3BP periodic orbit ready to seed HR4BP families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cr3bpSeed {
    pub tag: FamilyTag,
    pub x0: State,
    /// `T*`
    pub period: f64,
    pub a: u32,
    pub b: u32,
    pub mu: f64,
    pub jacobi: f64,
    /// `‖φ(X0, T*) − X0‖`
    pub residual: f64,
}

/// Smallest coprime `(a, b)` with `|bπ − aT*| ≤ tol`, searching `a, b ≤ 64`.
pub fn resonance_of(period: f64, tol: f64) -> Option<(u32, u32)> {
    if !(period > 0.0) {
        return None;
    }
    for a in 1..=64u32 {
        for b in 1..=64u32 {
            if gcd(a, b) == 1 && (b as f64 * PI - a as f64 * period).abs() <= tol {
                return Some((a, b));
            }
        }
    }
    None
}

pub(crate) fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Free variables and targets of a shooting problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSet {
    /// Planar orbit crossing the x-axis perpendicularly at `t = 0` and `T/2`.
    PlanarMirror,
    /// Spatial orbit crossing the xz-plane perpendicularly at `t = 0` and `T/2`.
    XzMirror,
    /// Orbit symmetric about the x-axis.
    XAxis,
    /// Planar orbit returning to its start on the line `y = y0`.
    PlanarSection,
    /// Full-state periodicity, solved in the minimum-norm sense.
    Periodic,
}

impl ConstraintSet {
    fn free(self) -> &'static [usize] {
        match self {
            ConstraintSet::PlanarMirror => &[0, 4],
            ConstraintSet::XzMirror => &[0, 2, 4],
            ConstraintSet::XAxis => &[0, 4, 5],
            ConstraintSet::PlanarSection => &[0, 3, 4],
            ConstraintSet::Periodic => &[0, 1, 2, 3, 4, 5],
        }
    }

    fn targets(self) -> &'static [usize] {
        match self {
            ConstraintSet::PlanarMirror => &[1, 3],
            ConstraintSet::XzMirror => &[1, 3, 5],
            ConstraintSet::XAxis => &[1, 2, 3],
            ConstraintSet::PlanarSection => &[0, 1, 3],
            ConstraintSet::Periodic => &[0, 1, 2, 3, 4, 5],
        }
    }

    fn half_period(self) -> bool {
        matches!(
            self,
            ConstraintSet::PlanarMirror | ConstraintSet::XzMirror | ConstraintSet::XAxis
        )
    }

    /// Project a state onto the constraint's fixed-point set.
    fn project(self, x: &State) -> State {
        let mut out = *x;
        let zero: &[usize] = match self {
            ConstraintSet::PlanarMirror => &[1, 2, 3, 5],
            ConstraintSet::XzMirror => &[1, 3, 5],
            ConstraintSet::XAxis => &[1, 2, 3],
            ConstraintSet::PlanarSection => &[2, 5],
            ConstraintSet::Periodic => &[],
        };
        for &i in zero {
            out[i] = 0.0;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Shooter {
    params: SystemParams,
    set: ConstraintSet,
    free: Vec<usize>,
    config: IntegratorConfig,
}

struct ShotEval {
    residual: DVector<f64>,
    /// `∂F/∂X0[free]`
    jx: DMatrix<f64>,
    /// `∂F/∂T`
    jt: DVector<f64>,
}

impl Shooter {
    pub(crate) fn new(mu: f64, set: ConstraintSet) -> Result<Self> {
        Ok(Self {
            params: SystemParams::cr3bp(mu)?,
            set,
            free: set.free().to_vec(),
            config: IntegratorConfig::default().with_tolerance(SHOOTING_TOL),
        })
    }

    fn fixing(mut self, idx: usize) -> Self {
        self.free.retain(|&i| i != idx);
        self
    }

    fn shot_time(&self, period: f64) -> f64 {
        if self.set.half_period() {
            0.5 * period
        } else {
            period
        }
    }

    fn eval(&self, x0: &State, period: f64) -> Result<ShotEval> {
        let tf = self.shot_time(period);
        let r = Propagator::new(self.params, self.config)
            .with_stm()
            .propagate(x0, 0.0, tf)?;
        let phi = r.stm.expect("requested");
        let f = cr3bp_field(&r.x_f, self.params.mu)?;
        let targets = self.set.targets();
        let periodic = !self.set.half_period();
        let dt = if periodic { 1.0 } else { 0.5 };
        let mut residual = DVector::zeros(targets.len());
        let mut jx = DMatrix::zeros(targets.len(), self.free.len());
        let mut jt = DVector::zeros(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            residual[i] = r.x_f[t] - if periodic { x0[t] } else { 0.0 };
            jt[i] = dt * f[t];
            for (j, &c) in self.free.iter().enumerate() {
                jx[(i, j)] = phi[(t, c)] - if periodic && t == c { 1.0 } else { 0.0 };
            }
        }
        Ok(ShotEval { residual, jx, jt })
    }

    fn apply(&self, x0: &State, delta: &[f64]) -> State {
        let mut out = *x0;
        for (&i, d) in self.free.iter().zip(delta) {
            out[i] += d;
        }
        out
    }

    /// Newton at fixed period; returns the corrected state and iteration count.
    fn correct_fixed_period(&self, guess: &State, period: f64) -> Result<(State, usize)> {
        let mut x = self.set.project(guess);
        let mut last = f64::INFINITY;
        for it in 0..=MAX_CORRECTOR_ITERATIONS {
            let e = self.eval(&x, period)?;
            let norm = e.residual.amax();
            if !norm.is_finite() {
                return Err(Error::NonFinite { t: period });
            }
            // Accept a residual that has stalled at the integration noise floor.
            if norm <= TARGET_TOL || (norm <= 1e-11 && norm > 0.5 * last) {
                return Ok((x, it));
            }
            last = norm;
            let delta = if e.jx.is_square() {
                solve_square(&e.jx, &(-&e.residual))?
            } else {
                min_norm_solve(&e.jx, &(-&e.residual), 1e-10)?
            };
            x = self.apply(&x, delta.as_slice());
        }
        Err(Error::NonConvergence {
            iterations: MAX_CORRECTOR_ITERATIONS,
            residual: last,
        })
    }

    /// Newton with the period free; square only when one state component
    /// has been fixed.
    fn correct_free_period(&self, guess: &State, period: f64) -> Result<(State, f64)> {
        let mut x = self.set.project(guess);
        let mut t = period;
        let mut last = f64::INFINITY;
        for _ in 0..=MAX_CORRECTOR_ITERATIONS {
            let e = self.eval(&x, t)?;
            last = e.residual.amax();
            if last <= TARGET_TOL {
                return Ok((x, t));
            }
            let mut j = DMatrix::zeros(e.jx.nrows(), e.jx.ncols() + 1);
            j.view_mut((0, 0), e.jx.shape()).copy_from(&e.jx);
            j.set_column(e.jx.ncols(), &e.jt);
            let delta = if j.is_square() {
                solve_square(&j, &(-&e.residual))?
            } else {
                min_norm_solve(&j, &(-&e.residual), 1e-10)?
            };
            let n = self.free.len();
            x = self.apply(&x, &delta.as_slice()[..n]);
            t += delta[n];
        }
        Err(Error::NonConvergence {
            iterations: MAX_CORRECTOR_ITERATIONS,
            residual: last,
        })
    }

    fn unknowns(&self, x0: &State, period: f64) -> DVector<f64> {
        let mut v: Vec<f64> = self.free.iter().map(|&i| x0[i]).collect();
        v.push(period);
        DVector::from_vec(v)
    }

    fn from_unknowns(&self, base: &State, v: &DVector<f64>) -> (State, f64) {
        let mut x = *base;
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = v[k];
        }
        (x, v[self.free.len()])
    }

    fn jacobian(&self, e: &ShotEval) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(e.jx.nrows(), e.jx.ncols() + 1);
        j.view_mut((0, 0), e.jx.shape()).copy_from(&e.jx);
        j.set_column(e.jx.ncols(), &e.jt);
        j
    }
}

/// One member of a CR3BP family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub x0: State,
    pub period: f64,
}

/// Step control for CR3BP family continuation.
#[derive(Debug, Clone, Copy)]
pub struct FamilyOptions {
    pub ds0: f64,
    pub ds_max: f64,
    pub ds_min: f64,
    pub max_members: usize,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self {
            ds0: 1e-3,
            ds_max: 2e-2,
            ds_min: 1e-9,
            max_members: 4000,
        }
    }
}

/// A CR3BP periodic-orbit family, continued by pseudo-arclength with the
/// period free.
#[derive(Debug, Clone)]
pub struct Cr3bpFamily {
    pub tag: FamilyTag,
    pub mu: f64,
    pub constraint: ConstraintSet,
    pub members: Vec<FamilyMember>,
    tangent: Option<DVector<f64>>,
    ds: f64,
    shooter: Shooter,
}

impl Cr3bpFamily {
    fn start(tag: FamilyTag, shooter: Shooter, first: FamilyMember, direction: DVector<f64>) -> Self {
        Self {
            tag,
            mu: shooter.params.mu,
            constraint: shooter.set,
            members: vec![first],
            tangent: Some(direction),
            ds: FamilyOptions::default().ds0,
            shooter,
        }
    }

    pub fn periods(&self) -> impl Iterator<Item = f64> + '_ {
        self.members.iter().map(|m| m.period)
    }

    fn bracket(&self, target: f64) -> Option<usize> {
        self.members
            .windows(2)
            .position(|w| (w[0].period - target) * (w[1].period - target) <= 0.0)
    }

    /// Add members until `stop` holds, the member cap is reached or the step
    /// underflows. Returns the number of members added.
    pub fn extend_until(&mut self, opts: &FamilyOptions, stop: impl Fn(&Cr3bpFamily) -> bool) -> usize {
        let mut added = 0;
        let base = self.members.last().expect("non-empty").x0;
        let mut ds = self.ds.clamp(opts.ds_min, opts.ds_max);
        while self.members.len() < opts.max_members && !stop(self) {
            let last = *self.members.last().expect("non-empty");
            let u = self.shooter.unknowns(&last.x0, last.period);
            let t_prev = self.tangent.clone();
            let tangent = match self.shooter.eval(&last.x0, last.period) {
                Ok(e) => {
                    let mut t = null_vector(&self.shooter.jacobian(&e));
                    if let Some(p) = &t_prev {
                        if t.dot(p) < 0.0 {
                            t = -t;
                        }
                    }
                    t
                }
                Err(_) => break,
            };
            match self.corrector_step(&base, &u, &tangent, ds) {
                Ok((x, period, iters)) => {
                    self.members.push(FamilyMember { x0: x, period });
                    self.tangent = Some(tangent);
                    added += 1;
                    if iters <= 3 {
                        ds = (ds * 1.5).min(opts.ds_max);
                    }
                }
                Err(_) => {
                    ds *= 0.5;
                    if ds < opts.ds_min {
                        break;
                    }
                }
            }
        }
        self.ds = ds;
        added
    }

    fn corrector_step(
        &self,
        base: &State,
        u_prev: &DVector<f64>,
        tangent: &DVector<f64>,
        ds: f64,
    ) -> Result<(State, f64, usize)> {
        let mut u = u_prev + tangent * ds;
        for it in 0..12 {
            let (x, period) = self.shooter.from_unknowns(base, &u);
            if !(period > 0.0) {
                return Err(Error::Domain(period));
            }
            let e = self.shooter.eval(&x, period)?;
            let arc = tangent.dot(&(&u - u_prev)) - ds;
            let n = e.residual.len();
            if e.residual.amax() <= TARGET_TOL && arc.abs() <= 1e-12 {
                return Ok((x, period, it));
            }
            let j = self.shooter.jacobian(&e);
            let mut aug = DMatrix::zeros(n + 1, n + 1);
            aug.view_mut((0, 0), (n, n + 1)).copy_from(&j);
            aug.set_row(n, &tangent.transpose());
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&e.residual));
            rhs[n] = -arc;
            let delta = solve_square(&aug, &rhs)?;
            u += delta;
        }
        Err(Error::NonConvergence {
            iterations: 12,
            residual: f64::NAN,
        })
    }

    /// Member with period exactly `target`, corrected at fixed period from
    /// the interpolated bracketing members.
    pub fn tune_period(&self, target: f64) -> Result<Cr3bpSeed> {
        let i = self.bracket(target).ok_or_else(|| {
            let lo = self.periods().fold(f64::INFINITY, f64::min);
            let hi = self.periods().fold(f64::NEG_INFINITY, f64::max);
            Error::PeriodNotBracketed { target, lo, hi }
        })?;
        let (a, b) = (self.members[i], self.members[i + 1]);
        let w = if b.period == a.period {
            0.0
        } else {
            (target - a.period) / (b.period - a.period)
        };
        let guess = a.x0 + (b.x0 - a.x0) * w;
        let (x0, _) = self.shooter.correct_fixed_period(&guess, target)?;
        finish_seed(self.tag, x0, target, self.mu, &self.shooter)
    }
}

fn finish_seed(tag: FamilyTag, x0: State, period: f64, mu: f64, shooter: &Shooter) -> Result<Cr3bpSeed> {
    let (a, b) = resonance_of(period, 1e-9).unwrap_or((0, 0));
    let mut x0 = x0;
    let mut residual = periodicity_defect(&x0, period, mu, SHOOTING_TOL)?;
    if residual > PERIODICITY_TOL {
        // Unstable orbits amplify the half-period error; polish on the full period.
        let full = Shooter {
            set: ConstraintSet::Periodic,
            free: ConstraintSet::Periodic.free().to_vec(),
            ..shooter.clone()
        };
        if let Ok((x, _)) = full.correct_fixed_period(&x0, period) {
            let r = periodicity_defect(&x, period, mu, SHOOTING_TOL)?;
            if r < residual {
                x0 = x;
                residual = r;
            }
        }
    }
    if residual > PERIODICITY_TOL {
        return Err(Error::NonConvergence {
            iterations: MAX_CORRECTOR_ITERATIONS,
            residual,
        });
    }
    Ok(Cr3bpSeed {
        tag,
        x0,
        period,
        a,
        b,
        mu,
        jacobi: jacobi_constant(&x0, mu)?,
        residual,
    })
}

/// `‖φ(X0, T) − X0‖` in the CR3BP at the given integration tolerance.
pub fn periodicity_defect(x0: &State, period: f64, mu: f64, tol: f64) -> Result<f64> {
    let cfg = IntegratorConfig::default().with_tolerance(tol);
    let r = Propagator::new(SystemParams::cr3bp(mu)?, cfg).propagate(x0, 0.0, period)?;
    Ok((r.x_f - x0).norm())
}

/// Correct a guess to a periodic orbit of period `period` under `constraints`.
pub fn correct_cr3bp_orbit(
    guess: &State,
    period: f64,
    constraints: ConstraintSet,
    mu: f64,
    tag: FamilyTag,
) -> Result<Cr3bpSeed> {
    if !(period > 0.0) {
        return Err(Error::Domain(period));
    }
    let shooter = Shooter::new(mu, constraints)?;
    let (x0, _) = shooter.correct_fixed_period(guess, period)?;
    finish_seed(tag, x0, period, mu, &shooter)
}

fn collinear_point(mu: f64, point: u8) -> Result<LibrationPoint> {
    if !(1..=3).contains(&point) {
        return Err(Error::Precondition(format!("L{point} is not a collinear point")));
    }
    Ok(libration_points(mu)?[point as usize - 1])
}

/// In-plane oscillation frequency and amplitude ratio at a collinear point.
fn planar_mode(lp: &LibrationPoint) -> (f64, f64) {
    let c2 = lp.c2();
    let uxx = 1.0 + 2.0 * c2;
    let uyy = 1.0 - c2;
    let p = 2.0 - c2;
    let s = (-p - (p * p - 4.0 * uxx * uyy).sqrt()) / 2.0;
    let omega = (-s).sqrt();
    let kappa = (omega * omega + uxx) / (2.0 * omega);
    (omega, kappa)
}

/// Planar Lyapunov family about L1, L2 or L3, started from the linear mode.
pub fn lyapunov_family(mu: f64, point: u8) -> Result<Cr3bpFamily> {
    let lp = collinear_point(mu, point)?;
    let (omega, kappa) = planar_mode(&lp);
    let amp = 1e-4;
    let guess = State::new(lp.position.x + amp, 0.0, 0.0, 0.0, -kappa * amp * omega, 0.0);
    let period = 2.0 * PI / omega;
    // Fix x0 for the first member, then release it.
    let shooter = Shooter::new(mu, ConstraintSet::PlanarMirror)?;
    let (x, t) = shooter.clone().fixing(0).correct_free_period(&guess, period)?;
    let mut dir = DVector::zeros(3);
    dir[0] = 1.0;
    Ok(Cr3bpFamily::start(
        FamilyTag::new(point, OrbitKind::Lyapunov),
        shooter,
        FamilyMember { x0: x, period: t },
        dir,
    ))
}

/// Vertical Lyapunov family about a collinear point.
pub fn vertical_family(mu: f64, point: u8) -> Result<Cr3bpFamily> {
    let lp = collinear_point(mu, point)?;
    let nu = lp.c2().sqrt();
    let amp = 1e-4;
    let guess = State::new(lp.position.x, 0.0, 0.0, 0.0, 0.0, amp * nu);
    let period = 2.0 * PI / nu;
    let shooter = Shooter::new(mu, ConstraintSet::XAxis)?;
    let (x, t) = shooter.clone().fixing(5).correct_free_period(&guess, period)?;
    let mut dir = DVector::zeros(4);
    dir[2] = 1.0;
    Ok(Cr3bpFamily::start(
        FamilyTag::new(point, OrbitKind::Vertical),
        shooter,
        FamilyMember { x0: x, period: t },
        dir,
    ))
}

/// Hemisphere of a mirror-symmetric spatial orbit: the sign of `z` at the
/// xz-plane crossing farther from the smaller primary.
pub fn hemisphere_of(x0: &State, period: f64, mu: f64) -> Result<Hemisphere> {
    let r = Propagator::new(SystemParams::cr3bp(mu)?, IntegratorConfig::default()).propagate(x0, 0.0, 0.5 * period)?;
    let d = |x: &State| ((x[0] - 1.0 + mu).powi(2) + x[2] * x[2]).sqrt();
    let far = if d(x0) >= d(&r.x_f) { x0 } else { &r.x_f };
    Ok(if far[2] >= 0.0 {
        Hemisphere::North
    } else {
        Hemisphere::South
    })
}

/// `∂z'(T/2)/∂z0` on a planar mirror orbit; its zeros mark where spatial
/// mirror-symmetric (halo) families branch off.
fn vertical_stiffness(x0: &State, period: f64, mu: f64) -> Result<f64> {
    let r = Propagator::new(SystemParams::cr3bp(mu)?, IntegratorConfig::default())
        .with_stm()
        .propagate(x0, 0.0, 0.5 * period)?;
    Ok(r.stm.expect("requested")[(5, 2)])
}

/// Halo family about L1, L2 or L3, branched from the first vertical
/// bifurcation of the Lyapunov family.
pub fn halo_family(mu: f64, point: u8, hemisphere: Hemisphere) -> Result<Cr3bpFamily> {
    let mut lyap = lyapunov_family(mu, point)?;
    let opts = FamilyOptions {
        max_members: 2000,
        ..Default::default()
    };
    let mut prev_sign = vertical_stiffness(&lyap.members[0].x0, lyap.members[0].period, mu)?.signum();
    let mut scanned = 1;
    let mut bracket = None;
    while bracket.is_none() {
        let before = lyap.members.len();
        lyap.extend_until(&opts, |f| f.members.len() >= before + 20);
        if lyap.members.len() == before {
            break;
        }
        for i in scanned..lyap.members.len() {
            let m = lyap.members[i];
            let s = vertical_stiffness(&m.x0, m.period, mu)?.signum();
            if s != prev_sign {
                bracket = Some(i - 1);
                break;
            }
            prev_sign = s;
        }
        scanned = lyap.members.len();
    }
    let i = bracket.ok_or_else(|| Error::Precondition("no halo bifurcation found".into()))?;
    let (a, b) = (lyap.members[i], lyap.members[i + 1]);

    // Bisect on the interpolation weight, re-correcting each trial orbit at fixed x0.
    let planar = Shooter::new(mu, ConstraintSet::PlanarMirror)?.fixing(0);
    let trial = |w: f64| -> Result<(State, f64, f64)> {
        let g = a.x0 + (b.x0 - a.x0) * w;
        let t = a.period + (b.period - a.period) * w;
        let (x, t) = planar.correct_free_period(&g, t)?;
        Ok((x, t, vertical_stiffness(&x, t, mu)?))
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let s_lo = trial(lo)?.2.signum();
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if trial(mid)?.2.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (xb, tb, _) = trial(0.5 * (lo + hi))?;

    let dz = 1e-3;
    let mut guess = xb;
    guess[2] = dz;
    let spatial = Shooter::new(mu, ConstraintSet::XzMirror)?;
    let (x, t) = spatial.clone().fixing(2).correct_free_period(&guess, tb)?;
    let mut dir = DVector::zeros(4);
    dir[1] = 1.0;
    let found = hemisphere_of(&x, t, mu)?;
    let (x, dir) = if found == hemisphere {
        (x, dir)
    } else {
        (mirror_xy(&x), -dir)
    };
    Ok(Cr3bpFamily::start(
        FamilyTag::new(point, OrbitKind::Halo(hemisphere)),
        spatial,
        FamilyMember { x0: x, period: t },
        dir,
    ))
}

/// Planar family about L4 or L5 from the short-period linear mode.
pub fn triangular_planar_family(mu: f64, point: u8) -> Result<Cr3bpFamily> {
    if !(point == 4 || point == 5) {
        return Err(Error::Precondition(format!("L{point} is not a triangular point")));
    }
    let lp = libration_points(mu)?[point as usize - 1];
    let sign = if point == 4 { 1.0 } else { -1.0 };
    let uxx = 0.75;
    let uyy = 2.25;
    let uxy = sign * 0.75 * 3f64.sqrt() * (1.0 - 2.0 * mu);
    let disc = (1.0 - 27.0 * mu * (1.0 - mu)).sqrt();
    let omega = ((1.0 + disc) / 2.0).sqrt();
    // x = Re(X e^{iωt}), y = Re(Y e^{iωt}) with X = 1.
    // (−ω² − Uxx) X − (2iω + Uxy) Y = 0
    let num = -omega * omega - uxx;
    let (dr, di) = (uxy, 2.0 * omega);
    let den = dr * dr + di * di;
    let (yr, yi) = (num * dr / den, -num * di / den);
    let _ = uyy;
    // Phase θ with Re(Y e^{iθ}) = 0.
    let theta = (yr / yi).atan();
    let (s, c) = theta.sin_cos();
    let xr = c;
    let xi = s;
    let (yre, yim) = (yr * c - yi * s, yr * s + yi * c);
    let amp = 1e-4;
    let guess = State::new(
        lp.position.x + amp * xr,
        lp.position.y + amp * yre,
        0.0,
        -amp * omega * xi,
        -amp * omega * yim,
        0.0,
    );
    let period = 2.0 * PI / omega;
    let shooter = Shooter::new(mu, ConstraintSet::PlanarSection)?;
    let (x, t) = shooter.clone().fixing(0).correct_free_period(&guess, period)?;
    let mut dir = DVector::zeros(4);
    dir[0] = (x[0] - lp.position.x).signum();
    Ok(Cr3bpFamily::start(
        FamilyTag::new(point, OrbitKind::Planar),
        shooter,
        FamilyMember { x0: x, period: t },
        dir,
    ))
}

/// Continue a family until `target` is bracketed, then tune to it.
pub fn tune_period(family: &mut Cr3bpFamily, target: f64, opts: &FamilyOptions) -> Result<Cr3bpSeed> {
    if family.bracket(target).is_none() {
        family.extend_until(opts, |f| f.bracket(target).is_some());
    }
    family.tune_period(target)
}

/// Build a seed for `tag` with period `target`.
pub fn build_seed(tag: FamilyTag, target: f64, mu: f64) -> Result<Cr3bpSeed> {
    let opts = FamilyOptions::default();
    match tag.kind {
        OrbitKind::Point => {
            let lp = libration_points(mu)?[tag.point as usize - 1];
            let (a, b) = resonance_of(target, 1e-9).unwrap_or((0, 0));
            Ok(Cr3bpSeed {
                tag,
                x0: lp.state(),
                period: target,
                a,
                b,
                mu,
                jacobi: jacobi_constant(&lp.state(), mu)?,
                residual: 0.0,
            })
        }
        OrbitKind::Lyapunov => tune_period(&mut lyapunov_family(mu, tag.point)?, target, &opts),
        OrbitKind::Vertical => tune_period(&mut vertical_family(mu, tag.point)?, target, &opts),
        OrbitKind::Planar => tune_period(&mut triangular_planar_family(mu, tag.point)?, target, &opts),
        OrbitKind::Halo(h) | OrbitKind::Nrho(h) => {
            let mut fam = halo_family(mu, tag.point, h)?;
            let mut seed = tune_period(&mut fam, target, &opts)?;
            seed.tag = tag;
            Ok(seed)
        }
        OrbitKind::Butterfly(_) => Err(Error::Precondition(
            "butterfly families are not generated automatically".into(),
        )),
    }
}
