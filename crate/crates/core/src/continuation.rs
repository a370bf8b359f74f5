//! HR4BP periodic orbits at fixed period `T = bπ` and their families in `m`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::bifurcation::{singular_spectrum, SingularSpectrum};
use crate::dynamics::{full_series, State, SystemParams, M_MAX};
use crate::error::{Error, Result};
use crate::linalg::{min_norm_solve, null_vector, solve_square};
use crate::melnikov::ResonantOrbit;
use crate::propagation::{IntegratorConfig, Propagator};

/// Required closure `‖φ(X0, τ0, τ0+T) − X0‖` of a corrected orbit.
pub const ORBIT_TOL: f64 = 1e-10;
/// Newton stops early once the residual is this small.
const NEWTON_TARGET: f64 = 1e-11;
const INTEGRATION_TOL: f64 = 1e-13;
pub const MAX_NEWTON: usize = 25;
/// Lowest `m` evaluated while detecting a crossing of `m = 0`.
const M_FLOOR: f64 = -0.05;

/// An HR4BP orbit with `φ(X0, τ0, τ0 + bπ) = X0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub x0: State,
    pub tau0: f64,
    pub b: u32,
    pub m: f64,
    pub mu: f64,
    pub monodromy: Matrix6<f64>,
    /// `Ψ_m(τ0 + T)`
    pub psi_m: Vector6<f64>,
    pub residual: f64,
    /// Unit tangent over `(X0, m)` used to reach this member, if any.
    pub tangent: Option<[f64; 7]>,
}

impl PeriodicOrbit {
    pub fn period(&self) -> f64 {
        self.b as f64 * PI
    }

    pub fn params(&self) -> Result<SystemParams> {
        params_for(self.m, self.mu)
    }

    /// `(X0, m)`
    pub fn unknowns(&self) -> DVector<f64> {
        let mut v = DVector::zeros(7);
        v.rows_mut(0, 6).copy_from(&self.x0);
        v[6] = self.m;
        v
    }

    /// `[Φ − I | Ψ_m]`
    pub fn corrections_jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(6, 7);
        j.view_mut((0, 0), (6, 6))
            .copy_from(&(self.monodromy - Matrix6::identity()));
        j.set_column(6, &self.psi_m);
        j
    }

    /// Dense state history over one period.
    pub fn trajectory(&self) -> Result<crate::propagation::DenseTrajectory> {
        let cfg = IntegratorConfig::default()
            .with_tolerance(INTEGRATION_TOL)
            .with_dense(true);
        let r = Propagator::new(self.params()?, cfg).propagate(&self.x0, self.tau0, self.tau0 + self.period())?;
        Ok(r.dense.expect("requested"))
    }
}

/// Parameters for `m`, continuing the model analytically below zero so a
/// family crossing `m = 0` can be detected.
fn params_for(m: f64, mu: f64) -> Result<SystemParams> {
    if m >= 0.0 {
        SystemParams::new(m, mu)
    } else if m >= M_FLOOR {
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::Domain(mu));
        }
        Ok(SystemParams::unchecked(m, mu, full_series()))
    } else {
        Err(Error::Domain(m))
    }
}

struct Shot {
    x_f: State,
    phi: Matrix6<f64>,
    psi_m: Vector6<f64>,
}

fn shoot(x0: &State, m: f64, mu: f64, tau0: f64, b: u32) -> Result<Shot> {
    let cfg = IntegratorConfig::default().with_tolerance(INTEGRATION_TOL);
    let r = Propagator::new(params_for(m, mu)?, cfg)
        .with_stm()
        .with_sensitivity()
        .propagate(x0, tau0, tau0 + b as f64 * PI)?;
    Ok(Shot {
        x_f: r.x_f,
        phi: r.stm.expect("requested"),
        psi_m: r.sensitivity.expect("requested").column(0).into_owned(),
    })
}

fn finish(x0: State, m: f64, mu: f64, tau0: f64, b: u32, shot: Shot, tangent: Option<[f64; 7]>) -> PeriodicOrbit {
    PeriodicOrbit {
        residual: (shot.x_f - x0).norm(),
        x0,
        tau0,
        b,
        m,
        mu,
        monodromy: shot.phi,
        psi_m: shot.psi_m,
        tangent,
    }
}

/// Done once the target is met, or once within tolerance and no longer
/// improving quickly (the integrator floor).
fn converged(norm: f64, last: f64) -> bool {
    norm <= NEWTON_TARGET || (norm <= ORBIT_TOL && norm > 0.1 * last)
}

/// Propagate a stored member once to recover its monodromy, `Ψ_m` and
/// closure residual; no correction is applied.
pub fn evaluate_orbit(x0: &State, b: u32, tau0: f64, m: f64, mu: f64) -> Result<PeriodicOrbit> {
    if b == 0 {
        return Err(Error::Precondition("period multiple b must be positive".into()));
    }
    let shot = shoot(x0, m, mu, tau0, b)?;
    Ok(finish(*x0, m, mu, tau0, b, shot, None))
}

/// Newton on `φ(X0, τ0, τ0 + bπ) − X0` at fixed `m`.
pub fn correct_fixed_m(guess: &State, b: u32, tau0: f64, m: f64, mu: f64) -> Result<PeriodicOrbit> {
    newton(guess, b, tau0, m, mu, Update::Square)
}

/// As [`correct_fixed_m`]; with `min_norm` the Newton step is the
/// minimum-norm solution, for orbits whose `Φ − I` is singular (CR3BP
/// periodic orbits at `m = 0`).
pub fn correct_fixed_m_with(
    guess: &State,
    b: u32,
    tau0: f64,
    m: f64,
    mu: f64,
    min_norm: bool,
) -> Result<PeriodicOrbit> {
    newton(
        guess,
        b,
        tau0,
        m,
        mu,
        if min_norm { Update::MinNorm } else { Update::Square },
    )
}

/// As [`correct_fixed_m`] with the correction confined to the fixed set of
/// the xz mirror (`y = x' = z' = 0`). The guess is projected onto it first.
pub fn correct_symmetric(guess: &State, b: u32, tau0: f64, m: f64, mu: f64) -> Result<PeriodicOrbit> {
    if Subspace::for_epoch(tau0) != Subspace::MirrorFixed {
        return Err(Error::Precondition(
            "mirror-symmetric correction needs τ0 = kπ/2".into(),
        ));
    }
    newton(&project_symmetric(guess), b, tau0, m, mu, Update::Symmetric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Update {
    Square,
    MinNorm,
    Symmetric,
}

fn newton(guess: &State, b: u32, tau0: f64, m: f64, mu: f64, update: Update) -> Result<PeriodicOrbit> {
    if b == 0 {
        return Err(Error::Precondition("period multiple b must be positive".into()));
    }
    let mut x = *guess;
    let mut last = f64::INFINITY;
    let mut best: Option<(f64, State, Shot)> = None;
    for _ in 0..=MAX_NEWTON {
        let shot = shoot(&x, m, mu, tau0, b)?;
        let f = shot.x_f - x;
        let norm = f.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite { t: tau0 });
        }
        if converged(norm, last) {
            return Ok(finish(x, m, mu, tau0, b, shot, None));
        }
        last = norm;
        let j = DMatrix::from_fn(6, 6, |r, c| shot.phi[(r, c)] - if r == c { 1.0 } else { 0.0 });
        let rhs = DVector::from_iterator(6, f.iter().map(|v| -v));
        let dx = match update {
            Update::Square => solve_square(&j, &rhs)?,
            Update::MinNorm => min_norm_solve(&j, &rhs, 1e-9)?,
            Update::Symmetric => scatter(
                &min_norm_solve(&j.select_columns(&SYMMETRIC_STATE), &rhs, 1e-14)?,
                &SYMMETRIC_STATE,
                6,
            ),
        };
        if best.as_ref().is_none_or(|b| norm < b.0) {
            best = Some((norm, x, shot));
        }
        x += State::from_column_slice(dx.as_slice());
    }
    match best {
        Some((norm, x, shot)) if norm <= ORBIT_TOL => Ok(finish(x, m, mu, tau0, b, shot, None)),
        _ => Err(Error::NonConvergence {
            iterations: MAX_NEWTON,
            residual: last,
        }),
    }
}

/// Correction for orbits close to a degenerate `Φ − I`, such as freshly
/// seeded orbits at small `m` whose phase along the parent orbit is only
/// weakly determined. The weak singular direction of `Φ − I` at the guess
/// is split off: the remaining equations are solved on slices of constant
/// weak coordinate `η`, and a secant search in `η` zeroes the weak residual.
fn correct_split(guess: &State, b: u32, tau0: f64, m: f64, mu: f64) -> Result<PeriodicOrbit> {
    let shot = shoot(guess, m, mu, tau0, b)?;
    let j0 = DMatrix::from_fn(6, 6, |r, c| shot.phi[(r, c)] - if r == c { 1.0 } else { 0.0 });
    let svd = j0.svd(true, true);
    let k = svd.singular_values.imin();
    let u_w = svd.u.as_ref().expect("requested").column(k).into_owned();
    let v_w = svd.v_t.as_ref().expect("requested").row(k).transpose();
    let sigma_w = svd.singular_values[k];

    let slice = |eta: f64, start: &State| -> Result<(State, f64)> {
        let mut x = *start;
        let mut last = f64::INFINITY;
        for _ in 0..MAX_NEWTON {
            let shot = shoot(&x, m, mu, tau0, b)?;
            let f = DVector::from_column_slice((shot.x_f - x).as_slice());
            let g = u_w.dot(&f);
            let pf = &f - &u_w * g;
            let dx_guess = DVector::from_column_slice((x - guess).as_slice());
            let c = eta - v_w.dot(&dx_guess);
            let pn = pf.norm();
            if (pn <= 1e-12 || (pn <= 1e-10 && pn > 0.1 * last)) && c.abs() <= 1e-14 {
                return Ok((x, g));
            }
            last = pn;
            let j = DMatrix::from_fn(6, 6, |r, c| shot.phi[(r, c)] - if r == c { 1.0 } else { 0.0 });
            let pj = &j - &u_w * (u_w.transpose() * &j);
            let mut a = DMatrix::zeros(7, 6);
            a.view_mut((0, 0), (6, 6)).copy_from(&pj);
            a.set_row(6, &v_w.transpose());
            let mut rhs = DVector::zeros(7);
            rhs.rows_mut(0, 6).copy_from(&(-pf));
            rhs[6] = c;
            let dx = min_norm_solve(&a, &rhs, 1e-14)?;
            x += State::from_column_slice(dx.as_slice());
        }
        Err(Error::NonConvergence {
            iterations: MAX_NEWTON,
            residual: last,
        })
    };

    let (x0, mut g0) = slice(0.0, guess)?;
    let mut eta0 = 0.0;
    let mut eta1 = -g0 / sigma_w;
    let (mut x1, mut g1) = slice(eta1, &x0)?;
    for it in 0..40 {
        if g1.abs() <= NEWTON_TARGET || eta1 == eta0 {
            break;
        }
        let eta2 = eta1 - g1 * (eta1 - eta0) / (g1 - g0);
        if !eta2.is_finite() || eta2.abs() > SEED_RADIUS {
            return Err(Error::NonConvergence {
                iterations: it + 1,
                residual: g1.abs(),
            });
        }
        let (x2, g2) = slice(eta2, &x1)?;
        (eta0, g0) = (eta1, g1);
        (eta1, x1, g1) = (eta2, x2, g2);
    }
    newton(&x1, b, tau0, m, mu, Update::Square)
}

/// State components left free on the mirror-fixed set.
const SYMMETRIC_STATE: [usize; 3] = [0, 2, 4];
/// The same, plus `m`, over `(X0, m)`.
const SYMMETRIC_UNKNOWNS: [usize; 4] = [0, 2, 4, 6];

fn scatter(v: &DVector<f64>, idx: &[usize], n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for (k, &i) in idx.iter().enumerate() {
        out[i] = v[k];
    }
    out
}

fn project_symmetric(x: &State) -> State {
    State::new(x[0], 0.0, x[2], 0.0, x[4], 0.0)
}

/// Unknowns a family moves in. Orbits starting on the xz-mirror fixed set at
/// a symmetry epoch stay on it; confining the correction there removes the
/// poorly determined phase direction near `m = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Subspace {
    Full,
    MirrorFixed,
}

impl Subspace {
    fn for_epoch(tau0: f64) -> Self {
        let k = (tau0 / (0.5 * PI)).round();
        if (tau0 - k * 0.5 * PI).abs() <= 1e-14 {
            Subspace::MirrorFixed
        } else {
            Subspace::Full
        }
    }

    pub(crate) fn of(o: &PeriodicOrbit) -> Self {
        let x = &o.x0;
        let off = x[1].abs().max(x[3].abs()).max(x[5].abs());
        if off == 0.0 {
            Subspace::for_epoch(o.tau0)
        } else {
            Subspace::Full
        }
    }

    fn columns(self) -> &'static [usize] {
        match self {
            Subspace::Full => &[0, 1, 2, 3, 4, 5, 6],
            Subspace::MirrorFixed => &SYMMETRIC_UNKNOWNS,
        }
    }
}

/// Step control for pseudo-arclength continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepPolicy {
    pub ds0: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub grow: f64,
    pub shrink: f64,
    pub max_members: usize,
    /// Newton iterations allowed per step.
    pub max_iterations: usize,
    /// Stop once `m` passes this value (capped at `M_MAX`).
    pub m_stop: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self {
            ds0: 1e-3,
            ds_min: 1e-8,
            ds_max: 2e-2,
            grow: 2.0,
            shrink: 0.5,
            max_members: 5000,
            max_iterations: 8,
            m_stop: M_MAX,
        }
    }
}

impl StepPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.ds0 > 0.0 && self.ds_min > 0.0 && self.ds_max >= self.ds_min) {
            return Err(Error::Precondition("step sizes must be positive".into()));
        }
        if !(self.grow >= 1.0 && self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Precondition("invalid step growth factors".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Reached the `m` limit (`M_MAX` unless the policy stops earlier).
    MaxM,
    /// Crossed `m = 0`; the last member is the CR3BP landing orbit.
    Cr3bpLanding,
    StepUnderflow,
    MemberCap,
    /// Came back around to the first member.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Seed { tag: String },
    MelnikovZero { tag: String, s: f64 },
    Bifurcation { parent: String, member: usize, sign: i8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub mu: f64,
    pub b: u32,
    pub tau0: f64,
    pub members: Vec<PeriodicOrbit>,
    /// `(σ_α, σ_β)` of `[Φ − I | Ψ_m]` per member.
    pub sigma: Vec<(f64, f64)>,
    pub provenance: Provenance,
    pub termination: Termination,
}

impl Family {
    pub fn last(&self) -> &PeriodicOrbit {
        self.members.last().expect("families are never empty")
    }

    pub fn m_range(&self) -> (f64, f64) {
        self.members
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
                (lo.min(o.m), hi.max(o.m))
            })
    }

    /// First member at or past `m` in family order, interpolated and
    /// re-corrected at exactly `m`.
    pub fn member_at(&self, m: f64) -> Result<PeriodicOrbit> {
        let i = self
            .members
            .windows(2)
            .position(|w| (w[0].m - m) * (w[1].m - m) <= 0.0)
            .ok_or_else(|| Error::Precondition(format!("m = {m} outside family range")))?;
        let (a, b) = (&self.members[i], &self.members[i + 1]);
        let w = if a.m == b.m { 0.0 } else { (m - a.m) / (b.m - a.m) };
        let guess = a.x0 + (b.x0 - a.x0) * w;
        match Subspace::of(&self.members[0]) {
            Subspace::MirrorFixed => correct_symmetric(&guess, self.b, self.tau0, m, self.mu),
            Subspace::Full => correct_fixed_m_with(&guess, self.b, self.tau0, m, self.mu, m == 0.0),
        }
    }
}

fn spectrum_pair(o: &PeriodicOrbit) -> (f64, f64) {
    let s: SingularSpectrum = singular_spectrum(&o.corrections_jacobian());
    (s.sigma_alpha, s.sigma_beta)
}

/// One pseudo-arclength step from `prev` along `tangent`.
pub(crate) fn arclength_step(
    prev: &PeriodicOrbit,
    tangent: &DVector<f64>,
    ds: f64,
    max_iterations: usize,
    sub: Subspace,
) -> Result<(PeriodicOrbit, usize)> {
    let v_prev = prev.unknowns();
    let mut v = &v_prev + tangent * ds;
    let mut last = f64::INFINITY;
    for it in 0..max_iterations {
        let x = State::from_column_slice(&v.as_slice()[..6]);
        let shot = shoot(&x, v[6], prev.mu, prev.tau0, prev.b)?;
        let f = shot.x_f - x;
        let norm = f.norm();
        let arc = tangent.dot(&(&v - &v_prev)) - ds;
        if !norm.is_finite() {
            return Err(Error::NonFinite { t: prev.tau0 });
        }
        if converged(norm, last) && arc.abs() <= 1e-12 {
            let mut t = [0.0; 7];
            t.copy_from_slice(tangent.as_slice());
            return Ok((finish(x, v[6], prev.mu, prev.tau0, prev.b, shot, Some(t)), it));
        }
        last = norm;
        let mut a = DMatrix::zeros(7, 7);
        for r in 0..6 {
            for c in 0..6 {
                a[(r, c)] = shot.phi[(r, c)] - if r == c { 1.0 } else { 0.0 };
            }
            a[(r, 6)] = shot.psi_m[r];
        }
        a.set_row(6, &tangent.transpose());
        let mut rhs = DVector::zeros(7);
        for r in 0..6 {
            rhs[r] = -f[r];
        }
        rhs[6] = -arc;
        v += match sub {
            Subspace::Full => solve_square(&a, &rhs)?,
            Subspace::MirrorFixed => {
                let cols = sub.columns();
                scatter(&min_norm_solve(&a.select_columns(cols), &rhs, 1e-14)?, cols, 7)
            }
        };
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
        residual: last,
    })
}

/// Unit null vector of `[Φ − I | Ψ_m]` within `sub`, oriented along `hint`.
pub(crate) fn family_tangent(o: &PeriodicOrbit, hint: &DVector<f64>, sub: Subspace) -> DVector<f64> {
    let cols = sub.columns();
    let t = scatter(&null_vector(&o.corrections_jacobian().select_columns(cols)), cols, 7);
    if t.dot(hint) < 0.0 {
        -t
    } else {
        t
    }
}

/// Pseudo-arclength continuation in `(X0, m)` from a converged orbit.
/// `direction` sets the initial sign of `dm`.
pub fn continue_family(
    start: &PeriodicOrbit,
    direction: f64,
    policy: &StepPolicy,
    provenance: Provenance,
) -> Result<Family> {
    let mut hint = DVector::zeros(7);
    hint[6] = direction.signum();
    continue_family_along(start, &hint, policy, provenance)
}

/// As [`continue_family`], with the first tangent oriented along `hint`.
pub fn continue_family_along(
    start: &PeriodicOrbit,
    hint: &DVector<f64>,
    policy: &StepPolicy,
    provenance: Provenance,
) -> Result<Family> {
    policy.validate()?;
    if start.residual > ORBIT_TOL {
        return Err(Error::Precondition(format!(
            "start orbit residual {:e} exceeds {ORBIT_TOL:e}",
            start.residual
        )));
    }
    let m_stop = policy.m_stop.min(M_MAX);
    let mut members = vec![start.clone()];
    let mut sigma = vec![spectrum_pair(start)];
    let sub = Subspace::of(start);
    let mut tangent = family_tangent(start, hint, sub);
    members[0].tangent = Some(to_array(&tangent));
    let mut ds = policy.ds0.min(policy.ds_max);
    // Largest distance from the start reached so far.
    let mut reach = 0.0f64;
    let termination = loop {
        if members.len() >= policy.max_members {
            break Termination::MemberCap;
        }
        let prev = members.last().expect("non-empty").clone();
        match arclength_step(&prev, &tangent, ds, policy.max_iterations, sub) {
            Ok((orbit, iterations)) => {
                let target = if orbit.m > m_stop {
                    Some((m_stop, Termination::MaxM))
                } else if orbit.m < 0.0 {
                    Some((0.0, Termination::Cr3bpLanding))
                } else {
                    None
                };
                if let Some((m_end, why)) = target {
                    match land_at(&prev, &tangent, ds, m_end, policy.max_iterations, sub) {
                        Ok(end) => {
                            sigma.push(spectrum_pair(&end));
                            members.push(end);
                            break why;
                        }
                        Err(e) => {
                            log::debug!("landing at m = {m_end} from ds {ds:e} failed: {e}");
                            ds *= policy.shrink;
                            if ds < policy.ds_min {
                                break Termination::StepUnderflow;
                            }
                            continue;
                        }
                    }
                }
                let back = (orbit.unknowns() - start.unknowns()).norm();
                reach = reach.max(back);
                if members.len() > 8 && back < ds.max(10.0 * policy.ds_min) && reach > 10.0 * back {
                    break Termination::Closed;
                }
                let next_tangent = family_tangent(&orbit, &tangent, sub);
                sigma.push(spectrum_pair(&orbit));
                members.push(orbit);
                tangent = next_tangent;
                if iterations <= 3 {
                    ds = (ds * policy.grow).min(policy.ds_max);
                }
            }
            Err(e) => {
                log::debug!("continuation step {ds:e} failed: {e}");
                ds *= policy.shrink;
                if ds < policy.ds_min {
                    break Termination::StepUnderflow;
                }
            }
        }
    };
    Ok(Family {
        mu: start.mu,
        b: start.b,
        tau0: start.tau0,
        members,
        sigma,
        provenance,
        termination,
    })
}

fn to_array(v: &DVector<f64>) -> [f64; 7] {
    let mut t = [0.0; 7];
    t.copy_from_slice(v.as_slice());
    t
}

/// Member at exactly `m_end` on the arc from `prev`, found by a secant
/// search on the arclength `ds ∈ (0, ds_hi]`. At `m = 0` the fixed-`m`
/// problem is degenerate along the flow, so the family curve itself fixes
/// the landing phase.
fn land_at(
    prev: &PeriodicOrbit,
    tangent: &DVector<f64>,
    ds_hi: f64,
    m_end: f64,
    max_iterations: usize,
    sub: Subspace,
) -> Result<PeriodicOrbit> {
    let (mut a, mut fa) = (0.0, prev.m - m_end);
    let (hi, _) = arclength_step(prev, tangent, ds_hi, max_iterations, sub)?;
    let (mut b, mut fb) = (ds_hi, hi.m - m_end);
    let mut best = hi;
    for _ in 0..60 {
        if fb.abs() <= 1e-15 {
            break;
        }
        let c = (b - fb * (b - a) / (fb - fa)).clamp(a.min(b), a.max(b));
        let (o, _) = arclength_step(prev, tangent, c, max_iterations + 4, sub)?;
        let fc = o.m - m_end;
        // Illinois variant of regula falsi.
        if fc * fb < 0.0 {
            a = b;
            fa = fb;
        } else {
            fa *= 0.5;
        }
        b = c;
        fb = fc;
        best = o;
    }
    let update = match sub {
        Subspace::MirrorFixed => Update::Symmetric,
        Subspace::Full if m_end == 0.0 => Update::MinNorm,
        Subspace::Full => Update::Square,
    };
    let mut end = newton(&best.x0, prev.b, prev.tau0, m_end, prev.mu, update)?;
    end.tangent = best.tangent;
    Ok(end)
}

/// Default starting `m` for Melnikov seeding.
pub const SEED_M0: f64 = 1e-4;

/// Largest accepted distance between a seeded orbit and `X*(s)`.
pub const SEED_RADIUS: f64 = 1e-2;

/// HR4BP orbit near `X*(s)` at small `m0`, halving `m0` up to four times.
pub fn seed_from_melnikov(orbit: &ResonantOrbit, s: f64, m0: f64) -> Result<PeriodicOrbit> {
    if !(m0 > 0.0) {
        return Err(Error::Precondition("Melnikov seeding needs m0 > 0".into()));
    }
    let guess = orbit.state_at(s)?;
    let symmetric = guess[1].abs().max(guess[3].abs()).max(guess[5].abs()) <= 1e-9 * (1.0 + guess.norm());
    let mut m = m0;
    let mut last_err = None;
    for _ in 0..5 {
        let attempt = if symmetric {
            correct_symmetric(&guess, orbit.b, 0.0, m, orbit.mu())
        } else {
            correct_split(&guess, orbit.b, 0.0, m, orbit.mu())
        };
        match attempt {
            Ok(o) if (o.x0 - guess).norm() <= SEED_RADIUS => return Ok(o),
            Ok(o) => {
                last_err = Some(Error::Precondition(format!(
                    "corrector left the seed neighbourhood (distance {:e})",
                    (o.x0 - guess).norm()
                )))
            }
            Err(e) => last_err = Some(e),
        }
        m *= 0.5;
    }
    Err(last_err.expect("at least one attempt"))
}

/// Sample count for object comparison.
const OBJECT_SAMPLES: usize = 32;
pub const OBJECT_TOL: f64 = 1e-8;

/// Largest `‖X_B(τ) − X_A(τ + Δ)‖` over a 32-point grid of one period.
pub fn object_distance(a: &PeriodicOrbit, b: &PeriodicOrbit, shift: f64) -> Result<f64> {
    comparable(a, b)?;
    let ta = a.trajectory()?;
    let tb = b.trajectory()?;
    let period = a.period();
    let at =
        |tr: &crate::propagation::DenseTrajectory, tau0: f64, t: f64| tr.state_at(tau0 + (t - tau0).rem_euclid(period));
    let mut worst = 0.0f64;
    for i in 0..OBJECT_SAMPLES {
        let t = b.tau0 + period * i as f64 / OBJECT_SAMPLES as f64;
        worst = worst.max((at(&tb, b.tau0, t)? - at(&ta, a.tau0, t + shift)?).norm());
    }
    Ok(worst)
}

/// First shift from `shifts` with `X_B(τ) = X_A(τ + Δ)` to within
/// `OBJECT_TOL`, if any.
pub fn object_equivalence(a: &PeriodicOrbit, b: &PeriodicOrbit, shifts: &[f64]) -> Result<Option<f64>> {
    comparable(a, b)?;
    for &shift in shifts {
        if object_distance(a, b, shift)? <= OBJECT_TOL {
            return Ok(Some(shift));
        }
    }
    Ok(None)
}

fn comparable(a: &PeriodicOrbit, b: &PeriodicOrbit) -> Result<()> {
    if a.b != b.b || (a.m - b.m).abs() > 1e-12 || a.mu != b.mu {
        return Err(Error::Precondition("objects must share m, μ and T".into()));
    }
    Ok(())
}

/// Shifts tried by default: `{0, π/2, π, 3π/2}`.
pub const DEFAULT_SHIFTS: [f64; 4] = [0.0, 0.5 * PI, PI, 1.5 * PI];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MU_EM;
    use crate::seeds::libration_points;

    #[test]
    fn equilibrium_needs_no_newton_step() {
        let l4 = libration_points(MU_EM).unwrap()[3].state();
        let o = correct_fixed_m(&l4, 1, 0.0, 0.0, MU_EM).unwrap();
        assert_eq!(o.x0, l4);
        assert!(o.residual < 1e-14);
    }

    #[test]
    fn l2_dynamical_equivalent_displacement_is_first_order() {
        let l2 = libration_points(MU_EM).unwrap()[1].state();
        let a = correct_fixed_m(&l2, 1, 0.0, 1e-4, MU_EM).unwrap();
        let b = correct_fixed_m(&l2, 1, 0.0, 5e-5, MU_EM).unwrap();
        assert!(a.residual <= ORBIT_TOL);
        let da = (a.x0 - l2).norm();
        let db = (b.x0 - l2).norm();
        // The first-order forcing vanishes at an equilibrium, so the
        // displacement shrinks at least linearly (quadratically in practice).
        assert!(da > 0.0 && da / db >= 1.9, "{da} {db}");
        assert!(da < 1e-4);
    }

    #[test]
    fn far_guess_fails() {
        let x = State::new(5.0, 3.0, 1.0, 2.0, -2.0, 1.0);
        assert!(correct_fixed_m(&x, 1, 0.0, 0.01, MU_EM).is_err());
    }

    #[test]
    fn zero_step_policy_is_rejected() {
        let l2 = libration_points(MU_EM).unwrap()[1].state();
        let o = correct_fixed_m(&l2, 1, 0.0, 0.0, MU_EM).unwrap();
        let policy = StepPolicy {
            ds0: 0.0,
            ..Default::default()
        };
        let prov = Provenance::Seed { tag: "L2-point".into() };
        assert!(continue_family(&o, 1.0, &policy, prov).is_err());
    }

    #[test]
    fn short_l2_point_family_stays_converged() {
        let l2 = libration_points(MU_EM).unwrap()[1].state();
        let o = correct_fixed_m(&l2, 1, 0.0, 0.0, MU_EM).unwrap();
        let policy = StepPolicy {
            m_stop: 0.02,
            ..Default::default()
        };
        let fam = continue_family(&o, 1.0, &policy, Provenance::Seed { tag: "L2-point".into() }).unwrap();
        assert_eq!(fam.termination, Termination::MaxM);
        assert!((fam.last().m - 0.02).abs() < 1e-14);
        for w in fam.members.windows(2) {
            let (a, b) = (w[0].tangent.unwrap(), w[1].tangent.unwrap());
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!(dot > 0.0);
        }
        for o in &fam.members {
            assert!(o.residual <= ORBIT_TOL);
        }
        let mid = &fam.members[fam.members.len() / 2];
        let again = correct_fixed_m(&mid.x0, 1, 0.0, mid.m, MU_EM).unwrap();
        assert!(again.residual <= ORBIT_TOL);
    }

    #[test]
    fn object_equivalence_with_itself() {
        let l2 = libration_points(MU_EM).unwrap()[1].state();
        let o = correct_fixed_m(&l2, 1, 0.0, 0.01, MU_EM).unwrap();
        assert_eq!(object_equivalence(&o, &o, &[0.0]).unwrap(), Some(0.0));
    }
}
