//! Melnikov-type persistence function for CR3BP periodic orbits under the
//! HR4BP forcing, its expansion terms, and fast evaluation through the
//! time-shift identities.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{cr3bp_field, hr4bp_field, State, SystemParams, SINGULARITY_RADIUS};
use crate::error::{Error, Result};
use crate::hvo::HvoSeries;
use crate::propagation::{DenseTrajectory, IntegratorConfig, Propagator};
use crate::seeds::{resonance_of, Cr3bpSeed};

/// Residual bound for the half-period mirror conditions.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Grid size for the half-period symmetry check.
const SYMMETRY_GRID: usize = 64;
/// Samples over one π-period of `s` for the numeric-order Fourier fit.
const FOURIER_SAMPLES: usize = 16;
/// Integrator tolerance for Melnikov quadratures.
const QUADRATURE_TOL: f64 = 1e-13;

/// Expansion order of the forcing used in the Melnikov integrand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationOrder {
    H2,
    H3,
    /// Coefficient `j` extracted numerically from the full field.
    Numeric(u8),
}

impl PerturbationOrder {
    pub fn j(self) -> u8 {
        match self {
            PerturbationOrder::H2 => 2,
            PerturbationOrder::H3 => 3,
            PerturbationOrder::Numeric(j) => j,
        }
    }

    /// Next order in the escalation chain `h2 → h3 → numeric 4`.
    pub fn escalate(self) -> Option<Self> {
        match self {
            PerturbationOrder::H2 => Some(PerturbationOrder::H3),
            PerturbationOrder::H3 => Some(PerturbationOrder::Numeric(4)),
            PerturbationOrder::Numeric(_) => None,
        }
    }

    fn is_analytic(self) -> bool {
        matches!(self, PerturbationOrder::H2 | PerturbationOrder::H3)
    }
}

struct Primaries {
    r1: Vector3<f64>,
    r2: Vector3<f64>,
    n1: f64,
    n2: f64,
}

fn primaries(r: &Vector3<f64>, mu: f64) -> Result<Primaries> {
    let r1 = r + Vector3::new(mu, 0.0, 0.0);
    let r2 = r - Vector3::new(1.0 - mu, 0.0, 0.0);
    let (n1, n2) = (r1.norm(), r2.norm());
    if n1 < SINGULARITY_RADIUS {
        return Err(Error::Singularity {
            primary: 1,
            distance: n1,
        });
    }
    if n2 < SINGULARITY_RADIUS {
        return Err(Error::Singularity {
            primary: 2,
            distance: n2,
        });
    }
    Ok(Primaries { r1, r2, n1, n2 })
}

/// `Q1 − Q2` with `Q = I/R³ − 3RRᵀ/R⁵`.
pub fn p_matrix(r: &Vector3<f64>, mu: f64) -> Result<Matrix3<f64>> {
    let p = primaries(r, mu)?;
    let q = |v: &Vector3<f64>, n: f64| Matrix3::identity() * n.powi(-3) - v * v.transpose() * (3.0 * n.powi(-5));
    Ok(q(&p.r1, p.n1) - q(&p.r2, p.n2))
}

/// Scalar building blocks of `P`, with `κ_k = 1/R1^k − 1/R2^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PComponents {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub kappa3: f64,
    pub kappa5: f64,
}

pub fn p_components(r: &Vector3<f64>, mu: f64) -> Result<PComponents> {
    let p = primaries(r, mu)?;
    let kappa3 = p.n1.powi(-3) - p.n2.powi(-3);
    let kappa5 = p.n1.powi(-5) - p.n2.powi(-5);
    let xm = r.x + mu;
    let inv25 = p.n2.powi(-5);
    Ok(PComponents {
        a: kappa3 - 3.0 * xm * xm * kappa5 - 3.0 * (2.0 * xm - 1.0) * inv25,
        b: kappa3 - 3.0 * r.y * r.y * kappa5,
        c: kappa3 - 3.0 * r.z * r.z * kappa5,
        d: 3.0 * kappa5,
        e: 3.0 * inv25,
        kappa3,
        kappa5,
    })
}

impl PComponents {
    /// `d(x+μ) + e`
    fn coupling(&self, r: &Vector3<f64>, mu: f64) -> f64 {
        self.d * (r.x + mu) + self.e
    }

    pub fn matrix(&self, r: &Vector3<f64>, mu: f64) -> Matrix3<f64> {
        let dd = self.coupling(r, mu);
        let xy = -dd * r.y;
        let xz = -dd * r.z;
        let yz = -self.d * r.y * r.z;
        Matrix3::new(self.a, xy, xz, xy, self.b, yz, xz, yz, self.c)
    }
}

fn tidal(r: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    let (s, c) = (2.0 * alpha).sin_cos();
    Vector3::new(r.x * c - r.y * s, -(r.y * c + r.x * s), 0.0)
}

/// `(y′, −x′, 0)`
fn rot(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.y, -v.x, 0.0)
}

fn split(x: &State) -> (Vector3<f64>, Vector3<f64>) {
    (x.fixed_rows::<3>(0).into_owned(), x.fixed_rows::<3>(3).into_owned())
}

fn mass_product(mu: f64) -> f64 {
    (1.0 - mu) * mu
}

/// `P · (u cos 2α, w sin 2α, 0)` scaled by `(1−μ)μ`; zero when either mass vanishes.
fn p_forcing(r: &Vector3<f64>, alpha: f64, mu: f64, u: f64, w: f64) -> Result<Vector3<f64>> {
    let mp = mass_product(mu);
    if mp == 0.0 {
        return Ok(Vector3::zeros());
    }
    let (s, c) = (2.0 * alpha).sin_cos();
    Ok(p_matrix(r, mu)? * Vector3::new(u * c, w * s, 0.0) * mp)
}

pub fn h2(x: &State, alpha: f64, mu: f64) -> Result<Vector3<f64>> {
    let (r, _) = split(x);
    Ok(1.5 * tidal(&r, alpha) - Vector3::new(0.0, 0.0, r.z) - p_forcing(&r, alpha, mu, -8.0, 11.0)? / 8.0)
}

pub fn h3(x: &State, alpha: f64, mu: f64) -> Result<Vector3<f64>> {
    let (r, _) = split(x);
    Ok(-p_forcing(&r, alpha, mu, -38.0, 59.0)? / 12.0)
}

/// CR3BP gravity `(1−μ)R1/R1³ + μR2/R2³`, skipping massless primaries.
fn gravity(r: &Vector3<f64>, mu: f64) -> Result<Vector3<f64>> {
    let mut g = Vector3::zeros();
    for (w, c, idx) in [(1.0 - mu, -mu, 1u8), (mu, 1.0 - mu, 2u8)] {
        if w == 0.0 {
            continue;
        }
        let d = r - Vector3::new(c, 0.0, 0.0);
        let n = d.norm();
        if n < SINGULARITY_RADIUS {
            return Err(Error::Singularity {
                primary: idx,
                distance: n,
            });
        }
        g += d * (w / n.powi(3));
    }
    Ok(g)
}

/// `∇` of the CR3BP effective potential, `(x, y, 0) − G`.
fn cr3bp_gradient(r: &Vector3<f64>, mu: f64) -> Result<Vector3<f64>> {
    Ok(Vector3::new(r.x, r.y, 0.0) - gravity(r, mu)?)
}

/// Coefficient of `m^j` in the HR4BP minus CR3BP acceleration, `j = 1..=3`.
///
/// The Coriolis factor `2(1+m)` is linear in `m`, so only `g1` carries a
/// velocity term.
pub fn g_terms(x: &State, alpha: f64, mu: f64, j: u8) -> Result<Vector3<f64>> {
    let (r, v) = split(x);
    match j {
        1 => Ok(2.0 * rot(&v) + 2.0 * cr3bp_gradient(&r, mu)?),
        2 => Ok(1.5 * cr3bp_gradient(&r, mu)? + h2(x, alpha, mu)?),
        3 => h3(x, alpha, mu),
        _ => Err(Error::Precondition(format!("no analytic g_{j}"))),
    }
}

/// First-order term in its unsimplified form: Coriolis and centrifugal
/// changes plus the `d1` change of the gravity scale.
pub fn g1_expanded(x: &State, mu: f64, d1: f64) -> Result<Vector3<f64>> {
    let (r, v) = split(x);
    Ok(2.0 * rot(&v) + 2.0 * Vector3::new(r.x, r.y, 0.0) + 3.0 * d1 * gravity(&r, mu)?)
}

/// `(J, K)` with `h·r′ = J cos 2α + K sin 2α` (plus `−zz′` at second order).
pub fn jk_terms(x: &State, mu: f64, order: PerturbationOrder) -> Result<(f64, f64)> {
    let (r, v) = split(x);
    let mp = mass_product(mu);
    let (pj, pk) = if mp == 0.0 {
        (0.0, 0.0)
    } else {
        let pc = p_components(&r, mu)?;
        let dd = pc.coupling(&r, mu);
        (
            -pc.a * v.x + (r.y * v.y + r.z * v.z) * dd,
            r.y * v.x * dd - pc.b * v.y + pc.d * r.y * r.z * v.z,
        )
    };
    match order {
        PerturbationOrder::H2 => Ok((
            1.5 * (r.x * v.x - r.y * v.y) - mp * pj,
            1.5 * (-r.y * v.x - r.x * v.y) + 11.0 / 8.0 * mp * pk,
        )),
        PerturbationOrder::H3 => Ok((-38.0 / 12.0 * mp * pj, 59.0 / 12.0 * mp * pk)),
        PerturbationOrder::Numeric(_) => Err(Error::Precondition(
            "J/K decomposition only exists for h2 and h3".into(),
        )),
    }
}

/// Central difference for the `j`-th derivative at zero, second order in `h`.
fn central_difference(f: &dyn Fn(f64) -> Result<Vector3<f64>>, h: f64, j: u8) -> Result<Vector3<f64>> {
    Ok(match j {
        1 => (f(h)? - f(-h)?) / (2.0 * h),
        2 => (f(h)? - 2.0 * f(0.0)? + f(-h)?) / (h * h),
        3 => (f(2.0 * h)? - 2.0 * f(h)? + 2.0 * f(-h)? - f(-2.0 * h)?) / (2.0 * h.powi(3)),
        4 => (f(2.0 * h)? - 4.0 * f(h)? + 6.0 * f(0.0)? - 4.0 * f(-h)? + f(-2.0 * h)?) / h.powi(4),
        _ => return Err(Error::Precondition(format!("no stencil for order {j}"))),
    })
}

/// Tableau depth of the series extraction.
const ORACLE_LEVELS: usize = 5;

/// `j`-th Taylor coefficient in `m` of the HR4BP minus CR3BP acceleration,
/// by Richardson extrapolation of central differences in `h²`.
///
/// The diagonal entry of a fixed-depth tableau is returned so the result is
/// smooth in the state; a large final correction is reported as an error.
pub fn series_extract_with(x: &State, alpha: f64, mu: f64, j: u8, series: &HvoSeries, h0: f64) -> Result<Vector3<f64>> {
    if !(1..=4).contains(&j) {
        return Err(Error::Precondition(format!(
            "series extraction supports j = 1..4, got {j}"
        )));
    }
    let base = cr3bp_field(x, mu)?;
    let field = |m: f64| -> Result<Vector3<f64>> {
        let p = SystemParams::unchecked(m, mu, series);
        let f = hr4bp_field(x, &p, alpha)?;
        Ok((f - base).fixed_rows::<3>(3).into_owned())
    };
    let factorial = (1..=j as u32).product::<u32>() as f64;
    let mut prev: Vec<Vector3<f64>> = Vec::new();
    let mut correction = f64::INFINITY;
    for level in 0..ORACLE_LEVELS {
        let h = h0 / 2f64.powi(level as i32);
        let mut row = vec![central_difference(&field, h, j)? / factorial];
        for k in 1..=level {
            let w = 4f64.powi(k as i32);
            let next = row[k - 1] + (row[k - 1] - prev[k - 1]) / (w - 1.0);
            row.push(next);
        }
        if level > 0 {
            correction = (row[level] - prev[level - 1]).norm();
        }
        prev = row;
    }
    let value = prev[ORACLE_LEVELS - 1];
    if !(correction <= 1e-5 * (1.0 + value.norm())) {
        return Err(Error::Extrapolation(format!(
            "order {j} tableau did not settle (last correction {correction:e})"
        )));
    }
    Ok(value)
}

/// Oracle for `g_j`: Melnikov-mode HVO coefficients for `j ≤ 3`; the full
/// series for `j = 4`, whose `m⁴` terms the Melnikov-mode table omits.
pub fn series_extract_oracle(x: &State, alpha: f64, mu: f64, j: u8) -> Result<Vector3<f64>> {
    if j == 4 {
        series_extract_with(x, alpha, mu, j, &HvoSeries::full(), 4e-2)
    } else {
        series_extract_with(x, alpha, mu, j, &HvoSeries::melnikov(), 1e-2)
    }
}

/// Forcing vector used in the Melnikov integrand for `order`.
pub fn forcing(x: &State, alpha: f64, mu: f64, order: PerturbationOrder) -> Result<Vector3<f64>> {
    match order {
        PerturbationOrder::H2 => h2(x, alpha, mu),
        PerturbationOrder::H3 => h3(x, alpha, mu),
        PerturbationOrder::Numeric(j) => series_extract_oracle(x, alpha, mu, j),
    }
}

/// A CR3BP periodic orbit with period `T*` resonant with the forcing:
/// `bπ = aT*`.
#[derive(Debug, Clone)]
pub struct ResonantOrbit {
    pub seed: Cr3bpSeed,
    pub a: u32,
    pub b: u32,
    dense: DenseTrajectory,
    speed_max: f64,
}

impl ResonantOrbit {
    pub fn new(seed: Cr3bpSeed) -> Result<Self> {
        let (a, b) = resonance_of(seed.period, 1e-9)
            .ok_or_else(|| Error::Precondition(format!("period {} is not resonant with π", seed.period)))?;
        let cfg = IntegratorConfig::default().with_tolerance(1e-13).with_dense(true);
        let r = Propagator::new(SystemParams::cr3bp(seed.mu)?, cfg).propagate(&seed.x0, 0.0, seed.period)?;
        let dense = r.dense.expect("requested");
        let speed_max = (0..=256)
            .map(|i| dense.state_at(seed.period * i as f64 / 256.0))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .map(|x| x.fixed_rows::<3>(3).norm())
            .fold(0.0, f64::max);
        Ok(Self {
            seed,
            a,
            b,
            dense,
            speed_max,
        })
    }

    pub fn t_star(&self) -> f64 {
        self.seed.period
    }

    pub fn mu(&self) -> f64 {
        self.seed.mu
    }

    /// Forced period `bπ`.
    pub fn forced_period(&self) -> f64 {
        self.b as f64 * PI
    }

    /// `X*(s)` for any `s`, wrapped into one period.
    pub fn state_at(&self, s: f64) -> Result<State> {
        self.dense.state_at(s.rem_euclid(self.t_star()))
    }

    pub fn speed_max(&self) -> f64 {
        self.speed_max
    }

    /// Absolute threshold below which a basis counts as identically zero.
    pub fn zero_threshold(&self) -> f64 {
        1e-10 * (1.0 + self.speed_max)
    }

    fn quadrature<F>(&self, s: f64, duration: f64, integrand: F) -> Result<f64>
    where
        F: Fn(&State, f64) -> f64 + Send + Sync,
    {
        let x0 = self.state_at(s)?;
        let cfg = IntegratorConfig::default().with_tolerance(QUADRATURE_TOL);
        let mut prop = Propagator::new(SystemParams::cr3bp(self.mu())?, cfg);
        let id = prop.register_quadrature(Box::new(integrand));
        let r = prop.propagate(&x0, 0.0, duration)?;
        let v = r.quadrature(id);
        if !v.is_finite() {
            return Err(Error::NonFinite { t: duration });
        }
        Ok(v)
    }

    /// Trapezoid rule over one full forced period `aT* = bπ` on the dense
    /// trajectory. The integrand is periodic there, so the rule converges
    /// spectrally. Sampling the stored orbit instead of re-propagating from
    /// `X*(s)` keeps unstable orbits from drifting off over `a` revolutions.
    fn periodic_trapezoid<F>(&self, s: f64, integrand: F) -> Result<f64>
    where
        F: Fn(&State, f64) -> f64 + Send + Sync,
    {
        let period = self.a as f64 * self.t_star();
        let sample = |n: usize, k: usize| -> Result<f64> {
            let t = period * k as f64 / n as f64;
            Ok(integrand(&self.state_at(s + t)?, t))
        };
        let sweep = |n: usize, odd: bool| -> Result<(f64, f64)> {
            let (step, first) = if odd { (2, 1) } else { (1, 0) };
            let m = if odd { n / 2 } else { n };
            let vals = (0..m)
                .into_par_iter()
                .map(|k| sample(n, step * k + first))
                .collect::<Result<Vec<_>>>()?;
            Ok((vals.iter().sum(), vals.iter().map(|v| v.abs()).sum()))
        };
        let mut n = 512;
        let (mut sum, mut abs_sum) = sweep(n, false)?;
        let mut value = sum * period / n as f64;
        let mut settled_once = false;
        while n < 1 << 17 {
            // Doubling only needs the new midpoints.
            let (odd, odd_abs) = sweep(2 * n, true)?;
            sum += odd;
            abs_sum += odd_abs;
            n *= 2;
            let next = sum * period / n as f64;
            // Cancellation can leave the value far below the size of the integrand.
            let size = 1.0 + abs_sum * period / n as f64;
            let settled = (next - value).abs() <= 1e-15 * size;
            value = next;
            if !value.is_finite() {
                return Err(Error::NonFinite { t: period });
            }
            if settled && settled_once {
                return Ok(value);
            }
            settled_once = settled;
        }
        log::warn!("trapezoid rule unsettled at {n} samples");
        Ok(value)
    }
}

fn work(x: &State, alpha: f64, mu: f64, order: PerturbationOrder) -> f64 {
    match forcing(x, alpha, mu, order) {
        Ok(h) => h.dot(&x.fixed_rows::<3>(3)),
        Err(_) => f64::NAN,
    }
}

/// `𝓜(s, τ0) = ∫₀^{aT*} h(X*(s+τ), τ0+τ)·r*′(s+τ) dτ`.
pub fn melnikov_eval(orbit: &ResonantOrbit, s: f64, tau0: f64, order: PerturbationOrder) -> Result<f64> {
    let mu = orbit.mu();
    let integrand = move |x: &State, t: f64| work(x, tau0 + t, mu, order);
    orbit.periodic_trapezoid(s, integrand)
}

/// Closed-loop integral of `g_j · r′` with `j ≤ 3`, from `s = 0`.
pub fn g_work(orbit: &ResonantOrbit, tau0: f64, j: u8) -> Result<f64> {
    let mu = orbit.mu();
    orbit.quadrature(0.0, orbit.a as f64 * orbit.t_star(), move |x, t| {
        match g_terms(x, tau0 + t, mu, j) {
            Ok(g) => g.dot(&x.fixed_rows::<3>(3)),
            Err(_) => f64::NAN,
        }
    })
}

/// Even trigonometric polynomial `c0 + a2 cos 2u + b2 sin 2u + a4 cos 4u + b4 sin 4u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierFit {
    pub coeffs: [f64; 5],
    /// Largest sample residual of the fit.
    pub residual: f64,
}

impl FourierFit {
    fn basis(u: f64) -> [f64; 5] {
        let (s2, c2) = (2.0 * u).sin_cos();
        let (s4, c4) = (4.0 * u).sin_cos();
        [1.0, c2, s2, c4, s4]
    }

    pub fn eval(&self, u: f64) -> f64 {
        Self::basis(u).iter().zip(&self.coeffs).map(|(b, c)| b * c).sum()
    }

    fn fit(samples: &[(f64, f64)]) -> Result<Self> {
        let a = DMatrix::from_fn(samples.len(), 5, |i, j| Self::basis(samples[i].0)[j]);
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
        let c = a
            .clone()
            .svd(true, true)
            .solve(&y, 1e-14)
            .map_err(|e| Error::Precondition(e.to_string()))?;
        let residual = (a * &c - y).amax();
        Ok(Self {
            coeffs: [c[0], c[1], c[2], c[3], c[4]],
            residual,
        })
    }

    /// Size of everything except the single 2-harmonic.
    pub fn non_sinusoidal(&self) -> f64 {
        self.coeffs[0].abs().max(self.coeffs[3].abs()).max(self.coeffs[4].abs())
    }
}

/// Two quadratures that determine `𝓜` everywhere for `h2`/`h3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovBasis {
    /// `𝓜(s_ref, τ0_ref)`
    pub m0: f64,
    /// `𝓜(s_ref + π/4, τ0_ref)`
    pub m1: f64,
    pub s_ref: f64,
    pub tau0_ref: f64,
    pub order: PerturbationOrder,
    pub t_star: f64,
    pub threshold: f64,
    pub identically_zero: bool,
    /// Present for numeric orders, where the single-sinusoid form is not
    /// guaranteed.
    pub fourier: Option<FourierFit>,
}

impl MelnikovBasis {
    /// Analytic basis from given values; `threshold` flags identical zero.
    pub fn from_values(m0: f64, m1: f64, t_star: f64, threshold: f64) -> Self {
        Self {
            m0,
            m1,
            s_ref: 0.0,
            tau0_ref: 0.0,
            order: PerturbationOrder::H2,
            t_star,
            threshold,
            identically_zero: m0.abs().max(m1.abs()) < threshold,
            fourier: None,
        }
    }

    fn shift(&self, s: f64, tau0: f64) -> f64 {
        (s - self.s_ref) - (tau0 - self.tau0_ref)
    }

    /// `𝓜(s, τ0)` without further quadrature.
    pub fn reconstruct(&self, s: f64, tau0: f64) -> f64 {
        let u = self.shift(s, tau0);
        match &self.fourier {
            Some(f) => f.eval(u),
            None => {
                let (sn, cs) = (2.0 * u).sin_cos();
                cs * self.m0 + sn * self.m1
            }
        }
    }

    pub fn scale(&self) -> f64 {
        self.m0.abs().max(self.m1.abs()).max(1.0)
    }
}

pub fn melnikov_basis(orbit: &ResonantOrbit, order: PerturbationOrder) -> Result<MelnikovBasis> {
    let threshold = orbit.zero_threshold();
    let mut basis = MelnikovBasis {
        order,
        threshold,
        ..MelnikovBasis::from_values(0.0, 0.0, orbit.t_star(), threshold)
    };
    if order.is_analytic() {
        basis.m0 = melnikov_eval(orbit, 0.0, 0.0, order)?;
        basis.m1 = melnikov_eval(orbit, FRAC_PI_4, 0.0, order)?;
        basis.identically_zero = basis.m0.abs().max(basis.m1.abs()) < threshold;
        return Ok(basis);
    }
    // 𝓜(s, 0) is π-periodic in s; sample one period and fit.
    let samples = (0..FOURIER_SAMPLES)
        .map(|k| {
            let s = PI * k as f64 / FOURIER_SAMPLES as f64;
            Ok((s, melnikov_eval(orbit, s, 0.0, order)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = FourierFit::fit(&samples)?;
    basis.m0 = samples[0].1;
    basis.m1 = samples[FOURIER_SAMPLES / 4].1;
    basis.identically_zero = samples.iter().all(|s| s.1.abs() < threshold);
    if fit.non_sinusoidal() >= threshold {
        basis.fourier = Some(fit);
    }
    Ok(basis)
}

/// Basis at the lowest order that is not identically zero.
pub fn melnikov_basis_escalating(orbit: &ResonantOrbit) -> Result<MelnikovBasis> {
    let mut order = PerturbationOrder::H2;
    loop {
        let basis = melnikov_basis(orbit, order)?;
        if !basis.identically_zero {
            return Ok(basis);
        }
        match order.escalate() {
            Some(o) => order = o,
            None => return Ok(basis),
        }
    }
}

/// Zeros of `s ↦ 𝓜(s, τ0_ref)` in `[0, T*)`, sorted.
pub fn melnikov_zeros(basis: &MelnikovBasis) -> Result<Vec<f64>> {
    if basis.identically_zero {
        return Err(Error::IdenticallyZero);
    }
    let t = basis.t_star;
    if let Some(fit) = &basis.fourier {
        return Ok(dedup_periodic(
            sampled_zeros(|s| fit.eval(basis.shift(s, basis.tau0_ref)), t),
            t,
        ));
    }
    let u0 = 0.5 * (-basis.m0).atan2(basis.m1);
    let start = basis.s_ref + u0;
    let k_min = ((0.0 - start) / FRAC_PI_2).ceil() as i64;
    let mut zeros = Vec::new();
    let mut k = k_min;
    loop {
        let s = start + k as f64 * FRAC_PI_2;
        if s >= t {
            break;
        }
        if s >= 0.0 {
            zeros.push(s);
        }
        k += 1;
    }
    Ok(dedup_periodic(zeros, t))
}

/// Drop zeros that coincide modulo `t` (a root at `t − ε` is the root at `0`).
fn dedup_periodic(mut zeros: Vec<f64>, t: f64) -> Vec<f64> {
    let tol = 1e-9 * t.max(1.0);
    for z in zeros.iter_mut() {
        if *z >= t - tol {
            *z = 0.0;
        }
    }
    zeros.sort_by(f64::total_cmp);
    zeros.dedup_by(|b, a| (*b - *a).abs() <= tol);
    zeros
}

fn sampled_zeros(f: impl Fn(f64) -> f64, t: f64) -> Vec<f64> {
    let n = 4096;
    let mut zeros = Vec::new();
    let mut prev = (0.0, f(0.0));
    if prev.1 == 0.0 {
        zeros.push(0.0);
    }
    for i in 1..=n {
        let s = t * i as f64 / n as f64;
        let v = f(s);
        if prev.1 != 0.0 && v != 0.0 && (prev.1 < 0.0) != (v < 0.0) {
            let (mut lo, mut hi, flo) = (prev.0, s, prev.1);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if (f(mid) < 0.0) == (flo < 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let z = 0.5 * (lo + hi);
            if z < t {
                zeros.push(z);
            }
        } else if v == 0.0 && s < t {
            zeros.push(s);
        }
        prev = (s, v);
    }
    zeros
}

/// Residuals of the five half-period mirror conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryCheck {
    pub symmetric: bool,
    /// Max residual of: x even, x′ odd, y odd, y′ even, zz′ odd.
    pub residuals: [f64; 5],
}

impl SymmetryCheck {
    /// 1-based index of the worst condition.
    pub fn worst(&self) -> (usize, f64) {
        let (i, r) =
            self.residuals.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc },
            );
        (i + 1, r)
    }
}

/// Compare `X*(s+T*−τ)` against `X*(s+τ)` on a grid over `[0, T*/2]`.
pub fn check_half_period_symmetry(orbit: &ResonantOrbit, s: f64) -> Result<SymmetryCheck> {
    let t = orbit.t_star();
    let mut res = [0.0f64; 5];
    for i in 0..=SYMMETRY_GRID {
        let tau = 0.5 * t * i as f64 / SYMMETRY_GRID as f64;
        let p = orbit.state_at(s + t - tau)?;
        let q = orbit.state_at(s + tau)?;
        let conds = [
            p[0] - q[0],
            p[3] + q[3],
            p[1] + q[1],
            p[4] - q[4],
            p[2] * p[5] + q[2] * q[5],
        ];
        for (r, c) in res.iter_mut().zip(conds) {
            *r = r.max(c.abs());
        }
    }
    Ok(SymmetryCheck {
        symmetric: res.iter().all(|&r| r <= SYMMETRY_TOL),
        residuals: res,
    })
}

/// Product form `𝓜 = 2AB` at a half-period-symmetric point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPeriodForm {
    pub a_factor: f64,
    pub b_integral: f64,
    pub value: f64,
}

pub fn half_period_form(orbit: &ResonantOrbit, s: f64, tau0: f64, order: PerturbationOrder) -> Result<HalfPeriodForm> {
    if !order.is_analytic() {
        return Err(Error::Precondition("product form needs h2 or h3".into()));
    }
    let check = check_half_period_symmetry(orbit, s)?;
    if !check.symmetric {
        let (condition, residual) = check.worst();
        return Err(Error::SymmetryViolation { condition, residual });
    }
    let a_factor = if orbit.a == 1 { (2.0 * tau0).sin() } else { 0.0 };
    let mu = orbit.mu();
    let b_integral = orbit.quadrature(s, 0.5 * orbit.t_star(), move |x, tau| match jk_terms(x, mu, order) {
        Ok((j, k)) => {
            let (sn, cs) = (2.0 * tau).sin_cos();
            k * cs - j * sn
        }
        Err(_) => f64::NAN,
    })?;
    Ok(HalfPeriodForm {
        a_factor,
        b_integral,
        value: 2.0 * a_factor * b_integral,
    })
}

/// `Σ_{k<a} sin(2(τ0 + kT*))` summed directly.
pub fn sine_sum(a: u32, t_star: f64, tau0: f64) -> f64 {
    (0..a).map(|k| (2.0 * (tau0 + k as f64 * t_star)).sin()).sum()
}

/// Closed form `sin(aT*) sin((a−1)T* + 2τ0) / sin T*`; `None` when
/// `sin T*` vanishes.
pub fn sine_sum_closed(a: u32, t_star: f64, tau0: f64) -> Option<f64> {
    let den = t_star.sin();
    if den.abs() < 1e-12 {
        return None;
    }
    let a = a as f64;
    Some((a * t_star).sin() * ((a - 1.0) * t_star + 2.0 * tau0).sin() / den)
}

/// Value of the sine sum under resonance: `sin 2τ0` if `a = 1`, else 0.
pub fn sine_sum_resonant(a: u32, tau0: f64) -> f64 {
    if a == 1 {
        (2.0 * tau0).sin()
    } else {
        0.0
    }
}

/// Least-squares fit of `R cos(2s − φ)`; returns `(R, φ, max residual)`.
pub fn fit_sinusoid(samples: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let a = DMatrix::from_fn(samples.len(), 2, |i, j| {
        let (sn, cs) = (2.0 * samples[i].0).sin_cos();
        if j == 0 {
            cs
        } else {
            sn
        }
    });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let c = a
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let residual = (a * &c - y).amax();
    Ok((c[0].hypot(c[1]), c[1].atan2(c[0]), residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_state(rng: &mut impl Rng) -> State {
        State::from_fn(|i, _| {
            if i < 3 {
                rng.gen_range(-1.5..1.5)
            } else {
                rng.gen_range(-0.5..0.5)
            }
        })
    }

    #[test]
    fn p_matrix_detailed_form_agrees() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let r = x.fixed_rows::<3>(0).into_owned();
            let p = p_matrix(&r, 0.0122).unwrap();
            let pc = p_components(&r, 0.0122).unwrap();
            let q = pc.matrix(&r, 0.0122);
            let scale = p.amax().max(1.0);
            assert!((p - q).amax() <= 1e-12 * scale, "{p} vs {q}");
            assert_eq!(p, p.transpose());
            assert!((pc.b - p[(1, 1)]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn p_matrix_y_mirror() {
        let r = Vector3::new(0.7, 0.3, 0.2);
        let rm = Vector3::new(0.7, -0.3, 0.2);
        let p = p_matrix(&r, 0.0122).unwrap();
        let q = p_matrix(&rm, 0.0122).unwrap();
        for (i, j) in [(0, 0), (1, 1), (2, 2), (0, 2)] {
            assert!((p[(i, j)] - q[(i, j)]).abs() < 1e-13);
        }
        for (i, j) in [(0, 1), (1, 2)] {
            assert!((p[(i, j)] + q[(i, j)]).abs() < 1e-13);
        }
    }

    #[test]
    fn h_examples_with_massless_secondary() {
        let x = State::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(h2(&x, 0.0, 0.0).unwrap(), Vector3::new(1.5, 0.0, 0.0));
        let x = State::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        for alpha in [0.0, 0.4, 2.0] {
            let h = h2(&x, alpha, 0.0).unwrap();
            assert!((h - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        }
        let x = State::new(0.3, -0.2, 0.1, 0.0, 0.0, 0.0);
        assert_eq!(h3(&x, 0.7, 0.0).unwrap(), Vector3::zeros());
    }

    #[test]
    fn h_terms_are_pi_periodic() {
        let x = State::new(0.5, 0.4, 0.1, 0.1, -0.2, 0.05);
        for alpha in [0.0, 0.3, 1.1] {
            let a = h2(&x, alpha, 0.0122).unwrap();
            let b = h2(&x, alpha + PI, 0.0122).unwrap();
            assert!((a - b).norm() < 1e-13);
            let a = h3(&x, alpha, 0.0122).unwrap();
            let b = h3(&x, alpha + PI, 0.0122).unwrap();
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn g1_forms_agree() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let a = g_terms(&x, 0.3, 0.0122, 1).unwrap();
            let b = g1_expanded(&x, 0.0122, -2.0 / 3.0).unwrap();
            assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn g3_is_h3_and_coriolis_does_no_work() {
        let x = State::new(0.5, 0.4, 0.1, 0.1, -0.2, 0.05);
        assert_eq!(g_terms(&x, 0.2, 0.0122, 3).unwrap(), h3(&x, 0.2, 0.0122).unwrap());
        let v = x.fixed_rows::<3>(3).into_owned();
        assert_eq!(rot(&v).dot(&v), 0.0);
    }

    #[test]
    fn jk_decomposition_matches_h_dot_v() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let v = x.fixed_rows::<3>(3).into_owned();
            let zz = x[2] * x[5];
            for alpha in [0.0f64, 0.37, 1.2] {
                let (s, c) = (2.0 * alpha).sin_cos();
                let (j, k) = jk_terms(&x, 0.0122, PerturbationOrder::H2).unwrap();
                let lhs = h2(&x, alpha, 0.0122).unwrap().dot(&v);
                assert!((lhs - (j * c + k * s - zz)).abs() <= 1e-11 * (1.0 + lhs.abs()));
                let (j, k) = jk_terms(&x, 0.0122, PerturbationOrder::H3).unwrap();
                let lhs = h3(&x, alpha, 0.0122).unwrap().dot(&v);
                assert!((lhs - (j * c + k * s)).abs() <= 1e-11 * (1.0 + lhs.abs()));
            }
        }
    }

    #[test]
    fn oracle_reproduces_expansion() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_state(&mut rng);
            let r = x.fixed_rows::<3>(0).into_owned();
            if (r - Vector3::new(-0.0122, 0.0, 0.0)).norm() < 0.2
                || (r - Vector3::new(1.0 - 0.0122, 0.0, 0.0)).norm() < 0.2
            {
                continue;
            }
            for (j, tol) in [(1u8, 1e-7), (2, 1e-6), (3, 1e-5)] {
                let alpha = rng.gen_range(0.0..PI);
                let g = g_terms(&x, alpha, 0.0122, j).unwrap();
                let o = series_extract_oracle(&x, alpha, 0.0122, j).unwrap();
                assert!((g - o).norm() <= tol * (1.0 + g.norm()), "j={j}: {g} vs {o}");
            }
        }
    }

    #[test]
    fn zeros_of_simple_bases() {
        let b = MelnikovBasis::from_values(1.0, 0.0, 2.0 * PI, 1e-10);
        let z = melnikov_zeros(&b).unwrap();
        let want = [0.25, 0.75, 1.25, 1.75].map(|k| k * PI);
        assert_eq!(z.len(), 4);
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let b = MelnikovBasis::from_values(0.0, 1.0, 2.0 * PI, 1e-10);
        let z = melnikov_zeros(&b).unwrap();
        let want = [0.0, 0.5, 1.0, 1.5].map(|k| k * PI);
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let b = MelnikovBasis::from_values(1e-12, -1e-12, PI, 1e-10);
        assert!(matches!(melnikov_zeros(&b), Err(Error::IdenticallyZero)));
    }

    #[test]
    fn zeros_wrapping_the_period_are_merged() {
        let t = PI;
        assert_eq!(dedup_periodic(vec![0.0, 1.0, t - 1e-13], t), vec![0.0, 1.0]);
        assert_eq!(dedup_periodic(vec![2.0, 1.0, 1.0 + 1e-12], t), vec![1.0, 2.0]);
        assert_eq!(dedup_periodic(vec![1.0, t - 1e-11], t), vec![0.0, 1.0]);
    }

    #[test]
    fn sine_sum_forms() {
        for (a, b) in [(1u32, 1u32), (1, 2), (2, 1), (9, 4), (3, 2)] {
            let t = b as f64 * PI / a as f64;
            for tau0 in [0.0, 0.3, 1.7] {
                let direct = sine_sum(a, t, tau0);
                assert!((direct - sine_sum_resonant(a, tau0)).abs() < 1e-12);
                if let Some(c) = sine_sum_closed(a, t, tau0) {
                    assert!((direct - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sinusoid_fit_recovers_amplitude() {
        let samples: Vec<_> = (0..64)
            .map(|i| {
                let s = i as f64 * 0.1;
                (s, 0.7 * (2.0 * s - 0.4).cos())
            })
            .collect();
        let (r, phi, res) = fit_sinusoid(&samples).unwrap();
        assert!((r - 0.7).abs() < 1e-12 && (phi - 0.4).abs() < 1e-12 && res < 1e-12);
    }
}
