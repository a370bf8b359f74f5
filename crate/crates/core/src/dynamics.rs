//! CR3BP and HR4BP vector fields in the rotating frame, with their state and
//! parameter Jacobians and the discrete time-reversal symmetries.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix6, Matrix6x2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvo::{rho_bar, HvoEval, HvoSeries};

/// `(x, y, z, x', y', z')` in scaled units.
pub type State = Vector6<f64>;

/// Distance to a primary below which field evaluation fails.
pub const SINGULARITY_RADIUS: f64 = 1e-8;
/// Largest `m` for which the primaries' orbit is stable; families stop here.
pub const M_MAX: f64 = 0.19510486;
/// Sun-Earth-Moon value of `m`.
pub const M_SEM: f64 = 0.0808;
/// Earth-Moon mass ratio.
pub const MU_EM: f64 = 0.0122;

pub(crate) fn full_series() -> &'static HvoSeries {
    static SERIES: OnceLock<HvoSeries> = OnceLock::new();
    SERIES.get_or_init(HvoSeries::full)
}

/// `(m, μ)` with the HVO evaluated once at `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub m: f64,
    pub mu: f64,
    pub hvo: HvoEval,
}

impl SystemParams {
    /// Full-mode HVO; `0 ≤ m < 3`, `0 < μ < 1/2`.
    pub fn new(m: f64, mu: f64) -> Result<Self> {
        Self::with_series(m, mu, full_series())
    }

    pub fn cr3bp(mu: f64) -> Result<Self> {
        Self::new(0.0, mu)
    }

    pub fn with_series(m: f64, mu: f64, series: &HvoSeries) -> Result<Self> {
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::Domain(mu));
        }
        let hvo = series.evaluate(m)?;
        Ok(Self { m, mu, hvo })
    }

    /// No domain checks; negative `m` is allowed. Used by the series oracle.
    pub(crate) fn unchecked(m: f64, mu: f64, series: &HvoSeries) -> Self {
        Self {
            m,
            mu,
            hvo: series.evaluate_signed(m),
        }
    }

    pub fn with_m(&self, m: f64) -> Result<Self> {
        Self::new(m, self.mu)
    }

    pub fn is_cr3bp(&self) -> bool {
        self.m == 0.0
    }
}

/// Bookkeeping between scaled and physical units. Not used by the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitScales {
    /// `(M1 + M2) / M0`
    pub nu: f64,
    /// Physical distance from P0 to the primaries' barycenter.
    pub d_a: f64,
    /// Mean motion of P0 about the primaries' barycenter.
    pub n0: f64,
    /// Mass of P0.
    pub m0: f64,
}

impl UnitScales {
    pub fn mass_unit(&self) -> f64 {
        self.m0
    }

    pub fn distance_unit(&self, params: &SystemParams) -> f64 {
        params.hvo.a0 * self.d_a * self.nu.cbrt()
    }

    pub fn time_unit(&self, params: &SystemParams) -> f64 {
        params.m / self.n0
    }

    /// Mean motion of the primaries implied by `m` and `n0`.
    pub fn primaries_mean_motion(&self, params: &SystemParams) -> f64 {
        self.n0 * (1.0 + params.m) / params.m
    }

    /// `d_a` recovered from a known distance unit.
    pub fn d_a_from_distance_unit(du: f64, nu: f64, params: &SystemParams) -> f64 {
        du / (params.hvo.a0 * nu.cbrt())
    }
}

/// Positions of the particle relative to each primary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeGeometry {
    /// Relative to the larger primary.
    pub r1: Vector3<f64>,
    pub r1_norm: f64,
    /// Relative to the smaller primary.
    pub r2: Vector3<f64>,
    pub r2_norm: f64,
    /// `î + ρ̄`, the separation of the primaries.
    pub separation: Vector3<f64>,
    /// `∂ρ̄/∂m`.
    pub dsep_dm: Vector3<f64>,
}

impl RelativeGeometry {
    pub fn new(r: &Vector3<f64>, params: &SystemParams, tau: f64) -> Result<Self> {
        let (rho, drho) = if params.m == 0.0 {
            (Vector3::zeros(), Vector3::zeros())
        } else {
            rho_bar(&params.hvo, tau)
        };
        let separation = Vector3::x() + rho;
        let r1 = r + params.mu * separation;
        let r2 = r - (1.0 - params.mu) * separation;
        let (r1_norm, r2_norm) = (r1.norm(), r2.norm());
        if r1_norm < SINGULARITY_RADIUS {
            return Err(Error::Singularity {
                primary: 1,
                distance: r1_norm,
            });
        }
        if r2_norm < SINGULARITY_RADIUS {
            return Err(Error::Singularity {
                primary: 2,
                distance: r2_norm,
            });
        }
        if !(r1_norm.is_finite() && r2_norm.is_finite()) {
            return Err(Error::NonFinite { t: tau });
        }
        Ok(Self {
            r1,
            r1_norm,
            r2,
            r2_norm,
            separation,
            dsep_dm: drho,
        })
    }

    /// `∂R1/∂μ = ∂R2/∂μ`
    pub fn dr_dmu(&self) -> Vector3<f64> {
        self.separation
    }
}

/// `∂(R/|R|³)/∂R = I/R³ − 3RRᵀ/R⁵`
pub(crate) fn kepler_gradient(r: &Vector3<f64>, norm: f64) -> Matrix3<f64> {
    let inv3 = norm.powi(-3);
    let inv5 = inv3 / (norm * norm);
    Matrix3::identity() * inv3 - r * r.transpose() * (3.0 * inv5)
}

/// `Ω × v` with `Ω = k̂`.
pub(crate) fn omega_cross(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-v.y, v.x, 0.0)
}

/// Everything the integrator may need at one point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FieldEval {
    pub deriv: State,
    pub vrr: Option<Matrix3<f64>>,
    pub c: Option<Matrix6x2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Want {
    pub jacobian: bool,
    pub partials: bool,
}

pub(crate) fn evaluate_field(x: &State, params: &SystemParams, tau: f64, want: Want) -> Result<FieldEval> {
    let r = x.fixed_rows::<3>(0).into_owned();
    let v = x.fixed_rows::<3>(3).into_owned();
    let geo = RelativeGeometry::new(&r, params, tau)?;
    let mu = params.mu;
    let m = params.m;
    let (k, dk) = if m == 0.0 {
        (1.0, params.hvo.dgravity_scale_dm)
    } else {
        (params.hvo.gravity_scale, params.hvo.dgravity_scale_dm)
    };

    let inv1 = geo.r1_norm.powi(-3);
    let inv2 = geo.r2_norm.powi(-3);
    let g = geo.r1 * ((1.0 - mu) * inv1) + geo.r2 * (mu * inv2);

    let (s2, c2) = (2.0 * tau).sin_cos();
    let tidal = Vector3::new(r.x * c2 - r.y * s2, -(r.y * c2 + r.x * s2), 0.0);
    let planar = Vector3::new(r.x, r.y, 0.0);

    let mut accel = -2.0 * (1.0 + m) * omega_cross(&v) - k * g;
    if m == 0.0 {
        accel += planar;
    } else {
        let q = 1.0 + 2.0 * m + 1.5 * m * m;
        accel += q * planar + 1.5 * m * m * tidal - Vector3::new(0.0, 0.0, m * m * r.z);
    }

    let mut deriv = State::zeros();
    deriv.fixed_rows_mut::<3>(0).copy_from(&v);
    deriv.fixed_rows_mut::<3>(3).copy_from(&accel);

    let needs_q = want.jacobian || want.partials;
    let (q1, q2) = if needs_q {
        (
            kepler_gradient(&geo.r1, geo.r1_norm),
            kepler_gradient(&geo.r2, geo.r2_norm),
        )
    } else {
        (Matrix3::zeros(), Matrix3::zeros())
    };

    let vrr = want.jacobian.then(|| {
        let q = 1.0 + 2.0 * m + 1.5 * m * m;
        let t = 1.5 * m * m;
        let poly = Matrix3::new(q + t * c2, -t * s2, 0.0, -t * s2, q - t * c2, 0.0, 0.0, 0.0, -m * m);
        poly - k * ((1.0 - mu) * q1 + mu * q2)
    });

    let c = want.partials.then(|| {
        let p = geo.separation;
        let dm = -2.0 * omega_cross(&v) + (2.0 + 3.0 * m) * planar + 3.0 * m * tidal
            - Vector3::new(0.0, 0.0, 2.0 * m * r.z)
            - dk * g
            - k * (1.0 - mu) * mu * ((q1 - q2) * geo.dsep_dm);
        let dg_dmu = -geo.r1 * inv1 + geo.r2 * inv2 + (1.0 - mu) * (q1 * p) + mu * (q2 * p);
        let dmu = -k * dg_dmu;
        let mut c = Matrix6x2::zeros();
        c.fixed_view_mut::<3, 1>(3, 0).copy_from(&dm);
        c.fixed_view_mut::<3, 1>(3, 1).copy_from(&dmu);
        c
    });

    Ok(FieldEval { deriv, vrr, c })
}

const FIELD_ONLY: Want = Want {
    jacobian: false,
    partials: false,
};

/// CR3BP field with P1 at `(−μ, 0, 0)` and P2 at `(1−μ, 0, 0)`.
pub fn cr3bp_field(x: &State, mu: f64) -> Result<State> {
    let params = SystemParams::cr3bp(mu)?;
    Ok(evaluate_field(x, &params, 0.0, FIELD_ONLY)?.deriv)
}

/// HR4BP field; at `m = 0` this is the CR3BP field.
pub fn hr4bp_field(x: &State, params: &SystemParams, tau: f64) -> Result<State> {
    Ok(evaluate_field(x, params, tau, FIELD_ONLY)?.deriv)
}

/// Scalar pseudo-potential `V`.
pub fn potential(r: &Vector3<f64>, params: &SystemParams, tau: f64) -> Result<f64> {
    let geo = RelativeGeometry::new(r, params, tau)?;
    let m = params.m;
    let k = if m == 0.0 { 1.0 } else { params.hvo.gravity_scale };
    let (s2, c2) = (2.0 * tau).sin_cos();
    let q = 1.0 + 2.0 * m + 1.5 * m * m;
    Ok(0.5 * q * (r.x * r.x + r.y * r.y) - 0.5 * m * m * r.z * r.z
        + 0.75 * m * m * ((r.x * r.x - r.y * r.y) * c2 - 2.0 * r.x * r.y * s2)
        + k * ((1.0 - params.mu) / geo.r1_norm + params.mu / geo.r2_norm))
}

pub fn potential_gradient(r: &Vector3<f64>, params: &SystemParams, tau: f64) -> Result<Vector3<f64>> {
    let mut x = State::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(r);
    let d = hr4bp_field(&x, params, tau)?;
    Ok(d.fixed_rows::<3>(3).into_owned())
}

/// CR3BP Jacobi constant `2V − |v|²`.
pub fn jacobi_constant(x: &State, mu: f64) -> Result<f64> {
    let params = SystemParams::cr3bp(mu)?;
    let r = x.fixed_rows::<3>(0).into_owned();
    Ok(2.0 * potential(&r, &params, 0.0)? - x.fixed_rows::<3>(3).norm_squared())
}

/// `[[0, I], [V_rr, 2(1+m)S]]`
pub fn jacobian_a(x: &State, params: &SystemParams, tau: f64) -> Result<Matrix6<f64>> {
    let eval = evaluate_field(
        x,
        params,
        tau,
        Want {
            jacobian: true,
            partials: false,
        },
    )?;
    Ok(assemble_a(&eval.vrr.expect("requested"), params.m))
}

pub(crate) fn assemble_a(vrr: &Matrix3<f64>, m: f64) -> Matrix6<f64> {
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(vrr);
    let w = 2.0 * (1.0 + m);
    a[(3, 4)] = w;
    a[(4, 3)] = -w;
    a
}

/// Columns `∂X'/∂m` and `∂X'/∂μ`.
pub fn param_partials_c(x: &State, params: &SystemParams, tau: f64) -> Result<Matrix6x2<f64>> {
    let eval = evaluate_field(
        x,
        params,
        tau,
        Want {
            jacobian: false,
            partials: true,
        },
    )?;
    Ok(eval.c.expect("requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symmetry {
    /// Time reversal about `kπ`.
    S1,
    /// Time reversal about `kπ + π/2`.
    S2,
}

/// `(x, −y, z, −x', y', −z')`
pub fn mirror_xz(x: &State) -> State {
    State::new(x[0], -x[1], x[2], -x[3], x[4], -x[5])
}

/// `(x, y, −z, x', y', −z')`; maps northern halos to southern ones.
pub fn mirror_xy(x: &State) -> State {
    State::new(x[0], x[1], -x[2], x[3], x[4], -x[5])
}

/// Image of the state `x` at time `tau` under a time-reversing symmetry.
pub fn symmetry_map(x: &State, tau: f64, which: Symmetry, k: i64) -> (State, f64) {
    let center = match which {
        Symmetry::S1 => k as f64 * PI,
        Symmetry::S2 => k as f64 * PI + 0.5 * PI,
    };
    (mirror_xz(x), 2.0 * center - tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    const MU: f64 = MU_EM;

    fn random_state(rng: &mut StdRng) -> State {
        loop {
            let x = State::from_fn(|i, _| {
                if i < 3 {
                    rng.gen_range(-1.5..1.5)
                } else {
                    rng.gen_range(-0.5..0.5)
                }
            });
            let r = x.fixed_rows::<3>(0);
            let d1 = (r - Vector3::new(-MU, 0.0, 0.0)).norm();
            let d2 = (r - Vector3::new(1.0 - MU, 0.0, 0.0)).norm();
            if d1 > 0.2 && d2 > 0.2 {
                return x;
            }
        }
    }

    #[test]
    fn l4_is_an_equilibrium() {
        let x = State::new(0.5 - MU, 3f64.sqrt() / 2.0, 0.0, 0.0, 0.0, 0.0);
        let f = cr3bp_field(&x, MU).unwrap();
        assert!(f.amax() < 1e-13, "{f}");
    }

    #[test]
    fn axis_state_has_no_transverse_acceleration() {
        let x = State::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.0);
        let f = cr3bp_field(&x, MU).unwrap();
        assert_eq!(f[4], 0.0);
        assert_eq!(f[5], 0.0);
    }

    #[test]
    fn singularity_is_reported() {
        let x = State::new(1.0 - MU, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            cr3bp_field(&x, MU),
            Err(Error::Singularity { primary: 2, .. })
        ));
    }

    #[test]
    fn small_m_approaches_cr3bp_linearly() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let tau = rng.gen_range(0.0..PI);
            let base = cr3bp_field(&x, MU).unwrap();
            let p = SystemParams::new(1e-7, MU).unwrap();
            assert!((hr4bp_field(&x, &p, tau).unwrap() - base).norm() < 1e-5);
            let d = |m: f64| {
                let p = SystemParams::new(m, MU).unwrap();
                (hr4bp_field(&x, &p, tau).unwrap() - base).norm()
            };
            let order = (d(1e-3) / d(5e-4)).log2();
            assert!(order > 0.9, "order {order}");
        }
    }

    #[test]
    fn field_is_pi_periodic() {
        let mut rng = StdRng::seed_from_u64(4);
        let p = SystemParams::new(M_SEM, MU).unwrap();
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let tau = rng.gen_range(0.0..PI);
            let a = hr4bp_field(&x, &p, tau).unwrap();
            let b = hr4bp_field(&x, &p, tau + PI).unwrap();
            assert!((a - b).amax() < 1e-13 * a.amax().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_potential_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let h = 1e-6;
        for &m in &[0.0, 0.01, M_SEM, 0.19] {
            let p = SystemParams::new(m, MU).unwrap();
            for _ in 0..20 {
                let r = random_state(&mut rng).fixed_rows::<3>(0).into_owned();
                let tau = rng.gen_range(0.0..PI);
                let grad = potential_gradient(&r, &p, tau).unwrap();
                for i in 0..3 {
                    let mut rp = r;
                    let mut rm = r;
                    rp[i] += h;
                    rm[i] -= h;
                    let fd = (potential(&rp, &p, tau).unwrap() - potential(&rm, &p, tau).unwrap()) / (2.0 * h);
                    assert!((fd - grad[i]).abs() <= 1e-7 * grad.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let h = 1e-6;
        for &m in &[0.01, M_SEM, 0.19] {
            let p = SystemParams::new(m, MU).unwrap();
            for _ in 0..100 {
                let x = random_state(&mut rng);
                let tau = rng.gen_range(0.0..PI);
                let a = jacobian_a(&x, &p, tau).unwrap();
                assert_eq!(a.fixed_view::<3, 3>(0, 0), Matrix3::zeros());
                assert_eq!(a.fixed_view::<3, 3>(0, 3), Matrix3::identity());
                let vrr = a.fixed_view::<3, 3>(3, 0);
                assert!((vrr - vrr.transpose()).amax() < 1e-13 * vrr.amax());
                for j in 0..6 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (hr4bp_field(&xp, &p, tau).unwrap() - hr4bp_field(&xm, &p, tau).unwrap()) / (2.0 * h);
                    let col = a.column(j);
                    assert!((fd - col).norm() <= 1e-6 * col.norm().max(1.0), "m={m} col {j}");
                }
            }
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let h = 1e-6;
        for &m in &[0.01, M_SEM, 0.19] {
            let p = SystemParams::new(m, MU).unwrap();
            for _ in 0..100 {
                let x = random_state(&mut rng);
                let tau = rng.gen_range(0.0..PI);
                let c = param_partials_c(&x, &p, tau).unwrap();
                assert_eq!(c.fixed_view::<3, 2>(0, 0), nalgebra::Matrix3x2::zeros());
                let f = |m: f64, mu: f64| hr4bp_field(&x, &SystemParams::new(m, mu).unwrap(), tau).unwrap();
                let fd_m = (f(m + h, MU) - f(m - h, MU)) / (2.0 * h);
                let fd_mu = (f(m, MU + h) - f(m, MU - h)) / (2.0 * h);
                assert!((fd_m - c.column(0)).norm() <= 1e-6 * fd_m.norm().max(1.0));
                assert!((fd_mu - c.column(1)).norm() <= 1e-6 * fd_mu.norm().max(1.0));
            }
        }
    }

    #[test]
    fn partials_at_zero_m_use_one_sided_limit() {
        let mut rng = StdRng::seed_from_u64(8);
        let h = 1e-7;
        let p0 = SystemParams::cr3bp(MU).unwrap();
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let tau = rng.gen_range(0.0..PI);
            let c = param_partials_c(&x, &p0, tau).unwrap();
            let f = |m: f64| hr4bp_field(&x, &SystemParams::new(m, MU).unwrap(), tau).unwrap();
            let fd = (-3.0 * f(0.0) + 4.0 * f(h) - f(2.0 * h)) / (2.0 * h);
            assert!((fd - c.column(0)).norm() <= 1e-5 * fd.norm().max(1.0));
        }
    }

    #[test]
    fn symmetry_maps_are_involutions() {
        let x = State::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        for which in [Symmetry::S1, Symmetry::S2] {
            for k in -2..3 {
                let (y, t) = symmetry_map(&x, 0.7, which, k);
                let (z, s) = symmetry_map(&y, t, which, k);
                assert_eq!(z, x);
                assert!((s - 0.7).abs() < 1e-15);
            }
        }
        let fixed = State::new(0.8, 0.0, 0.1, 0.0, 0.3, 0.0);
        assert_eq!(symmetry_map(&fixed, 0.0, Symmetry::S1, 0), (fixed, 0.0));
    }

    #[test]
    fn field_is_equivariant_under_time_reversal() {
        let mut rng = StdRng::seed_from_u64(9);
        let p = SystemParams::new(M_SEM, MU).unwrap();
        for which in [Symmetry::S1, Symmetry::S2] {
            for _ in 0..20 {
                let x = random_state(&mut rng);
                let tau = rng.gen_range(0.0..PI);
                let (y, t) = symmetry_map(&x, tau, which, 1);
                // d/dτ [S X(c − τ)] = −S X'(c − τ)
                let fx = hr4bp_field(&x, &p, tau).unwrap();
                let fy = hr4bp_field(&y, &p, t).unwrap();
                let expected = -mirror_xz(&fx);
                assert!((fy - expected).amax() < 1e-13 * fx.amax().max(1.0));
            }
        }
    }

    #[test]
    fn unit_scales_are_consistent() {
        let p = SystemParams::new(M_SEM, MU).unwrap();
        let u = UnitScales {
            nu: 3.04e-6,
            d_a: 1.496e8,
            n0: 1.99e-7,
            m0: 1.989e30,
        };
        let du = u.distance_unit(&p);
        assert!((UnitScales::d_a_from_distance_unit(du, u.nu, &p) - u.d_a).abs() < 1e-6);
        let n = u.primaries_mean_motion(&p);
        assert!((u.time_unit(&p) - (1.0 + p.m) / n).abs() < 1e-12 * u.time_unit(&p));
    }
}
