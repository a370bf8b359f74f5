//! Propagation of the state with its state transition matrix `Φ`, parameter
//! sensitivities `Ψ = [Ψ_m, Ψ_μ]` and scalar quadratures along the flow.

use nalgebra::{Matrix3, Matrix6, Matrix6x2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dop853::{self, DenseSegment, Ode, Tolerances};
use crate::dynamics::{evaluate_field, State, SystemParams, Want};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub dense: bool,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-12,
            max_step: f64::INFINITY,
            dense: false,
            max_steps: 500_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.rtol = tol;
        self.atol = tol;
        self
    }

    pub fn with_dense(mut self, dense: bool) -> Self {
        self.dense = dense;
        self
    }

    fn validate(&self) -> Result<Tolerances> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Precondition("tolerances must be positive".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Precondition("max step must be positive".into()));
        }
        Ok(Tolerances {
            rtol: self.rtol,
            atol: self.atol,
            max_step: self.max_step,
            max_steps: self.max_steps,
        })
    }
}

/// Integrand of a scalar quadrature, a function of the state and time.
pub type Integrand<'a> = Box<dyn Fn(&State, f64) -> f64 + Send + Sync + 'a>;

/// Handle returned by [`Propagator::register_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureId(pub usize);

/// Which variational blocks to carry along.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropagationOptions {
    pub stm: bool,
    pub sensitivity: bool,
}

pub struct Propagator<'a> {
    params: SystemParams,
    config: IntegratorConfig,
    options: PropagationOptions,
    quadratures: Vec<Integrand<'a>>,
}

impl<'a> Propagator<'a> {
    pub fn new(params: SystemParams, config: IntegratorConfig) -> Self {
        Self {
            params,
            config,
            options: PropagationOptions::default(),
            quadratures: Vec::new(),
        }
    }

    pub fn with_stm(mut self) -> Self {
        self.options.stm = true;
        self
    }

    pub fn with_sensitivity(mut self) -> Self {
        self.options.sensitivity = true;
        self
    }

    pub fn with_options(mut self, options: PropagationOptions) -> Self {
        self.options = options;
        self
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn register_quadrature(&mut self, integrand: Integrand<'a>) -> QuadratureId {
        self.quadratures.push(integrand);
        QuadratureId(self.quadratures.len() - 1)
    }

    fn layout(&self) -> Layout {
        let stm = self.options.stm.then_some(6);
        let psi = self
            .options
            .sensitivity
            .then(|| 6 + if self.options.stm { 36 } else { 0 });
        let quad = 6 + if self.options.stm { 36 } else { 0 } + if self.options.sensitivity { 12 } else { 0 };
        Layout {
            stm,
            psi,
            quad,
            dim: quad + self.quadratures.len(),
        }
    }

    pub fn propagate(&self, x0: &State, t0: f64, tf: f64) -> Result<PropagationResult> {
        let tol = self.config.validate()?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t0 });
        }
        let layout = self.layout();
        let mut y0 = vec![0.0; layout.dim];
        y0[..6].copy_from_slice(x0.as_slice());
        if let Some(off) = layout.stm {
            for j in 0..6 {
                y0[off + 7 * j] = 1.0;
            }
        }
        let rhs = Rhs {
            params: &self.params,
            layout,
            quadratures: &self.quadratures,
        };
        let dense_width = if self.config.dense { 6 } else { 0 };
        let out = dop853::integrate(&rhs, t0, &y0, tf, &tol, dense_width)?;
        let y = out.y;
        let x_f = State::from_column_slice(&y[..6]);
        let stm = layout.stm.map(|off| Matrix6::from_column_slice(&y[off..off + 36]));
        let sensitivity = layout.psi.map(|off| Matrix6x2::from_column_slice(&y[off..off + 12]));
        let quadratures = y[layout.quad..].to_vec();
        let dense = self.config.dense.then(|| DenseTrajectory {
            t0,
            tf,
            x0: *x0,
            x_f,
            segments: out.segments,
        });
        Ok(PropagationResult {
            t0,
            tf,
            x_f,
            stm,
            sensitivity,
            quadratures,
            dense,
            steps: out.steps,
        })
    }
}

/// One-shot propagation.
pub fn propagate(
    x0: &State,
    params: &SystemParams,
    t0: f64,
    tf: f64,
    config: &IntegratorConfig,
    options: PropagationOptions,
) -> Result<PropagationResult> {
    Propagator::new(*params, *config)
        .with_options(options)
        .propagate(x0, t0, tf)
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    stm: Option<usize>,
    psi: Option<usize>,
    quad: usize,
    dim: usize,
}

struct Rhs<'p, 'a> {
    params: &'p SystemParams,
    layout: Layout,
    quadratures: &'p [Integrand<'a>],
}

impl Ode for Rhs<'_, '_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let x = State::from_column_slice(&y[..6]);
        let want = Want {
            jacobian: self.layout.stm.is_some() || self.layout.psi.is_some(),
            partials: self.layout.psi.is_some(),
        };
        let eval = evaluate_field(&x, self.params, t, want)?;
        dy[..6].copy_from_slice(eval.deriv.as_slice());
        let w = 2.0 * (1.0 + self.params.m);
        // A [p; q] = [q; V_rr p + W q], W = w [[0,1,0],[-1,0,0],[0,0,0]]
        let apply_a = |vrr: &Matrix3<f64>, col: &[f64], out: &mut [f64]| {
            let p = Vector3::new(col[0], col[1], col[2]);
            let acc = vrr * p;
            out[0] = col[3];
            out[1] = col[4];
            out[2] = col[5];
            out[3] = acc.x + w * col[4];
            out[4] = acc.y - w * col[3];
            out[5] = acc.z;
        };
        if let Some(off) = self.layout.stm {
            let vrr = eval.vrr.expect("requested");
            for j in 0..6 {
                let s = off + 6 * j;
                apply_a(&vrr, &y[s..s + 6], &mut dy[s..s + 6]);
            }
        }
        if let Some(off) = self.layout.psi {
            let vrr = eval.vrr.expect("requested");
            let c = eval.c.expect("requested");
            for j in 0..2 {
                let s = off + 6 * j;
                apply_a(&vrr, &y[s..s + 6], &mut dy[s..s + 6]);
                for i in 3..6 {
                    dy[s + i] += c[(i, j)];
                }
            }
        }
        for (i, q) in self.quadratures.iter().enumerate() {
            dy[self.layout.quad + i] = q(&x, t);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub t0: f64,
    pub tf: f64,
    pub x_f: State,
    pub stm: Option<Matrix6<f64>>,
    /// Columns `Ψ_m`, `Ψ_μ`.
    pub sensitivity: Option<Matrix6x2<f64>>,
    pub quadratures: Vec<f64>,
    pub dense: Option<DenseTrajectory>,
    pub steps: usize,
}

impl PropagationResult {
    pub fn quadrature(&self, id: QuadratureId) -> f64 {
        self.quadratures[id.0]
    }
}

/// State lookup at interior times of a propagated arc.
#[derive(Debug, Clone)]
pub struct DenseTrajectory {
    t0: f64,
    tf: f64,
    x0: State,
    x_f: State,
    segments: Vec<DenseSegment>,
}

impl DenseTrajectory {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// State at `t`, which must lie within the propagated arc.
    pub fn state_at(&self, t: f64) -> Result<State> {
        let (lo, hi) = if self.tf >= self.t0 {
            (self.t0, self.tf)
        } else {
            (self.tf, self.t0)
        };
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        if t < lo - slack || t > hi + slack {
            return Err(Error::Precondition(format!(
                "time {t} outside propagated arc [{lo}, {hi}]"
            )));
        }
        if self.segments.is_empty() {
            return Ok(if t == self.tf { self.x_f } else { self.x0 });
        }
        let forward = self.tf >= self.t0;
        // Segments are ordered in integration direction.
        let idx = self.segments.partition_point(|s| {
            let end = s.t0 + s.h;
            if forward {
                end < t
            } else {
                end > t
            }
        });
        let seg = &self.segments[idx.min(self.segments.len() - 1)];
        let mut out = [0.0; 6];
        seg.eval(t, 6, &mut out);
        Ok(State::from_column_slice(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{jacobi_constant, MU_EM};
    use std::f64::consts::PI;

    fn sample_state() -> State {
        // Near the L1 Lyapunov family.
        State::new(0.82, 0.0, 0.0, 0.0, 0.15, 0.0)
    }

    #[test]
    fn zero_length_arc() {
        let p = SystemParams::new(0.05, MU_EM).unwrap();
        let x0 = sample_state();
        let r = Propagator::new(p, IntegratorConfig::default())
            .with_stm()
            .with_sensitivity()
            .propagate(&x0, 0.3, 0.3)
            .unwrap();
        assert_eq!(r.x_f, x0);
        assert_eq!(r.stm.unwrap(), Matrix6::identity());
        assert_eq!(r.sensitivity.unwrap(), Matrix6x2::zeros());
    }

    #[test]
    fn stm_matches_finite_differences() {
        let p = SystemParams::new(0.0808, MU_EM).unwrap();
        let x0 = sample_state();
        let cfg = IntegratorConfig::default();
        let r = Propagator::new(p, cfg).with_stm().propagate(&x0, 0.0, 1.5).unwrap();
        let phi = r.stm.unwrap();
        let h = 1e-7;
        for j in 0..6 {
            let mut xp = x0;
            let mut xm = x0;
            xp[j] += h;
            xm[j] -= h;
            let fp = Propagator::new(p, cfg).propagate(&xp, 0.0, 1.5).unwrap().x_f;
            let fm = Propagator::new(p, cfg).propagate(&xm, 0.0, 1.5).unwrap().x_f;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - phi.column(j)).norm() <= 1e-5 * phi.column(j).norm().max(1.0));
        }
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let m = 0.0808;
        let x0 = sample_state();
        let cfg = IntegratorConfig::default();
        let p = SystemParams::new(m, MU_EM).unwrap();
        let psi = Propagator::new(p, cfg)
            .with_sensitivity()
            .propagate(&x0, 0.2, 1.7)
            .unwrap()
            .sensitivity
            .unwrap();
        let h = 1e-7;
        let end = |m: f64, mu: f64| {
            Propagator::new(SystemParams::new(m, mu).unwrap(), cfg)
                .propagate(&x0, 0.2, 1.7)
                .unwrap()
                .x_f
        };
        let fd_m = (end(m + h, MU_EM) - end(m - h, MU_EM)) / (2.0 * h);
        let fd_mu = (end(m, MU_EM + h) - end(m, MU_EM - h)) / (2.0 * h);
        assert!((fd_m - psi.column(0)).norm() <= 1e-5 * fd_m.norm().max(1.0));
        assert!((fd_mu - psi.column(1)).norm() <= 1e-5 * fd_mu.norm().max(1.0));
    }

    #[test]
    fn constant_quadratures() {
        let p = SystemParams::cr3bp(MU_EM).unwrap();
        let mut prop = Propagator::new(p, IntegratorConfig::default());
        let zero = prop.register_quadrature(Box::new(|_, _| 0.0));
        let one = prop.register_quadrature(Box::new(|_, _| 1.0));
        let r = prop.propagate(&sample_state(), 0.0, PI).unwrap();
        assert_eq!(r.quadrature(zero), 0.0);
        assert!((r.quadrature(one) - PI).abs() < 1e-12);
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let p = SystemParams::new(0.0808, MU_EM).unwrap();
        let cfg = IntegratorConfig::default();
        let x0 = sample_state();
        let fwd = propagate(&x0, &p, 0.0, PI, &cfg, Default::default()).unwrap();
        let back = propagate(&fwd.x_f, &p, PI, 0.0, &cfg, Default::default()).unwrap();
        assert!((back.x_f - x0).norm() < 1e-9);
    }

    #[test]
    fn cr3bp_conserves_jacobi_and_volume() {
        let p = SystemParams::cr3bp(MU_EM).unwrap();
        let x0 = sample_state();
        let r = propagate(
            &x0,
            &p,
            0.0,
            3.0,
            &IntegratorConfig::default(),
            PropagationOptions {
                stm: true,
                sensitivity: false,
            },
        )
        .unwrap();
        let c0 = jacobi_constant(&x0, MU_EM).unwrap();
        let c1 = jacobi_constant(&r.x_f, MU_EM).unwrap();
        assert!((c0 - c1).abs() < 1e-10);
        assert!((r.stm.unwrap().determinant() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dense_lookup_matches_direct_propagation() {
        let p = SystemParams::new(0.05, MU_EM).unwrap();
        let cfg = IntegratorConfig::default().with_dense(true);
        let x0 = sample_state();
        for tf in [2.5, -2.5] {
            let r = propagate(&x0, &p, 0.0, tf, &cfg, Default::default()).unwrap();
            let dense = r.dense.unwrap();
            for frac in [0.0, 0.17, 0.5, 0.93, 1.0] {
                let t = frac * tf;
                let direct = propagate(&x0, &p, 0.0, t, &IntegratorConfig::default(), Default::default())
                    .unwrap()
                    .x_f;
                assert!((dense.state_at(t).unwrap() - direct).norm() < 1e-10, "t={t}");
            }
            assert!(dense.state_at(1.1 * tf).is_err());
        }
    }

    #[test]
    fn hits_primary_reports_singularity() {
        let p = SystemParams::cr3bp(MU_EM).unwrap();
        let x0 = State::new(1.0 - MU_EM, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r = propagate(&x0, &p, 0.0, 1.0, &IntegratorConfig::default(), Default::default());
        assert!(matches!(r, Err(Error::Singularity { .. })));
    }
}
