//! Hill variation orbit (HVO) series for the motion of the primaries.
//!
//! The primaries' relative orbit is a Fourier series in `2nτ` whose
//! coefficients are power series in the Hill parameter `M`. Coefficients are
//! stored as exact rationals and converted to `f64` once, when a
//! [`HvoSeries`] is built.

use nalgebra::Vector3;
use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Largest power of `M` in the full tables.
pub const MAX_ORDER: usize = 9;
/// Number of harmonics on each side of zero.
pub const HARMONICS: usize = 4;

/// Which convention relates `M` to `m` and which tables are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvoMode {
    /// `M = m / (1 - m/3)` with the order-9 tables. Used by the equations of motion.
    Full,
    /// `M = m` with the order-3 re-expansion. Used by the perturbation expansion.
    MelnikovMode,
}

type Q = Ratio<i64>;

const fn q(n: i64, d: i64) -> (i64, i64) {
    (n, d)
}

const FULL_D: [(i64, i64); MAX_ORDER + 1] = [
    q(1, 1),
    q(-8, 9),
    q(133, 162),
    q(-1264, 2187),
    q(3319421, 5038848),
    q(-13366211, 11337408),
    q(2028830887, 2448880128),
    q(-4682845907, 5509980288),
    q(19228022393021, 12694994583552),
    q(-5982128249099224247, 3119921868853739520),
];

const Z: (i64, i64) = (0, 1);

/// Rows are `p = 2..=9`, columns are `n = -4, -3, -2, -1, 1, 2, 3, 4`.
const FULL_C: [[(i64, i64); 2 * HARMONICS]; MAX_ORDER - 1] = [
    [Z, Z, Z, q(-19, 16), q(3, 16), Z, Z, Z],
    [Z, Z, Z, q(-7, 8), q(3, 8), Z, Z, Z],
    [Z, Z, Z, q(11, 144), q(7, 48), q(25, 256), Z, Z],
    [Z, Z, q(23, 640), q(5, 36), q(-1, 6), q(553, 1920), Z, Z],
    [
        Z,
        q(1, 192),
        q(207, 3200),
        q(-661, 82944),
        q(-34589, 110592),
        q(3743, 14400),
        q(833, 12288),
        Z,
    ],
    [
        Z,
        q(5237, 215040),
        q(1829, 288000),
        q(374797, 276480),
        q(-22907, 46080),
        q(-28811, 864000),
        q(27337, 107520),
        Z,
    ],
    [
        q(23, 6144),
        q(263713, 7526400),
        q(124719, 40960000),
        q(98804551, 37324800),
        q(-23804639, 24883200),
        q(-332659139, 1105920000),
        q(5056291, 15052800),
        q(3537, 65536),
    ],
    [
        q(507317, 28901376),
        q(38042489, 4741632000),
        q(48459451, 604800000),
        q(300079583, 373248000),
        q(-102469631, 124416000),
        q(-4857480211, 7257600000),
        q(472019353, 4741632000),
        q(11705987, 48168960),
    ],
];

const MELNIKOV_D: [(i64, i64); 4] = [q(1, 1), q(-2, 3), q(7, 18), q(-4, 81)];

/// Column index of harmonic `n` in the `c` tables.
fn harmonic_slot(n: i32) -> Option<usize> {
    match n {
        -4..=-1 => Some((n + 4) as usize),
        1..=4 => Some((n + 3) as usize),
        _ => None,
    }
}

/// Harmonic number stored in slot `i`.
fn slot_harmonic(i: usize) -> i32 {
    if i < HARMONICS {
        i as i32 - 4
    } else {
        i as i32 - 3
    }
}

/// Truncated HVO coefficient tables.
#[derive(Debug, Clone)]
pub struct HvoSeries {
    mode: HvoMode,
    order: usize,
    d: Vec<Q>,
    /// `c[p][slot]`
    c: Vec<[Q; 2 * HARMONICS]>,
    d_f64: Vec<f64>,
    c_f64: Vec<[f64; 2 * HARMONICS]>,
}

impl HvoSeries {
    pub fn new(mode: HvoMode) -> Self {
        let zero_row = [Q::from_integer(0); 2 * HARMONICS];
        let (order, d, c) = match mode {
            HvoMode::Full => {
                let d: Vec<Q> = FULL_D.iter().map(|&(n, d)| Q::new(n, d)).collect();
                let mut c = vec![zero_row; MAX_ORDER + 1];
                for (row, p) in FULL_C.iter().zip(2..) {
                    for (slot, &(n, d)) in row.iter().enumerate() {
                        c[p][slot] = Q::new(n, d);
                    }
                }
                (MAX_ORDER, d, c)
            }
            HvoMode::MelnikovMode => {
                let d: Vec<Q> = MELNIKOV_D.iter().map(|&(n, d)| Q::new(n, d)).collect();
                let mut c = vec![zero_row; 4];
                let set = |c: &mut Vec<[Q; 8]>, n: i32, p: usize, v: Q| {
                    c[p][harmonic_slot(n).unwrap()] = v;
                };
                set(&mut c, -1, 2, Q::new(-19, 16));
                set(&mut c, 1, 2, Q::new(3, 16));
                set(&mut c, -1, 3, Q::new(-5, 3));
                set(&mut c, 1, 3, Q::new(1, 2));
                (3, d, c)
            }
        };
        let to_f64 = |v: &Q| v.to_f64().expect("table entries are finite");
        let d_f64 = d.iter().map(to_f64).collect();
        let c_f64 = c
            .iter()
            .map(|row| {
                let mut out = [0.0; 2 * HARMONICS];
                for (o, v) in out.iter_mut().zip(row) {
                    *o = to_f64(v);
                }
                out
            })
            .collect();
        Self {
            mode,
            order,
            d,
            c,
            d_f64,
            c_f64,
        }
    }

    pub fn full() -> Self {
        Self::new(HvoMode::Full)
    }

    pub fn melnikov() -> Self {
        Self::new(HvoMode::MelnikovMode)
    }

    pub fn mode(&self) -> HvoMode {
        self.mode
    }

    /// Truncation order `P`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn harmonics(&self) -> usize {
        HARMONICS
    }

    pub fn d(&self, p: usize) -> Q {
        self.d.get(p).copied().unwrap_or_else(|| Q::from_integer(0))
    }

    /// `c_{n,p}`; zero outside the table.
    pub fn c(&self, n: i32, p: usize) -> Q {
        match (harmonic_slot(n), self.c.get(p)) {
            (Some(slot), Some(row)) => row[slot],
            _ => Q::from_integer(0),
        }
    }

    /// `(Σ d_p M^p, Σ p d_p M^{p-1})` by Horner's rule.
    fn d_poly(&self, big_m: f64) -> (f64, f64) {
        horner_with_derivative(&self.d_f64, big_m)
    }

    /// Evaluate the series at `m`; `m` must lie in the mode's domain.
    pub fn evaluate(&self, m: f64) -> Result<HvoEval, Error> {
        if m < 0.0 || !m.is_finite() {
            return Err(Error::Domain(m));
        }
        hill_param(m, self.mode)?;
        Ok(self.evaluate_signed(m))
    }

    /// Evaluation without the `m ≥ 0` check. The ratio form of `m²/a0³` and
    /// the polynomial `b_n` are analytic through `m = 0`, which the series
    /// extraction oracle relies on.
    pub(crate) fn evaluate_signed(&self, m: f64) -> HvoEval {
        let (big_m, dbig_m) = hill_param_unchecked(m, self.mode);
        let (dsum, ddsum) = self.d_poly(big_m);
        let g0 = big_m.cbrt().powi(2);
        let a0 = g0 * dsum;
        let da0_dm = if big_m == 0.0 {
            f64::INFINITY
        } else {
            dbig_m * (2.0 / 3.0 / big_m.cbrt() * dsum + g0 * ddsum)
        };

        // m²/a0³ = (m/M)² / D(M)³; m/M = 1 - m/3 (Full) or 1.
        let (ratio, dratio) = match self.mode {
            HvoMode::Full => (1.0 - m / 3.0, -1.0 / 3.0),
            HvoMode::MelnikovMode => (1.0, 0.0),
        };
        let d3 = dsum.powi(3);
        let gravity_scale = ratio * ratio / d3;
        let dgravity_scale_dm = 2.0 * ratio * dratio / d3 - 3.0 * ratio * ratio * ddsum * dbig_m / (d3 * dsum);

        let mut b = [0.0; 2 * HARMONICS];
        let mut db_dm = [0.0; 2 * HARMONICS];
        for slot in 0..2 * HARMONICS {
            let coeffs: Vec<f64> = self.c_f64.iter().map(|row| row[slot]).collect();
            let (v, dv) = horner_with_derivative(&coeffs, big_m);
            b[slot] = v;
            db_dm[slot] = dv * dbig_m;
        }

        HvoEval {
            m,
            big_m,
            dbig_m_dm: dbig_m,
            a0,
            da0_dm,
            gravity_scale,
            dgravity_scale_dm,
            b,
            db_dm,
        }
    }
}

fn horner_with_derivative(coeffs: &[f64], x: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut dv = 0.0;
    for &c in coeffs.iter().rev() {
        dv = dv * x + v;
        v = v * x + c;
    }
    (v, dv)
}

fn hill_param_unchecked(m: f64, mode: HvoMode) -> (f64, f64) {
    match mode {
        HvoMode::Full => {
            let den = 1.0 - m / 3.0;
            (m / den, 1.0 / (den * den))
        }
        HvoMode::MelnikovMode => (m, 1.0),
    }
}

/// Hill parameter `M(m)` and `dM/dm`.
pub fn hill_param(m: f64, mode: HvoMode) -> Result<(f64, f64), Error> {
    if m < 0.0 || !m.is_finite() {
        return Err(Error::Domain(m));
    }
    if mode == HvoMode::Full && m >= 3.0 {
        return Err(Error::Domain(m));
    }
    Ok(hill_param_unchecked(m, mode))
}

/// Evaluate `series` at `m`.
pub fn evaluate_hvo(series: &HvoSeries, m: f64) -> Result<HvoEval, Error> {
    series.evaluate(m)
}

/// The HVO quantities at one value of `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HvoEval {
    pub m: f64,
    /// Hill parameter `M`.
    pub big_m: f64,
    pub dbig_m_dm: f64,
    pub a0: f64,
    /// Infinite at `m = 0`; use [`HvoEval::gravity_scale`] instead where possible.
    pub da0_dm: f64,
    /// `m²/a0³`, evaluated in ratio form so it tends to 1 as `m → 0`.
    pub gravity_scale: f64,
    pub dgravity_scale_dm: f64,
    b: [f64; 2 * HARMONICS],
    db_dm: [f64; 2 * HARMONICS],
}

impl HvoEval {
    /// `b_n` for `n ∈ {-4..-1, 1..4}`, zero otherwise.
    pub fn b(&self, n: i32) -> f64 {
        harmonic_slot(n).map_or(0.0, |s| self.b[s])
    }

    pub fn db_dm(&self, n: i32) -> f64 {
        harmonic_slot(n).map_or(0.0, |s| self.db_dm[s])
    }

    /// `a_n = a0 b_n`.
    pub fn a(&self, n: i32) -> f64 {
        self.a0 * self.b(n)
    }

    pub fn g0(&self) -> f64 {
        self.big_m.cbrt().powi(2)
    }

    pub(crate) fn harmonic_pairs(&self) -> impl Iterator<Item = (i32, f64, f64, f64, f64)> + '_ {
        (1..=HARMONICS as i32).map(move |n| {
            (
                n,
                self.b(n) + self.b(-n),
                self.b(n) - self.b(-n),
                self.db_dm(n) + self.db_dm(-n),
                self.db_dm(n) - self.db_dm(-n),
            )
        })
    }
}

/// Displacement `ρ̄(τ)` of the primaries' separation from `î` and its `m`-partial.
pub fn rho_bar(eval: &HvoEval, tau: f64) -> (Vector3<f64>, Vector3<f64>) {
    let mut rho = Vector3::zeros();
    let mut drho = Vector3::zeros();
    for (n, sum, diff, dsum, ddiff) in eval.harmonic_pairs() {
        let (s, c) = (2.0 * n as f64 * tau).sin_cos();
        rho.x += sum * c;
        rho.y += diff * s;
        drho.x += dsum * c;
        drho.y += ddiff * s;
    }
    (rho, drho)
}

/// One table entry as a `(numerator, denominator)` pair, for audit output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RationalEntry {
    pub num: i64,
    pub den: i64,
}

impl From<Q> for RationalEntry {
    fn from(v: Q) -> Self {
        Self {
            num: *v.numer(),
            den: *v.denom(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CEntry {
    pub n: i32,
    pub p: usize,
    #[serde(flatten)]
    pub value: RationalEntry,
}

/// Serializable dump of the coefficient tables.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HvoTableDump {
    pub mode: HvoMode,
    pub order: usize,
    pub harmonics: usize,
    pub d: Vec<RationalEntry>,
    /// Nonzero `c_{n,p}` only.
    pub c: Vec<CEntry>,
}

impl HvoSeries {
    pub fn dump(&self) -> HvoTableDump {
        let mut c = Vec::new();
        for (p, row) in self.c.iter().enumerate() {
            for (slot, v) in row.iter().enumerate() {
                if *v.numer() != 0 {
                    c.push(CEntry {
                        n: slot_harmonic(slot),
                        p,
                        value: (*v).into(),
                    });
                }
            }
        }
        HvoTableDump {
            mode: self.mode,
            order: self.order,
            harmonics: HARMONICS,
            d: self.d.iter().map(|&v| v.into()).collect(),
            c,
        }
    }
}
