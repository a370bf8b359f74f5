//! Bifurcation candidates from the singular values of the modified
//! corrections Jacobian `[Φ^{n_B} − I | Ψ_m(n_B T)]`.

use nalgebra::{DMatrix, DVector, Matrix6};
use serde::{Deserialize, Serialize};

use crate::continuation::{
    arclength_step, continue_family_along, family_tangent, object_equivalence, Family, PeriodicOrbit, Provenance,
    StepPolicy, Subspace, DEFAULT_SHIFTS, ORBIT_TOL,
};
use crate::dynamics::{mirror_xz, SystemParams};
use crate::error::{Error, Result};
use crate::propagation::{IntegratorConfig, Propagator};

/// Structural-zero bound relative to `σ_max`.
pub const STRUCTURAL_ZERO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    /// The six non-structural singular values, descending.
    pub sigma: [f64; 6],
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub v_alpha: [f64; 7],
    pub v_beta: [f64; 7],
    /// Smallest value of the padded 7-column decomposition.
    pub structural_zero: f64,
    pub n_b: u32,
}

/// Spectrum of a 6×7 matrix, padded to 7×7 for a full set of right
/// singular vectors.
pub fn singular_spectrum(db: &DMatrix<f64>) -> SingularSpectrum {
    let mut padded = DMatrix::zeros(7, 7);
    padded.view_mut((0, 0), (6, 7)).copy_from(db);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..7).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let row = |k: usize| {
        let mut v = [0.0; 7];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = vt[(order[k], c)];
        }
        v
    };
    let mut sigma = [0.0; 6];
    for (k, s) in sigma.iter_mut().enumerate() {
        *s = sv(k);
    }
    SingularSpectrum {
        sigma,
        sigma_alpha: sv(5),
        sigma_beta: sv(4),
        v_alpha: row(5),
        v_beta: row(4),
        structural_zero: sv(6),
        n_b: 1,
    }
}

/// `[Φ^{n_B} − I | Ψ_m(τ0 + n_B T)]`.
pub fn corrections_jacobian_db(orbit: &PeriodicOrbit, n_b: u32) -> Result<DMatrix<f64>> {
    if n_b == 0 {
        return Err(Error::Precondition("n_B must be at least 1".into()));
    }
    let phi = orbit.monodromy.pow(n_b);
    let psi = if n_b == 1 {
        orbit.psi_m
    } else {
        let cfg = IntegratorConfig::default().with_tolerance(1e-13);
        let params: SystemParams = orbit.params()?;
        let r = Propagator::new(params, cfg).with_sensitivity().propagate(
            &orbit.x0,
            orbit.tau0,
            orbit.tau0 + n_b as f64 * orbit.period(),
        )?;
        r.sensitivity.expect("requested").column(0).into_owned()
    };
    let mut db = DMatrix::zeros(6, 7);
    db.view_mut((0, 0), (6, 6)).copy_from(&(phi - Matrix6::identity()));
    db.set_column(6, &psi);
    Ok(db)
}

pub fn spectrum(orbit: &PeriodicOrbit, n_b: u32) -> Result<SingularSpectrum> {
    let mut s = singular_spectrum(&corrections_jacobian_db(orbit, n_b)?);
    s.n_b = n_b;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Alpha,
    Beta,
}

/// Default local-minimum threshold relative to the family median.
pub const THETA: f64 = 0.1;

/// Strict local minima of either trace (3-member window) that fall below
/// `theta` times the median of that trace.
pub fn scan_traces(traces: &[(f64, f64)], theta: f64) -> Vec<(usize, Which)> {
    let mut out = Vec::new();
    if traces.len() < 3 {
        return out;
    }
    for which in [Which::Alpha, Which::Beta] {
        let v: Vec<f64> = traces
            .iter()
            .map(|t| match which {
                Which::Alpha => t.0,
                Which::Beta => t.1,
            })
            .collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        for i in 1..v.len() - 1 {
            if v[i] < v[i - 1] && v[i] < v[i + 1] && v[i] < theta * median {
                out.push((i, which));
            }
        }
    }
    out.sort_by_key(|c| c.0);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanHit {
    pub member: usize,
    pub which: Which,
    pub spectrum: SingularSpectrum,
}

/// Flag bifurcation candidates along a family.
pub fn scan_family(family: &Family, n_b: u32, theta: f64) -> Result<Vec<ScanHit>> {
    if family.members.len() < 3 {
        return Err(Error::Precondition("scan needs at least 3 members".into()));
    }
    let spectra: Vec<SingularSpectrum> = if n_b == 1 {
        family.members.iter().map(|o| spectrum(o, 1)).collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        family
            .members
            .par_iter()
            .map(|o| spectrum(o, n_b))
            .collect::<Result<_>>()?
    };
    let traces: Vec<(f64, f64)> = spectra.iter().map(|s| (s.sigma_alpha, s.sigma_beta)).collect();
    Ok(scan_traces(&traces, theta)
        .into_iter()
        .map(|(member, which)| ScanHit {
            member,
            which,
            spectrum: spectra[member].clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCandidate {
    pub member: usize,
    pub which: Which,
    /// Parent orbit at the refined location.
    pub orbit: PeriodicOrbit,
    /// Unit `δV_σ`.
    pub direction: [f64; 7],
    pub sigma: f64,
}

/// Sharpen a flagged member by golden-section search on `σ` along the
/// arclength between its neighbours.
pub fn refine_candidate(family: &Family, hit: &ScanHit) -> Result<BranchCandidate> {
    let i = hit.member;
    let from = &family.members[i - 1];
    let to = &family.members[i + 1];
    let hint = DVector::from_row_slice(&to.tangent.unwrap_or([0.0; 7]));
    let sub = Subspace::of(from);
    let tangent = family_tangent(from, &hint, sub);
    let span = (to.unknowns() - from.unknowns()).dot(&tangent);
    let eval = |ds: f64| -> Result<(f64, PeriodicOrbit, SingularSpectrum)> {
        let (o, _) = arclength_step(from, &tangent, ds, 12, sub)?;
        let s = spectrum(&o, 1)?;
        let v = match hit.which {
            Which::Alpha => s.sigma_alpha,
            Which::Beta => s.sigma_beta,
        };
        Ok((v, o, s))
    };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (0.0, span);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    for _ in 0..30 {
        if fc.0 < fd.0 {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = eval(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = eval(d)?;
        }
        if (hi - lo).abs() < 1e-7 * span.abs().max(1e-3) {
            break;
        }
    }
    let best = if fc.0 < fd.0 { fc } else { fd };
    let (sigma, orbit, spec) = best;
    let v = match hit.which {
        Which::Alpha => spec.v_alpha,
        Which::Beta => spec.v_beta,
    };
    Ok(BranchCandidate {
        member: i,
        which: hit.which,
        orbit,
        direction: v,
        sigma,
    })
}

/// Candidate without refinement, at the flagged member itself.
pub fn candidate_at(family: &Family, hit: &ScanHit) -> BranchCandidate {
    let v = match hit.which {
        Which::Alpha => hit.spectrum.v_alpha,
        Which::Beta => hit.spectrum.v_beta,
    };
    BranchCandidate {
        member: hit.member,
        which: hit.which,
        orbit: family.members[hit.member].clone(),
        direction: v,
        sigma: match hit.which {
            Which::Alpha => hit.spectrum.sigma_alpha,
            Which::Beta => hit.spectrum.sigma_beta,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchGuess {
    /// `(X0, m)`
    pub v: [f64; 7],
    pub sign: i8,
    /// Parent on the xz mirror set with `δV` dominated by components that
    /// are odd under it: the two signs may lead to distinct families rather
    /// than mirror images.
    pub symmetry_split: bool,
}

/// Symmetric-to-antisymmetric weight of `δV` below which a direction counts
/// as symmetry breaking; pitchforks in this problem are slightly broken.
pub const SPLIT_RATIO: f64 = 0.1;

/// `V0 = (X0, m) ± Δs0 δV_σ`.
pub fn branch_guess(candidate: &BranchCandidate, ds0: f64) -> Vec<BranchGuess> {
    let base = candidate.orbit.unknowns();
    let dv = DVector::from_row_slice(&candidate.direction);
    let x = candidate.orbit.x0;
    let on_mirror = (x - mirror_xz(&x)).norm() <= 1e-9 * (1.0 + x.norm());
    let even = dv[0].abs() + dv[2].abs() + dv[4].abs() + dv[6].abs();
    let odd = dv[1].abs() + dv[3].abs() + dv[5].abs();
    let symmetry_split = on_mirror && even <= SPLIT_RATIO * odd;
    [1i8, -1]
        .into_iter()
        .map(|sign| {
            let v = &base + &dv * (sign as f64 * ds0);
            let mut arr = [0.0; 7];
            arr.copy_from_slice(v.as_slice());
            BranchGuess {
                v: arr,
                sign,
                symmetry_split,
            }
        })
        .collect()
}

/// Correct a branch guess on the hyperplane through it normal to `δV_σ`.
pub fn correct_branch(candidate: &BranchCandidate, guess: &BranchGuess) -> Result<PeriodicOrbit> {
    let parent = &candidate.orbit;
    let dv = DVector::from_row_slice(&candidate.direction);
    // A pseudo-arclength step from the guess with zero length holds it on the plane.
    let mut base = parent.clone();
    base.x0 = nalgebra::Vector6::from_column_slice(&guess.v[..6]);
    base.m = guess.v[6];
    let (o, _) = arclength_step(&base, &dv, 0.0, 15, Subspace::Full)?;
    if o.residual > ORBIT_TOL {
        return Err(Error::NonConvergence {
            iterations: 15,
            residual: o.residual,
        });
    }
    if (o.unknowns() - parent.unknowns()).norm() < 1e-6 {
        return Err(Error::Precondition("branch guess fell back onto the parent".into()));
    }
    Ok(o)
}

/// Default branch offset.
pub const BRANCH_DS0: f64 = 1e-3;

/// Correct and continue a branch, halving `Δs0` up to four times.
pub fn build_branch(candidate: &BranchCandidate, sign: i8, parent_id: &str, policy: &StepPolicy) -> Result<Family> {
    let mut ds0 = BRANCH_DS0;
    let mut last = None;
    for _ in 0..5 {
        let guesses = branch_guess(candidate, ds0);
        let g = guesses.iter().find(|g| g.sign == sign).expect("both signs");
        match correct_branch(candidate, g) {
            Ok(start) => {
                let hint = DVector::from_row_slice(&candidate.direction) * sign as f64;
                let prov = Provenance::Bifurcation {
                    parent: parent_id.to_string(),
                    member: candidate.member,
                    sign,
                };
                return continue_family_along(&start, &hint, policy, prov);
            }
            Err(e) => last = Some(e),
        }
        ds0 *= 0.5;
    }
    Err(last.expect("attempted"))
}

/// True when no parent member at the branch orbit's `m` shares its object.
pub fn is_new_family(branch_orbit: &PeriodicOrbit, parent: &Family) -> Result<bool> {
    let m = branch_orbit.m;
    for i in 0..parent.members.len().saturating_sub(1) {
        let (a, b) = (&parent.members[i], &parent.members[i + 1]);
        if (a.m - m) * (b.m - m) > 0.0 {
            continue;
        }
        let w = if a.m == b.m { 0.0 } else { (m - a.m) / (b.m - a.m) };
        let guess = a.x0 + (b.x0 - a.x0) * w;
        if let Ok(p) = crate::continuation::correct_fixed_m(&guess, parent.b, parent.tau0, m, parent.mu) {
            if object_equivalence(&p, branch_orbit, &DEFAULT_SHIFTS)?.is_some() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
