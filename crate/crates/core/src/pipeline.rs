//! End-to-end family generation driven by a declarative config.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{
    archive_dir, to_canonical_json, Archive, CandidateRecord, FamilyRecord, SeedRecord, ARCHIVE_FILE,
};
use crate::bifurcation::{build_branch, candidate_at, is_new_family, refine_candidate, scan_family, ScanHit, THETA};
use crate::continuation::{
    continue_family, correct_fixed_m, seed_from_melnikov, Family, Provenance, StepPolicy, SEED_M0,
};
use crate::dynamics::MU_EM;
use crate::error::{Error, Result};
use crate::melnikov::{melnikov_basis_escalating, melnikov_zeros, ResonantOrbit};
use crate::seeds::{build_seed, FamilyTag, OrbitKind};

/// Parse `pi`, `2pi`, `4pi/9`, `pi/2` or a plain number.
pub fn parse_period(text: &str) -> Result<f64> {
    let bad = || Error::Precondition(format!("cannot parse period '{text}'"));
    let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let t = t.to_ascii_lowercase().replace('π', "pi");
    let value = match t.split_once("pi") {
        None => t.parse::<f64>().map_err(|_| bad())?,
        Some((num, rest)) => {
            let k = if num.is_empty() {
                1.0
            } else {
                num.trim_end_matches('*').parse::<f64>().map_err(|_| bad())?
            };
            let d = match rest {
                "" => 1.0,
                r => r.strip_prefix('/').ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())?,
            };
            k * PI / d
        }
    };
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeriodSpec {
    Number(f64),
    Text(String),
}

impl PeriodSpec {
    pub fn value(&self) -> Result<f64> {
        match self {
            PeriodSpec::Number(v) => parse_period(&v.to_string()),
            PeriodSpec::Text(s) => parse_period(s),
        }
    }

    fn label(&self) -> String {
        match self {
            PeriodSpec::Number(v) => v.to_string(),
            PeriodSpec::Text(s) => s.replace(' ', ""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub family: FamilyTag,
    pub period: PeriodSpec,
}

impl SeedSpec {
    pub fn id(&self) -> String {
        format!("{}@{}", self.family, self.period.label())
    }
}

fn default_mu() -> f64 {
    MU_EM
}
fn default_workers() -> usize {
    4
}
fn default_theta() -> f64 {
    THETA
}
fn default_seed_m0() -> f64 {
    SEED_M0
}
fn default_branch_depth() -> u32 {
    1
}
fn default_n_b() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Overridden by `HR4BP_ARCHIVE_DIR`.
    #[serde(default)]
    pub archive_dir: Option<PathBuf>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_n_b")]
    pub n_b: u32,
    #[serde(default = "default_seed_m0")]
    pub seed_m0: f64,
    /// Rounds of branch construction; 0 scans without branching.
    #[serde(default = "default_branch_depth")]
    pub branch_depth: u32,
    #[serde(default)]
    pub step: StepPolicy,
    #[serde(default)]
    pub seeds: Vec<SeedSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Precondition(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(format!("config: {m}")));
        if !(self.mu > 0.0 && self.mu <= 0.5) {
            return bad(format!("mu = {} outside (0, 0.5]", self.mu));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta = {} outside (0, 1)", self.theta));
        }
        if self.n_b == 0 {
            return bad("n_b must be at least 1".into());
        }
        if !(self.seed_m0 > 0.0) {
            return bad(format!("seed_m0 = {} must be positive", self.seed_m0));
        }
        self.step.validate()?;
        for s in &self.seeds {
            s.period.value()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.archive_dir = None;
        Ok(hex::encode(Sha256::digest(to_canonical_json(&canonical)?.as_bytes())))
    }

    pub fn archive_path(&self) -> PathBuf {
        archive_dir(self.archive_dir.clone().unwrap_or_else(|| PathBuf::from("archive"))).join(ARCHIVE_FILE)
    }
}

struct SeedOutcome {
    record: Option<SeedRecord>,
    families: Vec<(String, Family)>,
    errors: Vec<String>,
}

fn run_seed(spec: &SeedSpec, cfg: &PipelineConfig) -> SeedOutcome {
    let id = spec.id();
    let mut out = SeedOutcome {
        record: None,
        families: Vec::new(),
        errors: Vec::new(),
    };
    let fail = |stage: &str, e: Error| format!("{id}: {stage}: {e}");
    let period = match spec.period.value() {
        Ok(p) => p,
        Err(e) => {
            out.errors.push(fail("period", e));
            return out;
        }
    };
    let seed = match build_seed(spec.family, period, cfg.mu) {
        Ok(s) => s,
        Err(e) => {
            out.errors.push(fail("seed", e));
            return out;
        }
    };
    if seed.tag.kind == OrbitKind::Point {
        // Equilibria persist without a Melnikov condition.
        let family = correct_fixed_m(&seed.x0, seed.b.max(1), 0.0, 0.0, cfg.mu)
            .and_then(|start| continue_family(&start, 1.0, &cfg.step, Provenance::Seed { tag: id.clone() }));
        match family {
            Ok(f) => out.families.push((format!("{id}/point"), f)),
            Err(e) => out.errors.push(fail("continuation", e)),
        }
        out.record = Some(SeedRecord {
            id,
            seed,
            basis: None,
            zeros: Vec::new(),
            note: Some("equilibrium, continued directly".into()),
        });
        return out;
    }
    let orbit = match ResonantOrbit::new(seed.clone()) {
        Ok(o) => o,
        Err(e) => {
            out.errors.push(fail("resonance", e));
            return out;
        }
    };
    let basis = match melnikov_basis_escalating(&orbit) {
        Ok(b) => b,
        Err(e) => {
            out.errors.push(fail("melnikov", e));
            return out;
        }
    };
    let (zeros, note) = match melnikov_zeros(&basis) {
        Ok(z) => (z, None),
        Err(Error::IdenticallyZero) => (Vec::new(), Some("Melnikov function identically zero".to_string())),
        Err(e) => {
            out.errors.push(fail("melnikov zeros", e));
            (Vec::new(), None)
        }
    };
    let built: Vec<_> = zeros
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let prov = Provenance::MelnikovZero { tag: id.clone(), s };
            let family = seed_from_melnikov(&orbit, s, cfg.seed_m0)
                .and_then(|start| continue_family(&start, 1.0, &cfg.step, prov));
            (format!("{id}/z{k}"), family)
        })
        .collect();
    for (fid, f) in built {
        match f {
            Ok(f) => out.families.push((fid, f)),
            Err(e) => out.errors.push(format!("{fid}: continuation: {e}")),
        }
    }
    out.record = Some(SeedRecord {
        id,
        seed,
        basis: Some(basis),
        zeros,
        note,
    });
    out
}

/// One flagged member per location: where both traces dip, keep the deeper.
fn distinct_hits(hits: Vec<ScanHit>) -> Vec<ScanHit> {
    let mut out: Vec<ScanHit> = Vec::new();
    for h in hits {
        let value = |h: &ScanHit| match h.which {
            crate::bifurcation::Which::Alpha => h.spectrum.sigma_alpha,
            crate::bifurcation::Which::Beta => h.spectrum.sigma_beta,
        };
        match out.iter_mut().find(|o| o.member == h.member) {
            Some(o) if value(&h) < value(o) => *o = h,
            Some(_) => {}
            None => out.push(h),
        }
    }
    out
}

struct ScanOutcome {
    candidates: Vec<CandidateRecord>,
    branches: Vec<(String, Family)>,
    errors: Vec<String>,
}

fn scan_and_branch(id: &str, family: &Family, cfg: &PipelineConfig, build: bool) -> ScanOutcome {
    let mut out = ScanOutcome {
        candidates: Vec::new(),
        branches: Vec::new(),
        errors: Vec::new(),
    };
    if family.members.len() < 3 {
        return out;
    }
    let hits = match scan_family(family, cfg.n_b, cfg.theta) {
        Ok(h) => distinct_hits(h),
        Err(e) => {
            out.errors.push(format!("{id}: scan: {e}"));
            return out;
        }
    };
    for hit in hits {
        let cid = format!("{id}#{}", hit.member);
        let (cand, refined) = match refine_candidate(family, &hit) {
            Ok(c) => (c, true),
            Err(e) => {
                log::warn!("{cid}: refinement failed ({e}); using the flagged member");
                (candidate_at(family, &hit), false)
            }
        };
        let split = crate::bifurcation::branch_guess(&cand, crate::bifurcation::BRANCH_DS0)[0].symmetry_split;
        let mut record = CandidateRecord {
            id: cid.clone(),
            family: id.to_string(),
            member: cand.member,
            which: cand.which,
            m: cand.orbit.m,
            sigma: cand.sigma,
            direction: cand.direction,
            symmetry_split: split,
            refined,
            branches: Vec::new(),
        };
        // Only tangent bifurcations are branched automatically.
        if build && cfg.n_b == 1 {
            let built: Vec<_> = [1i8, -1]
                .par_iter()
                .map(|&sign| {
                    let r = build_branch(&cand, sign, id, &cfg.step).and_then(|b| {
                        let first = b.members.get(1).unwrap_or(&b.members[0]).clone();
                        Ok((is_new_family(&first, family)?, b))
                    });
                    (sign, r)
                })
                .collect();
            for (sign, r) in built {
                let bid = format!("{id}/b{}{}", cand.member, if sign > 0 { '+' } else { '-' });
                match r {
                    Ok((true, b)) => {
                        record.branches.push(bid.clone());
                        out.branches.push((bid, b));
                    }
                    Ok((false, _)) => log::info!("{bid} retraces its parent; dropped"),
                    Err(e) => out.errors.push(format!("{bid}: branch: {e}")),
                }
            }
        }
        out.candidates.push(record);
    }
    out
}

/// Run seeds → Melnikov zeros → continuation → scan → branches, without
/// touching the filesystem.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Archive> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Precondition(format!("worker pool: {e}")))?;
    let mut archive = Archive::new(cfg.mu);
    archive.metadata.config_hash = Some(cfg.hash()?);
    pool.install(|| {
        let outcomes: Vec<SeedOutcome> = cfg.seeds.par_iter().map(|s| run_seed(s, cfg)).collect();
        let mut fresh = Vec::new();
        for o in outcomes {
            archive.seeds.extend(o.record);
            archive.metadata.errors.extend(o.errors);
            fresh.extend(o.families);
        }
        for round in 0..=cfg.branch_depth {
            if fresh.is_empty() {
                break;
            }
            let build = round < cfg.branch_depth;
            let scans: Vec<ScanOutcome> = fresh
                .par_iter()
                .map(|(id, f)| scan_and_branch(id, f, cfg, build))
                .collect();
            for (id, f) in fresh.drain(..) {
                archive.families.push(FamilyRecord::from_family(id, &f));
            }
            for s in scans {
                archive.candidates.extend(s.candidates);
                archive.metadata.errors.extend(s.errors);
                fresh.extend(s.branches);
            }
        }
        for (id, f) in fresh {
            archive.families.push(FamilyRecord::from_family(id, &f));
        }
    });
    archive.validate()?;
    Ok(archive)
}

/// Whether [`run_or_reuse`] computed or loaded the archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Computed,
    Reused,
}

/// Load the archive at the config's path if its hash matches, otherwise
/// run and write it.
pub fn run_or_reuse(cfg: &PipelineConfig) -> Result<(Archive, RunStatus)> {
    let path = cfg.archive_path();
    let hash = cfg.hash()?;
    if path.exists() {
        match Archive::read(&path) {
            Ok(a) if a.metadata.config_hash.as_deref() == Some(hash.as_str()) => {
                return Ok((a, RunStatus::Reused));
            }
            Ok(_) => log::info!("config changed; recomputing {}", path.display()),
            Err(e) => log::warn!("unreadable archive {}: {e}; recomputing", path.display()),
        }
    }
    let archive = run_pipeline(cfg)?;
    archive.write(&path)?;
    Ok((archive, RunStatus::Computed))
}
