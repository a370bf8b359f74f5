//! Persistent archives of seeds and families, plot exports and the
//! Sun-Earth-Moon slice.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::bifurcation::Which;
use crate::continuation::{
    correct_fixed_m, correct_symmetric, evaluate_orbit, Family, PeriodicOrbit, Provenance, Termination, ORBIT_TOL,
};
use crate::dynamics::{State, M_SEM};
use crate::error::{Error, Result};
use crate::melnikov::MelnikovBasis;
use crate::seeds::Cr3bpSeed;

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the archive directory of the CLI and pipeline.
pub const ARCHIVE_DIR_ENV: &str = "HR4BP_ARCHIVE_DIR";
pub const ARCHIVE_FILE: &str = "archive.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub m: f64,
    pub x0: [f64; 6],
    pub residual: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub tangent: Option<[f64; 7]>,
}

impl MemberRecord {
    pub fn state(&self) -> State {
        State::from_column_slice(&self.x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub id: String,
    pub schema_version: u32,
    pub provenance: Provenance,
    pub mu: f64,
    pub b: u32,
    pub tau0: f64,
    pub members: Vec<MemberRecord>,
    pub termination: Termination,
}

impl FamilyRecord {
    pub fn from_family(id: impl Into<String>, family: &Family) -> Self {
        let members = family
            .members
            .iter()
            .zip(&family.sigma)
            .map(|(o, s)| {
                let mut x0 = [0.0; 6];
                x0.copy_from_slice(o.x0.as_slice());
                MemberRecord {
                    m: o.m,
                    x0,
                    residual: o.residual,
                    sigma_alpha: s.0,
                    sigma_beta: s.1,
                    tangent: o.tangent,
                }
            })
            .collect();
        Self {
            id: id.into(),
            schema_version: SCHEMA_VERSION,
            provenance: family.provenance.clone(),
            mu: family.mu,
            b: family.b,
            tau0: family.tau0,
            members,
            termination: family.termination,
        }
    }

    /// Rebuild the full family, re-propagating every member for its
    /// monodromy and sensitivity.
    pub fn to_family(&self) -> Result<Family> {
        use rayon::prelude::*;
        let members = self
            .members
            .par_iter()
            .map(|r| {
                let mut o = evaluate_orbit(&r.state(), self.b, self.tau0, r.m, self.mu)?;
                o.tangent = r.tangent;
                Ok(o)
            })
            .collect::<Result<Vec<PeriodicOrbit>>>()?;
        Ok(Family {
            mu: self.mu,
            b: self.b,
            tau0: self.tau0,
            members,
            sigma: self.members.iter().map(|r| (r.sigma_alpha, r.sigma_beta)).collect(),
            provenance: self.provenance.clone(),
            termination: self.termination,
        })
    }

    pub fn m_range(&self) -> (f64, f64) {
        self.members
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.m), hi.max(r.m))
            })
    }

    /// Members lie on the xz-mirror fixed set (continued there).
    fn mirror_symmetric(&self) -> bool {
        self.members
            .first()
            .is_some_and(|r| r.x0[1] == 0.0 && r.x0[3] == 0.0 && r.x0[5] == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub id: String,
    pub seed: Cr3bpSeed,
    pub basis: Option<MelnikovBasis>,
    pub zeros: Vec<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub family: String,
    pub member: usize,
    pub which: Which,
    pub m: f64,
    pub sigma: f64,
    pub direction: [f64; 7],
    pub symmetry_split: bool,
    /// False when golden-section refinement failed and the flagged member
    /// itself was used.
    pub refined: bool,
    /// Branch family ids built from this candidate.
    pub branches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub code_version: String,
    pub integrator_tolerance: f64,
    pub orbit_tolerance: f64,
    pub config_hash: Option<String>,
    /// Stage failures, one line each.
    pub errors: Vec<String>,
}

impl Default for RunMetadata {
    fn default() -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            integrator_tolerance: 1e-13,
            orbit_tolerance: ORBIT_TOL,
            config_hash: None,
            errors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub mu: f64,
    pub seeds: Vec<SeedRecord>,
    pub families: Vec<FamilyRecord>,
    pub candidates: Vec<CandidateRecord>,
}

impl Archive {
    pub fn new(mu: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            metadata: RunMetadata::default(),
            mu,
            seeds: Vec::new(),
            families: Vec::new(),
            candidates: Vec::new(),
        }
    }

    pub fn family(&self, id: &str) -> Option<&FamilyRecord> {
        self.families.iter().find(|f| f.id == id)
    }

    pub fn seed(&self, id: &str) -> Option<&SeedRecord> {
        self.seeds.iter().find(|s| s.id == id)
    }

    /// Every family must trace back to a stored seed or candidate.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Precondition(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        for f in &self.families {
            let ok = match &f.provenance {
                Provenance::Seed { tag } | Provenance::MelnikovZero { tag, .. } => self.seed(tag).is_some(),
                Provenance::Bifurcation { parent, member, .. } => self
                    .candidates
                    .iter()
                    .any(|c| &c.family == parent && c.member == *member),
            };
            if !ok {
                return Err(Error::Precondition(format!(
                    "family {} has a dangling provenance",
                    f.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `dir` unless the environment overrides it.
pub fn archive_dir(dir: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(ARCHIVE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| dir.into())
}

/// Pretty JSON with sorted keys and every float at 17 significant digits.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Going through `Value` sorts object keys.
    let value = serde_json::to_value(value)?;
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

#[derive(Default)]
struct CanonicalFormatter {
    pretty: PrettyFormatter<'static>,
}

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

/// One row per member: `m, x0, y0, z0, x0', y0', z0'`.
pub fn export_hodograph<W: Write>(family: &FamilyRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "x0", "y0", "z0", "vx0", "vy0", "vz0"])
        .map_err(csv_err)?;
    for r in &family.members {
        let mut row = vec![fmt(r.m)];
        row.extend(r.x0.iter().map(|v| fmt(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `member, m, sigma_alpha, sigma_beta, flagged`.
pub fn export_sigma<W: Write>(family: &FamilyRecord, flagged: &[usize], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["member", "m", "sigma_alpha", "sigma_beta", "flagged"])
        .map_err(csv_err)?;
    for (i, r) in family.members.iter().enumerate() {
        w.write_record([
            i.to_string(),
            fmt(r.m),
            fmt(r.sigma_alpha),
            fmt(r.sigma_beta),
            u8::from(flagged.contains(&i)).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub s: f64,
    /// `𝓜(s, 0)`
    pub value: f64,
    pub zero: bool,
}

/// `𝓜(s, 0)` on `n` evenly spaced phases plus the zeros themselves.
pub fn melnikov_survey(basis: &MelnikovBasis, zeros: &[f64], n: usize) -> Vec<SurveyRow> {
    let mut rows: Vec<SurveyRow> = (0..n)
        .map(|k| {
            let s = basis.t_star * k as f64 / n as f64;
            SurveyRow {
                s,
                value: basis.reconstruct(s, 0.0),
                zero: false,
            }
        })
        .collect();
    rows.extend(zeros.iter().map(|&s| SurveyRow {
        s,
        value: basis.reconstruct(s, 0.0),
        zero: true,
    }));
    rows.sort_by(|a, b| a.s.total_cmp(&b.s));
    rows
}

pub fn export_survey<W: Write>(rows: &[SurveyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "melnikov", "zero"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([fmt(r.s), fmt(r.value), u8::from(r.zero).to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub family: String,
    pub x0: [f64; 6],
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemSlice {
    pub m: f64,
    pub entries: Vec<SliceEntry>,
    /// Families skipped, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// The member of every family at `m = m_sem`, re-corrected there.
pub fn sem_slice(archive: &Archive) -> SemSlice {
    slice_at(archive, M_SEM)
}

pub fn slice_at(archive: &Archive, m: f64) -> SemSlice {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for f in &archive.families {
        match slice_family(f, m) {
            Ok(Some(o)) => {
                let mut x0 = [0.0; 6];
                x0.copy_from_slice(o.x0.as_slice());
                entries.push(SliceEntry {
                    family: f.id.clone(),
                    x0,
                    residual: o.residual,
                });
            }
            Ok(None) => skipped.push((f.id.clone(), format!("m = {m} not crossed"))),
            Err(e) => skipped.push((f.id.clone(), e.to_string())),
        }
    }
    SemSlice { m, entries, skipped }
}

/// First crossing of `m` in member order, re-corrected at exactly `m`.
pub fn slice_family(family: &FamilyRecord, m: f64) -> Result<Option<PeriodicOrbit>> {
    let correct = |guess: &State| {
        if family.mirror_symmetric() {
            correct_symmetric(guess, family.b, family.tau0, m, family.mu)
        } else {
            correct_fixed_m(guess, family.b, family.tau0, m, family.mu)
        }
    };
    for w in family.members.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.m - m) * (b.m - m) <= 0.0 {
            let t = if a.m == b.m { 0.0 } else { (m - a.m) / (b.m - a.m) };
            return correct(&(a.state() + (b.state() - a.state()) * t)).map(Some);
        }
    }
    match family.members.as_slice() {
        [only] if only.m == m => correct(&only.state()).map(Some),
        _ => Ok(None),
    }
}
