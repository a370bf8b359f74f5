use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hr4bp::archive::{
    archive_dir, export_hodograph, export_sigma, export_survey, melnikov_survey, slice_at, to_canonical_json, Archive,
    FamilyRecord, SeedRecord, ARCHIVE_FILE,
};
use hr4bp::bifurcation::{build_branch, is_new_family, refine_candidate, scan_traces, spectrum, ScanHit, Which, THETA};
use hr4bp::continuation::{continue_family, correct_fixed_m, seed_from_melnikov, Provenance, StepPolicy, SEED_M0};
use hr4bp::hvo::HvoSeries;
use hr4bp::melnikov::{melnikov_basis_escalating, melnikov_zeros, ResonantOrbit};
use hr4bp::pipeline::{parse_period, run_or_reuse, PipelineConfig, RunStatus};
use hr4bp::seeds::{build_seed, FamilyTag, OrbitKind};
use hr4bp::{Error, MU_EM, M_SEM};

#[derive(Parser)]
#[command(
    name = "hr4bp",
    version,
    about = "Periodic orbit families of the Hill restricted four-body problem"
)]
struct Cli {
    /// Mass ratio of the primaries.
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solar-orbit series tables.
    Hvo {
        #[command(subcommand)]
        what: HvoCommand,
    },
    /// CR3BP seed orbits.
    Seeds {
        #[command(subcommand)]
        what: SeedsCommand,
    },
    /// Persistence function of a seed.
    Melnikov {
        #[command(subcommand)]
        what: MelnikovCommand,
    },
    /// Continue an HR4BP family from a seed.
    Continue(ContinueArgs),
    /// Bifurcation scans and branch construction.
    Bifurcations {
        #[command(subcommand)]
        what: BifurcationCommand,
    },
    /// Members of every archived family at one value of m.
    Slice(SliceArgs),
    /// Plot tables.
    Export {
        #[command(subcommand)]
        what: ExportCommand,
    },
    /// Full pipeline from a config file.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum HvoCommand {
    /// Coefficient tables as JSON rationals.
    Dump(OutArg),
}

#[derive(Subcommand)]
enum SeedsCommand {
    Build {
        /// Family tag, e.g. L2-halo-N or L4-planar.
        #[arg(long)]
        family: FamilyTag,
        /// Period: pi, 2pi, 4pi/9 or a number.
        #[arg(long)]
        period: String,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Subcommand)]
enum MelnikovCommand {
    Survey {
        /// Seed record written by `seeds build`.
        #[arg(long)]
        seed: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args)]
struct ContinueArgs {
    /// Seed record written by `seeds build`.
    #[arg(long)]
    seed: PathBuf,
    /// Direction of the first step in m.
    #[arg(long, value_enum, default_value = "+", allow_hyphen_values = true)]
    direction: Direction,
    /// Index of the Melnikov zero to seed from.
    #[arg(long, default_value_t = 0)]
    zero: usize,
    #[arg(long, default_value_t = SEED_M0)]
    m0: f64,
    #[command(flatten)]
    step: StepArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    #[value(name = "+")]
    Up,
    #[value(name = "-")]
    Down,
}

#[derive(Args)]
struct StepArgs {
    /// Stop once m passes this value.
    #[arg(long)]
    m_stop: Option<f64>,
    #[arg(long)]
    max_members: Option<usize>,
}

impl StepArgs {
    fn policy(&self, mut p: StepPolicy) -> StepPolicy {
        if let Some(m) = self.m_stop {
            p.m_stop = m;
        }
        if let Some(n) = self.max_members {
            p.max_members = n;
        }
        p
    }
}

#[derive(Subcommand)]
enum BifurcationCommand {
    /// Singular-value traces with flagged local minima, as CSV.
    Scan {
        #[command(flatten)]
        family: FamilyArg,
        #[arg(long = "nB", default_value_t = 1)]
        n_b: u32,
        #[arg(long, default_value_t = THETA)]
        theta: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Refine a flagged member and continue the branches leaving it.
    Branch {
        #[command(flatten)]
        family: FamilyArg,
        /// Member index reported by `scan`.
        #[arg(long)]
        candidate: usize,
        #[arg(long, value_enum)]
        which: Option<WhichArg>,
        #[command(flatten)]
        step: StepArgs,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Alpha,
    Beta,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long, default_value_t = M_SEM)]
    m: f64,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Subcommand)]
enum ExportCommand {
    /// Initial states against m.
    Hodograph {
        #[command(flatten)]
        family: FamilyArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Stored singular-value traces.
    Sigma {
        #[command(flatten)]
        family: FamilyArg,
        #[arg(long, default_value_t = THETA)]
        theta: f64,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args)]
struct FamilyArg {
    /// Family record file, or a family id in the archive.
    #[arg(long)]
    family: String,
    #[arg(long)]
    archive: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    archive_dir: Option<PathBuf>,
}

#[derive(Args)]
struct OutArg {
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn writer(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        })
    }

    fn json<T: Serialize>(&self, value: &T) -> anyhow::Result<()> {
        let mut w = self.writer()?;
        w.write_all(to_canonical_json(value)?.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// Bad arguments, config or input files: exit status 1.
#[derive(Debug)]
struct ConfigError(String);

fn config<T>(r: anyhow::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| anyhow::Error::new(ConfigError(format!("{e:#}"))))
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

enum Outcome {
    Done,
    Partial,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn default_archive(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| archive_dir("archive").join(ARCHIVE_FILE))
}

fn load_family(arg: &FamilyArg) -> anyhow::Result<FamilyRecord> {
    let path = Path::new(&arg.family);
    if path.is_file() {
        return config(read_json(path));
    }
    let archive_path = default_archive(&arg.archive);
    let archive: Archive = config(read_json(&archive_path))?;
    config(
        archive
            .family(&arg.family)
            .cloned()
            .ok_or_else(|| anyhow!("no family file or archived family '{}'", arg.family)),
    )
}

fn mu_of(cli_mu: Option<f64>) -> anyhow::Result<f64> {
    let mu = cli_mu.unwrap_or(MU_EM);
    if !(mu > 0.0 && mu <= 0.5) {
        return config(Err(anyhow!("mu = {mu} outside (0, 0.5]")));
    }
    Ok(mu)
}

fn seed_record(tag: FamilyTag, period: f64, mu: f64, id: String) -> anyhow::Result<SeedRecord> {
    let seed = build_seed(tag, period, mu)?;
    if tag.kind == OrbitKind::Point {
        return Ok(SeedRecord {
            id,
            seed,
            basis: None,
            zeros: Vec::new(),
            note: Some("equilibrium, continued directly".into()),
        });
    }
    let orbit = ResonantOrbit::new(seed.clone())?;
    let basis = melnikov_basis_escalating(&orbit)?;
    let (zeros, note) = match melnikov_zeros(&basis) {
        Ok(z) => (z, None),
        Err(Error::IdenticallyZero) => (Vec::new(), Some("Melnikov function identically zero".into())),
        Err(e) => return Err(e.into()),
    };
    Ok(SeedRecord {
        id,
        seed,
        basis: Some(basis),
        zeros,
        note,
    })
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Hvo {
            what: HvoCommand::Dump(out),
        } => {
            out.json(&[HvoSeries::full().dump(), HvoSeries::melnikov().dump()])?;
        }
        Command::Seeds {
            what: SeedsCommand::Build { family, period, out },
        } => {
            let mu = mu_of(cli.mu)?;
            let t = config(parse_period(&period).map_err(Into::into))?;
            let record = seed_record(family, t, mu, format!("{family}@{}", period.replace(' ', "")))?;
            out.json(&record)?;
        }
        Command::Melnikov {
            what: MelnikovCommand::Survey { seed, samples, out },
        } => {
            let record: SeedRecord = config(read_json(&seed))?;
            let basis = config(
                record
                    .basis
                    .as_ref()
                    .ok_or_else(|| anyhow!("seed {} has no Melnikov basis", record.id)),
            )?;
            if samples == 0 {
                return config(Err(anyhow!("--samples must be positive")));
            }
            export_survey(&melnikov_survey(basis, &record.zeros, samples), out.writer()?)?;
        }
        Command::Continue(args) => {
            let record: SeedRecord = config(read_json(&args.seed))?;
            let policy = config(validated(args.step.policy(StepPolicy::default())))?;
            let sign = match args.direction {
                Direction::Up => 1.0,
                Direction::Down => -1.0,
            };
            let mu = record.seed.mu;
            let (id, start, prov) = if record.seed.tag.kind == OrbitKind::Point {
                let start = correct_fixed_m(&record.seed.x0, record.seed.b.max(1), 0.0, 0.0, mu)?;
                (
                    format!("{}/point", record.id),
                    start,
                    Provenance::Seed { tag: record.id.clone() },
                )
            } else {
                let s = *config(record.zeros.get(args.zero).ok_or_else(|| {
                    anyhow!(
                        "seed {} has {} Melnikov zeros; --zero {} is out of range",
                        record.id,
                        record.zeros.len(),
                        args.zero
                    )
                }))?;
                let orbit = ResonantOrbit::new(record.seed.clone())?;
                let start = seed_from_melnikov(&orbit, s, args.m0)?;
                (
                    format!("{}/z{}", record.id, args.zero),
                    start,
                    Provenance::MelnikovZero {
                        tag: record.id.clone(),
                        s,
                    },
                )
            };
            let family = continue_family(&start, sign, &policy, prov)?;
            args.out.json(&FamilyRecord::from_family(id, &family))?;
        }
        Command::Bifurcations { what } => return bifurcations(what),
        Command::Slice(args) => {
            let archive: Archive = config(read_json(&default_archive(&args.archive)))?;
            let slice = slice_at(&archive, args.m);
            args.out.json(&slice)?;
            if slice
                .entries
                .iter()
                .any(|e| e.residual > hr4bp::continuation::ORBIT_TOL)
            {
                return Ok(Outcome::Partial);
            }
        }
        Command::Export { what } => match what {
            ExportCommand::Hodograph { family, out } => {
                export_hodograph(&load_family(&family)?, out.writer()?)?;
            }
            ExportCommand::Sigma { family, theta, out } => {
                let rec = load_family(&family)?;
                let traces: Vec<(f64, f64)> = rec.members.iter().map(|r| (r.sigma_alpha, r.sigma_beta)).collect();
                let flagged: Vec<usize> = scan_traces(&traces, theta).into_iter().map(|h| h.0).collect();
                export_sigma(&rec, &flagged, out.writer()?)?;
            }
        },
        Command::Run(args) => {
            let mut cfg = config(
                std::fs::read_to_string(&args.config)
                    .with_context(|| format!("reading {}", args.config.display()))
                    .and_then(|t| PipelineConfig::from_toml(&t).map_err(Into::into)),
            )?;
            if let Some(mu) = cli.mu {
                cfg.mu = mu;
            }
            if let Some(w) = args.workers {
                cfg.workers = w;
            }
            if let Some(d) = args.archive_dir {
                cfg.archive_dir = Some(d);
            }
            config(cfg.validate().map_err(Into::into))?;
            let (archive, status) = run_or_reuse(&cfg)?;
            let path = cfg.archive_path();
            match status {
                RunStatus::Reused => eprintln!("archive {} is up to date", path.display()),
                RunStatus::Computed => eprintln!(
                    "wrote {} ({} seeds, {} families, {} candidates)",
                    path.display(),
                    archive.seeds.len(),
                    archive.families.len(),
                    archive.candidates.len()
                ),
            }
            for e in &archive.metadata.errors {
                eprintln!("stage failure: {e}");
            }
            if !archive.metadata.errors.is_empty() {
                return Ok(Outcome::Partial);
            }
        }
    }
    Ok(Outcome::Done)
}

fn validated(p: StepPolicy) -> anyhow::Result<StepPolicy> {
    let cfg = PipelineConfig {
        step: p,
        ..PipelineConfig::default()
    };
    cfg.validate()?;
    Ok(p)
}

fn bifurcations(what: BifurcationCommand) -> anyhow::Result<Outcome> {
    match what {
        BifurcationCommand::Scan {
            family,
            n_b,
            theta,
            out,
        } => {
            if n_b == 0 || !(theta > 0.0 && theta < 1.0) {
                return config(Err(anyhow!("need nB ≥ 1 and 0 < theta < 1")));
            }
            let mut rec = load_family(&family)?;
            if n_b > 1 {
                let fam = rec.to_family()?;
                for (r, o) in rec.members.iter_mut().zip(&fam.members) {
                    let s = spectrum(o, n_b)?;
                    r.sigma_alpha = s.sigma_alpha;
                    r.sigma_beta = s.sigma_beta;
                }
            }
            let traces: Vec<(f64, f64)> = rec.members.iter().map(|r| (r.sigma_alpha, r.sigma_beta)).collect();
            let flagged: Vec<usize> = scan_traces(&traces, theta).into_iter().map(|h| h.0).collect();
            export_sigma(&rec, &flagged, out.writer()?)?;
        }
        BifurcationCommand::Branch {
            family,
            candidate,
            which,
            step,
            out,
        } => {
            let rec = load_family(&family)?;
            let policy = config(validated(step.policy(StepPolicy::default())))?;
            if candidate == 0 || candidate + 1 >= rec.members.len() {
                return config(Err(anyhow!(
                    "candidate {candidate} needs neighbours in a family of {} members",
                    rec.members.len()
                )));
            }
            let fam = rec.to_family()?;
            let spec = spectrum(&fam.members[candidate], 1)?;
            let which = match which {
                Some(WhichArg::Alpha) => Which::Alpha,
                Some(WhichArg::Beta) => Which::Beta,
                None if spec.sigma_beta < spec.sigma_alpha => Which::Beta,
                None => Which::Alpha,
            };
            let hit = ScanHit {
                member: candidate,
                which,
                spectrum: spec,
            };
            let cand = refine_candidate(&fam, &hit)?;
            let mut branches = Vec::new();
            let mut failed = false;
            for sign in [1i8, -1] {
                let id = format!("{}/b{}{}", rec.id, candidate, if sign > 0 { '+' } else { '-' });
                match build_branch(&cand, sign, &rec.id, &policy) {
                    Ok(b) => {
                        let first = b.members.get(1).unwrap_or(&b.members[0]);
                        if is_new_family(first, &fam)? {
                            branches.push(FamilyRecord::from_family(id, &b));
                        } else {
                            eprintln!("{id} retraces its parent; dropped");
                        }
                    }
                    Err(e) => {
                        eprintln!("{id}: {e}");
                        failed = true;
                    }
                }
            }
            out.json(&branches)?;
            if failed {
                return Ok(Outcome::Partial);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
