use std::path::Path;
use std::process::{Command, Output};

fn hr4bp(args: &[&str], archive_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hr4bp"));
    cmd.args(args).env_remove("HR4BP_ARCHIVE_DIR");
    if let Some(d) = archive_dir {
        cmd.env("HR4BP_ARCHIVE_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn hvo_dump_is_rational_json() {
    let o = hr4bp(&["hvo", "dump"], None);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let tables = v.as_array().unwrap();
    assert_eq!(tables.len(), 2);
    let d = &tables[0]["d"];
    assert!(d.as_array().unwrap().iter().all(|e| e["den"].as_i64().unwrap() > 0));
}

#[test]
fn seed_survey_continue_export() {
    let dir = tempfile::tempdir().unwrap();
    let seed = dir.path().join("seed.json");
    let fam = dir.path().join("family.json");
    let s = seed.to_str().unwrap();
    let f = fam.to_str().unwrap();

    let o = hr4bp(
        &["seeds", "build", "--family", "L4-planar", "--period", "2pi", "-o", s],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&seed).unwrap()).unwrap();
    assert_eq!(rec["zeros"].as_array().unwrap().len(), 4);

    let o = hr4bp(&["melnikov", "survey", "--seed", s, "--samples", "16"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("s,melnikov,zero"));
    assert_eq!(text.lines().count(), 1 + 16 + 4);
    assert_eq!(text.lines().filter(|l| l.ends_with(",1")).count(), 4);

    let o = hr4bp(
        &[
            "continue",
            "--seed",
            s,
            "--zero",
            "0",
            "--direction",
            "+",
            "--m-stop",
            "0.002",
            "-o",
            f,
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let family: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fam).unwrap()).unwrap();
    let members = family["members"].as_array().unwrap().len();
    assert_eq!(family["termination"], "max_m");

    let o = hr4bp(&["export", "hodograph", "--family", f], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("m,x0,y0,z0,vx0,vy0,vz0"));
    assert_eq!(text.lines().count(), members + 1);

    let o = hr4bp(&["export", "sigma", "--family", f], None);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), members + 1);

    let o = hr4bp(&["bifurcations", "scan", "--family", f, "--nB", "1"], None);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("member,m,sigma_alpha,sigma_beta,flagged"));
}

#[test]
fn run_is_idempotent_and_slice_reads_archive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "workers = 2\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = hr4bp(&["run", "--config", c], Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let archive = dir.path().join("archive.json");
    let first = std::fs::read(&archive).unwrap();
    let o = hr4bp(&["run", "--config", c], Some(dir.path()));
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("up to date"));
    assert_eq!(std::fs::read(&archive).unwrap(), first);

    let o = hr4bp(&["slice", "--m", "0.0808"], Some(dir.path()));
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["entries"].as_array().unwrap().is_empty());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "workers = 0\n").unwrap();
    let o = hr4bp(&["run", "--config", bad.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));

    let o = hr4bp(&["run", "--config", "/definitely/missing.toml"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));

    let o = hr4bp(&["seeds", "build", "--family", "L9-halo-N", "--period", "pi"], None);
    assert_eq!(o.status.code(), Some(1));

    let o = hr4bp(&["seeds", "build", "--family", "L1-lyapunov", "--period", "tau"], None);
    assert_eq!(o.status.code(), Some(1));

    // Butterfly seeds are not generated, so the stage fails but the run completes.
    let partial = dir.path().join("partial.toml");
    std::fs::write(&partial, "[[seeds]]\nfamily = \"L2-butterfly-N\"\nperiod = \"2pi\"\n").unwrap();
    let o = hr4bp(&["run", "--config", partial.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(dir.path().join("archive.json").exists());

    let o = hr4bp(&["--help"], None);
    assert_eq!(o.status.code(), Some(0));
}
