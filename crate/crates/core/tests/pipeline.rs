use hr4bp::archive::ARCHIVE_FILE;
use hr4bp::continuation::{Provenance, Termination};
use hr4bp::pipeline::{run_or_reuse, PipelineConfig, RunStatus};

fn l4_config(dir: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(
        "workers = 2\nbranch_depth = 0\n[[seeds]]\nfamily = \"L4-planar\"\nperiod = \"2pi\"\n[step]\nm_stop = 0.02\n",
    )
    .unwrap();
    cfg.archive_dir = Some(dir.to_path_buf());
    cfg
}

#[test]
fn l4_run_seeds_four_families_and_reuses_its_archive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = l4_config(dir.path());
    let (archive, status) = run_or_reuse(&cfg).unwrap();
    assert_eq!(status, RunStatus::Computed);
    archive.validate().unwrap();

    let seed = archive.seed("L4-planar@2pi").expect("seed record");
    assert_eq!(seed.zeros.len(), 4);
    assert_eq!(archive.families.len(), 4);
    for (k, fam) in archive.families.iter().enumerate() {
        assert_eq!(fam.id, format!("L4-planar@2pi/z{k}"));
        match &fam.provenance {
            Provenance::MelnikovZero { tag, s } => {
                assert_eq!(tag, "L4-planar@2pi");
                assert_eq!(*s, seed.zeros[k]);
            }
            other => panic!("unexpected provenance {other:?}"),
        }
        assert!(fam.members.len() > 2);
        assert!(fam.members.iter().all(|m| m.residual <= 1e-10));
        assert!(matches!(fam.termination, Termination::MaxM | Termination::Cr3bpLanding));
    }
    assert!(archive.metadata.errors.is_empty(), "{:?}", archive.metadata.errors);

    let path = dir.path().join(ARCHIVE_FILE);
    let first = std::fs::read(&path).unwrap();
    let (again, status) = run_or_reuse(&cfg).unwrap();
    assert_eq!(status, RunStatus::Reused);
    assert_eq!(again, archive);
    assert_eq!(std::fs::read(&path).unwrap(), first);

    // A changed config invalidates the stored archive.
    let mut other = cfg.clone();
    other.step.m_stop = 0.01;
    let (_, status) = run_or_reuse(&other).unwrap();
    assert_eq!(status, RunStatus::Computed);
}
