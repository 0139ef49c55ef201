use cme_synth::config::RunConfig;
use cme_synth::partition::Label;
use cme_synth::pipeline::{self, Manifest, RunOptions, Stage};
use cme_synth::rdp::Horizon;

fn opts(dir: &std::path::Path, stage: Stage) -> RunOptions {
    RunOptions {
        stage,
        workers: Some(1),
        seed: None,
        out: Some(dir.to_path_buf()),
    }
}

const REACH_AVOID: &str = r#"
[partition]
cells = [24]
[spec.reach]
lo = [20.25]
hi = [20.75]
[sim]
samples = 800
runs_per_state = 40
[task]
kind = "reach-avoid"
"#;

#[test]
fn reach_avoid_run_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(REACH_AVOID).unwrap();
    let out = pipeline::run(
        &cfg,
        REACH_AVOID.as_bytes(),
        None,
        &opts(tmp.path(), Stage::Report),
    )
    .unwrap();
    let p = out.partition.as_ref().unwrap();
    let b = out.bounds.as_ref().unwrap();
    let pol = out.policy.as_ref().unwrap();
    assert_eq!(pol.horizon, Horizon::Unbounded);
    assert!(pol.is_stationary());
    for (c, cell) in p.cells().iter().enumerate() {
        let s = p.state_of_cell(c);
        match cell.label {
            Label::Reach => assert_eq!(b.p_lower[s], 1.0),
            Label::Avoid => assert_eq!(b.p_upper[s], 0.0),
            Label::Safe => {}
        }
        assert!(b.p_lower[s] <= b.p_upper[s] + 2.0 * cfg.solver.conv_tol);
    }
    let m = Manifest::read(tmp.path()).unwrap();
    assert_eq!(m.stages_completed.len(), Stage::ALL.len());
    assert!(m.summary.is_some());
    assert_eq!(m.config_sha256.len(), 64);
}

#[test]
fn dataset_can_be_imported() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let cfg = RunConfig::from_toml("[partition]\ncells = [12]\n[sim]\nsamples = 500\n").unwrap();
    let a = pipeline::run(&cfg, &[], None, &opts(&first, Stage::Synthesize)).unwrap();

    let mut again = cfg.clone();
    again.sim.dataset = Some(first.join(pipeline::DATASET));
    let b = pipeline::run(
        &again,
        &[],
        None,
        &opts(&tmp.path().join("second"), Stage::Synthesize),
    )
    .unwrap();
    assert_eq!(a.bounds, b.bounds);
    assert_eq!(b.manifest.seeds.dataset, None);
}

#[test]
fn seed_override_changes_the_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml("[partition]\ncells = [6]\n[sim]\nsamples = 50\n").unwrap();
    let mut o = opts(&tmp.path().join("a"), Stage::GenData);
    let a = pipeline::run(&cfg, &[], None, &o).unwrap();
    o.out = Some(tmp.path().join("b"));
    o.seed = Some(99);
    let b = pipeline::run(&cfg, &[], None, &o).unwrap();
    assert_ne!(a.dataset, b.dataset);
    assert_eq!(b.manifest.seeds.dataset, Some(99));
}
