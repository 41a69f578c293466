use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use offroad_irl::io;

const BIN: &str = env!("CARGO_BIN_EXE_offroad-irl");

const SMALL: &str = r#"
seed = 11
world.extent = 150.0
dataset.demos = 4
mppi.irl.samples = 128
mppi.irl.iterations = 2
model.members = 3
train.epochs = 2
train.val_samples = 3
eval.seeds = [0, 1]
nav.waypoints = 3
nav.waypoint_spacing = 30.0
mppi.mpc.samples = 128
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Full pipeline in `dir`; returns nothing, artifacts stay on disk.
fn pipeline(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml"];
    let with = |rest: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(rest.iter().copied()).collect() };
    ok(dir, &with(&["gen-world", "--out", "w.world"]));
    ok(dir, &with(&["collect", "--world", "w.world", "--out", "ds"]));
    ok(dir, &with(&["train", "--data", "ds", "--out", "m.ckpt"]));
    ok(dir, &with(&["eval-mhd", "--data", "ds", "--ckpt", "m.ckpt", "--nu", "-0.5", "--out", "e.csv"]));
    ok(dir, &with(&["navigate", "--world", "w.world", "--baseline", "occupancy", "--seeds", "0", "--out", "nav.csv"]));
}

fn strip_timing(log: &str) -> String {
    log.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    for f in ["w.world", "m.ckpt", "e.csv", "nav.csv", "nav.interventions.csv", "ds/manifest"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let la = fs::read_to_string(a.path().join("m.train.csv")).unwrap();
    let lb = fs::read_to_string(b.path().join("m.train.csv")).unwrap();
    assert_eq!(la.lines().next(), Some("epoch,mean_svf_gap,val_mhd,sec_per_sample"));
    assert_eq!(strip_timing(&la), strip_timing(&lb));

    let eval = fs::read_to_string(a.path().join("e.csv")).unwrap();
    assert!(eval.starts_with("seed,sample,demo_id,window_start,mhd\n"));
    assert!(eval.lines().count() > 1);
    for line in eval.lines().skip(1) {
        let mhd: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(mhd.is_finite() && mhd >= 0.0);
    }

    // Export from one stored gridmap; PGM and sidecar agree in size.
    let ds = io::read_dataset(&a.path().join("ds")).unwrap();
    let map = fs::read_dir(a.path().join("ds/samples")).unwrap().next().unwrap().unwrap().path().join("map.gmb");
    ok(a.path(), &["export-costmap", "--ckpt", "m.ckpt", "--map", map.to_str().unwrap(), "--nu", "0.9", "--out", "c.pgm"]);
    let (w, h, pixels) = io::read_pgm(&a.path().join("c.pgm")).unwrap();
    assert_eq!((w, h), (160, 160));
    assert_eq!(w * h, pixels.len());
    let raw = io::read_sidecar(&a.path().join("c.f32"), w * h).unwrap();
    assert!(raw.iter().all(|v| v.is_finite()));
    assert_eq!(w, ds.samples[0].gridmap.meta.nx);
}

#[test]
fn zero_epoch_training_writes_a_full_ensemble() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.toml"), SMALL).unwrap();
    ok(d.path(), &["--config", "small.toml", "gen-world", "--out", "w.world"]);
    ok(d.path(), &["--config", "small.toml", "--set", "dataset.demos=2", "collect", "--world", "w.world", "--out", "ds"]);
    ok(d.path(), &["train", "--data", "ds", "--kind", "linear", "--epochs", "0", "--out", "m.ckpt"]);
    let e = io::read_checkpoint(&d.path().join("m.ckpt")).unwrap();
    assert_eq!(e.len(), 16);
    assert_eq!(e.kind(), offroad_irl::ModelKind::Linear);
}

#[test]
fn printed_config_reloads_to_the_same_config() {
    let d = tempfile::tempdir().unwrap();
    let first = ok(d.path(), &["--set", "mppi.irl.samples=512", "--seed", "9", "--print-config"]);
    fs::write(d.path().join("round.toml"), &first).unwrap();
    let second = ok(d.path(), &["--config", "round.toml", "--print-config"]);
    assert_eq!(first, second);
    assert!(first.contains("mppi.irl.samples = 512"));
    assert!(first.lines().next() == Some("seed = 9"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| run(d.path(), args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["--set", "nope=1", "selftest"]), 1);
    assert_eq!(code(&["--set", "mppi.irl.samples=0", "selftest"]), 1);
    assert_eq!(code(&["gen-world"]), 1);
    assert_eq!(code(&["eval-mhd", "--data", "missing", "--baseline", "zero", "--out", "x.csv"]), 2);
    fs::write(d.path().join("bad.world"), b"not a world").unwrap();
    assert_eq!(code(&["collect", "--world", "bad.world", "--out", "ds"]), 2);
    let err = String::from_utf8(run(d.path(), &["--set", "nope=1", "selftest"]).stderr).unwrap();
    assert!(err.contains("nope"));
}

#[test]
fn malformed_sample_is_skipped_and_counted() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.toml"), SMALL).unwrap();
    ok(d.path(), &["--config", "small.toml", "gen-world", "--out", "w.world"]);
    ok(d.path(), &["--config", "small.toml", "--set", "dataset.demos=2", "collect", "--world", "w.world", "--out", "ds"]);
    let good = io::read_dataset(&d.path().join("ds")).unwrap();
    assert!(good.samples.len() >= 2);
    assert_eq!(good.skipped, 0);
    let victim = fs::read_dir(d.path().join("ds/samples")).unwrap().next().unwrap().unwrap().path();
    let bytes = fs::read(victim.join("map.gmb")).unwrap();
    fs::write(victim.join("map.gmb"), &bytes[..bytes.len() / 2]).unwrap();
    let bad = io::read_dataset(&d.path().join("ds")).unwrap();
    assert_eq!(bad.skipped, 1);
    assert_eq!(bad.samples.len(), good.samples.len() - 1);
}
