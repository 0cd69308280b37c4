use std::path::Path;
use std::process::Command;

use pidkl::cli::{summarize_draws, verify_manifest, RunSummary};
use pidkl::hmc::SampleChain;

const TINY: &str = r#"
[problem]
name = "heat1d"

[data]
N_u = 10

[pretrain]
N_col = 8
n_iter = 30
hidden = [6]

[hmc]
n_warmup = 30
n_samples = 60
n_leapfrog = 5

[predict]
thinning = 6
n_space = 5
n_time = 4
"#;

fn pidkl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pidkl"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_tiny(dir: &Path, out: &str) -> std::process::Output {
    let cfg = write_config(dir, TINY);
    pidkl()
        .args(["--quiet", "run", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join(out))
        .output()
        .unwrap()
}

#[test]
fn run_writes_verifiable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "a");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = dir.path().join("a");
    for f in [
        "observations.csv",
        "pretrain.json",
        "chain.csv",
        "diagnostics.json",
        "summary.json",
        "field.csv",
        "manifest.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert!(verify_manifest(&a).unwrap());

    std::fs::write(a.join("field.csv"), "tampered\n").unwrap();
    assert!(!verify_manifest(&a).unwrap());
}

#[test]
fn summary_recomputes_from_chain_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "a");
    assert!(out.status.success());
    let a = dir.path().join("a");
    let (names, draws) = SampleChain::parse_csv(&std::fs::read_to_string(a.join("chain.csv")).unwrap()).unwrap();
    assert_eq!(draws.len(), 60);
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let (phi, psi) = summarize_draws(&names, &draws, 1).unwrap();
    for (x, y) in [(&phi, &summary.phi), (&psi, &summary.psi)] {
        assert_eq!(x.names, y.names);
        for (u, v) in x
            .mean
            .iter()
            .chain(&x.sd)
            .chain(&x.lower)
            .chain(&x.upper)
            .zip(y.mean.iter().chain(&y.sd).chain(&y.lower).chain(&y.upper))
        {
            assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
    }
    let alpha: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    assert!(alpha.iter().all(|a| *a > 0.0 && *a < 2.0));
}

#[test]
fn same_seed_same_chain_other_seed_differs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_tiny(dir.path(), "a").status.success());
    assert!(run_tiny(dir.path(), "b").status.success());
    let chain = |d: &str| std::fs::read(dir.path().join(d).join("chain.csv")).unwrap();
    assert_eq!(chain("a"), chain("b"));

    let cfg = dir.path().join("config.toml");
    let out = pidkl()
        .args(["--quiet", "run", "--seed-override", "7", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(chain("a"), chain("c"));
    let manifest = std::fs::read_to_string(dir.path().join("c").join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(m["config"]["data"]["seed"], 7);
    assert_eq!(m["config"]["pretrain"]["seed"], 8);
    assert_eq!(m["config"]["hmc"]["seed"], 9);
}

#[test]
fn schema_error_exits_two_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\nname = \"heat1d\"\n[data]\nN_u = -3\n");
    for verb in ["run", "validate"] {
        let out = pidkl().args([verb, "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("data.N_u"));
    }
}

#[test]
fn stage_failure_exits_one_with_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let blocker = dir.path().join("occupied");
    std::fs::write(&blocker, "").unwrap();
    let out = pidkl()
        .args(["--quiet", "run", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&blocker)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `output`"));
}

#[test]
fn validate_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\nname = \"adr50d\"\ndim = 4\n");
    let out = pidkl().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("hmc.n_leapfrog"));
    assert!(text.contains("data.N_u"));
    assert!(!text.contains("problem.dim"));
}
