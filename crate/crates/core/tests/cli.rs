use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqboed::harness::{self, ExperimentKind, HarnessError};

const LINEAR: &str = r#"
kind = "linear"

[seeds]
master = 11

[model]
type = "linear"
c = 2.0
d_shift = 3.0

[prior]
mean = 2.0
variance = 2.0

[noise]
variance = 1.0

[eig]
j = 2000
designs = [0.0, 1.0, 2.0]
"#;

const SEQUENTIAL: &str = r#"
kind = "sequential"

[seeds]
master = 5
ground_truth = 6

[model]
type = "linear"
c = 2.0
d_shift = 3.0

[prior]
mean = 2.0
variance = 2.0

[noise]
variance = 1.0

[sampler]
j = 100
dt = 0.01
t_end = 1.0

[eig]
j = 100

[eki]
alpha = 0.01
t_end = 5.0
ensemble_size = 3

[sequential]
n_steps = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqboed"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn run_writes_versioned_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "linear.toml", LINEAR);
    let out = dir.path().join("out");
    let o = run(&["run", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("linear.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# seqboed-csv-v1 linear"));
    assert_eq!(
        lines.next(),
        Some("obs_step,p,lb_gauss,lb_laplace,ub,se_lower,se_upper,lb,ordered,exact")
    );
    assert_eq!(lines.count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["kind"], "linear");
    assert_eq!(manifest["seeds"]["master"], 11);
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(manifest["summary"]["ordering_violations"], 0);
}

#[test]
fn same_seed_gives_identical_csv_and_other_seed_differs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "linear.toml", LINEAR);
    let csv = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(run(&args).status.success());
        read(out.join("linear.csv"))
    };
    let a = csv("a", &[]);
    assert_eq!(a, csv("b", &["--threads", "2"]));
    assert_ne!(a, csv("c", &["--seed", "12"]));
}

#[test]
fn sequential_history_reproduces_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seq.toml", SEQUENTIAL);
    let steps = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&["run", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (read(out.join("sequential_steps.csv")), read(out.join("sequential_particles.csv")))
    };
    let a = steps("a");
    assert_eq!(a.0.lines().count(), 4);
    assert_eq!(a, steps("b"));
}

#[test]
fn negative_sample_size_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "linear.toml", LINEAR);
    let o = run(&["run", cfg.to_str().unwrap(), "--set", "eig.j=-5"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eig.j"));
}

#[test]
fn malformed_config_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "kind = \n");
    assert_eq!(run(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "typo.toml", &LINEAR.replace("d_shift", "dshift"));
    assert_eq!(run(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["run", "/nonexistent/config.toml"]).status.code(), Some(4));
}

#[test]
fn missing_block_names_the_block() {
    let dir = tempfile::tempdir().unwrap();
    let text = LINEAR.replace("[eig]\nj = 2000\ndesigns = [0.0, 1.0, 2.0]\n", "");
    let cfg = write_config(dir.path(), "noeig.toml", &text);
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eig"));
}

#[test]
fn small_sample_verify_warns_and_succeeds_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "linear.toml", LINEAR);
    let args = [
        "verify",
        cfg.to_str().unwrap(),
        "--set",
        "eig.j=10",
        "--set",
        "sampler={ j = 10, dt = 0.01, t_end = 1.0 }",
    ];
    let a = run(&args);
    assert_eq!(a.status.code(), Some(0));
    let text = String::from_utf8_lossy(&a.stdout).to_string();
    assert_eq!(text.lines().count(), 5);
    assert!(text.ends_with("overall WARN\n") || text.ends_with("overall PASS\n"), "{text}");
    assert_eq!(a.stdout, run(&args).stdout);
}

#[test]
fn overrides_follow_dot_paths() {
    let (cfg, table) = harness::parse_config(
        LINEAR,
        &["eig.j=500".into(), "model.c=1.5".into(), "out_dir=results/x".into()],
    )
    .unwrap();
    assert_eq!(cfg.kind, ExperimentKind::Linear);
    assert_eq!(cfg.eig.as_ref().unwrap().j, 500);
    assert_eq!(table["model"]["c"].as_float(), Some(1.5));
    assert_eq!(cfg.out_dir, Some(PathBuf::from("results/x")));
    assert!(matches!(
        harness::parse_config(LINEAR, &["eig.j".into()]),
        Err(HarnessError::Parse(_))
    ));
    assert!(matches!(
        harness::parse_config(LINEAR, &["kind.sub=1".into()]),
        Err(HarnessError::Parse(_))
    ));
}

#[test]
fn kl_convergence_reports_percentile_columns() {
    let text = LINEAR.replace("kind = \"linear\"", "kind = \"kl_convergence\"")
        + "\n[kl]\nj_grid = [100, 1000]\nreplicates = 3\n";
    let (cfg, _) = harness::parse_config(&text, &[]).unwrap();
    let out = harness::execute(&cfg).unwrap();
    let t = &out.tables[0];
    assert_eq!(
        t.header,
        ["p", "J", "replicate", "kl_marginal", "kl_posterior_p10", "kl_posterior_p50", "kl_posterior_p90"]
    );
    assert_eq!(t.rows.len(), 6);
    for r in &t.rows {
        for v in &r[3..] {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
}
