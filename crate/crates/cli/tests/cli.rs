use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use sheaflap::hypergraph::Hypergraph;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sheaflap"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// The resolved config line every command echoes.
fn echoed(out: &Output) -> serde_json::Value {
    let text = stdout(out);
    let line = text.lines().find_map(|l| l.strip_prefix("config ")).expect("config echoed");
    serde_json::from_str(line).unwrap()
}

fn small_dataset(dir: &Path) {
    let out = run(
        dir,
        &["gen-synth", "--alpha", "2", "--nodes", "40", "--edges", "10", "--cardinality", "5", "--seed", "3", "--out", "s.json"],
    );
    assert_eq!(code(&out), 0, "{out:?}");
}

#[test]
fn gen_synth_writes_the_requested_composition() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        &["gen-synth", "--alpha", "7", "--nodes", "500", "--edges", "100", "--seed", "1", "--out", "d.json"],
    );
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("alpha=7"));
    let h = Hypergraph::load(fs::File::open(dir.path().join("d.json")).unwrap()).unwrap();
    let labels = h.labels().unwrap();
    assert_eq!(h.num_nodes(), 500);
    assert_eq!(h.num_hyperedges(), 100);
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 250);
    for e in h.hyperedges() {
        assert_eq!(e.len(), 15);
        assert_eq!(e.iter().filter(|&&v| labels[v] == 0).count(), 7);
    }
}

#[test]
fn gen_synth_rejects_alpha_above_half_cardinality() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["gen-synth", "--alpha", "9", "--out", "d.json"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("d.json").exists());
}

#[test]
fn gen_synth_beta_above_half_reports_alpha() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["gen-synth", "--beta", "8", "--nodes", "100", "--edges", "20", "--out", "d.json"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("alpha=7"));
    let h = Hypergraph::load(fs::File::open(dir.path().join("d.json")).unwrap()).unwrap();
    let labels = h.labels().unwrap();
    assert!(h.hyperedges().iter().all(|e| e.iter().filter(|&&v| labels[v] == 0).count() == 8));
}

#[test]
fn gen_synth_unwritable_output_is_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["gen-synth", "--alpha", "1", "--out", "no/such/dir/d.json"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn verify_default_suite_passes() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["verify", "--trials", "50", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for name in [
        "quadratic_form_identity",
        "spectrum_in_unit_interval",
        "linear_contraction",
        "subgradient_check",
        "trivial_reduction",
    ] {
        assert!(text.lines().any(|l| l.starts_with("PASS ") && l.contains(name)), "{name} missing from {text}");
    }
}

#[test]
fn verify_smoke_run_is_fast() {
    let dir = TempDir::new().unwrap();
    let started = Instant::now();
    let out = run(dir.path(), &["verify", "--trials", "1", "--max-nodes", "3"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(started.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn verify_detects_injected_asymmetry() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["verify", "--trials", "5", "--inject-asymmetry"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).lines().any(|l| l.starts_with("FAIL ")));
}

#[test]
fn train_writes_report_with_test_accuracy() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = run(
        dir.path(),
        &["train", "--data", "s.json", "--variant", "sheaf_gnn", "--d", "2", "--kind", "diag", "--epochs", "5", "--seed", "1", "--out", "r.json"],
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    let acc = report["test_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 5);
}

#[test]
fn train_missing_dataset_is_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["train", "--data", "absent.json"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_bad_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    assert_eq!(code(&run(dir.path(), &["train", "--data", "s.json", "--bogus"])), 2);
    assert_eq!(code(&run(dir.path(), &["train", "--data", "s.json", "--kind", "spiral"])), 2);
    assert_eq!(code(&run(dir.path(), &["train", "--data", "s.json", "--layers", "0"])), 2);
}

#[test]
fn diffuse_trace_has_one_line_per_step() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = run(dir.path(), &["diffuse", "--data", "s.json", "--law", "linear", "--steps", "10"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 11);
    let energies: Vec<f64> = lines
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let (step, energy) = l.split_once(',').unwrap();
            assert_eq!(step.parse::<usize>().unwrap(), k);
            energy.parse().unwrap()
        })
        .collect();
    assert!(energies.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn diffuse_nonlinear_law_runs() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = run(
        dir.path(),
        &["diffuse", "--data", "s.json", "--law", "nonlinear", "--steps", "4", "--mediators", "--out", "n.csv"],
    );
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(fs::read_to_string(dir.path().join("n.csv")).unwrap().lines().count(), 5);
}

/// `L_vv = Σ_{e∋v} (δ_e − 1)/δ_e`, `L_uv = −Σ_{e∋u,v} 1/δ_e`.
fn classical_laplacian(h: &Hypergraph) -> BTreeMap<(usize, usize), f64> {
    let mut l = BTreeMap::new();
    for e in h.hyperedges() {
        let delta = e.len() as f64;
        for &u in e {
            for &v in e {
                let add = if u == v { (delta - 1.0) / delta } else { -1.0 / delta };
                *l.entry((u, v)).or_insert(0.0) += add;
            }
        }
    }
    l
}

#[test]
fn build_lap_trivial_matches_classical_laplacian() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = run(dir.path(), &["build-lap", "--data", "s.json", "--trivial", "--out", "l.txt"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = fs::read_to_string(dir.path().join("l.txt")).unwrap();
    let mut got = BTreeMap::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(parts.len(), 3, "{line}");
        let key = (parts[0].parse::<usize>().unwrap(), parts[1].parse::<usize>().unwrap());
        got.insert(key, parts[2].parse::<f64>().unwrap());
    }
    let h = Hypergraph::load(fs::File::open(dir.path().join("s.json")).unwrap()).unwrap();
    let want = classical_laplacian(&h);
    for (key, &w) in &want {
        let g = got.get(key).copied().unwrap_or(0.0);
        assert!((g - w).abs() <= 1e-12, "{key:?}: {g} vs {w}");
    }
    for (key, &g) in &got {
        assert!(want.contains_key(key) || g == 0.0, "unexpected entry {key:?}");
    }
}

#[test]
fn rerunning_the_echoed_config_reproduces_artifacts() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    small_dataset(p);
    let commands: [(&[&str], &str); 4] = [
        (&["gen-synth", "--alpha", "3", "--nodes", "60", "--edges", "12", "--cardinality", "6", "--seed", "9", "--out", "g.json"], "g.json"),
        (&["train", "--data", "s.json", "--epochs", "4", "--dropout", "0.3", "--seed", "2", "--out", "t.json"], "t.json"),
        (&["diffuse", "--data", "s.json", "--law", "nonlinear", "--steps", "3", "--sheaf-seed", "4", "--out", "f.csv"], "f.csv"),
        (&["build-lap", "--data", "s.json", "--d", "2", "--kind", "general", "--norm-mode", "sheaf", "--out", "b.txt"], "b.txt"),
    ];
    for (args, artifact) in commands {
        let first = run(p, args);
        assert_eq!(code(&first), 0, "{first:?}");
        let bytes = fs::read(p.join(artifact)).unwrap();
        let second = run(p, args);
        assert_eq!(fs::read(p.join(artifact)).unwrap(), bytes, "{artifact} differs between runs");
        assert_eq!(stdout(&first), stdout(&second));

        let resolved = echoed(&first);
        fs::write(p.join("resolved.json"), resolved.to_string()).unwrap();
        fs::remove_file(p.join(artifact)).unwrap();
        let replay = run(p, &[args[0], "--config", "resolved.json"]);
        assert_eq!(code(&replay), 0, "{replay:?}");
        assert_eq!(echoed(&replay), resolved);
        assert_eq!(fs::read(p.join(artifact)).unwrap(), bytes, "{artifact} differs on replay");
    }
}

#[test]
fn flags_override_config_file_values() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(p.join("c.json"), r#"{"alpha": 2, "nodes": 40, "edges": 8, "cardinality": 5, "seed": 5, "out": "c.json.out"}"#).unwrap();
    let from_file = run(p, &["gen-synth", "--config", "c.json"]);
    assert_eq!(code(&from_file), 0, "{from_file:?}");
    let cfg = echoed(&from_file);
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["nodes"], 40);
    assert_eq!(cfg["features"], 10);

    let overridden = run(p, &["gen-synth", "--config", "c.json", "--seed", "7", "--out", "o.json"]);
    assert_eq!(code(&overridden), 0, "{overridden:?}");
    let cfg = echoed(&overridden);
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["alpha"], 2);
    assert_eq!(cfg["out"], "o.json");
    assert_ne!(fs::read(p.join("c.json.out")).unwrap(), fs::read(p.join("o.json")).unwrap());
}

#[test]
fn bad_config_files_are_rejected() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(p.join("unknown.json"), r#"{"alpha": 2, "colour": "red"}"#).unwrap();
    assert_eq!(code(&run(p, &["gen-synth", "--config", "unknown.json"])), 2);
    fs::write(p.join("broken.json"), "{not json").unwrap();
    assert_eq!(code(&run(p, &["gen-synth", "--config", "broken.json"])), 2);
    assert_eq!(code(&run(p, &["gen-synth", "--config", "absent.json"])), 3);
}
