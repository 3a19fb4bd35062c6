//! Subcommand behavior: exit codes, outputs, determinism.

use std::path::Path;

use klda::data::make_rotated_blobs;
use klda::theory::random_scenario;
use klda::{Dataset, DatasetMeta};
use klda_cli::commands::{md5_hex, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK};
use rand::SeedableRng;

fn run(args: &[&str]) -> i32 {
    klda_cli::run(std::iter::once("klda").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick() -> Vec<&'static str> {
    vec!["--set", "epochs=5", "--set", "n_per_class=40", "--set", "batch_size=16"]
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = run(&["train", "--config", "/nonexistent/run.toml", "--out", path(&out), "--seed", "1"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn invalid_field_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for bad in ["beta_aux=0.9", "batch_size=1", "lerning_rate=1"] {
        assert_eq!(run(&["train", "--out", path(&out), "--set", bad]), EXIT_CONFIG, "{bad}");
    }
    assert!(!out.exists());
}

#[test]
fn seeded_train_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["train", "--out", path(out), "--seed", "7"];
        args.extend(quick());
        assert_eq!(run(&args), EXIT_OK);
    }
    for f in ["manifest.json", "summary.csv", "seed-7/report.json", "seed-7/epochs.csv", "seed-7/checkpoint.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between reruns");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for key in ["command", "library_version", "config_hash", "config", "seeds"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("mean,")));
    assert!(summary.lines().any(|l| l.starts_with("std,")));
}

#[test]
fn divergence_exits_3_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--out", path(&out), "--seed", "1", "--set", "lr=1e300", "--set", "bounded_loss=false"];
    args.extend(quick());
    assert_eq!(run(&args), EXIT_DIVERGED);
    let ckpt = out.join("seed-1/checkpoint.json");
    let params = klda::Checkpoint::load(&ckpt).unwrap().to_params::<f64>().unwrap();
    assert!(params.params().is_finite());
}

#[test]
fn ablation_deduplicates_batch_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let mut args = vec!["ablate-batch", "--out", path(&out), "--seed", "1", "--batch-sizes", "16,8,16"];
    args.extend(quick());
    assert_eq!(run(&args), EXIT_OK);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let sizes: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sizes, ["16", "8"]);
}

#[test]
fn single_batch_size_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let mut args = vec!["ablate-batch", "--out", path(&out), "--seed", "1", "--batch-sizes", "16"];
    args.extend(quick());
    assert_eq!(run(&args), EXIT_OK);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn verify_routes_injected_precondition_violations() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = random_scenario(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3), 3, 3.0);
    // push one classifier entry below exp(-3)
    let row = &mut s.classifier[0];
    let k = row.len();
    row[0] = 0.01;
    let rest = 0.99 / (k - 1) as f64;
    for v in row.iter_mut().skip(1) {
        *v = rest;
    }
    let inject = dir.path().join("bad.json");
    std::fs::write(&inject, serde_json::to_string(&s).unwrap()).unwrap();
    let out = dir.path().join("verify");
    let inject_arg = format!("inject={}", path(&inject));
    let args = ["verify", "--out", path(&out), "--set", "pairs=200", "--set", "scenarios=50", "--set", "prop2_scenarios=20", "--set", &inject_arg];
    assert_eq!(run(&args), EXIT_OK);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let pre = report["preconditions"].as_array().unwrap();
    assert!(pre.iter().any(|p| p["check"] == "prop1"), "{pre:?}");
    let prop1 = report["families"].as_array().unwrap().iter().find(|f| f["name"] == "prop1").unwrap();
    assert_eq!(prop1["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn verify_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let args = ["verify", "--out", path(out), "--seed", "5", "--set", "pairs=300", "--set", "scenarios=40", "--set", "prop2_scenarios=10"];
        assert_eq!(run(&args), EXIT_OK);
    }
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
}

#[test]
fn gen_data_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["gen-data", "--out", path(out), "--seed", "1", "--angles", "0,45"]), EXIT_OK);
    }
    for f in ["blobs-0.csv", "blobs-45.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rc = klda_cli::config::RunConfig::blobs();
    let meta = DatasetMeta { domain: "blobs".into(), angle_deg: 0.0, seed: 1 };
    let parsed = Dataset::read_csv(&a.join("blobs-0.csv"), rc.classes, meta).unwrap();
    let fresh: Dataset = make_rotated_blobs(rc.n_per_class, rc.classes, rc.radius, rc.spread, 0.0, 1).unwrap();
    assert_eq!(parsed.inputs(), fresh.inputs());
    assert_eq!(parsed.labels(), fresh.labels());
}

#[test]
fn fetch_rejects_a_corrupted_download() {
    let dir = tempfile::tempdir().unwrap();
    let mirror = dir.path().join("mirror");
    std::fs::create_dir_all(&mirror).unwrap();
    std::fs::write(mirror.join("train-labels-idx1-ubyte.gz"), b"not the real file").unwrap();
    let dest = dir.path().join("cache");
    let mirror_arg = format!("mirror={}", path(&mirror));
    let code = run(&["fetch-mnist", "--out", path(&dest), "--set", &mirror_arg, "--set", "only=train-labels"]);
    assert_eq!(code, EXIT_DATA);
    assert!(!dest.join("train-labels-idx1-ubyte.gz").exists());
}

#[test]
fn md5_matches_reference_vectors() {
    assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
    assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            klda_cli::config::resolve(Some(&p), &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
