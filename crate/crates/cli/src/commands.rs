//! Subcommand implementations. Each returns the process exit code.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use klda::data::{cache_dir, make_rotated_blobs};
use klda::model::Checkpoint;
use klda::objective::sha256_hex;
use klda::theory::{verify_sweep, SweepConfig};
use klda::{DiscreteScenario, Error};
use md5::{Digest, Md5};
use serde::Serialize;

use crate::config::{parse_override, resolve, RunConfig};
use crate::scenario::{mean_std, median, run_seed, SeedSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_DATA: i32 = 4;

/// Everything a subcommand needs from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunSpec {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub overrides: Vec<String>,
    pub angles: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Contract(_) | Error::InvalidBound { .. } => EXIT_CONFIG,
        Error::Format { .. } | Error::Io(_) => EXIT_DATA,
        Error::NumericalOverflow { .. } => EXIT_DIVERGED,
        _ => EXIT_VERIFY_FAILED,
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    library_version: &'a str,
    config_hash: String,
    config: &'a C,
    seeds: &'a [u64],
    overrides: &'a [String],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    batch_sizes: &'a [usize],
}

fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, config: &C, spec: &RunSpec, seeds: &[u64]) -> std::io::Result<()> {
    let json = serde_json::to_vec(config).map_err(std::io::Error::other)?;
    let manifest = Manifest {
        command,
        library_version: env!("CARGO_PKG_VERSION"),
        config_hash: sha256_hex(&json),
        config,
        seeds,
        overrides: &spec.overrides,
        batch_sizes: &spec.batch_sizes,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn prepare_out(out: &Path) -> Result<(), i32> {
    std::fs::create_dir_all(out).map_err(|e| {
        eprintln!("error: cannot create output directory {}: {e}", out.display());
        EXIT_CONFIG
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_csv(rows: &[SeedSummary]) -> String {
    let mut s = String::from("seed,tgt_test_acc,src_val_acc,best_epoch,best_tgt_test_acc,heldout_rev_kl,heldout_fwd_kl,diverged\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.tgt_test_acc,
            r.src_val_acc,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            fmt_opt(r.best_tgt_test_acc),
            r.heldout_rev_kl,
            r.heldout_fwd_kl,
            r.diverged
        )
        .expect("string write");
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.tgt_test_acc).collect();
    let (mean, std) = mean_std(&accs);
    writeln!(s, "mean,{mean},,,,,,").expect("string write");
    writeln!(s, "std,{std},,,,,,").expect("string write");
    s
}

/// Trains every seed of `rc` into `dir/seed-<s>/`. Returns the summaries or
/// an exit code after reporting the problem.
fn train_seeds(rc: &RunConfig, seeds: &[u64], dir: &Path) -> Result<Vec<SeedSummary>, i32> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = run_seed(rc, seed).map_err(|e| {
            eprintln!("error (seed {seed}): {e}");
            exit_code_for(&e)
        })?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        let written = (|| -> klda::Result<PathBuf> {
            std::fs::create_dir_all(&seed_dir)?;
            run.report.write_json(&seed_dir.join("report.json"))?;
            run.report.write_csv(&seed_dir.join("epochs.csv"))?;
            let ckpt = seed_dir.join("checkpoint.json");
            Checkpoint::from_params(&run.params, &run.report.config_hash).save(&ckpt)?;
            // kept apart from the report so reruns stay byte-identical
            write_json(&seed_dir.join("timing.json"), &serde_json::json!({ "wall_clock_secs": run.report.wall_clock_secs }))?;
            Ok(ckpt)
        })();
        let ckpt = written.map_err(|e| {
            eprintln!("error: writing outputs for seed {seed}: {e}");
            EXIT_DATA
        })?;
        if let Some(d) = &run.report.divergence {
            eprintln!(
                "error: training diverged (seed {seed}, epoch {}, step {}): {}; last finite parameters saved to {}",
                d.epoch,
                d.step,
                d.message,
                ckpt.display()
            );
            return Err(EXIT_DIVERGED);
        }
        println!(
            "{} seed {seed}: target acc {:.4}, source val acc {:.4}, held-out reverse KL {:.4}",
            rc.method.name(),
            run.summary.tgt_test_acc,
            run.summary.src_val_acc,
            run.summary.heldout_rev_kl
        );
        rows.push(run.summary);
    }
    Ok(rows)
}

fn resolve_or_exit(spec: &RunSpec) -> Result<RunConfig, i32> {
    resolve(spec.config.as_deref(), &spec.overrides).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

fn seeds_or_default(spec: &RunSpec) -> Vec<u64> {
    if spec.seeds.is_empty() {
        vec![0]
    } else {
        spec.seeds.clone()
    }
}

pub fn cmd_train(spec: &RunSpec) -> i32 {
    let rc = match resolve_or_exit(spec) {
        Ok(rc) => rc,
        Err(code) => return code,
    };
    let seeds = seeds_or_default(spec);
    if let Err(code) = prepare_out(&spec.out) {
        return code;
    }
    if let Err(e) = write_manifest(&spec.out, "train", &rc, spec, &seeds) {
        eprintln!("error: writing manifest: {e}");
        return EXIT_CONFIG;
    }
    let rows = match train_seeds(&rc, &seeds, &spec.out) {
        Ok(r) => r,
        Err(code) => return code,
    };
    if let Err(e) = std::fs::write(spec.out.join("summary.csv"), summary_csv(&rows)) {
        eprintln!("error: writing summary: {e}");
        return EXIT_DATA;
    }
    let (mean, std) = mean_std(&rows.iter().map(|r| r.tgt_test_acc).collect::<Vec<_>>());
    println!("{}: target accuracy {mean:.4} ± {std:.4} over {} seed(s)", rc.method.name(), rows.len());
    EXIT_OK
}

/// Batch sizes in descending order, duplicates dropped with a warning.
pub fn normalize_batch_sizes(sizes: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(sizes.len());
    for &b in sizes {
        if out.contains(&b) {
            eprintln!("warning: duplicate batch size {b} ignored");
        } else {
            out.push(b);
        }
    }
    out.sort_unstable_by(|a, b| b.cmp(a));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub batch_size: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub median_acc: f64,
    pub accs: Vec<f64>,
}

pub fn cmd_ablate_batch(spec: &RunSpec) -> i32 {
    let rc = match resolve_or_exit(spec) {
        Ok(rc) => rc,
        Err(code) => return code,
    };
    let sizes = normalize_batch_sizes(if spec.batch_sizes.is_empty() { &[256, 128, 64, 32] } else { &spec.batch_sizes });
    if let Some(&bad) = sizes.iter().find(|&&b| b < 2) {
        eprintln!("error: invalid configuration `batch_sizes`: every batch size must be at least 2, got {bad}");
        return EXIT_CONFIG;
    }
    let seeds = seeds_or_default(spec);
    if let Err(code) = prepare_out(&spec.out) {
        return code;
    }
    let spec = RunSpec { batch_sizes: sizes.clone(), ..spec.clone() };
    if let Err(e) = write_manifest(&spec.out, "ablate-batch", &rc, &spec, &seeds) {
        eprintln!("error: writing manifest: {e}");
        return EXIT_CONFIG;
    }
    let mut table = Vec::with_capacity(sizes.len());
    for &b in &sizes {
        let mut rcb = rc.clone();
        rcb.train.batch_size = b;
        let rows = match train_seeds(&rcb, &seeds, &spec.out.join(format!("b{b}"))) {
            Ok(r) => r,
            Err(code) => return code,
        };
        let accs: Vec<f64> = rows.iter().map(|r| r.tgt_test_acc).collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        table.push(AblationRow { batch_size: b, mean_acc, std_acc, median_acc: median(&accs), accs });
    }
    let mut long = String::from("batch_size,mean_acc,std_acc,median_acc,seeds\n");
    for r in &table {
        writeln!(long, "{},{},{},{},{}", r.batch_size, r.mean_acc, r.std_acc, r.median_acc, r.accs.len()).expect("string write");
    }
    let mut wide = String::from("batch_size");
    for r in &table {
        write!(wide, ",{}", r.batch_size).expect("string write");
    }
    wide.push_str("\naccuracy");
    for r in &table {
        write!(wide, ",{:.2} ± {:.2}", 100.0 * r.mean_acc, 100.0 * r.std_acc).expect("string write");
    }
    wide.push('\n');
    let written = std::fs::write(spec.out.join("summary.csv"), long).and_then(|_| std::fs::write(spec.out.join("table.csv"), &wide));
    if let Err(e) = written {
        eprintln!("error: writing ablation table: {e}");
        return EXIT_DATA;
    }
    print!("{wide}");
    EXIT_OK
}

fn sweep_config(spec: &RunSpec) -> Result<(SweepConfig, Vec<DiscreteScenario>), String> {
    let mut cfg = SweepConfig { seed: spec.seeds.first().copied().unwrap_or(0), ..SweepConfig::default() };
    let mut extra = Vec::new();
    for o in &spec.overrides {
        let (k, v) = parse_override(o).map_err(|e| e.to_string())?;
        let count = || v.as_integer().filter(|i| *i >= 0).map(|i| i as usize).ok_or(format!("`{k}` must be a non-negative integer"));
        match k.as_str() {
            "pairs" => cfg.pairs = count()?,
            "scenarios" => cfg.scenarios = count()?,
            "prop2_scenarios" => cfg.prop2_scenarios = count()?,
            "max_size" => cfg.max_size = count()?,
            "max_pair_size" => cfg.max_pair_size = count()?,
            "m" => cfg.m = v.as_float().or(v.as_integer().map(|i| i as f64)).ok_or("`m` must be a number")?,
            "inject" => {
                let path = v.as_str().ok_or("`inject` must be a path")?;
                let text = std::fs::read_to_string(path).map_err(|e| format!("`inject`: cannot read {path}: {e}"))?;
                let parsed: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("`inject`: {e}"))?;
                let list = if parsed.is_array() { parsed } else { serde_json::Value::Array(vec![parsed]) };
                let scenarios: Vec<DiscreteScenario> = serde_json::from_value(list).map_err(|e| format!("`inject`: {e}"))?;
                extra.extend(scenarios);
            }
            other => return Err(format!("invalid configuration `{other}`: unknown verify option")),
        }
    }
    Ok((cfg, extra))
}

pub fn cmd_verify(spec: &RunSpec) -> i32 {
    let (cfg, extra) = match sweep_config(spec) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    if let Err(code) = prepare_out(&spec.out) {
        return code;
    }
    let report = match verify_sweep(&cfg, &extra) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let written = write_manifest(&spec.out, "verify", &cfg, spec, &[cfg.seed]).and_then(|_| write_json(&spec.out.join("report.json"), &report));
    if let Err(e) = written {
        eprintln!("error: writing report: {e}");
        return EXIT_DATA;
    }
    for f in &report.families {
        println!("{:<10} {}/{} passed, worst slack {:.3e}", f.name, f.passed, f.cases, f.worst_slack);
    }
    if !report.preconditions.is_empty() {
        println!("{} scenario(s) rejected on preconditions", report.preconditions.len());
    }
    if report.all_passed {
        EXIT_OK
    } else {
        eprintln!("verification failed; failing scenarios are embedded in {}", spec.out.join("report.json").display());
        EXIT_VERIFY_FAILED
    }
}

/// File name for a blobs domain, e.g. `blobs-45.csv`.
pub fn blobs_file_name(angle: f64) -> String {
    format!("blobs-{angle}.csv")
}

pub fn cmd_gen_data(spec: &RunSpec) -> i32 {
    let rc = match resolve_or_exit(spec) {
        Ok(rc) => rc,
        Err(code) => return code,
    };
    let angles = if spec.angles.is_empty() { vec![rc.source_angle, rc.target_angle] } else { spec.angles.clone() };
    let seeds = seeds_or_default(spec);
    let seed = seeds[0];
    if let Err(code) = prepare_out(&spec.out) {
        return code;
    }
    if let Err(e) = write_manifest(&spec.out, "gen-data", &rc, spec, &[seed]) {
        eprintln!("error: writing manifest: {e}");
        return EXIT_CONFIG;
    }
    for angle in angles {
        let path = spec.out.join(blobs_file_name(angle));
        let result = make_rotated_blobs::<f64>(rc.n_per_class, rc.classes, rc.radius, rc.spread, angle, seed).and_then(|d| d.write_csv(&path));
        if let Err(e) = result {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
        println!("wrote {}", path.display());
    }
    EXIT_OK
}

pub const MNIST_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// `(file, md5)` of the four MNIST archives.
pub const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
];

pub fn md5_hex(bytes: &[u8]) -> String {
    let digest = Md5::digest(bytes);
    let mut s = String::with_capacity(32);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("string write");
    }
    s
}

/// Reads `name` from an HTTP(S) base URL, a `file://` URL, or a local
/// directory.
fn fetch(mirror: &str, name: &str) -> Result<Vec<u8>, String> {
    if mirror.starts_with("http://") || mirror.starts_with("https://") {
        let url = format!("{}/{}", mirror.trim_end_matches('/'), name);
        let resp = ureq::get(&url).call().map_err(|e| format!("{url}: {e}"))?;
        let mut buf = Vec::new();
        resp.into_body().into_reader().read_to_end(&mut buf).map_err(|e| format!("{url}: {e}"))?;
        Ok(buf)
    } else {
        let dir = mirror.strip_prefix("file://").unwrap_or(mirror);
        let path = Path::new(dir).join(name);
        std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
    }
}

pub fn cmd_fetch_mnist(spec: &RunSpec) -> i32 {
    let mut mirror = MNIST_MIRROR.to_string();
    let mut files: Vec<(String, String)> = MNIST_FILES.iter().map(|(f, m)| (f.to_string(), m.to_string())).collect();
    for o in &spec.overrides {
        match parse_override(o) {
            Ok((k, v)) if k == "mirror" => mirror = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()),
            Ok((k, v)) if k == "only" => {
                let want = v.as_str().unwrap_or_default().to_string();
                files.retain(|(f, _)| f.starts_with(&want));
            }
            Ok((k, _)) => {
                eprintln!("error: invalid configuration `{k}`: fetch-mnist accepts `mirror` and `only`");
                return EXIT_CONFIG;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    let dest = if spec.out.as_os_str().is_empty() { cache_dir() } else { spec.out.clone() };
    if let Err(code) = prepare_out(&dest) {
        return code;
    }
    for (name, want) in &files {
        let path = dest.join(name);
        if std::fs::read(&path).map(|b| md5_hex(&b) == *want).unwrap_or(false) {
            println!("{} already present", path.display());
            continue;
        }
        let bytes = match fetch(&mirror, name) {
            Ok(b) => b,
            Err(msg) => {
                eprintln!("error: download failed: {msg}");
                return EXIT_DATA;
            }
        };
        if let Err(e) = std::fs::write(&path, &bytes) {
            eprintln!("error: writing {}: {e}", path.display());
            return EXIT_DATA;
        }
        let got = md5_hex(&bytes);
        if got != *want {
            let _ = std::fs::remove_file(&path);
            eprintln!("error: checksum mismatch for {name}: expected md5 {want}, got {got}; file removed");
            return EXIT_DATA;
        }
        println!("fetched {} (md5 ok)", path.display());
    }
    EXIT_OK
}
