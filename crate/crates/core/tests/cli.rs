use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mchom::config::RunConfig;

const CHANNELS: &str = r#"
seed = 11

[medium]
kind = "channels"
kappa_low = 1.0
kappa_high = 1e4
channels = 2
channel_width = 0.03125

[grid]
n_fine = 32
h_eps = 0.125
h_coarse = 0.25
k_layers = 2

[macro]
bc = "dirichlet"
"#;

const CONSTANT: &str = r#"
[medium]
kind = "constant"
kappa_low = 1.0
kappa_high = 1.0

[grid]
n_fine = 16
h_eps = 0.25
h_coarse = 0.5
k_layers = 1

[macro]
bc = "dirichlet"
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn mchom(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mchom"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env_remove("MCHOM_CACHE_DIR")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> usize {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

fn manifests(root: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "manifest.toml") {
                let text = fs::read_to_string(&p).unwrap();
                out.push((p, text));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CHANNELS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&mchom(&["generate"], &cfg, &a));
    ok(&mchom(&["generate"], &cfg, &b));
    for name in ["field.bin", "field.csv", "medium.toml"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let field = mchom::field::CoefficientField::load(&a.join("field.bin")).unwrap();
    assert_eq!(field.grid().n_per_side(), 32);
    assert_eq!(field.contrast(), 1e4);
}

#[test]
fn pipeline_writes_report_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CHANNELS);
    let out = dir.path().join("out");
    ok(&mchom(&["pipeline"], &cfg, &out));
    let report = out.join("report.csv");
    let rows = csv_rows(&report);
    assert_eq!(rows.len(), 1);
    let id: f64 = rows[0][column(&report, "identity_discrepancy")].parse().unwrap();
    let mean: f64 = rows[0][column(&report, "mean_preservation")].parse().unwrap();
    assert!(id <= 1e-11, "identity discrepancy {id}");
    assert!(mean <= 1e-7, "mean preservation {mean}");
    let resolved = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(resolved, RunConfig::from_toml(CHANNELS).unwrap().tap_out(&out));
    assert_eq!(&rows[0][column(&report, "config_hash")], resolved.hash().unwrap());
}

trait TapOut {
    fn tap_out(self, out: &Path) -> Self;
}

impl TapOut for RunConfig {
    fn tap_out(mut self, out: &Path) -> Self {
        self.output.out = Some(out.to_path_buf());
        self
    }
}

#[test]
fn second_run_reuses_cached_cell_solutions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CHANNELS);
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    let c = cache.to_str().unwrap();
    ok(&mchom(&["tensors", "--cache", c], &cfg, &out));
    let first = manifests(&cache);
    assert!(!first.is_empty());
    let alpha = fs::read(out.join("tensors/shift0/alpha.csv")).unwrap();
    ok(&mchom(&["tensors", "--cache", c], &cfg, &out));
    assert_eq!(manifests(&cache), first);
    assert_eq!(fs::read(out.join("tensors/shift0/alpha.csv")).unwrap(), alpha);
}

#[test]
fn cache_directory_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CHANNELS);
    let cache = dir.path().join("env-cache");
    let o = Command::new(env!("CARGO_BIN_EXE_mchom"))
        .args(["basis", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .env("MCHOM_CACHE_DIR", &cache)
        .output()
        .unwrap();
    ok(&o);
    assert!(!manifests(&cache).is_empty());
}

#[test]
fn study_sweep_reports_rows_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let base = CHANNELS.replace("k_layers = 2\n", "");
    let text = format!("{base}\n[study]\nid = \"heps\"\nh_eps = [0.25, 0.125, 0.0625]\n");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    ok(&mchom(&["study"], &cfg, &out));
    let study = out.join("study.csv");
    let rows = csv_rows(&study);
    assert_eq!(rows.len(), 3);
    let fail = column(&study, "failure");
    assert!(rows.iter().all(|r| r[fail].is_empty()));
    let summary = out.join("study_summary.csv");
    let srow = csv_rows(&summary)
        .into_iter()
        .find(|r| &r[column(&summary, "metric")] == "nlmc_energy_error")
        .unwrap();
    assert_eq!(&srow[column(&summary, "statistic")], "slope");
    let v: f64 = srow[column(&summary, "value")].parse().unwrap();
    assert!(v.is_finite());
}

#[test]
fn contrast_sweep_reports_a_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CHANNELS}\n[study]\ncontrast = [1e2, 1e4]\n");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    ok(&mchom(&["study"], &cfg, &out));
    let summary = out.join("study_summary.csv");
    let stat = column(&summary, "statistic");
    assert!(csv_rows(&summary).iter().any(|r| &r[stat] == "ratio"));
}

#[test]
fn verify_passes_on_constant_medium() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONSTANT);
    let out = dir.path().join("out");
    let o = mchom(&["verify"], &cfg, &out);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("PASS shift0-symmetry"), "{stdout}");
    assert!(stdout.contains("PASS fine-dense-oracle"), "{stdout}");
    assert!(stdout.contains("PASS kkt-dense-oracle"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert!(out.join("verify.csv").exists());
}

#[test]
fn verify_flags_a_corrupted_tensor_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CHANNELS);
    let out = dir.path().join("out");
    ok(&mchom(&["tensors"], &cfg, &out));
    let tdir = out.join("tensors/shift0");
    ok(&mchom(&["verify", "--tensors", tdir.to_str().unwrap()], &cfg, &dir.path().join("v1")));

    let path = tdir.join("alpha.csv");
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let header = rdr.headers().unwrap().clone();
    let mut rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let target = rows
        .iter()
        .position(|r| (&r[3], &r[4], &r[5], &r[6]) == ("0", "0", "0", "1"))
        .unwrap();
    let bumped: f64 = rows[target][7].parse::<f64>().unwrap() + 1.0;
    let mut rec: Vec<String> = rows[target].iter().map(String::from).collect();
    rec[7] = bumped.to_string();
    rows[target] = csv::StringRecord::from(rec);
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(&header).unwrap();
    for r in &rows {
        w.write_record(r).unwrap();
    }
    w.flush().unwrap();

    let o = mchom(&["verify", "--tensors", tdir.to_str().unwrap()], &cfg, &dir.path().join("v2"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL file-symmetry"));
}

#[test]
fn invalid_configuration_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CHANNELS.replace("h_coarse = 0.25", "h_coarse = 0.3"));
    let o = mchom(&["generate"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("h_coarse"));
}
