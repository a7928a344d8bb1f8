use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn opcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn kv(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
        .to_string()
}

/// Small deterministic generator so fixtures need no extra crates.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Two blobs; labels drawn so the softmax confidence is calibrated.
fn blobs(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let mut rng = Lcg(seed);
    let mut text = String::from("id,label,logit_0,logit_1,feat_0,feat_1\n");
    for id in 0..n {
        let side = id % 2;
        let x = side as f64 * 3.0 + rng.next() - 0.5;
        let y = rng.next() - 0.5;
        let margin = 4.0 * (rng.next() - 0.5) + if side == 0 { 1.5 } else { -1.5 };
        let p0 = 1.0 / (1.0 + (-margin).exp());
        let label = usize::from(rng.next() >= p0);
        writeln!(text, "{id},{label},{margin},0,{x},{y}").unwrap();
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_good_input_and_names_bad_rows() {
    let dir = TempDir::new().unwrap();
    let good = blobs(dir.path(), "good.csv", 20, 1);
    let out = opcal(&["validate", "--input", s(&good)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(kv(&stdout(&out), "records"), "20");

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "id,label,logit_0,logit_1,feat_0\n0,0,1,0,0.5\n1,5,1,0,0.5\n").unwrap();
    let out = opcal(&["validate", "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("row 2"), "{}", stderr(&out));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(opcal(&["validate", "--input", s(&empty)]).status.code(), Some(1));
}

#[test]
fn calibrate_writes_trace_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = blobs(dir.path(), "ops.csv", 60, 2);
    let mut runs = Vec::new();
    for tag in ["a", "b"] {
        let out_dir = dir.path().join(tag);
        let out = opcal(&[
            "calibrate", "--input", s(&input), "--output-dir", s(&out_dir),
            "--clusters", "3", "--budget", "3", "--seed", "5",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 3);
        let calibrated = fs::read_to_string(out_dir.join("calibrated.csv")).unwrap();
        for line in calibrated.lines().skip(1) {
            let c: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&c));
        }
        runs.push((trace, calibrated));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn evaluate_scores_perfect_confidences_as_zero() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("ops.csv");
    fs::write(&input, "id,label,logit_0,logit_1,feat_0\n0,0,3,0,0\n1,1,0,3,1\n2,0,2,1,2\n").unwrap();
    let calibrated = dir.path().join("cal.csv");
    fs::write(
        &calibrated,
        "id,predicted_class,original_confidence,calibrated_confidence\n0,0,0.9,1\n1,1,0.9,1\n2,0,0.7,1\n",
    )
    .unwrap();
    let out = opcal(&["evaluate", "--input", s(&input), "--calibrated", s(&calibrated)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(kv(&text, "brier").parse::<f64>().unwrap(), 0.0);
    assert_eq!(kv(&text, "lce").parse::<f64>().unwrap(), 0.0);
    assert!(text.contains("brier,reliability,resolution,uncertainty,lce"));

    let unlabeled = dir.path().join("unlabeled.csv");
    fs::write(&unlabeled, "id,label,logit_0,logit_1,feat_0\n0,-1,3,0,0\n").unwrap();
    assert_eq!(opcal(&["evaluate", "--input", s(&unlabeled)]).status.code(), Some(1));
}

#[test]
fn baseline_fits_and_rejects_unknown_names() {
    let dir = TempDir::new().unwrap();
    let input = blobs(dir.path(), "ops.csv", 4000, 3);

    let out_dir = dir.path().join("ts");
    let out = opcal(&["baseline", "--input", s(&input), "--calibrator", "temperature", "--output-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(kv(&stdout(&out), "changed_predictions"), "0");
    let model = fs::read_to_string(out_dir.join("model.txt")).unwrap();
    let t: f64 = kv(&model, "temperature").parse().unwrap();
    assert!((0.9..=1.1).contains(&t), "temperature {t}");

    let out_dir = dir.path().join("ir");
    let out = opcal(&["baseline", "--input", s(&input), "--calibrator", "isotonic", "--output-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0));
    let mut pairs: Vec<(f64, f64)> = fs::read_to_string(out_dir.join("calibrated.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[2], f[3])
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));

    let out = opcal(&["baseline", "--input", s(&input), "--calibrator", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("platt_logit"));
}

#[test]
fn simulate_sweeps_budgets_deterministically() {
    let dir = TempDir::new().unwrap();
    let input = blobs(dir.path(), "ops.csv", 200, 4);
    let mut sweeps = Vec::new();
    for tag in ["a", "b"] {
        let out_dir = dir.path().join(tag);
        let out = opcal(&[
            "simulate", "--input", s(&input), "--output-dir", s(&out_dir),
            "--clusters", "3", "--budgets", "0,10,100", "--seed", "7",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        sweeps.push(fs::read_to_string(out_dir.join("sweep.csv")).unwrap());
    }
    assert_eq!(sweeps[0], sweeps[1]);
    let lines: Vec<&str> = sweeps[0].lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 5);
    let width = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
    assert!(lines.iter().any(|l| l.starts_with("0,")));
    assert!(lines.iter().any(|l| l.starts_with("100,gpr,")));
}

#[test]
fn flags_override_the_sidecar() {
    let dir = TempDir::new().unwrap();
    let input = blobs(dir.path(), "ops.csv", 40, 5);
    let sidecar = dir.path().join("opcal.toml");
    fs::write(&sidecar, "lambda = 0.8\nbins = 5\n").unwrap();

    let from_file = opcal(&["evaluate", "--input", s(&input), "--config", s(&sidecar)]);
    assert_eq!(kv(&stdout(&from_file), "lambda"), "0.8");
    assert_eq!(kv(&stdout(&from_file), "num_bins"), "5");

    let flagged = opcal(&["evaluate", "--input", s(&input), "--config", s(&sidecar), "--lambda", "0.6"]);
    assert_eq!(kv(&stdout(&flagged), "lambda"), "0.6");
    assert_eq!(kv(&stdout(&flagged), "num_bins"), "5");
}
