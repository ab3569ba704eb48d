use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
log_level = "warn"

[model]
d = 16
stride = 4
input_size = 16
n_recursions = 3
side_tokens = 2
n_heads = 2

[train]
batch_size = 2
n_chunks = 3
lr_start = 0.002
lr_end = 0.0002
weight_decay = 0.0

[data]
synthetic_count = 6
heldout_count = 2

[data.synthetic]
size = 24
min_cells = 2
max_cells = 2
min_radius = 3.0
max_radius = 4.0

[adapt]
window = 3
max_steps = 8

[postprocess]
min_cell_area = 5
steps = 50
"#;

fn ucell(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucell"))
        .args(args)
        .current_dir(cwd)
        .env_remove("UCELL_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("tiny.toml"), TINY).unwrap();
    Fixture { _dir: dir, root }
}

impl Fixture {
    fn run(&self, args: &[&str]) -> Output {
        ucell(args, &self.root)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn train(&self, out: &str, steps: &str) {
        ok(&self.run(&["train", "--config", &self.s("tiny.toml"), "--steps", steps, "--out", &self.s(out)]));
    }
}

/// Tag balance of a simple XML document without comments or CDATA.
fn well_formed(xml: &str) -> bool {
    let body = match xml.strip_prefix("<?xml") {
        Some(rest) => match rest.find("?>") {
            Some(i) => &rest[i + 2..],
            None => return false,
        },
        None => xml,
    };
    let mut stack: Vec<String> = Vec::new();
    let mut rest = body;
    let mut roots = 0;
    while let Some(start) = rest.find('<') {
        let Some(end) = rest[start..].find('>') else { return false };
        let tag = &rest[start + 1..start + end];
        rest = &rest[start + end + 1..];
        if let Some(name) = tag.strip_prefix('/') {
            if stack.pop().as_deref() != Some(name.trim()) {
                return false;
            }
        } else if !tag.ends_with('/') {
            if stack.is_empty() {
                roots += 1;
            }
            stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
        } else if stack.is_empty() {
            roots += 1;
        }
    }
    stack.is_empty() && roots == 1
}

#[test]
fn missing_config_is_a_usage_error() {
    let f = fixture();
    let out = f.run(&["train", "--config", "nope.toml", "--out", &f.s("o")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn invalid_settings_exit_two() {
    let f = fixture();
    let out = f.run(&["train", "--config", &f.s("tiny.toml"), "--chunks", "9", "--out", &f.s("o")]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = f.run(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_is_seeded() {
    let f = fixture();
    for run in ["a", "b"] {
        ok(&f.run(&["train", "--config", &f.s("tiny.toml"), "--steps", "6", "--seed", "7", "--out", &f.s(run)]));
        assert!(f.path(run).join("final.ckpt").exists());
        assert!(f.path(run).join("run_config.toml").exists());
    }
    let a = fs::read_to_string(f.path("a/metrics.csv")).unwrap();
    let b = fs::read_to_string(f.path("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 7);
}

#[test]
fn infer_writes_labels_intercepts_and_tiles() {
    let f = fixture();
    f.train("run", "2");
    ok(&f.run(&["synth", "--config", &f.s("tiny.toml"), "--count", "1", "--size", "40", "--out", &f.s("data")]));
    let ckpt = f.s("run/final.ckpt");
    ok(&f.run(&["infer", "--checkpoint", &ckpt, "--input", &f.s("data/syn000.png"), "--out", &f.s("pred")]));
    let labels: Vec<_> = fs::read_dir(f.path("pred")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(labels.len(), 1);
    // 40 px input on a 16 px model: tiled, stitched back to full size
    let img = image::open(f.path("pred/syn000_label.png")).unwrap();
    assert_eq!((img.width(), img.height()), (40, 40));

    ok(&f.run(&[
        "infer", "--checkpoint", &ckpt, "--input", &f.s("data"), "--intercept", "1,2,3", "--dump-fields", "--out", &f.s("pred2"),
    ]));
    for k in 1..=3 {
        assert!(f.path(&format!("pred2/syn000_iter{k}_label.png")).exists());
        assert!(f.path(&format!("pred2/syn000_iter{k}_field.tif")).exists());
    }
    let out = f.run(&["infer", "--checkpoint", &ckpt, "--input", &f.s("data"), "--intercept", "4", "--out", &f.s("pred3")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let f = fixture();
    ok(&f.run(&["synth", "--config", &f.s("tiny.toml"), "--count", "3", "--out", &f.s("gt")]));
    ok(&f.run(&["eval", "--pred-dir", &f.s("gt"), "--gt-dir", &f.s("gt"), "--out", &f.s("ev"), "--report", "r.csv"]));
    let report = fs::read_to_string(f.path("ev/r.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("image,precision,recall,f1,dice,n_pred,n_gt"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[3], "1", "{row}");
        assert_eq!(cols[4], "1", "{row}");
    }
}

#[test]
fn adapt_writes_one_json_per_trial() {
    let f = fixture();
    f.train("base", "2");
    let out = f.run(&[
        "adapt", "--config", &f.s("tiny.toml"), "--base", &f.s("base/final.ckpt"), "--shots", "4", "--trials", "5", "--out", &f.s("ad"),
    ]);
    ok(&out);
    for k in 0..5 {
        let text = fs::read_to_string(f.path(&format!("ad/trial_{k}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["shots"], 4);
        assert_eq!(v["mode"], "lora");
        assert_eq!(v["shot_ids"].as_array().unwrap().len(), 4);
        assert!(v["after"]["f1"].as_f64().unwrap() >= 0.0);
    }
    let summary = fs::read_to_string(f.path("ad/adapt_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    let bad = f.run(&["adapt", "--config", &f.s("tiny.toml"), "--base", &f.s("base/final.ckpt"), "--targets", "gate", "--out", &f.s("ad2")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gate"));
}

#[test]
fn sweep_compares_chunk_counts() {
    let f = fixture();
    ok(&f.run(&["sweep", "--config", &f.s("tiny.toml"), "--chunks", "1,2,3", "--steps", "3", "--plot", "--out", &f.s("sw")]));
    let csv = fs::read_to_string(f.path("sw/sweep.csv")).unwrap();
    let chunks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(chunks, ["1", "2", "3"]);
    assert!(well_formed(&fs::read_to_string(f.path("sw/sweep.svg")).unwrap()));
}

#[test]
fn inspect_untrained_checkpoint() {
    let f = fixture();
    f.train("init", "0");
    ok(&f.run(&[
        "inspect", "--config", &f.s("tiny.toml"), "--checkpoint", &f.s("init/final.ckpt"), "--plot", "--curve", "1,2,3", "--dump-fields", "3",
        "--out", &f.s("in"),
    ]));
    let csv = fs::read_to_string(f.path("in/entropy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        for v in r.split(',').skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!(v.is_finite() && v > 0.0);
        }
    }
    for svg in ["entropy.svg", "curve.svg"] {
        assert!(well_formed(&fs::read_to_string(f.path("in").join(svg)).unwrap()), "{svg}");
    }
    assert_eq!(fs::read_to_string(f.path("in/curve.csv")).unwrap().lines().count(), 4);
    assert!(f.path("in/field_iter3.tif").exists());
}

#[test]
fn outputs_stay_in_the_output_root() {
    let f = fixture();
    let cwd = f.path("cwd");
    fs::create_dir_all(&cwd).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ucell"))
        .args(["train", "--config", &f.s("tiny.toml"), "--steps", "1"])
        .current_dir(&cwd)
        .env("UCELL_OUTPUT_ROOT", f.path("root"))
        .output()
        .unwrap();
    ok(&out);
    assert!(f.path("root/final.ckpt").exists());
    assert_eq!(fs::read_dir(&cwd).unwrap().count(), 0);
    let mut top: Vec<String> = fs::read_dir(&f.root).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    assert_eq!(top, ["cwd", "root", "tiny.toml"]);
}

#[test]
fn svg_checker_rejects_broken_markup() {
    assert!(well_formed("<?xml version=\"1.0\"?><svg><g><rect/></g></svg>"));
    assert!(!well_formed("<svg><g></svg>"));
}
