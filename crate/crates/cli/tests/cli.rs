use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn dxgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dxgen")).args(args).output().expect("spawn dxgen")
}

fn ok(args: &[&str]) -> String {
    let out = dxgen(args);
    assert!(
        out.status.success(),
        "dxgen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = dxgen(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepare(dir: &Path) {
    ok(&["prepare", "--synthesize", "4", "--seed", "5", "--out", s(dir)]);
}

/// A prepared corpus with one trained adapter, shared by the slower tests.
struct Trained {
    _tmp: TempDir,
    data: PathBuf,
    adapter: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        prepare(&data);
        let adapter = tmp.path().join("a.lora");
        ok(&["train", "--data", s(&data), "--out", s(&adapter), "--epochs", "1", "--quiet"]);
        Trained { _tmp: tmp, data, adapter }
    })
}

fn losses(log: &Path) -> Vec<String> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().find(|f| f.starts_with("loss=")).unwrap().to_string())
        .collect()
}

fn header(log: &Path, key: &str) -> String {
    let text = fs::read_to_string(log).unwrap();
    let prefix = format!("# {key} = ");
    text.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap().to_string()
}

#[test]
fn prepare_writes_the_same_bytes_twice() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    prepare(&a);
    prepare(&b);
    for f in ["train.jsonl", "test.jsonl", "vocab.json", "template.txt", "manifest.json", "base.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records_after_dedup"], 12);
    assert_eq!(manifest["train"].as_u64().unwrap() + manifest["test"].as_u64().unwrap(), 12);
}

#[test]
fn training_twice_logs_identical_losses() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let again = tmp.path().join("b.lora");
    ok(&["train", "--data", s(&t.data), "--out", s(&again), "--epochs", "1", "--quiet"]);
    let mut first = t.adapter.clone().into_os_string();
    first.push(".log");
    let mut second = again.clone().into_os_string();
    second.push(".log");
    let (l1, l2) = (losses(Path::new(&first)), losses(Path::new(&second)));
    assert!(!l1.is_empty());
    assert_eq!(l1, l2);
    assert_eq!(fs::read(&t.adapter).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn infer_prints_a_diagnosis() {
    let t = trained();
    let base = t.data.join("base.ckpt");
    for extra in [&[][..], &["--quant"][..]] {
        let mut args = vec![
            "infer", "--model", s(&base), "--adapter", s(&t.adapter), "--modality", "oct",
            "--report", "macular edema with subretinal fluid", "--max-new-tokens", "6",
        ];
        args.extend_from_slice(extra);
        let out = ok(&args);
        assert_eq!(out.lines().count(), 1, "{out:?}");
    }
}

#[test]
fn evaluate_one_model_gives_one_row() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r.md");
    let base = t.data.join("base.ckpt");
    let printed = ok(&[
        "evaluate", "--model", s(&base), "--adapter", s(&t.adapter), "--data", s(&t.data),
        "--out", s(&out), "--limit", "3", "--max-new-tokens", "6",
    ]);
    let table = fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert_eq!(lines[0], "| Model | ROUGE-1 | ROUGE-2 | ROUGE-L |");
    assert!(lines[2].starts_with("| base+a |"));
    for cell in lines[2].trim_matches('|').split('|').skip(1) {
        let v: f64 = cell.trim().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(printed.contains(&table));
    let mut json = out.into_os_string();
    json.push(".json");
    let full: serde_json::Value = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
    assert!(full.is_object() || full.is_array());
}

#[test]
fn bench_prints_a_table() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let json = tmp.path().join("bench.json");
    let out = ok(&[
        "bench", "--model", s(&t.data.join("base.ckpt")), "--data", s(&t.data), "--repeats", "2",
        "--records", "2", "--max-new-tokens", "4", "--out", s(&json),
    ]);
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines[0], "| Stage | Seconds |");
    assert!(lines[2].starts_with("| Fine-tune (wall) |") && lines[2].contains('±'));
    assert!(lines[3].starts_with("| Inference (mean per report) |") && lines[3].contains('±'));
    assert!(json.exists());
}

#[test]
fn sequential_flag_matches_parallel_losses() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("s.lora");
    ok(&["--sequential", "train", "--data", s(&t.data), "--out", s(&seq), "--epochs", "1", "--quiet"]);
    let mut first = t.adapter.clone().into_os_string();
    first.push(".log");
    let log = tmp.path().join("s.lora.log");
    assert_eq!(losses(Path::new(&first)), losses(&log));
}

#[test]
fn flags_override_config_file_over_preset() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "# comment\nlearning_rate = 0.001\nlora_r = 4\n").unwrap();
    let out = tmp.path().join("c.lora");
    ok(&[
        "train", "--data", s(&t.data), "--out", s(&out), "--config", s(&cfg), "--learning-rate", "0.003",
        "--epochs", "1", "--quiet",
    ]);
    let log = tmp.path().join("c.lora.log");
    assert_eq!(header(&log, "learning_rate"), "0.003");
    assert_eq!(header(&log, "lora_r"), "4");
    assert_eq!(header(&log, "grad_accum_steps"), "2");
    assert_eq!(header(&log, "batch_size"), "4");
}

#[test]
fn exit_codes_follow_error_class() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x.lora");
    let data = s(&t.data);

    let (c, err) = code(&["prepare", "--out", s(tmp.path())]);
    assert_eq!(c, 1, "{err}");
    let (c, err) = code(&["train", "--data", data, "--out", s(&out), "--epochs", "0"]);
    assert_eq!(c, 1, "{err}");
    let (c, err) = code(&["infer", "--model", "m", "--modality", "xray", "--report", "r"]);
    assert_eq!(c, 1, "{err}");
    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "learning_rate = fast\n").unwrap();
    let (c, err) = code(&["train", "--data", data, "--out", s(&out), "--config", s(&bad_cfg)]);
    assert_eq!(c, 1, "{err}");
    assert!(err.contains("bad.cfg:1"), "{err}");

    let missing = tmp.path().join("missing.ckpt");
    let (c, err) = code(&["infer", "--model", s(&missing), "--modality", "OCT", "--report", "r"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("missing.ckpt"), "{err}");
    let (c, err) = code(&["train", "--data", s(tmp.path()), "--out", s(&out)]);
    assert_eq!(c, 2, "{err}");

    let (c, err) = code(&["train", "--data", data, "--out", s(&out), "--learning-rate", "1e30", "--quiet"]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("non-finite loss"), "{err}");

    for (c, err) in [code(&["train", "--data", data]), code(&["bogus"])] {
        assert_eq!(c, 1, "{err}");
        assert_eq!(err.lines().count(), 1, "{err}");
    }
    assert_eq!(code(&["--help"]).0, 0);
}
