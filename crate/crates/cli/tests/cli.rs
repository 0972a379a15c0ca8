use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbdc::checkpoint::Checkpoint;
use dbdc::data::DatasetManifest;
use dbdc::mlpb::read_embedding_table;

const TINY: &str = r#"
[synth]
train_per_modality = 8
val_per_modality = 2
test_per_modality = 2
image_size = 32
labeled_ratio = 0.25

[network]
base_width = 4
depth = 2
embed_dim = 8

[train]
epochs = 1
lr = 1e-3
crop_size = 16
batch_labeled = 2
batch_unlabeled = 2

[eval]
window = 32
stride = 16
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("tiny.toml");
        let data = format!("dataset={}", self.path("data").display());
        let out = format!("output={}", self.path("run").display());
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dbdc"));
        cmd.args(&args[..1])
            .arg("--config")
            .arg(&cfg)
            .args(["--set", &data, "--set", &out])
            .args(&args[1..])
            .env_remove("DBDC_OUT");
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn gen_data_writes_valid_dataset_and_refuses_overwrite() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data", "--set", "synth.K=2"]);
    let m = DatasetManifest::load(&sb.path("data")).unwrap();
    assert_eq!(m.num_modalities, 2);
    assert_eq!(m.samples.len(), 2 * (8 + 2 + 2));

    let again = sb.run(&["gen-data"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    sb.ok(&["gen-data", "--set", "synth.K=3", "--force"]);
    assert_eq!(DatasetManifest::load(&sb.path("data")).unwrap().num_modalities, 3);
}

#[test]
fn bad_inputs_exit_nonzero_with_a_reason() {
    let sb = Sandbox::new();
    let o = sb.run(&["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains(&sb.path("data").display().to_string()));

    let o = sb.run(&["gen-data", "--set", "synth.bogus=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth.bogus"));

    sb.ok(&["gen-data"]);
    let o = sb.run(&["eval", "--checkpoint", "nowhere", "--split", "holdout"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("holdout"));
}

#[test]
fn one_epoch_run_logs_and_evaluates() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data", "--seed", "3"]);
    sb.ok(&["train", "--seed", "3"]);
    let run = sb.path("run");
    for f in ["run_config.toml", "config.json", "losses.csv", "maw.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = csv(&run.join("metrics.csv"));
    assert_eq!(metrics.len(), 2);

    let best = run.join("checkpoints/best");
    let eval_csv = sb.path("eval.csv");
    let best_str = best.display().to_string();
    let eval_str = eval_csv.display().to_string();
    sb.ok(&["eval", "--checkpoint", &best_str, "--split", "val", "--out", &eval_str]);
    let rows = csv(&eval_csv);
    for m in &metrics {
        let logged: f64 = m[2].parse().unwrap();
        let row = rows
            .iter()
            .find(|r| r[0] == m[1] && r[1] == "mean" && r[2] == "fg")
            .unwrap();
        let fresh: f64 = row[3].parse().unwrap();
        assert!((logged - fresh).abs() < 1e-6, "{logged} vs {fresh}");
    }
    let saved = Checkpoint::load(&best).unwrap().val_dsc.unwrap();
    let mean: f64 = metrics.iter().map(|m| m[2].parse::<f64>().unwrap()).sum::<f64>() / 2.0;
    assert!((saved - mean).abs() < 1e-6);

    // rerun into the same directory needs --force
    assert!(!sb.run(&["train"]).status.success());
}

#[test]
fn ablation_flag_changes_only_its_own_columns() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data"]);
    let step0 = |extra: &[&str], name: &str| {
        let out = format!("output={}", sb.path(name).display());
        let mut args = vec!["train", "--set", &out, "--set", "loss.lambda_max=1.0"];
        args.extend_from_slice(extra);
        sb.ok(&args);
        csv(&sb.path(name).join("losses.csv"))
            .into_iter()
            .filter(|r| r[0] == "0")
            .map(|r| ((r[1].clone(), r[2].clone()), r[3].parse::<f64>().unwrap()))
            .collect::<Vec<_>>()
    };
    let on = step0(&[], "on");
    let off = step0(&["--set", "loss.l_pd=off"], "off");
    assert_eq!(on.len(), off.len());
    let aggregates = ["sup/mpcl", "sup", "ipc/mpcl", "fpc/mpcl", "ipc", "fpc", "dc", "modal"];
    let mut changed = 0;
    for ((key, a), (key2, b)) in on.iter().zip(&off) {
        assert_eq!(key, key2);
        let term = key.1.as_str();
        if term.ends_with("/pd") {
            assert_eq!(*b, 0.0, "{term}");
            assert!(*a > 0.0, "{term}");
            changed += 1;
        } else if !aggregates.contains(&term) {
            assert_eq!(a, b, "{term}");
        }
    }
    assert_eq!(changed, 2 * 3);
}

#[test]
fn overfit_run_scores_train_at_least_val_and_exports_embeddings() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data", "--set", "synth.val_per_modality=4"]);
    sb.ok(&["train", "--set", "train.epochs=15", "--set", "loss.lambda_max=0", "--set", "train.crop_size=0"]);
    let best = sb.path("run/checkpoints/best").display().to_string();
    let mean = |split: &str| {
        let out = sb.path(&format!("{split}.csv")).display().to_string();
        sb.ok(&["eval", "--checkpoint", &best, "--split", split, "--out", &out]);
        let rows = csv(Path::new(&out));
        rows.last().unwrap()[3].parse::<f64>().unwrap()
    };
    let (train, val) = (mean("train"), mean("val"));
    assert!(train >= val, "train {train} < val {val}");

    let a = sb.path("a.bin").display().to_string();
    let b = sb.path("b.bin").display().to_string();
    sb.ok(&["export-embeddings", "--checkpoint", &best, "--pixels", "500", "--out", &a]);
    sb.ok(&["export-embeddings", "--checkpoint", &best, "--pixels", "500", "--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let rows = read_embedding_table(Path::new(&a), 8).unwrap();
    assert_eq!(rows.len(), 500);
    assert!(rows.iter().all(|r| r.modality < 2 && r.class < 3));
    assert!(!sb.run(&["export-embeddings", "--checkpoint", &best, "--pixels", "500", "--out", &a]).status.success());
}
