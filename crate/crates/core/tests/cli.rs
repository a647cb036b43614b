use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use otrcl::data::io::{read_matrix, write_matrix};

fn otrcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otrcl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_reports_exact_corruption_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| {
        otrcl(&["gen", "--n", "2000", "--n-val", "50", "--n-test", "50", "--k", "10", "--noise", "0.4", "--seed", "7", "--out", p(out)])
    };
    let text = stdout(&args(&a));
    assert!(text.contains("800 corrupted labels"), "{text}");
    stdout(&args(&b));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5, "{names:?}");
    for name in names {
        if name == "dataset.toml" {
            continue;
        }
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn invalid_noise_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = otrcl(&["gen", "--noise", "1.0", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

const SMALL: &str = r#"
seed = 4

[data.synthetic]
n = 200
n_val = 50
n_test = 50
k = 4
d_v = 8
d_t = 8
noise_ratio = 0.4

[train]
epochs = 3
batch_size = 50
hidden = 16
embed_dim = 8
"#;

#[test]
fn train_ablation_eval_and_correct() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let (full, ablated) = (dir.path().join("full"), dir.path().join("bhg"));
    stdout(&otrcl(&["train", "--config", p(&config), "--out", p(&full)]));
    let text = stdout(&otrcl(&["train", "--config", p(&config), "--ablate", "bhg", "--out", p(&ablated)]));
    assert!(text.contains("AblateBhg"), "{text}");
    let logged = fs::read_to_string(ablated.join("config.toml")).unwrap();
    assert!(logged.contains("lambda = 0.0"), "{logged}");
    assert!(logged.contains("mode = \"ablate-bhg\""), "{logged}");
    for f in ["config.toml", "metrics.json", "epochs.csv", "model.ckpt", "dataset/dataset.toml"] {
        assert!(full.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(full.join("epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let manifest = full.join("dataset/dataset.toml");
    let table = stdout(&otrcl(&["eval", "--data", p(&manifest), p(&full.join("model.ckpt")), p(&ablated.join("model.ckpt"))]));
    assert!(table.contains("[2]-[1]") && table.contains("test map_mean"), "{table}");

    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(full.join("metrics.json")).unwrap()).unwrap();
    let single = stdout(&otrcl(&["eval", "--data", p(&manifest), p(&full.join("model.ckpt"))]));
    let val = metrics["val_map_i2t"].as_f64().unwrap();
    assert!(single.contains(&format!("{val:.6}")), "{single}");

    let corrected = dir.path().join("corrected");
    let text = stdout(&otrcl(&[
        "correct", "--checkpoint", p(&full.join("model.ckpt")), "--data", p(&manifest), "--mass", "0.5", "--out", p(&corrected),
    ]));
    assert!(text.contains("assigned to"), "{text}");
    let soft = read_matrix(&corrected.join("soft_labels.otrf")).unwrap();
    assert_eq!(soft.dim(), (200, 4));
    assert!((soft.sum() / 200.0 - 0.5).abs() < 1e-4);
    assert_eq!(fs::read_to_string(corrected.join("corrected_labels.txt")).unwrap().lines().count(), 200);
}

#[test]
fn missing_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = otrcl(&["eval", "--data", p(&dir.path().join("nope.toml")), p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
    let o = otrcl(&["solve", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solve_prints_plan_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.otrf");
    write_matrix(&one, &ndarray::array![[3.0]]).unwrap();
    let text = stdout(&otrcl(&["solve", p(&one)]));
    assert!(text.starts_with("1.000000\n"), "{text}");

    let cost = dir.path().join("cost.otrf");
    let plan = dir.path().join("plan.otrf");
    let c = ndarray::array![[0.9, 0.1, 0.8, 0.7], [0.2, 0.9, 0.6, 0.8], [0.7, 0.8, 0.1, 0.9], [0.8, 0.6, 0.9, 0.0]];
    write_matrix(&cost, &c).unwrap();
    let text = stdout(&otrcl(&["solve", p(&cost), "--epsilon", "0.01", "--oracle", "--out", p(&plan)]));
    assert!(text.contains("oracle permutation 1 0 2 3 objective 0.1"), "{text}");
    let plan = read_matrix(&plan).unwrap();
    for (i, j) in [(0, 1), (1, 0), (2, 2), (3, 3)] {
        assert!(plan[[i, j]] > 0.24, "{plan}");
    }
}
