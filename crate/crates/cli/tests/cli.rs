use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[io]
eval_interval = 2
[env]
levels = [[8, 8]]
calibration_episodes = 10
[perm]
n = 2
[ppo]
n_actors = 2
steps = [10]
batch = [10]
epochs = 2
hidden = [16, 16]
[train]
iterations = 4
[analysis]
n_samples = 40
n_actors = 4
[cluster]
n_samples = 6
k = 6
time_intervals = 4
"#;

fn mlppo(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mlppo"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .env_remove("MLPPO_SEED")
        .env_remove("MLPPO_OUT")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(rel)).unwrap()
}

#[test]
fn sample_perm_is_reproducible_and_allows_zero() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&mlppo(a.path(), SMALL, &["sample-perm", "--seed", "7"]));
    ok(&mlppo(b.path(), SMALL, &["sample-perm", "--seed", "7"]));
    assert_eq!(read(a.path(), "perms/perm_00001.csv"), read(b.path(), "perms/perm_00001.csv"));
    assert_eq!(read(a.path(), "perms/manifest.csv"), read(b.path(), "perms/manifest.csv"));

    let empty = SMALL.replace("n = 2", "n = 0");
    ok(&mlppo(a.path(), &empty, &["sample-perm"]));
    assert_eq!(read(a.path(), "perms/manifest.csv").trim(), "id,file,min,max,mean");
}

#[test]
fn kriged_fields_hold_conditioning_value_at_wells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("levels = [[8, 8]]", "reservoir = \"kriged\"\nlevels = [[10, 30]]");
    ok(&mlppo(dir.path(), &cfg, &["sample-perm"]));
    let field = mlppo::fvsim::io::load_field(&dir.path().join("out/perms/perm_00000.csv")).unwrap();
    let env = mlppo::env::EnvConfig::kriged_benchmark(10, 30, 620.0, 1860.0).unwrap();
    for &(x, y) in env.layout.injectors.iter().chain(&env.layout.producers) {
        let v = field.values[field.grid.cell_containing(x, y).unwrap()];
        assert!((v - 2.41f64.exp()).abs() < 1e-9 * v, "{v}");
    }
}

#[test]
fn cluster_with_k_equal_n_keeps_everything_and_repeats() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&mlppo(a.path(), SMALL, &["cluster"]));
    ok(&mlppo(b.path(), SMALL, &["cluster"]));
    let m = read(a.path(), "cluster/representatives/manifest.csv");
    assert_eq!(m, read(b.path(), "cluster/representatives/manifest.csv"));
    let mut ids: Vec<usize> = m.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    ids.sort();
    assert_eq!(ids, (0..6).collect::<Vec<_>>());
    assert_eq!(read(a.path(), "cluster/coords.csv"), read(b.path(), "cluster/coords.csv"));
}

#[test]
fn train_writes_curve_and_resumes_without_gap() {
    let dir = tempfile::tempdir().unwrap();
    ok(&mlppo(dir.path(), SMALL, &["train"]));
    let ckpt = dir.path().join("out/checkpoint.json");
    assert!(ckpt.exists() && dir.path().join("out/checkpoints/iter_000004.json").exists());
    ok(&mlppo(dir.path(), SMALL, &["train", "--resume", ckpt.to_str().unwrap()]));
    let curve = read(dir.path(), "curve.csv");
    let iters: Vec<usize> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (1..=8).collect::<Vec<_>>());
    let meta: serde_json::Value = serde_json::from_str(&read(dir.path(), "metadata-train.json")).unwrap();
    assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn multilevel_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("levels = [[8, 8]]", "levels = [[8, 8], [16, 16]]").replace("steps = [10]", "steps = [10, 5]").replace(
        "batch = [10]",
        "batch = [10, 5]",
    );
    let text = ok(&mlppo(dir.path(), &cfg, &["train"]));
    assert!(text.contains("iteration     4"));
}

#[test]
fn configuration_errors_exit_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let no_levels = SMALL.replace("levels = [[8, 8]]", "levels = []");
    let out = mlppo(dir.path(), &no_levels, &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out/curve.csv").exists());

    let unknown = format!("{SMALL}\n[extra]\nkey = 1\n");
    assert_eq!(mlppo(dir.path(), &unknown, &["train"]).status.code(), Some(2));
    let typo = SMALL.replace("epochs = 2", "epoch = 2");
    assert_eq!(mlppo(dir.path(), &typo, &["train"]).status.code(), Some(2));
    let mismatched = SMALL.replace("steps = [10]", "steps = [10, 5]");
    assert_eq!(mlppo(dir.path(), &mismatched, &["train"]).status.code(), Some(2));
}

#[test]
fn analyze_is_reproducible_and_reports_missing_checkpoint() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let two = SMALL.replace("levels = [[8, 8]]", "levels = [[8, 8], [16, 16]]");
    ok(&mlppo(a.path(), &two, &["analyze"]));
    ok(&mlppo(b.path(), &two, &["analyze"]));
    assert_eq!(read(a.path(), "analysis/epsilons.csv"), read(b.path(), "analysis/epsilons.csv"));
    assert_eq!(read(a.path(), "analysis/epsilons.csv").lines().count(), 4);
    let missing = mlppo(a.path(), &two, &["analyze", "--checkpoint", "/nonexistent/ckpt.json"]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn eval_table_is_stable_and_trained_policy_beats_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL
        .replace("n_actors = 2", "n_actors = 4")
        .replace("steps = [10]", "steps = [20]")
        .replace("batch = [10]", "batch = [40]")
        .replace("epochs = 2", "epochs = 10\nlr = 1e-3")
        .replace("hidden = [16, 16]", "hidden = [32, 32]")
        .replace("iterations = 4", "iterations = 40")
        .replace("eval_interval = 2", "eval_interval = 10");
    ok(&mlppo(dir.path(), &cfg, &["train"]));
    let ckpt = dir.path().join("out/checkpoint.json");
    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap()];
    let first = ok(&mlppo(dir.path(), &cfg, &args));
    let table = read(dir.path(), "eval.csv");
    assert_eq!(first, ok(&mlppo(dir.path(), &cfg, &args)));
    assert_eq!(table, read(dir.path(), "eval.csv"));
    let mean = table.lines().find(|l| l.starts_with("mean,")).unwrap();
    let v: Vec<f64> = mean.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
    assert!(v[0] > v[1], "policy {} vs baseline {}", v[0], v[1]);
}
