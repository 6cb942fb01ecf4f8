use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[model]
n_layers = 1
n_heads = 2
d_model = 16
vocab_size = 6
max_len = 16
[data]
seq_len = 16
n_train = 64
n_heldout = 8
[train]
steps = 4
batch = 4
checkpoint_every = 2
[[stages]]
block_size = 4
[[stages]]
block_size = 16
gamma = 0.5
[eval]
n_samples = 4
nelbo_mc = 1
[ablate]
n_samples = 2
seeds = [0, 1]
scopes = [4, 16]
gammas = [0.0, 0.5]
"#;

fn sbd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbd"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn train(dir: &Path, out: &str) -> std::path::PathBuf {
    let cfg = write_config(dir, TINY);
    let out = dir.join(out);
    ok(&sbd(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]));
    out
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a");
    let b = train(dir.path(), "b");
    for f in ["model.ckpt", "model_step2.ckpt", "loss.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let resolved = std::fs::read_to_string(a.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));
}

#[test]
fn sample_eval_ablate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run");
    let cfg = dir.path().join("run.toml");
    let cfg = cfg.to_str().unwrap();
    let ckpt = run.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = run.to_str().unwrap();

    ok(&sbd(&[
        "sample", "--config", cfg, "--out", out, "--ckpt", ckpt,
    ]));
    let text = std::fs::read_to_string(run.join("samples.txt")).unwrap();
    assert_eq!(text.lines().count(), 4);
    let first = std::fs::read(run.join("samples.ids")).unwrap();
    ok(&sbd(&[
        "sample", "--config", cfg, "--out", out, "--ckpt", ckpt,
    ]));
    assert_eq!(first, std::fs::read(run.join("samples.ids")).unwrap());
    let metrics = std::fs::read_to_string(run.join("sample_metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);

    let ids = run.join("samples.ids");
    ok(&sbd(&[
        "eval",
        "--config",
        cfg,
        "--out",
        out,
        "--ckpt",
        ckpt,
        "--samples",
        ids.to_str().unwrap(),
    ]));
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(eval.lines().count() >= 2, "{eval}");

    ok(&sbd(&[
        "ablate",
        "--config",
        cfg,
        "--out",
        out,
        "--axis",
        "revision-scope",
        "--ckpt",
        ckpt,
    ]));
    let grid = std::fs::read_to_string(run.join("ablate_revision-scope.csv")).unwrap();
    // Header plus 2 scopes x 2 gammas x 2 seeds.
    assert_eq!(grid.lines().count(), 1 + 8, "{grid}");
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TINY.replace("block_size = 4", "block_size = 5");
    let cfg = write_config(dir.path(), &bad);
    let out = sbd(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let unknown = TINY.replace("[train]\n", "[train]\nlearning_rate = 1.0\n");
    let cfg = write_config(dir.path(), &unknown);
    let out = sbd(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn empty_samples_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run");
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let cfg = dir.path().join("run.toml");
    let out = sbd(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--ckpt",
        run.join("model.ckpt").to_str().unwrap(),
        "--samples",
        empty.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn oracle_check_and_negative_control() {
    let out = sbd(&["oracle-check"]);
    ok(&out);
    let out = sbd(&["oracle-check", "--mutate-mask"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
