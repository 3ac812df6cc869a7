use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0]

[data.synthetic]
num_channels = 6
d_emb = 4
k = 2
num_windows = 600

[model]
d = 8
heads = 2
layers = 1

[pretrain]
steps = 30
batch_size = 8
eval_every = 10
val_examples = 16

[finetune]
steps = 20
eval_every = 10
probe_steps = 20

[baseline]
steps = 20
eval_every = 10
hidden = 8
layers = 2

[sweep]
decoder = "linear"
sizes = [1, 6]

[interpret]
n_samples = 4
"#;

fn popt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let out = dir.join("runs");
    std::fs::write(&path, format!("output_dir = {:?}\n{body}", out.display().to_string())).unwrap();
    path
}

fn run_dirs(stdout: &[u8]) -> Vec<PathBuf> {
    String::from_utf8_lossy(stdout).lines().map(PathBuf::from).collect()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repeated_pretrain_is_byte_identical_and_versioned() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let a = popt(&["pretrain", "-c", c]);
    let b = popt(&["pretrain", "-c", c]);
    ok(&a);
    ok(&b);
    let (da, db) = (&run_dirs(&a.stdout)[0], &run_dirs(&b.stdout)[0]);
    assert_ne!(da, db);
    assert!(db.to_string_lossy().ends_with("-seed0-v2"), "{}", db.display());
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(da, "metrics.csv"), read(db, "metrics.csv"));
    assert_eq!(read(da, "checkpoint.ptck"), read(db, "checkpoint.ptck"));
    assert_eq!(read(da, "config.sha256"), read(db, "config.sha256"));
    let resolved = String::from_utf8(read(da, "config.toml")).unwrap();
    assert!(resolved.contains("[pretrain]") && resolved.contains("steps = 30"));
}

#[test]
fn finetune_without_checkpoint_trains_from_random_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = popt(&["finetune", "-c", cfg.to_str().unwrap()]);
    ok(&out);
    let dir = &run_dirs(&out.stdout)[0];
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["roc_auc"].as_f64().is_some());
    let inv: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("invocation.json")).unwrap()).unwrap();
    assert_eq!(inv["args"], "\ncheckpoint=");
    assert!(dir.join("model.ptck").exists());
}

#[test]
fn full_pipeline_on_generated_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let gen = popt(&["gen-synthetic", "-c", c]);
    ok(&gen);
    let data_dir = &run_dirs(&gen.stdout)[0];
    for f in ["store.popt", "layout.csv", "labels.csv", "manifest.json", "coupling.csv"] {
        assert!(data_dir.join(f).exists(), "{f}");
    }
    // Same subject through its manifest.
    let body = SMALL.replace(
        "[data.synthetic]\nnum_channels = 6\nd_emb = 4\nk = 2\nnum_windows = 600\n",
        &format!("[data]\nmanifest = {:?}\n", data_dir.join("manifest.json").display().to_string()),
    );
    let mcfg = tmp.path().join("manifest.toml");
    std::fs::write(&mcfg, format!("output_dir = {:?}\n{body}", tmp.path().join("m").display().to_string())).unwrap();
    let m = mcfg.to_str().unwrap();
    let pre = popt(&["pretrain", "-c", m]);
    ok(&pre);
    let ckpt = run_dirs(&pre.stdout)[0].join("checkpoint.ptck");
    let ck = ckpt.to_str().unwrap();
    let ft = popt(&["finetune", "-c", m, "--checkpoint", ck]);
    ok(&ft);
    let model = run_dirs(&ft.stdout)[0].join("model.ptck");
    for args in [
        vec!["probe", "-c", m, "--checkpoint", ck],
        vec!["baseline", "-c", m, "--kind", "deep-nn"],
        vec!["sweep", "-c", m, "--jobs", "2"],
        vec!["influence", "-c", m, "--checkpoint", ck],
        vec!["attention", "-c", m, "--checkpoint", model.to_str().unwrap()],
    ] {
        ok(&popt(&args));
    }
    let rep = popt(&["report", tmp.path().join("m").to_str().unwrap()]);
    ok(&rep);
    let summary = std::fs::read_to_string(tmp.path().join("m").join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("probe-")));
    assert!(summary.lines().any(|l| l.starts_with("sweep-")));
    let infl = std::fs::read_to_string(glob_one(&tmp.path().join("m"), "influence-").join("influence.csv")).unwrap();
    assert_eq!(infl.lines().count(), 7);
}

fn glob_one(dir: &Path, prefix: &str) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .unwrap()
}

#[test]
fn report_matches_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "roc_auc,balanced_accuracy,val_roc_auc,n_train,n_val,n_test,best_step,steps_to_convergence,seed";
    for (seed, auc, bacc) in [(0, 0.7, 0.6), (1, 0.8, 0.65), (2, 0.9, 0.7)] {
        let d = tmp.path().join(format!("finetune-deadbeef-seed{seed}"));
        std::fs::create_dir(&d).unwrap();
        std::fs::write(d.join("report.csv"), format!("{header}\n{auc},{bacc},0.5,10,10,10,0,0,{seed}\n")).unwrap();
    }
    ok(&popt(&["report", tmp.path().to_str().unwrap()]));
    let text = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let row = |metric: &str| -> (usize, f64, f64) {
        let l = text.lines().find(|l| l.contains(metric)).unwrap();
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[0], "finetune-deadbeef");
        (f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap())
    };
    // mean 0.8; sample sd 0.1; se 0.1 / sqrt(3).
    let (n, mean, se) = row("roc_auc");
    assert_eq!(n, 3);
    assert!((mean - 0.8).abs() < 1e-12);
    assert!((se - 0.1 / 3f64.sqrt()).abs() < 1e-12);
    let (_, mean, se) = row("balanced_accuracy");
    assert!((mean - 0.65).abs() < 1e-12);
    assert!((se - 0.05 / 3f64.sqrt()).abs() < 1e-12);
}

#[test]
fn failures_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();

    let bad = write_config(tmp.path(), &format!("{SMALL}\n[extra]\nkey = 1\n"));
    assert_eq!(code(popt(&["pretrain", "-c", bad.to_str().unwrap()])), 2);

    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(popt(&["pretrain", "-c", missing.to_str().unwrap()])), 3);

    let cfg = write_config(tmp.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let no_ckpt = tmp.path().join("none.ptck");
    assert_eq!(code(popt(&["influence", "-c", c, "--checkpoint", no_ckpt.to_str().unwrap()])), 3);

    let diverging = write_config(tmp.path(), &SMALL.replace("eval_every = 10\nval_examples", "lr = 1e36\neval_every = 1\nval_examples"));
    let out = popt(&["pretrain", "-c", diverging.to_str().unwrap()]);
    assert_eq!(code(out), 4);
}
