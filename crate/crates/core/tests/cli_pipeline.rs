//! The command-line pipeline end to end on the smoke configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use deepctr::checkpoint::Checkpoint;
use deepctr::cli::{run, Cli};
use deepctr::metrics::EvalReport;
use deepctr::pipeline::RunConfig;
use deepctr::Error;

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn deepctr(args: &[&str]) -> deepctr::Result<String> {
    let argv = std::iter::once("deepctr").chain(args.iter().copied());
    run(Cli::try_parse_from(argv).expect("arguments parse"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Smoke run config pointed at `data`, written into `dir`.
fn smoke_config(dir: &Path, data: &Path) -> PathBuf {
    let mut cfg = RunConfig::load(&repo_file("configs/smoke.toml")).unwrap();
    cfg.data.dir = data.to_path_buf();
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {}", path.display(), e))
}

fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn generate_minimal_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        "n_images = 2\nn_impressions = 4\nimage_size = 8\npatch_size = 2\n",
    );
    let out = tmp.path().join("data");
    deepctr(&["generate", "--spec", p(&spec), "--out", p(&out), "--seed", "1"]).unwrap();
    let text = fs::read_to_string(out.join("impressions.tsv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 2);
    assert!(out.join("truth.tsv").exists());
    assert!(out.join("spec.resolved.toml").exists());
}

#[test]
fn generate_is_byte_stable_and_counts_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        "n_images = 30\nn_impressions = 1000\nimage_size = 16\npatch_size = 4\n",
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        deepctr(&["generate", "--spec", p(&spec), "--out", p(out), "--seed", "9"]).unwrap();
    }
    let text = fs::read_to_string(a.join("impressions.tsv")).unwrap();
    assert_eq!(text.lines().count(), 1000);
    for f in ["impressions.tsv", "truth.tsv", "patches.tsv", "images/img00007.ppm"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{}", f);
    }
    let c = tmp.path().join("c");
    deepctr(&["generate", "--spec", p(&spec), "--out", p(&c), "--seed", "10"]).unwrap();
    assert_ne!(read(&a.join("impressions.tsv")), read(&c.join("impressions.tsv")));
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    let spec = repo_file("configs/smoke_spec.toml");
    deepctr(&["generate", "--spec", p(&spec), "--out", p(&data), "--seed", "1"]).unwrap();
    let cfg = smoke_config(t, &data);
    let c = p(&cfg);

    deepctr(&["pretrain", "--config", c, "--out", p(&t.join("pre"))]).unwrap();
    let pre = t.join("pre/pretrain.ckpt");
    assert!(t.join("pre/pretrain_log.tsv").exists());

    deepctr(&["train", "--config", c, "--out", p(&t.join("lr")), "--model", "lr"]).unwrap();
    deepctr(&[
        "train",
        "--config",
        c,
        "--out",
        p(&t.join("basic")),
        "--model",
        "dnn-basic",
    ])
    .unwrap();
    deepctr(&["train", "--config", c, "--out", p(&t.join("deep")), "--init", p(&pre)]).unwrap();
    for run in ["basic", "deep"] {
        for f in ["model.ckpt", "last.ckpt", "train_log.tsv", "config.resolved.toml"] {
            assert!(t.join(run).join(f).exists(), "{}/{}", run, f);
        }
    }
    let log = fs::read_to_string(t.join("deep/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4, "evaluations at 50, 100, 150 and 200");

    let lr_ck = t.join("lr/model.ckpt");
    deepctr(&[
        "eval",
        "--config",
        c,
        "--out",
        p(&t.join("e_lr")),
        "--checkpoint",
        p(&lr_ck),
    ])
    .unwrap();
    let base = t.join("e_lr/report.json");
    deepctr(&[
        "eval",
        "--config",
        c,
        "--out",
        p(&t.join("e_self")),
        "--checkpoint",
        p(&lr_ck),
        "--baseline",
        p(&base),
    ])
    .unwrap();
    let same = EvalReport::from_json(&fs::read_to_string(t.join("e_self/report.json")).unwrap()).unwrap();
    assert_eq!(same.relative_auc_pct, Some(0.0));
    assert_eq!(same.relative_logloss_pct, Some(0.0));

    let deep_ck = t.join("deep/model.ckpt");
    let basic_ck = t.join("basic/model.ckpt");
    deepctr(&[
        "eval",
        "--config",
        c,
        "--out",
        p(&t.join("e_ens")),
        "--checkpoint",
        p(&deep_ck),
        "--checkpoint",
        p(&basic_ck),
        "--split",
        "cold",
        "--baseline",
        p(&base),
    ])
    .unwrap();
    let ens = EvalReport::from_json(&fs::read_to_string(t.join("e_ens/report.json")).unwrap()).unwrap();
    assert!(ens.relative_auc_pct.is_some() && ens.n_pos + ens.n_neg > 0);

    deepctr(&[
        "saliency",
        "--config",
        c,
        "--out",
        p(&t.join("sal")),
        "--checkpoint",
        p(&deep_ck),
        "--image-id",
        "img00001",
        "--image-id",
        "img00002",
    ])
    .unwrap();
    let heat = fs::read(t.join("sal/heatmaps/img00001.pgm")).unwrap();
    assert!(heat.starts_with(b"P5"));
    let sal: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.join("sal/saliency.json")).unwrap()).unwrap();
    assert_eq!(sal.as_array().unwrap().len(), 2);
    assert!(sal[0]["patch_concentration"].as_f64().is_some());

    deepctr(&["bench", "--config", c, "--out", p(&t.join("bench"))]).unwrap();
    let bench: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.join("bench/bench.json")).unwrap()).unwrap();
    assert!(bench["sparse_dense"]["speedup"].as_f64().unwrap() > 0.0);

    for dir in ["pre", "lr", "basic", "deep", "e_lr", "e_ens", "sal", "bench"] {
        let resolved = fs::read_to_string(t.join(dir).join("config.resolved.toml")).unwrap();
        RunConfig::from_toml(&resolved).unwrap();
    }

    // reruns reproduce every primary output byte for byte
    deepctr(&["pretrain", "--config", c, "--out", p(&t.join("pre2"))]).unwrap();
    assert_eq!(read(&pre), read(&t.join("pre2/pretrain.ckpt")));
    deepctr(&["train", "--config", c, "--out", p(&t.join("deep2")), "--init", p(&pre)]).unwrap();
    for f in ["model.ckpt", "last.ckpt", "train_log.tsv"] {
        assert_eq!(read(&t.join("deep").join(f)), read(&t.join("deep2").join(f)), "{}", f);
    }
    deepctr(&[
        "eval",
        "--config",
        c,
        "--out",
        p(&t.join("e_lr2")),
        "--checkpoint",
        p(&lr_ck),
    ])
    .unwrap();
    assert_eq!(read(&base), read(&t.join("e_lr2/report.json")));
    deepctr(&[
        "saliency",
        "--config",
        c,
        "--out",
        p(&t.join("sal2")),
        "--checkpoint",
        p(&deep_ck),
        "--image-id",
        "img00001",
        "--image-id",
        "img00002",
    ])
    .unwrap();
    assert_eq!(read(&t.join("sal/saliency.json")), read(&t.join("sal2/saliency.json")));
    assert_eq!(heat, read(&t.join("sal2/heatmaps/img00001.pgm")));

    // a different seed changes the model
    deepctr(&[
        "train",
        "--config",
        c,
        "--out",
        p(&t.join("deep3")),
        "--init",
        p(&pre),
        "--seed",
        "4",
    ])
    .unwrap();
    assert_ne!(read(&t.join("deep/last.ckpt")), read(&t.join("deep3/last.ckpt")));

    // no iterations: the saved model is the initialisation
    deepctr(&[
        "train",
        "--config",
        c,
        "--out",
        p(&t.join("zero")),
        "--init",
        p(&pre),
        "--max-iters",
        "0",
    ])
    .unwrap();
    let zero = Checkpoint::load(&t.join("zero/model.ckpt")).unwrap();
    let init = Checkpoint::load(&pre).unwrap();
    assert_eq!(zero.iteration, 0);
    let mut conv = 0;
    for (name, tensor) in init.tensors.iter().filter(|(n, _)| n.starts_with("conv.")) {
        assert_eq!(zero.tensor(name), Some(tensor), "{}", name);
        conv += 1;
    }
    assert!(conv > 0);
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let bad = t.join("bad.toml");
    fs::write(&bad, "[optim]\nbase_lr = 0.1\nmomentun = 0.9\n").unwrap();
    let e = deepctr(&["train", "--config", p(&bad), "--out", p(&t.join("o"))]).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{:?}", e);
    let msg = e.to_string();
    assert!(
        msg.contains("line 3") && msg.contains("momentun") && !msg.contains('\n'),
        "{}",
        msg
    );

    fs::write(&bad, "[optim]\nmomentum = 1.5\n").unwrap();
    assert!(matches!(
        deepctr(&["train", "--config", p(&bad), "--out", p(&t.join("o"))]),
        Err(Error::Config(_))
    ));

    let missing = t.join("missing.toml");
    assert!(deepctr(&["pretrain", "--config", p(&missing), "--out", p(&t.join("o"))]).is_err());

    let empty = t.join("nodata.toml");
    fs::write(&empty, format!("[data]\ndir = \"{}\"\n", p(&t.join("nowhere")))).unwrap();
    assert!(deepctr(&["train", "--config", p(&empty), "--out", p(&t.join("o"))]).is_err());

    // the binary turns errors into a nonzero exit and a single stderr line
    let out = Process::new(env!("CARGO_BIN_EXE_deepctr"))
        .args([
            "eval",
            "--out",
            p(&t.join("o")),
            "--checkpoint",
            p(&t.join("nope.ckpt")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{}", err);
    assert!(err.starts_with("error: "), "{}", err);

    let out = Process::new(env!("CARGO_BIN_EXE_deepctr"))
        .args(["train", "--config", p(&bad), "--out", p(&t.join("o"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}
