use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 16] = [
    "--num_classes=3",
    "--num_domains=3",
    "--signal_dims=4",
    "--noise_dims=4",
    "--samples_per_class_per_domain=12",
    "--labels_per_class=3",
    "--hidden_dims=[8]",
    "--feature_dim=8",
    "--epochs=2",
    "--labeled_per_domain=4",
    "--unlabeled_per_domain=6",
    "--class_sep=3.0",
    "--domain_shift=4.0",
    "--target_domain=2",
    "--data_seed=1",
    "--mc_samples=3",
];

fn modfeat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modfeat"))
        .current_dir(dir)
        .env_remove("MODFEAT_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(extra);
    modfeat(dir, &args)
}

fn text(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = modfeat(dir.path(), &["gradcheck"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
    let err: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max_rel_error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4);

    let raw = modfeat(dir.path(), &["gradcheck", "--nll", "raw"]);
    assert!(raw.status.success());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(modfeat(dir.path(), &["train", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(modfeat(dir.path(), &["train", "--no_such_key=1"]).status.code(), Some(2));
    assert_eq!(modfeat(dir.path(), &["train", "--mode", "other"]).status.code(), Some(2));
    assert_eq!(modfeat(dir.path(), &["train", "--tau=1.5"]).status.code(), Some(2));
    assert_eq!(modfeat(dir.path(), &["train", "--parallel-seeds", "0"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "[train]\nepochs = 2\nspeed = 3\n").unwrap();
    assert_eq!(modfeat(dir.path(), &["train", "--config", "bad.toml"]).status.code(), Some(2));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn train_writes_resolved_config_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[train]\nseeds = [0, 1]\n[output]\ndir = \"out\"\n").unwrap();
    let out = train_tiny(dir.path(), &["--config", "run.toml", "--dump-sar", "--dump-modulator"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("out");

    let resolved = text(root.join("config.toml"));
    assert!(resolved.contains("epochs = 2"));
    assert!(resolved.contains("seeds = [0, 1]"));
    assert!(resolved.contains("dump_sar = true"));
    // The written file is itself a complete config for the same run.
    let again = modfeat(dir.path(), &["train", "--config", "out/config.toml", "--output.dir=again"]);
    assert!(again.status.success());
    assert_eq!(text(root.join("summary.csv")), text(dir.path().join("again/summary.csv")));

    let summary = text(root.join("summary.csv"));
    assert!(summary.starts_with("metric,mean,std,n_seeds\ntarget_acc,"));
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",2")));
    assert_eq!(text(root.join("seeds.csv")).lines().count(), 3);
    for s in ["seed_0", "seed_1"] {
        for f in ["metrics.csv", "final.ckpt", "best.ckpt", "sar/epoch_001.csv", "modulator/epoch_001.csv"] {
            assert!(root.join(s).join(f).exists(), "{s}/{f}");
        }
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("target_acc") && stdout.contains("modulator_gap"));
}

#[test]
fn baseline_mode_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--mode", "fixmatch-baseline", "--seeds=[3]", "--output.dir=b"]);
    assert!(out.status.success());
    let root = dir.path().join("b");
    assert!(text(root.join("config.toml")).contains("mode = \"fixmatch-baseline\""));
    let metrics = text(root.join("seed_3/metrics.csv"));
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "0", "l_d in baseline: {line}");
        assert_eq!(cols[4], "0", "l_ud in baseline: {line}");
    }
    let seeds = text(root.join("seeds.csv"));
    assert!(seeds.lines().nth(1).unwrap().ends_with(",0"), "{seeds}");
}

#[test]
fn parallel_seeds_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let seq = train_tiny(dir.path(), &["--seeds=[0, 1, 2]", "--output.dir=seq"]);
    let par = train_tiny(dir.path(), &["--seeds=[0, 1, 2]", "--output.dir=par", "--parallel-seeds", "2"]);
    assert!(seq.status.success() && par.status.success());
    assert_eq!(text(dir.path().join("seq/summary.csv")), text(dir.path().join("par/summary.csv")));
    assert_eq!(text(dir.path().join("seq/seeds.csv")), text(dir.path().join("par/seeds.csv")));
    for s in 0..3 {
        let f = format!("seed_{s}/final.ckpt");
        assert_eq!(fs::read(dir.path().join("seq").join(&f)).unwrap(), fs::read(dir.path().join("par").join(&f)).unwrap());
    }
}

#[test]
fn seed_env_is_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train".to_string(), "--output.dir=e".to_string()];
    args.extend(TINY.iter().map(|s| s.to_string()));
    let out = Command::new(env!("CARGO_BIN_EXE_modfeat"))
        .current_dir(dir.path())
        .env("MODFEAT_SEED", "17")
        .env("RUST_LOG", "warn")
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(text(dir.path().join("e/config.toml")).contains("seeds = [17]"));
    assert!(dir.path().join("e/seed_17/final.ckpt").exists());
}

#[test]
fn gen_data_train_on_csv_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let gen: Vec<&str> = ["gen-data", "--out", "data/d.csv"]
        .into_iter()
        .chain(TINY.iter().copied().filter(|a| !a.starts_with("--labels") && !a.starts_with("--epochs")))
        .collect();
    let out = modfeat(dir.path(), &gen);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = text(dir.path().join("data/d.csv"));
    assert!(csv.starts_with("domain_id,class_id,f0,f1,"));
    assert_eq!(csv.lines().count(), 1 + 3 * 3 * 12);

    let out = train_tiny(dir.path(), &["--csv=data/d.csv", "--seeds=[0]", "--output.dir=c"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // No dimension roles for external data, so no modulator gap.
    assert!(!text(dir.path().join("c/summary.csv")).contains("modulator_gap"));

    let metrics = text(dir.path().join("c/seed_0/metrics.csv"));
    let last_acc = metrics.lines().last().unwrap().split(',').nth(8).unwrap().to_string();
    let mut args = vec!["eval", "--checkpoint", "c/seed_0/final.ckpt", "--csv=data/d.csv", "--target_domain=2"];
    args.extend(["--num_classes=3"]);
    let out = modfeat(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&format!("target_acc {last_acc}")), "{stdout} vs {last_acc}");

    // A checkpoint for other data is rejected.
    let out = modfeat(dir.path(), &["eval", "--checkpoint", "c/seed_0/final.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_1_with_abort_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--lr=1e8", "--nll=raw", "--seeds=[0]", "--output.dir=x"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("x/seed_0/abort.ckpt").exists());
    assert!(text(dir.path().join("x/seed_0/abort.txt")).contains("non-finite"));
    assert!(!dir.path().join("x/summary.csv").exists());
}

#[test]
fn default_config_summarizes_five_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = modfeat(dir.path(), &["train", "--epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("runs/latest");
    let summary = text(root.join("summary.csv"));
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",5")), "{summary}");
    let seeds = text(root.join("seeds.csv"));
    assert_eq!(seeds.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["0", "1", "2", "3", "4"]);
}
