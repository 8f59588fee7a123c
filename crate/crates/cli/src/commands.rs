use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::info;

use modfeat::data::{generate_synthetic, load_csv, write_csv, DomainDataset};
use modfeat::metrics::{aggregate, modulator_gap, RunSummary, SeedRun};
use modfeat::network::read_checkpoint;
use modfeat::objective::gradcheck_miniature;
use modfeat::trainer::{evaluate, load_artifacts, read_metrics, train as train_seed};
use modfeat::Error;

use crate::config::{self, RunConfig, SEED_ENV};

/// Invalid input exits with 2, anything that fails while running with 1.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Run(e) => e,
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn run_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Run(e.into())
}

/// Library errors caused by the request itself count as configuration errors.
fn core_err(e: Error) -> Failure {
    match e {
        Error::Parameter(_) | Error::Split(_) | Error::Schema(_) | Error::SeparationInfeasible { .. } => {
            config_err(e)
        }
        other => run_err(other),
    }
}

fn resolve(path: Option<&Path>, overrides: &[String]) -> Outcome<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    config::resolve(path, overrides, env.as_deref()).map_err(config_err)
}

fn load_dataset(cfg: &RunConfig) -> Outcome<DomainDataset> {
    match &cfg.data.csv {
        Some(p) => load_csv(p)
            .with_context(|| format!("loading {}", p.display()))
            .map_err(config_err),
        None => generate_synthetic(&cfg.synthetic()).map_err(core_err),
    }
}

pub struct TrainRequest {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub dump_sar: bool,
    pub dump_modulator: bool,
    pub parallel_seeds: Option<usize>,
}

pub fn train(req: TrainRequest) -> Outcome {
    let mut overrides = req.overrides;
    if req.dump_sar {
        overrides.push("output.dump_sar=true".into());
    }
    if req.dump_modulator {
        overrides.push("output.dump_modulator=true".into());
    }
    let cfg = resolve(req.config.as_deref(), &overrides)?;
    if req.parallel_seeds == Some(0) {
        return Err(config_err(anyhow!("--parallel-seeds must be at least 1")));
    }
    let dataset = load_dataset(&cfg)?;

    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(run_err)?;
    let resolved = dir.join("config.toml");
    fs::write(&resolved, cfg.to_toml())
        .with_context(|| format!("writing {}", resolved.display()))
        .map_err(run_err)?;

    let start = Instant::now();
    let runs = match req.parallel_seeds {
        Some(n) if n > 1 => run_parallel(&cfg, &dataset, &resolved, n)?,
        _ => cfg
            .seeds()
            .iter()
            .map(|&s| train_one(&cfg, &dataset, s, &seed_dir(dir, s)))
            .collect::<Outcome<Vec<_>>>()?,
    };
    info!("{} seed(s) finished in {:.1}s", runs.len(), start.elapsed().as_secs_f64());

    let summary = aggregate(&runs).map_err(run_err)?;
    summary.write_csv(dir.join("summary.csv")).map_err(run_err)?;
    write_seed_table(&dir.join("seeds.csv"), &runs).map_err(run_err)?;
    print!("{}", summary_table(&summary));
    Ok(())
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn train_one(cfg: &RunConfig, dataset: &DomainDataset, seed: u64, dir: &Path) -> Outcome<SeedRun> {
    info!("seed {seed} -> {}", dir.display());
    let tc = cfg.train_config(seed).map_err(config_err)?;
    let result = train_seed(dataset, &cfg.split_plan(seed), &tc, &cfg.outputs(dir.to_path_buf())).map_err(core_err)?;
    let gap = dataset
        .roles
        .as_ref()
        .map(|r| modulator_gap(result.model.modulation(), Some(r)))
        .transpose()
        .map_err(run_err)?;
    Ok(SeedRun {
        seed,
        reports: result.reports,
        modulator_gap: gap,
    })
}

/// Seeds in batches of `n` child processes; results are read back from
/// each seed directory.
fn run_parallel(cfg: &RunConfig, dataset: &DomainDataset, resolved: &Path, n: usize) -> Outcome<Vec<SeedRun>> {
    let exe = std::env::current_exe().context("locating executable").map_err(run_err)?;
    let mut runs = Vec::new();
    for chunk in cfg.seeds().chunks(n) {
        let children: Vec<(u64, Child)> = chunk
            .iter()
            .map(|&seed| {
                let child = Command::new(&exe)
                    .arg("run-seed")
                    .arg("--config")
                    .arg(resolved)
                    .arg("--seed")
                    .arg(seed.to_string())
                    .arg("--dir")
                    .arg(seed_dir(&cfg.output.dir, seed))
                    .spawn()
                    .with_context(|| format!("starting seed {seed}"))
                    .map_err(run_err)?;
                Ok((seed, child))
            })
            .collect::<Outcome<_>>()?;
        let mut failed = None;
        for (seed, mut child) in children {
            let status = child.wait().map_err(run_err)?;
            if !status.success() && failed.is_none() {
                failed = Some(anyhow!("seed {seed} exited with {status}"));
            }
        }
        if let Some(e) = failed {
            return Err(run_err(e));
        }
        for &seed in chunk {
            runs.push(read_seed(dataset, seed, &seed_dir(&cfg.output.dir, seed))?);
        }
    }
    Ok(runs)
}

fn read_seed(dataset: &DomainDataset, seed: u64, dir: &Path) -> Outcome<SeedRun> {
    let reports = read_metrics(dir.join("metrics.csv")).map_err(run_err)?;
    let ck = read_checkpoint(dir.join("final.ckpt")).map_err(run_err)?;
    let (model, _, _) = load_artifacts(&ck).map_err(run_err)?;
    let gap = dataset
        .roles
        .as_ref()
        .map(|r| modulator_gap(model.modulation(), Some(r)))
        .transpose()
        .map_err(run_err)?;
    Ok(SeedRun {
        seed,
        reports,
        modulator_gap: gap,
    })
}

pub fn run_seed(config: &Path, seed: u64, dir: &Path) -> Outcome {
    let cfg = resolve(Some(config), &[])?;
    let dataset = load_dataset(&cfg)?;
    train_one(&cfg, &dataset, seed, dir).map(|_| ())
}

/// `seed,target_acc,keep_rate,pl_acc,modulator_gap` from each final epoch.
fn write_seed_table(path: &Path, runs: &[SeedRun]) -> anyhow::Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut text = String::from("seed,target_acc,keep_rate,pl_acc,modulator_gap\n");
    for r in runs {
        let last = r.reports.last().ok_or_else(|| anyhow!("seed {} has no epochs", r.seed))?;
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.seed,
            last.target_accuracy,
            last.keep_rate,
            opt(last.pl_accuracy),
            opt(r.modulator_gap)
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn summary_table(s: &RunSummary) -> String {
    let mut out = format!("{:<14} {:>8} {:>8} {:>8}\n", "metric", "mean", "std", "n_seeds");
    for (name, stat) in s.rows() {
        out.push_str(&format!("{name:<14} {:>8.4} {:>8.4} {:>8}\n", stat.mean, stat.std, stat.n));
    }
    out
}

pub fn eval(config: Option<&Path>, overrides: &[String], checkpoint: &Path) -> Outcome {
    let cfg = resolve(config, overrides)?;
    let ck = read_checkpoint(checkpoint)
        .with_context(|| format!("reading {}", checkpoint.display()))
        .map_err(config_err)?;
    let (model, sar, method) = load_artifacts(&ck).map_err(config_err)?;
    let dataset = load_dataset(&cfg)?;
    if dataset.input_dim != model.input_dim() || dataset.num_classes != model.num_classes() {
        return Err(config_err(anyhow!(
            "checkpoint expects {} inputs and {} classes, data has {} and {}",
            model.input_dim(),
            model.num_classes(),
            dataset.input_dim,
            dataset.num_classes
        )));
    }
    let target: Vec<_> = dataset
        .samples
        .iter()
        .filter(|s| s.domain_id == cfg.data.target_domain)
        .cloned()
        .collect();
    let acc = evaluate(&model, sar.as_ref(), &target).map_err(core_err)?;
    println!(
        "method {method}\ntarget_domain {}\nsamples {}\ntarget_acc {acc}",
        cfg.data.target_domain,
        target.len()
    );
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, overrides: &[String]) -> Outcome {
    let cfg = resolve(config, overrides)?;
    let nll = cfg.train_config(cfg.seeds()[0]).map_err(config_err)?.weights.nll;
    let start = Instant::now();
    let report = gradcheck_miniature(cfg.seeds()[0], nll).map_err(run_err)?;
    println!(
        "entries {}\nmax_rel_error {:e}\ntolerance {:e}\nworst {:?}\nseconds {:.3}\n{}",
        report.entries_checked,
        report.max_rel_error,
        report.tolerance,
        report.worst,
        start.elapsed().as_secs_f64(),
        if report.passed { "PASS" } else { "FAIL" }
    );
    match report.passed {
        true => Ok(()),
        false => Err(run_err(anyhow!("max relative error {:e} over tolerance", report.max_rel_error))),
    }
}

pub fn gen_data(config: Option<&Path>, overrides: &[String], out: &Path) -> Outcome {
    let cfg = resolve(config, overrides)?;
    let dataset = generate_synthetic(&cfg.synthetic()).map_err(core_err)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(run_err)?;
    }
    write_csv(&dataset, out).map_err(run_err)?;
    println!(
        "{} samples, {} classes, {} domains, {} features -> {}",
        dataset.len(),
        dataset.num_classes,
        dataset.num_domains,
        dataset.input_dim,
        out.display()
    );
    Ok(())
}
