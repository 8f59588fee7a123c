mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

/// Semi-supervised domain generalization with feature modulation.
///
/// Any `--key=value` (or `--key value`) that is not a listed flag is treated
/// as a config override, e.g. `--mode fixmatch-baseline` or
/// `--train.epochs=5`.
#[derive(Parser, Debug)]
#[command(name = "modfeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed, then write and print the seed summary.
    Train(TrainArgs),
    /// Target-domain accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of the full objective on a C = 2, F = 4 model.
    Gradcheck(ConfigArgs),
    /// Write the configured synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// One seed into one directory; used by `train --parallel-seeds`.
    #[command(hide = true)]
    RunSeed(RunSeedArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML file with [data] [model] [train] [output] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `section.key=value` or `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Write the SAR matrix of every epoch under sar/.
    #[arg(long)]
    dump_sar: bool,
    /// Write the modulation matrix of every epoch under modulator/.
    #[arg(long)]
    dump_modulator: bool,
    /// Run up to N seeds at once as separate processes.
    #[arg(long, value_name = "N")]
    parallel_seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Destination CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunSeedArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    dir: PathBuf,
}

/// Rewrites unknown long options after the subcommand into `--set k=v`.
fn expand_overrides(args: Vec<OsString>) -> Vec<OsString> {
    let Some(sub) = args.get(1).and_then(|a| a.to_str()).map(str::to_string) else {
        return args;
    };
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else {
        return args;
    };
    let mut known: Vec<String> = sc
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    known.extend(["help".to_string(), "version".to_string()]);

    let mut out: Vec<OsString> = args[..2].to_vec();
    let mut rest = args.into_iter().skip(2).peekable();
    while let Some(arg) = rest.next() {
        let Some(text) = arg.to_str().and_then(|s| s.strip_prefix("--")).map(str::to_string) else {
            out.push(arg);
            continue;
        };
        let name = text.split('=').next().unwrap_or_default();
        if text.is_empty() || known.iter().any(|k| k == name) {
            out.push(arg);
            continue;
        }
        let pair = if text.contains('=') {
            text
        } else {
            let takes_value = rest
                .peek()
                .and_then(|v| v.to_str())
                .is_some_and(|v| !v.starts_with("--"));
            match takes_value {
                true => format!("{text}={}", rest.next().unwrap().to_string_lossy()),
                false => format!("{text}=true"),
            }
        };
        out.push("--set".into());
        out.push(pair.into());
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(expand_overrides(std::env::args_os().collect()));
    let result = match cli.command {
        Command::Train(a) => commands::train(commands::TrainRequest {
            config: a.common.config,
            overrides: a.common.set,
            dump_sar: a.dump_sar,
            dump_modulator: a.dump_modulator,
            parallel_seeds: a.parallel_seeds,
        }),
        Command::Eval(a) => commands::eval(a.common.config.as_deref(), &a.common.set, &a.checkpoint),
        Command::Gradcheck(a) => commands::gradcheck(a.config.as_deref(), &a.set),
        Command::GenData(a) => commands::gen_data(a.common.config.as_deref(), &a.common.set, &a.out),
        Command::RunSeed(a) => commands::run_seed(&a.config, a.seed, &a.dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
