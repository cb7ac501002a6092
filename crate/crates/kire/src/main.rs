use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use kire::pipeline::{self, CheckpointChoice, SynthArgs};
use kire::run_config::{documented_keys, read_flat, Assignment, Preset, RunConfig};
use kire::workdir::WorkDir;
use kire::{Error, Result};
use serde::Serialize;

/// Knowledge-injected document-level relation extraction.
///
/// Settings resolve in order: `kire.conf` in the work directory, then
/// `--config`, then per-key flags such as `--d-word 50`.
#[derive(Parser, Debug)]
#[command(name = "kire", version)]
struct Cli {
    /// Directory holding data/, checkpoints/ and reports/.
    #[arg(long, global = true, default_value = ".")]
    work_dir: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Best,
    Last,
}

impl From<Which> for CheckpointChoice {
    fn from(w: Which) -> Self {
        match w {
            Which::Best => CheckpointChoice::Best,
            Which::Last => CheckpointChoice::Last,
        }
    }
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint of the run to use.
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: Which,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, link and validate the configured inputs into data/.
    Prepare,
    /// Pretrain the attribute autoencoder.
    PretrainAe,
    /// Train the base stage then the knowledge-injection stage.
    Train,
    /// Score train, validation and test with the threshold chosen on validation.
    Evaluate(CheckpointArg),
    /// Write predicted facts for one split.
    Predict {
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        which: CheckpointArg,
        /// Fixed threshold instead of the one chosen on validation.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Count parameters and compare against the closed-form formulas.
    ParamCount {
        /// Document length in tokens; defaults to the longest training document.
        #[arg(long)]
        n_token: Option<usize>,
        /// Tokens inside entity mentions; defaults to the training maximum.
        #[arg(long)]
        n_align: Option<usize>,
    },
    /// Generate a synthetic corpus into data/ and select the desk preset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        n_docs: usize,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        n_relations: Option<usize>,
        #[arg(long)]
        kg_size: Option<usize>,
        /// Preset written to the work-directory config.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train and evaluate k consecutive seeds; report mean and std.
    MultiSeed {
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Run the seeds on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// List every configuration key.
    Keys,
}

/// Adds `--key value` for every configuration key to each subcommand that
/// reads a configuration.
fn command() -> clap::Command {
    Cli::command().mut_subcommands(|sub| {
        if matches!(sub.get_name(), "synth" | "keys") {
            return sub;
        }
        documented_keys().into_iter().fold(sub, |sub, (key, help)| {
            let long = key.replace('_', "-");
            let mut arg = Arg::new(key).long(long.clone()).value_name("VALUE").help(help).help_heading("Configuration");
            if long != key {
                arg = arg.alias(key);
            }
            sub.arg(arg)
        })
    })
}

fn assignments(cli: &Cli, work: &WorkDir, sub: &ArgMatches) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    if work.config_file().is_file() {
        out.extend(read_flat(&work.config_file())?);
    }
    if let Some(path) = &cli.config {
        out.extend(read_flat(path)?);
    }
    for (key, _) in documented_keys() {
        if let Some(value) = sub.get_one::<String>(key) {
            out.push(Assignment { key: key.to_string(), value: value.clone(), origin: format!("--{}", key.replace('_', "-")) });
        }
    }
    Ok(out)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(std::path::Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn run(cli: Cli, sub: &ArgMatches) -> Result<()> {
    let work = WorkDir::new(&cli.work_dir);
    if let Command::Synth { seed, n_docs, vocab_size, n_relations, kg_size, preset } = &cli.command {
        let mut args = SynthArgs::new(*seed, *n_docs);
        args.vocab_size = vocab_size.unwrap_or(args.vocab_size);
        args.n_relations = n_relations.unwrap_or(args.n_relations);
        args.kg_size = kg_size.unwrap_or(args.kg_size);
        args.preset = Preset::parse(preset)?;
        return print(&pipeline::synth(&work, &args)?);
    }
    if let Command::Keys = &cli.command {
        let text: String = documented_keys().into_iter().map(|(key, help)| format!("{key:<22} {help}\n")).collect();
        let _ = std::io::stdout().write_all(text.as_bytes());
        return Ok(());
    }
    let config = RunConfig::resolve(&assignments(&cli, &work, sub)?)?;
    log::info!("run {} resolved configuration:\n{}", config.run_id(), config.to_flat());
    match &cli.command {
        Command::Prepare => print(&pipeline::prepare(&work, &config)?),
        Command::PretrainAe => print(&pipeline::pretrain_ae(&work, &config)?),
        Command::Train => print(&pipeline::train_run(&work, &config)?),
        Command::Evaluate(c) => print(&pipeline::evaluate(&work, &config, c.checkpoint.into())?),
        Command::Predict { split, which, threshold } => print(&pipeline::predict(&work, &config, split, which.checkpoint.into(), *threshold)?),
        Command::ParamCount { n_token, n_align } => print(&pipeline::param_count(Some(&work), &config, *n_token, *n_align)?),
        Command::MultiSeed { k, parallel } => print(&pipeline::multi_seed(&work, &config, *k, *parallel)?),
        Command::Synth { .. } | Command::Keys => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let sub = matches.subcommand().map(|(_, m)| m.clone()).unwrap_or_default();
    match run(cli, &sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
