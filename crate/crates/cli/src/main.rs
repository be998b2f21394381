//! `plora`: prepare a run directory, train both stages, evaluate and run the
//! experiment suite.

mod commands;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use plora::pipeline::{PipelineConfig, KEYS};
use plora::Error;

#[derive(Debug, Parser)]
#[command(
    name = "plora",
    version,
    about = "Personalized LoRA for click-through prediction with a tiny language model",
    after_help = "Configuration precedence: flags > --config file > the run's config.txt > defaults.\n\
                  Exit codes: 0 ok, 2 config, 3 data, 4 missing or stale dependency, 5 numeric or training."
)]
pub struct Cli {
    /// Run directory holding every artifact.
    #[arg(long, env = "PLORA_RUN_DIR", default_value = "run", global = true)]
    pub run_dir: PathBuf,

    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Extra `key=value` override; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Load or generate the data, split it, build the vocabulary, base model
    /// and behavior index.
    Prepare {
        /// Replace an existing run.
        #[arg(long)]
        force: bool,
    },
    /// Train the recommendation model (stage 1), the adapter (stage 2) or both.
    Train {
        #[arg(long, value_parser = ["1", "2", "all"], default_value = "all")]
        stage: String,
    },
    /// Score the test split and write metrics.json.
    Eval {
        /// Record phase timings in metrics.json (breaks byte-identical reruns).
        #[arg(long)]
        wall_clock: bool,
    },
    /// Train and evaluate the ablation variants.
    Ablate(AblateArgs),
    /// Bank-size sweep, or a sample-efficiency curve with --fewshot-sizes.
    Sweep(SweepArgs),
    /// Time training and inference over a (k_text, k_long) grid.
    Timing(TimingArgs),
    /// Print every report found in the run directory.
    Report,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants; all by default.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Bank sizes N_m.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub values: Vec<usize>,
    /// Ascending few-shot sizes; switches to the sample-efficiency curve.
    #[arg(long, value_delimiter = ',')]
    pub fewshot_sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// Cells as k_text:k_long.
    #[arg(long, value_delimiter = ',', default_value = "5:10,5:60,10:100,60:100")]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
}

fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

/// One flag per configuration key, plus the bare leaf name as an alias when
/// it is unambiguous.
fn key_args() -> Vec<Arg> {
    let defaults: BTreeMap<_, _> = PipelineConfig::default().entries().into_iter().collect();
    let leaf = |k: &str| k.rsplit('.').next().unwrap_or(k).to_string();
    let mut counts = BTreeMap::new();
    for (k, _) in KEYS {
        *counts.entry(leaf(k)).or_insert(0) += 1;
    }
    KEYS.iter()
        .map(|&(key, doc)| {
            let default = defaults[key].as_str();
            let shown = if default.is_empty() { "none" } else { default };
            let mut a = Arg::new(key)
                .long(flag_name(key))
                .value_name("V")
                .help(format!("{key}: {doc} [default: {shown}]"))
                .help_heading("Configuration keys")
                .global(true)
                .action(ArgAction::Set);
            let l = leaf(key);
            if counts[&l] == 1 && !key.starts_with("seed.") && flag_name(&l) != flag_name(key) {
                a = a.visible_alias(flag_name(&l));
            }
            a
        })
        .collect()
}

pub fn command() -> Command {
    <Cli as clap::CommandFactory>::command().args(key_args())
}

/// Flag overrides in `KEYS` order, then `--set` pairs.
fn overrides(m: &ArgMatches, set: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            out.push((key.to_string(), v.clone()));
        }
    }
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let over = match overrides(&matches, &cli.set) {
        Ok(o) => o,
        Err(e) => return report_failure("config", &e),
    };
    match commands::run(&cli, &over) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => report_failure(stage, &e),
    }
}

fn report_failure(stage: &str, e: &Error) -> ExitCode {
    eprintln!("error [{stage}]: {e}");
    ExitCode::from(e.exit_code() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn flags_and_aliases_reach_the_same_key() {
        let m = command()
            .try_get_matches_from(["plora", "train", "--fewshot-n", "64", "--plora-rank", "4", "--stage", "2"])
            .unwrap();
        let over = overrides(&m, &[]).unwrap();
        assert_eq!(
            over,
            [("plora.rank".to_string(), "4".to_string()), ("stage2.fewshot_n".to_string(), "64".to_string())]
        );
    }
}
