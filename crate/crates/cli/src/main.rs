//! `framebudget <scenario> [--config FILE] [--set key=value]... [--out DIR] [--seeds LIST]`

use clap::Parser;
use framebudget::config::ExperimentConfig;
use framebudget::scenarios::{run_scenario, Scenario};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "framebudget", version, about = "Run a frame-budget allocation experiment scenario")]
struct Args {
    /// train, reward_ablation, sim_ablation, operator_transfer, complexity_calc or gradcheck_suite
    scenario: Scenario,
    /// TOML configuration file; defaults apply to anything it leaves out
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `train.capo.gamma=1`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for CSVs, summary.txt and manifest.json
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Comma-separated seeds, or a range like `0..5`
    #[arg(long, default_value = "0..5", value_parser = parse_seeds)]
    seeds: Seeds,
    /// Print the resolved configuration and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

fn parse_seeds(text: &str) -> Result<Seeds, String> {
    seed_list(text).map(Seeds)
}

fn seed_list(text: &str) -> Result<Vec<u64>, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed list `{text}`: {e}");
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a >= b {
            return Err(format!("empty seed range `{text}`"));
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(bad)).collect()
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match ExperimentConfig::load(args.config.as_deref(), &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if args.print_config {
        return match cfg.to_toml() {
            Ok(t) => {
                print!("{t}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }
    match run_scenario(args.scenario, &cfg, &args.seeds.0, &args.out) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("artifacts written to {}", args.out.display());
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(seed_list("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(seed_list("4, 9,1").unwrap(), vec![4, 9, 1]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
