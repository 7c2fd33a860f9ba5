//! Command-line entry point: subcommands over a single JSON config, with
//! machine-readable error JSON on stderr and a nonzero exit code on failure.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use subpop_cli::config::{load_config, ExperimentConfig, SelectionSpec, TheorySpec};
use subpop_cli::pipeline::{
    prepare_trial, run_attack_pipeline, run_fig2_scenario, run_theory, trial_seed,
};
use subpop_cli::reports::{emit_grid_csv, emit_reports, emit_theory_json, load_report};
use subpop_cli::CliError;

#[derive(Parser)]
#[command(
    name = "subpop",
    about = "Subpopulation poisoning experiments: selection, attacks, damage metrics, defenses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build subpopulation filters and report their sizes and the picked target.
    Cluster {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the attack pipeline (no defenses) and emit damage reports.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the attack pipeline including the configured defenses.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the mixture-model attack and concentration bounds.
    Theory {
        /// Optional config supplying a `theory` section and output directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of simulation trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides the per-trial sample size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 2-d defense-failure scenario and emit its decision grid.
    Fig2 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit CSV tables from a previously written report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let payload = json!({
            "error": {
                "kind": e.kind(),
                "message": e.to_string(),
            }
        });
        let _ = writeln!(std::io::stderr(), "{payload}");
        std::process::exit(1);
    }
}

/// Write errors are ignored so a closed pipe (e.g. `subpop ... | head`)
/// ends the output quietly instead of panicking; artifacts are already on
/// disk by the time summaries print.
fn emit(line: impl Display) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn load_with_overrides(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = load_config(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    Ok(config)
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        emit(format_args!("wrote {}", p.display()));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Cluster { config, seed, out } => {
            let config = load_with_overrides(&config, seed, out)?;
            cmd_cluster(&config)
        }
        Command::Attack { config, seed, out } => {
            let mut config = load_with_overrides(&config, seed, out)?;
            config.defenses = Default::default();
            cmd_pipeline(&config)
        }
        Command::Defend { config, seed, out } => {
            let config = load_with_overrides(&config, seed, out)?;
            if config.defenses.is_empty() {
                return Err(CliError::Usage(
                    "defend requires at least one defense in the config".into(),
                ));
            }
            cmd_pipeline(&config)
        }
        Command::Theory {
            config,
            seed,
            trials,
            n,
            out,
        } => cmd_theory(config.as_deref(), seed, trials, n, out),
        Command::Fig2 { seed, out } => cmd_fig2(seed, &out),
        Command::Report { input, out } => {
            let report = load_report(&input)?;
            let written = emit_reports(&report, &out)?;
            print_written(&written);
            Ok(())
        }
    }
}

fn cmd_cluster(config: &ExperimentConfig) -> Result<(), CliError> {
    let ctx = prepare_trial(config, trial_seed(config.seed, 0))?;
    std::fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join("clusters.csv");

    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["subpop", "aux_size", "test_size", "picked"])?;
    let mut sizes = Vec::new();
    for (i, nf) in ctx.filters.iter().enumerate() {
        let aux_size = nf.filter.member_indices(&ctx.split.aux)?.len();
        let test_size = nf.filter.member_indices(&ctx.split.test)?.len();
        let picked = ctx.picked == Some(i);
        writer.write_record([
            nf.name.clone(),
            aux_size.to_string(),
            test_size.to_string(),
            picked.to_string(),
        ])?;
        sizes.push(json!({
            "subpop": nf.name,
            "aux_size": aux_size,
            "test_size": test_size,
            "picked": picked,
        }));
    }
    writer.flush()?;

    let mode = match &config.selection {
        SelectionSpec::FeatureMatch { .. } => "feature_match",
        SelectionSpec::ClusterMatch { .. } => "cluster_match",
    };
    emit(json!({
        "mode": mode,
        "seed": config.seed,
        "subpops": sizes,
        "picked": ctx.picked.map(|i| ctx.filters[i].name.clone()),
    }));
    emit(format_args!("wrote {}", path.display()));
    Ok(())
}

fn cmd_pipeline(config: &ExperimentConfig) -> Result<(), CliError> {
    let report = run_attack_pipeline(config)?;
    let written = emit_reports(&report, &config.output_dir)?;
    emit(json!({
        "seed": report.seed,
        "trials": report.trials,
        "damage_rows": report.damages.len(),
        "defense_rows": report.defense.len(),
        "skipped": report.skipped.len(),
        "picked": report.picked_subpop,
        "wall_clock_ms": report.wall_clock.as_millis() as u64,
    }));
    print_written(&written);
    Ok(())
}

fn cmd_theory(
    config: Option<&Path>,
    seed: Option<u64>,
    trials: Option<usize>,
    n: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut spec, config_seed, config_out) = match config {
        Some(path) => {
            let config = load_config(path)?;
            (
                config.theory.clone().unwrap_or_default(),
                config.seed,
                Some(config.output_dir.clone()),
            )
        }
        None => (TheorySpec::default(), 0, None),
    };
    if let Some(trials) = trials {
        spec.trials = trials;
    }
    if let Some(n) = n {
        spec.n = n;
    }
    let seed = seed.unwrap_or(config_seed);

    let report = run_theory(&spec, seed)?;
    emit(serde_json::to_string(&report)?);

    if let Some(dir) = out.or(config_out) {
        let path = dir.join("theory.json");
        emit_theory_json(&report, &path)?;
        emit(format_args!("wrote {}", path.display()));
    }
    Ok(())
}

fn cmd_fig2(seed: u64, out: &Path) -> Result<(), CliError> {
    let (report, grid) = run_fig2_scenario(seed)?;

    std::fs::create_dir_all(out)?;
    let grid_path = out.join("fig2_grid.csv");
    emit_grid_csv(&grid, &grid_path)?;
    let report_path = out.join("fig2_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    emit(serde_json::to_string(&report)?);
    emit(format_args!("wrote {}", grid_path.display()));
    emit(format_args!("wrote {}", report_path.display()));
    Ok(())
}
