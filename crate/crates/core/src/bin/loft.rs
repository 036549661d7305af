use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loft::harness::{
    preset, preset_names, run_batch, summary_line, verify_suite, write_outputs, CheckStatus, ConfigFile, RunOutcome,
    PRESETS,
};
use loft::{LoftError, Result};

#[derive(Parser)]
#[command(name = "loft", version, about = "Run and verify low-rank adapter optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment or batch config; `preset:<name>` runs a shipped preset.
    Run {
        config: String,
        /// Output directory (default: the config's `output`, else `out/`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace problem/adapter seeds (problem = S, adapter = S + 1).
        #[arg(long, value_name = "S")]
        seed_override: Option<u64>,
    },
    /// Run the built-in property and identity checks.
    Verify {
        /// Only run checks whose name matches this regex.
        #[arg(long)]
        filter: Option<String>,
        /// Write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// List or print the shipped preset configs.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    Emit { name: String },
}

fn load(config: &str) -> Result<ConfigFile> {
    match config.strip_prefix("preset:") {
        Some(name) => preset(name),
        None => ConfigFile::load(Path::new(config)),
    }
}

fn run(config: &str, out: Option<PathBuf>, seed: Option<u64>) -> Result<bool> {
    let file = load(config)?;
    let mut experiments = file.experiments();
    if let Some(s) = seed {
        experiments = experiments.into_iter().map(|e| e.with_seed(s)).collect();
    }
    let results = run_batch(&experiments);
    let mut ok = true;
    for (cfg, res) in experiments.iter().zip(results) {
        match res {
            Ok(outcome) => {
                let dir = out
                    .clone()
                    .or_else(|| cfg.output.clone())
                    .unwrap_or_else(|| PathBuf::from("out"));
                let files = write_outputs(&outcome, &dir)?;
                report(&outcome, &files.csv);
            }
            Err(e) => {
                ok = false;
                eprintln!("{}: {e}", cfg.name);
            }
        }
    }
    Ok(ok)
}

fn report(outcome: &RunOutcome, csv: &Path) {
    println!("{}  -> {}", summary_line(outcome), csv.display());
}

fn verify(filter: Option<String>, json: Option<PathBuf>) -> Result<bool> {
    let reports = verify_suite(filter.as_deref())?;
    if reports.is_empty() {
        return Err(LoftError::config("filter", "no check matches"));
    }
    for r in &reports {
        println!(
            "{:<4} {:<40} residual {:.3e}  tolerance {:.1e}",
            r.status.as_str(),
            r.check,
            r.max_residual,
            r.tolerance
        );
    }
    if let Some(path) = json {
        std::fs::write(&path, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    let failed = reports.iter().filter(|r| r.status == CheckStatus::Fail).count();
    println!("{} checks, {} failed", reports.len(), failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => run(&config, out, seed_override),
        Command::Verify { filter, json } => verify(filter, json),
        Command::Presets { action } => match action {
            PresetAction::List => {
                for (name, about, _) in PRESETS {
                    println!("{name:<18} {about}");
                }
                Ok(true)
            }
            PresetAction::Emit { name } => loft::harness::presets::preset_json(&name).map(|j| {
                print!("{j}");
                true
            }),
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, LoftError::UnknownPreset(_)) {
                eprintln!("available presets: {}", preset_names().collect::<Vec<_>>().join(", "));
            }
            ExitCode::from(2)
        }
    }
}
