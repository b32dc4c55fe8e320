use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use srnle::backend::protocol::serve_lines;
use srnle::backend::{Backend, MockFixture, MockProvider};
use srnle::datasets::{label_distribution, load_dataset, load_interventions, write_jsonl, Task};
use srnle::harness::ablate::{ablate, parse_values, Axis};
use srnle::harness::report::{load_run, merge, write_report};
use srnle::harness::{run, ConfigError, RunConfig};
use srnle::interventions::{generate_interventions, ClientConfig, HttpChatClient};

#[derive(Parser)]
#[command(
    name = "srnle",
    version,
    about = "Self-critique and refinement of natural language explanations"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict, find counters, explain and refine, then evaluate.
    Run {
        config: PathBuf,
        /// Override the configured worker count.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Merge finished runs into tables and plots.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// One run per value of a parameter.
    Ablate {
        config: PathBuf,
        /// TOP_N, IG_STEPS or SC_PARAMS.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values; `n:temperature` pairs for SC_PARAMS.
        #[arg(long)]
        values: String,
    },
    #[command(subcommand)]
    Interventions(InterventionCommand),
    #[command(subcommand)]
    Datasets(DatasetCommand),
    /// Serve a mock fixture as a backend process over stdin/stdout.
    #[command(hide = true)]
    Serve {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value = "mock")]
        model_tag: String,
        #[arg(long, default_value_t = 8192)]
        context_window: usize,
    },
}

#[derive(Subcommand)]
enum InterventionCommand {
    /// Ask a chat-completion endpoint for edits of every instance.
    Generate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: Task,
        /// TOML file with endpoint, model, api_key_env, timeout_secs, max_retries.
        #[arg(long)]
        client: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Only the first N instances.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Check an interventions file against its dataset.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        interventions: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Load a dataset and print its size and label distribution.
    Check {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: Task,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let config = RunConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run { config, parallelism } => {
            let mut config = load_config(&config)?;
            if let Some(p) = parallelism {
                config.parallelism = p;
            }
            match run(&config) {
                Ok(outcome) => {
                    for r in &outcome.summary.reports {
                        let rates: Vec<String> = r
                            .per_round
                            .iter()
                            .map(|p| p.unfaithfulness.map_or("-".into(), |u| format!("{:.2}", u * 100.0)))
                            .collect();
                        println!(
                            "{:<20} counters={:<5} unfaithfulness(%)=[{}]",
                            r.method,
                            r.n_counter,
                            rates.join(", ")
                        );
                    }
                    println!(
                        "failures: {}/{} units; outputs in {}",
                        outcome.summary.failures,
                        outcome.summary.units,
                        config.output_path().display()
                    );
                    let code = outcome.exit_code(config.max_failure_rate);
                    if code != 0 {
                        eprintln!(
                            "failure rate {:.4} exceeds max_failure_rate {}",
                            outcome.summary.failure_rate, config.max_failure_rate
                        );
                    }
                    Ok(code as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(e.exit_code() as u8)
                }
            }
        }
        Command::Report { runs, out } => {
            let summaries = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
            let merged = merge(&summaries)?;
            if let Some(w) = &merged.warning {
                log::warn!("{w}");
                eprintln!("warning: {w}");
            }
            for f in write_report(&out, &merged)? {
                println!("{}", out.join(f).display());
            }
            Ok(0)
        }
        Command::Ablate { config, axis, values } => {
            let config = load_config(&config)?;
            let values = parse_values(axis, &values).map_err(anyhow::Error::msg)?;
            let provider = match config.backend.provider(&config.base_dir) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(1);
                }
            };
            match ablate(&config, axis, &values, provider) {
                Ok(rows) => {
                    println!(
                        "{} rows written to {}",
                        rows.len(),
                        config.output_path().join("sweep.csv").display()
                    );
                    Ok(0)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(e.exit_code() as u8)
                }
            }
        }
        Command::Interventions(InterventionCommand::Generate {
            dataset,
            task,
            client,
            out,
            limit,
        }) => {
            let instances = load_dataset(&dataset, task)?;
            let text = std::fs::read_to_string(&client).with_context(|| format!("reading {}", client.display()))?;
            let client_config: ClientConfig = toml::from_str(&text).context("client config")?;
            let mut client = HttpChatClient::new(client_config);
            let mut emitted = Vec::new();
            let (mut skipped, mut shortfall) = (0, 0);
            for inst in instances.iter().take(limit.unwrap_or(usize::MAX)) {
                match generate_interventions(inst, &mut client) {
                    Ok(g) => {
                        shortfall += g.shortfall;
                        emitted.extend(g.interventions);
                    }
                    Err(e) => {
                        log::warn!("{}: {e}", inst.id);
                        skipped += 1;
                    }
                }
            }
            write_jsonl(&out, &emitted)?;
            println!(
                "{} interventions written to {}; {skipped} instances skipped; shortfall {shortfall}",
                emitted.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Interventions(InterventionCommand::Validate {
            dataset,
            task,
            interventions,
        }) => {
            let instances = load_dataset(&dataset, task)?;
            let set = load_interventions(&interventions, &instances)?;
            println!(
                "{} valid interventions for {} instances; {} rejected, {} duplicates, {} over the per-instance limit",
                set.total(),
                set.by_instance.len(),
                set.rejected.len(),
                set.duplicates,
                set.over_limit
            );
            for r in &set.rejected {
                println!("  record {}: {}", r.index, r.reason);
            }
            Ok(if set.rejected.is_empty() { 0 } else { 1 })
        }
        Command::Datasets(DatasetCommand::Check { dataset, task }) => {
            let instances = load_dataset(&dataset, task)?;
            println!("{} instances of {}", instances.len(), task.as_str());
            for (label, share) in label_distribution(&instances)? {
                println!("  {label}: {:.2}%", share * 100.0);
            }
            Ok(0)
        }
        Command::Serve {
            fixture,
            model_tag,
            context_window,
        } => {
            let fixture = MockFixture::load(&fixture).map_err(anyhow::Error::msg)?;
            let provider = MockProvider::new(&model_tag, fixture, context_window);
            let mut backend = provider.backend();
            if backend.capabilities().is_empty() {
                bail!("fixture offers no capabilities");
            }
            serve_lines(&mut backend, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
            Ok(0)
        }
    }
}
