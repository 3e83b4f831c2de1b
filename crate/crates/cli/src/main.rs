use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use lowrank_q::agent::{Agent, QuantifierKind};
use lowrank_q::completion::SoftImputeConfig;
use lowrank_q::envs::ReplayBuffer;
use lowrank_q::exec::Execution;
use lowrank_q::harness::{self, ExperimentConfig, ExperimentReport, ReturnTable};
use lowrank_q::rng;

#[derive(Parser)]
#[command(name = "lrq", version, about = "Low-rank Q-matrix experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to runs/<env>-<variant>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Approximate-rank statistics of a checkpoint's critic.
    RankScan {
        #[command(flatten)]
        sample: Sample,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        /// Also write the arank histogram as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Rank/uncertainty correlation over sampled Q-matrices.
    Correlate {
        #[command(flatten)]
        sample: Sample,
        #[arg(long)]
        quantifier: QuantifierKind,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        /// Per-matrix rows (u_mean, u_std, arank).
        #[arg(long, default_value = "correlation.csv")]
        out: PathBuf,
    },
    /// Erase entries of a matrix and fill them back in by Soft-Impute.
    Complete {
        #[arg(long)]
        matrix: PathBuf,
        /// `row,col` pairs, zero-based.
        #[arg(long)]
        removals: PathBuf,
        #[arg(long, default_value_t = 50.0)]
        zeta: f64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value = "completed.csv")]
        out: PathBuf,
        /// Defaults to the output path with a .json extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Final-return table over run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also draw return and arank curves.
        #[arg(long)]
        svg: bool,
        /// Where report.md, report.csv and charts go.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// One sampled Q-matrix and its uncertainty matrix, as CSV.
    UncertaintyScan {
        #[command(flatten)]
        sample: Sample,
        #[arg(long)]
        quantifier: QuantifierKind,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Sample {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to buffer.bin inside the checkpoint.
    #[arg(long)]
    buffer: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Sample {
    fn load(&self) -> Result<(Agent, ReplayBuffer)> {
        let agent = Agent::load(&self.checkpoint)
            .with_context(|| format!("loading checkpoint {}", self.checkpoint.display()))?;
        let path = self.buffer.clone().unwrap_or_else(|| self.checkpoint.join(harness::BUFFER_FILE));
        let buffer = ReplayBuffer::load(&path).with_context(|| format!("loading buffer {}", path.display()))?;
        Ok((agent, buffer))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg = cfg.for_seed(s);
            }
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.env.name(), cfg.agent.variant)));
            let report = harness::run_experiment(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RankScan { sample, delta, histogram } => {
            let (agent, buffer) = sample.load()?;
            let grids = harness::sample_grids(&buffer, sample.n, sample.size, &mut rng::stream(sample.seed, "rank_scan"))?;
            let scan = harness::rank_scan(&agent.critic, &grids, delta, Execution::default())?;
            if let Some(path) = histogram {
                scan.write_histogram(&path)?;
            }
            let hist: Vec<_> = scan.histogram().into_iter().map(|(r, c)| json!({"arank": r, "count": c})).collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({"mean": scan.mean, "std": scan.std, "histogram": hist}))?
            );
        }
        Command::Correlate {
            sample,
            quantifier,
            delta,
            out,
        } => {
            let (agent, buffer) = sample.load()?;
            let Some(q) = agent.quantifier(quantifier) else {
                bail!("checkpoint has no {quantifier:?} quantifier; train with a variant that uses it or with track_uncertainty");
            };
            let grids = harness::sample_grids(&buffer, sample.n, sample.size, &mut rng::stream(sample.seed, "correlate"))?;
            let rep = harness::correlate(&agent.critic, &q, &grids, delta, Execution::default())?;
            rep.write_csv(&out)?;
            let summary = match rep.spearman {
                Some(rho) => json!({"spearman": rho, "undefined": false, "matrices": rep.rows.len()}),
                None => json!({"spearman": null, "undefined": true, "matrices": rep.rows.len()}),
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Complete {
            matrix,
            removals,
            zeta,
            epsilon,
            max_iter,
            out,
            report,
        } => {
            let m = harness::read_matrix_csv(&matrix)?;
            let removed = harness::read_removals_csv(&removals)?;
            let cfg = SoftImputeConfig {
                zeta,
                epsilon,
                max_iterations: max_iter,
            };
            let (completed, rep) = harness::complete(&m, &removed, &cfg)?;
            harness::write_matrix_csv(&out, &completed)?;
            let report = report.unwrap_or_else(|| out.with_extension("json"));
            write_json(&report, &serde_json::to_value(rep)?)?;
            println!("{}", serde_json::to_string(&rep)?);
        }
        Command::Report { runs, svg, out } => {
            let loaded = runs
                .iter()
                .map(|d| {
                    ExperimentReport::load(d)
                        .map(|r| (d.clone(), r))
                        .with_context(|| format!("reading run {}", d.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let reports: Vec<ExperimentReport> = loaded.iter().map(|(_, r)| r.clone()).collect();
            let table = ReturnTable::from_reports(&reports)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let md = table.to_markdown();
            std::fs::write(out.join("report.md"), &md).context("writing report.md")?;
            table.write_csv(&out.join("report.csv"))?;
            print!("{md}");
            if svg {
                for path in harness::write_charts(&loaded, &out)? {
                    eprintln!("wrote {}", path.display());
                }
            }
        }
        Command::UncertaintyScan { sample, quantifier, out } => {
            let (agent, buffer) = sample.load()?;
            let Some(q) = agent.quantifier(quantifier) else {
                bail!("checkpoint has no {quantifier:?} quantifier; train with a variant that uses it or with track_uncertainty");
            };
            let (qm, u) =
                harness::uncertainty_scan(&agent, &q, &buffer, sample.size, &mut rng::stream(sample.seed, "uncertainty_scan"))?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            harness::write_matrix_csv(&out.join("q_matrix.csv"), &qm)?;
            harness::write_matrix_csv(&out.join("uncertainty.csv"), &u.to_matrix())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({"u_mean": u.mean(), "u_std": u.std(), "size": sample.size}))?
            );
        }
    }
    Ok(())
}
