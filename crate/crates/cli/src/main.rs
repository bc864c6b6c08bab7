use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rlkd_cli::config::ExperimentConfig;
use rlkd_cli::plot::emit_plot_data_from_file;
use rlkd_cli::report::{compare, MetricsReport};
use rlkd_cli::runner;
use rlkd_core::datasets::{generate_quadrant_benchmark, save_jsonl, QuadrantSpec};

#[derive(Parser)]
#[command(name = "rlkd", version, about = "Multi-teacher distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured method for every seed and write a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reports: mean, stdev and pairwise Welch t-tests.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic region benchmark as JSON-lines files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a run trace into CSV series.
    PlotData {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let env_seed = std::env::var("SEED").ok();
            let seeds = cfg.resolve_seeds(env_seed.as_deref())?;
            let report = runner::run(&cfg, &seeds, &out)?;
            println!(
                "{}: test accuracy {:.4} +/- {:.4} over {} seed(s); report in {}",
                report.method,
                report.summary.test_mean,
                report.summary.test_stdev,
                report.runs.len(),
                out.join("report.json").display()
            );
        }
        Command::Compare { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| Ok((p.clone(), MetricsReport::load(p)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let cmp = compare(&loaded)?;
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let mut json = serde_json::to_string_pretty(&cmp)?;
            json.push('\n');
            std::fs::write(out.join("comparison.json"), json)?;
            let text = cmp.to_text();
            std::fs::write(out.join("comparison.txt"), &text)?;
            print!("{text}");
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("cannot read {}", spec.display()))?;
            let spec: QuadrantSpec = serde_json::from_str(&text).context("invalid benchmark spec")?;
            let bench = generate_quadrant_benchmark(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            for (name, ds) in [("train", &bench.train), ("dev", &bench.dev), ("test", &bench.test)] {
                save_jsonl(ds, out.join(format!("{name}.jsonl")))?;
            }
            println!("wrote train/dev/test to {}", out.display());
        }
        Command::PlotData { trace, out } => {
            for path in emit_plot_data_from_file(&trace, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
