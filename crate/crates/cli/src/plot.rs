//! CSV series from run traces.
//!
//! Files written (only for non-empty series):
//! - `epochs.csv`: `epoch,train_loss,dev_accuracy`, one row per epoch.
//! - `selection.csv`: `epoch` then `t<k>_all` and `t<k>_r<r>` columns with
//!   the mean selection probability of teacher k overall and on region r.
//! - `batch_loss.csv`: `batch,loss`.
//! - `rewards.csv`: `batch,reward` plus `dev_subsample_accuracy` when
//!   recorded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use rlkd_core::trainer::RunTrace;

fn write_csv(dir: &Path, name: &str, text: String, written: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    written.push(path);
    Ok(())
}

pub fn emit_plot_data(trace: &RunTrace, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut written = Vec::new();

    if !trace.epoch_train_loss.is_empty() {
        let mut s = String::from("epoch,train_loss,dev_accuracy\n");
        for (e, loss) in trace.epoch_train_loss.iter().enumerate() {
            let acc = trace.epoch_dev_accuracy.get(e).copied().unwrap_or(f64::NAN);
            writeln!(s, "{},{loss},{acc}", e + 1)?;
        }
        write_csv(out, "epochs.csv", s, &mut written)?;
    }

    if let Some(first) = trace.epoch_selection.first() {
        let k = first.overall.len();
        let mut s = String::from("epoch");
        for t in 1..=k {
            write!(s, ",t{t}_all")?;
            for r in &first.by_region {
                write!(s, ",t{t}_r{}", r.region)?;
            }
        }
        s.push('\n');
        for (e, profile) in trace.epoch_selection.iter().enumerate() {
            write!(s, "{}", e + 1)?;
            for t in 0..k {
                write!(s, ",{}", profile.overall[t])?;
                for r in &profile.by_region {
                    write!(s, ",{}", r.rates[t])?;
                }
            }
            s.push('\n');
        }
        write_csv(out, "selection.csv", s, &mut written)?;
    }

    if !trace.batch_losses.is_empty() {
        let mut s = String::from("batch,loss\n");
        for (b, v) in trace.batch_losses.iter().enumerate() {
            writeln!(s, "{},{v}", b + 1)?;
        }
        write_csv(out, "batch_loss.csv", s, &mut written)?;
    }

    if !trace.batch_rewards.is_empty() {
        let with_dev = trace.batch_dev_accuracy.len() == trace.batch_rewards.len();
        let mut s = String::from(if with_dev {
            "batch,reward,dev_subsample_accuracy\n"
        } else {
            "batch,reward\n"
        });
        for (b, r) in trace.batch_rewards.iter().enumerate() {
            if with_dev {
                writeln!(s, "{},{r},{}", b + 1, trace.batch_dev_accuracy[b])?;
            } else {
                writeln!(s, "{},{r}", b + 1)?;
            }
        }
        write_csv(out, "rewards.csv", s, &mut written)?;
    }
    Ok(written)
}

pub fn emit_plot_data_from_file(trace_path: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let text = fs::read_to_string(trace_path).with_context(|| format!("cannot read trace {}", trace_path.display()))?;
    let trace: RunTrace =
        serde_json::from_str(&text).with_context(|| format!("malformed trace {}", trace_path.display()))?;
    emit_plot_data(&trace, out)
}
