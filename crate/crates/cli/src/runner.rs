//! Executes an experiment config once per seed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;

use rlkd_core::datasets::{generate_quadrant_benchmark, load_jsonl, load_teacher_logits, Dataset};
use rlkd_core::distillation::{
    accuracy_weights, ensemble_accuracy, fit_lr_ensemble, vanilla_kd_train, EnsembleStrategy, KdConfig,
    TeacherPredictions,
};
use rlkd_core::models::{
    compute_teacher_predictions, evaluate_accuracy, make_teacher_pool, Mlp, OptimizerSpec, TeacherCorruptionSpec,
    TeacherPoolSpec, TrainSpec,
};
use rlkd_core::numerics::SeededRng;
use rlkd_core::policy::{RewardConfig, RewardKind};
use rlkd_core::trainer::{
    run_rlkd, selection_profile, RlkdConfig, RunTrace, SelectorPretrainConfig, TeacherSource,
};

use crate::config::{BenchmarkConfig, ExperimentConfig, Method, RewardVariant};
use crate::report::{MetricsReport, RunRecord, Summary, TeacherSummary, REPORT_SCHEMA};

struct Splits {
    train: Dataset,
    dev: Dataset,
    test: Dataset,
}

struct Teachers {
    train: TeacherPredictions,
    dev: TeacherPredictions,
    test: TeacherPredictions,
}

fn load_splits(config: &ExperimentConfig, seed: u64) -> anyhow::Result<Splits> {
    Ok(match &config.benchmark {
        BenchmarkConfig::Synthetic(s) => {
            let b = generate_quadrant_benchmark(&s.spec(seed))?;
            Splits {
                train: b.train,
                dev: b.dev,
                test: b.test,
            }
        }
        BenchmarkConfig::Files(f) => Splits {
            train: load_jsonl(&f.train).with_context(|| format!("benchmark.train {}", f.train.display()))?,
            dev: load_jsonl(&f.dev).with_context(|| format!("benchmark.dev {}", f.dev.display()))?,
            test: load_jsonl(&f.test).with_context(|| format!("benchmark.test {}", f.test.display()))?,
        },
    })
}

fn load_teachers(config: &ExperimentConfig, splits: &Splits, seed: u64) -> anyhow::Result<Teachers> {
    let t = config.hyper.temperature;
    if let BenchmarkConfig::Files(f) = &config.benchmark {
        if let Some(rows) = &f.teacher_rows {
            let k = rows.num_teachers;
            return Ok(Teachers {
                train: load_teacher_logits(&rows.train, &splits.train, k, t)
                    .with_context(|| format!("teacher rows {}", rows.train.display()))?,
                dev: load_teacher_logits(&rows.dev, &splits.dev, k, t)
                    .with_context(|| format!("teacher rows {}", rows.dev.display()))?,
                test: load_teacher_logits(&rows.test, &splits.test, k, t)
                    .with_context(|| format!("teacher rows {}", rows.test.display()))?,
            });
        }
    }
    let tc = &config.teachers;
    let spec = TeacherPoolSpec {
        hidden: tc.hidden.clone(),
        corruption: tc
            .corrupt_regions
            .iter()
            .map(|r| r.map(TeacherCorruptionSpec::relabel))
            .collect(),
        train: TrainSpec {
            optimizer: OptimizerSpec::adam(tc.learning_rate),
            epochs: tc.epochs,
            batch_size: tc.batch_size,
        },
        seed,
    };
    let pool = make_teacher_pool(&splits.train, &spec).context("training teacher pool")?;
    Ok(Teachers {
        train: compute_teacher_predictions(&pool, &splits.train, t)?,
        dev: compute_teacher_predictions(&pool, &splits.dev, t)?,
        test: compute_teacher_predictions(&pool, &splits.test, t)?,
    })
}

fn kd_config(config: &ExperimentConfig, epochs: usize, seed: u64) -> KdConfig {
    let h = &config.hyper;
    KdConfig {
        alpha: h.alpha,
        temperature: h.temperature,
        scale_by_t_squared: h.scale_by_t_squared,
        epochs,
        batch_size: h.batch_size,
        optimizer: OptimizerSpec {
            kind: h.optimizer,
            learning_rate: h.learning_rate,
        },
        seed,
    }
}

pub fn rlkd_config(config: &ExperimentConfig, variant: RewardVariant, seed: u64) -> RlkdConfig {
    let h = &config.hyper;
    RlkdConfig {
        kd: kd_config(config, h.pretrain_epochs, seed),
        reward: RewardConfig {
            variant: match variant {
                RewardVariant::R1 => RewardKind::R1,
                RewardVariant::R2 => RewardKind::R2,
                RewardVariant::R3 => RewardKind::R3,
            },
            gamma: h.gamma,
            dev_subsample: h.dev_subsample,
            dev_seed: seed,
        },
        beta: h.beta,
        epochs: h.epochs,
        schedule: h.schedule,
        gradient_mode: h.gradient_mode,
        baseline_decay: h.reward_baseline,
        selector_pretrain: SelectorPretrainConfig {
            epochs: h.selector_pretrain_epochs,
            batch_size: h.batch_size,
            beta: h.selector_pretrain_beta,
            seed,
            reward: h.selector_pretrain_reward,
            baseline_decay: h.reward_baseline,
        },
        policy_seed: seed,
        init_bias: h.init_bias,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Trains and evaluates one seed, writing its checkpoints and trace into
/// `dir`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> anyhow::Result<RunRecord> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let splits = load_splits(config, seed)?;
    let teachers = if config.method.uses_teachers() {
        Some(load_teachers(config, &splits, seed)?)
    } else {
        None
    };
    let mut sizes = vec![splits.train.feature_dim()];
    sizes.extend(config.student.hidden());
    sizes.push(splits.train.num_classes());
    let init = Mlp::glorot(&sizes, &mut SeededRng::new(seed, "student-init"))?;
    let total = config.hyper.pretrain_epochs + config.hyper.epochs;
    let kd = kd_config(config, total, seed);

    let mut ensemble_weights = None;
    let mut selection = None;
    let (student, mut trace): (Mlp, RunTrace) = match (config.method, &teachers) {
        (Method::Rlkd(variant), Some(t)) => {
            let rc = rlkd_config(config, variant, seed);
            let out = run_rlkd(
                &splits.train,
                &splits.dev,
                &splits.test,
                TeacherSource::Predictions(&t.train),
                &init,
                &rc,
                Some(dir),
            )?;
            selection = Some(selection_profile(&out.selector, &t.test, &splits.test)?);
            (out.student, out.trace)
        }
        (method, t) => {
            let strategy = match method {
                Method::Ft => None,
                Method::VkdSingle(k) => Some(EnsembleStrategy::Single(k - 1)),
                Method::VkdUniform => Some(EnsembleStrategy::Uniform),
                Method::VkdRandSingle => Some(EnsembleStrategy::RandSingle),
                Method::VkdBestSingle => Some(EnsembleStrategy::BestSingleOracle),
                Method::VkdWeighted => {
                    let t = t.as_ref().expect("teachers loaded");
                    let w = match &config.hyper.weights {
                        Some(w) => w.clone(),
                        None => accuracy_weights(&t.dev, &splits.dev)?,
                    };
                    ensemble_weights = Some(w.clone());
                    Some(EnsembleStrategy::Weighted(w))
                }
                Method::VkdLrTrain | Method::VkdLrDev => {
                    let t = t.as_ref().expect("teachers loaded");
                    let (preds, fit) = if method == Method::VkdLrTrain {
                        (&t.train, &splits.train)
                    } else {
                        (&t.dev, &splits.dev)
                    };
                    let w = fit_lr_ensemble(
                        preds,
                        fit,
                        config.hyper.lr_ensemble_iterations,
                        config.hyper.lr_ensemble_step,
                    )?;
                    ensemble_weights = Some(w.clone());
                    Some(EnsembleStrategy::LrLearned(w))
                }
                Method::Rlkd(_) => unreachable!("rlkd always loads teachers"),
            };
            let teacher_arg = match (&strategy, t) {
                (Some(s), Some(t)) => Some((&t.train, s)),
                _ => None,
            };
            let out = vanilla_kd_train(&init, teacher_arg, &kd, &splits.train, &splits.dev)?;
            let mut trace = RunTrace::from(out.trace);
            trace.test_accuracy = Some(evaluate_accuracy(&out.best, &splits.test)?);
            out.best.save(dir.join("student.json"))?;
            write_json(&dir.join("trace.json"), &trace)?;
            (out.best, trace)
        }
    };
    let test_accuracy = evaluate_accuracy(&student, &splits.test)?;
    trace.test_accuracy = Some(test_accuracy);
    let dev_accuracy = evaluate_accuracy(&student, &splits.dev)?;
    let teacher_summary = teachers
        .as_ref()
        .map(|t| -> anyhow::Result<TeacherSummary> {
            let k = t.test.num_teachers();
            Ok(TeacherSummary {
                single_test_accuracy: (0..k)
                    .map(|i| ensemble_accuracy(&EnsembleStrategy::Single(i), &t.test, &splits.test))
                    .collect::<Result<_, _>>()?,
                uniform_test_accuracy: ensemble_accuracy(&EnsembleStrategy::Uniform, &t.test, &splits.test)?,
            })
        })
        .transpose()?;
    Ok(RunRecord {
        seed,
        test_accuracy,
        dev_accuracy,
        best_epoch: trace.best_epoch,
        ensemble_weights,
        teachers: teacher_summary,
        selection,
    })
}

/// Runs every seed and writes `report.json` plus one `seed-<s>` directory
/// per seed under `out`.
pub fn run(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> anyhow::Result<MetricsReport> {
    let start = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let dir = out.join(format!("seed-{seed}"));
        let record = run_seed(config, seed, &dir)
            .with_context(|| format!("method {} seed {seed}", config.method))?;
        runs.push(record);
    }
    let report = MetricsReport {
        schema: REPORT_SCHEMA.into(),
        method: config.method.to_string(),
        config_hash: config.hash(),
        benchmark_hash: config.benchmark_hash(),
        summary: Summary::of(&runs),
        runs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out.join("report.json");
    fs::write(&path, report.to_json()).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(report)
}
