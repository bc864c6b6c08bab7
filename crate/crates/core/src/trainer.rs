//! Pretraining of student and selector, and the joint batch-wise training
//! of KD and teacher selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Instance};
use crate::distillation::{
    average_hard_rows, average_soft_rows, kd_batch, vanilla_kd_train, BestEpoch, EnsembleStrategy, KdConfig,
    KdTrace, TeacherPredictions,
};
use crate::error::{Error, Result};
use crate::models::{check_dims, check_finite, compute_teacher_predictions, epoch_order, evaluate_accuracy, Mlp, Optimizer};
use crate::numerics::{argmax, clamped_ln, SeededRng};
use crate::policy::{
    build_state, compute_reward, state_dim, EpisodeHistory, GradientMode, PolicyState, RewardBaseline, RewardConfig,
    RewardKind, TeacherSelector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// KD step then selector step on every batch.
    #[default]
    PerBatchJoint,
    /// Odd batches update the student, even batches the selector.
    AlternatingBatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorPretrainReward {
    /// Negative hard loss of the average of the selected teachers.
    #[default]
    EnsembleQuality,
    /// Negative KD losses of the fixed pretrained student under the
    /// selected teachers.
    StudentReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub reward: SelectorPretrainReward,
    #[serde(default)]
    pub baseline_decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlkdConfig {
    /// Student settings. `kd.epochs` is the budget of the uniform-ensemble
    /// pretraining; the joint phase runs for `epochs`.
    pub kd: KdConfig,
    pub reward: RewardConfig,
    pub beta: f64,
    pub epochs: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_gradient_mode")]
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub baseline_decay: Option<f64>,
    pub selector_pretrain: SelectorPretrainConfig,
    pub policy_seed: u64,
    /// Initial bias of every selection agent.
    #[serde(default)]
    pub init_bias: f64,
}

fn default_gradient_mode() -> GradientMode {
    GradientMode::LogGradient
}

fn check_decay(decay: Option<f64>) -> Result<()> {
    match decay {
        Some(d) if !(0.0..1.0).contains(&d) => Err(Error::invalid(format!("baseline decay {d} outside [0, 1)"))),
        _ => Ok(()),
    }
}

impl SelectorPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("selector batch size must be positive"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("selector learning rate must be nonnegative"));
        }
        check_decay(self.baseline_decay)
    }
}

impl RlkdConfig {
    pub fn validate(&self) -> Result<()> {
        self.kd.validate()?;
        self.reward.validate()?;
        self.selector_pretrain.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("joint training needs at least one epoch"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("policy learning rate must be nonnegative"));
        }
        if !self.init_bias.is_finite() {
            return Err(Error::invalid("initial bias must be finite"));
        }
        check_decay(self.baseline_decay)
    }
}

/// Mean selection probability of each teacher on one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSelection {
    pub region: u32,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProfile {
    pub overall: Vec<f64>,
    pub by_region: Vec<RegionSelection>,
}

impl SelectionProfile {
    pub fn region(&self, region: u32) -> Option<&[f64]> {
        self.by_region.iter().find(|r| r.region == region).map(|r| r.rates.as_slice())
    }

    /// Mean selection probability of `teacher` over all regions except
    /// `region`, weighting each region by its instance count.
    pub fn elsewhere(&self, teacher: usize, region: u32, counts: &BTreeMap<u32, usize>) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in &self.by_region {
            if r.region != region {
                let c = counts.get(&r.region).copied().unwrap_or(0);
                sum += r.rates[teacher] * c as f64;
                n += c;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Number of instances per region tag.
pub fn region_counts(dataset: &Dataset) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for r in dataset.instances().iter().filter_map(|i| i.region) {
        *counts.entry(r).or_insert(0) += 1;
    }
    counts
}

/// Mean selection probability per teacher over `dataset`, overall and per
/// region tag.
pub fn selection_profile(
    selector: &TeacherSelector,
    preds: &TeacherPredictions,
    dataset: &Dataset,
) -> Result<SelectionProfile> {
    let k = selector.num_teachers();
    let mut overall = vec![0.0; k];
    let mut regions: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for inst in dataset.instances() {
        let state = instance_state(selector, preds, inst)?;
        let slot = inst.region.map(|r| regions.entry(r).or_insert_with(|| (vec![0.0; k], 0)));
        let probs: Vec<f64> = (0..k).map(|t| selector.select_prob(t, &state)).collect();
        for (o, p) in overall.iter_mut().zip(&probs) {
            *o += p;
        }
        if let Some((sums, n)) = slot {
            for (s, p) in sums.iter_mut().zip(&probs) {
                *s += p;
            }
            *n += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(SelectionProfile {
        overall: overall.into_iter().map(|s| s / n).collect(),
        by_region: regions
            .into_iter()
            .map(|(region, (sums, n))| RegionSelection {
                region,
                rates: sums.into_iter().map(|s| s / n as f64).collect(),
            })
            .collect(),
    })
}

fn instance_state(selector: &TeacherSelector, preds: &TeacherPredictions, inst: &Instance) -> Result<PolicyState> {
    let state = build_state(&inst.features, &preds.view(inst.id)?);
    if state.len() != selector.state_dim() {
        return Err(Error::invalid(format!(
            "state length {} does not match selector ({})",
            state.len(),
            selector.state_dim()
        )));
    }
    Ok(state)
}

/// Per-epoch and per-batch record of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTrace {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_dev_accuracy: Vec<f64>,
    /// Selection profile of the policy on the training set after each
    /// epoch; empty for runs without a selector.
    pub epoch_selection: Vec<SelectionProfile>,
    /// KD objective of every student update, before the update.
    pub batch_losses: Vec<f64>,
    /// Reward of every selector update.
    pub batch_rewards: Vec<f64>,
    /// Dev-subsample accuracy behind every r3 reward.
    pub batch_dev_accuracy: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl From<KdTrace> for RunTrace {
    fn from(t: KdTrace) -> Self {
        RunTrace {
            best_dev_accuracy: t.best_epoch.map(|e| t.dev_accuracy[e]),
            best_epoch: t.best_epoch,
            epoch_train_loss: t.epoch_losses,
            epoch_dev_accuracy: t.dev_accuracy,
            batch_losses: t.batch_losses,
            ..RunTrace::default()
        }
    }
}

/// Uniform-ensemble V-KD for `config.kd.epochs` epochs; returns the
/// epoch-best student.
pub fn pretrain_student(
    student: &Mlp,
    preds: &TeacherPredictions,
    config: &KdConfig,
    train: &Dataset,
    dev: &Dataset,
) -> Result<Mlp> {
    Ok(vanilla_kd_train(student, Some((preds, &EnsembleStrategy::Uniform)), config, train, dev)?.best)
}

/// Fits the selector before joint training, without updating any student.
///
/// With [`SelectorPretrainReward::StudentReturn`] the fixed `student` and
/// `kd` settings define the reward; `student` is unused otherwise.
pub fn pretrain_selector(
    selector: &TeacherSelector,
    preds: &TeacherPredictions,
    train: &Dataset,
    config: &SelectorPretrainConfig,
    student: Option<(&Mlp, &KdConfig)>,
) -> Result<(TeacherSelector, Vec<f64>)> {
    config.validate()?;
    preds.check_coverage(train)?;
    if config.reward == SelectorPretrainReward::StudentReturn && student.is_none() {
        return Err(Error::invalid("student-return pretraining needs the pretrained student"));
    }
    let mut selector = selector.clone();
    let mut shuffle = SeededRng::new(config.seed, "selector/shuffle");
    let mut actions_rng = SeededRng::new(config.seed, "selector/actions");
    let mut baseline = config.baseline_decay.map(RewardBaseline::new);
    let mut history = EpisodeHistory::new();
    let mut rewards = Vec::new();
    let instances = train.instances();
    for _ in 0..config.epochs {
        let order = epoch_order(instances.len(), &mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let selections = sample_batch(&selector, preds, &batch, &mut actions_rng, &mut history)?;
            let reward = match config.reward {
                SelectorPretrainReward::EnsembleQuality => {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for (inst, sel) in batch.iter().zip(&selections) {
                        if sel.is_empty() {
                            continue;
                        }
                        let p = average_hard_rows(&preds.view(inst.id)?, sel);
                        sum += -clamped_ln(p[inst.label - 1]);
                        n += 1;
                    }
                    (n > 0).then(|| -sum / n as f64)
                }
                SelectorPretrainReward::StudentReturn => {
                    let (model, kd) = student.expect("checked above");
                    check_dims(model, train)?;
                    let targets = selected_targets(preds, &batch, &selections)?;
                    let (losses, _) = kd_batch(
                        model,
                        &batch,
                        &targets,
                        kd.alpha,
                        preds.temperature(),
                        kd.scale_by_t_squared,
                        false,
                    );
                    (losses.with_target > 0).then(|| -losses.ground_truth - losses.distill)
                }
            };
            if let Some(r) = reward {
                let signal = baseline.as_mut().map_or(r, |b| b.advantage(r));
                selector.update(&history, signal, config.beta, GradientMode::LogGradient)?;
                rewards.push(r);
            }
            history.clear();
        }
    }
    Ok((selector, rewards))
}

/// Samples actions for every instance of the batch and records them.
/// Returns each instance's selected teachers.
fn sample_batch(
    selector: &TeacherSelector,
    preds: &TeacherPredictions,
    batch: &[&Instance],
    rng: &mut SeededRng,
    history: &mut EpisodeHistory,
) -> Result<Vec<Vec<usize>>> {
    let mut selections = Vec::with_capacity(batch.len());
    for inst in batch {
        let state = instance_state(selector, preds, inst)?;
        let (actions, probs) = selector.sample_actions(&state, rng)?;
        selections.push(history.record(inst.id, state, &actions, &probs));
    }
    debug_assert_eq!(history.len(), batch.len() * selector.num_teachers());
    Ok(selections)
}

fn selected_targets(
    preds: &TeacherPredictions,
    batch: &[&Instance],
    selections: &[Vec<usize>],
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut targets = Vec::with_capacity(batch.len());
    for (inst, sel) in batch.iter().zip(selections) {
        targets.push(if sel.is_empty() {
            None
        } else {
            Some(average_soft_rows(&preds.view(inst.id)?, sel))
        });
    }
    Ok(targets)
}

fn dev_subsample(dev: &Dataset, config: &RewardConfig) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dev.len()).collect();
    if config.dev_subsample < dev.len() {
        SeededRng::new(config.dev_seed, "reward/dev-subsample").shuffle(&mut idx);
        idx.truncate(config.dev_subsample);
        idx.sort_unstable();
    }
    idx
}

fn subset_accuracy(model: &Mlp, dev: &Dataset, subset: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for &i in subset {
        let inst = &dev.instances()[i];
        if argmax(&model.forward_logits(&inst.features)?) + 1 == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / subset.len() as f64)
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    /// Student of the epoch with the best dev accuracy.
    pub student: Mlp,
    pub last_student: Mlp,
    pub selector: TeacherSelector,
    pub trace: RunTrace,
}

/// Joint training: each batch samples teacher selections, takes one KD
/// step on the averaged selected soft labels, then rewards the selector
/// with the losses of the updated student.
///
/// Epoch order comes from stream `kd/shuffle` of `config.kd.seed`, the same
/// stream V-KD uses, and actions from `policy/actions` of
/// `config.policy_seed`.
pub fn joint_train(
    student: &Mlp,
    selector: &TeacherSelector,
    preds: &TeacherPredictions,
    train: &Dataset,
    dev: &Dataset,
    config: &RlkdConfig,
) -> Result<JointOutcome> {
    config.validate()?;
    check_dims(student, train)?;
    check_dims(student, dev)?;
    preds.check_coverage(train)?;
    let kd = &config.kd;
    let mut shuffle = SeededRng::new(kd.seed, "kd/shuffle");
    let mut actions_rng = SeededRng::new(config.policy_seed, "policy/actions");
    let subset = dev_subsample(dev, &config.reward);
    let mut baseline = config.baseline_decay.map(RewardBaseline::new);
    let mut model = student.clone();
    let mut selector = selector.clone();
    let mut opt = Optimizer::new(kd.optimizer, model.params().len())?;
    let mut best = BestEpoch::new(student);
    let mut history = EpisodeHistory::new();
    let mut trace = RunTrace::default();
    let instances = train.instances();
    for epoch in 0..config.epochs {
        let order = epoch_order(instances.len(), &mut shuffle);
        let mut loss_sum = 0.0;
        let mut kd_steps = 0usize;
        for (b, chunk) in order.chunks(kd.batch_size).enumerate() {
            let (do_kd, do_ts) = match config.schedule {
                Schedule::PerBatchJoint => (true, true),
                Schedule::AlternatingBatches => (b % 2 == 0, b % 2 == 1),
            };
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let selections = sample_batch(&selector, preds, &batch, &mut actions_rng, &mut history)?;
            let targets = selected_targets(preds, &batch, &selections)?;
            if do_kd {
                let (losses, grad) =
                    kd_batch(&model, &batch, &targets, kd.alpha, preds.temperature(), kd.scale_by_t_squared, true);
                let grad = grad.expect("gradient requested");
                check_finite(&[losses.objective], epoch, b, "loss")?;
                check_finite(&grad, epoch, b, "gradient")?;
                opt.step(model.params_mut(), &grad);
                trace.batch_losses.push(losses.objective);
                loss_sum += losses.objective;
                kd_steps += 1;
            }
            if do_ts {
                let (losses, _) =
                    kd_batch(&model, &batch, &targets, kd.alpha, preds.temperature(), kd.scale_by_t_squared, false);
                let dev_acc = if config.reward.variant == RewardKind::R3 {
                    let acc = subset_accuracy(&model, dev, &subset)?;
                    trace.batch_dev_accuracy.push(acc);
                    Some(acc)
                } else {
                    None
                };
                let reward = compute_reward(&config.reward, losses.ground_truth, losses.distill, dev_acc)?;
                check_finite(&[reward], epoch, b, "reward")?;
                let signal = baseline.as_mut().map_or(reward, |bl| bl.advantage(reward));
                selector.update(&history, signal, config.beta, config.gradient_mode)?;
                trace.batch_rewards.push(reward);
            }
            history.clear();
        }
        trace.epoch_train_loss.push(loss_sum / kd_steps as f64);
        let acc = evaluate_accuracy(&model, dev)?;
        trace.epoch_dev_accuracy.push(acc);
        trace.epoch_selection.push(selection_profile(&selector, preds, train)?);
        best.offer(epoch, acc, &model);
    }
    trace.best_epoch = best.epoch;
    trace.best_dev_accuracy = best.epoch.map(|_| best.accuracy);
    Ok(JointOutcome {
        student: best.model,
        last_student: model,
        selector,
        trace,
    })
}

/// Where the teacher signal of a run comes from.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    Pool(&'a [Mlp]),
    /// Precomputed rows covering the training set.
    Predictions(&'a TeacherPredictions),
}

#[derive(Debug, Clone)]
pub struct RlkdOutcome {
    pub student: Mlp,
    pub selector: TeacherSelector,
    pub trace: RunTrace,
}

/// Full pipeline: teacher predictions, student pretraining, selector
/// pretraining, joint training and a final test evaluation. When `out_dir`
/// is given, writes `student.json`, `policy.json` and `trace.json` there.
pub fn run_rlkd(
    train: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    teachers: TeacherSource<'_>,
    student_init: &Mlp,
    config: &RlkdConfig,
    out_dir: Option<&Path>,
) -> Result<RlkdOutcome> {
    config.validate()?;
    check_dims(student_init, test)?;
    let owned;
    let preds = match teachers {
        TeacherSource::Pool(pool) => {
            owned = compute_teacher_predictions(pool, train, config.kd.temperature)?;
            &owned
        }
        TeacherSource::Predictions(p) => p,
    };
    let student = pretrain_student(student_init, preds, &config.kd, train, dev)?;
    let dim = state_dim(train.feature_dim(), train.num_classes(), preds.num_teachers());
    let selector = TeacherSelector::with_bias(preds.num_teachers(), dim, config.init_bias)?;
    let (selector, _) = pretrain_selector(
        &selector,
        preds,
        train,
        &config.selector_pretrain,
        Some((&student, &config.kd)),
    )?;
    let joint = joint_train(&student, &selector, preds, train, dev, config)?;
    let mut trace = joint.trace;
    trace.test_accuracy = Some(evaluate_accuracy(&joint.student, test)?);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        joint.student.save(dir.join("student.json"))?;
        joint.selector.save(dir.join("policy.json"))?;
        let path = dir.join("trace.json");
        fs::write(&path, serde_json::to_string_pretty(&trace)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RlkdOutcome {
        student: joint.student,
        selector: joint.selector,
        trace,
    })
}
