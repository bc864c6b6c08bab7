//! Distillation losses, teacher-ensemble strategies and the vanilla KD
//! training loop.
//!
//! Losses are per-batch means. The distillation term softens teacher and
//! student at the same temperature; the ground-truth term and every
//! accuracy use T = 1. Teacher indices are 0-based in this API.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::models::{check_dims, check_finite, epoch_order, evaluate_accuracy, Mlp, Optimizer, OptimizerSpec};
use crate::numerics::{
    argmax, clamped_ln, cross_entropy_hard, soft_ce_unchecked, softmax, softmax_unchecked, validate_probabilities,
    SeededRng,
};

/// Per-instance, per-teacher probability rows and hard losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPredictions {
    num_teachers: usize,
    num_classes: usize,
    temperature: f64,
    index: HashMap<u64, usize>,
    /// `[instance][teacher][class]` at the distillation temperature.
    soft: Vec<f64>,
    /// `[instance][teacher][class]` at T = 1.
    hard: Vec<f64>,
    /// `[instance][teacher]` hard cross-entropy against the label.
    losses: Vec<f64>,
}

/// Borrowed rows of a single instance.
#[derive(Debug, Clone, Copy)]
pub struct TeacherView<'a> {
    num_classes: usize,
    soft: &'a [f64],
    hard: &'a [f64],
    losses: &'a [f64],
}

impl<'a> TeacherView<'a> {
    pub fn num_teachers(&self) -> usize {
        self.losses.len()
    }

    pub fn soft_row(&self, teacher: usize) -> &'a [f64] {
        &self.soft[teacher * self.num_classes..(teacher + 1) * self.num_classes]
    }

    pub fn hard_row(&self, teacher: usize) -> &'a [f64] {
        &self.hard[teacher * self.num_classes..(teacher + 1) * self.num_classes]
    }

    pub fn losses(&self) -> &'a [f64] {
        self.losses
    }
}

impl TeacherPredictions {
    /// Builds predictions from T = 1 probability rows supplied by `row`.
    /// Softened rows are `p^(1/T)` renormalized.
    pub fn build(
        dataset: &Dataset,
        num_teachers: usize,
        temperature: f64,
        mut row: impl FnMut(&Instance, usize) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        Self::build_inner(dataset, num_teachers, temperature, |inst, k| {
            let hard = row(inst, k)?;
            let soft = if temperature == 1.0 {
                hard.clone()
            } else {
                let logs: Vec<f64> = hard.iter().map(|p| clamped_ln(*p)).collect();
                softmax_unchecked(&logs, temperature)
            };
            Ok((hard, soft))
        })
    }

    /// Builds predictions from teacher logits supplied by `logits`.
    pub fn build_from_logits(
        dataset: &Dataset,
        num_teachers: usize,
        temperature: f64,
        mut logits: impl FnMut(&Instance, usize) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        Self::build_inner(dataset, num_teachers, temperature, |inst, k| {
            let z = logits(inst, k)?;
            Ok((softmax(&z, 1.0)?, softmax(&z, temperature)?))
        })
    }

    fn build_inner(
        dataset: &Dataset,
        num_teachers: usize,
        temperature: f64,
        mut rows: impl FnMut(&Instance, usize) -> Result<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        if num_teachers == 0 {
            return Err(Error::invalid("need at least one teacher"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let c = dataset.num_classes();
        let n = dataset.len();
        let mut out = TeacherPredictions {
            num_teachers,
            num_classes: c,
            temperature,
            index: HashMap::with_capacity(n),
            soft: Vec::with_capacity(n * num_teachers * c),
            hard: Vec::with_capacity(n * num_teachers * c),
            losses: Vec::with_capacity(n * num_teachers),
        };
        for (pos, inst) in dataset.instances().iter().enumerate() {
            out.index.insert(inst.id, pos);
            for k in 0..num_teachers {
                let (hard, soft) = rows(inst, k)?;
                if hard.len() != c || soft.len() != c {
                    return Err(Error::InvalidRow {
                        id: inst.id,
                        teacher: k + 1,
                        detail: format!("row length {} for {c} classes", hard.len()),
                    });
                }
                out.losses.push(cross_entropy_hard(inst.label, &hard)?);
                out.hard.extend(hard);
                out.soft.extend(soft);
            }
        }
        Ok(out)
    }

    pub fn num_teachers(&self) -> usize {
        self.num_teachers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn view(&self, id: u64) -> Result<TeacherView<'_>> {
        let pos = *self
            .index
            .get(&id)
            .ok_or_else(|| Error::Coverage(format!("no teacher predictions for instance {id}")))?;
        let (k, c) = (self.num_teachers, self.num_classes);
        Ok(TeacherView {
            num_classes: c,
            soft: &self.soft[pos * k * c..(pos + 1) * k * c],
            hard: &self.hard[pos * k * c..(pos + 1) * k * c],
            losses: &self.losses[pos * k..(pos + 1) * k],
        })
    }

    /// Errors unless every instance of `dataset` is covered.
    pub fn check_coverage(&self, dataset: &Dataset) -> Result<()> {
        if dataset.num_classes() != self.num_classes {
            return Err(Error::Coverage(format!(
                "predictions have {} classes, dataset {}",
                self.num_classes,
                dataset.num_classes()
            )));
        }
        match dataset.ids().find(|id| !self.contains(*id)) {
            Some(id) => Err(Error::Coverage(format!("no teacher predictions for instance {id}"))),
            None => Ok(()),
        }
    }
}

/// Mean of the softened rows of `teachers`.
pub(crate) fn average_soft_rows(view: &TeacherView<'_>, teachers: &[usize]) -> Vec<f64> {
    average_rows(teachers.iter().map(|&k| view.soft_row(k)), view.num_classes)
}

/// Mean of the T = 1 rows of `teachers`.
pub(crate) fn average_hard_rows(view: &TeacherView<'_>, teachers: &[usize]) -> Vec<f64> {
    average_rows(teachers.iter().map(|&k| view.hard_row(k)), view.num_classes)
}

fn average_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, c: usize) -> Vec<f64> {
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for row in rows {
        for (s, p) in sum.iter_mut().zip(row) {
            *s += p;
        }
        count += 1;
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    sum
}

fn weighted_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, weights: &[f64], c: usize) -> Vec<f64> {
    let mut sum = vec![0.0; c];
    for (row, w) in rows.zip(weights) {
        for (s, p) in sum.iter_mut().zip(row) {
            *s += w * p;
        }
    }
    sum
}

/// Teacher with the lowest hard loss; ties go to the lowest index.
pub fn best_single_teacher(view: &TeacherView<'_>) -> usize {
    let losses = view.losses();
    let mut best = 0;
    for k in 1..losses.len() {
        if losses[k] < losses[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleStrategy {
    Single(usize),
    Uniform,
    Weighted(Vec<f64>),
    /// One uniformly drawn teacher per mini-batch; resolved by the
    /// training loop through [`rand_single_pick`].
    RandSingle,
    LrLearned(Vec<f64>),
    BestSingleOracle,
    SelectedSubset(Vec<usize>),
}

fn validate_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::invalid(format!("{} weights for {k} teachers", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("ensemble weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("ensemble weights sum to {total}")));
    }
    Ok(())
}

impl EnsembleStrategy {
    pub fn validate(&self, num_teachers: usize) -> Result<()> {
        match self {
            EnsembleStrategy::Single(k) if *k >= num_teachers => Err(Error::invalid(format!(
                "teacher {k} out of range for {num_teachers} teachers"
            ))),
            EnsembleStrategy::Weighted(w) | EnsembleStrategy::LrLearned(w) => {
                validate_weights(w, num_teachers)
            }
            EnsembleStrategy::SelectedSubset(s) => {
                if s.is_empty() {
                    Err(Error::invalid("empty teacher subset"))
                } else if s.iter().any(|k| *k >= num_teachers) {
                    Err(Error::invalid("teacher index out of range in subset"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn combine(&self, view: &TeacherView<'_>, softened: bool) -> Result<Vec<f64>> {
        let k = view.num_teachers();
        let c = view.num_classes;
        self.validate(k)?;
        let row = |t: usize| if softened { view.soft_row(t) } else { view.hard_row(t) };
        Ok(match self {
            EnsembleStrategy::Single(t) => row(*t).to_vec(),
            EnsembleStrategy::Uniform => average_rows((0..k).map(row), c),
            EnsembleStrategy::Weighted(w) | EnsembleStrategy::LrLearned(w) => {
                weighted_rows((0..k).map(row), w, c)
            }
            EnsembleStrategy::BestSingleOracle => row(best_single_teacher(view)).to_vec(),
            EnsembleStrategy::SelectedSubset(s) => average_rows(s.iter().map(|&t| row(t)), c),
            EnsembleStrategy::RandSingle => {
                return Err(Error::invalid(
                    "rand-single is resolved per mini-batch, not per instance",
                ))
            }
        })
    }
}

/// Aggregated soft label (distillation temperature) for one instance.
pub fn ensemble_soft_label(
    strategy: &EnsembleStrategy,
    id: u64,
    preds: &TeacherPredictions,
) -> Result<Vec<f64>> {
    strategy.combine(&preds.view(id)?, true)
}

/// Aggregated T = 1 distribution, used to score an ensemble as a predictor.
pub fn ensemble_probabilities(
    strategy: &EnsembleStrategy,
    id: u64,
    preds: &TeacherPredictions,
) -> Result<Vec<f64>> {
    strategy.combine(&preds.view(id)?, false)
}

/// Accuracy of an ensemble (or single teacher) treated as a classifier.
pub fn ensemble_accuracy(
    strategy: &EnsembleStrategy,
    preds: &TeacherPredictions,
    dataset: &Dataset,
) -> Result<f64> {
    let mut correct = 0;
    for inst in dataset.instances() {
        let p = ensemble_probabilities(strategy, inst.id, preds)?;
        if argmax(&p) + 1 == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Per-teacher accuracy on `dataset`, normalized to sum to one (uniform
/// if every teacher scores zero).
pub fn accuracy_weights(preds: &TeacherPredictions, dataset: &Dataset) -> Result<Vec<f64>> {
    let k = preds.num_teachers();
    let accs = (0..k)
        .map(|t| ensemble_accuracy(&EnsembleStrategy::Single(t), preds, dataset))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = accs.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / k as f64; k]);
    }
    Ok(accs.into_iter().map(|a| a / total).collect())
}

/// Uniform teacher index for one mini-batch.
pub fn rand_single_pick(num_teachers: usize, rng: &mut SeededRng) -> usize {
    rng.below(num_teachers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub temperature: f64,
    #[serde(default)]
    pub scale_by_t_squared: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Batch-mean losses of one KD evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    /// Distillation loss over instances that have a target (0 if none do).
    pub distill: f64,
    /// Ground-truth loss over the whole batch.
    pub ground_truth: f64,
    /// `alpha * distill + (1 - alpha) * ground_truth`.
    pub objective: f64,
    pub with_target: usize,
}

/// Evaluates the KD objective on a batch and optionally its gradient.
///
/// `targets[i]` is the softened soft label for `batch[i]`, or `None` when no
/// teacher was selected for it; such instances only contribute the
/// ground-truth term.
pub(crate) fn kd_batch(
    student: &Mlp,
    batch: &[&Instance],
    targets: &[Option<Vec<f64>>],
    alpha: f64,
    temperature: f64,
    scale_by_t_squared: bool,
    want_grad: bool,
) -> (BatchLosses, Option<Vec<f64>>) {
    let b = batch.len() as f64;
    let with_target = targets.iter().filter(|t| t.is_some()).count();
    let n_sel = with_target.max(1) as f64;
    let scale = if scale_by_t_squared { temperature * temperature } else { 1.0 };
    let mut grad = want_grad.then(|| vec![0.0; student.params().len()]);
    let mut dl_sum = 0.0;
    let mut ce_sum = 0.0;
    for (inst, target) in batch.iter().zip(targets) {
        let eval = |logits: &[f64]| {
            let p = softmax_unchecked(logits, 1.0);
            let ce = -clamped_ln(p[inst.label - 1]);
            let mut d = p;
            d[inst.label - 1] -= 1.0;
            for v in &mut d {
                *v /= b;
            }
            let dl = match target {
                Some(t) => {
                    let q = softmax_unchecked(logits, temperature);
                    let loss = scale * soft_ce_unchecked(t, &q);
                    for ((v, qc), tc) in d.iter_mut().zip(&q).zip(t) {
                        *v = (1.0 - alpha) * *v + alpha * scale * (qc - tc) / (temperature * n_sel);
                    }
                    loss
                }
                None => {
                    for v in d.iter_mut() {
                        *v *= 1.0 - alpha;
                    }
                    0.0
                }
            };
            ((ce, dl), d)
        };
        let (ce, dl) = match grad.as_mut() {
            Some(g) => student.accumulate(&inst.features, g, eval),
            None => {
                let logits = student.forward_logits(&inst.features).expect("dims checked");
                eval(&logits).0
            }
        };
        ce_sum += ce;
        dl_sum += dl;
    }
    let distill = if with_target == 0 { 0.0 } else { dl_sum / n_sel };
    let ground_truth = ce_sum / b;
    let losses = BatchLosses {
        distill,
        ground_truth,
        objective: kd_objective(distill, ground_truth, alpha),
        with_target,
    };
    (losses, grad)
}

fn check_batch(student: &Mlp, batch: &[&Instance]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for inst in batch {
        if inst.features.len() != student.input_dim() || inst.label > student.num_classes() || inst.label == 0 {
            return Err(Error::invalid(format!(
                "instance {} incompatible with student {:?}",
                inst.id,
                student.sizes()
            )));
        }
    }
    Ok(())
}

/// The KD objective on a batch with explicit per-instance targets, and its
/// gradient with respect to the student's flat parameters.
pub fn kd_loss_and_grad(
    student: &Mlp,
    batch: &[&Instance],
    targets: &[Option<Vec<f64>>],
    alpha: f64,
    temperature: f64,
    scale_by_t_squared: bool,
) -> Result<(BatchLosses, Vec<f64>)> {
    check_batch(student, batch)?;
    if targets.len() != batch.len() {
        return Err(Error::invalid("one target per instance required"));
    }
    if !(0.0..=1.0).contains(&alpha) || !(temperature > 0.0) {
        return Err(Error::invalid(format!("alpha {alpha} / temperature {temperature} out of range")));
    }
    for t in targets.iter().flatten() {
        if t.len() != student.num_classes() {
            return Err(Error::invalid("target width differs from student classes"));
        }
        validate_probabilities(t, 1e-6).map_err(Error::invalid)?;
    }
    let (losses, grad) = kd_batch(student, batch, targets, alpha, temperature, scale_by_t_squared, true);
    Ok((losses, grad.expect("gradient requested")))
}

/// Mean soft cross-entropy between each instance's averaged selected
/// teacher rows and the student, both at the configured temperature.
/// Instances with an empty selection are skipped; returns 0 if all are.
pub fn distillation_loss(
    student: &Mlp,
    batch: &[&Instance],
    preds: &TeacherPredictions,
    selections: &[Vec<usize>],
    config: &KdConfig,
) -> Result<f64> {
    check_batch(student, batch)?;
    if selections.len() != batch.len() {
        return Err(Error::invalid("one selection per instance required"));
    }
    let mut targets = Vec::with_capacity(batch.len());
    for (inst, sel) in batch.iter().zip(selections) {
        let view = preds.view(inst.id)?;
        if sel.iter().any(|k| *k >= preds.num_teachers()) {
            return Err(Error::invalid("selected teacher out of range"));
        }
        targets.push((!sel.is_empty()).then(|| average_soft_rows(&view, sel)));
    }
    let (losses, _) = kd_batch(
        student,
        batch,
        &targets,
        config.alpha,
        preds.temperature(),
        config.scale_by_t_squared,
        false,
    );
    Ok(losses.distill)
}

/// Mean hard cross-entropy of the student (T = 1) over the batch.
pub fn ground_truth_loss(student: &Mlp, batch: &[&Instance]) -> Result<f64> {
    check_batch(student, batch)?;
    let targets = vec![None; batch.len()];
    Ok(kd_batch(student, batch, &targets, 0.0, 1.0, false, false).0.ground_truth)
}

pub fn kd_objective(distill: f64, ground_truth: f64, alpha: f64) -> f64 {
    alpha * distill + (1.0 - alpha) * ground_truth
}

/// Fits mixture weights `softmax(u)` over teachers by full-batch gradient
/// descent on the negative log-likelihood of `sum_k w_k P_k(y | x)` (T = 1
/// rows) over `fit`.
///
/// A step that would raise the NLL is rejected and the step size halved, so
/// accepted iterates never increase it. Stops when an accepted step improves
/// the NLL by less than 1e-8 or after `iterations` attempts.
pub fn fit_lr_ensemble(
    preds: &TeacherPredictions,
    fit: &Dataset,
    iterations: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    Ok(fit_lr_ensemble_traced(preds, fit, iterations, learning_rate)?.0)
}

/// [`fit_lr_ensemble`] plus the NLL of every accepted iterate (starting
/// with the uniform initialization).
pub fn fit_lr_ensemble_traced(
    preds: &TeacherPredictions,
    fit: &Dataset,
    iterations: usize,
    learning_rate: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    preds.check_coverage(fit)?;
    if !(learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let k = preds.num_teachers();
    // label likelihood of each teacher on each instance
    let mut lik = Vec::with_capacity(fit.len() * k);
    for inst in fit.instances() {
        let view = preds.view(inst.id)?;
        lik.extend((0..k).map(|t| view.hard_row(t)[inst.label - 1]));
    }
    let n = fit.len() as f64;
    let nll_and_grad = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let w = softmax(u, 1.0)?;
        let mut nll = 0.0;
        let mut gw = vec![0.0; k];
        for row in lik.chunks(k) {
            let m: f64 = row.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>();
            let m = m.max(crate::numerics::PROB_FLOOR);
            nll -= m.ln() / n;
            for (g, p) in gw.iter_mut().zip(row) {
                *g -= p / (m * n);
            }
        }
        let mean: f64 = gw.iter().zip(&w).map(|(g, w)| g * w).sum();
        let gu = w.iter().zip(&gw).map(|(w, g)| w * (g - mean)).collect();
        if !nll.is_finite() {
            return Err(Error::Numeric("non-finite ensemble NLL".into()));
        }
        Ok((nll, gu))
    };
    let mut u = vec![0.0; k];
    let (mut nll, mut grad) = nll_and_grad(&u)?;
    let mut trace = vec![nll];
    let mut step = learning_rate;
    for _ in 0..iterations {
        if k == 1 {
            break;
        }
        let candidate: Vec<f64> = u.iter().zip(&grad).map(|(u, g)| u - step * g).collect();
        let (next_nll, next_grad) = nll_and_grad(&candidate)?;
        if next_nll > nll {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
            continue;
        }
        let improvement = nll - next_nll;
        u = candidate;
        nll = next_nll;
        grad = next_grad;
        trace.push(nll);
        if improvement < 1e-8 {
            break;
        }
    }
    Ok((softmax(&u, 1.0)?, trace))
}

/// Everything recorded by a KD training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdTrace {
    /// Objective value of every batch, evaluated before its update.
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned as `best`.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdOutcome {
    /// Parameters of the epoch with the best dev accuracy (earliest on
    /// ties); the initial student when no epoch ran.
    pub best: Mlp,
    pub last: Mlp,
    pub trace: KdTrace,
}

/// Tracks the epoch with the highest dev accuracy.
#[derive(Debug, Clone)]
pub(crate) struct BestEpoch {
    pub model: Mlp,
    pub epoch: Option<usize>,
    pub accuracy: f64,
}

impl BestEpoch {
    pub fn new(initial: &Mlp) -> Self {
        BestEpoch {
            model: initial.clone(),
            epoch: None,
            accuracy: f64::NEG_INFINITY,
        }
    }

    pub fn offer(&mut self, epoch: usize, accuracy: f64, model: &Mlp) {
        if accuracy > self.accuracy {
            self.accuracy = accuracy;
            self.epoch = Some(epoch);
            self.model = model.clone();
        }
    }
}

/// Trains `student` on the KD objective with the teacher signal given by
/// `teachers` (predictions plus aggregation strategy). With `None` the
/// student is fine-tuned on hard labels only and `alpha` is ignored.
///
/// The epoch order comes from stream `kd/shuffle` of `config.seed`;
/// rand-single picks from stream `kd/rand-single`.
pub fn vanilla_kd_train(
    student: &Mlp,
    teachers: Option<(&TeacherPredictions, &EnsembleStrategy)>,
    config: &KdConfig,
    train: &Dataset,
    dev: &Dataset,
) -> Result<KdOutcome> {
    config.validate()?;
    check_dims(student, train)?;
    check_dims(student, dev)?;
    if let Some((preds, strategy)) = teachers {
        preds.check_coverage(train)?;
        strategy.validate(preds.num_teachers())?;
    }
    let mut shuffle = SeededRng::new(config.seed, "kd/shuffle");
    let mut picks = SeededRng::new(config.seed, "kd/rand-single");
    let mut model = student.clone();
    let mut opt = Optimizer::new(config.optimizer, model.params().len())?;
    let mut best = BestEpoch::new(student);
    let mut trace = KdTrace {
        batch_losses: Vec::new(),
        epoch_losses: Vec::new(),
        dev_accuracy: Vec::new(),
        best_epoch: None,
    };
    let instances = train.instances();
    for epoch in 0..config.epochs {
        let order = epoch_order(instances.len(), &mut shuffle);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let (loss, grad) = match teachers {
                None => crate::models::hard_ce_loss_and_grad(&model, &batch)?,
                Some((preds, strategy)) => {
                    let resolved;
                    let strategy = if *strategy == EnsembleStrategy::RandSingle {
                        resolved = EnsembleStrategy::Single(rand_single_pick(preds.num_teachers(), &mut picks));
                        &resolved
                    } else {
                        strategy
                    };
                    let targets = batch
                        .iter()
                        .map(|inst| ensemble_soft_label(strategy, inst.id, preds).map(Some))
                        .collect::<Result<Vec<_>>>()?;
                    let (losses, grad) = kd_batch(
                        &model,
                        &batch,
                        &targets,
                        config.alpha,
                        preds.temperature(),
                        config.scale_by_t_squared,
                        true,
                    );
                    (losses.objective, grad.unwrap())
                }
            };
            check_finite(&[loss], epoch, b, "loss")?;
            check_finite(&grad, epoch, b, "gradient")?;
            opt.step(model.params_mut(), &grad);
            trace.batch_losses.push(loss);
            epoch_sum += loss;
            batches += 1;
        }
        trace.epoch_losses.push(epoch_sum / batches as f64);
        let acc = evaluate_accuracy(&model, dev)?;
        trace.dev_accuracy.push(acc);
        best.offer(epoch, acc, &model);
    }
    trace.best_epoch = best.epoch;
    Ok(KdOutcome {
        best: best.model,
        last: model,
        trace,
    })
}
