//! Feed-forward classifiers with hand-derived gradients, optimizers, the
//! region-corrupted teacher factory and evaluation helpers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Instance};
use crate::distillation::TeacherPredictions;
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_unchecked, SeededRng};

/// Dense ReLU network producing class logits.
///
/// Parameters live in one flat buffer. Layer `l` maps `sizes[l]` inputs to
/// `sizes[l + 1]` outputs and stores its weight matrix row-major
/// (`out x in`) followed by its bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let mut model = Mlp::zeros(sizes)?;
        let mut offset = 0;
        for w in model.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut model.params[offset..offset + fan_in * fan_out] {
                *p = (2.0 * rng.uniform() - 1.0) * limit;
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(model)
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut model = Mlp::zeros(&sizes)?;
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "{} parameters for layer sizes {sizes:?}, expected {}",
                params.len(),
                model.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "model expects {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        Ok(())
    }

    /// Activations of every layer, input first, logits last.
    fn forward_trace(&self, features: &[f64]) -> Vec<Vec<f64>> {
        let depth = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(depth + 1);
        acts.push(features.to_vec());
        let mut offset = 0;
        for l in 0..depth {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &acts[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            if l + 1 < depth {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
            offset += n_in * n_out + n_out;
        }
        acts
    }

    /// Accumulates the parameter gradient for one instance given the
    /// derivative of the loss with respect to its logits.
    fn backward(&self, acts: &[Vec<f64>], dlogits: &[f64], grad: &mut [f64]) {
        let depth = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(depth);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = dlogits.to_vec();
        for l in (0..depth).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, x) in g.iter_mut().zip(input) {
                    *gi += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, a) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * a;
                    }
                }
                // ReLU derivative: the stored activation is zero exactly
                // where the unit was inactive.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    pub fn forward_logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        Ok(self.forward_trace(features).pop().unwrap())
    }

    pub fn predict_proba(&self, features: &[f64], temperature: f64) -> Result<Vec<f64>> {
        crate::numerics::softmax(&self.forward_logits(features)?, temperature)
    }

    /// Predicted 1-based class label.
    pub fn predict_label(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward_logits(features)?) + 1)
    }

    /// Runs the forward pass, asks `dloss` for the logit derivative and
    /// backpropagates it into `grad`. Returns whatever `dloss` returns.
    pub(crate) fn accumulate<T>(
        &self,
        features: &[f64],
        grad: &mut [f64],
        dloss: impl FnOnce(&[f64]) -> (T, Vec<f64>),
    ) -> T {
        let acts = self.forward_trace(features);
        let (value, dlogits) = dloss(acts.last().unwrap());
        self.backward(&acts, &dlogits, grad);
        value
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&MlpCheckpoint::from(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: MlpCheckpoint = serde_json::from_str(&text)?;
        ckpt.try_into()
    }
}

/// On-disk model layout: per-layer row-major weights and biases.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl From<&Mlp> for MlpCheckpoint {
    fn from(model: &Mlp) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in model.sizes.windows(2) {
            let nw = w[0] * w[1];
            layers.push(LayerParams {
                weights: model.params[offset..offset + nw].to_vec(),
                biases: model.params[offset + nw..offset + nw + w[1]].to_vec(),
            });
            offset += nw + w[1];
        }
        MlpCheckpoint {
            layer_sizes: model.sizes.clone(),
            layers,
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(ckpt: MlpCheckpoint) -> Result<Self> {
        if ckpt.layers.len() + 1 != ckpt.layer_sizes.len() {
            return Err(Error::Schema("layer count does not match layer_sizes".into()));
        }
        let params = ckpt
            .layers
            .into_iter()
            .flat_map(|l| l.weights.into_iter().chain(l.biases))
            .collect();
        Mlp::from_parts(ckpt.layer_sizes, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate,
        }
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::adam(1e-3)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, num_params: usize) -> Result<Self> {
        if !(spec.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let acc = match spec.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => num_params,
        };
        Ok(Optimizer {
            spec,
            first: vec![0.0; acc],
            second: vec![0.0; acc],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        let lr = self.spec.learning_rate;
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = ADAM_BETA1 * self.first[i] + (1.0 - ADAM_BETA1) * g;
                    self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= lr * m / (v.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Mean hard cross-entropy over `batch` and its parameter gradient.
pub fn hard_ce_loss_and_grad(model: &Mlp, batch: &[&Instance]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut total = 0.0;
    for inst in batch {
        model.check_input(&inst.features)?;
        total += model.accumulate(&inst.features, &mut grad, |logits| {
            let p = softmax_unchecked(logits, 1.0);
            let loss = -crate::numerics::clamped_ln(p[inst.label - 1]);
            let mut d = p;
            d[inst.label - 1] -= 1.0;
            for v in &mut d {
                *v /= n;
            }
            (loss, d)
        });
    }
    Ok((total / n, grad))
}

/// Shuffled index order for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

pub(crate) fn check_finite(values: &[f64], epoch: usize, batch: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            batch,
            detail: format!("non-finite {what}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Mini-batch training on mean hard cross-entropy.
///
/// The epoch order comes from `rng`; returns the trained model and the mean
/// batch loss of every epoch.
pub fn train_classifier(
    model: &Mlp,
    train: &Dataset,
    spec: &TrainSpec,
    rng: &mut SeededRng,
) -> Result<(Mlp, Vec<f64>)> {
    check_dims(model, train)?;
    if spec.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = model.clone();
    let mut opt = Optimizer::new(spec.optimizer, model.params.len())?;
    let mut trace = Vec::with_capacity(spec.epochs);
    let instances = train.instances();
    for epoch in 0..spec.epochs {
        let order = epoch_order(instances.len(), rng);
        let mut sum = 0.0;
        let mut count = 0;
        for (b, chunk) in order.chunks(spec.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let (loss, grad) = hard_ce_loss_and_grad(&model, &batch)?;
            check_finite(&[loss], epoch, b, "loss")?;
            check_finite(&grad, epoch, b, "gradient")?;
            opt.step(&mut model.params, &grad);
            sum += loss;
            count += 1;
        }
        trace.push(sum / count as f64);
    }
    Ok((model, trace))
}

pub(crate) fn check_dims(model: &Mlp, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.feature_dim() || model.num_classes() != data.num_classes() {
        return Err(Error::invalid(format!(
            "model {:?} incompatible with dataset of d={} C={}",
            model.sizes,
            data.feature_dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

/// Fraction of instances whose argmax prediction equals the label.
pub fn evaluate_accuracy(model: &Mlp, dataset: &Dataset) -> Result<f64> {
    check_dims(model, dataset)?;
    let correct = dataset
        .instances()
        .iter()
        .filter(|inst| argmax(&model.forward_trace(&inst.features).pop().unwrap()) + 1 == inst.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy restricted to the instances carrying `region`.
pub fn region_accuracy(model: &Mlp, dataset: &Dataset, region: u32) -> Result<Option<f64>> {
    check_dims(model, dataset)?;
    let members: Vec<&Instance> = dataset
        .instances()
        .iter()
        .filter(|i| i.region == Some(region))
        .collect();
    if members.is_empty() {
        return Ok(None);
    }
    let correct = members
        .iter()
        .filter(|inst| argmax(&model.forward_trace(&inst.features).pop().unwrap()) + 1 == inst.label)
        .count();
    Ok(Some(correct as f64 / members.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Every label inside the region is replaced by a uniformly random class.
    UniformRelabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherCorruptionSpec {
    pub region: u32,
    pub mode: CorruptionMode,
}

impl TeacherCorruptionSpec {
    pub fn relabel(region: u32) -> Self {
        TeacherCorruptionSpec {
            region,
            mode: CorruptionMode::UniformRelabel,
        }
    }
}

/// How to build a pool of teachers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherPoolSpec {
    /// Hidden layer sizes of each teacher; the pool size is `hidden.len()`.
    pub hidden: Vec<Vec<usize>>,
    /// Optional corruption per teacher (same length as `hidden`).
    pub corruption: Vec<Option<TeacherCorruptionSpec>>,
    pub train: TrainSpec,
    pub seed: u64,
}

/// Trains one teacher per entry of `spec.hidden`, each on its own
/// label-corrupted copy of `train` with its own seed streams. Teachers are
/// trained concurrently and returned in index order.
pub fn make_teacher_pool(train: &Dataset, spec: &TeacherPoolSpec) -> Result<Vec<Mlp>> {
    let k = spec.hidden.len();
    if k == 0 {
        return Err(Error::invalid("teacher pool needs at least one teacher"));
    }
    if spec.corruption.len() != k {
        return Err(Error::invalid(format!(
            "{} corruption entries for {k} teachers",
            spec.corruption.len()
        )));
    }
    let regions = train.regions();
    for c in spec.corruption.iter().flatten() {
        if !regions.contains(&c.region) {
            return Err(Error::invalid(format!(
                "corruption region {} not present in the training data",
                c.region
            )));
        }
    }
    let root = SeededRng::new(spec.seed, "teachers");
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k)
            .map(|t| {
                let rng = root.stream(&format!("teacher-{}", t + 1));
                let hidden = &spec.hidden[t];
                let corruption = spec.corruption[t];
                let train_spec = spec.train;
                scope.spawn(move || {
                    train_teacher(train, hidden, corruption, &train_spec, rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("teacher training thread panicked"))
            .collect()
    })
}

fn train_teacher(
    train: &Dataset,
    hidden: &[usize],
    corruption: Option<TeacherCorruptionSpec>,
    spec: &TrainSpec,
    root: SeededRng,
) -> Result<Mlp> {
    let mut relabel = root.stream("relabel");
    let data = match corruption {
        Some(c) => {
            let classes = train.num_classes();
            train.with_labels(|inst| {
                if inst.region == Some(c.region) {
                    relabel.below(classes) + 1
                } else {
                    inst.label
                }
            })?
        }
        None => train.clone(),
    };
    let mut sizes = vec![train.feature_dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(train.num_classes());
    let init = Mlp::glorot(&sizes, &mut root.stream("init"))?;
    let (model, _) = train_classifier(&init, &data, spec, &mut root.stream("shuffle"))?;
    Ok(model)
}

/// Teacher rows at `temperature` and at T = 1 plus per-teacher hard losses.
pub fn compute_teacher_predictions(
    pool: &[Mlp],
    dataset: &Dataset,
    temperature: f64,
) -> Result<TeacherPredictions> {
    if pool.is_empty() {
        return Err(Error::invalid("empty teacher pool"));
    }
    for teacher in pool {
        check_dims(teacher, dataset)?;
    }
    TeacherPredictions::build_from_logits(dataset, pool.len(), temperature, |inst, k| {
        pool[k].forward_logits(&inst.features)
    })
}
