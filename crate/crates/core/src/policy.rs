//! The teacher selector: one logistic agent per teacher deciding, instance
//! by instance, whether that teacher's soft label is used.
//!
//! Every agent sees the same state vector
//! `[representation (d) | teacher probability rows (K x C) | teacher losses (K)]`
//! and owns its own weights and bias. Episodes are mini-batches; a single
//! delayed reward is shared by all steps of an episode.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distillation::TeacherView;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, SeededRng};

pub fn state_dim(feature_dim: usize, num_classes: usize, num_teachers: usize) -> usize {
    feature_dim + (num_classes + 1) * num_teachers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyState(pub Vec<f64>);

impl PolicyState {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Concatenates the instance representation, every teacher's T = 1 row and
/// every teacher's hard loss.
pub fn build_state(representation: &[f64], teachers: &TeacherView<'_>) -> PolicyState {
    let k = teachers.num_teachers();
    let mut v = Vec::with_capacity(representation.len() + k * (teachers.hard_row(0).len() + 1));
    v.extend_from_slice(representation);
    for t in 0..k {
        v.extend_from_slice(teachers.hard_row(t));
    }
    v.extend_from_slice(teachers.losses());
    PolicyState(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// REINFORCE: reward times the gradient of `log pi`.
    LogGradient,
    /// Reward times the gradient of `pi` itself.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSelector {
    num_teachers: usize,
    state_dim: usize,
    /// `[teacher][state_dim]`
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl TeacherSelector {
    pub fn new(num_teachers: usize, state_dim: usize) -> Result<Self> {
        Self::with_bias(num_teachers, state_dim, 0.0)
    }

    /// Zero weights, every agent starting from `bias`.
    pub fn with_bias(num_teachers: usize, state_dim: usize, bias: f64) -> Result<Self> {
        if num_teachers == 0 || state_dim == 0 {
            return Err(Error::invalid("selector needs teachers and a non-empty state"));
        }
        Ok(TeacherSelector {
            num_teachers,
            state_dim,
            weights: vec![0.0; num_teachers * state_dim],
            biases: vec![bias; num_teachers],
        })
    }

    pub fn num_teachers(&self) -> usize {
        self.num_teachers
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn agent_weights(&self, teacher: usize) -> &[f64] {
        &self.weights[teacher * self.state_dim..(teacher + 1) * self.state_dim]
    }

    pub fn agent_weights_mut(&mut self, teacher: usize) -> &mut [f64] {
        &mut self.weights[teacher * self.state_dim..(teacher + 1) * self.state_dim]
    }

    pub fn bias(&self, teacher: usize) -> f64 {
        self.biases[teacher]
    }

    pub fn set_bias(&mut self, teacher: usize, bias: f64) {
        self.biases[teacher] = bias;
    }

    /// Flat parameter vector `[A_1, b_1, A_2, b_2, ...]`.
    pub fn flat_params(&self) -> Vec<f64> {
        (0..self.num_teachers)
            .flat_map(|k| self.agent_weights(k).iter().copied().chain([self.biases[k]]))
            .collect()
    }

    fn check_state(&self, state: &PolicyState) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::invalid(format!(
                "state has {} entries, selector expects {}",
                state.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    pub fn logit(&self, teacher: usize, state: &PolicyState) -> f64 {
        dot(self.agent_weights(teacher), state.as_slice()) + self.biases[teacher]
    }

    /// Probability that agent `teacher` selects its teacher.
    pub fn select_prob(&self, teacher: usize, state: &PolicyState) -> f64 {
        sigmoid(self.logit(teacher, state))
    }

    pub fn action_prob(&self, teacher: usize, state: &PolicyState, selected: bool) -> f64 {
        let s = self.select_prob(teacher, state);
        if selected {
            s
        } else {
            1.0 - s
        }
    }

    /// Independent Bernoulli draws, one per agent. Returns the actions and
    /// the selection probabilities they were drawn with.
    pub fn sample_actions(
        &self,
        state: &PolicyState,
        rng: &mut SeededRng,
    ) -> Result<(Vec<bool>, Vec<f64>)> {
        self.check_state(state)?;
        let probs: Vec<f64> = (0..self.num_teachers).map(|k| self.select_prob(k, state)).collect();
        let actions = probs.iter().map(|p| rng.uniform() < *p).collect();
        Ok((actions, probs))
    }

    /// Gradient of `log pi(state, action)` with respect to `[A_k; b_k]`.
    pub fn log_prob_grad(&self, teacher: usize, state: &PolicyState, selected: bool) -> Vec<f64> {
        let s = self.select_prob(teacher, state);
        let a = if selected { 1.0 } else { 0.0 };
        let coef = a - s;
        state.as_slice().iter().map(|f| coef * f).chain([coef]).collect()
    }

    /// Gradient of `pi(state, action)` with respect to `[A_k; b_k]`.
    pub fn prob_grad(&self, teacher: usize, state: &PolicyState, selected: bool) -> Vec<f64> {
        let s = self.select_prob(teacher, state);
        let sign = if selected { 1.0 } else { -1.0 };
        let coef = sign * s * (1.0 - s);
        state.as_slice().iter().map(|f| coef * f).chain([coef]).collect()
    }

    /// One policy-gradient step from a completed episode. Every rewarded
    /// step contributes `beta * reward * grad`; the summed update is applied
    /// once at the end.
    pub fn update(
        &mut self,
        history: &EpisodeHistory,
        reward: f64,
        beta: f64,
        mode: GradientMode,
    ) -> Result<()> {
        if !(beta >= 0.0) {
            return Err(Error::invalid("policy learning rate must be nonnegative"));
        }
        if !reward.is_finite() {
            return Err(Error::Numeric(format!("non-finite reward {reward}")));
        }
        let width = self.state_dim + 1;
        let mut delta = vec![0.0; self.num_teachers * width];
        for step in history.steps.iter().filter(|s| s.rewarded) {
            let state = &history.states[step.state];
            let grad = match mode {
                GradientMode::LogGradient => self.log_prob_grad(step.teacher, state, step.action),
                GradientMode::Literal => self.prob_grad(step.teacher, state, step.action),
            };
            let slot = &mut delta[step.teacher * width..(step.teacher + 1) * width];
            for (d, g) in slot.iter_mut().zip(&grad) {
                *d += beta * reward * g;
            }
        }
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numeric("non-finite policy update".into()));
        }
        for k in 0..self.num_teachers {
            let slot = &delta[k * width..(k + 1) * width];
            for (w, d) in self.agent_weights_mut(k).iter_mut().zip(slot) {
                *w += d;
            }
            self.biases[k] += slot[width - 1];
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&SelectorCheckpoint::from(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: SelectorCheckpoint = serde_json::from_str(&text)?;
        ckpt.try_into()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorCheckpoint {
    pub num_teachers: usize,
    pub state_dim: usize,
    pub agents: Vec<AgentParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl From<&TeacherSelector> for SelectorCheckpoint {
    fn from(sel: &TeacherSelector) -> Self {
        SelectorCheckpoint {
            num_teachers: sel.num_teachers,
            state_dim: sel.state_dim,
            agents: (0..sel.num_teachers)
                .map(|k| AgentParams {
                    weights: sel.agent_weights(k).to_vec(),
                    bias: sel.biases[k],
                })
                .collect(),
        }
    }
}

impl TryFrom<SelectorCheckpoint> for TeacherSelector {
    type Error = Error;

    fn try_from(ckpt: SelectorCheckpoint) -> Result<Self> {
        if ckpt.agents.len() != ckpt.num_teachers {
            return Err(Error::Schema("agent count does not match num_teachers".into()));
        }
        let mut sel = TeacherSelector::new(ckpt.num_teachers, ckpt.state_dim)?;
        for (k, agent) in ckpt.agents.into_iter().enumerate() {
            if agent.weights.len() != ckpt.state_dim {
                return Err(Error::Schema(format!("agent {} has wrong weight length", k + 1)));
            }
            if agent.weights.iter().any(|w| !w.is_finite()) || !agent.bias.is_finite() {
                return Err(Error::Numeric(format!("agent {} has non-finite parameters", k + 1)));
            }
            sel.agent_weights_mut(k).copy_from_slice(&agent.weights);
            sel.biases[k] = agent.bias;
        }
        Ok(sel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    R1,
    R2,
    R3,
}

fn default_dev_subsample() -> usize {
    256
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub variant: RewardKind,
    /// Mixing weight of the training-set term; required for r3.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_dev_subsample")]
    pub dev_subsample: usize,
    #[serde(default)]
    pub dev_seed: u64,
}

impl RewardConfig {
    pub fn new(variant: RewardKind) -> Self {
        RewardConfig {
            variant,
            gamma: None,
            dev_subsample: default_dev_subsample(),
            dev_seed: 0,
        }
    }

    pub fn r3(gamma: f64) -> Self {
        RewardConfig {
            gamma: Some(gamma),
            ..RewardConfig::new(RewardKind::R3)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.gamma) {
            (RewardKind::R3, None) => Err(Error::invalid("reward r3 requires gamma")),
            (_, Some(g)) if !(0.0..=1.0).contains(&g) => {
                Err(Error::invalid(format!("gamma {g} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Delayed episode reward from batch-mean losses of the updated student.
pub fn compute_reward(
    config: &RewardConfig,
    ground_truth: f64,
    distill: f64,
    dev_accuracy: Option<f64>,
) -> Result<f64> {
    config.validate()?;
    match config.variant {
        RewardKind::R1 => Ok(-ground_truth),
        RewardKind::R2 => Ok(-ground_truth - distill),
        RewardKind::R3 => {
            let acc = dev_accuracy
                .ok_or_else(|| Error::invalid("reward r3 requires a dev accuracy"))?;
            let gamma = config.gamma.expect("validated");
            Ok(gamma * (-ground_truth - distill) + (1.0 - gamma) * acc)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub id: u64,
    pub teacher: usize,
    /// Index into [`EpisodeHistory::states`].
    pub state: usize,
    pub action: bool,
    pub prob: f64,
    /// False for steps of instances that selected no teacher; those get no
    /// reward.
    pub rewarded: bool,
}

/// Steps of the current episode (one mini-batch).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeHistory {
    states: Vec<PolicyState>,
    steps: Vec<Step>,
}

impl EpisodeHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the K actions taken for one instance. Returns the indices of
    /// the selected teachers.
    pub fn record(&mut self, id: u64, state: PolicyState, actions: &[bool], probs: &[f64]) -> Vec<usize> {
        let selected: Vec<usize> = actions
            .iter()
            .enumerate()
            .filter_map(|(k, a)| a.then_some(k))
            .collect();
        let idx = self.states.len();
        self.states.push(state);
        for (k, (&action, &prob)) in actions.iter().zip(probs).enumerate() {
            self.steps.push(Step {
                id,
                teacher: k,
                state: idx,
                action,
                prob,
                rewarded: !selected.is_empty(),
            });
        }
        selected
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Mutable steps, e.g. to credit a reward to a subset of agents.
    pub fn steps_mut(&mut self) -> &mut [Step] {
        &mut self.steps
    }

    pub fn states(&self) -> &[PolicyState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.states.clear();
        self.steps.clear();
    }
}

/// Exponential moving average of past rewards, subtracted from each new
/// reward before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBaseline {
    decay: f64,
    value: Option<f64>,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        RewardBaseline { decay, value: None }
    }

    /// Advantage of `reward` against the current baseline, then folds the
    /// reward into the average.
    pub fn advantage(&mut self, reward: f64) -> f64 {
        let adv = reward - self.value.unwrap_or(reward);
        self.value = Some(match self.value {
            Some(v) => self.decay * v + (1.0 - self.decay) * reward,
            None => reward,
        });
        adv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Dataset, Instance};
    use crate::distillation::TeacherPredictions;
    use crate::numerics::check_gradient;
    use proptest::prelude::*;

    fn random_state(rng: &mut SeededRng, dim: usize) -> PolicyState {
        PolicyState((0..dim).map(|_| rng.normal()).collect())
    }

    #[test]
    fn state_layout() {
        assert_eq!(state_dim(4, 2, 3), 13);
        let instances = vec![
            Instance { id: 1, features: vec![0.1, 0.2, 0.3, 0.4], label: 2, region: None },
            Instance { id: 2, features: vec![0.1, 0.2, 0.3, 0.4], label: 2, region: None },
        ];
        let ds = Dataset::new("s", 2, 4, instances).unwrap();
        let preds = TeacherPredictions::build(&ds, 3, 1.0, |_, k| {
            Ok(vec![0.1 * (k + 1) as f64, 1.0 - 0.1 * (k + 1) as f64])
        })
        .unwrap();
        let s1 = build_state(&ds.instances()[0].features, &preds.view(1).unwrap());
        let s2 = build_state(&ds.instances()[1].features, &preds.view(2).unwrap());
        assert_eq!(s1.len(), 13);
        assert_eq!(s1, s2);
        assert_eq!(&s1.0[..4], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(&s1.0[4..6], &[0.1, 0.9]);
        assert!((s1.0[10] + 0.9f64.ln()).abs() < 1e-15);

        let json = serde_json::to_string(&s1).unwrap();
        assert_eq!(serde_json::from_str::<PolicyState>(&json).unwrap(), s1);
    }

    #[test]
    fn uniform_teachers_give_constant_segments() {
        let instances = (0..3)
            .map(|i| Instance { id: i, features: vec![i as f64], label: 1, region: None })
            .collect();
        let ds = Dataset::new("u", 3, 1, instances).unwrap();
        let preds = TeacherPredictions::build(&ds, 2, 1.0, |_, _| Ok(vec![1.0 / 3.0; 3])).unwrap();
        for i in 0..3 {
            let s = build_state(&[i as f64], &preds.view(i).unwrap());
            assert!(s.0[1..7].iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
            assert!(s.0[7..].iter().all(|l| (l - 3f64.ln()).abs() < 1e-12));
        }
    }

    #[test]
    fn action_prob_examples() {
        let mut sel = TeacherSelector::new(2, 3).unwrap();
        let s = PolicyState(vec![1.0, -2.0, 0.5]);
        assert_eq!(sel.action_prob(0, &s, true), 0.5);
        assert_eq!(sel.action_prob(0, &s, false), 0.5);
        sel.set_bias(1, 3f64.ln());
        assert!((sel.action_prob(1, &s, true) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn extreme_biases_saturate_sampling() {
        let s = PolicyState(vec![0.3, -0.1]);
        let mut rng = SeededRng::new(1, "sat");
        let off = TeacherSelector::with_bias(1, 2, -50.0).unwrap();
        let on = TeacherSelector::with_bias(1, 2, 50.0).unwrap();
        let mut ones_off = 0;
        let mut ones_on = 0;
        for _ in 0..10_000 {
            ones_off += off.sample_actions(&s, &mut rng).unwrap().0[0] as usize;
            ones_on += on.sample_actions(&s, &mut rng).unwrap().0[0] as usize;
        }
        assert_eq!(ones_off, 0);
        assert_eq!(ones_on, 10_000);

        let half = TeacherSelector::new(1, 2).unwrap();
        let n = (0..10_000)
            .filter(|_| half.sample_actions(&s, &mut rng).unwrap().0[0])
            .count();
        assert!((n as f64 / 10_000.0 - 0.5).abs() < 0.02, "{n}");
        assert!(half.sample_actions(&PolicyState(vec![1.0]), &mut rng).is_err());
    }

    #[test]
    fn reward_examples() {
        let r1 = RewardConfig::new(RewardKind::R1);
        assert_eq!(compute_reward(&r1, 0.0, 0.3, None).unwrap(), 0.0);
        let r2 = RewardConfig::new(RewardKind::R2);
        assert!((compute_reward(&r2, 0.4, 0.6, None).unwrap() + 1.0).abs() < 1e-15);
        let r3 = RewardConfig::r3(1.0);
        for acc in [0.0, 0.4, 1.0] {
            assert_eq!(
                compute_reward(&r3, 0.4, 0.6, Some(acc)).unwrap(),
                compute_reward(&r2, 0.4, 0.6, None).unwrap()
            );
        }
        assert!(compute_reward(&r3, 0.4, 0.6, None).is_err());
        let no_gamma = RewardConfig::new(RewardKind::R3);
        assert!(compute_reward(&no_gamma, 0.4, 0.6, Some(0.5)).is_err());
        let half = RewardConfig::r3(0.5);
        assert!((compute_reward(&half, 0.4, 0.6, Some(0.8)).unwrap() + 0.1).abs() < 1e-15);
    }

    fn one_step_history(state: PolicyState, k: usize, action: bool, prob: f64) -> EpisodeHistory {
        let mut h = EpisodeHistory::new();
        let mut actions = vec![false; k];
        let mut probs = vec![0.5; k];
        actions[0] = action;
        probs[0] = prob;
        h.record(7, state, &actions, &probs);
        // keep only the first agent's step rewarded
        for s in h.steps.iter_mut().skip(1) {
            s.rewarded = false;
        }
        h.steps[0].rewarded = true;
        h
    }

    #[test]
    fn zero_reward_leaves_params() {
        let mut rng = SeededRng::new(2, "zr");
        let mut sel = TeacherSelector::new(2, 4).unwrap();
        let s = random_state(&mut rng, 4);
        let before = sel.clone();
        let h = one_step_history(s, 2, true, 0.5);
        sel.update(&h, 0.0, 1.0, GradientMode::LogGradient).unwrap();
        assert_eq!(sel, before);
    }

    #[test]
    fn positive_reward_raises_chosen_action() {
        let s = PolicyState(vec![0.5, -1.0, 2.0]);
        let mut sel = TeacherSelector::new(1, 3).unwrap();
        let before = sel.action_prob(0, &s, true);
        let h = one_step_history(s.clone(), 1, true, before);
        sel.update(&h, 1.0, 1e-3, GradientMode::LogGradient).unwrap();
        assert!(sel.action_prob(0, &s, true) > before);
    }

    #[test]
    fn update_direction_follows_reward_sign() {
        let mut rng = SeededRng::new(6, "dir");
        for mode in [GradientMode::LogGradient, GradientMode::Literal] {
            for _ in 0..200 {
                let s = random_state(&mut rng, 5);
                let mut sel = TeacherSelector::new(1, 5).unwrap();
                for w in sel.agent_weights_mut(0) {
                    *w = 0.3 * rng.normal();
                }
                let action = rng.bernoulli(0.5);
                let reward = if rng.bernoulli(0.5) { 1.0 } else { -1.0 } * (0.1 + rng.uniform());
                let before = sel.action_prob(0, &s, action).ln();
                let h = one_step_history(s.clone(), 1, action, 0.5);
                sel.update(&h, reward, 1e-4, mode).unwrap();
                let after = sel.action_prob(0, &s, action).ln();
                assert_eq!((after - before).signum(), reward.signum());
            }
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(8, "lpg");
        for _ in 0..20 {
            let s = random_state(&mut rng, 6);
            let mut sel = TeacherSelector::new(1, 6).unwrap();
            for w in sel.agent_weights_mut(0) {
                *w = 0.5 * rng.normal();
            }
            sel.set_bias(0, rng.normal());
            for action in [true, false] {
                let grad = sel.log_prob_grad(0, &s, action);
                let err = check_gradient(
                    |p| {
                        let mut probe = sel.clone();
                        probe.agent_weights_mut(0).copy_from_slice(&p[..6]);
                        probe.set_bias(0, p[6]);
                        probe.action_prob(0, &s, action).ln()
                    },
                    &grad,
                    &sel.flat_params(),
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{err}");
            }
        }
    }

    #[test]
    fn synthetic_reward_drives_selection() {
        let s = PolicyState(vec![0.4, -0.7, 1.0]);
        let mut sel = TeacherSelector::new(2, 3).unwrap();
        let mut rng = SeededRng::new(10, "synthetic");
        for _ in 0..2000 {
            let (actions, probs) = sel.sample_actions(&s, &mut rng).unwrap();
            for k in 0..2 {
                if !actions[k] {
                    continue;
                }
                let mut h = EpisodeHistory::new();
                h.record(0, s.clone(), &actions, &probs);
                for step in h.steps_mut() {
                    step.rewarded = step.teacher == k;
                }
                let reward = if k == 0 { 1.0 } else { -1.0 };
                sel.update(&h, reward, 0.1, GradientMode::LogGradient).unwrap();
            }
        }
        assert!(sel.select_prob(0, &s) > 0.95);
        assert!(sel.select_prob(1, &s) < 0.05);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(3, "ck");
        let mut sel = TeacherSelector::new(3, 5).unwrap();
        for k in 0..3 {
            for w in sel.agent_weights_mut(k) {
                *w = rng.normal() / 3.0;
            }
            sel.set_bias(k, rng.normal() * 1e-7);
        }
        let path = dir.path().join("p.json");
        sel.save(&path).unwrap();
        let back = TeacherSelector::load(&path).unwrap();
        assert!(back.flat_params().iter().zip(sel.flat_params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn history_records_k_steps_per_instance() {
        let mut h = EpisodeHistory::new();
        let sel = h.record(1, PolicyState(vec![0.0]), &[true, false, true], &[0.6, 0.3, 0.9]);
        assert_eq!(sel, vec![0, 2]);
        let none = h.record(2, PolicyState(vec![0.0]), &[false, false, false], &[0.1, 0.1, 0.1]);
        assert!(none.is_empty());
        assert_eq!(h.len(), 6);
        assert!(h.steps()[..3].iter().all(|s| s.rewarded));
        assert!(h.steps()[3..].iter().all(|s| !s.rewarded));
        h.clear();
        assert!(h.is_empty());
    }

    #[test]
    fn baseline_centers_rewards() {
        let mut b = RewardBaseline::new(0.9);
        assert_eq!(b.advantage(-2.0), 0.0);
        assert!((b.advantage(-1.0) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn action_probs_are_complementary(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed, "norm");
            let mut sel = TeacherSelector::new(2, 7).unwrap();
            for k in 0..2 {
                for w in sel.agent_weights_mut(k) {
                    *w = 2.0 * rng.normal();
                }
                sel.set_bias(k, rng.normal());
            }
            for _ in 0..50 {
                let s = random_state(&mut rng, 7);
                for k in 0..2 {
                    let total = sel.action_prob(k, &s, true) + sel.action_prob(k, &s, false);
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
