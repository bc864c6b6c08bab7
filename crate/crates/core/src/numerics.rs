//! Dense numeric kernels shared by every model in the crate.
//!
//! Everything works on plain `f64` slices. Probabilities are clamped at
//! [`PROB_FLOOR`] before any logarithm so saturated softmax outputs never
//! produce infinite losses.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("softmax input contains a non-finite entry"));
    }
    Ok(softmax_unchecked(logits, temperature))
}

/// Softmax without argument validation, for hot loops whose inputs are
/// already known to be finite.
pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `-ln(predicted[label])` for a 1-based class label.
pub fn cross_entropy_hard(label: usize, predicted: &[f64]) -> Result<f64> {
    if label == 0 || label > predicted.len() {
        return Err(Error::invalid(format!(
            "label {label} outside 1..={}",
            predicted.len()
        )));
    }
    Ok(-clamped_ln(predicted[label - 1]))
}

pub fn cross_entropy_soft(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "length mismatch: target {} vs predicted {}",
            target.len(),
            predicted.len()
        )));
    }
    Ok(soft_ce_unchecked(target, predicted))
}

pub(crate) fn soft_ce_unchecked(target: &[f64], predicted: &[f64]) -> f64 {
    -target
        .iter()
        .zip(predicted)
        .map(|(t, p)| t * clamped_ln(*p))
        .sum::<f64>()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    soft_ce_unchecked(p, p)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks that `probs` is a probability vector within `tol` of summing to one.
pub fn validate_probabilities(probs: &[f64], tol: f64) -> std::result::Result<(), String> {
    if probs.is_empty() {
        return Err("empty probability vector".into());
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(format!("entry {p} outside [0, 1]"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(format!("entries sum to {total}"));
    }
    Ok(())
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn check_gradient<F>(f: F, analytic: &[f64], params: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = f(&probe);
        probe[i] = params[i] - step;
        let down = f(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function is non-finite around coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Reproducible random stream identified by a seed and a textual label.
///
/// The generator is PCG-64 MCG (128-bit state, `rand_pcg::Pcg64Mcg`). Its
/// seed is the first 16 bytes of SHA-256 over the little-endian seed
/// followed by the UTF-8 label, so streams with different labels are
/// unrelated while each (seed, label) pair replays identically everywhere.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    label: String,
    inner: Pcg64Mcg,
}

impl SeededRng {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 16];
        key.copy_from_slice(&digest[..16]);
        SeededRng {
            seed,
            label,
            inner: Pcg64Mcg::from_seed(key),
        }
    }

    /// Independent child stream labelled `"<parent>/<name>"`.
    pub fn stream(&self, name: &str) -> SeededRng {
        SeededRng::new(self.seed, format!("{}/{}", self.label, name))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
