//! Probability and divergence kernels over dense vocabulary-sized vectors.
//!
//! Everything here is a pure function of its inputs. Sums are accumulated in
//! `f64` with Neumaier compensation so that vocabularies in the 100k range do
//! not lose the low-order bits that the gating threshold depends on.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(probs) == 1` accepted by [`Distribution::new`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogitsError {
    #[error("every entry is masked; nothing to normalize")]
    EmptySupport,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionError { left: usize, right: usize },
    #[error("vector has zero norm")]
    ZeroNormError,
    #[error("non-finite logit {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("masked entry at index {index} where none are allowed")]
    Masked { index: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("empty vector")]
    Empty,
}

/// Raw scores, one per vocabulary index, with an explicit exclusion mask.
///
/// Masked entries keep whatever value they had but are never read by the
/// kernels; they behave as probability zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
    masked: Option<Vec<bool>>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LogitsError> {
        if values.is_empty() {
            return Err(LogitsError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LogitsError::NonFinite { index, value });
        }
        Ok(Self { values, masked: None })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, LogitsError> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    /// Builds a vector where only `keep` indices remain unmasked.
    pub fn with_support(values: Vec<f64>, keep: &[usize]) -> Result<Self, LogitsError> {
        let mut out = Self::new(values)?;
        let mut masked = vec![true; out.values.len()];
        for &i in keep {
            if i >= masked.len() {
                return Err(LogitsError::DimensionError { left: masked.len(), right: i + 1 });
            }
            masked[i] = false;
        }
        out.masked = Some(masked);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked.as_ref().is_some_and(|m| m[index])
    }

    pub fn has_mask(&self) -> bool {
        self.masked.as_ref().is_some_and(|m| m.iter().any(|&x| x))
    }

    pub fn mask(&mut self, index: usize) {
        let len = self.values.len();
        self.masked.get_or_insert_with(|| vec![false; len])[index] = true;
    }

    pub fn masked_count(&self) -> usize {
        self.masked.as_ref().map_or(0, |m| m.iter().filter(|&&x| x).count())
    }

    pub fn unmasked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.values.len()).filter(move |&i| !self.is_masked(i))
    }

    /// Value at `index`, or `None` when masked.
    pub fn get(&self, index: usize) -> Option<f64> {
        (!self.is_masked(index)).then(|| self.values[index])
    }

    /// Index of the largest unmasked value; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in self.unmasked_indices() {
            let v = self.values[i];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Divides every unmasked value by `temperature`.
    pub fn scaled(&self, temperature: f64) -> LogitVector {
        let mut out = self.clone();
        if temperature != 1.0 {
            for v in &mut out.values {
                *v /= temperature;
            }
        }
        out
    }

    pub(crate) fn from_parts(values: Vec<f64>, masked: Option<Vec<bool>>) -> Self {
        Self { values, masked }
    }

    pub(crate) fn mask_slice(&self) -> Option<&[bool]> {
        self.masked.as_deref()
    }
}

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LogitsError> {
        if probs.is_empty() {
            return Err(LogitsError::Empty);
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(LogitsError::InvalidDistribution(format!("entry {p} outside [0, 1]")));
        }
        let total = compensated_sum(probs.iter().copied());
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(LogitsError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Jensen–Shannon divergence in nats together with its base-10 logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceValue {
    pub jsd: f64,
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub log10_jsd: f64,
}

impl DivergenceValue {
    /// `jsd` must be a nonnegative finite number; `log10_jsd` is `-inf` at zero.
    pub fn new(jsd: f64) -> Self {
        debug_assert!(jsd >= 0.0 && jsd.is_finite(), "invalid divergence {jsd}");
        let log10_jsd = if jsd > 0.0 { jsd.log10() } else { f64::NEG_INFINITY };
        Self { jsd, log10_jsd }
    }

    pub fn is_zero(&self) -> bool {
        self.jsd == 0.0
    }
}

/// Cross-vector distances used by the consistency analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSuite {
    pub cosine_distance: f64,
    pub euclidean_distance: f64,
    pub total_variation: f64,
}

/// Neumaier-compensated summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_dims(left: usize, right: usize) -> Result<(), LogitsError> {
    if left == right {
        Ok(())
    } else {
        Err(LogitsError::DimensionError { left, right })
    }
}

pub fn softmax(logits: &LogitVector) -> Result<Distribution, LogitsError> {
    let max = logits
        .unmasked_indices()
        .map(|i| logits.values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(LogitsError::EmptySupport);
    }
    let mut probs: Vec<f64> = (0..logits.len())
        .map(|i| if logits.is_masked(i) { 0.0 } else { (logits.values[i] - max).exp() })
        .collect();
    let total = compensated_sum(probs.iter().copied());
    for p in &mut probs {
        *p /= total;
    }
    Ok(Distribution { probs })
}

/// `KL(p || q)` in nats, `+inf` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, LogitsError> {
    check_dims(p.len(), q.len())?;
    let mut terms = Vec::with_capacity(p.len());
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        terms.push(pi * (pi / qi).ln());
    }
    Ok(compensated_sum(terms).max(0.0))
}

/// Jensen–Shannon divergence in nats.
///
/// Each coordinate contributes `p ln(2p/(p+q)) + q ln(2q/(p+q))`. A log ratio
/// near zero is evaluated as `ln1p((p-q)/(p+q))` so that nearly equal
/// coordinates do not cancel catastrophically; far from zero the ratio is
/// taken directly, which stays accurate when one side is many orders of
/// magnitude smaller. The expression is symmetric in `p` and `q` bit for bit.
pub fn js_divergence(p: &Distribution, q: &Distribution) -> Result<DivergenceValue, LogitsError> {
    check_dims(p.len(), q.len())?;
    let terms = p.probs.iter().zip(&q.probs).map(|(&pi, &qi)| jsd_term(pi, qi));
    let total = 0.5 * compensated_sum(terms);
    Ok(DivergenceValue::new(total.clamp(0.0, LN_2)))
}

#[inline]
fn jsd_term(p: f64, q: f64) -> f64 {
    match (p == 0.0, q == 0.0) {
        (true, true) => 0.0,
        (true, false) => q * LN_2,
        (false, true) => p * LN_2,
        (false, false) => half_term(p, q) + half_term(q, p),
    }
}

/// `x ln(2x/(x+y))` for positive `x`, `y`.
#[inline]
fn half_term(x: f64, y: f64) -> f64 {
    let s = x + y;
    let d = (x - y) / s;
    if d.abs() < 0.5 {
        x * d.ln_1p()
    } else {
        x * (2.0 * (x / s)).ln()
    }
}

/// `½ Σ |p_i − q_i|`.
pub fn total_variation(p: &Distribution, q: &Distribution) -> Result<f64, LogitsError> {
    check_dims(p.len(), q.len())?;
    let tv = 0.5 * compensated_sum(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()));
    Ok(tv.clamp(0.0, 1.0))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, LogitsError> {
    check_dims(a.len(), b.len())?;
    let dot = compensated_sum(a.iter().zip(b).map(|(x, y)| x * y));
    let sa = compensated_sum(a.iter().map(|x| x * x));
    let sb = compensated_sum(b.iter().map(|x| x * x));
    if sa == 0.0 || sb == 0.0 {
        return Err(LogitsError::ZeroNormError);
    }
    // sqrt(sa * sb) returns exactly sa when a == b.
    let prod = sa * sb;
    let denom = if prod.is_finite() && prod > 0.0 { prod.sqrt() } else { sa.sqrt() * sb.sqrt() };
    Ok((dot / denom).clamp(-1.0, 1.0))
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64, LogitsError> {
    check_dims(a.len(), b.len())?;
    Ok(compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))).sqrt())
}

pub fn distance_suite(a: &LogitVector, b: &LogitVector) -> Result<DistanceSuite, LogitsError> {
    check_dims(a.len(), b.len())?;
    for v in [a, b] {
        if let Some(index) = (0..v.len()).find(|&i| v.is_masked(i)) {
            return Err(LogitsError::Masked { index });
        }
    }
    let cosine_distance = 1.0 - cosine_similarity(a.values(), b.values())?;
    let euclidean_distance = euclidean_distance(a.values(), b.values())?;
    let total_variation = total_variation(&softmax(a)?, &softmax(b)?)?;
    Ok(DistanceSuite { cosine_distance, euclidean_distance, total_variation })
}

/// Indices with `p_i >= beta * max_j p_j`, in ascending order.
///
/// The argmax always qualifies, so the result is never empty.
pub fn adaptive_plausibility_mask(p: &Distribution, beta: f64) -> Vec<usize> {
    debug_assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0, 1), got {beta}");
    let cutoff = beta * p.max();
    p.probs
        .iter()
        .enumerate()
        .filter(|&(_, &pi)| pi >= cutoff)
        .map(|(i, _)| i)
        .collect()
}
