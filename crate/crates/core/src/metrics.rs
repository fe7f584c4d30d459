//! Hallucination and trace metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::StepTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records to score")]
    Empty,
    #[error("overlap ratio is undefined for an empty reference set")]
    EmptyReference,
}

/// Object mentions of one generated caption against its image's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    /// Object mentions in order, repeats included.
    pub mentions: Vec<usize>,
    pub truth: BTreeSet<usize>,
}

impl CaptionRecord {
    pub fn hallucinated(&self) -> usize {
        self.mentions.iter().filter(|o| !self.truth.contains(o)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    /// Fraction of captions with at least one hallucinated mention.
    pub chair_s: f64,
    /// Fraction of object mentions that are hallucinated.
    pub chair_i: f64,
    /// Mean per-caption fraction of ground-truth objects mentioned.
    pub recall: f64,
    /// Set when no caption mentions any object and `chair_i` was defaulted to 0.
    pub chair_i_undefined: bool,
}

pub fn chair_scores(records: &[CaptionRecord]) -> Result<ChairScores, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as f64;
    let mentions: usize = records.iter().map(|r| r.mentions.len()).sum();
    let hallucinated: usize = records.iter().map(CaptionRecord::hallucinated).sum();
    let bad_captions = records.iter().filter(|r| r.hallucinated() > 0).count();
    let recall = records
        .iter()
        .map(|r| {
            if r.truth.is_empty() {
                return 0.0;
            }
            let found: BTreeSet<&usize> = r.mentions.iter().filter(|o| r.truth.contains(o)).collect();
            found.len() as f64 / r.truth.len() as f64
        })
        .sum::<f64>()
        / n;
    Ok(ChairScores {
        chair_s: bad_captions as f64 / n,
        chair_i: if mentions == 0 { 0.0 } else { hallucinated as f64 / mentions as f64 },
        recall,
        chair_i_undefined: mentions == 0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision or recall with an empty denominator is 0, and so is F1 when both
/// are 0.
pub fn pope_scores(c: &ConfusionCounts) -> Result<PopeScores, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PopeScores { accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1 })
}

/// `(100 - chair + f1) / 2` with both inputs in percent.
pub fn amber_composite(chair_pct: f64, f1_pct: f64) -> f64 {
    (100.0 - chair_pct + f1_pct) / 2.0
}

pub const CAPTURE_WEIGHTS: [f64; 3] = [5.0, 5.0, 2.0];

/// Weighted mean of object, attribute and relation F1 with weights 5:5:2.
pub fn capture_score(f1_obj: f64, f1_attr: f64, f1_rel: f64) -> f64 {
    let [a, b, g] = CAPTURE_WEIGHTS;
    (a * f1_obj + b * f1_attr + g * f1_rel) / (a + b + g)
}

pub const HIST_LOW: f64 = -12.0;
pub const HIST_HIGH: f64 = 1.0;
pub const HIST_BINS: usize = 52;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdStats {
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub gamma: f64,
    pub steps: u64,
    pub bins: Vec<HistogramBin>,
    /// Steps with JSD exactly zero.
    pub underflow: u64,
    /// Steps with positive JSD below the histogram range.
    pub below_range: u64,
    pub above_range: u64,
    /// Fraction of steps with `log10(jsd) <= gamma`.
    pub fraction_below: f64,
}

impl JsdStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        out.push_str(&format!("-inf,{HIST_LOW},{}\n", self.underflow + self.below_range));
        for b in &self.bins {
            out.push_str(&format!("{},{},{}\n", b.low, b.high, b.count));
        }
        out.push_str(&format!("{HIST_HIGH},inf,{}\n", self.above_range));
        out
    }

    pub fn bucket_total(&self) -> u64 {
        self.underflow + self.below_range + self.above_range + self.bins.iter().map(|b| b.count).sum::<u64>()
    }
}

/// Histogram of `log10(jsd)` over `[-12, 1]` in 52 equal bins.
pub fn jsd_stats<'a, I>(traces: I, gamma: f64) -> Result<JsdStats, MetricsError>
where
    I: IntoIterator<Item = &'a StepTrace>,
{
    let width = (HIST_HIGH - HIST_LOW) / HIST_BINS as f64;
    let mut bins: Vec<HistogramBin> = (0..HIST_BINS)
        .map(|i| HistogramBin {
            low: HIST_LOW + i as f64 * width,
            high: HIST_LOW + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    let (mut steps, mut underflow, mut below_range, mut above_range, mut below_gamma) = (0u64, 0, 0, 0, 0u64);
    for t in traces {
        steps += 1;
        let x = t.divergence.log10_jsd;
        if x <= gamma {
            below_gamma += 1;
        }
        if t.divergence.jsd == 0.0 {
            underflow += 1;
        } else if x < HIST_LOW {
            below_range += 1;
        } else if x > HIST_HIGH {
            above_range += 1;
        } else {
            let i = (((x - HIST_LOW) / width) as usize).min(HIST_BINS - 1);
            bins[i].count += 1;
        }
    }
    if steps == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(JsdStats {
        gamma,
        steps,
        bins,
        underflow,
        below_range,
        above_range,
        fraction_below: below_gamma as f64 / steps as f64,
    })
}

/// `|a ∩ b| / |a|`.
pub fn overlap_ratio<T: Ord>(words_a: &BTreeSet<T>, words_b: &BTreeSet<T>) -> Result<f64, MetricsError> {
    if words_a.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(words_a.intersection(words_b).count() as f64 / words_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logits::DivergenceValue;

    fn rec(mentions: &[usize], truth: &[usize]) -> CaptionRecord {
        CaptionRecord {
            image_id: "i".into(),
            mentions: mentions.to_vec(),
            truth: truth.iter().copied().collect(),
        }
    }

    fn trace(jsd: f64) -> StepTrace {
        StepTrace {
            step: 0,
            divergence: DivergenceValue::new(jsd),
            gated: false,
            alpha: None,
            token: 0,
            token_text: String::new(),
            kept: 1,
            orig_digest: String::new(),
            contrast_digest: String::new(),
            orig_logits: None,
            contrast_logits: None,
        }
    }

    #[test]
    fn chair_examples() {
        let s = chair_scores(&[rec(&[0, 1, 2], &[0, 1])]).unwrap();
        assert_eq!(s.chair_i, 1.0 / 3.0);
        assert_eq!(s.chair_s, 1.0);
        let s = chair_scores(&[rec(&[0], &[0]), rec(&[5], &[0])]).unwrap();
        assert_eq!(s.chair_s, 0.5);
        let s = chair_scores(&[rec(&[0, 1], &[0, 1, 2])]).unwrap();
        assert_eq!((s.chair_s, s.chair_i), (0.0, 0.0));
        assert_eq!(s.recall, 2.0 / 3.0);
    }

    #[test]
    fn chair_without_mentions() {
        let s = chair_scores(&[rec(&[], &[1])]).unwrap();
        assert!(s.chair_i_undefined);
        assert_eq!(s.chair_i, 0.0);
        assert_eq!(chair_scores(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn pope_examples() {
        let p = pope_scores(&ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 10 }).unwrap();
        assert_eq!((p.accuracy, p.precision, p.recall, p.f1), (1.0, 1.0, 1.0, 1.0));
        let p = pope_scores(&ConfusionCounts { tp: 25, fp: 25, fn_: 25, tn: 25 }).unwrap();
        assert_eq!((p.accuracy, p.precision, p.recall, p.f1), (0.5, 0.5, 0.5, 0.5));
        let p = pope_scores(&ConfusionCounts { tp: 0, fp: 0, fn_: 10, tn: 90 }).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert_eq!(p.accuracy, 0.9);
        assert!(pope_scores(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn composite_scores() {
        assert_eq!(amber_composite(6.6, 73.1), 83.25);
        assert_eq!(amber_composite(12.4, 75.0), 81.3);
        assert_eq!(amber_composite(0.0, 100.0), 100.0);
        assert_eq!(capture_score(1.0, 1.0, 1.0), 1.0);
        assert_eq!(capture_score(0.6, 0.5, 0.4), 0.525);
        assert_eq!(capture_score(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn jsd_histogram() {
        let zeros = vec![trace(0.0); 5];
        let s = jsd_stats(&zeros, -4.0).unwrap();
        assert_eq!((s.fraction_below, s.underflow), (1.0, 5));
        let s = jsd_stats(&[trace(1e-2)], -4.0).unwrap();
        assert_eq!(s.fraction_below, 0.0);
        assert_eq!(s.bins.iter().map(|b| b.count).sum::<u64>(), 1);
        let mixed = [trace(0.0), trace(1e-20), trace(1e-5), trace(0.5)];
        let s = jsd_stats(&mixed, -4.0).unwrap();
        assert_eq!(s.bucket_total(), 4);
        assert_eq!(s.below_range, 1);
        assert_eq!(s.bins.len(), 52);
        assert_eq!(s.to_csv().lines().count(), 55);
    }

    #[test]
    fn overlap_examples() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(overlap_ratio(&set(&["x", "y"]), &set(&["x", "y"])).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&set(&["x"]), &set(&["y"])).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&set(&["x", "y", "z", "w"]), &set(&["x"])).unwrap(), 0.25);
        assert_eq!(overlap_ratio(&set(&[]), &set(&["x"])), Err(MetricsError::EmptyReference));
    }
}
