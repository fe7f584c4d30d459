//! Cross-image contrastive decoding.
//!
//! Two sessions share prompt and generated prefix but see different images.
//! At each step the divergence between their next-token distributions decides
//! whether the step is image-irrelevant (decode from the original logits
//! unchanged) or image-relevant (restrict to plausible candidates and
//! subtract the contrast stream with a divergence-dependent coefficient).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::logits::{
    adaptive_plausibility_mask, js_divergence, softmax, DivergenceValue, LogitVector, LogitsError,
};
use crate::protocol::session::{
    lockstep_barrier, Backend, BackendError, BackendInfo, Session, SessionMismatch, TokenId,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Logits(#[from] LogitsError),
    #[error("divergence is zero; the step must decode regularly")]
    DegenerateDivergence,
    #[error(transparent)]
    SessionMismatch(#[from] SessionMismatch),
    #[error("vocabularies differ: {orig} vs {contrast}")]
    VocabMismatch { orig: String, contrast: String },
    #[error("logit vectors of length {orig} and {contrast} for vocabulary of {vocab}")]
    ShapeMismatch { orig: usize, contrast: usize, vocab: usize },
    #[error("session failure at step {step}: {source}")]
    Session {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("invalid engine configuration: {0}")]
    Config(String),
}

/// How the contrastive coefficient is chosen on contrastive steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AlphaMode {
    /// `1 - log10(jsd)` clipped to the configured interval.
    #[default]
    Dynamic,
    /// Constant coefficient (the fixed-strength ablation).
    Fixed(f64),
    /// Never contrast; every step decodes regularly.
    Off,
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Dynamic => f.write_str("dynamic"),
            AlphaMode::Fixed(a) => write!(f, "fixed:{a}"),
            AlphaMode::Off => f.write_str("off"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(AlphaMode::Dynamic),
            "off" => Ok(AlphaMode::Off),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| format!("unknown alpha mode {s:?}"))?;
                let a: f64 = v.parse().map_err(|_| format!("bad fixed alpha {v:?}"))?;
                if !a.is_finite() {
                    return Err(format!("fixed alpha must be finite, got {v}"));
                }
                Ok(AlphaMode::Fixed(a))
            }
        }
    }
}

impl Serialize for AlphaMode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlphaMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Closed interval `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 2]", try_from = "[f64; 2]")]
pub struct AlphaClip {
    pub low: f64,
    pub high: f64,
}

impl AlphaClip {
    pub fn new(low: f64, high: f64) -> Result<Self, String> {
        if !(low.is_finite() && high.is_finite()) || low > high {
            return Err(format!("invalid clip interval [{low}, {high}]"));
        }
        Ok(Self { low, high })
    }

    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }
}

impl Default for AlphaClip {
    fn default() -> Self {
        Self { low: 1.0, high: 3.0 }
    }
}

impl From<AlphaClip> for [f64; 2] {
    fn from(c: AlphaClip) -> Self {
        [c.low, c.high]
    }
}

impl TryFrom<[f64; 2]> for AlphaClip {
    type Error = String;
    fn try_from(v: [f64; 2]) -> Result<Self, String> {
        AlphaClip::new(v[0], v[1])
    }
}

impl FromStr for AlphaClip {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected LOW,HIGH, got {s:?}"))?;
        let low = a.trim().parse().map_err(|_| format!("bad bound {a:?}"))?;
        let high = b.trim().parse().map_err(|_| format!("bad bound {b:?}"))?;
        AlphaClip::new(low, high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Threshold on `log10(jsd)`; `-inf` contrasts every step with positive
    /// divergence, `+inf` never contrasts.
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub gamma: f64,
    pub beta: f64,
    pub alpha_mode: AlphaMode,
    pub alpha_clip: AlphaClip,
    pub temperature: f64,
    #[serde(default)]
    pub greedy: bool,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub full_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma: -4.0,
            beta: 0.1,
            alpha_mode: AlphaMode::Dynamic,
            alpha_clip: AlphaClip::default(),
            temperature: 1.0,
            greedy: false,
            max_len: 64,
            seed: 0,
            full_trace: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.gamma.is_nan() {
            return bad("gamma is NaN".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.alpha_clip.low > self.alpha_clip.high {
            return bad("alpha clip low exceeds high".into());
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !a.is_finite() {
                return bad("fixed alpha must be finite".into());
            }
        }
        Ok(())
    }
}

/// One decoding step as recorded in traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    #[serde(flatten)]
    pub divergence: DivergenceValue,
    pub gated: bool,
    pub alpha: Option<f64>,
    pub token: TokenId,
    pub token_text: String,
    pub kept: usize,
    pub orig_digest: String,
    pub contrast_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub traces: Vec<StepTrace>,
    pub config: EngineConfig,
}

/// Outcome of [`cicd_step`] before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub logits: LogitVector,
    pub divergence: DivergenceValue,
    pub gated_contrastive: bool,
    pub alpha: Option<f64>,
    pub kept: usize,
}

pub fn dynamic_alpha(d: DivergenceValue, clip: AlphaClip) -> Result<f64, EngineError> {
    if d.jsd <= 0.0 {
        return Err(EngineError::DegenerateDivergence);
    }
    Ok((1.0 - d.log10_jsd).clamp(clip.low, clip.high))
}

/// `(1 + alpha) * orig - alpha * contrast`, evaluated as
/// `orig + alpha * (orig - contrast)` so equal inputs or `alpha = 0` return
/// `orig` exactly. An index masked in either input stays masked.
pub fn fuse_logits(
    orig: &LogitVector,
    contrast: &LogitVector,
    alpha: f64,
) -> Result<LogitVector, LogitsError> {
    if orig.len() != contrast.len() {
        return Err(LogitsError::DimensionError { left: orig.len(), right: contrast.len() });
    }
    let values = orig
        .values()
        .iter()
        .zip(contrast.values())
        .map(|(&o, &c)| o + alpha * (o - c))
        .collect::<Vec<_>>();
    let masked = match (orig.mask_slice(), contrast.mask_slice()) {
        (None, None) => None,
        (a, b) => Some(
            (0..values.len())
                .map(|i| a.is_some_and(|m| m[i]) || b.is_some_and(|m| m[i]))
                .collect(),
        ),
    };
    Ok(LogitVector::from_parts(values, masked))
}

/// The per-step decision rule.
pub fn cicd_step(
    orig: &LogitVector,
    contrast: &LogitVector,
    cfg: &EngineConfig,
) -> Result<StepDecision, EngineError> {
    if orig.len() != contrast.len() {
        return Err(SessionMismatch {
            left: "orig".into(),
            right: "contrast".into(),
            position: 0,
            detail: format!("vocabulary sizes {} and {}", orig.len(), contrast.len()),
        }
        .into());
    }
    let p = softmax(orig)?;
    let q = softmax(contrast)?;
    let divergence = js_divergence(&p, &q)?;

    // `<=` on the boundary keeps the regular branch; log10(0) = -inf never
    // exceeds any gamma.
    let contrastive = divergence.log10_jsd > cfg.gamma && cfg.alpha_mode != AlphaMode::Off;
    if !contrastive {
        return Ok(StepDecision {
            logits: orig.clone(),
            divergence,
            gated_contrastive: false,
            alpha: None,
            kept: orig.len() - orig.masked_count(),
        });
    }

    let alpha = match cfg.alpha_mode {
        AlphaMode::Dynamic => dynamic_alpha(divergence, cfg.alpha_clip)?,
        AlphaMode::Fixed(a) => a,
        AlphaMode::Off => unreachable!(),
    };
    let keep = adaptive_plausibility_mask(&p, cfg.beta);
    let mut fused = fuse_logits(orig, contrast, alpha)?;
    let mut keep_iter = keep.iter().peekable();
    for i in 0..fused.len() {
        if keep_iter.peek() == Some(&&i) {
            keep_iter.next();
        } else {
            fused.mask(i);
        }
    }
    Ok(StepDecision {
        kept: fused.len() - fused.masked_count(),
        logits: fused,
        divergence,
        gated_contrastive: true,
        alpha: Some(alpha),
    })
}

/// Draws one token by inverse-CDF over the unmasked entries.
///
/// Sampling consumes exactly one uniform from `rng`; greedy decoding consumes
/// none.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &LogitVector,
    temperature: f64,
    greedy: bool,
    rng: &mut R,
) -> Result<TokenId, LogitsError> {
    if greedy {
        return logits
            .argmax()
            .map(|i| i as TokenId)
            .ok_or(LogitsError::EmptySupport);
    }
    let probs = softmax(&logits.scaled(temperature))?;
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = None;
    for (i, &p) in probs.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = Some(i);
        if u < cumulative {
            return Ok(i as TokenId);
        }
    }
    // Rounding can leave the cumulative sum a hair below u.
    last_positive.map(|i| i as TokenId).ok_or(LogitsError::EmptySupport)
}

/// Short content digest of a logit vector.
pub fn logits_digest(v: &LogitVector) -> String {
    let mut h = Sha256::new();
    for x in v.values() {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Original and contrast sessions advanced in lockstep.
pub struct SessionPair {
    info: BackendInfo,
    orig: Box<dyn Session>,
    contrast: Box<dyn Session>,
}

impl SessionPair {
    pub fn new(
        info: BackendInfo,
        orig: Box<dyn Session>,
        contrast: Box<dyn Session>,
    ) -> Result<Self, EngineError> {
        lockstep_barrier(orig.state(), contrast.state())?;
        Ok(Self { info, orig, contrast })
    }

    /// Opens both sessions, refusing backends with different vocabularies.
    pub fn open(
        orig_backend: &dyn Backend,
        contrast_backend: &dyn Backend,
        orig_image: &str,
        contrast_image: &str,
        prompt: &[TokenId],
    ) -> Result<Self, EngineError> {
        let (a, b) = (orig_backend.info(), contrast_backend.info());
        if a.vocab_digest != b.vocab_digest || a.vocab_size != b.vocab_size {
            return Err(EngineError::VocabMismatch {
                orig: a.vocab_digest.clone(),
                contrast: b.vocab_digest.clone(),
            });
        }
        let open = |backend: &dyn Backend, id: &str, image: &str| {
            backend
                .open_session(id, image, prompt)
                .map_err(|source| EngineError::Session { step: 0, source })
        };
        let orig = open(orig_backend, "orig", orig_image)?;
        let contrast = open(contrast_backend, "contrast", contrast_image)?;
        Self::new(a.clone(), orig, contrast)
    }

    pub fn info(&self) -> &BackendInfo {
        &self.info
    }

    pub fn orig(&self) -> &dyn Session {
        self.orig.as_ref()
    }

    pub fn contrast(&self) -> &dyn Session {
        self.contrast.as_ref()
    }

    pub fn close(mut self) -> Result<(), BackendError> {
        self.orig.close()?;
        self.contrast.close()
    }
}

/// Runs the lockstep generation loop until the end token or `max_len`.
pub fn generate(pair: &mut SessionPair, cfg: &EngineConfig) -> Result<GenerationResult, EngineError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = pair.info.vocab_size;
    let end = pair.info.end_token;
    let mut tokens = Vec::new();
    let mut traces = Vec::new();

    for step in 0..cfg.max_len {
        lockstep_barrier(pair.orig.state(), pair.contrast.state())?;
        let session_err = |source| EngineError::Session { step, source };
        let orig = pair.orig.step_logits().map_err(session_err)?;
        let contrast = pair.contrast.step_logits().map_err(session_err)?;
        if orig.len() != vocab || contrast.len() != vocab {
            return Err(EngineError::ShapeMismatch {
                orig: orig.len(),
                contrast: contrast.len(),
                vocab,
            });
        }

        let decision = cicd_step(&orig, &contrast, cfg)?;
        let token = sample_token(&decision.logits, cfg.temperature, cfg.greedy, &mut rng)?;
        pair.orig.feed(token).map_err(session_err)?;
        pair.contrast.feed(token).map_err(session_err)?;

        traces.push(StepTrace {
            step,
            divergence: decision.divergence,
            gated: decision.gated_contrastive,
            alpha: decision.alpha,
            token,
            token_text: pair.info.token_text(token),
            kept: decision.kept,
            orig_digest: logits_digest(&orig),
            contrast_digest: logits_digest(&contrast),
            orig_logits: cfg.full_trace.then(|| orig.values().to_vec()),
            contrast_logits: cfg.full_trace.then(|| contrast.values().to_vec()),
        });
        tokens.push(token);
        if Some(token) == end {
            break;
        }
    }

    let text = tokens
        .iter()
        .filter(|&&t| Some(t) != end)
        .map(|&t| pair.info.token_text(t))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(GenerationResult { tokens, text, traces, config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn alpha_formula_and_clip() {
        let clip = AlphaClip::default();
        let a = |j: f64| dynamic_alpha(DivergenceValue::new(j), clip).unwrap();
        assert_eq!(a(1e-2), 3.0);
        assert_eq!(a(10f64.powf(-0.5)), 1.5);
        assert_eq!(a(1e-6), 3.0);
        assert_eq!(a(10.0), 1.0);
        assert!(matches!(
            dynamic_alpha(DivergenceValue::new(0.0), clip),
            Err(EngineError::DegenerateDivergence)
        ));
    }

    #[test]
    fn fuse_examples() {
        let f = fuse_logits(&lv(&[2.0, 0.0]), &lv(&[0.0, 2.0]), 1.0).unwrap();
        assert_eq!(f.values(), &[4.0, -2.0]);
        let o = lv(&[0.3, -1.0, 2.5]);
        assert_eq!(fuse_logits(&o, &lv(&[9.0, 9.0, 9.0]), 0.0).unwrap().values(), o.values());
        assert_eq!(fuse_logits(&o, &o, 2.7).unwrap().values(), o.values());
    }

    #[test]
    fn fuse_keeps_masks() {
        let a = LogitVector::with_support(vec![1.0, 2.0, 3.0], &[0, 1]).unwrap();
        let b = LogitVector::with_support(vec![1.0, 2.0, 3.0], &[1, 2]).unwrap();
        let f = fuse_logits(&a, &b, 1.0).unwrap();
        assert!(f.is_masked(0) && f.is_masked(2) && !f.is_masked(1));
    }

    #[test]
    fn fuse_dimension_mismatch() {
        assert!(fuse_logits(&lv(&[1.0]), &lv(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn identical_streams_decode_regularly() {
        let cfg = EngineConfig { gamma: f64::NEG_INFINITY, ..Default::default() };
        let o = lv(&[1.0, 2.0, 3.0]);
        let d = cicd_step(&o, &o, &cfg).unwrap();
        assert!(!d.gated_contrastive);
        assert_eq!(d.logits, o);
        assert_eq!(d.alpha, None);
    }

    #[test]
    fn off_mode_never_contrasts() {
        let cfg = EngineConfig { alpha_mode: AlphaMode::Off, ..Default::default() };
        let d = cicd_step(&lv(&[5.0, 0.0]), &lv(&[0.0, 5.0]), &cfg).unwrap();
        assert!(!d.gated_contrastive);
    }

    #[test]
    fn contrastive_branch_masks_implausible() {
        let cfg = EngineConfig::default();
        let orig = lv(&[3.0, 2.5, -4.0]);
        let contrast = lv(&[0.0, 3.0, -4.0]);
        let d = cicd_step(&orig, &contrast, &cfg).unwrap();
        assert!(d.gated_contrastive);
        assert!(d.logits.is_masked(2));
        assert_eq!(d.kept, 2);
        let a = d.alpha.unwrap();
        assert!(cfg.alpha_clip.contains(a));
    }

    #[test]
    fn fixed_alpha_mode() {
        let cfg = EngineConfig { alpha_mode: AlphaMode::Fixed(1.0), ..Default::default() };
        let d = cicd_step(&lv(&[2.0, 0.0]), &lv(&[0.0, 2.0]), &cfg).unwrap();
        assert_eq!(d.alpha, Some(1.0));
        assert_eq!(d.logits.values(), &[4.0, -2.0]);
    }

    #[test]
    fn sample_degenerate_support() {
        let v = LogitVector::with_support(vec![0.0, 5.0, 1.0], &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_token(&v, 1.0, false, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn sample_greedy_is_argmax() {
        let v = lv(&[0.1, 0.7, 0.7, -3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&v, 1.0, true, &mut rng).unwrap(), 1);
    }

    #[test]
    fn sample_is_deterministic() {
        let v = lv(&[0.0, 0.5, 1.0, 1.5]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_token(&v, 1.0, false, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn sample_all_masked() {
        let v = LogitVector::with_support(vec![0.0, 1.0], &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&v, 1.0, false, &mut rng), Err(LogitsError::EmptySupport));
        assert_eq!(sample_token(&v, 1.0, true, &mut rng), Err(LogitsError::EmptySupport));
    }

    #[test]
    fn config_roundtrips_with_infinite_gamma() {
        let cfg = EngineConfig {
            gamma: f64::NEG_INFINITY,
            alpha_mode: AlphaMode::Fixed(1.0),
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"-inf\"") && s.contains("\"fixed:1\""));
        let back: EngineConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        let bad = EngineConfig { beta: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EngineConfig { temperature: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!("fixed:nan".parse::<AlphaMode>().is_err());
        assert!("3,1".parse::<AlphaClip>().is_err());
    }
}
