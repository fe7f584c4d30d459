//! Batch decoding on a synthetic world: regular decoding against CICD, γ
//! sweeps, and cross-image consistency analysis.
//!
//! Each (seed, image) job draws its contrast image, POPE probes and sampling
//! stream from generators derived from the pair alone, so reports do not
//! depend on scheduling.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{generate, AlphaMode, EngineConfig, EngineError, SessionPair, StepTrace};
use crate::exec::{self, Execution};
use crate::logits::{distance_suite, LogitVector, LogitsError};
use crate::metrics::{
    amber_composite, chair_scores, jsd_stats, pope_scores, CaptionRecord, ChairScores, ConfusionCounts,
    JsdStats, MetricsError, PopeScores,
};
use crate::protocol::session::TokenId;
use crate::selector::{select_random_id, select_retrieved, EmbeddingStore, SelectorError};
use crate::sim::backend::SimBackend;
use crate::sim::world::{SlotKind, SynthWorld};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Logits(#[from] LogitsError),
}

/// How the contrast image of each job is chosen.
#[derive(Debug, Clone)]
pub enum ContrastSource {
    Random,
    Retrieve(Arc<EmbeddingStore>),
    Fixed(String),
}

impl ContrastSource {
    pub fn label(&self) -> String {
        match self {
            ContrastSource::Random => "random".into(),
            ContrastSource::Retrieve(_) => "retrieve".into(),
            ContrastSource::Fixed(id) => id.clone(),
        }
    }
}

/// Independent stream for one (seed, image, purpose) triple.
pub fn derive_seed(seed: u64, image: usize, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"cicd-job\0");
    h.update(seed.to_le_bytes());
    h.update((image as u64).to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub engine: EngineConfig,
}

impl Arm {
    pub fn regular(base: &EngineConfig) -> Self {
        Self { label: "regular".into(), engine: EngineConfig { alpha_mode: AlphaMode::Off, ..base.clone() } }
    }

    pub fn cicd(base: &EngineConfig) -> Self {
        Self { label: "cicd".into(), engine: base.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    /// First `n` images of the world; `None` for all.
    pub n_images: Option<usize>,
    pub contrast: ContrastSource,
    pub prompt: Vec<TokenId>,
    pub execution: Execution,
}

impl RunPlan {
    pub fn validate(&self, world: &SynthWorld) -> Result<usize, ExperimentError> {
        let n = self.n_images.unwrap_or(world.images.len());
        if n == 0 {
            return Err(ExperimentError::Config("image count must be positive".into()));
        }
        if n > world.images.len() {
            return Err(ExperimentError::Config(format!(
                "{n} images requested, world has {}",
                world.images.len()
            )));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed is required".into()));
        }
        if self.arms.is_empty() {
            return Err(ExperimentError::Config("nothing to run".into()));
        }
        if world.images.len() < 2 {
            return Err(ExperimentError::Config("contrast selection needs at least two images".into()));
        }
        for arm in &self.arms {
            arm.engine.validate()?;
        }
        Ok(n)
    }
}

/// One decoded caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRun {
    pub seed: u64,
    pub image_id: String,
    pub contrast_id: String,
    pub tokens: Vec<TokenId>,
    pub traces: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub seed: u64,
    pub image: usize,
    pub contrast: usize,
    pub probes: Vec<(usize, bool)>,
    /// One run per arm, in plan order.
    pub runs: Vec<CaptionRun>,
}

fn choose_contrast(
    world: &SynthWorld,
    source: &ContrastSource,
    image: usize,
    rng: &mut ChaCha8Rng,
    execution: Execution,
) -> Result<usize, ExperimentError> {
    let query = &world.images[image].id;
    let id = match source {
        ContrastSource::Random => select_random_id(&world.image_ids(), query, rng)?.chosen_id,
        ContrastSource::Retrieve(store) => {
            let v = store.vector(query).ok_or_else(|| SelectorError::NotFound(query.clone()))?;
            select_retrieved(store, query, v, execution)?.chosen_id
        }
        ContrastSource::Fixed(id) => id.clone(),
    };
    world
        .image_index(&id)
        .map_err(|_| ExperimentError::Config(format!("contrast image {id:?} is not in the world")))
}

/// Truth objects probed "yes" plus as many absent objects probed "no".
fn pope_probes(world: &SynthWorld, image: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, bool)> {
    let truth = &world.images[image].objects;
    let absent: Vec<usize> = (0..world.config.n_objects).filter(|o| !truth.contains(o)).collect();
    let k = truth.len().min(absent.len());
    let mut probes: Vec<(usize, bool)> = truth.iter().map(|&o| (o, true)).collect();
    let mut picked: Vec<usize> = sample(rng, absent.len(), k).into_iter().map(|j| absent[j]).collect();
    picked.sort_unstable();
    probes.extend(picked.into_iter().map(|o| (o, false)));
    probes
}

/// Runs every arm on every (seed, image) job.
pub fn run_jobs(world: &Arc<SynthWorld>, plan: &RunPlan) -> Result<Vec<JobOutput>, ExperimentError> {
    let n = plan.validate(world)?;
    let backend = SimBackend::new(Arc::clone(world));
    let jobs: Vec<(u64, usize)> =
        plan.seeds.iter().flat_map(|&s| (0..n).map(move |i| (s, i))).collect();
    // Parallelism lives at the job level; per-job decoding and nested scans
    // stay sequential.
    exec::try_map(plan.execution, &jobs, |&(seed, image)| {
        let mut contrast_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image, "contrast"));
        let contrast = choose_contrast(world, &plan.contrast, image, &mut contrast_rng, Execution::Sequential)?;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image, "pope"));
        let probes = pope_probes(world, image, &mut probe_rng);
        let engine_seed = derive_seed(seed, image, "decode");
        let runs = plan
            .arms
            .iter()
            .map(|arm| {
                let cfg = EngineConfig { seed: engine_seed, ..arm.engine.clone() };
                decode_pair(&backend, world, image, contrast, &plan.prompt, &cfg).map(|(tokens, traces)| {
                    CaptionRun {
                        seed,
                        image_id: world.images[image].id.clone(),
                        contrast_id: world.images[contrast].id.clone(),
                        tokens,
                        traces,
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(JobOutput { seed, image, contrast, probes, runs })
    })
}

fn decode_pair(
    backend: &SimBackend,
    world: &SynthWorld,
    image: usize,
    contrast: usize,
    prompt: &[TokenId],
    cfg: &EngineConfig,
) -> Result<(Vec<TokenId>, Vec<StepTrace>), ExperimentError> {
    let mut pair = SessionPair::open(backend, backend, &world.images[image].id, &world.images[contrast].id, prompt)?;
    let result = generate(&mut pair, cfg)?;
    Ok((result.tokens, result.traces))
}

/// Step statistics split by grammar slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotStats {
    pub function_steps: u64,
    /// Fraction of function-slot steps with `log10(jsd) <= gamma`.
    pub function_fraction_below: f64,
    /// Object-slot steps whose two images share no object.
    pub disjoint_object_steps: u64,
    /// Fraction of those with `log10(jsd) > gamma`.
    pub disjoint_object_fraction_above: f64,
    /// 5th percentile of their `log10(jsd)`.
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub disjoint_object_p05: f64,
    /// Fraction of function slots filled with a function word.
    pub fluency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    pub engine: EngineConfig,
    pub captions: usize,
    pub chair: ChairScores,
    pub pope: PopeScores,
    pub pope_counts: ConfusionCounts,
    /// `(100 - 100·chair_i + 100·pope_f1) / 2`.
    pub amber_composite: f64,
    /// Needs attribute and relation F1, which the synthetic world lacks.
    pub capture: Option<f64>,
    pub jsd: JsdStats,
    pub slots: SlotStats,
    pub gated_fraction: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub world_seed: u64,
    pub images: usize,
    pub seeds: Vec<u64>,
    pub contrast: String,
    pub arms: Vec<ArmReport>,
}

impl ExperimentReport {
    pub fn arm(&self, label: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.label == label)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[idx]
}

pub fn slot_stats<'a>(
    world: &SynthWorld,
    gamma: f64,
    prompt_len: usize,
    runs: impl IntoIterator<Item = (&'a CaptionRun, bool)>,
) -> SlotStats {
    let (mut f_steps, mut f_below, mut f_filled) = (0u64, 0u64, 0u64);
    let mut object = Vec::new();
    for (run, disjoint) in runs {
        for t in &run.traces {
            match world.slot_kind(prompt_len + t.step) {
                SlotKind::Function => {
                    f_steps += 1;
                    f_below += (t.divergence.log10_jsd <= gamma) as u64;
                    f_filled += world.is_function_token(t.token) as u64;
                }
                SlotKind::Object if disjoint => object.push(t.divergence.log10_jsd),
                _ => {}
            }
        }
    }
    object.sort_by(f64::total_cmp);
    let above = object.iter().filter(|&&x| x > gamma).count();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    SlotStats {
        function_steps: f_steps,
        function_fraction_below: ratio(f_below, f_steps),
        disjoint_object_steps: object.len() as u64,
        disjoint_object_fraction_above: ratio(above as u64, object.len() as u64),
        disjoint_object_p05: if object.is_empty() { f64::NEG_INFINITY } else { percentile(&object, 0.05) },
        fluency: ratio(f_filled, f_steps),
    }
}

fn disjoint(world: &SynthWorld, a: usize, b: usize) -> bool {
    let sa: BTreeSet<usize> = world.images[a].objects.iter().copied().collect();
    world.images[b].objects.iter().all(|o| !sa.contains(o))
}

fn caption_record(world: &SynthWorld, image: usize, tokens: &[TokenId]) -> CaptionRecord {
    CaptionRecord {
        image_id: world.images[image].id.clone(),
        mentions: tokens.iter().filter_map(|&t| world.token_object(t)).collect(),
        truth: world.images[image].objects.iter().copied().collect(),
    }
}

/// Aggregates job outputs into one report per arm.
pub fn summarize(
    world: &SynthWorld,
    plan: &RunPlan,
    jobs: &[JobOutput],
) -> Result<ExperimentReport, ExperimentError> {
    let mut arms = Vec::with_capacity(plan.arms.len());
    for (k, arm) in plan.arms.iter().enumerate() {
        let gamma = arm.engine.gamma;
        let records: Vec<CaptionRecord> =
            jobs.iter().map(|j| caption_record(world, j.image, &j.runs[k].tokens)).collect();
        let chair = chair_scores(&records)?;
        let mut counts = ConfusionCounts::default();
        for (j, rec) in jobs.iter().zip(&records) {
            let mentioned: BTreeSet<usize> = rec.mentions.iter().copied().collect();
            for &(o, truth) in &j.probes {
                counts.record(truth, mentioned.contains(&o));
            }
        }
        let pope = pope_scores(&counts)?;
        let traces = jobs.iter().flat_map(|j| j.runs[k].traces.iter());
        let jsd = jsd_stats(traces.clone(), gamma)?;
        let steps = jsd.steps as f64;
        let gated = traces.filter(|t| t.gated).count() as f64;
        let slots = slot_stats(
            world,
            gamma,
            plan.prompt.len(),
            jobs.iter().map(|j| (&j.runs[k], disjoint(world, j.image, j.contrast))),
        );
        let lengths: usize = jobs.iter().map(|j| j.runs[k].tokens.len()).sum();
        arms.push(ArmReport {
            label: arm.label.clone(),
            engine: EngineConfig { seed: 0, ..arm.engine.clone() },
            captions: records.len(),
            chair,
            amber_composite: amber_composite(100.0 * chair.chair_i, 100.0 * pope.f1),
            pope,
            pope_counts: counts,
            capture: None,
            jsd,
            slots,
            gated_fraction: gated / steps,
            mean_length: lengths as f64 / jobs.len() as f64,
        });
    }
    Ok(ExperimentReport {
        world_seed: world.seed,
        images: plan.n_images.unwrap_or(world.images.len()),
        seeds: plan.seeds.clone(),
        contrast: plan.contrast.label(),
        arms,
    })
}

/// Regular decoding against CICD with shared seeds.
pub fn run_experiment(
    world: &Arc<SynthWorld>,
    engine: &EngineConfig,
    seeds: Vec<u64>,
    n_images: Option<usize>,
    contrast: ContrastSource,
    prompt: Vec<TokenId>,
    execution: Execution,
) -> Result<(ExperimentReport, Vec<JobOutput>), ExperimentError> {
    let plan = RunPlan {
        arms: vec![Arm::regular(engine), Arm::cicd(engine)],
        seeds,
        n_images,
        contrast,
        prompt,
        execution,
    };
    let jobs = run_jobs(world, &plan)?;
    Ok((summarize(world, &plan, &jobs)?, jobs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub gamma: f64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub fluency: f64,
    pub gated_fraction: f64,
}

/// One CICD arm per γ, all sharing seeds, contrast draws and probes.
pub fn sweep_gamma(
    world: &Arc<SynthWorld>,
    engine: &EngineConfig,
    gammas: &[f64],
    seeds: Vec<u64>,
    n_images: Option<usize>,
    contrast: ContrastSource,
    prompt: Vec<TokenId>,
    execution: Execution,
) -> Result<(Vec<SweepRow>, ExperimentReport), ExperimentError> {
    if gammas.is_empty() {
        return Err(ExperimentError::Config("gamma list is empty".into()));
    }
    if gammas.iter().any(|g| g.is_nan()) {
        return Err(ExperimentError::Config("gamma values must not be NaN".into()));
    }
    let arms = gammas
        .iter()
        .map(|&g| Arm {
            label: format!("gamma={}", crate::serde_ext::format_ext_f64(g)),
            engine: EngineConfig { gamma: g, ..engine.clone() },
        })
        .collect();
    let plan = RunPlan { arms, seeds, n_images, contrast, prompt, execution };
    let jobs = run_jobs(world, &plan)?;
    let report = summarize(world, &plan, &jobs)?;
    let rows = report
        .arms
        .iter()
        .map(|a| SweepRow {
            gamma: a.engine.gamma,
            chair_s: a.chair.chair_s,
            chair_i: a.chair.chair_i,
            recall: a.chair.recall,
            fluency: a.slots.fluency,
            gated_fraction: a.gated_fraction,
        })
        .collect();
    Ok((rows, report))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,chair_s,chair_i,recall,fluency,gated_fraction\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            crate::serde_ext::format_ext_f64(r.gamma),
            r.chair_s,
            r.chair_i,
            r.recall,
            r.fluency,
            r.gated_fraction
        ));
    }
    out
}

/// Summary of one distance measure over many steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDistances {
    pub steps: usize,
    pub cosine_distance: Summary,
    pub euclidean_distance: Summary,
    pub total_variation: Summary,
    pub jsd: Summary,
    /// Fraction of steps whose two distributions are identical.
    pub zero_jsd_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub pairs: usize,
    pub function: SlotDistances,
    pub object: SlotDistances,
    pub end: SlotDistances,
}

/// Compares the two images' logits along captions of the first image, per
/// slot kind.
pub fn analyze_world(
    world: &Arc<SynthWorld>,
    pairs: usize,
    seed: u64,
    execution: Execution,
) -> Result<ConsistencyReport, ExperimentError> {
    if pairs == 0 {
        return Err(ExperimentError::Config("pair count must be positive".into()));
    }
    let n = world.images.len();
    let base = EngineConfig { alpha_mode: AlphaMode::Off, full_trace: true, ..EngineConfig::default() };
    let plan = RunPlan {
        arms: vec![Arm::regular(&base)],
        seeds: (0..pairs.div_ceil(n) as u64).map(|k| seed + k).collect(),
        n_images: None,
        contrast: ContrastSource::Random,
        prompt: Vec::new(),
        execution,
    };
    let jobs = run_jobs(world, &plan)?;

    let mut buckets: [Vec<[f64; 4]>; 3] = Default::default();
    for job in jobs.iter().take(pairs) {
        for t in &job.runs[0].traces {
            let (Some(a), Some(b)) = (&t.orig_logits, &t.contrast_logits) else { continue };
            let d = distance_suite(&LogitVector::new(a.clone())?, &LogitVector::new(b.clone())?)?;
            let k = match world.slot_kind(t.step) {
                SlotKind::Function => 0,
                SlotKind::Object => 1,
                SlotKind::End => 2,
            };
            buckets[k].push([d.cosine_distance, d.euclidean_distance, d.total_variation, t.divergence.jsd]);
        }
    }
    let summarize_bucket = |rows: &[[f64; 4]]| {
        let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
        SlotDistances {
            steps: rows.len(),
            cosine_distance: Summary::of(&col(0)),
            euclidean_distance: Summary::of(&col(1)),
            total_variation: Summary::of(&col(2)),
            jsd: Summary::of(&col(3)),
            zero_jsd_fraction: if rows.is_empty() {
                0.0
            } else {
                rows.iter().filter(|r| r[3] == 0.0).count() as f64 / rows.len() as f64
            },
        }
    };
    Ok(ConsistencyReport {
        pairs: jobs.len().min(pairs),
        function: summarize_bucket(&buckets[0]),
        object: summarize_bucket(&buckets[1]),
        end: summarize_bucket(&buckets[2]),
    })
}

/// Per-step `log10(jsd)` series as CSV.
pub fn trace_csv<'a>(traces: impl IntoIterator<Item = &'a StepTrace>) -> String {
    let mut out = String::from("row,step,jsd,log10_jsd,gated,token_text\n");
    for (i, t) in traces.into_iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{:e},{},{},{}\n",
            t.step,
            t.divergence.jsd,
            crate::serde_ext::format_ext_f64(t.divergence.log10_jsd),
            t.gated,
            t.token_text
        ));
    }
    out
}
