//! Synthetic captioning world: a language-prior channel shared by all images
//! plus a visual channel that only object slots can see.
//!
//! Vocabulary layout: token 0 is the end token, then the function words, then
//! the object words. Captions follow the cyclic template
//! `F F O F F O ... END`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::session::TokenId;
use crate::sim::calibrate::CalibrationRecord;

pub const WORLD_FORMAT: &str = "cicd-world/1";
pub const END_TOKEN: TokenId = 0;
pub const END_TEXT: &str = "<end>";
/// Logit given to tokens that are ungrammatical in a slot.
pub const LOW_LOGIT: f64 = -20.0;

const FUNCTION_WORDS: [&str; 16] = [
    "a", "the", "with", "and", "on", "near", "of", "in", "next", "to", "some", "two", "by", "under",
    "behind", "is",
];

const OBJECT_WORDS: [&str; 40] = [
    "dog", "cat", "frisbee", "leash", "car", "road", "truck", "sign", "table", "cup", "fork",
    "plate", "bed", "pillow", "lamp", "book", "tree", "bench", "bird", "grass", "boat", "water",
    "dock", "rope", "oven", "sink", "knife", "bowl", "bus", "stop", "pole", "wire", "horse",
    "fence", "barn", "hay", "kite", "beach", "sand", "wave",
];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("unknown image {0:?}")]
    NotFound(String),
    #[error("world file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("world file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Function,
    Object,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_function: usize,
    pub n_objects: usize,
    pub n_images: usize,
    pub objects_per_image: usize,
    /// Objects are grouped into scene clusters of this size; members of a
    /// cluster co-occur strongly under the prior.
    pub cluster_size: usize,
    /// Number of `F F O` groups before the end token.
    pub cycles: usize,
    pub prior_sharpness: f64,
    pub prior_noise: f64,
    pub popularity_sd: f64,
    pub function_sd: f64,
    /// Prior weight on function slots.
    pub w_lang_function: f64,
    /// Prior weight on object slots.
    pub w_lang_object: f64,
    /// Visual weight on object slots. Function slots have none.
    pub w_vis_object: f64,
    /// Subtracted from the prior score of objects already mentioned.
    pub repetition_penalty: f64,
    /// Function-slot score of objects already mentioned.
    pub mention_score: f64,
    /// Function-slot bonus for mentioned objects that are in the image.
    /// Zero keeps function slots exactly image-independent.
    #[serde(default)]
    pub visual_leak: f64,
    /// Standard deviation of per-image noise on function-word logits.
    #[serde(default)]
    pub prior_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_function: 8,
            n_objects: 24,
            n_images: 200,
            objects_per_image: 4,
            cluster_size: 4,
            cycles: 5,
            prior_sharpness: 2.5,
            prior_noise: 0.2,
            popularity_sd: 0.5,
            function_sd: 1.0,
            w_lang_function: 1.0,
            w_lang_object: 1.0,
            w_vis_object: 1.5,
            repetition_penalty: 4.0,
            mention_score: -1.5,
            visual_leak: 0.0,
            prior_jitter: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |m: String| Err(WorldError::Config(m));
        if self.n_function == 0 || self.n_objects == 0 {
            return err("vocabulary needs function and object words".into());
        }
        if self.n_images == 0 {
            return err("world needs at least one image".into());
        }
        if self.objects_per_image == 0 || self.objects_per_image > self.n_objects {
            return err(format!(
                "objects per image must lie in 1..={}, got {}",
                self.n_objects, self.objects_per_image
            ));
        }
        if self.cluster_size == 0 || self.cluster_size > self.n_objects {
            return err(format!("cluster size must lie in 1..={}", self.n_objects));
        }
        if self.cycles == 0 {
            return err("template needs at least one cycle".into());
        }
        let reals = [
            ("prior_sharpness", self.prior_sharpness),
            ("prior_noise", self.prior_noise),
            ("popularity_sd", self.popularity_sd),
            ("function_sd", self.function_sd),
            ("w_lang_function", self.w_lang_function),
            ("w_lang_object", self.w_lang_object),
            ("w_vis_object", self.w_vis_object),
            ("repetition_penalty", self.repetition_penalty),
            ("visual_leak", self.visual_leak),
            ("prior_jitter", self.prior_jitter),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.w_vis_object <= 0.0 {
            return err("object slots need a positive visual weight".into());
        }
        if !self.mention_score.is_finite() {
            return err("mention_score must be finite".into());
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.n_function + self.n_objects
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub id: String,
    /// Indices into the object partition, sorted.
    pub objects: Vec<usize>,
}

/// An image lacking `absent` while containing `present`, where the prior
/// strongly associates the two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trap {
    pub present: usize,
    pub absent: usize,
    pub image_id: String,
    pub cooccurrence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub format: String,
    pub seed: u64,
    pub config: WorldConfig,
    pub vocab: Vec<String>,
    pub images: Vec<ImageSpec>,
    pub popularity: Vec<f64>,
    /// `cooccurrence[a][b]`: prior score of `b` given that `a` was mentioned.
    pub cooccurrence: Vec<Vec<f64>>,
    /// One row per function position of the template.
    pub function_scores: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationRecord>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    presence: Vec<Vec<bool>>,
}

fn word(list: &[&str], i: usize, prefix: &str) -> String {
    list.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("{prefix}{i}"))
}

fn normals(rng: &mut ChaCha8Rng, sd: f64, n: usize) -> Vec<f64> {
    if sd == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, sd).expect("finite non-negative sd");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Deterministic world from a configuration and seed.
pub fn build_world(config: &WorldConfig, seed: u64) -> Result<SynthWorld, WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_o = config.n_objects;
    let cluster_of = |o: usize| o / config.cluster_size;
    let n_clusters = n_o.div_ceil(config.cluster_size);

    let popularity = normals(&mut rng, config.popularity_sd, n_o);
    let mut cooccurrence = Vec::with_capacity(n_o);
    for a in 0..n_o {
        let noise = normals(&mut rng, config.prior_noise, n_o);
        let row = (0..n_o)
            .map(|b| {
                if a == b {
                    0.0
                } else if cluster_of(a) == cluster_of(b) {
                    config.prior_sharpness + noise[b]
                } else {
                    noise[b]
                }
            })
            .collect();
        cooccurrence.push(row);
    }

    // Each image is mostly one scene cluster with one member left out, plus
    // objects from elsewhere, so traps arise by construction.
    let mut images = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let c = rng.random_range(0..n_clusters);
        let members: Vec<usize> = (0..n_o).filter(|&o| cluster_of(o) == c).collect();
        let from_cluster = (config.objects_per_image - 1)
            .min(members.len().saturating_sub(1))
            .max(1)
            .min(members.len());
        let mut objects: Vec<usize> =
            sample(&mut rng, members.len(), from_cluster).into_iter().map(|j| members[j]).collect();
        let rest: Vec<usize> = (0..n_o).filter(|o| !objects.contains(o)).collect();
        let extra = config.objects_per_image - objects.len();
        let outside: Vec<usize> = rest.iter().copied().filter(|&o| cluster_of(o) != c).collect();
        let pool = if outside.len() >= extra { outside } else { rest };
        objects.extend(sample(&mut rng, pool.len(), extra).into_iter().map(|j| pool[j]));
        objects.sort_unstable();
        images.push(ImageSpec { id: format!("img_{i}"), objects });
    }

    let function_scores = (0..2 * config.cycles)
        .map(|_| {
            let row = normals(&mut rng, config.function_sd, config.n_function);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.into_iter().map(|v| v - max).collect()
        })
        .collect();

    SynthWorld::assemble(seed, config.clone(), images, popularity, cooccurrence, function_scores)
}

/// Parameters of the small hand-built world used for prefix traps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    pub w_lang: f64,
    pub w_vis: f64,
    /// Prior association between the prefix object and the trap object.
    pub cooccurrence: f64,
}

impl Default for TrapConfig {
    fn default() -> Self {
        Self { w_lang: 4.0, w_vis: 1.0, cooccurrence: 1.0 }
    }
}

/// Four function words, eight objects and two images. Object 0 ("dog") is in
/// `img_0`; the prior ties it to object 1 ("cat"), which neither image
/// contains. `img_1` shares no objects with `img_0`.
pub fn trap_world(trap: &TrapConfig, seed: u64) -> Result<SynthWorld, WorldError> {
    let config = WorldConfig {
        n_function: 4,
        n_objects: 8,
        n_images: 2,
        objects_per_image: 3,
        cluster_size: 4,
        cycles: 3,
        prior_sharpness: 0.0,
        prior_noise: 0.0,
        popularity_sd: 0.0,
        w_lang_object: trap.w_lang,
        w_vis_object: trap.w_vis,
        ..WorldConfig::default()
    };
    config.validate()?;
    let popularity = (0..8).map(|o| if o < 4 { 0.0 } else { -1.0 }).collect();
    let mut cooccurrence = vec![vec![0.0; 8]; 8];
    cooccurrence[0][1] = trap.cooccurrence;
    cooccurrence[1][0] = trap.cooccurrence;
    let images = vec![
        ImageSpec { id: "img_0".into(), objects: vec![0, 2, 3] },
        ImageSpec { id: "img_1".into(), objects: vec![4, 5, 6] },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let function_scores = (0..2 * config.cycles)
        .map(|_| {
            let row = normals(&mut rng, config.function_sd, config.n_function);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.into_iter().map(|v| v - max).collect()
        })
        .collect();
    SynthWorld::assemble(seed, config, images, popularity, cooccurrence, function_scores)
}

impl SynthWorld {
    fn assemble(
        seed: u64,
        config: WorldConfig,
        images: Vec<ImageSpec>,
        popularity: Vec<f64>,
        cooccurrence: Vec<Vec<f64>>,
        function_scores: Vec<Vec<f64>>,
    ) -> Result<Self, WorldError> {
        let mut vocab = vec![END_TEXT.to_owned()];
        vocab.extend((0..config.n_function).map(|i| word(&FUNCTION_WORDS, i, "fn")));
        vocab.extend((0..config.n_objects).map(|i| word(&OBJECT_WORDS, i, "obj")));
        let mut world = SynthWorld {
            format: WORLD_FORMAT.to_owned(),
            seed,
            config,
            vocab,
            images,
            popularity,
            cooccurrence,
            function_scores,
            calibration: None,
            index: HashMap::new(),
            presence: Vec::new(),
        };
        world.finish()?;
        Ok(world)
    }

    /// Validates shapes and rebuilds lookup tables.
    fn finish(&mut self) -> Result<(), WorldError> {
        let err = |m: String| Err(WorldError::Config(m));
        if self.format != WORLD_FORMAT {
            return err(format!("unsupported world format {:?}", self.format));
        }
        self.config.validate()?;
        let c = &self.config;
        if self.vocab.len() != c.vocab_size() {
            return err(format!("vocab has {} entries, expected {}", self.vocab.len(), c.vocab_size()));
        }
        let unique: BTreeSet<&String> = self.vocab.iter().collect();
        if unique.len() != self.vocab.len() {
            return err("vocabulary entries must be unique".into());
        }
        if self.popularity.len() != c.n_objects || self.popularity.iter().any(|v| !v.is_finite()) {
            return err("popularity must hold one finite score per object".into());
        }
        if self.cooccurrence.len() != c.n_objects
            || self
                .cooccurrence
                .iter()
                .any(|r| r.len() != c.n_objects || r.iter().any(|v| !v.is_finite()))
        {
            return err("co-occurrence table must be a finite square over the objects".into());
        }
        if self.function_scores.len() != 2 * c.cycles
            || self
                .function_scores
                .iter()
                .any(|r| r.len() != c.n_function || r.iter().any(|v| !v.is_finite()))
        {
            return err("function scores must hold one finite row per function position".into());
        }
        if self.images.is_empty() {
            return err("world needs at least one image".into());
        }
        self.index.clear();
        self.presence.clear();
        for (i, img) in self.images.iter().enumerate() {
            if img.objects.is_empty() {
                return err(format!("image {:?} has no objects", img.id));
            }
            if let Some(o) = img.objects.iter().find(|&&o| o >= c.n_objects) {
                return err(format!("image {:?} lists unknown object {o}", img.id));
            }
            if self.index.insert(img.id.clone(), i).is_some() {
                return err(format!("duplicate image id {:?}", img.id));
            }
            let mut present = vec![false; c.n_objects];
            for &o in &img.objects {
                present[o] = true;
            }
            self.presence.push(present);
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, WorldError> {
        let mut w: SynthWorld = serde_json::from_str(s)?;
        w.finish()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("world serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn with_visual_weight(&self, w_vis: f64) -> Result<Self, WorldError> {
        let mut w = self.clone();
        w.config.w_vis_object = w_vis;
        w.config.validate()?;
        Ok(w)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn object_offset(&self) -> usize {
        1 + self.config.n_function
    }

    pub fn image_index(&self, id: &str) -> Result<usize, WorldError> {
        self.index.get(id).copied().ok_or_else(|| WorldError::NotFound(id.to_owned()))
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    pub fn ground_truth_objects(&self, image_id: &str) -> Result<BTreeSet<usize>, WorldError> {
        let i = self.image_index(image_id)?;
        Ok(self.images[i].objects.iter().copied().collect())
    }

    pub fn object_token(&self, object: usize) -> TokenId {
        (self.object_offset() + object) as TokenId
    }

    /// Object index of a token, if it is an object word.
    pub fn token_object(&self, token: TokenId) -> Option<usize> {
        (token as usize).checked_sub(self.object_offset()).filter(|&o| o < self.config.n_objects)
    }

    pub fn is_function_token(&self, token: TokenId) -> bool {
        (1..=self.config.n_function).contains(&(token as usize))
    }

    pub fn object_name(&self, object: usize) -> &str {
        &self.vocab[self.object_offset() + object]
    }

    pub fn template_len(&self) -> usize {
        3 * self.config.cycles + 1
    }

    pub fn slot_kind(&self, position: usize) -> SlotKind {
        if position >= 3 * self.config.cycles {
            SlotKind::End
        } else if position % 3 == 2 {
            SlotKind::Object
        } else {
            SlotKind::Function
        }
    }

    /// Objects mentioned in `tokens`, in order of first mention.
    pub fn mentioned(&self, tokens: &[TokenId]) -> Vec<usize> {
        let mut seen = Vec::new();
        for &t in tokens {
            if let Some(o) = self.token_object(t) {
                if !seen.contains(&o) {
                    seen.push(o);
                }
            }
        }
        seen
    }

    /// Next-token logits for an image given every token so far (prompt
    /// included); the grammar position is `tokens.len()`.
    pub fn next_logits(&self, image: usize, tokens: &[TokenId]) -> Vec<f64> {
        let c = &self.config;
        let pos = tokens.len();
        let off = self.object_offset();
        let mut l = vec![LOW_LOGIT; self.vocab_size()];
        let present = &self.presence[image];
        match self.slot_kind(pos) {
            SlotKind::End => l[END_TOKEN as usize] = 0.0,
            SlotKind::Function => {
                let row = &self.function_scores[(pos / 3) * 2 + pos % 3];
                for (f, &s) in row.iter().enumerate() {
                    l[1 + f] = c.w_lang_function * s;
                }
                if c.prior_jitter > 0.0 {
                    let jitter = self.jitter(image, pos);
                    for (f, j) in jitter.into_iter().enumerate() {
                        l[1 + f] += j;
                    }
                }
                for o in self.mentioned(tokens) {
                    l[off + o] = c.mention_score + if present[o] { c.visual_leak } else { 0.0 };
                }
            }
            SlotKind::Object => {
                let mentioned = self.mentioned(tokens);
                for o in 0..c.n_objects {
                    let mut s = self.popularity[o];
                    if let Some(best) = mentioned
                        .iter()
                        .map(|&m| self.cooccurrence[m][o])
                        .reduce(f64::max)
                    {
                        s += best;
                    }
                    if mentioned.contains(&o) {
                        s -= c.repetition_penalty;
                    }
                    let vis = if present[o] { 1.0 } else { -1.0 };
                    l[off + o] = c.w_lang_object * s + c.w_vis_object * vis;
                }
            }
        }
        l
    }

    fn jitter(&self, image: usize, position: usize) -> Vec<f64> {
        let key = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((image as u64) << 20)
            .wrapping_add(position as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(0x6a69_7474_6572);
        normals(&mut rng, self.config.prior_jitter, self.config.n_function)
    }

    /// Every (present, absent, image) triple whose prior association is at
    /// least `threshold`.
    pub fn find_traps(&self, threshold: f64) -> Vec<Trap> {
        let mut traps = Vec::new();
        for img in &self.images {
            let present: BTreeSet<usize> = img.objects.iter().copied().collect();
            for &a in &img.objects {
                for b in 0..self.config.n_objects {
                    let score = self.cooccurrence[a][b];
                    if !present.contains(&b) && score >= threshold {
                        traps.push(Trap {
                            present: a,
                            absent: b,
                            image_id: img.id.clone(),
                            cooccurrence: score,
                        });
                    }
                }
            }
        }
        traps
    }

    pub fn token_table(&self) -> Vec<String> {
        self.vocab.clone()
    }
}
