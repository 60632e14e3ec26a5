//! Procedural generator of annotated image-text pairs: a synthetic news
//! world where image content and text tokens share ground-truth semantics,
//! plus the four manipulation operators, perturbation, and dataset assembly.

pub mod decode;
pub mod manip;
pub mod perturb;
pub mod render;

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ManipType, MediaPair, Split};

use manip::{apply_fa, apply_fs, apply_ta, apply_ts, ManipError};
use render::{render, FacePatch, SceneSpec};

const NAME_POOL: [&str; 16] = [
    "alice", "bruno", "carmen", "dmitri", "elena", "farid", "greta", "hiro", "ingrid", "jamal",
    "katya", "liam", "mona", "nadia", "omar", "priya",
];
const POSITIVE_VERBS: [&str; 4] = ["greeted", "smiled", "celebrated", "cheered"];
const NEGATIVE_VERBS: [&str; 4] = ["detained", "mourned", "protested", "scowled"];
const SCENE_POOL: [&str; 10] = [
    "plaza", "harbor", "stadium", "museum", "market", "bridge", "station", "gallery", "theater",
    "campus",
];
const MONTHS: [&str; 12] = [
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];

pub const GRAMMAR: &str = "NAME EMOTION_VERB at SCENE on DATE";

/// Number of tokens every generated sentence has under the fixed grammar.
pub const SENTENCE_LEN: usize = 6;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("world needs at least 2 identities for face swaps, got {0}")]
    TooFewIdentities(usize),
    #[error("world needs 2..=10 scenes, got {0}")]
    BadSceneCount(usize),
    #[error("world needs 2..=60 dates, got {0}")]
    BadDateCount(usize),
    #[error("image size must be an even number >= 48, got {0}")]
    BadImageSize(usize),
    #[error("class proportions sum to {0}, expected 1")]
    BadProportions(f64),
    #[error("count {count} too small for dedup: needs text tuple space >= {needed}")]
    CountTooSmall { count: usize, needed: usize },
    #[error("sample generation failed: {0}")]
    Manip(#[from] ManipError),
    #[error("generated sample violates annotation invariants: {0}")]
    InvalidSample(String),
}

/// Static description of the synthetic world. All token tables and rendering
/// palettes are derived deterministically from these counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_identities: usize,
    /// Fixed at two polarities (positive/negative); kept explicit because the
    /// emotion verb pools are split along this axis.
    pub n_emotions: usize,
    pub n_scenes: usize,
    pub n_dates: usize,
    pub image_size: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec { n_identities: 8, n_emotions: 2, n_scenes: 6, n_dates: 60, image_size: 64 }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.n_identities < 2 || self.n_identities > NAME_POOL.len() {
            return Err(GenError::TooFewIdentities(self.n_identities));
        }
        if self.n_scenes < 2 || self.n_scenes > SCENE_POOL.len() {
            return Err(GenError::BadSceneCount(self.n_scenes));
        }
        if self.n_dates < 2 || self.n_dates > 60 {
            return Err(GenError::BadDateCount(self.n_dates));
        }
        if self.image_size < 48 || self.image_size % 2 != 0 {
            return Err(GenError::BadImageSize(self.image_size));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::build(self)
    }

    /// Number of distinct pristine sentences the world can produce.
    pub fn text_tuple_space(&self) -> usize {
        self.n_identities * (POSITIVE_VERBS.len() + NEGATIVE_VERBS.len()) * self.n_scenes
            * self.n_dates
    }
}

/// Dense token table: id 0 is padding, then names, positive verbs, negative
/// verbs, "at", scenes, "on", dates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    n_identities: usize,
    n_scenes: usize,
    n_dates: usize,
}

impl Vocab {
    pub const PAD: usize = 0;

    fn build(spec: &WorldSpec) -> Vocab {
        let mut words = vec!["<pad>".to_string()];
        words.extend(NAME_POOL.iter().take(spec.n_identities).map(|s| s.to_string()));
        words.extend(POSITIVE_VERBS.iter().map(|s| s.to_string()));
        words.extend(NEGATIVE_VERBS.iter().map(|s| s.to_string()));
        words.push("at".to_string());
        words.extend(SCENE_POOL.iter().take(spec.n_scenes).map(|s| s.to_string()));
        words.push("on".to_string());
        for i in 0..spec.n_dates {
            let month = MONTHS[i % 12];
            let day = i / 12 + 1;
            words.push(format!("{month}{day}"));
        }
        Vocab {
            words,
            n_identities: spec.n_identities,
            n_scenes: spec.n_scenes,
            n_dates: spec.n_dates,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn name_token(&self, identity: usize) -> usize {
        1 + identity
    }

    pub fn identity_of_name(&self, id: usize) -> Option<usize> {
        (1..1 + self.n_identities).contains(&id).then(|| id - 1)
    }

    fn pos_verb_base(&self) -> usize {
        1 + self.n_identities
    }

    pub fn positive_verbs(&self) -> Vec<usize> {
        (0..POSITIVE_VERBS.len()).map(|i| self.pos_verb_base() + i).collect()
    }

    pub fn negative_verbs(&self) -> Vec<usize> {
        let base = self.pos_verb_base() + POSITIVE_VERBS.len();
        (0..NEGATIVE_VERBS.len()).map(|i| base + i).collect()
    }

    /// Some(true) for positive verbs, Some(false) for negative, None otherwise.
    pub fn verb_polarity(&self, id: usize) -> Option<bool> {
        let base = self.pos_verb_base();
        if (base..base + POSITIVE_VERBS.len()).contains(&id) {
            Some(true)
        } else if (base + POSITIVE_VERBS.len()..base + 8).contains(&id) {
            Some(false)
        } else {
            None
        }
    }

    pub fn at_token(&self) -> usize {
        self.pos_verb_base() + 8
    }

    pub fn scene_token(&self, scene: usize) -> usize {
        self.at_token() + 1 + scene
    }

    pub fn scene_of_token(&self, id: usize) -> Option<usize> {
        let base = self.at_token() + 1;
        (base..base + self.n_scenes).contains(&id).then(|| id - base)
    }

    pub fn on_token(&self) -> usize {
        self.at_token() + 1 + self.n_scenes
    }

    pub fn date_token(&self, date: usize) -> usize {
        self.on_token() + 1 + date
    }

    pub fn date_of_token(&self, id: usize) -> Option<usize> {
        let base = self.on_token() + 1;
        (base..base + self.n_dates).contains(&id).then(|| id - base)
    }

    pub fn sentence(&self, identity: usize, verb: usize, scene: usize, date: usize) -> Vec<usize> {
        vec![
            self.name_token(identity),
            verb,
            self.at_token(),
            self.scene_token(scene),
            self.on_token(),
            self.date_token(date),
        ]
    }

    pub fn words_of(&self, tokens: &[usize]) -> Vec<String> {
        tokens.iter().map(|&t| self.words[t].clone()).collect()
    }

    pub fn ids_of(&self, words: &[&str]) -> Option<Vec<usize>> {
        words.iter().map(|w| self.id_of(w)).collect()
    }
}

/// Parsed view of a grammatical sentence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextSemantics {
    pub name_id: usize,
    pub identity: usize,
    pub verb_id: usize,
    pub positive: bool,
    pub scene_id: usize,
    pub date_id: usize,
}

impl TextSemantics {
    pub const NAME_POS: usize = 0;
    pub const VERB_POS: usize = 1;
    pub const SCENE_POS: usize = 3;
    pub const DATE_POS: usize = 5;

    pub fn parse(vocab: &Vocab, tokens: &[usize]) -> Option<TextSemantics> {
        if tokens.len() != SENTENCE_LEN {
            return None;
        }
        let identity = vocab.identity_of_name(tokens[Self::NAME_POS])?;
        let positive = vocab.verb_polarity(tokens[Self::VERB_POS])?;
        if tokens[2] != vocab.at_token() || tokens[4] != vocab.on_token() {
            return None;
        }
        Some(TextSemantics {
            name_id: tokens[Self::NAME_POS],
            identity,
            verb_id: tokens[Self::VERB_POS],
            positive,
            scene_id: vocab.scene_of_token(tokens[Self::SCENE_POS])?,
            date_id: vocab.date_of_token(tokens[Self::DATE_POS])?,
        })
    }
}

/// splitmix64-style mixer for deriving independent sub-seeds.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

const RADIUS_CHOICES: [usize; 6] = [9, 10, 11, 12, 13, 14];

/// Generate one pristine pair: 1-3 faces sharing the subject identity, text
/// consistent with the largest face and the background scene.
pub fn gen_pristine(seed: u64, spec: &WorldSpec) -> Result<MediaPair, GenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = spec.vocab();

    let identity = rng.gen_range(0..spec.n_identities);
    let positive = rng.gen_bool(0.5);
    let scene_id = rng.gen_range(0..spec.n_scenes);
    let date_id = rng.gen_range(0..spec.n_dates);
    let verb_pool = if positive { vocab.positive_verbs() } else { vocab.negative_verbs() };
    let verb = verb_pool[rng.gen_range(0..verb_pool.len())];

    let n_faces = rng.gen_range(1..=3usize);
    let mut radii = RADIUS_CHOICES.to_vec();
    radii.shuffle(&mut rng);
    radii.truncate(n_faces);
    radii.sort_unstable_by(|a, b| b.cmp(a)); // subject gets the largest radius

    let size = spec.image_size;
    let mut faces: Vec<FacePatch> = Vec::new();
    for (i, &r) in radii.iter().enumerate() {
        let mut placed = false;
        for _ in 0..60 {
            let cx = rng.gen_range(r + 1..size - r - 1);
            let cy = rng.gen_range(r + 1..size - r - 1);
            // gap of 9px: blur and resampling spread saturation by at most
            // ~3px per side, so discs can never merge into one component
            let fits = faces.iter().all(|f| {
                let dx = f.cx as f64 - cx as f64;
                let dy = f.cy as f64 - cy as f64;
                (dx * dx + dy * dy).sqrt() > (f.radius + r + 9) as f64
            });
            if fits {
                let face_positive = if i == 0 { positive } else { rng.gen_bool(0.5) };
                faces.push(FacePatch { cx, cy, radius: r, identity, positive: face_positive });
                placed = true;
                break;
            }
        }
        if !placed {
            break; // crowded image: settle for fewer faces
        }
    }

    let scene = SceneSpec { scene: scene_id, faces };
    let image = render(spec, &scene);
    let tokens = vocab.sentence(identity, verb, scene_id, date_id);
    let y_tok = vec![0u8; tokens.len()];

    Ok(MediaPair {
        id: format!("g{seed:016x}"),
        image,
        tokens,
        y_bin: 0,
        y_mul: [0, 0, 0, 0],
        y_box: crate::types::BBox::ZERO,
        y_tok,
        split: Split::Train,
    })
}

/// Per-class sample proportions; must sum to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClassMix {
    pub pristine: f64,
    pub fs: f64,
    pub fa: f64,
    pub ts: f64,
    pub ta: f64,
    /// One image-side and one text-side manipulation combined.
    pub mixed: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        ClassMix { pristine: 0.333, fs: 0.21, fa: 0.18, ts: 0.089, ta: 0.038, mixed: 0.15 }
    }
}

impl ClassMix {
    pub fn sum(&self) -> f64 {
        self.pristine + self.fs + self.fa + self.ts + self.ta + self.mixed
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub perturb_rate: f64,
    pub mix: ClassMix,
    /// Within mixed pairs and as a tie-breaker: fraction of image-side
    /// manipulations that are FS rather than FA.
    pub fs_share: f64,
    /// Fraction of text-side manipulations that are TS rather than TA.
    pub ts_share: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 10_000,
            seed: 0,
            perturb_rate: 0.5,
            mix: ClassMix::default(),
            fs_share: 0.54,
            ts_share: 0.70,
        }
    }
}

/// The nine sample classes (one pristine + four single + four mixed).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum SampleClass {
    Pristine,
    Single(ManipType),
    Mixed(ManipType, ManipType), // (image side, text side)
}

pub const CLASS_KEYS: [&str; 9] =
    ["pristine", "FS", "FA", "TS", "TA", "FS+TS", "FS+TA", "FA+TS", "FA+TA"];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub pairs: Vec<MediaPair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&MediaPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn class_histogram(&self) -> Vec<(String, usize)> {
        CLASS_KEYS
            .iter()
            .map(|&k| (k.to_string(), self.pairs.iter().filter(|p| p.class_key() == k).count()))
            .collect()
    }
}

/// Largest-remainder apportionment of `total` across nonnegative weights.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        if !out.is_empty() {
            out[0] = total;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: usize = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut cursor = 0;
    while rest > 0 {
        counts[order[cursor % order.len()]] += 1;
        rest -= 1;
        cursor += 1;
    }
    counts
}

/// 7:1:2 split sizes with largest-remainder rounding.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let c = apportion(count, &[0.7, 0.1, 0.2]);
    (c[0], c[1], c[2])
}

fn class_schedule(n: usize, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Vec<SampleClass> {
    let m = &cfg.mix;
    let counts = apportion(n, &[m.pristine, m.fs, m.fa, m.ts, m.ta, m.mixed]);
    let mut classes = Vec::with_capacity(n);
    classes.extend(std::iter::repeat(SampleClass::Pristine).take(counts[0]));
    classes.extend(std::iter::repeat(SampleClass::Single(ManipType::FaceSwap)).take(counts[1]));
    classes
        .extend(std::iter::repeat(SampleClass::Single(ManipType::FaceAttribute)).take(counts[2]));
    classes.extend(std::iter::repeat(SampleClass::Single(ManipType::TextSwap)).take(counts[3]));
    classes
        .extend(std::iter::repeat(SampleClass::Single(ManipType::TextAttribute)).take(counts[4]));
    let mixed = apportion(
        counts[5],
        &[
            cfg.fs_share * cfg.ts_share,
            cfg.fs_share * (1.0 - cfg.ts_share),
            (1.0 - cfg.fs_share) * cfg.ts_share,
            (1.0 - cfg.fs_share) * (1.0 - cfg.ts_share),
        ],
    );
    let combos = [
        (ManipType::FaceSwap, ManipType::TextSwap),
        (ManipType::FaceSwap, ManipType::TextAttribute),
        (ManipType::FaceAttribute, ManipType::TextSwap),
        (ManipType::FaceAttribute, ManipType::TextAttribute),
    ];
    for (i, &(img, txt)) in combos.iter().enumerate() {
        classes.extend(std::iter::repeat(SampleClass::Mixed(img, txt)).take(mixed[i]));
    }
    classes.shuffle(rng);
    classes
}

/// Generate the full dataset in memory: pristine sources (unique texts),
/// per-split manipulation, perturbation of half the pool, and final
/// deduplication of val/test texts against train.
pub fn generate_dataset(spec: &WorldSpec, cfg: &DatasetConfig) -> Result<Dataset, GenError> {
    spec.validate()?;
    let sum = cfg.mix.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GenError::BadProportions(sum));
    }
    if cfg.count < 10 || spec.text_tuple_space() < 4 * cfg.count {
        return Err(GenError::CountTooSmall {
            count: cfg.count,
            needed: 4 * cfg.count,
        });
    }

    let vocab = spec.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, 0));

    // pristine sources with globally unique sentences
    let mut seen_texts: HashSet<Vec<usize>> = HashSet::new();
    let mut sources: Vec<MediaPair> = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut attempt = 0u64;
        loop {
            let s = mix_seed(cfg.seed, 2 + i as u64, attempt);
            let mut pair = gen_pristine(s, spec)?;
            if seen_texts.insert(pair.tokens.clone()) {
                pair.id = format!("s{i:06}");
                sources.push(pair);
                break;
            }
            attempt += 1;
            if attempt > 200 {
                return Err(GenError::CountTooSmall {
                    count: cfg.count,
                    needed: 4 * cfg.count,
                });
            }
        }
    }

    // split by source id: no derived sample crosses splits
    let (n_train, n_val, _) = split_sizes(cfg.count);
    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut rng);
    for (rank, &idx) in order.iter().enumerate() {
        sources[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    // per-split class schedules keep every split's mixture close to config
    let mut pairs: Vec<Option<MediaPair>> = vec![None; cfg.count];
    for split in Split::ALL {
        let members: Vec<usize> =
            (0..cfg.count).filter(|&i| sources[i].split == split).collect();
        let classes = class_schedule(members.len(), cfg, &mut rng);
        let split_sources: Vec<MediaPair> =
            members.iter().map(|&i| sources[i].clone()).collect();

        for (k, &idx) in members.iter().enumerate() {
            let source = &sources[idx];
            let sample_seed = mix_seed(cfg.seed, 3, idx as u64);
            let banned = |tokens: &[usize]| {
                // veto texts that exist in another split's sources
                seen_texts.contains(tokens)
            };
            let pair = build_sample(
                spec,
                &vocab,
                source,
                classes[k],
                &split_sources,
                sample_seed,
                &banned,
            )?;
            pairs[idx] = Some(pair);
        }
    }
    let mut pairs: Vec<MediaPair> = pairs.into_iter().map(|p| p.unwrap()).collect();

    // perturb exactly floor(rate * count) samples, chosen uniformly
    let n_perturb = (cfg.perturb_rate * cfg.count as f64).floor() as usize;
    let mut perturb_order: Vec<usize> = (0..cfg.count).collect();
    perturb_order.shuffle(&mut rng);
    for &idx in perturb_order.iter().take(n_perturb) {
        let s = mix_seed(cfg.seed, 4, idx as u64);
        pairs[idx].image = perturb::perturb(&pairs[idx].image, s);
    }

    // store on the 8-bit grid the PNG round trip preserves
    for p in &mut pairs {
        p.image.quantize_u8();
    }

    // deduplicate: drop val/test samples whose exact token sequence is in train
    let train_texts: HashSet<Vec<usize>> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| p.tokens.clone())
        .collect();
    pairs.retain(|p| p.split == Split::Train || !train_texts.contains(&p.tokens));

    for p in &pairs {
        let issues = crate::types::validate_pair(p);
        if !issues.is_empty() {
            return Err(GenError::InvalidSample(format!("{}: {}", p.id, issues.join("; "))));
        }
    }

    Ok(Dataset { spec: spec.clone(), pairs })
}

fn build_sample(
    spec: &WorldSpec,
    vocab: &Vocab,
    source: &MediaPair,
    class: SampleClass,
    split_sources: &[MediaPair],
    seed: u64,
    banned: &dyn Fn(&[usize]) -> bool,
) -> Result<MediaPair, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let image_op = |pair: &MediaPair, op: ManipType, rng: &mut ChaCha8Rng| match op {
        ManipType::FaceSwap => {
            let sem = TextSemantics::parse(vocab, &pair.tokens).expect("grammar");
            let offset = rng.gen_range(1..spec.n_identities);
            let donor = (sem.identity + offset) % spec.n_identities;
            apply_fs(spec, pair, donor)
        }
        ManipType::FaceAttribute => apply_fa(spec, pair),
        _ => unreachable!(),
    };
    let text_op = |pair: &MediaPair, op: ManipType, rng: &mut ChaCha8Rng| match op {
        ManipType::TextSwap => {
            match apply_ts(spec, pair, split_sources, rng.gen()) {
                Ok(p) => Ok(p),
                // no same-name candidate in this split: fall back to the
                // other text manipulation, mirroring retrieval filtering
                Err(ManipError::NoCandidate) => apply_ta(spec, pair, rng.gen(), banned),
                Err(e) => Err(e),
            }
        }
        ManipType::TextAttribute => {
            match apply_ta(spec, pair, rng.gen(), banned) {
                Ok(p) => Ok(p),
                Err(ManipError::NoCandidate) => {
                    // every opposite verb collides cross-split; accept one and
                    // let final dedup drop the sample if needed
                    apply_ta(spec, pair, rng.gen(), &|_| false)
                }
                Err(e) => Err(e),
            }
        }
        _ => unreachable!(),
    };

    let pair = match class {
        SampleClass::Pristine => source.clone(),
        SampleClass::Single(op) if op.is_image_side() => image_op(source, op, &mut rng)?,
        SampleClass::Single(op) => text_op(source, op, &mut rng)?,
        SampleClass::Mixed(img, txt) => {
            let step = image_op(source, img, &mut rng)?;
            text_op(&step, txt, &mut rng)?
        }
    };
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::decode::decode_image;
    use crate::types::validate_pair;

    #[test]
    fn pristine_deterministic_in_seed() {
        let spec = WorldSpec::default();
        let a = gen_pristine(7, &spec).unwrap();
        let b = gen_pristine(7, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pristine_passes_validation() {
        let spec = WorldSpec::default();
        for seed in 0..50 {
            let p = gen_pristine(seed, &spec).unwrap();
            assert!(validate_pair(&p).is_empty());
            assert_eq!(p.tokens.len(), SENTENCE_LEN);
        }
    }

    #[test]
    fn pristine_rejects_single_identity_world() {
        let spec = WorldSpec { n_identities: 1, ..WorldSpec::default() };
        assert!(matches!(gen_pristine(0, &spec), Err(GenError::TooFewIdentities(1))));
    }

    #[test]
    fn every_face_hue_has_its_name_in_text() {
        // Exhaustive scan oracle over 1000 pristine samples.
        let spec = WorldSpec::default();
        let vocab = spec.vocab();
        for seed in 0..1000u64 {
            let p = gen_pristine(seed, &spec).unwrap();
            let decoded = decode_image(&spec, &p.image).expect("faces");
            let name_ids: Vec<usize> = p
                .tokens
                .iter()
                .copied()
                .filter(|&t| vocab.identity_of_name(t).is_some())
                .collect();
            for face in &decoded.faces {
                let name = vocab.name_token(face.identity);
                assert!(
                    name_ids.contains(&name),
                    "seed {seed}: face identity {} missing from text",
                    face.identity
                );
            }
        }
    }

    #[test]
    fn pristine_text_matches_image_semantics() {
        let spec = WorldSpec::default();
        let vocab = spec.vocab();
        for seed in 1000..1400u64 {
            let p = gen_pristine(seed, &spec).unwrap();
            let sem = TextSemantics::parse(&vocab, &p.tokens).unwrap();
            let decoded = decode_image(&spec, &p.image).unwrap();
            assert_eq!(decoded.largest().identity, sem.identity, "seed {seed}");
            assert_eq!(decoded.largest().positive, sem.positive, "seed {seed}");
            assert_eq!(decoded.scene, sem.scene_id, "seed {seed}");
        }
    }

    #[test]
    fn split_sizes_match_7_1_2() {
        assert_eq!(split_sizes(100), (70, 10, 20));
        assert_eq!(split_sizes(10), (7, 1, 2));
        let (tr, va, te) = split_sizes(999);
        assert_eq!(tr + va + te, 999);
        assert!((tr as f64 / 999.0 - 0.7).abs() < 0.01);
    }

    #[test]
    fn apportion_respects_total() {
        for total in [0usize, 1, 7, 100, 997] {
            let c = apportion(total, &[0.3, 0.3, 0.2, 0.2]);
            assert_eq!(c.iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn bad_proportions_rejected() {
        let spec = WorldSpec::default();
        let cfg = DatasetConfig {
            count: 100,
            mix: ClassMix { pristine: 0.9, ..ClassMix::default() },
            ..DatasetConfig::default()
        };
        assert!(matches!(generate_dataset(&spec, &cfg), Err(GenError::BadProportions(_))));
    }

    #[test]
    fn count_too_small_rejected() {
        let spec = WorldSpec::default();
        let cfg = DatasetConfig { count: 5, ..DatasetConfig::default() };
        assert!(matches!(generate_dataset(&spec, &cfg), Err(GenError::CountTooSmall { .. })));
    }
}
