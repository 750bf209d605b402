//! Synthetic corpora with planted signs, plus brute-force oracles used by the
//! test suites.
//!
//! Every word gets a prototype direction and a few variant directions around
//! it. Continuous videos are smooth background noise with variants planted
//! as triangular bumps; dictionary clips see the variant through a fixed
//! random linear map plus an offset, which stands in for the gap between
//! isolated and co-articulated signing.

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use oracle::{oracle_ap, oracle_bags, oracle_loss, OracleBags};

use crate::corpus::{
    tokenize, write_feature_file, AnnotationSource, CorpusManifest, DictionaryEntry,
    FeatureSequence, SparseAnnotation, SubtitledSequence, Vocabulary, Word, WINDOW_FRAMES,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_MANIFEST_FILE: &str = "test_manifest.json";
pub const PLANT_LOG_FILE: &str = "plant_log.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// Rows between a planted sign's peak and its annotated frame.
pub const SIGN_PEAK_LEAD: usize = 8;
/// A plant is nonzero on rows `peak - 12 ..= peak + 12`.
pub const SIGN_HALF_WIDTH: usize = 13;

/// Vocabulary pool; every entry is its own lemma and normalised form.
pub const WORD_POOL: [&str; 40] = [
    "friend", "name", "what", "house", "water", "school", "family", "tree", "book", "money",
    "work", "play", "sign", "language", "mother", "father", "child", "food", "bread", "milk",
    "apple", "dog", "cat", "bird", "horse", "garden", "window", "door", "table", "chair", "car",
    "train", "boat", "river", "summer", "winter", "moon", "night", "happy", "content",
];

const FILLERS: [&str; 12] = [
    "the", "and", "then", "my", "our", "very", "today", "with", "about", "you", "we", "again",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    /// Words without any annotation; `None` holds out the last six words.
    pub held_out_words: Option<Vec<Word>>,
    pub variants_min: u32,
    pub variants_max: u32,
    pub variants_mean: f64,
    pub feature_dim: usize,
    /// Rank of the subspace that word prototypes are drawn from.
    pub latent_dim: usize,
    /// Spread of variant directions around their word prototype.
    pub variant_spread: f64,
    /// Weight of the random rotation in the dictionary map `(1-s) I + s Q`.
    pub domain_shift: f64,
    /// Norm of the constant offset added to dictionary features.
    pub dictionary_bias: f64,
    pub dictionary_clips: usize,
    pub dictionary_noise: f64,
    /// Standard deviation of the background process.
    pub noise_sigma: f64,
    /// Lag-one correlation of the background process across rows.
    pub noise_smoothness: f64,
    pub sign_amplitude: f64,
    /// Per-instance perturbation of a planted sign.
    pub coarticulation: f64,
    pub signs_per_video: usize,
    pub distractors_per_video: usize,
    pub distractor_pool: usize,
    pub video_frames: u32,
    pub train_videos: usize,
    pub test_clips_per_word: usize,
    pub test_video_frames: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30,
            held_out_words: None,
            variants_min: 1,
            variants_max: 10,
            variants_mean: 3.0,
            feature_dim: 64,
            latent_dim: 16,
            variant_spread: 0.6,
            domain_shift: 0.8,
            dictionary_bias: 0.5,
            dictionary_clips: 4,
            dictionary_noise: 0.1,
            noise_sigma: 0.08,
            noise_smoothness: 0.9,
            sign_amplitude: 1.0,
            coarticulation: 0.3,
            signs_per_video: 4,
            distractors_per_video: 2,
            distractor_pool: 20,
            video_frames: 240,
            train_videos: 200,
            test_clips_per_word: 6,
            test_video_frames: 120,
            seed: 0,
        }
    }
}

/// Slots needed per planted sign, in rows.
const SLOT_ROWS: usize = 34;

impl SynthConfig {
    pub fn vocabulary(&self) -> Result<Vec<Word>> {
        let mut words: Vec<Word> = WORD_POOL
            .iter()
            .take(self.vocab_size)
            .map(|w| Word::new(*w))
            .collect::<Result<_>>()?;
        for i in WORD_POOL.len()..self.vocab_size {
            words.push(Word::new(format!("sign{i}"))?);
        }
        Ok(words)
    }

    pub fn held_out(&self) -> Result<Vec<Word>> {
        match &self.held_out_words {
            Some(h) => Ok(h.clone()),
            None => {
                let vocab = self.vocabulary()?;
                let n = vocab.len().saturating_sub(6);
                Ok(vocab[n..].to_vec())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.feature_dim == 0 || self.latent_dim == 0 {
            return bad("vocab_size, feature_dim and latent_dim must be positive".into());
        }
        if self.latent_dim > self.feature_dim {
            return bad("latent_dim exceeds feature_dim".into());
        }
        if !(1 <= self.variants_min && self.variants_min <= self.variants_max) {
            return bad("need 1 <= variants_min <= variants_max".into());
        }
        let (lo, hi) = (self.variants_min as f64, self.variants_max as f64);
        if !(lo..=hi).contains(&self.variants_mean) {
            return bad("variants_mean outside [variants_min, variants_max]".into());
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return bad("domain_shift must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.noise_smoothness) {
            return bad("noise_smoothness must lie in [0, 1)".into());
        }
        for (name, v) in [
            ("variant_spread", self.variant_spread),
            ("dictionary_bias", self.dictionary_bias),
            ("dictionary_noise", self.dictionary_noise),
            ("noise_sigma", self.noise_sigma),
            ("coarticulation", self.coarticulation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.sign_amplitude.is_finite() && self.sign_amplitude > 0.0) {
            return bad("sign_amplitude must be positive".into());
        }
        if self.signs_per_video == 0 || self.signs_per_video > self.vocab_size {
            return bad("signs_per_video must lie in 1..=vocab_size".into());
        }
        if self.dictionary_clips == 0 || self.train_videos == 0 {
            return bad("dictionary_clips and train_videos must be positive".into());
        }
        if self.distractors_per_video > 0 && self.distractor_pool == 0 {
            return bad("distractor_pool must be positive when distractors are planted".into());
        }
        let slots = self.signs_per_video + self.distractors_per_video;
        if rows_for(self.video_frames) < slots * SLOT_ROWS + 8 {
            return bad(format!(
                "video_frames {} too short for {slots} signs",
                self.video_frames
            ));
        }
        if rows_for(self.test_video_frames) < SLOT_ROWS + 8 {
            return bad(format!("test_video_frames {} too short", self.test_video_frames));
        }
        let vocab = self.vocabulary()?;
        for w in self.held_out()? {
            if !vocab.contains(&w) {
                return bad(format!("held-out word `{w}` is not in the vocabulary"));
            }
        }
        Ok(())
    }
}

fn rows_for(frames: u32) -> usize {
    frames.saturating_sub(WINDOW_FRAMES - 1) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One planted vocabulary sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub video_id: String,
    pub split: Split,
    pub word: Word,
    pub variant_index: u32,
    /// Annotated frame; the sign's peak row is `frame - 8`.
    pub frame: u32,
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSplit {
    pub seen: Vec<Word>,
    pub unseen: Vec<Word>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest_path: PathBuf,
    pub test_manifest_path: PathBuf,
    pub plant_log_path: PathBuf,
    pub split: SynthSplit,
    pub plants: Vec<PlantRecord>,
    pub variants: BTreeMap<Word, u32>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((n, n));
    let mut k = 0;
    while k < n {
        let mut v = gaussian(rng, n);
        for j in 0..k {
            let c = q.column(j);
            let p = v.dot(&c);
            v.scaled_add(-p, &c);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.column_mut(k).assign(&(v / norm));
            k += 1;
        }
    }
    q
}

struct World {
    variants: BTreeMap<Word, Vec<Array1<f64>>>,
    distractors: Vec<Array1<f64>>,
    shift: Array2<f64>,
    bias: Array1<f64>,
}

impl World {
    fn new(cfg: &SynthConfig, vocab: &[Word], rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.feature_dim;
        let basis = Array2::from_shape_simple_fn((d, cfg.latent_dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        let proto = |rng: &mut ChaCha8Rng| unit(basis.dot(&gaussian(rng, cfg.latent_dim)));
        let span = cfg.variants_max - cfg.variants_min;
        let p = if span == 0 {
            0.0
        } else {
            (cfg.variants_mean - cfg.variants_min as f64) / span as f64
        };
        let binom = Binomial::new(span as u64, p).expect("probability in [0, 1]");
        let mut variants = BTreeMap::new();
        for w in vocab {
            let base = proto(rng);
            let n = cfg.variants_min + binom.sample(rng) as u32;
            let vs = (0..n)
                .map(|_| {
                    let delta = unit(gaussian(rng, d));
                    unit(&base + &(delta * cfg.variant_spread))
                })
                .collect();
            variants.insert(w.clone(), vs);
        }
        let distractors = (0..cfg.distractor_pool).map(|_| proto(rng)).collect();
        let q = random_orthogonal(rng, d);
        let shift = Array2::eye(d) * (1.0 - cfg.domain_shift) + q * cfg.domain_shift;
        let bias = unit(gaussian(rng, d)) * cfg.dictionary_bias;
        Self {
            variants,
            distractors,
            shift,
            bias,
        }
    }
}

struct Plant {
    vector: Array1<f64>,
    /// Annotated frame; the bump peaks at row `frame - SIGN_PEAK_LEAD`.
    frame: usize,
}

fn render_video(cfg: &SynthConfig, rows: usize, plants: &[Plant], rng: &mut ChaCha8Rng) -> Array2<f32> {
    let d = cfg.feature_dim;
    let rho = cfg.noise_smoothness;
    let innov = (1.0 - rho * rho).sqrt();
    let mut out = Array2::<f64>::zeros((rows, d));
    let mut state = gaussian(rng, d) * cfg.noise_sigma;
    for r in 0..rows {
        if r > 0 {
            state = state * rho + gaussian(rng, d) * (innov * cfg.noise_sigma);
        }
        out.row_mut(r).assign(&state);
    }
    for p in plants {
        let peak = (p.frame - SIGN_PEAK_LEAD) as i64;
        let sign = &p.vector + &(gaussian(rng, d) * (cfg.coarticulation / (d as f64).sqrt()));
        let sign = sign * cfg.sign_amplitude;
        let hw = SIGN_HALF_WIDTH as i64;
        for r in (peak - hw + 1).max(0)..(peak + hw).min(rows as i64) {
            let weight = 1.0 - (r - peak).abs() as f64 / hw as f64;
            out.row_mut(r as usize).scaled_add(weight, &sign);
        }
    }
    out.mapv(|v| v as f32)
}

/// Annotated frames for `n` signs spread over `rows` rows in random order.
fn plant_frames(n: usize, rows: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let slack = rows - n * SLOT_ROWS;
    let jitter = (slack / n).clamp(1, 9);
    let start = SIGN_PEAK_LEAD + SIGN_HALF_WIDTH;
    (0..n)
        .map(|k| start + k * SLOT_ROWS + rng.random_range(0..jitter))
        .collect()
}

fn subtitle(words: &[&Word], rng: &mut ChaCha8Rng) -> String {
    let mut parts = vec!["The".to_string()];
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            parts.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        }
        parts.push(w.to_string());
    }
    format!("{}.", parts.join(" "))
}

/// Writes `manifest.json`, `test_manifest.json`, `split.json`,
/// `plant_log.jsonl` and the feature files under `out_dir`.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let feats = out_dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;

    let vocab = cfg.vocabulary()?;
    let held_out: BTreeSet<Word> = cfg.held_out()?.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(cfg, &vocab, &mut rng);
    let d = cfg.feature_dim;

    let mut dictionary = Vec::new();
    for (w, vs) in &world.variants {
        for (k, v) in vs.iter().enumerate() {
            let mean = world.shift.dot(v) + &world.bias;
            let mut clips = Array2::<f32>::zeros((cfg.dictionary_clips, d));
            for mut row in clips.rows_mut() {
                let x = &mean + &(gaussian(&mut rng, d) * (cfg.dictionary_noise / (d as f64).sqrt()));
                row.assign(&x.mapv(|v| v as f32));
            }
            let rel = PathBuf::from(format!("feats/dict_{w}_{k}.feat"));
            write_feature_file(out_dir.join(&rel), &FeatureSequence::new(clips)?)?;
            dictionary.push(DictionaryEntry {
                id: format!("{w}-{k}"),
                word: w.clone(),
                variant_index: k as u32,
                feature_path: rel,
                signer_id: None,
            });
        }
    }

    let mut plants_log = Vec::new();
    let pick_variant = |w: &Word, rng: &mut ChaCha8Rng| {
        let vs = &world.variants[w];
        let k = rng.random_range(0..vs.len());
        (k as u32, vs[k].clone())
    };

    // Deal words from repeated shuffled decks so every word is planted
    // about equally often and never twice in one video.
    let mut deck: Vec<Word> = Vec::new();
    let mut continuous = Vec::new();
    let rows = rows_for(cfg.video_frames);
    for v in 0..cfg.train_videos {
        let mut words: Vec<Word> = Vec::with_capacity(cfg.signs_per_video);
        while words.len() < cfg.signs_per_video {
            if deck.is_empty() {
                deck = vocab.clone();
                deck.shuffle(&mut rng);
            }
            let pos = deck.iter().position(|w| !words.contains(w));
            match pos {
                Some(p) => words.push(deck.remove(p)),
                None => deck.clear(),
            }
        }
        let n_slots = cfg.signs_per_video + cfg.distractors_per_video;
        let frames = plant_frames(n_slots, rows, &mut rng);
        let mut kinds: Vec<Option<Word>> = words.into_iter().map(Some).collect();
        kinds.extend(std::iter::repeat_n(None, cfg.distractors_per_video));
        kinds.shuffle(&mut rng);

        let id = format!("train-{v:03}");
        let mut plants = Vec::new();
        let mut annotations = Vec::new();
        let mut in_order = Vec::new();
        for (kind, &frame) in kinds.iter().zip(&frames) {
            match kind {
                Some(w) => {
                    let (k, vector) = pick_variant(w, &mut rng);
                    let annotated = !held_out.contains(w);
                    if annotated {
                        annotations.push(SparseAnnotation {
                            word: w.clone(),
                            frame: frame as u32,
                            confidence: rng.random_range(0.5..=1.0),
                            source: AnnotationSource::Mouthing,
                        });
                    }
                    plants_log.push(PlantRecord {
                        video_id: id.clone(),
                        split: Split::Train,
                        word: w.clone(),
                        variant_index: k,
                        frame: frame as u32,
                        annotated,
                    });
                    in_order.push(w);
                    plants.push(Plant { vector, frame });
                }
                None => {
                    let j = rng.random_range(0..world.distractors.len());
                    plants.push(Plant {
                        vector: world.distractors[j].clone(),
                        frame,
                    });
                }
            }
        }
        let text = subtitle(&in_order, &mut rng);
        let first = *frames.first().unwrap() as u32;
        let last = *frames.last().unwrap() as u32;
        continuous.push(make_sequence(
            &id,
            cfg.video_frames,
            text,
            (first.saturating_sub(26), (last + 6).min(cfg.video_frames)),
            annotations,
            render_video(cfg, rows, &plants, &mut rng),
            out_dir,
        )?);
    }

    let mut test = Vec::new();
    let test_rows = rows_for(cfg.test_video_frames);
    let test_slots = (test_rows - 8) / SLOT_ROWS;
    let mut n = 0;
    for w in &vocab {
        for _ in 0..cfg.test_clips_per_word {
            let frames = plant_frames(test_slots, test_rows, &mut rng);
            let target = rng.random_range(0..test_slots);
            let mut plants = Vec::new();
            let (k, vector) = pick_variant(w, &mut rng);
            for (s, &frame) in frames.iter().enumerate() {
                if s == target {
                    plants.push(Plant {
                        vector: vector.clone(),
                        frame,
                    });
                } else if cfg.distractors_per_video > 0 {
                    let j = rng.random_range(0..world.distractors.len());
                    plants.push(Plant {
                        vector: world.distractors[j].clone(),
                        frame,
                    });
                }
            }
            let frame = frames[target];
            let id = format!("test-{n:03}");
            n += 1;
            plants_log.push(PlantRecord {
                video_id: id.clone(),
                split: Split::Test,
                word: w.clone(),
                variant_index: k,
                frame: frame as u32,
                annotated: true,
            });
            let annotation = SparseAnnotation {
                word: w.clone(),
                frame: frame as u32,
                confidence: rng.random_range(0.9..=1.0),
                source: AnnotationSource::Mouthing,
            };
            let text = subtitle(&[w], &mut rng);
            let span = (
                (frame as u32).saturating_sub(30),
                (frame as u32 + 10).min(cfg.test_video_frames),
            );
            test.push(make_sequence(
                &id,
                cfg.test_video_frames,
                text,
                span,
                vec![annotation],
                render_video(cfg, test_rows, &plants, &mut rng),
                out_dir,
            )?);
        }
    }

    let vocabulary = Vocabulary::new(vocab.clone());
    let train_manifest = CorpusManifest {
        vocabulary: vocabulary.clone(),
        continuous,
        dictionary: dictionary.clone(),
        root: out_dir.to_path_buf(),
    };
    let test_manifest = CorpusManifest {
        vocabulary,
        continuous: test,
        dictionary,
        root: out_dir.to_path_buf(),
    };
    for m in [&train_manifest, &test_manifest] {
        for s in &m.continuous {
            let got = tokenize(&s.subtitle_text, &m.vocabulary.words);
            let want: BTreeSet<Word> = plants_log
                .iter()
                .filter(|p| p.video_id == s.id)
                .map(|p| p.word.clone())
                .collect();
            if got != want {
                return Err(Error::InvalidInput(format!(
                    "subtitle of `{}` tokenises to {got:?}, expected {want:?}",
                    s.id
                )));
            }
        }
    }

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let test_manifest_path = out_dir.join(TEST_MANIFEST_FILE);
    train_manifest.write(&manifest_path)?;
    test_manifest.write(&test_manifest_path)?;

    let plant_log_path = out_dir.join(PLANT_LOG_FILE);
    let mut log = String::new();
    for p in &plants_log {
        log.push_str(&serde_json::to_string(p).expect("plant record serialises"));
        log.push('\n');
    }
    fs::write(&plant_log_path, log).map_err(|e| Error::io(&plant_log_path, e))?;

    let split = SynthSplit {
        seen: vocab.iter().filter(|w| !held_out.contains(*w)).cloned().collect(),
        unseen: vocab.iter().filter(|w| held_out.contains(*w)).cloned().collect(),
    };
    let split_path = out_dir.join(SPLIT_FILE);
    let mut text = serde_json::to_string_pretty(&split).expect("split serialises");
    text.push('\n');
    fs::write(&split_path, text).map_err(|e| Error::io(&split_path, e))?;

    let variants = world
        .variants
        .iter()
        .map(|(w, vs)| (w.clone(), vs.len() as u32))
        .collect();
    Ok(GeneratedCorpus {
        manifest_path,
        test_manifest_path,
        plant_log_path,
        split,
        plants: plants_log,
        variants,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_sequence(
    id: &str,
    num_frames: u32,
    subtitle_text: String,
    span: (u32, u32),
    annotations: Vec<SparseAnnotation>,
    data: Array2<f32>,
    out_dir: &Path,
) -> Result<SubtitledSequence> {
    let rel = PathBuf::from(format!("feats/{id}.feat"));
    write_feature_file(out_dir.join(&rel), &FeatureSequence::new(data)?)?;
    Ok(SubtitledSequence {
        id: id.to_string(),
        feature_path: rel,
        num_frames,
        fps: crate::corpus::DEFAULT_FPS,
        subtitle_text,
        subtitle_start_frame: span.0,
        subtitle_end_frame: span.1,
        annotations,
    })
}

/// Reads `split.json` written by [`generate_corpus`].
pub fn read_split(path: impl AsRef<Path>) -> Result<SynthSplit> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, &e))
}
