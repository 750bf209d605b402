//! Test-time use of a trained embedding: dense continuous embeddings,
//! best-match spotting over dictionary variants, annotation mining and the
//! small analysis tools built on top of them.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationSource, CorpusManifest, FeatureSequence, LoadedCorpus, Word};
use crate::error::{Error, Result};
use crate::model::{normalize_rows, Domain, EmbeddingModel};

pub const DEFAULT_MINE_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MINE_PAD_SECONDS: f64 = 4.0;
/// Mined windows span 16 frames either side of the peak.
pub const MINED_HALF_WINDOW: u32 = 16;
/// Minimum frame distance between two detections of one class.
pub const NMS_FRAMES: usize = 16;

/// Embeddings of one continuous video at rows `0, stride, 2 * stride, ...`.
#[derive(Debug, Clone)]
pub struct EmbeddedSequence {
    pub video_id: String,
    pub positions: Vec<usize>,
    pub raw: Array2<f64>,
    /// Row-normalised copy of `raw`.
    pub unit: Array2<f64>,
}

impl EmbeddedSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index range of positions whose start row lies in `[lo, hi]`.
    fn position_range(&self, window: Option<(usize, usize)>) -> Result<std::ops::Range<usize>> {
        let last = *self.positions.last().expect("non-empty sequence");
        let Some((lo, hi)) = window else {
            return Ok(0..self.positions.len());
        };
        if lo > hi || lo > last {
            return Err(Error::InvalidInput(format!(
                "search window [{lo}, {hi}] lies outside `{}` (rows 0..={last})",
                self.video_id
            )));
        }
        let a = self.positions.partition_point(|&p| p < lo);
        let b = self.positions.partition_point(|&p| p <= hi);
        if a == b {
            return Err(Error::InvalidInput(format!(
                "search window [{lo}, {hi}] holds no sampled position of `{}`",
                self.video_id
            )));
        }
        Ok(a..b)
    }
}

pub fn embed_continuous(
    model: &EmbeddingModel,
    video_id: &str,
    features: &FeatureSequence,
    stride: usize,
) -> Result<EmbeddedSequence> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let positions: Vec<usize> = (0..features.rows()).step_by(stride).collect();
    let x = features.to_f64().select(Axis(0), &positions);
    let raw = model.embed(Domain::Continuous, x.view());
    let (unit, _) = normalize_rows(&raw)?;
    Ok(EmbeddedSequence {
        video_id: video_id.to_string(),
        positions,
        raw,
        unit,
    })
}

/// Dictionary-side embeddings for every entry of a manifest.
#[derive(Debug, Clone)]
pub struct DictionaryEmbeddings {
    pub raw: Array2<f64>,
    pub unit: Array2<f64>,
}

pub fn embed_dictionary(model: &EmbeddingModel, corpus: &LoadedCorpus) -> Result<DictionaryEmbeddings> {
    if corpus.dictionary.is_empty() {
        return Err(Error::InvalidInput("manifest has no dictionary entries".into()));
    }
    let views: Vec<ArrayView1<f64>> = corpus.dictionary.iter().map(|d| d.view()).collect();
    let x = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::InvalidInput(format!("dictionary features differ in length: {e}")))?;
    let raw = model.embed(Domain::Dictionary, x.view());
    let (unit, _) = normalize_rows(&raw)?;
    Ok(DictionaryEmbeddings { raw, unit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotResult {
    pub video_id: String,
    pub word: Word,
    pub frame: usize,
    pub score: f64,
    pub variant_index: u32,
}

/// One dictionary variant of the queried word.
#[derive(Debug, Clone, Copy)]
pub struct Variant<'a> {
    pub variant_index: u32,
    pub embedding: ArrayView1<'a, f64>,
}

fn unit_vector(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > crate::model::NORM_EPS) {
        return Err(Error::Numerical(format!("degenerate dictionary embedding (norm {n:e})")));
    }
    Ok(&v / n)
}

/// Best (position, variant) by cosine similarity, searching start rows in
/// `window` (inclusive). Ties go to the earliest frame, then the lowest
/// variant index.
pub fn spot(
    word: &Word,
    variants: &[Variant],
    cont: &EmbeddedSequence,
    window: Option<(usize, usize)>,
) -> Result<SpotResult> {
    if variants.is_empty() {
        return Err(Error::InvalidInput(format!("word `{word}` has no dictionary variant")));
    }
    if cont.is_empty() {
        return Err(Error::InvalidInput(format!("`{}` has no embeddings", cont.video_id)));
    }
    let range = cont.position_range(window)?;
    let mut order: Vec<&Variant> = variants.iter().collect();
    order.sort_by_key(|v| v.variant_index);
    let units: Vec<Array1<f64>> = order
        .iter()
        .map(|v| unit_vector(v.embedding))
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, usize, f64)> = None;
    for t in range {
        let row = cont.unit.row(t);
        for (k, u) in units.iter().enumerate() {
            let s = row.dot(u).clamp(-1.0, 1.0);
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((t, k, s));
            }
        }
    }
    let (t, k, score) = best.expect("non-empty range");
    Ok(SpotResult {
        video_id: cont.video_id.clone(),
        word: word.clone(),
        frame: cont.positions[t],
        score,
        variant_index: order[k].variant_index,
    })
}

/// Variants of `word` in `corpus` with their embeddings.
pub fn word_variants<'a>(
    corpus: &LoadedCorpus,
    dict: &'a DictionaryEmbeddings,
    word: &Word,
) -> Vec<Variant<'a>> {
    corpus
        .entries_by_word
        .get(word)
        .into_iter()
        .flatten()
        .map(|&e| Variant {
            variant_index: corpus.manifest.dictionary[e].variant_index,
            embedding: dict.unit.row(e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedAnnotation {
    pub video_id: String,
    pub word: Word,
    /// Start row of the best-matching window.
    pub center_frame: u32,
    pub start_frame: u32,
    pub end_frame: u32,
    pub score: f64,
    pub variant_index: u32,
    pub source: AnnotationSource,
}

/// Rows of a padded subtitle window, clipped to the embedded rows.
fn padded_rows(corpus: &LoadedCorpus, video: usize, pad_seconds: f64) -> Option<(usize, usize)> {
    let seq = &corpus.manifest.continuous[video];
    let rows = corpus.continuous[video].rows();
    let (lo, hi) = seq.padded_window(pad_seconds);
    let lo = lo as usize;
    (lo < rows).then(|| (lo, (hi as usize).min(rows - 1)))
}

/// Spots every subtitle word with dictionary entries inside the padded
/// subtitle window of its video and keeps peaks scoring at least
/// `threshold`. Output is sorted by `(video_id, word)`.
pub fn mine_annotations(
    model: &EmbeddingModel,
    corpus: &LoadedCorpus,
    threshold: f64,
    pad_seconds: f64,
) -> Result<Vec<MinedAnnotation>> {
    let dict = embed_dictionary(model, corpus)?;
    let per_video: Vec<Vec<MinedAnnotation>> = (0..corpus.manifest.continuous.len())
        .into_par_iter()
        .map(|v| -> Result<Vec<MinedAnnotation>> {
            let seq = &corpus.manifest.continuous[v];
            let Some(window) = padded_rows(corpus, v, pad_seconds) else {
                return Ok(Vec::new());
            };
            let words: Vec<&Word> = corpus.subtitle_words[v]
                .iter()
                .filter(|w| corpus.entries_by_word.contains_key(*w))
                .collect();
            if words.is_empty() {
                return Ok(Vec::new());
            }
            let cont = embed_continuous(model, &seq.id, &corpus.continuous[v], 1)?;
            let mut out = Vec::new();
            for w in words {
                let r = spot(w, &word_variants(corpus, &dict, w), &cont, Some(window))?;
                if r.score >= threshold {
                    let c = r.frame as u32;
                    out.push(MinedAnnotation {
                        video_id: seq.id.clone(),
                        word: w.clone(),
                        center_frame: c,
                        start_frame: c.saturating_sub(MINED_HALF_WINDOW),
                        end_frame: (c + MINED_HALF_WINDOW).min(seq.num_frames),
                        score: r.score,
                        variant_index: r.variant_index,
                        source: AnnotationSource::Dictionary,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut mined: Vec<MinedAnnotation> = per_video.into_iter().flatten().collect();
    mined.sort_by(|a, b| (&a.video_id, &a.word).cmp(&(&b.video_id, &b.word)));
    Ok(mined)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldStats {
    pub threshold: f64,
    pub vocab_size: usize,
    pub instance_count: usize,
    pub duplicate_with_mouthing_count: usize,
}

/// Per threshold: distinct words, mined instances scoring at least the
/// threshold, and how many of those repeat a same-word mouthing annotation
/// inside the padded subtitle window of their video.
pub fn yield_statistics(
    mined: &[MinedAnnotation],
    manifest: &CorpusManifest,
    thresholds: &[f64],
    pad_seconds: f64,
) -> Vec<YieldStats> {
    let duplicate = |m: &MinedAnnotation| {
        manifest.sequence(&m.video_id).is_some_and(|seq| {
            let (lo, hi) = seq.padded_window(pad_seconds);
            seq.annotations.iter().any(|a| {
                a.source == AnnotationSource::Mouthing
                    && a.word == m.word
                    && (lo..=hi).contains(&a.frame)
            })
        })
    };
    thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&MinedAnnotation> = mined.iter().filter(|m| m.score >= t).collect();
            YieldStats {
                threshold: t,
                vocab_size: kept.iter().map(|m| &m.word).collect::<BTreeSet<_>>().len(),
                instance_count: kept.len(),
                duplicate_with_mouthing_count: kept.iter().filter(|m| duplicate(m)).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTrace {
    pub variant_index: u32,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub word: Word,
    pub positions: Vec<usize>,
    pub variants: Vec<VariantTrace>,
}

/// Cosine similarity of each variant of `word` against every sampled
/// position of the video.
pub fn variant_traces(
    word: &Word,
    model: &EmbeddingModel,
    corpus: &LoadedCorpus,
    features: &FeatureSequence,
    stride: usize,
) -> Result<Traces> {
    let entries = corpus
        .entries_by_word
        .get(word)
        .filter(|e| !e.is_empty())
        .ok_or_else(|| Error::InvalidInput(format!("unknown word `{word}`")))?;
    let dict = embed_dictionary(model, corpus)?;
    let cont = embed_continuous(model, "", features, stride)?;
    let variants = entries
        .iter()
        .map(|&e| VariantTrace {
            variant_index: corpus.manifest.dictionary[e].variant_index,
            scores: cont
                .unit
                .dot(&dict.unit.row(e))
                .iter()
                .map(|s| s.clamp(-1.0, 1.0))
                .collect(),
        })
        .collect();
    Ok(Traces {
        word: word.clone(),
        positions: cont.positions,
        variants,
    })
}

impl Traces {
    /// `frame,<word>_v<k>...` header and one row per position.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for v in &self.variants {
            out.push_str(&format!(",{}_v{}", self.word, v.variant_index));
        }
        out.push('\n');
        for (i, p) in self.positions.iter().enumerate() {
            out.push_str(&p.to_string());
            for v in &self.variants {
                out.push_str(&format!(",{}", v.scores[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// A dictionary entry with its embedding, for cross-dictionary search.
#[derive(Debug, Clone)]
pub struct DictItem {
    pub id: String,
    pub word: Word,
    pub embedding: Array1<f64>,
}

pub fn dictionary_items(model: &EmbeddingModel, corpus: &LoadedCorpus) -> Result<Vec<DictItem>> {
    let dict = embed_dictionary(model, corpus)?;
    Ok(corpus
        .manifest
        .dictionary
        .iter()
        .enumerate()
        .map(|(i, e)| DictItem {
            id: e.id.clone(),
            word: e.word.clone(),
            embedding: dict.raw.row(i).to_owned(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FauxAmiPair {
    pub a_id: String,
    pub a_word: Word,
    pub rank: usize,
    pub b_id: String,
    pub b_word: Word,
    pub score: f64,
    pub same_word: bool,
}

/// For each entry of `a`, its `k` nearest entries of `b` by cosine
/// similarity. Pairs with different words are faux-ami candidates.
pub fn faux_amis(a: &[DictItem], b: &[DictItem], k: usize) -> Result<Vec<FauxAmiPair>> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("both dictionaries must be non-empty".into()));
    }
    let units = |items: &[DictItem]| -> Result<Array2<f64>> {
        let views: Vec<ArrayView1<f64>> = items.iter().map(|i| i.embedding.view()).collect();
        let m = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::InvalidInput(format!("embedding sizes differ: {e}")))?;
        Ok(normalize_rows(&m)?.0)
    };
    let (ua, ub) = (units(a)?, units(b)?);
    if ua.ncols() != ub.ncols() {
        return Err(Error::InvalidInput("embedding sizes differ between dictionaries".into()));
    }
    let sims = ua.dot(&ub.t());
    let mut out = Vec::new();
    for (i, item) in a.iter().enumerate() {
        let mut order: Vec<usize> = (0..b.len()).collect();
        order.sort_by(|&x, &y| sims[[i, y]].total_cmp(&sims[[i, x]]).then(x.cmp(&y)));
        for (r, &j) in order.iter().take(k).enumerate() {
            out.push(FauxAmiPair {
                a_id: item.id.clone(),
                a_word: item.word.clone(),
                rank: r + 1,
                b_id: b[j].id.clone(),
                b_word: b[j].word.clone(),
                score: sims[[i, j]].clamp(-1.0, 1.0),
                same_word: item.word == b[j].word,
            });
        }
    }
    Ok(out)
}

/// Wrist keypoints of one frame; `None` marks a missing detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WristFrame {
    pub left: Option<[f64; 2]>,
    pub right: Option<[f64; 2]>,
    /// Body size used to make the threshold scale-free, e.g. shoulder width.
    #[serde(default)]
    pub torso_scale: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// First and last frame of wrist motion. Motion at frame `t` is the larger
/// displacement of the two wrists between `t - 1` and `t`, smoothed by a
/// centred 3-frame moving average; frames count as moving when it exceeds
/// `motion_threshold` times the median torso scale (1 when none is given).
/// Returns the whole clip when nothing moves.
pub fn trim_dictionary(frames: &[WristFrame], motion_threshold: f64) -> Result<(usize, usize)> {
    if frames.len() < 2 {
        return Err(Error::InvalidInput("need at least two frames of keypoints".into()));
    }
    if frames.iter().all(|f| f.left.is_none() && f.right.is_none()) {
        return Err(Error::InvalidInput("all wrist keypoints are missing".into()));
    }
    let scale = median(frames.iter().filter_map(|f| f.torso_scale).filter(|s| *s > 0.0).collect())
        .unwrap_or(1.0);
    let step = |a: Option<[f64; 2]>, b: Option<[f64; 2]>| match (a, b) {
        (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
        _ => 0.0,
    };
    let n = frames.len();
    let mut disp = vec![0.0; n];
    for t in 1..n {
        let (p, c) = (&frames[t - 1], &frames[t]);
        disp[t] = step(p.left, c.left).max(step(p.right, c.right));
    }
    let smooth: Vec<f64> = (0..n)
        .map(|t| {
            let lo = t.saturating_sub(1).max(1);
            let hi = (t + 1).min(n - 1);
            if lo > hi {
                return 0.0;
            }
            disp[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let limit = motion_threshold * scale;
    let moving: Vec<usize> = (1..n).filter(|&t| smooth[t] > limit).collect();
    match (moving.first(), moving.last()) {
        (Some(&first), Some(&last)) => Ok((first - 1, last)),
        _ => Ok((0, n - 1)),
    }
}

/// Local maxima of `scores` at least `floor`, strongest first, with no two
/// kept peaks closer than `nms` frames. Returns `(frame, score)`.
pub fn extract_peaks(positions: &[usize], scores: &[f64], floor: f64, nms: usize) -> Vec<(usize, f64)> {
    let n = scores.len();
    let mut peaks: Vec<(usize, f64)> = (0..n)
        .filter(|&i| {
            let s = scores[i];
            s >= floor && (i == 0 || s > scores[i - 1]) && (i + 1 == n || s >= scores[i + 1])
        })
        .map(|i| (positions[i], scores[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for p in peaks {
        if kept.iter().all(|k| k.0.abs_diff(p.0) >= nms) {
            kept.push(p);
        }
    }
    kept
}
