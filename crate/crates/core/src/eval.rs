//! Retrieval and localisation metrics.
//!
//! A retrieval case is one query with a ranked gallery. For the default
//! direction the query is an annotated continuous clip and the gallery is
//! every dictionary entry, each scored by its best similarity inside the
//! clip's search window. An entry is a hit for mAP when its word matches and
//! the frame of its best similarity lies within `[-20, +5]` frames of the
//! annotation; R@k only asks for the word. Both are averaged within each
//! class (word) and then over classes.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LoadedCorpus, Word};
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::spotter::{
    embed_continuous, embed_dictionary, extract_peaks, spot, word_variants, EmbeddedSequence,
    SpotResult, NMS_FRAMES,
};

pub const DEFAULT_K: usize = 5;
/// Test windows pad the subtitle span by two seconds either side.
pub const DEFAULT_TEST_PAD_SECONDS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tolerance {
    /// Frames allowed before the reference frame.
    pub before: i64,
    /// Frames allowed after it.
    pub after: i64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            before: 20,
            after: 5,
        }
    }
}

impl Tolerance {
    pub fn validate(&self) -> Result<()> {
        if self.before < 0 || self.after < 0 {
            return Err(Error::InvalidInput(format!(
                "malformed tolerance (-{}, +{})",
                self.before, self.after
            )));
        }
        Ok(())
    }

    pub fn contains(&self, reference: i64, frame: i64) -> bool {
        frame >= reference - self.before && frame <= reference + self.after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub word: Word,
    pub score: f64,
    pub predicted_frame: i64,
    /// Ground-truth frame the prediction is checked against.
    pub reference_frame: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCase {
    pub query: String,
    pub word: Word,
    /// Sorted by non-increasing score.
    pub ranking: Vec<RankedEntry>,
}

fn check_cases(cases: &[RetrievalCase]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no retrieval cases (empty class set)".into()));
    }
    for c in cases {
        if c.ranking.windows(2).any(|w| w[1].score > w[0].score) {
            return Err(Error::InvalidInput(format!(
                "ranking of `{}` is not sorted by score",
                c.query
            )));
        }
    }
    Ok(())
}

fn class_mean(cases: &[RetrievalCase], metric: impl Fn(&RetrievalCase) -> f64) -> f64 {
    let mut by_class: BTreeMap<&Word, (f64, usize)> = BTreeMap::new();
    for c in cases {
        let e = by_class.entry(&c.word).or_default();
        e.0 += metric(c);
        e.1 += 1;
    }
    let n = by_class.len() as f64;
    by_class.values().map(|(s, k)| s / *k as f64).sum::<f64>() / n
}

fn hit_at_k(c: &RetrievalCase, k: usize) -> f64 {
    if c.ranking.iter().take(k).any(|e| e.word == c.word) {
        1.0
    } else {
        0.0
    }
}

fn case_ap(c: &RetrievalCase, tol: &Tolerance) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in c.ranking.iter().enumerate() {
        if e.word == c.word && tol.contains(e.reference_frame, e.predicted_frame) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Class-averaged fraction of cases with a same-word entry in the top `k`.
pub fn recall_at_k(cases: &[RetrievalCase], k: usize) -> Result<f64> {
    check_cases(cases)?;
    Ok(class_mean(cases, |c| hit_at_k(c, k)))
}

/// Class-averaged mean of per-case average precision.
pub fn retrieval_map(cases: &[RetrievalCase], tol: Tolerance) -> Result<f64> {
    tol.validate()?;
    check_cases(cases)?;
    Ok(class_mean(cases, |c| case_ap(c, &tol)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization_accuracy: Option<f64>,
}

/// A labelled instance: the word signed near `frame` in `video_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub word: Word,
    pub frame: i64,
}

/// Fraction of spots lying within tolerance of a same-word annotation of
/// their video.
pub fn localization_accuracy(spots: &[SpotResult], truth: &[GroundTruth], tol: Tolerance) -> Result<f64> {
    tol.validate()?;
    if spots.is_empty() {
        return Err(Error::InvalidInput("no spots to score".into()));
    }
    let mut hits = 0usize;
    for s in spots {
        let mut refs = truth
            .iter()
            .filter(|g| g.video_id == s.video_id && g.word == s.word)
            .peekable();
        if refs.peek().is_none() {
            return Err(Error::InvalidInput(format!(
                "no ground truth for `{}` in `{}`",
                s.word, s.video_id
            )));
        }
        if refs.any(|g| tol.contains(g.frame, s.frame as i64)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / spots.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub frame: i64,
    pub score: f64,
}

/// Detection AP for one class: detections are visited by decreasing score
/// (stable), each claims the nearest unclaimed ground-truth instance of the
/// same video within tolerance, and AP sums precision at each claim over the
/// number of ground-truth instances.
pub fn detection_ap(detections: &[Detection], truth: &[GroundTruth], tol: Tolerance) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut claimed = vec![false; truth.len()];
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let d = &detections[i];
        let best = truth
            .iter()
            .enumerate()
            .filter(|(g, t)| !claimed[*g] && t.video_id == d.video_id && tol.contains(t.frame, d.frame))
            .min_by_key(|(g, t)| ((t.frame - d.frame).abs(), *g));
        if let Some((g, _)) = best {
            claimed[g] = true;
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    sum / truth.len() as f64
}

/// Mean detection AP over classes that have ground truth; 0 when none do.
pub fn spotting_benchmark_map(
    detections: &BTreeMap<Word, Vec<Detection>>,
    truth: &BTreeMap<Word, Vec<GroundTruth>>,
    tol: Tolerance,
) -> Result<f64> {
    tol.validate()?;
    let classes: Vec<&Word> = truth.iter().filter(|(_, g)| !g.is_empty()).map(|(w, _)| w).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let empty = Vec::new();
    let total: f64 = classes
        .iter()
        .map(|w| detection_ap(detections.get(*w).unwrap_or(&empty), &truth[*w], tol))
        .sum();
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Continuous clips query the dictionary.
    #[default]
    ContinuousToDictionary,
    /// Dictionary entries query the continuous clips.
    DictionaryToContinuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Retrieval,
    Localization,
    Spotting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pad_seconds: f64,
    pub stride: usize,
    pub k: usize,
    pub tolerance: Tolerance,
    pub direction: Direction,
    /// Restrict queries to these words; all annotated words otherwise.
    pub query_words: Option<BTreeSet<Word>>,
    /// Score floor for spotting-benchmark detections.
    pub detection_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pad_seconds: DEFAULT_TEST_PAD_SECONDS,
            stride: 1,
            k: DEFAULT_K,
            tolerance: Tolerance::default(),
            direction: Direction::default(),
            query_words: None,
            detection_floor: 0.0,
        }
    }
}

/// One annotated clip of the test corpus.
struct Query {
    video: usize,
    word: Word,
    frame: i64,
    window: (usize, usize),
}

fn queries(test: &LoadedCorpus, cfg: &EvalConfig) -> Vec<Query> {
    let mut out = Vec::new();
    for (v, seq) in test.manifest.continuous.iter().enumerate() {
        let rows = test.continuous[v].rows();
        let (lo, hi) = seq.padded_window(cfg.pad_seconds);
        if lo as usize >= rows {
            continue;
        }
        let window = (lo as usize, (hi as usize).min(rows - 1));
        for a in &seq.annotations {
            if cfg.query_words.as_ref().is_some_and(|q| !q.contains(&a.word)) {
                continue;
            }
            out.push(Query {
                video: v,
                word: a.word.clone(),
                frame: a.frame as i64,
                window,
            });
        }
    }
    out
}

fn embed_videos(model: &EmbeddingModel, test: &LoadedCorpus, stride: usize) -> Result<Vec<EmbeddedSequence>> {
    (0..test.manifest.continuous.len())
        .into_par_iter()
        .map(|v| embed_continuous(model, &test.manifest.continuous[v].id, &test.continuous[v], stride))
        .collect()
}

/// Best score and its frame for every dictionary entry inside `window`.
fn window_scores(
    cont: &EmbeddedSequence,
    dict_unit: &ndarray::Array2<f64>,
    window: (usize, usize),
) -> Vec<(f64, i64)> {
    let a = cont.positions.partition_point(|&p| p < window.0);
    let b = cont.positions.partition_point(|&p| p <= window.1);
    let sims = cont.unit.slice(ndarray::s![a..b, ..]).dot(&dict_unit.t());
    sims.axis_iter(Axis(1))
        .map(|col| {
            let mut best = (f64::NEG_INFINITY, 0i64);
            for (t, &s) in col.iter().enumerate() {
                if s > best.0 {
                    best = (s.clamp(-1.0, 1.0), cont.positions[a + t] as i64);
                }
            }
            best
        })
        .collect()
}

fn sort_ranking(r: &mut [RankedEntry]) {
    r.sort_by(|x, y| y.score.total_cmp(&x.score));
}

pub fn retrieval_cases(model: &EmbeddingModel, test: &LoadedCorpus, cfg: &EvalConfig) -> Result<Vec<RetrievalCase>> {
    let dict = embed_dictionary(model, test)?;
    let conts = embed_videos(model, test, cfg.stride)?;
    let qs = queries(test, cfg);
    // scores[q][e] = (best similarity, frame) of entry e within query q's window
    let scores: Vec<Vec<(f64, i64)>> = qs
        .iter()
        .map(|q| window_scores(&conts[q.video], &dict.unit, q.window))
        .collect();
    let entries = &test.manifest.dictionary;
    let label = |q: &Query| format!("{}@{}", test.manifest.continuous[q.video].id, q.frame);
    let cases = match cfg.direction {
        Direction::ContinuousToDictionary => qs
            .iter()
            .zip(&scores)
            .map(|(q, s)| {
                let mut ranking: Vec<RankedEntry> = entries
                    .iter()
                    .zip(s)
                    .map(|(e, &(score, frame))| RankedEntry {
                        id: e.id.clone(),
                        word: e.word.clone(),
                        score,
                        predicted_frame: frame,
                        reference_frame: q.frame,
                    })
                    .collect();
                sort_ranking(&mut ranking);
                RetrievalCase {
                    query: label(q),
                    word: q.word.clone(),
                    ranking,
                }
            })
            .collect(),
        Direction::DictionaryToContinuous => entries
            .iter()
            .enumerate()
            .filter(|(_, e)| cfg.query_words.as_ref().is_none_or(|w| w.contains(&e.word)))
            .map(|(ei, e)| {
                let mut ranking: Vec<RankedEntry> = qs
                    .iter()
                    .zip(&scores)
                    .map(|(q, s)| RankedEntry {
                        id: label(q),
                        word: q.word.clone(),
                        score: s[ei].0,
                        predicted_frame: s[ei].1,
                        reference_frame: q.frame,
                    })
                    .collect();
                sort_ranking(&mut ranking);
                RetrievalCase {
                    query: e.id.clone(),
                    word: e.word.clone(),
                    ranking,
                }
            })
            .collect(),
    };
    Ok(cases)
}

/// Spots each query's word inside its window; returns the spots and the
/// matching annotations.
pub fn localization_spots(
    model: &EmbeddingModel,
    test: &LoadedCorpus,
    cfg: &EvalConfig,
) -> Result<(Vec<SpotResult>, Vec<GroundTruth>)> {
    let dict = embed_dictionary(model, test)?;
    let conts = embed_videos(model, test, cfg.stride)?;
    let mut spots = Vec::new();
    let mut truth = Vec::new();
    for q in queries(test, cfg) {
        let variants = word_variants(test, &dict, &q.word);
        if variants.is_empty() {
            continue;
        }
        spots.push(spot(&q.word, &variants, &conts[q.video], Some(q.window))?);
        truth.push(GroundTruth {
            video_id: conts[q.video].video_id.clone(),
            word: q.word,
            frame: q.frame,
        });
    }
    Ok((spots, truth))
}

/// Peaks of the best-variant similarity over whole videos, per class.
pub type ClassDetections = BTreeMap<Word, Vec<Detection>>;
pub type ClassTruth = BTreeMap<Word, Vec<GroundTruth>>;

pub fn spotting_detections(
    model: &EmbeddingModel,
    test: &LoadedCorpus,
    cfg: &EvalConfig,
) -> Result<(ClassDetections, ClassTruth)> {
    let dict = embed_dictionary(model, test)?;
    let conts = embed_videos(model, test, cfg.stride)?;
    let mut truth: ClassTruth = BTreeMap::new();
    for q in queries(test, cfg) {
        truth.entry(q.word.clone()).or_default().push(GroundTruth {
            video_id: conts[q.video].video_id.clone(),
            word: q.word,
            frame: q.frame,
        });
    }
    let mut detections: ClassDetections = BTreeMap::new();
    for word in truth.keys() {
        let entries = &test.entries_by_word[word];
        let mut dets = Vec::new();
        for cont in &conts {
            let sims = cont.unit.dot(&dict.unit.select(Axis(0), entries).t());
            let best: Vec<f64> = sims
                .axis_iter(Axis(0))
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max).clamp(-1.0, 1.0))
                .collect();
            for (frame, score) in extract_peaks(&cont.positions, &best, cfg.detection_floor, NMS_FRAMES) {
                dets.push(Detection {
                    video_id: cont.video_id.clone(),
                    frame: frame as i64,
                    score,
                });
            }
        }
        detections.insert(word.clone(), dets);
    }
    Ok((detections, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub protocol: Protocol,
    pub map: Option<f64>,
    pub r_at_5: Option<f64>,
    pub localization_accuracy: Option<f64>,
    pub per_class: BTreeMap<Word, ClassMetrics>,
}

pub fn evaluate(model: &EmbeddingModel, test: &LoadedCorpus, protocol: Protocol, cfg: &EvalConfig) -> Result<Metrics> {
    cfg.tolerance.validate()?;
    let mut per_class: BTreeMap<Word, ClassMetrics> = BTreeMap::new();
    let blank = || ClassMetrics {
        cases: 0,
        map: None,
        r_at_5: None,
        localization_accuracy: None,
    };
    match protocol {
        Protocol::Retrieval => {
            let cases = retrieval_cases(model, test, cfg)?;
            let map = retrieval_map(&cases, cfg.tolerance)?;
            let r = recall_at_k(&cases, cfg.k)?;
            let mut groups: BTreeMap<&Word, Vec<RetrievalCase>> = BTreeMap::new();
            for c in &cases {
                groups.entry(&c.word).or_default().push(c.clone());
            }
            for (w, g) in groups {
                per_class.insert(
                    w.clone(),
                    ClassMetrics {
                        cases: g.len(),
                        map: Some(retrieval_map(&g, cfg.tolerance)?),
                        r_at_5: Some(recall_at_k(&g, cfg.k)?),
                        ..blank()
                    },
                );
            }
            Ok(Metrics {
                protocol,
                map: Some(map),
                r_at_5: Some(r),
                localization_accuracy: None,
                per_class,
            })
        }
        Protocol::Localization => {
            let (spots, truth) = localization_spots(model, test, cfg)?;
            let acc = localization_accuracy(&spots, &truth, cfg.tolerance)?;
            let mut groups: BTreeMap<&Word, Vec<SpotResult>> = BTreeMap::new();
            for s in &spots {
                groups.entry(&s.word).or_default().push(s.clone());
            }
            for (w, g) in groups {
                per_class.insert(
                    w.clone(),
                    ClassMetrics {
                        cases: g.len(),
                        localization_accuracy: Some(localization_accuracy(&g, &truth, cfg.tolerance)?),
                        ..blank()
                    },
                );
            }
            Ok(Metrics {
                protocol,
                map: None,
                r_at_5: None,
                localization_accuracy: Some(acc),
                per_class,
            })
        }
        Protocol::Spotting => {
            let (dets, truth) = spotting_detections(model, test, cfg)?;
            let map = spotting_benchmark_map(&dets, &truth, cfg.tolerance)?;
            for (w, g) in &truth {
                let d = dets.get(w).map(Vec::as_slice).unwrap_or(&[]);
                per_class.insert(
                    w.clone(),
                    ClassMetrics {
                        cases: g.len(),
                        map: Some(detection_ap(d, g, cfg.tolerance)),
                        ..blank()
                    },
                );
            }
            Ok(Metrics {
                protocol,
                map: Some(map),
                r_at_5: None,
                localization_accuracy: None,
                per_class,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Word {
        Word::new(s).unwrap()
    }

    fn entry(word: &str, score: f64, frame: i64) -> RankedEntry {
        RankedEntry {
            id: format!("{word}-{frame}"),
            word: w(word),
            score,
            predicted_frame: frame,
            reference_frame: 100,
        }
    }

    fn case(word: &str, ranking: Vec<RankedEntry>) -> RetrievalCase {
        RetrievalCase {
            query: "q".into(),
            word: w(word),
            ranking,
        }
    }

    #[test]
    fn recall_examples() {
        let c = case("a", vec![entry("a", 0.9, 100), entry("b", 0.1, 100)]);
        assert_eq!(recall_at_k(&[c], 5).unwrap(), 1.0);
        let mut r: Vec<RankedEntry> = (0..5).map(|i| entry("b", 1.0 - i as f64 * 0.1, 100)).collect();
        r.push(entry("a", 0.0, 100));
        let late = case("a", r);
        assert_eq!(recall_at_k(std::slice::from_ref(&late), 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(std::slice::from_ref(&late), 6).unwrap(), 1.0);
        let good = case("c", vec![entry("c", 0.5, 100)]);
        assert_eq!(recall_at_k(&[late, good], 5).unwrap(), 0.5);
        assert!(recall_at_k(&[], 5).is_err());
    }

    #[test]
    fn map_examples() {
        let c = case("a", vec![entry("a", 0.9, 100), entry("b", 0.1, 100)]);
        assert_eq!(retrieval_map(std::slice::from_ref(&c), Tolerance::default()).unwrap(), 1.0);
        // right word, frame 21 before the annotation: a miss
        let c = case("a", vec![entry("a", 0.9, 79), entry("a", 0.5, 100)]);
        assert_eq!(retrieval_map(&[c], Tolerance::default()).unwrap(), 0.5);
        let bad = Tolerance { before: -1, after: 5 };
        assert!(retrieval_map(&[case("a", vec![])], bad).is_err());
        let unsorted = case("a", vec![entry("a", 0.1, 100), entry("b", 0.9, 100)]);
        assert!(retrieval_map(&[unsorted], Tolerance::default()).is_err());
    }

    #[test]
    fn class_duplication_is_neutral() {
        let a1 = case("a", vec![entry("b", 0.9, 100), entry("a", 0.5, 100)]);
        let b1 = case("b", vec![entry("b", 0.9, 100)]);
        let base = retrieval_map(&[a1.clone(), b1.clone()], Tolerance::default()).unwrap();
        let dup = retrieval_map(&[a1.clone(), a1, b1], Tolerance::default()).unwrap();
        assert!((base - dup).abs() < 1e-15);
        assert!((base - 0.75).abs() < 1e-15);
    }

    fn spot_at(frame: usize) -> SpotResult {
        SpotResult {
            video_id: "v".into(),
            word: w("a"),
            frame,
            score: 0.5,
            variant_index: 0,
        }
    }

    #[test]
    fn localization_boundaries() {
        let truth = [GroundTruth {
            video_id: "v".into(),
            word: w("a"),
            frame: 100,
        }];
        let tol = Tolerance::default();
        assert_eq!(localization_accuracy(&[spot_at(100)], &truth, tol).unwrap(), 1.0);
        assert_eq!(localization_accuracy(&[spot_at(79)], &truth, tol).unwrap(), 0.0);
        assert_eq!(localization_accuracy(&[spot_at(80)], &truth, tol).unwrap(), 1.0);
        assert_eq!(localization_accuracy(&[spot_at(105)], &truth, tol).unwrap(), 1.0);
        assert_eq!(localization_accuracy(&[spot_at(106)], &truth, tol).unwrap(), 0.0);
        assert!(localization_accuracy(&[spot_at(100)], &[], tol).is_err());
    }

    #[test]
    fn spotting_examples() {
        let gt = |f| GroundTruth {
            video_id: "v".into(),
            word: w("a"),
            frame: f,
        };
        let det = |f, s| Detection {
            video_id: "v".into(),
            frame: f,
            score: s,
        };
        let truth = BTreeMap::from([(w("a"), vec![gt(50), gt(150)])]);
        let dets = BTreeMap::from([(w("a"), vec![det(150, 0.9), det(48, 0.8), det(300, 0.1)])]);
        assert_eq!(spotting_benchmark_map(&dets, &truth, Tolerance::default()).unwrap(), 1.0);
        assert_eq!(spotting_benchmark_map(&BTreeMap::new(), &truth, Tolerance::default()).unwrap(), 0.0);
        // a duplicate detection of one instance cannot claim it twice
        let dets = BTreeMap::from([(w("a"), vec![det(50, 0.9), det(51, 0.8)])]);
        assert_eq!(spotting_benchmark_map(&dets, &truth, Tolerance::default()).unwrap(), 0.5);
    }
}
