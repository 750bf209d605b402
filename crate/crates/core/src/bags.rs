//! Minibatch formation and the positive / negative bags of
//! (continuous segment, dictionary entry) pairs.
//!
//! Every bag is anchored on one of four parts of a batch item: the labelled
//! (foreground) segment, the dictionary entries of the foreground word, a
//! background segment, or the dictionary entries of one background word.
//! Watch-Lookup uses only the first two anchors; Watch-Read-Lookup uses all
//! four and widens the foreground negatives to the whole batch.
//!
//! A background segment of item `j` may contain any sign whose word is in
//! `subtitle_words_j \ {fg_word_j}`; such a segment is never used as a
//! negative for those words.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LoadedCorpus, Vocabulary, Word};
use crate::error::{Error, Result};

/// Frames before / after an annotated frame that may hold the labelled sign.
pub const FG_OFFSET_BEFORE: i64 = 20;
pub const FG_OFFSET_AFTER: i64 = 5;
pub const DEFAULT_BG_SEGMENTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Index of the video in the manifest.
    pub video: usize,
    pub video_id: String,
    pub start_row: usize,
    pub kind: SegmentKind,
    /// Present exactly for foreground segments.
    pub word: Option<Word>,
    /// Batch item owning the segment.
    pub item: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDictEntry {
    /// Index into the manifest dictionary.
    pub entry: usize,
    pub id: String,
    pub word: Word,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    /// Index into [`Batch::segments`].
    pub fg: usize,
    pub bg: Vec<usize>,
    pub fg_word: Word,
    /// Subtitle words other than the foreground word that have dictionary
    /// entries in the batch.
    pub bg_words: BTreeSet<Word>,
    /// Full tokenised subtitle, always including the foreground word.
    pub subtitle_words: BTreeSet<Word>,
    /// Indices into [`Batch::dict`].
    pub dict_fg: BTreeSet<usize>,
    pub dict_bg: BTreeMap<Word, BTreeSet<usize>>,
}

impl BatchItem {
    /// Words a background segment of this item might show.
    pub fn background_candidates(&self) -> BTreeSet<&Word> {
        self.subtitle_words
            .iter()
            .filter(|w| **w != self.fg_word)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub segments: Vec<Segment>,
    pub dict: Vec<BatchDictEntry>,
}

impl Batch {
    /// Words a segment might show: its label for foreground segments, the
    /// background subtitle words for background segments.
    pub fn segment_candidates(&self, seg: usize) -> BTreeSet<&Word> {
        let s = &self.segments[seg];
        match s.kind {
            SegmentKind::Foreground => s.word.iter().collect(),
            SegmentKind::Background => self.items[s.item].background_candidates(),
        }
    }

    pub fn segment_label(&self, seg: usize) -> String {
        let s = &self.segments[seg];
        format!("{}@{}", s.video_id, s.start_row)
    }
}

/// A labelled segment to put in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnnotationRef {
    pub video: usize,
    pub annotation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub bg_segments: usize,
    /// Upper bound on background words (and thus dictionaries) per item.
    pub max_bg_words: Option<usize>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            bg_segments: DEFAULT_BG_SEGMENTS,
            max_bg_words: None,
        }
    }
}

/// Assembles one batch item per annotation: the foreground segment at a
/// random offset in `[-20, +5]` frames of the annotation, background
/// segments drawn uniformly outside that window, and the dictionary entries
/// of the foreground and background words.
pub fn build_batch_from_annotations(
    corpus: &LoadedCorpus,
    picks: &[AnnotationRef],
    cfg: &BatchConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut segments = Vec::new();
    let mut dict = Vec::new();
    let mut dict_pos: BTreeMap<usize, usize> = BTreeMap::new();
    let mut items = Vec::with_capacity(picks.len());

    let mut intern = |entry: usize, dict: &mut Vec<BatchDictEntry>| -> usize {
        *dict_pos.entry(entry).or_insert_with(|| {
            let e = &corpus.manifest.dictionary[entry];
            dict.push(BatchDictEntry {
                entry,
                id: e.id.clone(),
                word: e.word.clone(),
            });
            dict.len() - 1
        })
    };

    for (item_idx, pick) in picks.iter().enumerate() {
        let seq = corpus.manifest.continuous.get(pick.video).ok_or_else(|| {
            Error::InvalidInput(format!("video index {} out of range", pick.video))
        })?;
        let ann = seq.annotations.get(pick.annotation).ok_or_else(|| {
            Error::InvalidInput(format!(
                "annotation {} out of range for `{}`",
                pick.annotation, seq.id
            ))
        })?;
        let fg_entries = corpus
            .entries_by_word
            .get(&ann.word)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| {
                Error::InvalidInput(format!("word `{}` has no dictionary entry", ann.word))
            })?;
        let rows = corpus.continuous[pick.video].rows() as i64;
        let frame = ann.frame as i64;

        let offset = rng.random_range(-FG_OFFSET_BEFORE..=FG_OFFSET_AFTER);
        let fg_row = (frame + offset).clamp(0, rows - 1) as usize;
        let fg = segments.len();
        segments.push(Segment {
            video: pick.video,
            video_id: seq.id.clone(),
            start_row: fg_row,
            kind: SegmentKind::Foreground,
            word: Some(ann.word.clone()),
            item: item_idx,
        });

        let lo = frame - FG_OFFSET_BEFORE;
        let hi = frame + FG_OFFSET_AFTER;
        let outside: Vec<usize> = (0..rows)
            .filter(|&r| r < lo || r > hi)
            .map(|r| r as usize)
            .collect();
        let n_bg = cfg.bg_segments.min(outside.len());
        let mut chosen: Vec<usize> = sample(rng, outside.len(), n_bg)
            .into_iter()
            .map(|i| outside[i])
            .collect();
        chosen.sort_unstable();
        let bg: Vec<usize> = chosen
            .into_iter()
            .map(|row| {
                segments.push(Segment {
                    video: pick.video,
                    video_id: seq.id.clone(),
                    start_row: row,
                    kind: SegmentKind::Background,
                    word: None,
                    item: item_idx,
                });
                segments.len() - 1
            })
            .collect();

        let mut subtitle_words = corpus.subtitle_words[pick.video].clone();
        subtitle_words.insert(ann.word.clone());
        let mut bg_words: Vec<Word> = subtitle_words
            .iter()
            .filter(|w| **w != ann.word)
            .filter(|w| corpus.entries_by_word.get(*w).is_some_and(|v| !v.is_empty()))
            .cloned()
            .collect();
        if let Some(cap) = cfg.max_bg_words {
            if bg_words.len() > cap {
                let keep = sample(rng, bg_words.len(), cap).into_vec();
                let keep: BTreeSet<usize> = keep.into_iter().collect();
                bg_words = bg_words
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| keep.contains(i))
                    .map(|(_, w)| w)
                    .collect();
            }
        }

        let dict_fg: BTreeSet<usize> = fg_entries.iter().map(|&e| intern(e, &mut dict)).collect();
        let dict_bg: BTreeMap<Word, BTreeSet<usize>> = bg_words
            .iter()
            .map(|w| {
                let ids = corpus.entries_by_word[w]
                    .iter()
                    .map(|&e| intern(e, &mut dict))
                    .collect();
                (w.clone(), ids)
            })
            .collect();

        items.push(BatchItem {
            fg,
            bg,
            fg_word: ann.word.clone(),
            bg_words: bg_words.into_iter().collect(),
            subtitle_words,
            dict_fg,
            dict_bg,
        });
    }
    Ok(Batch {
        items,
        segments,
        dict,
    })
}

/// One batch item per requested word, each from a randomly chosen
/// annotation of that word. Deterministic for a given seed.
pub fn build_batch(
    corpus: &LoadedCorpus,
    words: &[Word],
    seed: u64,
    cfg: &BatchConfig,
) -> Result<Batch> {
    let mut by_word: BTreeMap<&Word, Vec<AnnotationRef>> = BTreeMap::new();
    for (v, seq) in corpus.manifest.continuous.iter().enumerate() {
        for (a, ann) in seq.annotations.iter().enumerate() {
            by_word.entry(&ann.word).or_default().push(AnnotationRef {
                video: v,
                annotation: a,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = words
        .iter()
        .map(|w| {
            let refs = by_word
                .get(w)
                .ok_or_else(|| Error::InvalidInput(format!("word `{w}` has no annotation")))?;
            Ok(refs[rng.random_range(0..refs.len())])
        })
        .collect::<Result<Vec<_>>>()?;
    build_batch_from_annotations(corpus, &picks, cfg, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// Labelled continuous segment.
    Seg,
    /// Dictionary entries of the labelled word.
    Dict,
    /// One background continuous segment.
    SegBack,
    /// Dictionary entries of one background word.
    DictBack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub kind: AnchorKind,
    pub item: usize,
    /// Background segment ordinal (`SegBack`) or background word ordinal
    /// (`DictBack`) within the item; 0 otherwise.
    pub member: usize,
}

/// `(segment index, dictionary index)` into the batch pools.
pub type Pair = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBag {
    pub anchor: Anchor,
    pub polarity: Polarity,
    pub pairs: BTreeSet<Pair>,
}

/// Positive and negative bag sharing one anchor: one term of the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorBags {
    pub anchor: Anchor,
    pub positives: BTreeSet<Pair>,
    pub negatives: BTreeSet<Pair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BagFramework {
    WatchLookup,
    WatchReadLookup,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BagSet {
    pub anchors: Vec<AnchorBags>,
}

impl BagSet {
    pub fn get(&self, anchor: &Anchor) -> Option<&AnchorBags> {
        self.anchors.iter().find(|a| a.anchor == *anchor)
    }

    /// Splits into the positive and the negative bag lists.
    pub fn into_polar(self) -> (Vec<PairBag>, Vec<PairBag>) {
        let mut pos = Vec::with_capacity(self.anchors.len());
        let mut neg = Vec::with_capacity(self.anchors.len());
        for a in self.anchors {
            pos.push(PairBag {
                anchor: a.anchor,
                polarity: Polarity::Positive,
                pairs: a.positives,
            });
            neg.push(PairBag {
                anchor: a.anchor,
                polarity: Polarity::Negative,
                pairs: a.negatives,
            });
        }
        (pos, neg)
    }

    /// Removes anchors whose positive bag is empty.
    pub fn drop_empty_positives(&mut self) {
        self.anchors.retain(|a| !a.positives.is_empty());
    }

    /// Keeps one uniformly chosen positive pair per anchor (single-instance
    /// InfoNCE).
    pub fn reduce_to_single_positive(&mut self, rng: &mut impl Rng) {
        for a in &mut self.anchors {
            if a.positives.len() > 1 {
                let k = rng.random_range(0..a.positives.len());
                let keep = *a.positives.iter().nth(k).unwrap();
                a.positives = BTreeSet::from([keep]);
            }
        }
    }

    /// Segment and dictionary indices referenced by any bag.
    pub fn used_indices(&self) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let mut segs = Vec::new();
        let mut dicts = Vec::new();
        let mark = |v: &mut Vec<bool>, i: usize| {
            if v.len() <= i {
                v.resize(i + 1, false);
            }
            v[i] = true;
        };
        for a in &self.anchors {
            for &(s, d) in a.positives.iter().chain(&a.negatives) {
                mark(&mut segs, s);
                mark(&mut dicts, d);
            }
        }
        let set = |v: Vec<bool>| v.into_iter().enumerate().filter(|(_, u)| *u).map(|(i, _)| i).collect();
        (set(segs), set(dicts))
    }
}

fn dict_with_word<'a>(batch: &'a Batch, pred: impl Fn(&Word) -> bool + 'a) -> impl Iterator<Item = usize> + 'a {
    batch
        .dict
        .iter()
        .enumerate()
        .filter(move |(_, d)| pred(&d.word))
        .map(|(i, _)| i)
}

fn cross(segs: impl IntoIterator<Item = usize>, dicts: &BTreeSet<usize>) -> BTreeSet<Pair> {
    segs.into_iter()
        .flat_map(|s| dicts.iter().map(move |&d| (s, d)))
        .collect()
}

fn foreground_bags(batch: &Batch, framework: BagFramework) -> Vec<AnchorBags> {
    let mut out = Vec::with_capacity(2 * batch.items.len());
    for (i, item) in batch.items.iter().enumerate() {
        let positives = cross([item.fg], &item.dict_fg);
        let other_items = || {
            batch
                .items
                .iter()
                .filter(move |o| o.fg_word != item.fg_word)
        };

        let seg_neg: BTreeSet<usize> = match framework {
            BagFramework::WatchLookup => other_items()
                .flat_map(|o| o.dict_fg.iter().copied())
                .collect(),
            BagFramework::WatchReadLookup => {
                dict_with_word(batch, |w| *w != item.fg_word).collect()
            }
        };
        out.push(AnchorBags {
            anchor: Anchor {
                kind: AnchorKind::Seg,
                item: i,
                member: 0,
            },
            positives: positives.clone(),
            negatives: cross([item.fg], &seg_neg),
        });

        let mut dict_neg_segs: BTreeSet<usize> = other_items().map(|o| o.fg).collect();
        if framework == BagFramework::WatchReadLookup {
            // background segments of videos labelled with the same word lie
            // outside the labelled window and cannot show it
            dict_neg_segs.extend(
                batch
                    .items
                    .iter()
                    .filter(|o| o.fg_word == item.fg_word)
                    .flat_map(|o| o.bg.iter().copied()),
            );
        }
        out.push(AnchorBags {
            anchor: Anchor {
                kind: AnchorKind::Dict,
                item: i,
                member: 0,
            },
            positives,
            negatives: cross(dict_neg_segs, &item.dict_fg),
        });
    }
    out
}

fn background_bags(batch: &Batch) -> Vec<AnchorBags> {
    let mut out = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        if item.bg_words.is_empty() {
            continue;
        }
        let candidates = item.background_candidates();
        let pos_dicts: BTreeSet<usize> = item.dict_bg.values().flatten().copied().collect();
        let neg_dicts: BTreeSet<usize> =
            dict_with_word(batch, |w| !candidates.contains(w)).collect();
        for (m, &s) in item.bg.iter().enumerate() {
            out.push(AnchorBags {
                anchor: Anchor {
                    kind: AnchorKind::SegBack,
                    item: i,
                    member: m,
                },
                positives: cross([s], &pos_dicts),
                negatives: cross([s], &neg_dicts),
            });
        }
        for (m, w) in item.bg_words.iter().enumerate() {
            let dicts = &item.dict_bg[w];
            let mut neg_segs: BTreeSet<usize> = batch
                .items
                .iter()
                .filter(|o| !o.subtitle_words.contains(w))
                .flat_map(|o| o.bg.iter().copied())
                .collect();
            neg_segs.extend(batch.items.iter().filter(|o| o.fg_word != *w).map(|o| o.fg));
            out.push(AnchorBags {
                anchor: Anchor {
                    kind: AnchorKind::DictBack,
                    item: i,
                    member: m,
                },
                positives: cross(item.bg.iter().copied(), dicts),
                negatives: cross(neg_segs, dicts),
            });
        }
    }
    out
}

pub fn build_watch_lookup_bags(batch: &Batch) -> BagSet {
    BagSet {
        anchors: foreground_bags(batch, BagFramework::WatchLookup),
    }
}

pub fn build_watch_read_lookup_bags(batch: &Batch) -> BagSet {
    let mut anchors = foreground_bags(batch, BagFramework::WatchReadLookup);
    anchors.extend(background_bags(batch));
    BagSet { anchors }
}

pub fn build_bags(batch: &Batch, framework: BagFramework) -> BagSet {
    match framework {
        BagFramework::WatchLookup => build_watch_lookup_bags(batch),
        BagFramework::WatchReadLookup => build_watch_read_lookup_bags(batch),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynonymPolicy {
    #[default]
    KeepAll,
    /// Drop negatives between English synonyms.
    DiscardEnglish,
    /// Drop negatives between words marked as the same sign.
    DiscardSign,
}

/// Removes negative pairs whose segment and dictionary words are distinct
/// members of one group. Positives are left unchanged.
pub fn apply_synonym_policy(
    bags: &BagSet,
    batch: &Batch,
    vocab: &Vocabulary,
    policy: SynonymPolicy,
) -> Result<BagSet> {
    let groups = match policy {
        SynonymPolicy::KeepAll => return Ok(bags.clone()),
        SynonymPolicy::DiscardEnglish => vocab.synonym_groups.as_ref(),
        SynonymPolicy::DiscardSign => vocab.sign_groups.as_ref(),
    }
    .ok_or_else(|| {
        Error::Config(format!("synonym policy {policy:?} needs group metadata in the vocabulary"))
    })?;
    let related = |a: &Word, b: &Word| a != b && groups.iter().any(|g| g.contains(a) && g.contains(b));
    let mut out = bags.clone();
    for a in &mut out.anchors {
        a.negatives.retain(|&(s, d)| {
            let dw = &batch.dict[d].word;
            !batch.segment_candidates(s).iter().any(|sw| related(sw, dw))
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagDumpRecord {
    pub anchor_kind: AnchorKind,
    pub item: usize,
    pub member: usize,
    pub positives: Vec<[String; 2]>,
    pub negatives: Vec<[String; 2]>,
    /// Negatives whose status is a judgement call: background segments of the
    /// anchor's own video paired with its foreground dictionaries.
    pub flagged: Vec<[String; 2]>,
}

/// One audit record per anchor.
pub fn dump_records(batch: &Batch, bags: &BagSet) -> Vec<BagDumpRecord> {
    let label = |&(s, d): &Pair| [batch.segment_label(s), batch.dict[d].id.clone()];
    bags.anchors
        .iter()
        .map(|a| {
            let flagged = if a.anchor.kind == AnchorKind::Dict {
                let own_bg: BTreeSet<usize> = batch.items[a.anchor.item].bg.iter().copied().collect();
                a.negatives
                    .iter()
                    .filter(|(s, _)| own_bg.contains(s))
                    .map(label)
                    .collect()
            } else {
                Vec::new()
            };
            BagDumpRecord {
                anchor_kind: a.anchor.kind,
                item: a.anchor.item,
                member: a.anchor.member,
                positives: a.positives.iter().map(label).collect(),
                negatives: a.negatives.iter().map(label).collect(),
                flagged,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        write_feature_file, AnnotationSource, CorpusManifest, DictionaryEntry, FeatureSequence,
        SparseAnnotation, SubtitledSequence,
    };
    use ndarray::Array2;
    use std::path::Path;

    fn w(s: &str) -> Word {
        Word::new(s).unwrap()
    }

    /// Two subtitled videos in the style of the worked example: "what is
    /// your friend's name?" labelled `friend`, and a second sentence
    /// labelled `language` that also mentions `speak`.
    pub(crate) fn figure_corpus(dir: &Path, variants: u32) -> LoadedCorpus {
        let feat = FeatureSequence::new(Array2::from_elem((185, 4), 0.25)).unwrap();
        write_feature_file(dir.join("v.feat"), &feat).unwrap();
        let clip = FeatureSequence::new(Array2::from_elem((2, 4), 1.0)).unwrap();
        write_feature_file(dir.join("d.feat"), &clip).unwrap();
        let words = ["friend", "language", "name", "speak", "what"];
        let seq = |id: &str, text: &str, word: &str, frame: u32| SubtitledSequence {
            id: id.into(),
            feature_path: "v.feat".into(),
            num_frames: 200,
            fps: 25.0,
            subtitle_text: text.into(),
            subtitle_start_frame: 0,
            subtitle_end_frame: 200,
            annotations: vec![SparseAnnotation {
                word: w(word),
                frame,
                confidence: 0.9,
                source: AnnotationSource::Mouthing,
            }],
        };
        let mut dictionary = Vec::new();
        for word in words {
            for v in 0..variants {
                dictionary.push(DictionaryEntry {
                    id: format!("{word}-{v}"),
                    word: w(word),
                    variant_index: v,
                    feature_path: "d.feat".into(),
                    signer_id: None,
                });
            }
        }
        let manifest = CorpusManifest {
            vocabulary: Vocabulary::new(words.iter().map(|s| w(s)).collect()),
            continuous: vec![
                seq("v1", "What is your friend's name?", "friend", 60),
                seq("v2", "Do you speak sign language?", "language", 100),
            ],
            dictionary,
            root: dir.to_path_buf(),
        };
        LoadedCorpus::load(manifest).unwrap()
    }

    fn figure_batch(dir: &Path, variants: u32) -> (LoadedCorpus, Batch) {
        let corpus = figure_corpus(dir, variants);
        let batch = build_batch(&corpus, &[w("friend"), w("language")], 7, &BatchConfig::default())
            .unwrap();
        (corpus, batch)
    }

    fn words_of(batch: &Batch, pairs: &BTreeSet<Pair>) -> BTreeSet<String> {
        pairs.iter().map(|&(_, d)| batch.dict[d].word.to_string()).collect()
    }

    #[test]
    fn figure_batch_words() {
        let dir = tempfile::tempdir().unwrap();
        let (_, batch) = figure_batch(dir.path(), 3);
        assert_eq!(batch.items.len(), 2);
        let bg0: Vec<&str> = batch.items[0].bg_words.iter().map(Word::as_str).collect();
        let bg1: Vec<&str> = batch.items[1].bg_words.iter().map(Word::as_str).collect();
        assert_eq!(bg0, ["name", "what"]);
        assert_eq!(bg1, ["speak"]);
        for item in &batch.items {
            assert_eq!(item.bg.len(), DEFAULT_BG_SEGMENTS);
            let fg = &batch.segments[item.fg];
            let frame = if item.fg_word.as_str() == "friend" { 60 } else { 100 };
            assert!((frame - 20..=frame + 5).contains(&(fg.start_row as i64)));
            for &b in &item.bg {
                let r = batch.segments[b].start_row as i64;
                assert!(r < frame - 20 || r > frame + 5);
            }
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = figure_corpus(dir.path(), 2);
        let words = [w("language"), w("friend")];
        let a = build_batch(&corpus, &words, 11, &BatchConfig::default()).unwrap();
        let b = build_batch(&corpus, &words, 11, &BatchConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(build_watch_read_lookup_bags(&a), build_watch_read_lookup_bags(&b));
        assert!(build_batch(&corpus, &[w("speak")], 1, &BatchConfig::default()).is_err());
    }

    #[test]
    fn watch_lookup_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (_, batch) = figure_batch(dir.path(), 3);
        let bags = build_watch_lookup_bags(&batch);
        assert_eq!(bags.anchors.len(), 4);
        for a in &bags.anchors {
            assert_eq!(a.positives.len(), 3);
            assert_eq!(a.negatives.len(), 3);
        }
        let single = build_batch(
            &figure_corpus(dir.path(), 3),
            &[w("friend")],
            3,
            &BatchConfig::default(),
        )
        .unwrap();
        for a in build_watch_lookup_bags(&single).anchors {
            assert!(a.negatives.is_empty());
            assert_eq!(a.positives.len(), 3);
        }
    }

    #[test]
    fn background_anchor_of_figure() {
        let dir = tempfile::tempdir().unwrap();
        let (_, batch) = figure_batch(dir.path(), 2);
        let bags = build_watch_read_lookup_bags(&batch);
        let a = bags
            .get(&Anchor {
                kind: AnchorKind::SegBack,
                item: 0,
                member: 0,
            })
            .unwrap();
        let pos = words_of(&batch, &a.positives);
        let neg = words_of(&batch, &a.negatives);
        assert_eq!(pos, BTreeSet::from(["name".into(), "what".into()]));
        assert_eq!(
            neg,
            BTreeSet::from(["friend".into(), "language".into(), "speak".into()])
        );
    }

    #[test]
    fn no_background_words_reduces_to_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = figure_corpus(dir.path(), 2);
        let mut manifest = corpus.manifest.clone();
        manifest.continuous[0].subtitle_text = "friend".into();
        let corpus = LoadedCorpus::load(manifest).unwrap();
        let batch = build_batch(&corpus, &[w("friend")], 5, &BatchConfig::default()).unwrap();
        assert!(batch.items[0].bg_words.is_empty());
        let wrl = build_watch_read_lookup_bags(&batch);
        assert!(wrl
            .anchors
            .iter()
            .all(|a| matches!(a.anchor.kind, AnchorKind::Seg | AnchorKind::Dict)));
        let wl = build_watch_lookup_bags(&batch);
        for (a, b) in wrl.anchors.iter().zip(&wl.anchors) {
            assert_eq!(a.positives, b.positives);
        }
    }

    #[test]
    fn synonym_policies() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, batch) = figure_batch(dir.path(), 1);
        let bags = build_watch_read_lookup_bags(&batch);
        let mut vocab = corpus.manifest.vocabulary.clone();
        assert_eq!(
            apply_synonym_policy(&bags, &batch, &vocab, SynonymPolicy::KeepAll).unwrap(),
            bags
        );
        assert!(apply_synonym_policy(&bags, &batch, &vocab, SynonymPolicy::DiscardEnglish).is_err());

        vocab.synonym_groups = Some(vec![BTreeSet::from([w("friend"), w("language")])]);
        vocab.sign_groups = Some(vec![]);
        let filtered =
            apply_synonym_policy(&bags, &batch, &vocab, SynonymPolicy::DiscardEnglish).unwrap();
        let seg0 = Anchor {
            kind: AnchorKind::Seg,
            item: 0,
            member: 0,
        };
        assert!(words_of(&batch, &bags.get(&seg0).unwrap().negatives).contains("language"));
        let after = words_of(&batch, &filtered.get(&seg0).unwrap().negatives);
        assert!(!after.contains("language"));
        assert!(after.contains("speak"));
        for (a, b) in filtered.anchors.iter().zip(&bags.anchors) {
            assert_eq!(a.positives, b.positives);
            assert!(a.negatives.is_subset(&b.negatives));
        }
        // no group overlaps in the batch: every policy is the identity
        assert_eq!(
            apply_synonym_policy(&bags, &batch, &vocab, SynonymPolicy::DiscardSign).unwrap(),
            bags
        );
    }

    #[test]
    fn dump_flags_own_background() {
        let dir = tempfile::tempdir().unwrap();
        let (_, batch) = figure_batch(dir.path(), 1);
        let bags = build_watch_read_lookup_bags(&batch);
        let records = dump_records(&batch, &bags);
        assert_eq!(records.len(), bags.anchors.len());
        let dict0 = records
            .iter()
            .find(|r| r.anchor_kind == AnchorKind::Dict && r.item == 0)
            .unwrap();
        assert_eq!(dict0.flagged.len(), DEFAULT_BG_SEGMENTS);
        let line = serde_json::to_string(dict0).unwrap();
        assert!(line.contains("\"anchor_kind\":\"dict\""));
    }

    #[test]
    fn background_cap_limits_words() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = figure_corpus(dir.path(), 1);
        let cfg = BatchConfig {
            bg_segments: 3,
            max_bg_words: Some(1),
        };
        let batch = build_batch(&corpus, &[w("friend")], 2, &cfg).unwrap();
        assert_eq!(batch.items[0].bg_words.len(), 1);
        assert_eq!(batch.items[0].bg.len(), 3);
        assert_eq!(batch.items[0].subtitle_words.len(), 3);
    }
}
