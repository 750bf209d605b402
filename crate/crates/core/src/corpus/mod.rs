//! Corpus data model: subtitled continuous videos with sparse annotations,
//! dictionary entries and the shared vocabulary.

mod feature;
mod text;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use feature::{
    decode_feature, encode_feature, read_feature_file, read_feature_header, write_feature_file,
    FeatHeader, FeatureSequence, FEAT_MAGIC, FEAT_VERSION,
};
pub use text::{
    lemmatize, normalize_text, normalized_form, spell_number, tokenize, SubtitleForms, Word,
};

use crate::error::{Error, Result};

/// Length of the trunk's temporal window; a video of `F` frames yields `F - 15` rows.
pub const WINDOW_FRAMES: u32 = 16;
pub const DEFAULT_FPS: f64 = 25.0;

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<Word>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonym_groups: Option<Vec<BTreeSet<Word>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_groups: Option<Vec<BTreeSet<Word>>>,
}

impl Vocabulary {
    pub fn new(words: Vec<Word>) -> Self {
        Self {
            words,
            synonym_groups: None,
            sign_groups: None,
        }
    }

    pub fn contains(&self, w: &Word) -> bool {
        self.words.contains(w)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for w in &self.words {
            if !seen.insert(w) {
                return Err(Error::validation(
                    format!("vocabulary/{w}"),
                    "duplicate vocabulary word",
                ));
            }
        }
        for (kind, groups) in [
            ("synonym_groups", &self.synonym_groups),
            ("sign_groups", &self.sign_groups),
        ] {
            for group in groups.iter().flatten() {
                if let Some(w) = group.iter().find(|w| !seen.contains(w)) {
                    return Err(Error::validation(
                        format!("vocabulary/{kind}/{w}"),
                        format!("group word `{w}` is not in the vocabulary"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Mouthing,
    Dictionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseAnnotation {
    pub word: Word,
    pub frame: u32,
    pub confidence: f64,
    pub source: AnnotationSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitledSequence {
    pub id: String,
    pub feature_path: PathBuf,
    pub num_frames: u32,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub subtitle_text: String,
    pub subtitle_start_frame: u32,
    pub subtitle_end_frame: u32,
    #[serde(default)]
    pub annotations: Vec<SparseAnnotation>,
}

impl SubtitledSequence {
    pub fn subtitle_span(&self) -> (u32, u32) {
        (self.subtitle_start_frame, self.subtitle_end_frame)
    }

    /// Subtitle span padded by `pad_seconds` on both sides, rounded outward
    /// to whole frames and clipped to the video.
    pub fn padded_window(&self, pad_seconds: f64) -> (u32, u32) {
        let pad = pad_seconds.max(0.0) * self.fps;
        let start = (self.subtitle_start_frame as f64 - pad).floor().max(0.0) as u32;
        let end = (self.subtitle_end_frame as f64 + pad)
            .ceil()
            .min(self.num_frames as f64) as u32;
        (start, end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub id: String,
    pub word: Word,
    pub variant_index: u32,
    pub feature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signer_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub vocabulary: Vocabulary,
    pub continuous: Vec<SubtitledSequence>,
    pub dictionary: Vec<DictionaryEntry>,
    /// Directory that relative feature paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn sequence(&self, id: &str) -> Option<&SubtitledSequence> {
        self.continuous.iter().find(|s| s.id == id)
    }

    /// Dictionary entry indices grouped by word, ordered by variant index.
    pub fn entries_by_word(&self) -> BTreeMap<Word, Vec<usize>> {
        let mut map: BTreeMap<Word, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.dictionary.iter().enumerate() {
            map.entry(e.word.clone()).or_default().push(i);
        }
        for v in map.values_mut() {
            v.sort_by_key(|&i| self.dictionary[i].variant_index);
        }
        map
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    /// First error aborts.
    Strict,
    /// Offending records are dropped and reported as warnings.
    Lenient,
}

fn parse_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(manifest)
}

fn check_sequence(m: &CorpusManifest, s: &SubtitledSequence) -> Result<u32> {
    let rec = format!("continuous/{}", s.id);
    if !(s.fps.is_finite() && s.fps > 0.0) {
        return Err(Error::validation(rec, format!("fps must be positive, got {}", s.fps)));
    }
    if !(s.subtitle_start_frame <= s.subtitle_end_frame && s.subtitle_end_frame <= s.num_frames)
    {
        return Err(Error::validation(
            rec,
            format!(
                "subtitle span ({}, {}) not within 0..={}",
                s.subtitle_start_frame, s.subtitle_end_frame, s.num_frames
            ),
        ));
    }
    for a in &s.annotations {
        if a.frame >= s.num_frames {
            return Err(Error::validation(
                rec,
                format!("annotation `{}` frame {} >= num_frames {}", a.word, a.frame, s.num_frames),
            ));
        }
        if !(0.5..=1.0).contains(&a.confidence) {
            return Err(Error::validation(
                rec,
                format!("annotation `{}` confidence {} outside [0.5, 1]", a.word, a.confidence),
            ));
        }
        if !m.vocabulary.contains(&a.word) {
            return Err(Error::validation(
                rec,
                format!("annotation word `{}` is not in the vocabulary", a.word),
            ));
        }
    }
    let header = read_feature_header(m.resolve(&s.feature_path))
        .map_err(|e| Error::validation(rec.clone(), e.to_string()))?;
    if header.rows > s.num_frames {
        return Err(Error::validation(
            rec,
            format!("feature rows {} exceed num_frames {}", header.rows, s.num_frames),
        ));
    }
    Ok(header.dim)
}

fn check_entry(
    m: &CorpusManifest,
    e: &DictionaryEntry,
    variants: &mut HashSet<(Word, u32)>,
) -> Result<u32> {
    let rec = format!("dictionary/{}", e.id);
    if !m.vocabulary.contains(&e.word) {
        return Err(Error::validation(
            rec,
            format!("word `{}` is not in the vocabulary", e.word),
        ));
    }
    if !variants.insert((e.word.clone(), e.variant_index)) {
        return Err(Error::validation(
            rec,
            format!("duplicate variant_index {} for `{}`", e.variant_index, e.word),
        ));
    }
    let header = read_feature_header(m.resolve(&e.feature_path))
        .map_err(|err| Error::validation(rec, err.to_string()))?;
    Ok(header.dim)
}

/// Validates a parsed manifest. In lenient mode invalid continuous or
/// dictionary records are removed and described in the returned warnings.
pub fn validate_manifest(
    manifest: &mut CorpusManifest,
    mode: ValidationMode,
) -> Result<Vec<String>> {
    manifest.vocabulary.validate()?;
    let mut warnings = Vec::new();
    let mut dim: Option<(u32, String)> = None;
    let mut check_dim = |d: u32, rec: String| -> Result<()> {
        match &dim {
            None => {
                dim = Some((d, rec));
                Ok(())
            }
            Some((d0, _)) if *d0 == d => Ok(()),
            Some((d0, first)) => Err(Error::validation(
                rec,
                format!("feature dim {d} differs from {d0} of {first}"),
            )),
        }
    };

    let mut ids = HashSet::new();
    let mut keep = Vec::with_capacity(manifest.continuous.len());
    for s in &manifest.continuous {
        let res = if ids.insert(s.id.clone()) {
            check_sequence(manifest, s)
                .and_then(|d| check_dim(d, format!("continuous/{}", s.id)))
        } else {
            Err(Error::validation(format!("continuous/{}", s.id), "duplicate id"))
        };
        match (res, mode) {
            (Ok(()), _) => keep.push(true),
            (Err(e), ValidationMode::Strict) => return Err(e),
            (Err(e), ValidationMode::Lenient) => {
                warnings.push(e.to_string());
                keep.push(false);
            }
        }
    }
    let mut it = keep.into_iter();
    manifest.continuous.retain(|_| it.next().unwrap());

    let mut ids = HashSet::new();
    let mut variants = HashSet::new();
    let mut keep = Vec::with_capacity(manifest.dictionary.len());
    for e in &manifest.dictionary {
        let res = if ids.insert(e.id.clone()) {
            check_entry(manifest, e, &mut variants)
                .and_then(|d| check_dim(d, format!("dictionary/{}", e.id)))
        } else {
            Err(Error::validation(format!("dictionary/{}", e.id), "duplicate id"))
        };
        match (res, mode) {
            (Ok(()), _) => keep.push(true),
            (Err(e), ValidationMode::Strict) => return Err(e),
            (Err(e), ValidationMode::Lenient) => {
                warnings.push(e.to_string());
                keep.push(false);
            }
        }
    }
    let mut it = keep.into_iter();
    manifest.dictionary.retain(|_| it.next().unwrap());
    Ok(warnings)
}

/// Loads and strictly validates a manifest. Feature payloads are not read;
/// only their headers are checked.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let mut m = parse_manifest(path.as_ref())?;
    validate_manifest(&mut m, ValidationMode::Strict)?;
    Ok(m)
}

/// Loads a manifest, skipping invalid records with a warning each.
pub fn load_manifest_lenient(path: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<String>)> {
    let mut m = parse_manifest(path.as_ref())?;
    let warnings = validate_manifest(&mut m, ValidationMode::Lenient)?;
    Ok((m, warnings))
}

/// Drops annotations below `threshold` (only those of `source` when given)
/// and removes sequences left without annotations.
pub fn filter_by_confidence(
    manifest: &CorpusManifest,
    threshold: f64,
    source: Option<AnnotationSource>,
) -> CorpusManifest {
    let mut out = manifest.clone();
    for s in &mut out.continuous {
        s.annotations
            .retain(|a| source.is_some_and(|src| a.source != src) || a.confidence >= threshold);
    }
    out.continuous.retain(|s| !s.annotations.is_empty());
    out
}

/// A manifest with every feature file read into memory and the per-video
/// subtitle tokens precomputed.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub manifest: CorpusManifest,
    pub continuous: Vec<Arc<FeatureSequence>>,
    /// Clip-averaged trunk feature per dictionary entry.
    pub dictionary: Vec<Array1<f64>>,
    pub subtitle_words: Vec<BTreeSet<Word>>,
    pub entries_by_word: BTreeMap<Word, Vec<usize>>,
    pub feature_dim: usize,
}

impl LoadedCorpus {
    pub fn load(manifest: CorpusManifest) -> Result<Self> {
        let continuous: Vec<Arc<FeatureSequence>> = manifest
            .continuous
            .par_iter()
            .map(|s| read_feature_file(manifest.resolve(&s.feature_path)).map(Arc::new))
            .collect::<Result<_>>()?;
        let dictionary: Vec<Array1<f64>> = manifest
            .dictionary
            .par_iter()
            .map(|e| {
                let seq = read_feature_file(manifest.resolve(&e.feature_path))?;
                crate::model::dictionary_feature(&seq)
            })
            .collect::<Result<_>>()?;
        let feature_dim = continuous
            .first()
            .map(|f| f.dim())
            .or_else(|| dictionary.first().map(|d| d.len()))
            .ok_or_else(|| Error::InvalidInput("manifest references no feature files".into()))?;
        let subtitle_words = manifest
            .continuous
            .iter()
            .map(|s| tokenize(&s.subtitle_text, &manifest.vocabulary.words))
            .collect();
        let entries_by_word = manifest.entries_by_word();
        Ok(Self {
            manifest,
            continuous,
            dictionary,
            subtitle_words,
            entries_by_word,
            feature_dim,
        })
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.manifest.continuous.iter().position(|s| s.id == id)
    }
}
