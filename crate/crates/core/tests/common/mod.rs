#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signspot::corpus::{
    load_manifest, write_feature_file, AnnotationSource, CorpusManifest, DictionaryEntry, FeatureSequence,
    LoadedCorpus, SparseAnnotation, SubtitledSequence, Vocabulary, Word,
};

pub fn w(s: &str) -> Word {
    Word::new(s).unwrap()
}

pub struct Video {
    pub subtitle: String,
    /// (word, frame)
    pub annotations: Vec<(String, u32)>,
    pub frames: u32,
}

/// Writes a manifest with Gaussian features and loads it.
pub struct CorpusBuilder {
    pub dim: usize,
    pub vocab: Vec<String>,
    /// (word, variant count)
    pub dictionary: Vec<(String, u32)>,
    pub videos: Vec<Video>,
    pub seed: u64,
}

impl CorpusBuilder {
    pub fn new(vocab: &[&str]) -> Self {
        Self {
            dim: 6,
            vocab: vocab.iter().map(|s| s.to_string()).collect(),
            dictionary: Vec::new(),
            videos: Vec::new(),
            seed: 0,
        }
    }

    pub fn variants(mut self, word: &str, n: u32) -> Self {
        self.dictionary.push((word.into(), n));
        self
    }

    pub fn video(mut self, subtitle: &str, annotations: &[(&str, u32)], frames: u32) -> Self {
        self.videos.push(Video {
            subtitle: subtitle.into(),
            annotations: annotations.iter().map(|(w, f)| (w.to_string(), *f)).collect(),
            frames,
        });
        self
    }

    pub fn manifest(&self, dir: &Path) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut gauss = |rows: usize| {
            Array2::from_shape_simple_fn((rows, self.dim), || rng.random_range(-1.0f32..1.0))
        };
        let mut continuous = Vec::new();
        for (i, v) in self.videos.iter().enumerate() {
            let rel = PathBuf::from(format!("v{i}.feat"));
            let rows = (v.frames - 15) as usize;
            write_feature_file(dir.join(&rel), &FeatureSequence::new(gauss(rows)).unwrap()).unwrap();
            continuous.push(SubtitledSequence {
                id: format!("v{i}"),
                feature_path: rel,
                num_frames: v.frames,
                fps: 25.0,
                subtitle_text: v.subtitle.clone(),
                subtitle_start_frame: 0,
                subtitle_end_frame: v.frames,
                annotations: v
                    .annotations
                    .iter()
                    .map(|(word, frame)| SparseAnnotation {
                        word: w(word),
                        frame: *frame,
                        confidence: 0.9,
                        source: AnnotationSource::Mouthing,
                    })
                    .collect(),
            });
        }
        let mut dictionary = Vec::new();
        for (word, n) in &self.dictionary {
            for k in 0..*n {
                let rel = PathBuf::from(format!("d_{word}_{k}.feat"));
                write_feature_file(dir.join(&rel), &FeatureSequence::new(gauss(2)).unwrap()).unwrap();
                dictionary.push(DictionaryEntry {
                    id: format!("{word}-{k}"),
                    word: w(word),
                    variant_index: k,
                    feature_path: rel,
                    signer_id: None,
                });
            }
        }
        let m = CorpusManifest {
            vocabulary: Vocabulary::new(self.vocab.iter().map(|s| w(s)).collect()),
            continuous,
            dictionary,
            root: dir.to_path_buf(),
        };
        let path = dir.join("manifest.json");
        m.write(&path).unwrap();
        path
    }

    pub fn load(&self, dir: &Path) -> LoadedCorpus {
        LoadedCorpus::load(load_manifest(self.manifest(dir)).unwrap()).unwrap()
    }
}

/// The five-word corpus of the subtitle example: "what is your friend's
/// name?" labelled `friend`, "do you speak sign language?" labelled
/// `language`.
pub fn example_corpus(variants: u32) -> CorpusBuilder {
    let mut b = CorpusBuilder::new(&["friend", "name", "what", "speak", "language"])
        .video("What is your friend's name?", &[("friend", 100)], 200)
        .video("Do you speak sign language?", &[("language", 100)], 200);
    for word in ["friend", "name", "what", "speak", "language"] {
        b = b.variants(word, variants);
    }
    b
}

pub mod fd;
pub mod metric_oracle;
