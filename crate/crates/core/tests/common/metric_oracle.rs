//! Brute-force metric references built on `oracle_ap`.

use std::collections::BTreeMap;

use signspot::corpus::Word;
use signspot::eval::{Detection, GroundTruth, RetrievalCase, Tolerance};
use signspot::synth::oracle::oracle_ap;

fn within(tol: Tolerance, reference: i64, frame: i64) -> bool {
    (reference - tol.before..=reference + tol.after).contains(&frame)
}

pub fn retrieval_map(cases: &[RetrievalCase], tol: Tolerance) -> f64 {
    let mut per_class: BTreeMap<&Word, Vec<f64>> = BTreeMap::new();
    for c in cases {
        let rel: Vec<bool> = c
            .ranking
            .iter()
            .map(|e| e.word == c.word && within(tol, e.reference_frame, e.predicted_frame))
            .collect();
        per_class.entry(&c.word).or_default().push(oracle_ap(&rel));
    }
    let means: Vec<f64> = per_class.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    means.iter().sum::<f64>() / means.len() as f64
}

pub fn recall_at_k(cases: &[RetrievalCase], k: usize) -> f64 {
    let mut per_class: BTreeMap<&Word, Vec<f64>> = BTreeMap::new();
    for c in cases {
        let hit = c.ranking.iter().take(k).any(|e| e.word == c.word);
        per_class.entry(&c.word).or_default().push(if hit { 1.0 } else { 0.0 });
    }
    let means: Vec<f64> = per_class.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    means.iter().sum::<f64>() / means.len() as f64
}

/// Greedy matching by decreasing score; the relevance list is scored with
/// `oracle_ap` and rescaled from matched instances to all instances.
fn class_ap(dets: &[Detection], truth: &[GroundTruth], tol: Tolerance) -> f64 {
    let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
    let mut free = vec![true; truth.len()];
    let mut rel = Vec::new();
    for (_, d) in ranked {
        let mut best: Option<(i64, usize)> = None;
        for (g, t) in truth.iter().enumerate() {
            if free[g] && t.video_id == d.video_id && within(tol, t.frame, d.frame) {
                let key = ((t.frame - d.frame).abs(), g);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        if let Some((_, g)) = best {
            free[g] = false;
        }
        rel.push(best.is_some());
    }
    let hits = rel.iter().filter(|r| **r).count();
    oracle_ap(&rel) * hits as f64 / truth.len() as f64
}

pub fn spotting_map(
    dets: &BTreeMap<Word, Vec<Detection>>,
    truth: &BTreeMap<Word, Vec<GroundTruth>>,
    tol: Tolerance,
) -> f64 {
    let aps: Vec<f64> = truth
        .iter()
        .filter(|(_, g)| !g.is_empty())
        .map(|(w, g)| class_ap(dets.get(w).map(Vec::as_slice).unwrap_or(&[]), g, tol))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}
