//! SGD training of the embedding head.
//!
//! An epoch visits every eligible annotation once. With class balancing the
//! shuffled annotations are packed first-fit into `ceil(N / B)` batches of
//! distinct words; annotations that fit nowhere are carried to the front of
//! the next epoch.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bags::{
    apply_synonym_policy, build_bags, build_batch_from_annotations, AnnotationRef, BagFramework, BagSet, Batch,
    BatchConfig, SynonymPolicy,
};
use crate::corpus::LoadedCorpus;
use crate::error::{Error, Result};
use crate::mil_nce::{mil_nce_loss_and_grad, AnchorLossInput, DEFAULT_TAU};
use crate::model::{normalize_rows, EmbeddingModel, Tape, EMBED_DIM, HIDDEN_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    WatchLookup,
    WatchReadLookup,
    /// Watch-Lookup bags reduced to one random positive per anchor.
    Infonce,
    ClassificationBaseline,
}

impl Framework {
    fn bags(self) -> BagFramework {
        match self {
            Framework::WatchReadLookup => BagFramework::WatchReadLookup,
            _ => BagFramework::WatchLookup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub framework: Framework,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// 1-based epochs from which the rate is divided once more.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub tau: f64,
    pub confidence_threshold: f64,
    pub synonym_policy: SynonymPolicy,
    pub class_balanced: bool,
    pub seed: u64,
    pub share_domains: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub bg_segments: usize,
    pub max_bg_words: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            framework: Framework::WatchReadLookup,
            batch_size: 128,
            epochs: 50,
            lr: 0.01,
            lr_decay_epochs: vec![40, 45],
            lr_decay_factor: 10.0,
            tau: DEFAULT_TAU,
            confidence_threshold: 0.5,
            synonym_policy: SynonymPolicy::KeepAll,
            class_balanced: true,
            seed: 0,
            share_domains: true,
            hidden_dim: HIDDEN_DIM,
            embed_dim: EMBED_DIM,
            bg_segments: crate::bags::DEFAULT_BG_SEGMENTS,
            max_bg_words: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !self.confidence_threshold.is_finite() {
            return bad("confidence_threshold must be finite".into());
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("hidden_dim and embed_dim must be positive".into());
        }
        if self.epochs > 0 {
            if let Some(&d) = self.lr_decay_epochs.iter().find(|&&d| d == 0 || d >= self.epochs) {
                return bad(format!(
                    "decay epoch {d} must lie in 1..{} (epochs = {})",
                    self.epochs, self.epochs
                ));
            }
        }
        Ok(())
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            bg_segments: self.bg_segments,
            max_bg_words: self.max_bg_words,
        }
    }
}

/// Learning rate in effect during 1-based `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr / cfg.lr_decay_factor.powi(decays as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub steps: usize,
    /// Fraction of training samples classified correctly (baseline only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Copy with wall times zeroed, for replay comparisons.
    pub fn without_wall_time(&self) -> TrainHistory {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        h
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the generator for one (epoch, step); `step = u64::MAX` is the
/// epoch's shuffle.
pub fn step_seed(seed: u64, epoch: u64, step: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ step)
}

/// Annotations above the confidence threshold whose word has a dictionary
/// entry, in manifest order.
pub fn eligible_annotations(corpus: &LoadedCorpus, threshold: f64) -> Vec<AnnotationRef> {
    let mut out = Vec::new();
    for (v, seq) in corpus.manifest.continuous.iter().enumerate() {
        if corpus.continuous[v].rows() == 0 {
            continue;
        }
        for (a, ann) in seq.annotations.iter().enumerate() {
            let has_dict = corpus.entries_by_word.get(&ann.word).is_some_and(|e| !e.is_empty());
            if ann.confidence >= threshold && has_dict {
                out.push(AnnotationRef { video: v, annotation: a });
            }
        }
    }
    out
}

/// Splits one epoch's annotations into batches. Returns the batches and the
/// annotations deferred to the next epoch.
pub fn plan_epoch(
    corpus: &LoadedCorpus,
    eligible: &[AnnotationRef],
    deferred: &[AnnotationRef],
    batch_size: usize,
    class_balanced: bool,
    rng: &mut impl Rng,
) -> (Vec<Vec<AnnotationRef>>, Vec<AnnotationRef>) {
    let carried: BTreeSet<AnnotationRef> = deferred.iter().copied().collect();
    let mut rest: Vec<AnnotationRef> = eligible.iter().copied().filter(|a| !carried.contains(a)).collect();
    rest.shuffle(rng);
    let pool: Vec<AnnotationRef> = deferred.iter().copied().chain(rest).collect();
    if !class_balanced {
        return (pool.chunks(batch_size).map(<[_]>::to_vec).collect(), Vec::new());
    }
    let word = |a: &AnnotationRef| &corpus.manifest.continuous[a.video].annotations[a.annotation].word;
    let distinct = pool.iter().map(word).collect::<BTreeSet<_>>().len();
    let cap = batch_size.min(distinct).max(1);
    let n_batches = pool.len().div_ceil(cap);
    let mut batches: Vec<Vec<AnnotationRef>> = vec![Vec::new(); n_batches];
    let mut words: Vec<BTreeSet<_>> = vec![BTreeSet::new(); n_batches];
    let mut next_deferred = Vec::new();
    for a in pool {
        let w = word(&a);
        match (0..n_batches).find(|&b| batches[b].len() < cap && !words[b].contains(w)) {
            Some(b) => {
                batches[b].push(a);
                words[b].insert(w);
            }
            None => next_deferred.push(a),
        }
    }
    batches.retain(|b| !b.is_empty());
    (batches, next_deferred)
}

/// Called with (epoch, step, batch, bags) before each contrastive update.
pub type BagHook<'a> = dyn FnMut(usize, usize, &Batch, &BagSet) + 'a;

fn init_model(corpus: &LoadedCorpus, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    EmbeddingModel::init_with_dims(
        cfg.seed,
        corpus.feature_dim,
        cfg.hidden_dim,
        cfg.embed_dim,
        cfg.share_domains,
    )
}

fn check_corpus(eligible: &[AnnotationRef]) -> Result<()> {
    if eligible.is_empty() {
        return Err(Error::InvalidInput(
            "no annotation above the confidence threshold has a dictionary entry".into(),
        ));
    }
    Ok(())
}

fn gather(rows: impl Iterator<Item = Array1<f64>>, dim: usize) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = rows.collect();
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(src);
    }
    m
}

fn segment_features(corpus: &LoadedCorpus, batch: &Batch, segs: &[usize]) -> Array2<f64> {
    gather(
        segs.iter().map(|&s| {
            let seg = &batch.segments[s];
            corpus.continuous[seg.video].row_f64(seg.start_row)
        }),
        corpus.feature_dim,
    )
}

fn dict_features(corpus: &LoadedCorpus, batch: &Batch, dicts: &[usize]) -> Array2<f64> {
    gather(
        dicts.iter().map(|&d| corpus.dictionary[batch.dict[d].entry].clone()),
        corpus.feature_dim,
    )
}

/// Gradient through `u = e / |e|` given `g = dL/du`.
fn through_normalization(g: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, u), &n) in out.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(norms) {
        let proj = o.dot(&u);
        o.scaled_add(-proj, &u);
        o /= n;
    }
    out
}

fn forward(model: &EmbeddingModel, dict: bool, x: &Array2<f64>) -> (Array2<f64>, Tape) {
    let head = if dict {
        model.head(crate::model::Domain::Dictionary)
    } else {
        model.head(crate::model::Domain::Continuous)
    };
    head.forward_batch(x.view())
}

/// Positive and negative (segment row, dictionary row) pairs of one anchor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RowBag {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Batch loss over cosine similarities of embedded rows of `xs` (continuous)
/// and `xd` (dictionary), with the gradient of every head parameter. The
/// gradient has the model's shape; for a shared head both domains
/// contribute to `continuous`.
pub fn contrastive_loss_and_grad(
    model: &EmbeddingModel,
    xs: &Array2<f64>,
    xd: &Array2<f64>,
    bags: &[RowBag],
    tau: f64,
) -> Result<(f64, EmbeddingModel)> {
    let (es, tape_s) = forward(model, false, xs);
    let (ed, tape_d) = forward(model, true, xd);
    let (us, ns) = normalize_rows(&es)?;
    let (ud, nd) = normalize_rows(&ed)?;
    let sims = us.dot(&ud.t());
    let sim = |&(s, d): &(usize, usize)| sims[[s, d]].clamp(-1.0, 1.0);
    let inputs: Vec<AnchorLossInput> = bags
        .iter()
        .map(|a| AnchorLossInput::new(a.positives.iter().map(sim).collect(), a.negatives.iter().map(sim).collect(), tau))
        .collect();
    let (loss, grads) = mil_nce_loss_and_grad(&inputs)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    let mut g = Array2::<f64>::zeros(sims.raw_dim());
    for (a, ga) in bags.iter().zip(&grads) {
        for (&(s, d), v) in a.positives.iter().zip(&ga.pos).chain(a.negatives.iter().zip(&ga.neg)) {
            g[[s, d]] += v;
        }
    }
    let des = through_normalization(&g.dot(&ud), &us, &ns);
    let ded = through_normalization(&g.t().dot(&us), &ud, &nd);
    let (gs, _) = model.head(crate::model::Domain::Continuous).backward_batch(&tape_s, des.view())?;
    let (gd, _) = model.head(crate::model::Domain::Dictionary).backward_batch(&tape_d, ded.view())?;
    let grad = match model.dictionary {
        Some(_) => EmbeddingModel {
            continuous: gs,
            dictionary: Some(gd),
        },
        None => {
            let mut gs = gs;
            gs.add_scaled(&gd, 1.0);
            EmbeddingModel::shared(gs)
        }
    };
    Ok((loss, grad))
}

/// `model -= lr * grad`, head by head.
pub fn sgd_update(model: &mut EmbeddingModel, grad: &EmbeddingModel, lr: f64) {
    model.continuous.add_scaled(&grad.continuous, -lr);
    if let (Some(d), Some(g)) = (model.dictionary.as_mut(), grad.dictionary.as_ref()) {
        d.add_scaled(g, -lr);
    }
}

/// One contrastive step on prepared bags. Returns the batch loss, or `None`
/// when no anchor survived.
fn contrastive_step(
    model: &mut EmbeddingModel,
    corpus: &LoadedCorpus,
    batch: &Batch,
    bags: &BagSet,
    tau: f64,
    lr: f64,
) -> Result<Option<f64>> {
    if bags.anchors.is_empty() {
        return Ok(None);
    }
    let (segs, dicts) = bags.used_indices();
    let segs: Vec<usize> = segs.into_iter().collect();
    let dicts: Vec<usize> = dicts.into_iter().collect();
    let mut seg_pos = vec![usize::MAX; batch.segments.len()];
    segs.iter().enumerate().for_each(|(i, &s)| seg_pos[s] = i);
    let mut dict_pos = vec![usize::MAX; batch.dict.len()];
    dicts.iter().enumerate().for_each(|(i, &d)| dict_pos[d] = i);
    let local = |pairs: &BTreeSet<(usize, usize)>| pairs.iter().map(|&(s, d)| (seg_pos[s], dict_pos[d])).collect();
    let rows: Vec<RowBag> = bags
        .anchors
        .iter()
        .map(|a| RowBag {
            positives: local(&a.positives),
            negatives: local(&a.negatives),
        })
        .collect();

    let xs = segment_features(corpus, batch, &segs);
    let xd = dict_features(corpus, batch, &dicts);
    let (loss, grad) = contrastive_loss_and_grad(model, &xs, &xd, &rows, tau)?;
    sgd_update(model, &grad, lr);
    if !model.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(Some(loss))
}

/// Trains with a contrastive framework.
pub fn train(corpus: &LoadedCorpus, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainHistory)> {
    train_with_hook(corpus, cfg, None)
}

pub fn train_with_hook(
    corpus: &LoadedCorpus,
    cfg: &TrainConfig,
    mut hook: Option<&mut BagHook>,
) -> Result<(EmbeddingModel, TrainHistory)> {
    cfg.validate()?;
    if cfg.framework == Framework::ClassificationBaseline {
        return train_classification_baseline(corpus, cfg);
    }
    let eligible = eligible_annotations(corpus, cfg.confidence_threshold);
    check_corpus(&eligible)?;
    let mut model = init_model(corpus, cfg)?;
    let mut history = TrainHistory::default();
    let mut deferred = Vec::new();
    let bcfg = cfg.batch_config();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, epoch as u64, u64::MAX));
        let (plan, carry) = plan_epoch(corpus, &eligible, &deferred, cfg.batch_size, cfg.class_balanced, &mut rng);
        deferred = carry;
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, picks) in plan.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, epoch as u64, step as u64));
            let batch = build_batch_from_annotations(corpus, picks, &bcfg, &mut rng)?;
            let mut bags = build_bags(&batch, cfg.framework.bags());
            if cfg.synonym_policy != SynonymPolicy::KeepAll {
                bags = apply_synonym_policy(&bags, &batch, &corpus.manifest.vocabulary, cfg.synonym_policy)?;
            }
            bags.drop_empty_positives();
            if cfg.framework == Framework::Infonce {
                bags.reduce_to_single_positive(&mut rng);
            }
            if let Some(h) = hook.as_mut() {
                h(epoch, step, &batch, &bags);
            }
            if let Some(loss) = contrastive_step(&mut model, corpus, &batch, &bags, cfg.tau, lr)? {
                total += loss;
                steps += 1;
            }
        }
        let mean_loss = if steps == 0 { 0.0 } else { total / steps as f64 };
        log::info!("epoch {epoch}: loss {mean_loss:.5} lr {lr} steps {steps}");
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            lr,
            steps,
            train_accuracy: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Trains the head under a linear softmax classifier over the annotated
/// words, using labelled foreground segments and the dictionary entries of
/// their words. The classifier is discarded.
pub fn train_classification_baseline(
    corpus: &LoadedCorpus,
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, TrainHistory)> {
    cfg.validate()?;
    let eligible = eligible_annotations(corpus, cfg.confidence_threshold);
    check_corpus(&eligible)?;
    let classes: Vec<_> = eligible
        .iter()
        .map(|a| corpus.manifest.continuous[a.video].annotations[a.annotation].word.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_of = |w: &crate::corpus::Word| classes.binary_search(w).expect("class of eligible word");
    let mut model = init_model(corpus, cfg)?;
    let mut crng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0xc1a5));
    let bound = (6.0 / cfg.embed_dim as f64).sqrt();
    let mut wc = Array2::from_shape_simple_fn((classes.len(), cfg.embed_dim), || crng.random_range(-bound..bound));
    let mut bc = Array1::<f64>::zeros(classes.len());
    let bcfg = BatchConfig {
        bg_segments: 0,
        max_bg_words: Some(0),
    };

    let mut history = TrainHistory::default();
    let mut deferred = Vec::new();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, epoch as u64, u64::MAX));
        let (plan, carry) = plan_epoch(corpus, &eligible, &deferred, cfg.batch_size, cfg.class_balanced, &mut rng);
        deferred = carry;
        let (mut total, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, picks) in plan.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, epoch as u64, step as u64));
            let batch = build_batch_from_annotations(corpus, picks, &bcfg, &mut rng)?;
            let segs: Vec<usize> = batch.items.iter().map(|i| i.fg).collect();
            let dicts: Vec<usize> = (0..batch.dict.len()).collect();
            let ys: Vec<usize> = segs
                .iter()
                .map(|&s| class_of(batch.segments[s].word.as_ref().expect("foreground word")))
                .collect();
            let yd: Vec<usize> = dicts.iter().map(|&d| class_of(&batch.dict[d].word)).collect();
            let n = (ys.len() + yd.len()) as f64;

            let xs = segment_features(corpus, &batch, &segs);
            let xd = dict_features(corpus, &batch, &dicts);
            let (es, tape_s) = forward(&model, false, &xs);
            let (ed, tape_d) = forward(&model, true, &xd);
            let mut loss = 0.0;
            let mut grad_logits = |e: &Array2<f64>, y: &[usize]| {
                let mut logits = e.dot(&wc.t());
                logits += &bc;
                let mut p = softmax_rows(&logits);
                for (mut row, &t) in p.axis_iter_mut(Axis(0)).zip(y) {
                    let argmax = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                    correct += usize::from(argmax.0 == t);
                    loss -= row[t].max(f64::MIN_POSITIVE).ln();
                    row[t] -= 1.0;
                    row /= n;
                }
                p
            };
            let gs = grad_logits(&es, &ys);
            let gd = grad_logits(&ed, &yd);
            let loss = loss / n;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {loss}")));
            }
            let dwc = gs.t().dot(&es) + gd.t().dot(&ed);
            let dbc = gs.sum_axis(Axis(0)) + gd.sum_axis(Axis(0));
            let des = gs.dot(&wc);
            let ded = gd.dot(&wc);
            let (ps, _) = model.head(crate::model::Domain::Continuous).backward_batch(&tape_s, des.view())?;
            let (pd, _) = model.head(crate::model::Domain::Dictionary).backward_batch(&tape_d, ded.view())?;
            let grad = match model.dictionary {
                Some(_) => EmbeddingModel {
                    continuous: ps,
                    dictionary: Some(pd),
                },
                None => {
                    let mut ps = ps;
                    ps.add_scaled(&pd, 1.0);
                    EmbeddingModel::shared(ps)
                }
            };
            sgd_update(&mut model, &grad, lr);
            wc.scaled_add(-lr, &dwc);
            bc.scaled_add(-lr, &dbc);
            if !model.is_finite() {
                return Err(Error::Numerical("parameters became non-finite".into()));
            }
            total += loss;
            seen += n as usize;
        }
        let steps = plan.len();
        let mean_loss = if steps == 0 { 0.0 } else { total / steps as f64 };
        let accuracy = if seen == 0 { 0.0 } else { correct as f64 / seen as f64 };
        log::info!("epoch {epoch}: loss {mean_loss:.5} acc {accuracy:.3} lr {lr}");
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            lr,
            steps,
            train_accuracy: Some(accuracy),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}
