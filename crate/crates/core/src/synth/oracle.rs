//! Slow, literal reference implementations. Only tests should call these.

use std::collections::{BTreeMap, BTreeSet};

use crate::bags::{Anchor, AnchorKind, Batch, BagFramework, Pair, SegmentKind};
use crate::corpus::Word;
use crate::mil_nce::AnchorLossInput;

/// Anchor -> (positive pairs, negative pairs).
pub type OracleBags = BTreeMap<Anchor, (BTreeSet<Pair>, BTreeSet<Pair>)>;

/// Enumerates every (segment, dictionary) pair of the batch and files it
/// under each anchor by testing the set-builder conditions one at a time.
pub fn oracle_bags(batch: &Batch, framework: BagFramework) -> OracleBags {
    let read = framework == BagFramework::WatchReadLookup;
    let n_seg = batch.segments.len();
    let n_dict = batch.dict.len();
    let word_of = |d: usize| -> &Word { &batch.dict[d].word };
    let is_fg = |s: usize| batch.segments[s].kind == SegmentKind::Foreground;
    let owner = |s: usize| &batch.items[batch.segments[s].item];

    let mut out = OracleBags::new();
    let mut put = |anchor: Anchor, p: BTreeSet<Pair>, n: BTreeSet<Pair>| {
        if !p.is_empty() {
            out.insert(anchor, (p, n));
        }
    };

    for (i, item) in batch.items.iter().enumerate() {
        let fg = item.fg;
        let mut seg_p = BTreeSet::new();
        let mut seg_n = BTreeSet::new();
        let mut dict_n = BTreeSet::new();
        for s in 0..n_seg {
            for d in 0..n_dict {
                let w = word_of(d);
                if s == fg && *w == item.fg_word {
                    seg_p.insert((s, d));
                }
                if s == fg && *w != item.fg_word {
                    let labelled_elsewhere = batch.items.iter().any(|o| o.fg_word == *w);
                    if read || labelled_elsewhere {
                        seg_n.insert((s, d));
                    }
                }
                if *w == item.fg_word {
                    let o = owner(s);
                    if is_fg(s) && o.fg_word != item.fg_word {
                        dict_n.insert((s, d));
                    }
                    if read && !is_fg(s) && o.fg_word == item.fg_word {
                        dict_n.insert((s, d));
                    }
                }
            }
        }
        let anchor = |kind, member| Anchor { kind, item: i, member };
        put(anchor(AnchorKind::Seg, 0), seg_p.clone(), seg_n);
        put(anchor(AnchorKind::Dict, 0), seg_p, dict_n);

        if !read {
            continue;
        }
        let candidates: BTreeSet<&Word> = item
            .subtitle_words
            .iter()
            .filter(|w| **w != item.fg_word)
            .collect();
        for (m, &s) in item.bg.iter().enumerate() {
            let mut p = BTreeSet::new();
            let mut n = BTreeSet::new();
            for d in 0..n_dict {
                if item.bg_words.contains(word_of(d)) {
                    p.insert((s, d));
                }
                if !candidates.contains(word_of(d)) {
                    n.insert((s, d));
                }
            }
            put(anchor(AnchorKind::SegBack, m), p, n);
        }
        for (m, w) in item.bg_words.iter().enumerate() {
            let mut p = BTreeSet::new();
            let mut n = BTreeSet::new();
            for d in (0..n_dict).filter(|&d| word_of(d) == w) {
                for s in 0..n_seg {
                    let o = owner(s);
                    if !is_fg(s) && batch.segments[s].item == i {
                        p.insert((s, d));
                    }
                    if is_fg(s) && o.fg_word != *w {
                        n.insert((s, d));
                    }
                    if !is_fg(s) && !o.subtitle_words.contains(w) {
                        n.insert((s, d));
                    }
                }
            }
            put(anchor(AnchorKind::DictBack, m), p, n);
        }
    }
    out
}

/// `m * 2^e`, wide enough that `exp(1e4)` does not overflow.
#[derive(Debug, Clone, Copy)]
struct Wide {
    m: f64,
    e: i64,
}

impl Wide {
    const ZERO: Wide = Wide { m: 0.0, e: 0 };

    fn exp(z: f64) -> Wide {
        let t = z * std::f64::consts::LOG2_E;
        let e = t.floor();
        // split off the integer part before exponentiating the remainder
        let frac = z - e * std::f64::consts::LN_2;
        Wide {
            m: frac.exp(),
            e: e as i64,
        }
    }

    fn add(self, o: Wide) -> Wide {
        if self.m == 0.0 {
            return o;
        }
        if o.m == 0.0 {
            return self;
        }
        let (big, small) = if self.e >= o.e { (self, o) } else { (o, self) };
        let gap = big.e - small.e;
        let m = if gap > 1100 {
            big.m
        } else {
            big.m + small.m * 2f64.powi(-(gap as i32))
        };
        Wide { m, e: big.e }
    }

    /// `ln(1 + self / o)`.
    fn ln_1p_ratio(self, o: Wide) -> f64 {
        let m = self.m / o.m;
        let e = self.e - o.e;
        if e > 60 {
            // 1 + r == r to double precision
            m.ln() + e as f64 * std::f64::consts::LN_2
        } else if e < -1100 {
            0.0
        } else {
            (m * 2f64.powi(e as i32)).ln_1p()
        }
    }
}

/// Mean over anchors of `log(1 + sum_N e^{s/tau} / sum_P e^{s/tau})`, with
/// each exponential kept as a separate mantissa and binary exponent.
pub fn oracle_loss(inputs: &[AnchorLossInput]) -> f64 {
    let mut total = 0.0;
    for a in inputs {
        let mut pos = Wide::ZERO;
        for s in &a.pos_sims {
            pos = pos.add(Wide::exp(s / a.tau));
        }
        let mut neg = Wide::ZERO;
        for s in &a.neg_sims {
            neg = neg.add(Wide::exp(s / a.tau));
        }
        if a.neg_sims.is_empty() {
            continue;
        }
        total += neg.ln_1p_ratio(pos);
    }
    total / inputs.len() as f64
}

/// Average precision of a ranked relevance list: the mean of precision at
/// each relevant position. Zero when nothing is relevant.
pub fn oracle_ap(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
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
