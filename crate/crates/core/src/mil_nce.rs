//! Multiple-instance noise-contrastive loss over anchored pair bags.
//!
//! For an anchor with positive similarities `P` and negative similarities `N`
//! at temperature `tau`:
//!
//! ```text
//! loss = -log( sum_P exp(s/tau) / (sum_P exp(s/tau) + sum_N exp(s/tau)) )
//!      = lse(P ∪ N) - lse(P)
//! ```
//!
//! and the batch loss is the uniform mean over anchors. With a single
//! positive per anchor this is ordinary InfoNCE.

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLossInput {
    pub pos_sims: Vec<f64>,
    pub neg_sims: Vec<f64>,
    pub tau: f64,
}

impl AnchorLossInput {
    pub fn new(pos_sims: Vec<f64>, neg_sims: Vec<f64>, tau: f64) -> Self {
        Self {
            pos_sims,
            neg_sims,
            tau,
        }
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidInput(format!(
                "anchor {idx}: temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.pos_sims.is_empty() {
            return Err(Error::InvalidInput(format!("anchor {idx}: empty positive bag")));
        }
        if let Some(s) = self
            .pos_sims
            .iter()
            .chain(&self.neg_sims)
            .find(|s| !(-1.0..=1.0).contains(*s))
        {
            return Err(Error::InvalidInput(format!(
                "anchor {idx}: similarity {s} outside [-1, 1]"
            )));
        }
        Ok(())
    }
}

/// Gradient of the batch loss with respect to each similarity of one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct AnchorTerms {
    loss: f64,
    lse_all: f64,
    lse_pos: f64,
}

fn anchor_terms(a: &AnchorLossInput) -> AnchorTerms {
    let inv = 1.0 / a.tau;
    let pos = a.pos_sims.iter().map(|s| s * inv);
    let lse_pos = log_sum_exp(pos.clone());
    if a.neg_sims.is_empty() {
        return AnchorTerms {
            loss: 0.0,
            lse_all: lse_pos,
            lse_pos,
        };
    }
    let all = pos.chain(a.neg_sims.iter().map(|s| s * inv));
    let lse_all = log_sum_exp(all);
    AnchorTerms {
        loss: (lse_all - lse_pos).max(0.0),
        lse_all,
        lse_pos,
    }
}

fn check(inputs: &[AnchorLossInput]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no anchors".into()));
    }
    inputs.iter().enumerate().try_for_each(|(i, a)| a.validate(i))
}

pub fn mil_nce_loss(inputs: &[AnchorLossInput]) -> Result<f64> {
    check(inputs)?;
    let total: f64 = inputs.iter().map(|a| anchor_terms(a).loss).sum();
    Ok(total / inputs.len() as f64)
}

pub fn mil_nce_grad(inputs: &[AnchorLossInput]) -> Result<Vec<AnchorGrad>> {
    Ok(mil_nce_loss_and_grad(inputs)?.1)
}

/// Loss and per-similarity gradients in one pass.
pub fn mil_nce_loss_and_grad(inputs: &[AnchorLossInput]) -> Result<(f64, Vec<AnchorGrad>)> {
    check(inputs)?;
    let scale = 1.0 / inputs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(inputs.len());
    for a in inputs {
        let t = anchor_terms(a);
        total += t.loss;
        if a.neg_sims.is_empty() {
            grads.push(AnchorGrad {
                pos: vec![0.0; a.pos_sims.len()],
                neg: Vec::new(),
            });
            continue;
        }
        let k = scale / a.tau;
        let pos = a
            .pos_sims
            .iter()
            .map(|s| {
                let z = s / a.tau;
                k * ((z - t.lse_all).exp() - (z - t.lse_pos).exp())
            })
            .collect();
        let neg = a
            .neg_sims
            .iter()
            .map(|s| k * (s / a.tau - t.lse_all).exp())
            .collect();
        grads.push(AnchorGrad { pos, neg });
    }
    Ok((total * scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn anchor(pos: &[f64], neg: &[f64], tau: f64) -> AnchorLossInput {
        AnchorLossInput::new(pos.to_vec(), neg.to_vec(), tau)
    }

    #[test]
    fn equal_logits_give_ln2() {
        let l = mil_nce_loss(&[anchor(&[0.5], &[0.5], 1.0)]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_positive_at_default_tau() {
        // log(1 + e^{-1/0.07}), evaluated with ln_1p for reference
        let want = (-1.0f64 / 0.07).exp().ln_1p();
        let l = mil_nce_loss(&[anchor(&[1.0], &[0.0], 0.07)]).unwrap();
        assert!((l - want).abs() < 1e-15, "{l} vs {want}");
        assert!((l - 6.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn mean_over_anchors() {
        let l = mil_nce_loss(&[anchor(&[0.5], &[0.5], 1.0), anchor(&[0.2], &[], 1.0)]).unwrap();
        assert!((l - 0.346_573_590_279_972_6).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(mil_nce_loss(&[anchor(&[], &[0.1], 1.0)]).is_err());
        assert!(mil_nce_loss(&[anchor(&[0.1], &[0.1], 0.0)]).is_err());
        assert!(mil_nce_loss(&[anchor(&[0.1], &[0.1], -1.0)]).is_err());
        assert!(mil_nce_loss(&[anchor(&[1.5], &[0.1], 1.0)]).is_err());
        assert!(mil_nce_loss(&[]).is_err());
    }

    #[test]
    fn symmetric_gradients() {
        let g = mil_nce_grad(&[anchor(&[0.3, 0.3], &[0.3, 0.3], 0.5)]).unwrap();
        let g = &g[0];
        for (p, n) in g.pos.iter().zip(&g.neg) {
            assert!(*p < 0.0 && *n > 0.0);
            assert!((p.abs() - n.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_negatives_zero_gradient() {
        let (l, g) = mil_nce_loss_and_grad(&[anchor(&[0.3, -0.2], &[], 0.07)]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].pos.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let l = mil_nce_loss(&[
            anchor(&[1.0], &[-1.0], 1e-4),
            anchor(&[-1.0], &[1.0], 1e-4),
            anchor(&[-1.0, -1.0], &[1.0, 1.0, -1.0], 1e-4),
        ])
        .unwrap();
        assert!(l.is_finite());
        let (_, g) = mil_nce_loss_and_grad(&[anchor(&[-1.0], &[1.0], 1e-4)]).unwrap();
        assert!(g[0].pos.iter().chain(&g[0].neg).all(|v| v.is_finite()));
    }

    fn sims(max: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..=1.0, 1..=max)
    }

    proptest! {
        #[test]
        fn permutation_invariance(pos in sims(5), neg in sims(7), tau in 0.05f64..1.0) {
            let a = mil_nce_loss(&[anchor(&pos, &neg, tau)]).unwrap();
            let mut p2 = pos.clone();
            p2.reverse();
            let mut n2 = neg.clone();
            n2.rotate_left(1);
            let b = mil_nce_loss(&[anchor(&p2, &n2, tau)]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let two = mil_nce_loss(&[anchor(&pos, &neg, tau), anchor(&neg, &pos, tau)]).unwrap();
            let rev = mil_nce_loss(&[anchor(&neg, &pos, tau), anchor(&pos, &neg, tau)]).unwrap();
            prop_assert!((two - rev).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_similarities(
            pos in sims(4),
            neg in sims(4),
            tau in 0.1f64..1.0,
            bump in 0.01f64..0.2,
        ) {
            let base = mil_nce_loss(&[anchor(&pos, &neg, tau)]).unwrap();
            let mut p = pos.clone();
            if p[0] + bump <= 1.0 {
                p[0] += bump;
                prop_assert!(mil_nce_loss(&[anchor(&p, &neg, tau)]).unwrap() < base);
            }
            let mut n = neg.clone();
            if n[0] + bump <= 1.0 {
                n[0] += bump;
                prop_assert!(mil_nce_loss(&[anchor(&pos, &n, tau)]).unwrap() > base);
            }
        }

        #[test]
        fn single_positive_is_infonce(p in -1.0f64..=1.0, neg in sims(6), tau in 0.05f64..1.0) {
            let l = mil_nce_loss(&[anchor(&[p], &neg, tau)]).unwrap();
            // -log softmax of the positive logit
            let denom: f64 = std::iter::once(p).chain(neg.iter().copied())
                .map(|s| (s / tau).exp()).sum();
            let want = -((p / tau).exp() / denom).ln();
            prop_assert!((l - want).abs() < 1e-9 * want.max(1.0));
        }

        #[test]
        fn gradient_matches_finite_differences(
            pos in sims(5),
            neg in sims(7),
            tau_idx in 0usize..3,
        ) {
            let tau = [0.07, 0.5, 1.0][tau_idx];
            let inputs = vec![anchor(&pos, &neg, tau), anchor(&neg, &pos, tau)];
            let (_, g) = mil_nce_loss_and_grad(&inputs).unwrap();
            let h = 1e-5;
            let eval = |a: usize, is_pos: bool, k: usize, d: f64| {
                let mut x = inputs.clone();
                let v = if is_pos { &mut x[a].pos_sims[k] } else { &mut x[a].neg_sims[k] };
                *v += d;
                // finite differences may step just outside [-1, 1]
                let anchors: Vec<AnchorTerms> = x.iter().map(anchor_terms).collect();
                anchors.iter().map(|t| t.loss).sum::<f64>() / x.len() as f64
            };
            for a in 0..2 {
                for (is_pos, grads) in [(true, &g[a].pos), (false, &g[a].neg)] {
                    for (k, an) in grads.iter().enumerate() {
                        let fd = (eval(a, is_pos, k, h) - eval(a, is_pos, k, -h)) / (2.0 * h);
                        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                        prop_assert!(err < 1e-6, "anchor {} pos {} k {}: {} vs {}", a, is_pos, k, an, fd);
                    }
                }
            }
        }
    }
}
