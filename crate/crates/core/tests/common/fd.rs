//! Finite-difference checks of the contrastive gradient against a plain-loop
//! forward pass that shares no code with the model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signspot::mil_nce::AnchorLossInput;
use signspot::model::{EmbeddingModel, MlpParams};
use signspot::synth::oracle::oracle_loss;
use signspot::trainer::{contrastive_loss_and_grad, RowBag};

pub const STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients at round-off
/// level are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

fn leaky(t: f64) -> f64 {
    if t >= 0.0 {
        t
    } else {
        0.2 * t
    }
}

/// Embedding of one input row.
pub fn embed(p: &MlpParams, x: &[f64], signs: &mut Vec<bool>) -> Vec<f64> {
    let d = x.len();
    let h = p.b2.len();
    let o = p.b3.len();
    let mut h1 = vec![0.0; d];
    for i in 0..d {
        let mut z = p.b1[i] + x[i];
        for j in 0..d {
            z += p.w1[[i, j]] * x[j];
        }
        signs.push(z >= 0.0);
        h1[i] = leaky(z);
    }
    let mut h2 = vec![0.0; h];
    for i in 0..h {
        let mut z = p.b2[i];
        for j in 0..d {
            z += p.w2[[i, j]] * h1[j];
        }
        signs.push(z >= 0.0);
        h2[i] = leaky(z);
    }
    (0..o)
        .map(|i| p.b3[i] + (0..h).map(|j| p.w3[[i, j]] * h2[j]).sum::<f64>())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Loss of `model` on the bags plus the activation sign pattern.
pub fn reference_loss(
    model: &EmbeddingModel,
    xs: &Array2<f64>,
    xd: &Array2<f64>,
    bags: &[RowBag],
    tau: f64,
) -> (f64, Vec<bool>) {
    let mut signs = Vec::new();
    let dict_head = model.dictionary.as_ref().unwrap_or(&model.continuous);
    let es: Vec<Vec<f64>> = xs.rows().into_iter().map(|r| embed(&model.continuous, r.as_slice().unwrap(), &mut signs)).collect();
    let ed: Vec<Vec<f64>> = xd.rows().into_iter().map(|r| embed(dict_head, r.as_slice().unwrap(), &mut signs)).collect();
    let sim = |&(s, d): &(usize, usize)| cosine(&es[s], &ed[d]);
    let inputs: Vec<AnchorLossInput> = bags
        .iter()
        .map(|b| AnchorLossInput::new(b.positives.iter().map(sim).collect(), b.negatives.iter().map(sim).collect(), tau))
        .collect();
    (oracle_loss(&inputs), signs)
}

pub struct Problem {
    pub model: EmbeddingModel,
    pub xs: Array2<f64>,
    pub xd: Array2<f64>,
    pub bags: Vec<RowBag>,
    pub tau: f64,
}

pub fn random_problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(1..=32);
    let hidden = rng.random_range(1..=16);
    let out = rng.random_range(2..=8);
    let shared = rng.random_bool(0.5);
    let mut model = EmbeddingModel::init_with_dims(rng.random(), d_in, hidden, out, shared).unwrap();
    // zero biases with tiny widths make every embedding collinear, where the
    // cosine sits at an extremum and differences carry large O(h^2) error
    for head in std::iter::once(&mut model.continuous).chain(model.dictionary.as_mut()) {
        for b in [&mut head.b1, &mut head.b2, &mut head.b3] {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    let ns = rng.random_range(1..=5);
    let nd = rng.random_range(1..=5);
    let xs = Array2::from_shape_simple_fn((ns, d_in), || rng.random_range(-1.0..1.0));
    let xd = Array2::from_shape_simple_fn((nd, d_in), || rng.random_range(-1.0..1.0));
    let tau = [0.04, 0.07, 0.1, 1.0][rng.random_range(0..4)];
    let pair = |rng: &mut ChaCha8Rng| (rng.random_range(0..ns), rng.random_range(0..nd));
    let bags = (0..rng.random_range(1..=4))
        .map(|_| {
            let positives = (0..rng.random_range(1..=3)).map(|_| pair(&mut rng)).collect();
            let negatives = (0..rng.random_range(0..=5)).map(|_| pair(&mut rng)).collect();
            RowBag { positives, negatives }
        })
        .collect();
    Problem { model, xs, xd, bags, tau }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flips an activation sign.
    pub skipped: usize,
}

fn head_mut(m: &mut EmbeddingModel, head: usize) -> &mut MlpParams {
    if head == 0 {
        &mut m.continuous
    } else {
        m.dictionary.as_mut().unwrap()
    }
}

/// Compares every analytic parameter gradient with a five-point central
/// difference at step `STEP`.
pub fn check(p: &Problem) -> FdReport {
    let (_, grad) = contrastive_loss_and_grad(&p.model, &p.xs, &p.xd, &p.bags, p.tau).unwrap();
    let (_, base_signs) = reference_loss(&p.model, &p.xs, &p.xd, &p.bags, p.tau);
    let mut report = FdReport::default();
    let heads = if p.model.dictionary.is_some() { 2 } else { 1 };
    for head in 0..heads {
        let g = if head == 0 { &grad.continuous } else { grad.dictionary.as_ref().unwrap() };
        let analytic = g.tensors();
        for t in 0..6 {
            for i in 0..analytic[t].len() {
                let eval = |delta: f64| {
                    let mut m = p.model.clone();
                    head_mut(&mut m, head).tensors_mut()[t][i] += delta;
                    reference_loss(&m, &p.xs, &p.xd, &p.bags, p.tau)
                };
                // five-point central stencil
                let evals: Vec<(f64, Vec<bool>)> = [2.0, 1.0, -1.0, -2.0].iter().map(|k| eval(k * STEP)).collect();
                if evals.iter().any(|(_, s)| *s != base_signs) {
                    report.skipped += 1;
                    continue;
                }
                let f = |k: usize| evals[k].0;
                let numeric = (-f(0) + 8.0 * f(1) - 8.0 * f(2) + f(3)) / (12.0 * STEP);
                let a = analytic[t][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                report.max_rel = report.max_rel.max(rel);
                report.checked += 1;
            }
        }
    }
    report
}
