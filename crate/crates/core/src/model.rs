//! Residual MLP projection head, cosine similarity and MLPW checkpoints.
//!
//! Forward map for one input row `x`:
//!
//! ```text
//! h1 = lrelu(W1 x + b1 + x)
//! h2 = lrelu(W2 h1 + b2)
//! e  = W3 h2 + b3
//! ```
//!
//! with `lrelu(t) = t` for `t >= 0`, `0.2 t` otherwise, and `lrelu'(0) = 1`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::FeatureSequence;
use crate::error::{Error, FormatError, Result};

pub const DEFAULT_INPUT_DIM: usize = 1024;
pub const HIDDEN_DIM: usize = 512;
pub const EMBED_DIM: usize = 256;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-12;

pub const MLPW_MAGIC: [u8; 4] = *b"MLPW";
pub const MLPW_VERSION: u32 = 1;

#[inline]
pub fn lrelu(t: f64) -> f64 {
    if t >= 0.0 {
        t
    } else {
        LEAKY_SLOPE * t
    }
}

#[inline]
pub fn lrelu_grad(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Weights of one three-layer head. `w1` is square (`d_in x d_in`) because
/// of the residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Activations cached by a forward pass; rows correspond to input rows.
#[derive(Debug, Clone)]
pub struct Tape {
    x: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn standard(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

impl MlpParams {
    /// He-uniform weights, zero biases, default hidden/output sizes.
    pub fn init(seed: u64, d_in: usize) -> Result<Self> {
        Self::init_with_dims(seed, d_in, HIDDEN_DIM, EMBED_DIM)
    }

    pub fn init_with_dims(seed: u64, d_in: usize, hidden: usize, out: usize) -> Result<Self> {
        if d_in == 0 || hidden == 0 || out == 0 {
            return Err(Error::InvalidInput(format!(
                "MLP dimensions must be positive, got {d_in}/{hidden}/{out}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform_matrix(&mut rng, d_in, d_in);
        let w2 = uniform_matrix(&mut rng, hidden, d_in);
        let w3 = uniform_matrix(&mut rng, out, hidden);
        Ok(Self {
            w1,
            b1: Array1::zeros(d_in),
            w2,
            b2: Array1::zeros(hidden),
            w3,
            b3: Array1::zeros(out),
        })
    }

    pub fn zeros(d_in: usize, hidden: usize, out: usize) -> Self {
        Self {
            w1: Array2::zeros((d_in, d_in)),
            b1: Array1::zeros(d_in),
            w2: Array2::zeros((hidden, d_in)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((out, hidden)),
            b3: Array1::zeros(out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w3.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// All six tensors flattened row-major, in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Batched forward pass; each row of `x` is one input.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let x = x.to_owned();
        let mut z1 = x.dot(&self.w1.t());
        z1 += &self.b1;
        z1 += &x;
        let h1 = z1.mapv(lrelu);
        let mut z2 = h1.dot(&self.w2.t());
        z2 += &self.b2;
        let h2 = z2.mapv(lrelu);
        let mut e = h2.dot(&self.w3.t());
        e += &self.b3;
        (e, Tape { x, z1, h1, z2, h2 })
    }

    /// Embeds rows without keeping a tape.
    pub fn embed(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_batch(x).0
    }

    /// Batched backward pass. Parameter gradients are summed over rows.
    pub fn backward_batch(&self, tape: &Tape, grad_e: ArrayView2<f64>) -> Result<(MlpParams, Array2<f64>)> {
        if grad_e.nrows() != tape.rows() || grad_e.ncols() != self.output_dim() {
            return Err(Error::InvalidInput(format!(
                "gradient shape {:?} does not match tape ({} rows, {} outputs)",
                grad_e.shape(),
                tape.rows(),
                self.output_dim()
            )));
        }
        let w3 = standard(grad_e.t().dot(&tape.h2));
        let b3 = grad_e.sum_axis(Axis(0));
        let mut dz2 = grad_e.dot(&self.w3);
        Zip::from(&mut dz2)
            .and(&tape.z2)
            .for_each(|g, &z| *g *= lrelu_grad(z));
        let w2 = standard(dz2.t().dot(&tape.h1));
        let b2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&self.w2);
        Zip::from(&mut dz1)
            .and(&tape.z1)
            .for_each(|g, &z| *g *= lrelu_grad(z));
        let w1 = standard(dz1.t().dot(&tape.x));
        let b1 = dz1.sum_axis(Axis(0));
        let mut grad_x = dz1.dot(&self.w1);
        grad_x += &dz1;
        Ok((
            MlpParams {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            },
            grad_x,
        ))
    }
}

/// Single-input forward pass.
pub fn mlp_forward(params: &MlpParams, x: ArrayView1<f64>) -> Result<(Array1<f64>, Tape)> {
    if x.len() != params.input_dim() {
        return Err(Error::InvalidInput(format!(
            "input has {} dims, MLP expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite MLP input".into()));
    }
    let row = x.insert_axis(Axis(0));
    let (e, tape) = params.forward_batch(row);
    Ok((e.row(0).to_owned(), tape))
}

/// Single-input backward pass, returns `(param_grads, grad_x)`.
pub fn mlp_backward(
    params: &MlpParams,
    tape: &Tape,
    grad_e: ArrayView1<f64>,
) -> Result<(MlpParams, Array1<f64>)> {
    let (grads, gx) = params.backward_batch(tape, grad_e.insert_axis(Axis(0)))?;
    Ok((grads, gx.row(0).to_owned()))
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > NORM_EPS && nb > NORM_EPS) {
        return Err(Error::Numerical(format!(
            "degenerate embedding: norms {na:e} and {nb:e}"
        )));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-normalises `m`; fails on any row with norm <= 1e-12.
pub fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > NORM_EPS)) {
        return Err(Error::Numerical(format!(
            "degenerate embedding at row {i} (norm {:e})",
            norms[i]
        )));
    }
    let unit = m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Mean of clip-level trunk vectors for one dictionary entry.
pub fn mean_clip_feature(clips: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidInput("dictionary entry has no clips".into()))?;
    let mut acc = Array1::<f64>::zeros(first.len());
    for c in clips {
        if c.len() != acc.len() {
            return Err(Error::InvalidInput("clip vectors differ in length".into()));
        }
        acc += c;
    }
    acc /= clips.len() as f64;
    Ok(acc)
}

/// Mean over the rows of a dictionary feature file (one row per sampled clip).
pub fn dictionary_feature(clips: &FeatureSequence) -> Result<Array1<f64>> {
    let data = clips.to_f64();
    let rows: Vec<ArrayView1<f64>> = data.rows().into_iter().collect();
    mean_clip_feature(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Continuous,
    Dictionary,
}

/// The embedding function: one shared head, or one head per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub continuous: MlpParams,
    pub dictionary: Option<MlpParams>,
}

impl EmbeddingModel {
    pub fn shared(params: MlpParams) -> Self {
        Self {
            continuous: params,
            dictionary: None,
        }
    }

    pub fn init(seed: u64, d_in: usize, share_domains: bool) -> Result<Self> {
        Self::init_with_dims(seed, d_in, HIDDEN_DIM, EMBED_DIM, share_domains)
    }

    pub fn init_with_dims(
        seed: u64,
        d_in: usize,
        hidden: usize,
        out: usize,
        share_domains: bool,
    ) -> Result<Self> {
        let continuous = MlpParams::init_with_dims(seed, d_in, hidden, out)?;
        let dictionary = if share_domains {
            None
        } else {
            Some(MlpParams::init_with_dims(
                seed ^ 0x9e37_79b9_7f4a_7c15,
                d_in,
                hidden,
                out,
            )?)
        };
        Ok(Self {
            continuous,
            dictionary,
        })
    }

    pub fn share_domains(&self) -> bool {
        self.dictionary.is_none()
    }

    pub fn head(&self, domain: Domain) -> &MlpParams {
        match (domain, &self.dictionary) {
            (Domain::Dictionary, Some(d)) => d,
            _ => &self.continuous,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.continuous.input_dim()
    }

    pub fn embed(&self, domain: Domain, x: ArrayView2<f64>) -> Array2<f64> {
        self.head(domain).embed(x)
    }

    pub fn is_finite(&self) -> bool {
        self.continuous.is_finite() && self.dictionary.as_ref().is_none_or(MlpParams::is_finite)
    }

    /// Rounds every weight to the nearest f32, the precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        let heads = std::iter::once(&mut self.continuous).chain(self.dictionary.as_mut());
        for head in heads {
            for t in head.tensors_mut() {
                for v in t.iter_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_head(out: &mut Vec<u8>, p: &MlpParams) {
    let shapes = [
        (p.w1.nrows(), p.w1.ncols()),
        (p.b1.len(), 1),
        (p.w2.nrows(), p.w2.ncols()),
        (p.b2.len(), 1),
        (p.w3.nrows(), p.w3.ncols()),
        (p.b3.len(), 1),
    ];
    for ((rows, cols), data) in shapes.into_iter().zip(p.tensors()) {
        push_u32(out, rows as u32);
        push_u32(out, cols as u32);
        for v in data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
}

/// MLPW layout: magic, u32 version, u32 d_in, then `W1,b1,W2,b2,W3,b3`, each
/// as u32 rows, u32 cols and f32 values. Biases are stored as `n x 1`.
/// Domain-specific models append a second block for the dictionary head.
pub fn encode_checkpoint(model: &EmbeddingModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MLPW_MAGIC);
    push_u32(&mut out, MLPW_VERSION);
    push_u32(&mut out, model.input_dim() as u32);
    encode_head(&mut out, &model.continuous);
    if let Some(d) = &model.dictionary {
        encode_head(&mut out, d);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(u32, u32, Vec<f64>), FormatError> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        if rows == 0 || cols == 0 {
            return Err(FormatError::Shape { rows, cols });
        }
        let n = rows as usize * cols as usize;
        let raw = self.take(n * 4)?;
        let mut vals = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite(i));
            }
            vals.push(v as f64);
        }
        Ok((rows, cols, vals))
    }

    fn head(&mut self, d_in: u32) -> Result<MlpParams, FormatError> {
        let mut t = Vec::with_capacity(6);
        for _ in 0..6 {
            t.push(self.tensor()?);
        }
        let (r1, c1, _) = t[0];
        let (r2, c2, _) = t[2];
        let (r3, c3, _) = t[4];
        let shape_ok = r1 == d_in
            && c1 == d_in
            && t[1].0 == r1
            && t[1].1 == 1
            && c2 == d_in
            && t[3].0 == r2
            && t[3].1 == 1
            && c3 == r2
            && t[5].0 == r3
            && t[5].1 == 1;
        if !shape_ok {
            return Err(FormatError::Shape { rows: r1, cols: c1 });
        }
        let mut it = t.into_iter().map(|(_, _, v)| v);
        let mut next = || it.next().unwrap();
        let (d, h, o) = (d_in as usize, r2 as usize, r3 as usize);
        Ok(MlpParams {
            w1: Array2::from_shape_vec((d, d), next()).unwrap(),
            b1: Array1::from(next()),
            w2: Array2::from_shape_vec((h, d), next()).unwrap(),
            b2: Array1::from(next()),
            w3: Array2::from_shape_vec((o, h), next()).unwrap(),
            b3: Array1::from(next()),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EmbeddingModel, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MLPW_MAGIC {
        return Err(FormatError::BadMagic {
            expected: MLPW_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != MLPW_VERSION {
        return Err(FormatError::Version {
            expected: MLPW_VERSION,
            found: version,
        });
    }
    let d_in = r.u32()?;
    let continuous = r.head(d_in)?;
    let dictionary = if r.pos < bytes.len() {
        Some(r.head(d_in)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing((bytes.len() - r.pos) as u64));
    }
    Ok(EmbeddingModel {
        continuous,
        dictionary,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &EmbeddingModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Fills `out[i, j] = cos(a_i, b_j)` from pre-normalised rows.
pub fn cosine_matrix(a_unit: &Array2<f64>, b_unit: &Array2<f64>) -> Array2<f64> {
    let mut s = a_unit.dot(&b_unit.t());
    s.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    s
}
