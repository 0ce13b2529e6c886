//! The two residual adapter heads and logit fusion.
//!
//! The integrator (FI) is a residual linear map `z + W z`; the refiner (FR) is
//! a residual two-layer MLP `z + W2 relu(W1 z + b1) + b2`. Both outputs are
//! re-normalized to the unit sphere before cosine scoring. `W`, `W2` and `b2`
//! start at zero, so a fresh model reproduces the zero-shot head bit for bit.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::embedding_store::{decode_feature_block, encode_feature_block, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::geometry::LogitVector;
use crate::objectives::{cosine_logits, CoMuCoConfig};
use crate::rng::{stream_rng, STREAM_PARAM_INIT};

/// Learnable adapter weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    dim: usize,
    hidden: usize,
    /// `dim x dim`
    pub fi_weight: Vec<f64>,
    /// `hidden x dim`
    pub fr_w1: Vec<f64>,
    /// `hidden`
    pub fr_b1: Vec<f64>,
    /// `dim x hidden`
    pub fr_w2: Vec<f64>,
    /// `dim`
    pub fr_b2: Vec<f64>,
}

impl ExpertParams {
    /// Identity-initialized adapters: `fr_w1` is drawn uniformly from
    /// `[-1/sqrt(dim), 1/sqrt(dim)]`, everything else is zero.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = stream_rng(seed, STREAM_PARAM_INIT);
        p.fr_w1
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
        Ok(p)
    }

    pub fn zeros(dim: usize, hidden: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Shape(format!(
                "adapter dimensions must be positive, got dim={dim} hidden={hidden}"
            )));
        }
        Ok(Self {
            dim,
            hidden,
            fi_weight: vec![0.0; dim * dim],
            fr_w1: vec![0.0; hidden * dim],
            fr_b1: vec![0.0; hidden],
            fr_w2: vec![0.0; dim * hidden],
            fr_b2: vec![0.0; dim],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.hidden).expect("dimensions already validated")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// The five parameter blocks in serialization order.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.fi_weight,
            &self.fr_w1,
            &self.fr_b1,
            &self.fr_w2,
            &self.fr_b2,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.fi_weight,
            &mut self.fr_w1,
            &mut self.fr_b1,
            &mut self.fr_w2,
            &mut self.fr_b2,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view of parameter `k`, counting through the blocks in order.
    pub fn get(&self, mut k: usize) -> f64 {
        for b in self.blocks() {
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut k: usize, v: f64) {
        for b in self.blocks_mut() {
            if k < b.len() {
                b[k] = v;
                return;
            }
            k -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks().into_iter().flat_map(|b| b.iter().copied())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    fn block_shapes(&self) -> [(usize, usize); 5] {
        let (d, h) = (self.dim, self.hidden);
        [(d, d), (h, d), (1, h), (d, h), (1, d)]
    }

    /// Five consecutive CMF1 blocks: `fi_weight` (d x d), `fr_w1` (h x d),
    /// `fr_b1` (1 x h), `fr_w2` (d x h), `fr_b2` (1 x d). Values are stored
    /// as `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (data, (r, c)) in self.blocks().into_iter().zip(self.block_shapes()) {
            encode_feature_block(&EmbeddingMatrix::new(r, c, data.to_vec())?, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut mats = Vec::with_capacity(5);
        let mut at = 0;
        for _ in 0..5 {
            let (m, used) = decode_feature_block(&bytes[at..])?;
            mats.push(m);
            at += used;
        }
        if at != bytes.len() {
            return Err(Error::TrailingData {
                extra: bytes.len() - at,
            });
        }
        let dim = mats[0].rows();
        let hidden = mats[1].rows();
        let p = Self::zeros(dim, hidden)?;
        for (i, (m, (r, c))) in mats.iter().zip(p.block_shapes()).enumerate() {
            if (m.rows(), m.cols()) != (r, c) {
                return Err(Error::Shape(format!(
                    "parameter block {i} is {}x{}, expected {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let mut it = mats.into_iter().map(|m| m.data().to_vec());
        Ok(Self {
            dim,
            hidden,
            fi_weight: it.next().unwrap(),
            fr_w1: it.next().unwrap(),
            fr_b1: it.next().unwrap(),
            fr_w2: it.next().unwrap(),
            fr_b2: it.next().unwrap(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub(crate) fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Residual sum `z + delta` normalized back to the sphere. An all-zero
/// correction returns `z` untouched so zero-initialized experts are exact
/// identities.
fn residual_normalize(z: &[f64], delta: &[f64], term: &str) -> Result<(Vec<f64>, f64)> {
    if delta.iter().all(|&v| v == 0.0) {
        return Ok((z.to_vec(), 1.0));
    }
    let v: Vec<f64> = z.iter().zip(delta).map(|(a, b)| a + b).collect();
    let norm = crate::embedding_store::l2_norm(&v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::numerical(
            term,
            format!("residual output has norm {norm}"),
        ));
    }
    Ok((v.into_iter().map(|x| x / norm).collect(), norm))
}

fn check_input(z: &[f64], p: &ExpertParams) -> Result<()> {
    if z.len() != p.dim {
        return Err(Error::Shape(format!(
            "feature has dimension {}, adapters expect {}",
            z.len(),
            p.dim
        )));
    }
    Ok(())
}

/// Intermediate values of the integrator kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct FiTrace {
    pub out: Vec<f64>,
    /// Norm of the pre-normalization residual sum.
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct FrTrace {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
    pub norm: f64,
}

pub(crate) fn fi_trace(z: &[f64], p: &ExpertParams) -> Result<FiTrace> {
    check_input(z, p)?;
    let mut delta = vec![0.0; p.dim];
    matvec(&p.fi_weight, p.dim, p.dim, z, &mut delta);
    let (out, norm) = residual_normalize(z, &delta, "feature integrator")?;
    Ok(FiTrace { out, norm })
}

pub(crate) fn fr_trace(z: &[f64], p: &ExpertParams) -> Result<FrTrace> {
    check_input(z, p)?;
    let mut pre = vec![0.0; p.hidden];
    matvec(&p.fr_w1, p.hidden, p.dim, z, &mut pre);
    pre.iter_mut().zip(&p.fr_b1).for_each(|(a, b)| *a += b);
    let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let mut delta = vec![0.0; p.dim];
    matvec(&p.fr_w2, p.dim, p.hidden, &hidden, &mut delta);
    delta.iter_mut().zip(&p.fr_b2).for_each(|(a, b)| *a += b);
    let (out, norm) = residual_normalize(z, &delta, "feature refiner")?;
    Ok(FrTrace {
        pre,
        hidden,
        out,
        norm,
    })
}

/// `normalize(z + W z)`.
pub fn fi_forward(z: &[f64], p: &ExpertParams) -> Result<Vec<f64>> {
    Ok(fi_trace(z, p)?.out)
}

/// `normalize(z + W2 relu(W1 z + b1) + b2)`.
pub fn fr_forward(z: &[f64], p: &ExpertParams) -> Result<Vec<f64>> {
    Ok(fr_trace(z, p)?.out)
}

pub(crate) fn check_fusion_weights(alpha: f64, beta: f64) -> Result<()> {
    // Allow a rounding-level excess so e.g. 0.7 + 0.3 is accepted.
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0 + 1e-12) {
        return Err(Error::Parameter(format!(
            "fusion weights need alpha, beta >= 0 and alpha + beta <= 1, got {alpha}, {beta}"
        )));
    }
    Ok(())
}

/// `alpha * s_fr + beta * s_fi + (1 - alpha - beta) * s_zs`, evaluated as
/// `s_zs + alpha (s_fr - s_zs) + beta (s_fi - s_zs)` so that coinciding
/// inputs reproduce `s_zs` exactly.
pub fn fuse_logits(
    s_fr: &LogitVector,
    s_fi: &LogitVector,
    s_zs: &LogitVector,
    alpha: f64,
    beta: f64,
) -> Result<LogitVector> {
    check_fusion_weights(alpha, beta)?;
    let c = s_zs.len();
    if s_fr.len() != c || s_fi.len() != c {
        return Err(Error::Shape(format!(
            "logit lengths {}, {}, {}",
            s_fr.len(),
            s_fi.len(),
            c
        )));
    }
    LogitVector::new(fuse_raw(
        s_fr.as_slice(),
        s_fi.as_slice(),
        s_zs.as_slice(),
        alpha,
        beta,
    ))
}

pub(crate) fn fuse_raw(
    s_fr: &[f64],
    s_fi: &[f64],
    s_zs: &[f64],
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    s_zs.iter()
        .zip(s_fr.iter().zip(s_fi))
        .map(|(&zs, (&fr, &fi))| zs + alpha * (fr - zs) + beta * (fi - zs))
        .collect()
}

/// Everything one forward pass produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    pub z_fi: Vec<f64>,
    pub z_fr: Vec<f64>,
    pub z_zs: Vec<f64>,
    pub s_fi: LogitVector,
    pub s_fr: LogitVector,
    pub s_zs: LogitVector,
    pub s_fused: LogitVector,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn forward(
    z: &[f64],
    p: &ExpertParams,
    text: &EmbeddingMatrix,
    cfg: &CoMuCoConfig,
) -> Result<ExpertOutputs> {
    let z_fi = fi_forward(z, p)?;
    let z_fr = fr_forward(z, p)?;
    let s_zs = cosine_logits(z, text)?;
    let s_fi = cosine_logits(&z_fi, text)?;
    let s_fr = cosine_logits(&z_fr, text)?;
    let s_fused = fuse_logits(&s_fr, &s_fi, &s_zs, cfg.alpha, cfg.beta)?;
    Ok(ExpertOutputs {
        z_fi,
        z_fr,
        z_zs: z.to_vec(),
        s_fi,
        s_fr,
        s_zs,
        s_fused,
    })
}

/// Predicted class (argmax of the fused logits) and the full forward record.
pub fn predict(
    z: &[f64],
    p: &ExpertParams,
    text: &EmbeddingMatrix,
    cfg: &CoMuCoConfig,
) -> Result<(usize, ExpertOutputs)> {
    let out = forward(z, p, text, cfg)?;
    Ok((argmax(out.s_fused.as_slice()), out))
}
