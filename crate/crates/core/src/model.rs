//! The overlapping encoder/decoder architecture.
//!
//! Embedding columns are laid out as `[adjacency-only | shared | feature-only]`
//! with widths `(f_a, f_ax, f_x)`. The encoder emits `f_a + 2·f_ax + f_x`
//! columns per parameter set, and the two shared blocks are averaged so the
//! trainable-parameter count does not depend on `f_ax` once `f_a + f_ax` and
//! `f_x + f_ax` are fixed.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DimensionSplit {
    pub f_a: usize,
    pub f_ax: usize,
    pub f_x: usize,
}

impl DimensionSplit {
    pub fn new(f_a: usize, f_ax: usize, f_x: usize) -> Result<Self> {
        let split = DimensionSplit { f_a, f_ax, f_x };
        if split.adjacency_width() == 0 || split.feature_width() == 0 {
            return Err(Error::Config(format!(
                "both decoders need at least one embedding dimension (got {split})"
            )));
        }
        Ok(split)
    }

    /// Overlap model with `f_max / 2` dimensions per task, `f_ax` of them shared.
    pub fn overlapping(f_max: usize, f_ax: usize) -> Result<Self> {
        if f_max % 2 != 0 || f_ax > f_max / 2 {
            return Err(Error::Config(format!(
                "overlap model needs even f_max and f_ax <= f_max/2 (got f_max={f_max}, f_ax={f_ax})"
            )));
        }
        let per_task = f_max / 2;
        Self::new(per_task - f_ax, f_ax, per_task - f_ax)
    }

    /// Non-overlapping reference model of total width `f`.
    pub fn reference(f: usize) -> Result<Self> {
        if f % 2 != 0 {
            return Err(Error::Config(format!("reference model needs even F, got {f}")));
        }
        Self::new(f / 2, 0, f / 2)
    }

    /// Embedding width `F`.
    pub fn total(&self) -> usize {
        self.f_a + self.f_ax + self.f_x
    }

    /// Encoder output width before the overlap blocks are merged.
    pub fn raw_width(&self) -> usize {
        self.f_a + 2 * self.f_ax + self.f_x
    }

    pub fn adjacency_width(&self) -> usize {
        self.f_a + self.f_ax
    }

    pub fn feature_width(&self) -> usize {
        self.f_ax + self.f_x
    }

    pub fn adjacency_range(&self) -> Range<usize> {
        0..self.f_a + self.f_ax
    }

    pub fn feature_range(&self) -> Range<usize> {
        self.f_a..self.total()
    }
}

impl fmt::Display for DimensionSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(f_a={}, f_ax={}, f_x={})", self.f_a, self.f_ax, self.f_x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyDecoder {
    /// Dense ReLU layer followed by a bilinear form.
    Deep,
    /// Sigmoid of the embedding inner product.
    Shallow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureHead {
    /// Single-draw categorical over the D feature columns (softmax rows).
    Multinomial,
    /// Independent binary features (elementwise sigmoid).
    Bernoulli,
    /// Real-valued features, unit-variance Gaussian around the raw outputs.
    Gaussian,
}

impl FromStr for AdjacencyDecoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(AdjacencyDecoder::Deep),
            "shallow" => Ok(AdjacencyDecoder::Shallow),
            other => Err(Error::Config(format!("unknown adjacency decoder {other:?}"))),
        }
    }
}

impl FromStr for FeatureHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(FeatureHead::Multinomial),
            "bernoulli" => Ok(FeatureHead::Bernoulli),
            "gaussian" => Ok(FeatureHead::Gaussian),
            other => Err(Error::Config(format!("unknown feature head {other:?}"))),
        }
    }
}

impl fmt::Display for AdjacencyDecoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyDecoder::Deep => "deep",
            AdjacencyDecoder::Shallow => "shallow",
        })
    }
}

impl fmt::Display for FeatureHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureHead::Multinomial => "multinomial",
            FeatureHead::Bernoulli => "bernoulli",
            FeatureHead::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub split: DimensionSplit,
    /// Input feature count `D`.
    pub features: usize,
    pub hidden_enc: usize,
    pub hidden_dec: usize,
    pub decoder: AdjacencyDecoder,
    pub head: FeatureHead,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        DimensionSplit::new(self.split.f_a, self.split.f_ax, self.split.f_x)?;
        if self.features == 0 || self.hidden_enc == 0 || self.hidden_dec == 0 {
            return Err(Error::Config(
                "feature count and hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let s = &self.split;
        let encoder = self.features * self.hidden_enc + 2 * self.hidden_enc * s.raw_width();
        let adjacency = match self.decoder {
            AdjacencyDecoder::Deep => {
                s.adjacency_width() * self.hidden_dec + self.hidden_dec * self.hidden_dec
            }
            AdjacencyDecoder::Shallow => 0,
        };
        let features = s.feature_width() * self.hidden_dec + self.hidden_dec * self.features;
        encoder + adjacency + features
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    /// Shared first GC layer, `D × H_enc`.
    pub w0: DenseMatrix,
    /// Second GC layer for `μ`, `H_enc × raw_width`.
    pub w1_mu: DenseMatrix,
    /// Second GC layer for `log σ`, `H_enc × raw_width`.
    pub w1_sigma: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearWeights {
    /// `(f_a + f_ax) × H_dec`
    pub w0: DenseMatrix,
    /// `H_dec × H_dec`, unconstrained.
    pub w1: DenseMatrix,
}

/// All decoder weights; together they form the regularized vector `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    /// Absent for the shallow decoder.
    pub adjacency: Option<BilinearWeights>,
    /// `(f_ax + f_x) × H_dec`
    pub x0: DenseMatrix,
    /// `H_dec × D`
    pub x1: DenseMatrix,
}

impl DecoderWeights {
    pub fn sum_sq(&self) -> f64 {
        let adj = self
            .adjacency
            .as_ref()
            .map_or(0.0, |b| b.w0.sum_sq() + b.w1.sum_sq());
        adj + self.x0.sum_sq() + self.x1.sum_sq()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub decoder: DecoderWeights,
}

/// Gradients share the weight layout exactly.
pub type GradientSet = ModelWeights;

impl ModelWeights {
    /// Weights built by `f(rows, cols)` for every matrix, in canonical order.
    pub fn build(cfg: &ModelConfig, mut f: impl FnMut(usize, usize) -> DenseMatrix) -> Self {
        let s = &cfg.split;
        let encoder = EncoderWeights {
            w0: f(cfg.features, cfg.hidden_enc),
            w1_mu: f(cfg.hidden_enc, s.raw_width()),
            w1_sigma: f(cfg.hidden_enc, s.raw_width()),
        };
        let adjacency = match cfg.decoder {
            AdjacencyDecoder::Deep => Some(BilinearWeights {
                w0: f(s.adjacency_width(), cfg.hidden_dec),
                w1: f(cfg.hidden_dec, cfg.hidden_dec),
            }),
            AdjacencyDecoder::Shallow => None,
        };
        let decoder = DecoderWeights {
            adjacency,
            x0: f(s.feature_width(), cfg.hidden_dec),
            x1: f(cfg.hidden_dec, cfg.features),
        };
        ModelWeights { encoder, decoder }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, DenseMatrix::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for m in out.matrices_mut() {
            m.map_inplace(|_| 0.0);
        }
        out
    }

    /// Every weight matrix in canonical order.
    pub fn matrices(&self) -> Vec<&DenseMatrix> {
        let mut v = vec![&self.encoder.w0, &self.encoder.w1_mu, &self.encoder.w1_sigma];
        if let Some(b) = &self.decoder.adjacency {
            v.push(&b.w0);
            v.push(&b.w1);
        }
        v.push(&self.decoder.x0);
        v.push(&self.decoder.x1);
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut v = vec![
            &mut self.encoder.w0,
            &mut self.encoder.w1_mu,
            &mut self.encoder.w1_sigma,
        ];
        if let Some(b) = &mut self.decoder.adjacency {
            v.push(&mut b.w0);
            v.push(&mut b.w1);
        }
        v.push(&mut self.decoder.x0);
        v.push(&mut self.decoder.x1);
        v
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = vec!["enc_w0", "enc_w1_mu", "enc_w1_sigma"];
        if self.decoder.adjacency.is_some() {
            v.push("dec_a0");
            v.push("dec_a1");
        }
        v.push("dec_x0");
        v.push("dec_x1");
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        let got: Vec<_> = self.matrices().iter().map(|m| m.shape()).collect();
        let want: Vec<_> = expected.matrices().iter().map(|m| m.shape()).collect();
        if got != want {
            return Err(Error::dim("ModelWeights", format!("{want:?}"), format!("{got:?}")));
        }
        Ok(())
    }
}

/// Intermediates of the two-layer GC encoder.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `Â X W0` (pre-activation, shared by both heads).
    pub hidden_pre: DenseMatrix,
    /// `Â ReLU(Â X W0)`
    pub propagated: DenseMatrix,
    pub mu_raw: DenseMatrix,
    pub log_sigma_raw: DenseMatrix,
}

/// `μ_raw = Â ReLU(Â X W0) W1_μ` and `log σ_raw = Â ReLU(Â X W0) W1_σ`.
pub fn encode(
    x: &DenseMatrix,
    a_hat: &NormalizedAdjacency,
    w: &EncoderWeights,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let ax = a_hat.spmm(x)?;
    let out = encode_propagated(&ax, a_hat, w)?;
    Ok((out.mu_raw, out.log_sigma_raw))
}

/// Encoder forward pass given the precomputed `Â X`.
pub fn encode_propagated(
    ax: &DenseMatrix,
    a_hat: &NormalizedAdjacency,
    w: &EncoderWeights,
) -> Result<EncoderOutput> {
    if ax.cols() != w.w0.rows() {
        return Err(Error::dim("encode: feature width", w.w0.rows(), ax.cols()));
    }
    if w.w1_mu.rows() != w.w0.cols() || w.w1_sigma.shape() != w.w1_mu.shape() {
        return Err(Error::dim(
            "encode: second layer",
            format!("{}×_", w.w0.cols()),
            format!("{:?}/{:?}", w.w1_mu.shape(), w.w1_sigma.shape()),
        ));
    }
    let hidden_pre = ax.matmul(&w.w0);
    let propagated = a_hat.spmm(&hidden_pre.relu())?;
    let mu_raw = propagated.matmul(&w.w1_mu);
    let log_sigma_raw = propagated.matmul(&w.w1_sigma);
    Ok(EncoderOutput {
        hidden_pre,
        propagated,
        mu_raw,
        log_sigma_raw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDistribution {
    pub mu: DenseMatrix,
    pub log_sigma: DenseMatrix,
}

/// Averages the two shared column blocks of a raw encoder output.
pub fn merge_columns(raw: &DenseMatrix, split: &DimensionSplit) -> Result<DenseMatrix> {
    if raw.cols() != split.raw_width() {
        return Err(Error::dim("merge_overlap", split.raw_width(), raw.cols()));
    }
    let (fa, fax, fx) = (split.f_a, split.f_ax, split.f_x);
    let mut out = DenseMatrix::zeros(raw.rows(), split.total());
    for i in 0..raw.rows() {
        let src = raw.row(i);
        let dst = out.row_mut(i);
        dst[..fa].copy_from_slice(&src[..fa]);
        for k in 0..fax {
            dst[fa + k] = 0.5 * (src[fa + k] + src[fa + fax + k]);
        }
        dst[fa + fax..].copy_from_slice(&src[fa + 2 * fax..fa + 2 * fax + fx]);
    }
    Ok(out)
}

/// Adjoint of [`merge_columns`]: maps a gradient on merged columns back to
/// the raw layout.
pub fn merge_columns_backward(grad: &DenseMatrix, split: &DimensionSplit) -> DenseMatrix {
    let (fa, fax, fx) = (split.f_a, split.f_ax, split.f_x);
    let mut out = DenseMatrix::zeros(grad.rows(), split.raw_width());
    for i in 0..grad.rows() {
        let src = grad.row(i);
        let dst = out.row_mut(i);
        dst[..fa].copy_from_slice(&src[..fa]);
        for k in 0..fax {
            dst[fa + k] = 0.5 * src[fa + k];
            dst[fa + fax + k] = 0.5 * src[fa + k];
        }
        dst[fa + 2 * fax..fa + 2 * fax + fx].copy_from_slice(&src[fa + fax..]);
    }
    out
}

/// Duplicates the shared block; right inverse of [`merge_columns`].
pub fn split_columns(merged: &DenseMatrix, split: &DimensionSplit) -> DenseMatrix {
    let (fa, fax) = (split.f_a, split.f_ax);
    let mut out = DenseMatrix::zeros(merged.rows(), split.raw_width());
    for i in 0..merged.rows() {
        let src = merged.row(i);
        let dst = out.row_mut(i);
        dst[..fa + fax].copy_from_slice(&src[..fa + fax]);
        dst[fa + fax..fa + 2 * fax].copy_from_slice(&src[fa..fa + fax]);
        dst[fa + 2 * fax..].copy_from_slice(&src[fa + fax..]);
    }
    out
}

pub fn merge_overlap(
    mu_raw: &DenseMatrix,
    log_sigma_raw: &DenseMatrix,
    split: &DimensionSplit,
) -> Result<EmbeddingDistribution> {
    Ok(EmbeddingDistribution {
        mu: merge_columns(mu_raw, split)?,
        log_sigma: merge_columns(log_sigma_raw, split)?,
    })
}

#[derive(Debug, Clone)]
pub struct EmbeddingSample {
    pub xi: Vec<DenseMatrix>,
    pub eps: Vec<DenseMatrix>,
}

/// Draws `k` standard-normal noise matrices shaped like `dist.mu`.
pub fn draw_noise<R: Rng>(rows: usize, cols: usize, k: usize, rng: &mut R) -> Vec<DenseMatrix> {
    (0..k)
        .map(|_| DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)))
        .collect()
}

/// `ξ = μ + exp(log σ) ⊙ ε` for each supplied noise matrix.
pub fn reparameterize(dist: &EmbeddingDistribution, eps: Vec<DenseMatrix>) -> EmbeddingSample {
    let sigma = dist.log_sigma.map(f64::exp);
    let xi = eps
        .iter()
        .map(|e| {
            let mut xi = dist.mu.clone();
            for ((x, s), n) in xi.values_mut().iter_mut().zip(sigma.values()).zip(e.values()) {
                *x += s * n;
            }
            xi
        })
        .collect();
    EmbeddingSample { xi, eps }
}

pub fn sample_embeddings<R: Rng>(
    dist: &EmbeddingDistribution,
    k: usize,
    rng: &mut R,
) -> Result<EmbeddingSample> {
    if k == 0 {
        return Err(Error::Config("need at least one embedding sample".into()));
    }
    let eps = draw_noise(dist.mu.rows(), dist.mu.cols(), k, rng);
    Ok(reparameterize(dist, eps))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bilinear logits `γ W1 γᵀ` with `γ = ReLU(ξ_a W0)`; also returns the
/// pre-activation `ξ_a W0`.
pub fn adjacency_logits_deep(
    xi_a: &DenseMatrix,
    w: &BilinearWeights,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if xi_a.cols() != w.w0.rows() || w.w1.shape() != (w.w0.cols(), w.w0.cols()) {
        return Err(Error::dim(
            "decode_adjacency_deep",
            format!("{}×H then H×H", xi_a.cols()),
            format!("{:?} then {:?}", w.w0.shape(), w.w1.shape()),
        ));
    }
    let pre = xi_a.matmul(&w.w0);
    let gamma = pre.relu();
    let logits = gamma.matmul(&w.w1).matmul_nt(&gamma);
    Ok((pre, logits))
}

pub fn adjacency_logits_shallow(xi_a: &DenseMatrix) -> DenseMatrix {
    xi_a.matmul_nt(xi_a)
}

/// `P_ij = sigmoid(γ_i W1 γ_jᵀ)`.
pub fn decode_adjacency_deep(xi_a: &DenseMatrix, w: &BilinearWeights) -> Result<DenseMatrix> {
    let (_, logits) = adjacency_logits_deep(xi_a, w)?;
    Ok(logits.map(sigmoid))
}

/// `P_ij = sigmoid(ξ_i · ξ_j)`.
pub fn decode_adjacency_shallow(xi_a: &DenseMatrix) -> DenseMatrix {
    adjacency_logits_shallow(xi_a).map(sigmoid)
}

/// Feature-decoder logits `ReLU(ξ_x W_x0) W_x1`; also returns the
/// pre-activation.
pub fn feature_logits(xi_x: &DenseMatrix, w: &DecoderWeights) -> Result<(DenseMatrix, DenseMatrix)> {
    if xi_x.cols() != w.x0.rows() || w.x1.rows() != w.x0.cols() {
        return Err(Error::dim(
            "decode_features",
            format!("{}×H then H×D", xi_x.cols()),
            format!("{:?} then {:?}", w.x0.shape(), w.x1.shape()),
        ));
    }
    let pre = xi_x.matmul(&w.x0);
    let logits = pre.relu().matmul(&w.x1);
    Ok((pre, logits))
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Maps feature logits to the head's distribution parameters.
pub fn feature_params(logits: &DenseMatrix, head: FeatureHead) -> DenseMatrix {
    match head {
        FeatureHead::Multinomial => softmax_rows(logits),
        FeatureHead::Bernoulli => logits.map(sigmoid),
        FeatureHead::Gaussian => logits.clone(),
    }
}

pub fn decode_features(
    xi_x: &DenseMatrix,
    w: &DecoderWeights,
    head: FeatureHead,
) -> Result<DenseMatrix> {
    let (_, logits) = feature_logits(xi_x, w)?;
    Ok(feature_params(&logits, head))
}

/// Edge probabilities for node pairs, decoded from fixed embeddings (no
/// sampling). Only the adjacency columns of `embedding` are used.
pub fn score_pairs(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    embedding: &DenseMatrix,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let xi_a = embedding.columns(cfg.split.adjacency_range());
    match (&weights.decoder.adjacency, cfg.decoder) {
        (Some(b), AdjacencyDecoder::Deep) => {
            let gamma = xi_a.matmul(&b.w0).relu();
            let projected = gamma.matmul(&b.w1);
            Ok(pairs
                .iter()
                .map(|&(i, j)| sigmoid(dot(projected.row(i), gamma.row(j))))
                .collect())
        }
        (None, AdjacencyDecoder::Shallow) => Ok(pairs
            .iter()
            .map(|&(i, j)| sigmoid(dot(xi_a.row(i), xi_a.row(j))))
            .collect()),
        _ => Err(Error::Config(
            "decoder weights do not match the configured adjacency decoder".into(),
        )),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic embedding `μ` of every node of a graph.
pub fn embed_mean(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    x: &DenseMatrix,
    a_hat: &NormalizedAdjacency,
) -> Result<DenseMatrix> {
    let (mu_raw, _) = encode(x, a_hat, &weights.encoder)?;
    merge_columns(&mu_raw, &cfg.split)
}

/// Where the random streams of a run came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub master: u64,
    pub init_stream: u64,
    pub noise_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub seeds: SeedLineage,
    pub epochs_trained: usize,
    pub weights: ModelWeights,
}

impl Checkpoint {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema {}",
                ck.schema_version
            )));
        }
        ck.config.validate()?;
        ck.weights.check_shapes(&ck.config)?;
        if !ck.weights.is_finite() {
            return Err(Error::NonFinite("checkpoint weights"));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparseAdjacency;
    use crate::rng::{self, Stream};
    use proptest::prelude::*;

    fn cfg(split: DimensionSplit, decoder: AdjacencyDecoder) -> ModelConfig {
        ModelConfig {
            split,
            features: 7,
            hidden_enc: 50,
            hidden_dec: 50,
            decoder,
            head: FeatureHead::Multinomial,
        }
    }

    #[test]
    fn split_widths() {
        let s = DimensionSplit::new(3, 2, 4).unwrap();
        assert_eq!(s.total(), 9);
        assert_eq!(s.raw_width(), 11);
        assert_eq!(s.adjacency_range(), 0..5);
        assert_eq!(s.feature_range(), 3..9);
        assert!(DimensionSplit::new(0, 0, 3).is_err());
        assert_eq!(
            DimensionSplit::overlapping(20, 4).unwrap(),
            DimensionSplit::new(6, 4, 6).unwrap()
        );
        assert_eq!(
            DimensionSplit::reference(14).unwrap(),
            DimensionSplit::new(7, 0, 7).unwrap()
        );
        assert!(DimensionSplit::overlapping(20, 12).is_err());
    }

    #[test]
    fn parameter_count_is_constant_across_overlaps() {
        for decoder in [AdjacencyDecoder::Deep, AdjacencyDecoder::Shallow] {
            let counts: Vec<usize> = (0..=5)
                .map(|k| {
                    let c = cfg(DimensionSplit::overlapping(20, 2 * k).unwrap(), decoder);
                    assert_eq!(ModelWeights::zeros(&c).parameter_count(), c.parameter_count());
                    c.parameter_count()
                })
                .collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        }
    }

    #[test]
    fn encode_zero_features_gives_zero() {
        let a = SparseAdjacency::from_edges(3, [(0, 1)]).unwrap().normalize();
        let c = cfg(DimensionSplit::new(1, 1, 1).unwrap(), AdjacencyDecoder::Deep);
        let w = ModelWeights::build(&c, |r, k| DenseMatrix::filled(r, k, 0.3)).encoder;
        let x = DenseMatrix::zeros(3, 7);
        let (mu, ls) = encode(&x, &a, &w).unwrap();
        assert!(mu.values().iter().all(|&v| v == 0.0));
        assert!(ls.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_scalar_chain() {
        let a = SparseAdjacency::empty(1).normalize();
        let w = EncoderWeights {
            w0: DenseMatrix::from_rows(&[&[1.0, -1.0]]),
            w1_mu: DenseMatrix::from_rows(&[&[1.0], &[1.0]]),
            w1_sigma: DenseMatrix::from_rows(&[&[0.0], &[0.0]]),
        };
        let (mu, _) = encode(&DenseMatrix::from_rows(&[&[2.0]]), &a, &w).unwrap();
        assert_eq!(mu.get(0, 0), 2.0);

        // Negative pre-activation kills the output whatever W1 is.
        let w = EncoderWeights {
            w0: DenseMatrix::from_rows(&[&[-1.0, -3.0]]),
            w1_mu: DenseMatrix::from_rows(&[&[5.0], &[-7.0]]),
            w1_sigma: DenseMatrix::from_rows(&[&[2.0], &[2.0]]),
        };
        let (mu, ls) = encode(&DenseMatrix::from_rows(&[&[2.0]]), &a, &w).unwrap();
        assert_eq!((mu.get(0, 0), ls.get(0, 0)), (0.0, 0.0));
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let a = SparseAdjacency::empty(2).normalize();
        let c = cfg(DimensionSplit::new(1, 1, 1).unwrap(), AdjacencyDecoder::Deep);
        let w = ModelWeights::zeros(&c).encoder;
        assert!(encode(&DenseMatrix::zeros(2, 3), &a, &w).is_err());
        assert!(encode(&DenseMatrix::zeros(3, 7), &a, &w).is_err());
    }

    #[test]
    fn merge_examples() {
        let s = DimensionSplit::new(1, 1, 1).unwrap();
        let raw = DenseMatrix::from_rows(&[&[1.0, 2.0, 4.0, 7.0]]);
        assert_eq!(
            merge_columns(&raw, &s).unwrap(),
            DenseMatrix::from_rows(&[&[1.0, 3.0, 7.0]])
        );
        let none = DimensionSplit::new(2, 0, 1).unwrap();
        let raw = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(merge_columns(&raw, &none).unwrap(), raw);
        assert!(merge_columns(&raw, &s).is_err());
    }

    #[test]
    fn reparameterization_identities() {
        let dist = EmbeddingDistribution {
            mu: DenseMatrix::zeros(2, 2),
            log_sigma: DenseMatrix::zeros(2, 2),
        };
        let s = reparameterize(&dist, vec![DenseMatrix::filled(2, 2, 0.3)]);
        assert!(s.xi[0].values().iter().all(|&v| v == 0.3));

        // σ → 0 surrogate: ξ = μ exactly.
        let dist = EmbeddingDistribution {
            mu: DenseMatrix::filled(2, 3, 1.5),
            log_sigma: DenseMatrix::filled(2, 3, -1e4),
        };
        let mut r = rng::stream(0, Stream::Noise);
        let s = sample_embeddings(&dist, 3, &mut r).unwrap();
        assert!(s.xi.iter().all(|x| *x == dist.mu));
        assert!(sample_embeddings(&dist, 0, &mut r).is_err());
    }

    #[test]
    fn sample_moments() {
        let dist = EmbeddingDistribution {
            mu: DenseMatrix::filled(1, 1, 1.0),
            log_sigma: DenseMatrix::filled(1, 1, 2f64.ln()),
        };
        let mut r = rng::stream(11, Stream::Noise);
        let s = sample_embeddings(&dist, 10_000, &mut r).unwrap();
        let v: Vec<f64> = s.xi.iter().map(|x| x.get(0, 0)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.06, "{mean}");
        assert!((sd - 2.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn deep_decoder_examples() {
        let w = BilinearWeights {
            w0: DenseMatrix::filled(2, 3, 0.7),
            w1: DenseMatrix::filled(3, 3, -0.2),
        };
        let p = decode_adjacency_deep(&DenseMatrix::zeros(4, 2), &w).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.5));

        let w = BilinearWeights {
            w0: DenseMatrix::from_rows(&[&[1.0]]),
            w1: DenseMatrix::from_rows(&[&[3f64.ln()]]),
        };
        let p = decode_adjacency_deep(&DenseMatrix::from_rows(&[&[1.0]]), &w).unwrap();
        assert!((p.get(0, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shallow_decoder_examples() {
        let p = decode_adjacency_shallow(&DenseMatrix::zeros(3, 2));
        assert!(p.values().iter().all(|&v| v == 0.5));
        let x = DenseMatrix::from_rows(&[&[3f64.ln(), 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
        let p = decode_adjacency_shallow(&x);
        assert!((p.get(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(p.get(0, 2), 0.5);
        assert_eq!(p.get(1, 2), 0.5);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&DenseMatrix::filled(1, 4, 0.3));
        assert!(p.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_rows(&DenseMatrix::from_rows(&[&[0.0, 2f64.ln()]]));
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        let p = softmax_rows(&DenseMatrix::from_rows(&[&[1000.0, 0.0, 0.0]]));
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12 && p.get(0, 1) < 1e-12);
    }

    #[test]
    fn feature_heads() {
        let w = DecoderWeights {
            adjacency: None,
            x0: DenseMatrix::from_rows(&[&[1.0, 0.5]]),
            x1: DenseMatrix::from_rows(&[&[1.0, -1.0, 0.0], &[0.0, 2.0, 1.0]]),
        };
        let xi = DenseMatrix::from_rows(&[&[1.0], &[-1.0], &[2.0]]);
        let m = decode_features(&xi, &w, FeatureHead::Multinomial).unwrap();
        for i in 0..3 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let b = decode_features(&xi, &w, FeatureHead::Bernoulli).unwrap();
        assert!(b.values().iter().all(|&v| v > 0.0 && v < 1.0));
        let g = decode_features(&xi, &w, FeatureHead::Gaussian).unwrap();
        // ReLU([1, .5]) · x1 = [1, 0, .5]
        assert_eq!(g.row(0), &[1.0, 0.0, 0.5]);
        assert_eq!(g.row(1), &[0.0, 0.0, 0.0]);
        assert!("softmax".parse::<FeatureHead>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(DimensionSplit::new(2, 1, 2).unwrap(), AdjacencyDecoder::Deep);
        let mut seed = 1u64;
        let weights = ModelWeights::build(&c, |r, k| {
            DenseMatrix::from_fn(r, k, |_, _| {
                seed = rng::mix(seed, 3);
                (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
        });
        let ck = Checkpoint {
            schema_version: Checkpoint::SCHEMA_VERSION,
            config: c,
            seeds: SeedLineage { master: 4, init_stream: 1, noise_stream: 2 },
            epochs_trained: 3,
            weights,
        };
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn merge_is_left_inverse_of_duplication(
            (fa, fax, fx) in (0usize..4, 0usize..4, 1usize..4),
            seed in any::<u64>(),
        ) {
            let s = DimensionSplit { f_a: fa, f_ax: fax, f_x: fx };
            let mut st = seed;
            let merged = DenseMatrix::from_fn(3, s.total(), |_, _| {
                st = rng::mix(st, 1);
                (st >> 40) as f64
            });
            prop_assert_eq!(merge_columns(&split_columns(&merged, &s), &s).unwrap(), merged);
        }

        #[test]
        fn deep_decoder_transpose_identity(
            xi in arb_matrix(5, 3),
            w0 in arb_matrix(3, 4),
            w1 in arb_matrix(4, 4),
        ) {
            let w = BilinearWeights { w0: w0.clone(), w1: w1.clone() };
            let wt = BilinearWeights { w0, w1: w1.transpose() };
            let p = decode_adjacency_deep(&xi, &w).unwrap();
            let q = decode_adjacency_deep(&xi, &wt).unwrap();
            prop_assert!(q.max_abs_diff(&p.transpose()) < 1e-12);
            let sym = BilinearWeights {
                w0: w.w0.clone(),
                w1: w1.zip_map(&w1.transpose(), |a, b| a + b),
            };
            let ps = decode_adjacency_deep(&xi, &sym).unwrap();
            prop_assert!(ps.max_abs_diff(&ps.transpose()) < 1e-12);
        }
    }
}
