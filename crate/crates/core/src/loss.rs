//! Rescaled four-part training objective and its exact gradients.
//!
//! The total is
//! `L̃_A / (N² ln 2) + L_X / norm_X + L_KL / (N F κ_KL) + ‖θ‖² / (2 κ_θ)`,
//! where `norm_X` is the feature loss at maximum uncertainty (`N ln D` for
//! the multinomial head). Gradients are pathwise: the standard-normal draws
//! `ε` are held fixed and `ξ = μ + σ ⊙ ε` is differentiated directly.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NormalizedAdjacency, SparseAdjacency};
use crate::matrix::{gemm, DenseMatrix};
use crate::model::{
    adjacency_logits_deep, adjacency_logits_shallow, encode_propagated, feature_logits,
    merge_columns, merge_columns_backward, reparameterize, sigmoid,
    AdjacencyDecoder, DecoderWeights, EmbeddingDistribution, EncoderOutput, FeatureHead,
    DimensionSplit, GradientSet, ModelConfig, ModelWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kappa_kl: f64,
    pub kappa_theta: f64,
    /// Probabilities are clamped into `[clip_eps, 1 - clip_eps]` before logs.
    pub clip_eps: f64,
    /// Include the `i = j` terms (where `A_ii = 0`) in the adjacency loss.
    pub include_diagonal: bool,
    /// Clamp multinomial targets at 0 and rescale rows to sum to 1 before
    /// they enter `L_X` (the encoder still sees the raw features).
    pub normalize_feature_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kappa_kl: 1000.0,
            kappa_theta: 500.0,
            clip_eps: 1e-7,
            include_diagonal: true,
            normalize_feature_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(Error::Config(format!(
                "clip_eps must lie in (0, 0.5), got {}",
                self.clip_eps
            )));
        }
        if !(self.kappa_kl > 0.0 && self.kappa_theta > 0.0) {
            return Err(Error::Config("kappa_kl and kappa_theta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a_balanced: f64,
    pub l_x: f64,
    pub l_kl: f64,
    /// `‖θ‖² / (2 κ_θ)`; already on the training scale.
    pub l_theta: f64,
    pub l_a_scaled: f64,
    pub l_x_scaled: f64,
    pub l_kl_scaled: f64,
    pub l_theta_scaled: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l_a", self.l_a_scaled),
            ("l_x", self.l_x_scaled),
            ("l_kl", self.l_kl_scaled),
            ("l_theta", self.l_theta_scaled),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

#[inline]
fn clamp_prob(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, false)
    } else if p > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

/// Balanced cross-entropy, averaged over the per-sample probability
/// matrices in `probs`.
pub fn adjacency_loss_balanced(
    probs: &[DenseMatrix],
    a: &SparseAdjacency,
    d: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::DegenerateGraph(d));
    }
    if probs.is_empty() {
        return Err(Error::Config("need at least one sample".into()));
    }
    let mut total = 0.0;
    for p in probs {
        if p.shape() != (a.n(), a.n()) {
            return Err(Error::dim("adjacency_loss_balanced", a.n(), p.rows()));
        }
        total += adjacency_sample(p, a, d, cfg);
    }
    Ok(total / probs.len() as f64)
}

/// Loss of one sample.
fn adjacency_sample(p: &DenseMatrix, a: &SparseAdjacency, d: f64, cfg: &LossConfig) -> f64 {
    let w_pos = 0.5 / d;
    let w_neg = 0.5 / (1.0 - d);
    let mut loss = 0.0;
    for_each_pair(p, a, cfg, |_, _, pij, edge| {
        let pc = clamp_prob(pij, cfg.clip_eps).0;
        loss -= if edge { w_pos * pc.ln() } else { w_neg * (1.0 - pc).ln() };
    });
    loss
}

/// `ln(1 + eˣ)` without overflow or cancellation.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logit of `1 − clip_eps`; clamping `p = σ(z)` into `[ε, 1 − ε]` is
/// clamping `z` into `[−bound, bound]`.
#[inline]
fn logit_bound(clip_eps: f64) -> f64 {
    ((1.0 - clip_eps) / clip_eps).ln()
}

/// Same loss as [`adjacency_sample`] evaluated from logits, using
/// `−ln σ(z) = softplus(−z)` and `−ln(1 − σ(z)) = softplus(z)`. Going
/// through probabilities would quantize `1 − p` near saturation and turn
/// the loss into a fine staircase. Also returns `σ(z)` of the clamped
/// logits, which shares the exponential; `backward` only reads it where
/// no clamping happened.
fn adjacency_sample_logits(
    z: &DenseMatrix,
    a: &SparseAdjacency,
    d: f64,
    cfg: &LossConfig,
) -> (f64, DenseMatrix) {
    let w_pos = 0.5 / d;
    let w_neg = 0.5 / (1.0 - d);
    let bound = logit_bound(cfg.clip_eps);
    let n = a.n();
    let mut probs = DenseMatrix::zeros(n, n);
    let out = probs.values_mut();
    let mut loss = 0.0;
    for_each_pair(z, a, cfg, |i, j, zij, edge| {
        let zc = zij.clamp(-bound, bound);
        let e = (-zc.abs()).exp();
        let log1p_e = e.ln_1p();
        // softplus(±zc) = max(±zc, 0) + ln(1 + e^{−|zc|})
        loss += if edge {
            w_pos * ((-zc).max(0.0) + log1p_e)
        } else {
            w_neg * (zc.max(0.0) + log1p_e)
        };
        out[i * n + j] = if zc >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    });
    (loss, probs)
}

/// Writes `scale · ∂loss/∂logit` of one sample into `grad`, given its
/// logits `z` and probabilities `p`. Excluded and clamped entries get 0.
fn adjacency_grad(
    z: &DenseMatrix,
    p: &DenseMatrix,
    a: &SparseAdjacency,
    d: f64,
    cfg: &LossConfig,
    grad: &mut DenseMatrix,
    scale: f64,
) {
    let w_pos = scale * 0.5 / d;
    let w_neg = scale * 0.5 / (1.0 - d);
    let bound = logit_bound(cfg.clip_eps);
    grad.map_inplace(|_| 0.0);
    let n = a.n();
    let out = grad.values_mut();
    let p = p.values();
    for_each_pair(z, a, cfg, |i, j, zij, edge| {
        if zij.abs() <= bound {
            let pij = p[i * n + j];
            out[i * n + j] = if edge { -w_pos * (1.0 - pij) } else { w_neg * pij };
        }
    });
}

/// Visits every included ordered pair with its matrix entry and edge flag.
#[inline]
fn for_each_pair(
    p: &DenseMatrix,
    a: &SparseAdjacency,
    cfg: &LossConfig,
    mut visit: impl FnMut(usize, usize, f64, bool),
) {
    for i in 0..a.n() {
        let nbrs = a.neighbors(i);
        let mut next = 0;
        for (j, &pij) in p.row(i).iter().enumerate() {
            let edge = next < nbrs.len() && nbrs[next] == j;
            if edge {
                next += 1;
            }
            if i != j || cfg.include_diagonal {
                visit(i, j, pij, edge);
            }
        }
    }
}

/// Negative log-likelihood of the feature targets, averaged over samples.
pub fn feature_loss(
    params: &[DenseMatrix],
    targets: &DenseMatrix,
    head: FeatureHead,
    clip_eps: f64,
) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::Config("need at least one sample".into()));
    }
    let mut total = 0.0;
    for p in params {
        if p.shape() != targets.shape() {
            return Err(Error::dim(
                "feature_loss",
                format!("{:?}", targets.shape()),
                format!("{:?}", p.shape()),
            ));
        }
        total += feature_sample(p, targets, head, clip_eps);
    }
    Ok(total / params.len() as f64)
}

fn feature_sample(p: &DenseMatrix, t: &DenseMatrix, head: FeatureHead, eps: f64) -> f64 {
    let mut loss = 0.0;
    for (&pij, &tij) in p.values().iter().zip(t.values()) {
        loss += match head {
            FeatureHead::Multinomial => -tij * clamp_prob(pij, eps).0.ln(),
            FeatureHead::Bernoulli => {
                let pc = clamp_prob(pij, eps).0;
                -(tij * pc.ln() + (1.0 - tij) * (1.0 - pc).ln())
            }
            FeatureHead::Gaussian => 0.5 * (pij - tij) * (pij - tij),
        };
    }
    loss
}

/// Row-wise `log softmax`.
fn log_softmax_rows(z: &DenseMatrix) -> DenseMatrix {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// [`feature_sample`] evaluated from decoder logits (see
/// [`adjacency_sample_logits`] for why), optionally writing
/// `scale · ∂loss/∂logit` into `grad`. Clamped entries pass no gradient.
fn feature_sample_logits(
    z: &DenseMatrix,
    t: &DenseMatrix,
    head: FeatureHead,
    eps: f64,
    grad: Option<(&mut DenseMatrix, f64)>,
) -> f64 {
    let mut loss = 0.0;
    match head {
        FeatureHead::Multinomial => {
            let (lo, hi) = (eps.ln(), (-eps).ln_1p());
            let lp = log_softmax_rows(z);
            // a_c = p_c · ∂loss/∂p_c, which is −t_c on active entries.
            let mut a = DenseMatrix::zeros(z.rows(), z.cols());
            for ((&l, &tij), ac) in lp.values().iter().zip(t.values()).zip(a.values_mut()) {
                loss -= tij * l.clamp(lo, hi);
                if (lo..=hi).contains(&l) {
                    *ac = -tij;
                }
            }
            if let Some((gz, s)) = grad {
                // Softmax Jacobian: dz_c = a_c − p_c Σ_j a_j.
                for i in 0..z.rows() {
                    let total: f64 = a.row(i).iter().sum();
                    for ((g, &l), &ac) in gz.row_mut(i).iter_mut().zip(lp.row(i)).zip(a.row(i)) {
                        *g = s * (ac - l.exp() * total);
                    }
                }
            }
        }
        FeatureHead::Bernoulli => {
            let bound = logit_bound(eps);
            let mut grad = grad;
            for (k, (&zij, &tij)) in z.values().iter().zip(t.values()).enumerate() {
                let zc = zij.clamp(-bound, bound);
                loss += tij * softplus(-zc) + (1.0 - tij) * softplus(zc);
                if let Some((gz, s)) = grad.as_mut() {
                    let active = zij.abs() <= bound;
                    gz.values_mut()[k] = if active { *s * (sigmoid(zij) - tij) } else { 0.0 };
                }
            }
        }
        FeatureHead::Gaussian => {
            let mut grad = grad;
            for (k, (&m, &tij)) in z.values().iter().zip(t.values()).enumerate() {
                let r = m - tij;
                loss += 0.5 * r * r;
                if let Some((gz, s)) = grad.as_mut() {
                    gz.values_mut()[k] = *s * r;
                }
            }
        }
    }
    loss
}

/// Feature loss at maximum uncertainty, used as the `L_X` normalizer.
pub fn feature_normalizer(head: FeatureHead, n: usize, d: usize) -> f64 {
    let (n, d) = (n as f64, d as f64);
    match head {
        FeatureHead::Multinomial => n * d.ln(),
        FeatureHead::Bernoulli => n * d * LN_2,
        // No maximum-uncertainty point for a unit-variance Gaussian; scale
        // per entry instead.
        FeatureHead::Gaussian => n * d,
    }
}

/// `½ Σ μ² + σ² − 2 ln σ − 1`.
pub fn kl_loss(dist: &EmbeddingDistribution) -> f64 {
    dist.mu
        .values()
        .iter()
        .zip(dist.log_sigma.values())
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0))
        .sum()
}

/// `‖θ‖² / (2 κ_θ)` over every decoder weight.
pub fn theta_loss(w: &DecoderWeights, kappa_theta: f64) -> f64 {
    w.sum_sq() / (2.0 * kappa_theta)
}

/// Raw loss components as produced by the four loss functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_a_balanced: f64,
    pub l_x: f64,
    pub l_kl: f64,
    pub l_theta: f64,
}

pub fn total_loss(
    parts: LossParts,
    n: usize,
    d_features: usize,
    f: usize,
    head: FeatureHead,
    cfg: &LossConfig,
) -> LossBreakdown {
    let nf = n as f64;
    let l_a_scaled = parts.l_a_balanced / (nf * nf * LN_2);
    let l_x_scaled = parts.l_x / feature_normalizer(head, n, d_features);
    let l_kl_scaled = parts.l_kl / (nf * f as f64 * cfg.kappa_kl);
    let l_theta_scaled = parts.l_theta;
    LossBreakdown {
        l_a_balanced: parts.l_a_balanced,
        l_x: parts.l_x,
        l_kl: parts.l_kl,
        l_theta: parts.l_theta,
        l_a_scaled,
        l_x_scaled,
        l_kl_scaled,
        l_theta_scaled,
        total: l_a_scaled + l_x_scaled + l_kl_scaled + l_theta_scaled,
    }
}

/// Everything the objective needs about one featured graph, precomputed.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// Reconstruction target (also the graph the encoder propagates over).
    pub adjacency: SparseAdjacency,
    pub a_hat: NormalizedAdjacency,
    /// Encoder input `X`.
    pub features: DenseMatrix,
    /// `Â X`, constant across epochs.
    pub propagated_features: DenseMatrix,
    /// Target of the feature loss.
    pub targets: DenseMatrix,
    pub density: f64,
}

impl TrainingData {
    pub fn new(
        adjacency: SparseAdjacency,
        features: DenseMatrix,
        head: FeatureHead,
        cfg: &LossConfig,
    ) -> Result<Self> {
        if features.rows() != adjacency.n() {
            return Err(Error::dim("TrainingData", adjacency.n(), features.rows()));
        }
        let density = adjacency.density();
        if !(density > 0.0 && density < 1.0) {
            return Err(Error::DegenerateGraph(density));
        }
        if head == FeatureHead::Multinomial && features.cols() < 2 {
            return Err(Error::Config("multinomial head needs at least 2 feature columns".into()));
        }
        let a_hat = adjacency.normalize();
        let propagated_features = a_hat.spmm(&features)?;
        let targets = if cfg.normalize_feature_targets && head == FeatureHead::Multinomial {
            let mut t = features.map(|v| v.max(0.0));
            for i in 0..t.rows() {
                let row = t.row_mut(i);
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
            t
        } else {
            features.clone()
        };
        Ok(TrainingData {
            adjacency,
            a_hat,
            features,
            propagated_features,
            targets,
            density,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }
}

/// Intermediates of one Monte-Carlo sample.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub eps: DenseMatrix,
    pub xi: DenseMatrix,
    /// `ξ_a W_A0` for the deep decoder.
    pub adj_pre: Option<DenseMatrix>,
    /// Edge logits, `N × N`.
    pub adj_logits: DenseMatrix,
    /// `σ` of the clamped edge logits; unset on excluded diagonal entries.
    pub adj_probs: DenseMatrix,
    /// `ξ_x W_X0`
    pub feat_pre: DenseMatrix,
    /// Feature decoder outputs before the head's link function.
    pub feat_logits: DenseMatrix,
}

/// A completed forward pass with everything `backward` needs.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub encoder: EncoderOutput,
    pub dist: EmbeddingDistribution,
    pub samples: Vec<SampleState>,
    pub breakdown: LossBreakdown,
}

/// Forward pass with caller-supplied noise, one `N × F` matrix per sample.
pub fn forward(
    cfg: &ModelConfig,
    w: &ModelWeights,
    data: &TrainingData,
    eps: Vec<DenseMatrix>,
    loss_cfg: &LossConfig,
) -> Result<ForwardState> {
    if eps.is_empty() {
        return Err(Error::Config("need at least one noise sample".into()));
    }
    let n = data.n();
    let split = &cfg.split;
    if let Some(e) = eps.iter().find(|e| e.shape() != (n, split.total())) {
        return Err(Error::dim("forward: noise", format!("{n}×{}", split.total()), format!("{:?}", e.shape())));
    }
    let encoder = encode_propagated(&data.propagated_features, &data.a_hat, &w.encoder)?;
    let dist = EmbeddingDistribution {
        mu: merge_columns(&encoder.mu_raw, split)?,
        log_sigma: merge_columns(&encoder.log_sigma_raw, split)?,
    };
    let drawn = reparameterize(&dist, eps);

    let mut samples = Vec::with_capacity(drawn.xi.len());
    let (mut l_a, mut l_x) = (0.0, 0.0);
    for (xi, eps) in drawn.xi.into_iter().zip(drawn.eps) {
        let xi_a = xi.columns(split.adjacency_range());
        let (adj_pre, logits) = match (cfg.decoder, &w.decoder.adjacency) {
            (AdjacencyDecoder::Deep, Some(b)) => {
                let (pre, logits) = adjacency_logits_deep(&xi_a, b)?;
                (Some(pre), logits)
            }
            (AdjacencyDecoder::Shallow, None) => (None, adjacency_logits_shallow(&xi_a)),
            _ => {
                return Err(Error::Config(
                    "decoder weights do not match the configured adjacency decoder".into(),
                ))
            }
        };
        let (sample_la, adj_probs) =
            adjacency_sample_logits(&logits, &data.adjacency, data.density, loss_cfg);
        l_a += sample_la;

        let xi_x = xi.columns(split.feature_range());
        let (feat_pre, feat_logits) = feature_logits(&xi_x, &w.decoder)?;
        l_x += feature_sample_logits(&feat_logits, &data.targets, cfg.head, loss_cfg.clip_eps, None);

        samples.push(SampleState {
            eps,
            xi,
            adj_pre,
            adj_logits: logits,
            adj_probs,
            feat_pre,
            feat_logits,
        });
    }
    let k = samples.len() as f64;
    let parts = LossParts {
        l_a_balanced: l_a / k,
        l_x: l_x / k,
        l_kl: kl_loss(&dist),
        l_theta: theta_loss(&w.decoder, loss_cfg.kappa_theta),
    };
    let breakdown = total_loss(parts, n, cfg.features, split.total(), cfg.head, loss_cfg);
    Ok(ForwardState {
        encoder,
        dist,
        samples,
        breakdown,
    })
}

/// Loss evaluated at `ξ = μ` (no sampling noise).
pub fn evaluate_at_mean(
    cfg: &ModelConfig,
    w: &ModelWeights,
    data: &TrainingData,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let eps = vec![DenseMatrix::zeros(data.n(), cfg.split.total())];
    Ok(forward(cfg, w, data, eps, loss_cfg)?.breakdown)
}

/// Exact gradient of `state.breakdown.total` with respect to every weight.
pub fn backward(
    cfg: &ModelConfig,
    w: &ModelWeights,
    data: &TrainingData,
    state: &ForwardState,
    loss_cfg: &LossConfig,
) -> Result<GradientSet> {
    if state.samples.is_empty() {
        return Err(Error::MissingIntermediates("no samples recorded"));
    }
    let n = data.n();
    let split = &cfg.split;
    let f = split.total();
    let k = state.samples.len() as f64;
    let scale_a = 1.0 / ((n * n) as f64 * LN_2) / k;
    let scale_x = 1.0 / feature_normalizer(cfg.head, n, cfg.features) / k;
    let scale_kl = 1.0 / (n as f64 * f as f64 * loss_cfg.kappa_kl);

    let mut grads = w.zeros_like();
    let sigma = state.dist.log_sigma.map(f64::exp);

    // KL acts on the merged distribution directly.
    let mut d_mu = state.dist.mu.clone();
    d_mu.scale(scale_kl);
    let mut d_ls = state.dist.log_sigma.map(|ls| scale_kl * ((2.0 * ls).exp() - 1.0));

    let mut d_logits_a = DenseMatrix::zeros(n, n);
    let mut d_logits_x = DenseMatrix::zeros(n, cfg.features);
    for s in &state.samples {
        let mut d_xi = DenseMatrix::zeros(n, f);

        adjacency_grad(
            &s.adj_logits,
            &s.adj_probs,
            &data.adjacency,
            data.density,
            loss_cfg,
            &mut d_logits_a,
            scale_a,
        );
        let xi_a = s.xi.columns(split.adjacency_range());
        let d_xi_a = match (cfg.decoder, &w.decoder.adjacency, &s.adj_pre) {
            (AdjacencyDecoder::Deep, Some(b), Some(pre)) => {
                let gb = grads.decoder.adjacency.as_mut().expect("layout mirrors weights");
                let gamma = pre.relu();
                // Z = γ W1 γᵀ:  dγ = dZ γ W1ᵀ + dZᵀ γ W1,  dW1 = γᵀ dZ γ.
                let dz_gamma = d_logits_a.matmul(&gamma);
                let dzt_gamma = d_logits_a.matmul_tn(&gamma);
                gemm(1.0, &gamma, true, &dz_gamma, false, 1.0, &mut gb.w1);
                let mut d_gamma = dz_gamma.matmul_nt(&b.w1);
                gemm(1.0, &dzt_gamma, false, &b.w1, false, 1.0, &mut d_gamma);
                let d_pre = relu_backward(&d_gamma, pre);
                gemm(1.0, &xi_a, true, &d_pre, false, 1.0, &mut gb.w0);
                d_pre.matmul_nt(&b.w0)
            }
            (AdjacencyDecoder::Shallow, None, None) => {
                // Z = ξ ξᵀ:  dξ = (dZ + dZᵀ) ξ.
                let mut d = d_logits_a.matmul(&xi_a);
                gemm(1.0, &d_logits_a, true, &xi_a, false, 1.0, &mut d);
                d
            }
            _ => return Err(Error::MissingIntermediates("adjacency decoder state")),
        };
        d_xi.add_to_columns(0, &d_xi_a);

        feature_sample_logits(
            &s.feat_logits,
            &data.targets,
            cfg.head,
            loss_cfg.clip_eps,
            Some((&mut d_logits_x, scale_x)),
        );
        let xi_x = s.xi.columns(split.feature_range());
        let hidden = s.feat_pre.relu();
        gemm(1.0, &hidden, true, &d_logits_x, false, 1.0, &mut grads.decoder.x1);
        let d_hidden = d_logits_x.matmul_nt(&w.decoder.x1);
        let d_pre = relu_backward(&d_hidden, &s.feat_pre);
        gemm(1.0, &xi_x, true, &d_pre, false, 1.0, &mut grads.decoder.x0);
        d_xi.add_to_columns(split.f_a, &d_pre.matmul_nt(&w.decoder.x0));

        // ξ = μ + σ ⊙ ε
        d_mu.add_assign(&d_xi);
        for (((g, &dx), &sg), &e) in d_ls
            .values_mut()
            .iter_mut()
            .zip(d_xi.values())
            .zip(sigma.values())
            .zip(s.eps.values())
        {
            *g += dx * sg * e;
        }
    }

    // θ prior.
    let theta_scale = 1.0 / loss_cfg.kappa_theta;
    if let (Some(gb), Some(b)) = (grads.decoder.adjacency.as_mut(), &w.decoder.adjacency) {
        gb.w0.axpy(theta_scale, &b.w0);
        gb.w1.axpy(theta_scale, &b.w1);
    }
    grads.decoder.x0.axpy(theta_scale, &w.decoder.x0);
    grads.decoder.x1.axpy(theta_scale, &w.decoder.x1);

    // Encoder.
    let d_mu_raw = merge_columns_backward(&d_mu, split);
    let d_ls_raw = merge_columns_backward(&d_ls, split);
    let enc = &state.encoder;
    gemm(1.0, &enc.propagated, true, &d_mu_raw, false, 1.0, &mut grads.encoder.w1_mu);
    gemm(1.0, &enc.propagated, true, &d_ls_raw, false, 1.0, &mut grads.encoder.w1_sigma);
    let mut d_prop = d_mu_raw.matmul_nt(&w.encoder.w1_mu);
    gemm(1.0, &d_ls_raw, false, &w.encoder.w1_sigma, true, 1.0, &mut d_prop);
    // Â is symmetric, so Âᵀ · d = Â · d.
    let d_relu = data.a_hat.spmm(&d_prop)?;
    let d_hidden = relu_backward(&d_relu, &enc.hidden_pre);
    gemm(1.0, &data.propagated_features, true, &d_hidden, false, 1.0, &mut grads.encoder.w0);
    Ok(grads)
}

/// ReLU derivative, taken as 0 at exactly 0.
fn relu_backward(grad: &DenseMatrix, pre: &DenseMatrix) -> DenseMatrix {
    grad.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

/// Forward followed by backward.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    w: &ModelWeights,
    data: &TrainingData,
    eps: Vec<DenseMatrix>,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    let state = forward(cfg, w, data, eps, loss_cfg)?;
    let grads = backward(cfg, w, data, &state, loss_cfg)?;
    Ok((state.breakdown, grads))
}

/// Signs of every ReLU pre-activation plus the clamp state of every
/// probability. Two weight settings with equal patterns lie in the same
/// smooth piece of the objective.
fn activation_pattern(state: &ForwardState, head: FeatureHead, clip_eps: f64) -> Vec<bool> {
    let bound = logit_bound(clip_eps);
    let mut bits = Vec::new();
    let push_signs = |bits: &mut Vec<bool>, m: &DenseMatrix| {
        bits.extend(m.values().iter().map(|&v| v > 0.0));
    };
    push_signs(&mut bits, &state.encoder.hidden_pre);
    for s in &state.samples {
        if let Some(pre) = &s.adj_pre {
            push_signs(&mut bits, pre);
        }
        push_signs(&mut bits, &s.feat_pre);
        bits.extend(s.adj_logits.values().iter().map(|&z| z.abs() <= bound));
        match head {
            FeatureHead::Multinomial => {
                let (lo, hi) = (clip_eps.ln(), (-clip_eps).ln_1p());
                bits.extend(log_softmax_rows(&s.feat_logits).values().iter().map(|l| (lo..=hi).contains(l)));
            }
            FeatureHead::Bernoulli => bits.extend(s.feat_logits.values().iter().map(|&z| z.abs() <= bound)),
            FeatureHead::Gaussian => {}
        }
    }
    bits
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|g_a − g_n| / max(1e-12, |g_a| + |g_n|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a ReLU kink or clip edge.
    pub skipped: usize,
    /// Weight matrix name and flat index of the worst coordinate.
    pub worst: Option<(&'static str, usize)>,
}

/// Largest step tried by [`finite_diff_check`].
pub const DEFAULT_FD_STEP: f64 = 1.6e-2;
/// Step halvings below the largest step.
const FD_LEVELS: usize = 10;

/// Compares `backward` against a fourth-order central difference
/// `(f(−2h) − 8 f(−h) + 8 f(h) − f(2h)) / 12h` of the total loss, holding
/// the noise draws fixed, for `h = step, step/2, …`. Each coordinate uses
/// the level that agrees best with its neighbour; levels whose probes leave
/// the activation pattern of the base point are discarded, and a
/// coordinate with no two usable neighbouring levels is skipped.
pub fn finite_diff_check(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    data: &TrainingData,
    eps: &[DenseMatrix],
    loss_cfg: &LossConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let base = forward(cfg, weights, data, eps.to_vec(), loss_cfg)?;
    let analytic = backward(cfg, weights, data, &base, loss_cfg)?;
    let pattern = activation_pattern(&base, cfg.head, loss_cfg.clip_eps);

    let mut probe = weights.clone();
    let names = weights.names();
    let analytic_mats = analytic.matrices();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    // Probe offsets ±2h0, ±h0, ±h0/2, …; level k pairs offsets k and k+1.
    let mags: Vec<f64> = (0..FD_LEVELS + 2).map(|j| 2.0 * step / f64::powi(2.0, j as i32)).collect();
    for (m, name) in names.iter().enumerate() {
        for idx in 0..analytic_mats[m].len() {
            let orig = probe.matrices()[m].values()[idx];
            let mut plus = vec![0.0; mags.len()];
            let mut minus = vec![0.0; mags.len()];
            let mut smooth = vec![true; mags.len()];
            for (j, &h) in mags.iter().enumerate() {
                for (sign, out) in [(1.0, &mut plus[j]), (-1.0, &mut minus[j])] {
                    probe.matrices_mut()[m].values_mut()[idx] = orig + sign * h;
                    let st = forward(cfg, &probe, data, eps.to_vec(), loss_cfg)?;
                    smooth[j] &= activation_pattern(&st, cfg.head, loss_cfg.clip_eps) == pattern;
                    *out = st.breakdown.total;
                }
            }
            probe.matrices_mut()[m].values_mut()[idx] = orig;
            // Differences first, so a flat direction yields exactly 0.
            let level = |k: usize| {
                let h = mags[k + 1];
                (8.0 * (plus[k + 1] - minus[k + 1]) - (plus[k] - minus[k])) / (12.0 * h)
            };
            let valid = |k: usize| smooth[k] && smooth[k + 1];
            // Truncation shrinks and round-off grows as h falls; the pair of
            // neighbouring levels that agree best sits between the two.
            let best = (0..FD_LEVELS)
                .filter(|&k| valid(k) && valid(k + 1))
                .map(|k| (k, (level(k) - level(k + 1)).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let Some((k, _)) = best else {
                report.skipped += 1;
                continue;
            };
            let numeric = level(k);
            let ga = analytic_mats[m].values()[idx];
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-12);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name, idx));
            }
        }
    }
    Ok(report)
}

/// How much of the embedding a random check instance shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapLevel {
    None,
    Half,
    Full,
}

/// A small self-contained problem for gradient checking.
#[derive(Debug, Clone)]
pub struct CheckInstance {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub data: TrainingData,
    pub eps: Vec<DenseMatrix>,
}

impl CheckInstance {
    /// Random graph with `4 ≤ N ≤ 10`, features matching `head`, Glorot
    /// weights and two noise samples.
    pub fn random(
        seed: u64,
        decoder: AdjacencyDecoder,
        head: FeatureHead,
        overlap: OverlapLevel,
    ) -> Result<CheckInstance> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut r = crate::rng::stream(seed, crate::rng::Stream::Data);
        let n = r.random_range(4..=10);
        let d = r.random_range(2..=5);
        let adjacency = loop {
            let p = r.random_range(0.2..0.6);
            let edges: Vec<_> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|_| r.random::<f64>() < p)
                .collect();
            let a = SparseAdjacency::from_edges(n, edges)?;
            if a.density() > 0.0 && a.density() < 1.0 {
                break a;
            }
        };
        let features = match head {
            FeatureHead::Multinomial => DenseMatrix::from_fn(n, d, |i, j| {
                ((i % d == j) as u8 as f64) + 0.1 * r.sample::<f64, _>(StandardNormal)
            }),
            FeatureHead::Bernoulli => {
                DenseMatrix::from_fn(n, d, |_, _| (r.random::<f64>() < 0.4) as u8 as f64)
            }
            FeatureHead::Gaussian => DenseMatrix::from_fn(n, d, |_, _| r.sample(StandardNormal)),
        };
        let per_task = 2 * r.random_range(1..=2);
        let split = match overlap {
            OverlapLevel::None => DimensionSplit::new(per_task, 0, per_task)?,
            OverlapLevel::Half => DimensionSplit::new(per_task / 2, per_task / 2, per_task / 2)?,
            OverlapLevel::Full => DimensionSplit::new(0, per_task, 0)?,
        };
        let config = ModelConfig {
            split,
            features: d,
            hidden_enc: r.random_range(3..=6),
            hidden_dec: r.random_range(3..=6),
            decoder,
            head,
        };
        let mut init = crate::rng::stream(seed, crate::rng::Stream::Init);
        let weights = ModelWeights::build(&config, |rows, cols| {
            crate::train::glorot_init(rows, cols, &mut init)
        });
        let data = TrainingData::new(adjacency, features, head, &LossConfig::default())?;
        let mut noise = crate::rng::stream(seed, crate::rng::Stream::Noise);
        let eps = crate::model::draw_noise(n, split.total(), 2, &mut noise);
        Ok(CheckInstance {
            config,
            weights,
            data,
            eps,
        })
    }

    /// `count` instances cycling through every decoder, head and overlap
    /// combination (18 of them), seeded from `seed`.
    pub fn suite(seed: u64, count: usize) -> Result<Vec<CheckInstance>> {
        const DECODERS: [AdjacencyDecoder; 2] = [AdjacencyDecoder::Deep, AdjacencyDecoder::Shallow];
        const HEADS: [FeatureHead; 3] =
            [FeatureHead::Multinomial, FeatureHead::Bernoulli, FeatureHead::Gaussian];
        const OVERLAPS: [OverlapLevel; 3] = [OverlapLevel::None, OverlapLevel::Half, OverlapLevel::Full];
        (0..count)
            .map(|k| {
                let s = crate::rng::mix(seed, k as u64);
                CheckInstance::random(s, DECODERS[k % 2], HEADS[(k / 2) % 3], OVERLAPS[(k / 6) % 3])
            })
            .collect()
    }

    pub fn check(&self, step: f64) -> Result<GradCheckReport> {
        finite_diff_check(
            &self.config,
            &self.weights,
            &self.data,
            &self.eps,
            &LossConfig::default(),
            step,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{draw_noise, DimensionSplit};
    use crate::rng::{self, Stream};
    use rand::Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn max_uncertainty_adjacency_is_n2_ln2() {
        let a = SparseAdjacency::from_edges(4, [(0, 1), (2, 3), (1, 2)]).unwrap();
        let p = DenseMatrix::filled(4, 4, 0.5);
        let l = adjacency_loss_balanced(&[p.clone(), p], &a, a.density(), &cfg()).unwrap();
        // Σ_ij ½ [A/d + (1−A)/(1−d)] ln 2 = ½ (N²d/d + N²(1−d)/(1−d)) ln 2.
        assert!((l - 16.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_two_node_loss() {
        let a = SparseAdjacency::from_edges(2, [(0, 1)]).unwrap();
        let p = DenseMatrix::from_rows(&[&[0.5, 0.9], &[0.9, 0.5]]);
        let l = adjacency_loss_balanced(&[p], &a, 0.5, &cfg()).unwrap();
        // Diagonal: 2 × ½ · 2 · ln 2; off-diagonal edges: 2 × ½ · 2 · (−ln 0.9).
        let expected = 2.0 * LN_2 - 2.0 * 0.9f64.ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 1.59702).abs() < 1e-5);
    }

    #[test]
    fn perfect_reconstruction_tends_to_zero() {
        let a = SparseAdjacency::from_edges(3, [(0, 1)]).unwrap();
        let p = a.to_dense();
        let mut prev = f64::INFINITY;
        for &eps in &[1e-3, 1e-5, 1e-7, 1e-9] {
            let c = LossConfig { clip_eps: eps, ..cfg() };
            let l = adjacency_loss_balanced(&[p.clone()], &a, a.density(), &c).unwrap();
            assert!(l < prev && l < 1e-2);
            prev = l;
        }
    }

    #[test]
    fn degenerate_density_errors() {
        let a = SparseAdjacency::empty(3);
        let p = DenseMatrix::filled(3, 3, 0.5);
        assert!(matches!(
            adjacency_loss_balanced(&[p], &a, 0.0, &cfg()),
            Err(Error::DegenerateGraph(_))
        ));
        assert!(TrainingData::new(a, DenseMatrix::zeros(3, 2), FeatureHead::Multinomial, &cfg()).is_err());
    }

    #[test]
    fn diagonal_flag() {
        let a = SparseAdjacency::from_edges(2, [(0, 1)]).unwrap();
        let p = DenseMatrix::from_rows(&[&[0.5, 0.9], &[0.9, 0.5]]);
        let c = LossConfig { include_diagonal: false, ..cfg() };
        let l = adjacency_loss_balanced(&[p], &a, 0.5, &c).unwrap();
        assert!((l + 2.0 * 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_examples() {
        let x = DenseMatrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let uniform = DenseMatrix::filled(2, 3, 1.0 / 3.0);
        let l = feature_loss(&[uniform], &x, FeatureHead::Multinomial, 1e-7).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!(feature_loss(&[x.clone()], &x, FeatureHead::Multinomial, 1e-12).unwrap() < 1e-9);

        let x = DenseMatrix::from_rows(&[&[1.0, 0.0]]);
        let p = DenseMatrix::from_rows(&[&[0.8, 0.2]]);
        let l = feature_loss(&[p], &x, FeatureHead::Multinomial, 1e-7).unwrap();
        assert!((l + 0.8f64.ln()).abs() < 1e-12);
        assert!((l - 0.22314).abs() < 1e-5);

        let p = DenseMatrix::from_rows(&[&[0.5, 0.5]]);
        let l = feature_loss(&[p], &x, FeatureHead::Bernoulli, 1e-7).unwrap();
        assert!((l / feature_normalizer(FeatureHead::Bernoulli, 1, 2) - 1.0).abs() < 1e-12);

        let m = DenseMatrix::from_rows(&[&[0.0, 1.0]]);
        let l = feature_loss(&[m], &x, FeatureHead::Gaussian, 1e-7).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let d = |m: f64, ls: f64| EmbeddingDistribution {
            mu: DenseMatrix::filled(1, 1, m),
            log_sigma: DenseMatrix::filled(1, 1, ls),
        };
        assert_eq!(kl_loss(&d(0.0, 0.0)), 0.0);
        assert!((kl_loss(&d(1.0, 0.0)) - 0.5).abs() < 1e-15);
        let e2 = 1f64.exp().powi(2);
        assert!((kl_loss(&d(0.0, 1.0)) - (e2 - 3.0) / 2.0).abs() < 1e-12);
        assert!((kl_loss(&d(0.0, 1.0)) - 2.19453).abs() < 1e-5);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut r = rng::stream(3, Stream::Init);
        for _ in 0..200 {
            let m = r.random_range(-3.0..3.0);
            let ls = r.random_range(-3.0..3.0);
            let v = kl_loss(&EmbeddingDistribution {
                mu: DenseMatrix::filled(1, 1, m),
                log_sigma: DenseMatrix::filled(1, 1, ls),
            });
            assert!(v > 0.0);
        }
    }

    #[test]
    fn theta_examples() {
        let mut w = DecoderWeights {
            adjacency: None,
            x0: DenseMatrix::zeros(2, 2),
            x1: DenseMatrix::zeros(2, 3),
        };
        assert_eq!(theta_loss(&w, 500.0), 0.0);
        w.x0.set(0, 1, 3.0);
        assert!((theta_loss(&w, 500.0) - 0.009).abs() < 1e-15);
        w.x1.set(1, 1, -1.5);
        let base = theta_loss(&w, 500.0);
        w.x0.scale(2.5);
        w.x1.scale(2.5);
        assert!((theta_loss(&w, 500.0) - 6.25 * base).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            l_a_balanced: 9.0 * LN_2 * 9.0 / 9.0,
            l_x: 3.0 * 5f64.ln(),
            l_kl: 0.0,
            l_theta: 0.0,
        };
        let b = total_loss(parts, 3, 5, 4, FeatureHead::Multinomial, &cfg());
        assert!((b.l_a_scaled - 1.0).abs() < 1e-12);
        assert!((b.l_x_scaled - 1.0).abs() < 1e-12);
        assert!((b.total - 2.0).abs() < 1e-12);

        let zero = LossParts { l_a_balanced: 0.0, l_x: 0.0, l_kl: 0.0, l_theta: 0.0 };
        assert_eq!(total_loss(zero, 3, 5, 4, FeatureHead::Multinomial, &cfg()).total, 0.0);

        // Doubling N with identical per-pair and per-node losses.
        let per_pair = 0.37;
        let per_node = 0.81;
        let at = |n: usize| {
            let p = LossParts {
                l_a_balanced: per_pair * (n * n) as f64,
                l_x: per_node * n as f64,
                l_kl: 2.0 * n as f64,
                l_theta: 0.1,
            };
            total_loss(p, n, 6, 4, FeatureHead::Multinomial, &cfg())
        };
        assert!((at(10).l_a_scaled - at(20).l_a_scaled).abs() < 1e-15);
        assert!((at(10).l_x_scaled - at(20).l_x_scaled).abs() < 1e-15);
        assert!((at(10).l_kl_scaled - at(20).l_kl_scaled).abs() < 1e-15);

        let k = total_loss(
            LossParts { l_a_balanced: 0.0, l_x: 0.0, l_kl: 8.0, l_theta: 0.0 },
            2,
            3,
            4,
            FeatureHead::Multinomial,
            &cfg(),
        );
        assert!((k.l_kl_scaled - 8.0 / (2.0 * 4.0 * 1000.0)).abs() < 1e-18);
    }

    fn tiny_problem(
        decoder: AdjacencyDecoder,
        head: FeatureHead,
        split: DimensionSplit,
        seed: u64,
    ) -> (ModelConfig, ModelWeights, TrainingData, Vec<DenseMatrix>) {
        let mut r = rng::stream(seed, Stream::Init);
        let n = 6;
        let d = 3;
        let mut edges = vec![(0, 1), (1, 2), (3, 4)];
        edges.push((r.random_range(0..3), r.random_range(3..6)));
        let a = SparseAdjacency::from_edges(n, edges).unwrap();
        let x = match head {
            FeatureHead::Bernoulli => {
                DenseMatrix::from_fn(n, d, |_, _| if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
            }
            FeatureHead::Multinomial => DenseMatrix::from_fn(n, d, |i, j| {
                ((i % d == j) as u8 as f64) + 0.1 * (r.random::<f64>() - 0.5)
            }),
            FeatureHead::Gaussian => DenseMatrix::from_fn(n, d, |_, _| r.random::<f64>()),
        };
        let cfg = ModelConfig {
            split,
            features: d,
            hidden_enc: 4,
            hidden_dec: 4,
            decoder,
            head,
        };
        let w = ModelWeights::build(&cfg, |rows, cols| {
            DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
        });
        let data = TrainingData::new(a, x, head, &LossConfig::default()).unwrap();
        let mut nr = rng::stream(seed, Stream::Noise);
        let eps = draw_noise(n, split.total(), 2, &mut nr);
        (cfg, w, data, eps)
    }

    #[test]
    fn kl_gradient_matches_closed_form() {
        let split = DimensionSplit::new(2, 2, 2).unwrap();
        let (cfg, w, data, eps) =
            tiny_problem(AdjacencyDecoder::Deep, FeatureHead::Multinomial, split, 1);
        let st = forward(&cfg, &w, &data, eps, &LossConfig::default()).unwrap();
        // Isolate the KL path: ∂(L_KL scaled)/∂μ = μ / (N F κ).
        let n = data.n() as f64;
        let f = split.total() as f64;
        let mu = 2.0;
        let scaled = mu / (n * f * 1000.0);
        let dist = EmbeddingDistribution {
            mu: DenseMatrix::filled(1, 1, mu),
            log_sigma: DenseMatrix::zeros(1, 1),
        };
        let h = 1e-6;
        let mut plus = dist.clone();
        plus.mu.set(0, 0, mu + h);
        let mut minus = dist.clone();
        minus.mu.set(0, 0, mu - h);
        let fd = (kl_loss(&plus) - kl_loss(&minus)) / (2.0 * h) / (n * f * 1000.0);
        assert!((fd - scaled).abs() < 1e-12);
        assert!(st.breakdown.total.is_finite());
    }

    #[test]
    fn zero_decoder_weights_have_zero_theta_gradient() {
        let split = DimensionSplit::new(1, 1, 1).unwrap();
        let (cfg, mut w, data, eps) =
            tiny_problem(AdjacencyDecoder::Deep, FeatureHead::Multinomial, split, 2);
        w.decoder.x0.map_inplace(|_| 0.0);
        w.decoder.x1.map_inplace(|_| 0.0);
        if let Some(b) = &mut w.decoder.adjacency {
            b.w0.map_inplace(|_| 0.0);
            b.w1.map_inplace(|_| 0.0);
        }
        let (b, g) = loss_and_grad(&cfg, &w, &data, eps, &LossConfig::default()).unwrap();
        assert_eq!(b.l_theta, 0.0);
        // With every decoder weight at zero the decoders output constants,
        // so no reconstruction gradient reaches them through ReLU(0) either.
        assert!(g.decoder.x0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, decoder, head, split) in [
            (3, AdjacencyDecoder::Deep, FeatureHead::Multinomial, DimensionSplit::new(2, 2, 2).unwrap()),
            (4, AdjacencyDecoder::Shallow, FeatureHead::Multinomial, DimensionSplit::new(2, 0, 2).unwrap()),
            (5, AdjacencyDecoder::Deep, FeatureHead::Bernoulli, DimensionSplit::new(0, 3, 0).unwrap()),
            (6, AdjacencyDecoder::Shallow, FeatureHead::Gaussian, DimensionSplit::new(1, 1, 2).unwrap()),
        ] {
            let (cfg, w, data, eps) = tiny_problem(decoder, head, split, seed);
            let r = finite_diff_check(&cfg, &w, &data, &eps, &LossConfig::default(), DEFAULT_FD_STEP).unwrap();
            assert!(r.checked > 0);
            assert!(r.max_rel_error < 1e-5, "{decoder:?}/{head:?}: {r:?}");
        }
    }

    #[test]
    fn exact_kinks_are_skipped() {
        let split = DimensionSplit::new(1, 1, 1).unwrap();
        let (cfg, mut w, data, eps) =
            tiny_problem(AdjacencyDecoder::Deep, FeatureHead::Multinomial, split, 7);
        // Zero one encoder hidden unit: its pre-activation is exactly 0 for
        // every node, so perturbing its incoming weights crosses the kink.
        for r in 0..w.encoder.w0.rows() {
            w.encoder.w0.set(r, 0, 0.0);
        }
        let r = finite_diff_check(&cfg, &w, &data, &eps, &LossConfig::default(), DEFAULT_FD_STEP).unwrap();
        assert!(r.skipped >= w.encoder.w0.rows());
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn permutation_invariance() {
        let split = DimensionSplit::new(1, 2, 1).unwrap();
        let (cfg, w, data, eps) =
            tiny_problem(AdjacencyDecoder::Deep, FeatureHead::Multinomial, split, 8);
        let perm = [3, 0, 5, 1, 2, 4];
        let a = data.adjacency.permute(&perm);
        let permute_rows = |m: &DenseMatrix| {
            let mut out = DenseMatrix::zeros(m.rows(), m.cols());
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(p).copy_from_slice(m.row(i));
            }
            out
        };
        let pdata =
            TrainingData::new(a, permute_rows(&data.features), cfg.head, &LossConfig::default())
                .unwrap();
        let peps: Vec<_> = eps.iter().map(permute_rows).collect();
        let l0 = forward(&cfg, &w, &data, eps, &LossConfig::default()).unwrap().breakdown.total;
        let l1 = forward(&cfg, &w, &pdata, peps, &LossConfig::default()).unwrap().breakdown.total;
        assert!((l0 - l1).abs() < 1e-12, "{l0} vs {l1}");
    }

    #[test]
    fn clipping_keeps_total_finite() {
        let split = DimensionSplit::new(1, 1, 1).unwrap();
        let (cfg, mut w, data, eps) =
            tiny_problem(AdjacencyDecoder::Deep, FeatureHead::Multinomial, split, 9);
        // Saturate the decoders only; the encoder feeds exp(2 log σ).
        w.decoder.x1.scale(1e4);
        if let Some(b) = &mut w.decoder.adjacency {
            b.w1.scale(1e4);
        }
        let b = forward(&cfg, &w, &data, eps, &LossConfig::default()).unwrap().breakdown;
        assert!(b.total.is_finite());
    }

    #[test]
    fn suite_covers_all_variants_within_tolerance() {
        let suite = CheckInstance::suite(11, 20).unwrap();
        let combos: std::collections::HashSet<_> = suite
            .iter()
            .map(|c| (c.config.decoder, c.config.head, c.config.split.f_a == 0, c.config.split.f_ax == 0))
            .collect();
        assert_eq!(combos.len(), 18);
        for inst in &suite {
            let r = inst.check(DEFAULT_FD_STEP).unwrap();
            assert!(r.max_rel_error < 1e-5, "{:?}: {r:?}", inst.config);
        }
    }

}
