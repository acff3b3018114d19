//! Initialization, Adam, and the full-batch training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{backward, evaluate_at_mean, forward, LossBreakdown, LossConfig, TrainingData};
use crate::matrix::DenseMatrix;
use crate::model::{draw_noise, Checkpoint, GradientSet, ModelConfig, ModelWeights, SeedLineage};
use crate::rng::{self, Stream};
use crate::synth::FeaturedGraph;

/// Uniform on `±√(6 / (rows + cols))`.
pub fn glorot_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "glorot_init needs nonzero fan-in and fan-out");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

pub fn init_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut r = rng::stream(seed, Stream::Init);
    ModelWeights::build(cfg, |rows, cols| glorot_init(rows, cols, &mut r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ModelWeights, lr: f64) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(weights: &mut ModelWeights, grads: &GradientSet, state: &mut AdamState) {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (lr, eps) = (state.lr, state.eps);
    let mut ms = state.m.matrices_mut();
    let mut vs = state.v.matrices_mut();
    for (((w, g), m), v) in weights
        .matrices_mut()
        .into_iter()
        .zip(grads.matrices())
        .zip(ms.iter_mut())
        .zip(vs.iter_mut())
    {
        assert_eq!(w.shape(), g.shape(), "adam_step: gradient layout");
        for (((wi, &gi), mi), vi) in w
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *wi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub k_samples: usize,
    pub lr: f64,
    pub seed: u64,
    /// Also evaluate the noise-free loss (`ξ = μ`) every epoch.
    pub track_mean_loss: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.k_samples == 0 {
            return Err(Error::Config("epochs and k_samples must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn seed_lineage(&self) -> SeedLineage {
        SeedLineage {
            master: self.seed,
            init_stream: Stream::Init as u64,
            noise_stream: Stream::Noise as u64,
        }
    }
}

/// Loss of one epoch, measured on the weights before that epoch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub total_at_mean: Option<f64>,
}

pub const TRACE_HEADER: &str =
    "epoch,l_a_scaled,l_x_scaled,l_kl_scaled,l_theta_scaled,total_stochastic,total_at_mean";

impl EpochRecord {
    /// Trace CSV row; floats use the shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let mean = self.total_at_mean.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, l.l_a_scaled, l.l_x_scaled, l.l_kl_scaled, l.l_theta_scaled, l.total, mean
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Epoch record with the minimum stochastic total; ties go to the earliest.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.loss.total <= r.loss.total => Some(b),
            _ => Some(r),
        })
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub trace: TrainTrace,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            schema_version: Checkpoint::SCHEMA_VERSION,
            config: cfg.model,
            seeds: cfg.seed_lineage(),
            epochs_trained: self.trace.records.len(),
            weights: self.weights.clone(),
        }
    }
}

pub fn train(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(data, cfg, |_| Ok(()))
}

/// Builds the training data from a featured graph, then trains.
pub fn train_graph(graph: &FeaturedGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = TrainingData::new(
        graph.adjacency.clone(),
        graph.features.clone(),
        cfg.model.head,
        &cfg.loss,
    )?;
    train(&data, cfg)
}

/// Training loop that hands every epoch record to `on_epoch` as soon as it
/// exists, so callers can persist a partial trace before a failure.
pub fn train_observed(
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.features.cols() != cfg.model.features {
        return Err(Error::dim("train: feature count", cfg.model.features, data.features.cols()));
    }
    let n = data.n();
    let f = cfg.model.split.total();
    let mut weights = init_weights(&cfg.model, cfg.seed);
    let mut adam = AdamState::new(&weights, cfg.lr);
    let mut noise = rng::stream(cfg.seed, Stream::Noise);
    let mut trace = TrainTrace {
        records: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        let eps = draw_noise(n, f, cfg.k_samples, &mut noise);
        let state = forward(&cfg.model, &weights, data, eps, &cfg.loss)?;
        let total_at_mean = if cfg.track_mean_loss {
            Some(evaluate_at_mean(&cfg.model, &weights, data, &cfg.loss)?.total)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: state.breakdown,
            total_at_mean,
        };
        on_epoch(&record)?;
        if let Some(component) = state.breakdown.non_finite_component() {
            return Err(Error::NonFiniteLoss { epoch, component });
        }
        trace.records.push(record);
        let grads = backward(&cfg.model, &weights, data, &state, &cfg.loss)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                component: "gradient",
            });
        }
        adam_step(&mut weights, &grads, &mut adam);
    }
    Ok(TrainOutcome { weights, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdjacencyDecoder, DimensionSplit, FeatureHead};
    use crate::synth::{generate_featured, FeatureConfig, SbmConfig};
    use proptest::prelude::*;

    #[test]
    fn glorot_bounds() {
        let mut r = rng::stream(1, Stream::Init);
        let one = glorot_init(1, 1, &mut r);
        let b = 3f64.sqrt();
        for _ in 0..1000 {
            let v = glorot_init(1, 1, &mut r).get(0, 0);
            assert!(v.abs() <= b);
        }
        assert!(one.get(0, 0).abs() <= b);
        assert!((b - 1.73205).abs() < 1e-5);
    }

    #[test]
    fn glorot_variance() {
        let mut r = rng::stream(2, Stream::Init);
        let mut vals = Vec::with_capacity(100_000);
        while vals.len() < 100_000 {
            vals.extend_from_slice(glorot_init(50, 50, &mut r).values());
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - 0.02).abs() < 0.05 * 0.02, "variance {var}");
    }

    fn small_weights() -> ModelWeights {
        let cfg = ModelConfig {
            split: DimensionSplit::new(1, 1, 1).unwrap(),
            features: 2,
            hidden_enc: 2,
            hidden_dec: 2,
            decoder: AdjacencyDecoder::Deep,
            head: FeatureHead::Multinomial,
        };
        init_weights(&cfg, 3)
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut w = small_weights();
        let orig = w.clone();
        let g = w.zeros_like();
        let mut st = AdamState::new(&w, 0.01);
        for _ in 0..10 {
            adam_step(&mut w, &g, &mut st);
        }
        assert_eq!(w, orig);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = small_weights();
        let orig = w.clone();
        let mut g = w.zeros_like();
        for (k, m) in g.matrices_mut().into_iter().enumerate() {
            m.map_inplace(|_| 0.3 * (k as f64 + 1.0) * if k % 2 == 0 { 1.0 } else { -1.0 });
        }
        let mut st = AdamState::new(&w, 0.01);
        adam_step(&mut w, &g, &mut st);
        for ((a, b), gm) in w.matrices().iter().zip(orig.matrices()).zip(g.matrices()) {
            for ((x, y), gi) in a.values().iter().zip(b.values()).zip(gm.values()) {
                let step = y - x;
                assert!((step.abs() - 0.01).abs() < 1e-9);
                assert_eq!(step.signum(), gi.signum());
            }
        }
    }

    #[test]
    fn adam_constant_gradient_approaches_lr() {
        let mut w = small_weights();
        let mut g = w.zeros_like();
        for m in g.matrices_mut() {
            m.map_inplace(|_| 0.7);
        }
        let mut st = AdamState::new(&w, 0.01);
        for _ in 0..500 {
            adam_step(&mut w, &g, &mut st);
        }
        let before = w.encoder.w0.get(0, 0);
        adam_step(&mut w, &g, &mut st);
        assert!(((before - w.encoder.w0.get(0, 0)) - 0.01).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn adam_second_moment_nonnegative(gs in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut w = small_weights();
            let mut st = AdamState::new(&w, 0.05);
            for gv in gs {
                let mut g = w.zeros_like();
                for m in g.matrices_mut() {
                    m.map_inplace(|_| gv);
                }
                adam_step(&mut w, &g, &mut st);
                prop_assert!(st.v.matrices().iter().all(|m| m.values().iter().all(|&v| v >= 0.0)));
            }
        }
    }

    fn sbm_graph(seed: u64) -> FeaturedGraph {
        let sbm = SbmConfig { m: 10, n: 10, p_in: 0.25, p_out: 0.01 };
        generate_featured(&sbm, &FeatureConfig { alpha: 1.0, noise_sigma: 0.1 }, seed).unwrap()
    }

    fn cfg_for(graph: &FeaturedGraph, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                split: DimensionSplit::overlapping(20, 5).unwrap(),
                features: graph.num_features(),
                hidden_enc: 50,
                hidden_dec: 50,
                decoder: AdjacencyDecoder::Deep,
                head: FeatureHead::Multinomial,
            },
            loss: LossConfig::default(),
            epochs,
            k_samples: 5,
            lr: 0.01,
            seed,
            track_mean_loss: true,
        }
    }

    #[test]
    fn training_is_deterministic() {
        let g = sbm_graph(1);
        let cfg = cfg_for(&g, 5, 9);
        let a = train_graph(&g, &cfg).unwrap();
        let b = train_graph(&g, &cfg).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn k_does_not_change_initialization() {
        let g = sbm_graph(1);
        let c1 = cfg_for(&g, 1, 4);
        let c2 = TrainConfig { k_samples: 1, ..c1 };
        let a = train_graph(&g, &c1).unwrap();
        let b = train_graph(&g, &c2).unwrap();
        assert_eq!(a.trace.records[0].total_at_mean, b.trace.records[0].total_at_mean);
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let g = sbm_graph(2);
        let cfg = TrainConfig { lr: 0.0, ..cfg_for(&g, 4, 5) };
        let out = train_graph(&g, &cfg).unwrap();
        assert_eq!(out.weights, init_weights(&cfg.model, cfg.seed));
        let means: Vec<_> = out.trace.records.iter().map(|r| r.total_at_mean).collect();
        assert!(means.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn descent_smoke() {
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in 0..5 {
            let g = sbm_graph(100 + seed);
            let out = train_graph(&g, &cfg_for(&g, 200, seed)).unwrap();
            let r = &out.trace.records;
            assert_eq!(r.len(), 200);
            assert!(r[199].loss.total < r[0].loss.total);
            first += r[0].loss.total;
            last += r[199].loss.total;
        }
        assert!(last < 0.9 * first, "{last} vs {first}");
    }

    #[test]
    fn best_prefers_earliest_minimum() {
        let rec = |epoch, total| EpochRecord {
            epoch,
            loss: LossBreakdown { total, ..Default::default() },
            total_at_mean: None,
        };
        let t = TrainTrace { records: vec![rec(1, 3.0), rec(2, 1.0), rec(3, 1.0), rec(4, 2.0)] };
        assert_eq!(t.best().unwrap().epoch, 2);
        assert!(t.to_csv().lines().nth(2).unwrap().ends_with(",1,"));
    }

    #[test]
    fn non_finite_loss_aborts_with_epoch() {
        let g = sbm_graph(3);
        let cfg = TrainConfig { lr: 1e300, ..cfg_for(&g, 5, 1) };
        let mut seen = 0;
        let err = train_observed(
            &TrainingData::new(g.adjacency.clone(), g.features.clone(), cfg.model.head, &cfg.loss)
                .unwrap(),
            &cfg,
            |_| {
                seen += 1;
                Ok(())
            },
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, .. } => assert_eq!(epoch, seen),
            other => panic!("unexpected {other:?}"),
        }
    }
}
