//! Mini-batch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grads, ModelConfig, ModelParams};
use crate::pipeline::WindowSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let shapes_match = params
        .tensors()
        .iter()
        .zip(grads.tensors())
        .all(|(p, g)| p.shape() == g.shape())
        && params.tensors().len() == grads.tensors().len();
    if !shapes_match {
        return Err(Error::InvalidArgument(
            "gradient shapes do not match parameters".into(),
        ));
    }
    let AdamConfig { beta1, beta2, eps } = config.adam;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let lr = config.learning_rate;

    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        let p = p.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains a freshly initialised model on `samples`.
///
/// Initialisation, per-epoch shuffling and dropout masks all derive from
/// `train_config.seed`, so equal inputs give bitwise-equal parameters.
pub fn train(samples: &[WindowSample], model_config: &ModelConfig, train_config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(samples, model_config, train_config, |_, _| {})
}

/// [`train`] with a callback invoked after each epoch with `(epoch, mean loss)`.
pub fn train_with_progress<F>(
    samples: &[WindowSample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, f64),
{
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    model_config.validate()?;
    train_config.validate()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut params = ModelParams::init(model_config, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x5348_5546);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x4452_4f50);
    let mut state = AdamState::new(&params);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut batch = Vec::with_capacity(train_config.batch_size);
    for epoch in 0..train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let rng = (model_config.dropout > 0.0).then_some(&mut dropout_rng);
            let (loss, grads) = loss_and_grads(&batch, &params, model_config, rng)?;
            optimizer_step(&mut params, &grads, &mut state, train_config)?;
            total += loss * chunk.len() as f64;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Pooling};
    use crate::pipeline::{EventId, WindowOrigin};
    use crate::tensor::Matrix;
    use std::sync::Arc;

    fn small_config(n: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            d_ff: 32,
            window: 4,
            num_events: n,
            top_k: 1,
            dropout: 0.0,
            pooling: Pooling::Last,
        }
    }

    fn sample(window: &[u32], target: u32) -> WindowSample {
        WindowSample {
            window: window.iter().map(|&i| EventId(i)).collect(),
            target: EventId(target),
            origin: WindowOrigin {
                session_id: Arc::from("s"),
                target_index: window.len(),
            },
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let c = small_config(3);
        let mut p = ModelParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let c = small_config(3);
        let mut p = ModelParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head_b = Matrix::row_vector(vec![0.5, -2.0, 1e-3]);
        let cfg = TrainConfig::default();
        let mut s = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut s, &cfg).unwrap();
        // m̂ = g and v̂ = g² after one step, so the update is -lr·g/(|g|+eps)
        for (i, gi) in [0.5f64, -2.0, 1e-3].iter().enumerate() {
            let delta = p.head_b.data()[i] - before.head_b.data()[i];
            let expect = -cfg.learning_rate * gi / (gi.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-15, "{delta} vs {expect}");
            assert!((delta.abs() - cfg.learning_rate).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let c = small_config(3);
        let mut p = ModelParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.layers[0].b_2 = Matrix::zeros(1, 16);
        p.layers[0].ln1_bias = Matrix::zeros(1, 16);
        let mut g = p.zeros_like();
        let grad = Matrix::row_vector((0..16).map(|i| i as f64 - 7.5).collect());
        g.layers[0].b_2 = grad.clone();
        g.layers[0].ln1_bias = grad;
        let mut s = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p.layers[0].b_2, p.layers[0].ln1_bias);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = ModelParams::init(&small_config(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = ModelParams::init(&small_config(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut s = AdamState::new(&p);
        assert!(optimizer_step(&mut p, &g, &mut s, &TrainConfig::default()).is_err());
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let c = small_config(3);
        assert!(matches!(train(&[], &c, &TrainConfig::default()), Err(Error::EmptyTrainingSet)));
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&[sample(&[0, 0, 1, 2], 3)], &c, &bad).is_err());
    }

    #[test]
    fn degenerate_corpus_is_learned_and_deterministic() {
        // a, b -> c is the only pattern, so c is the only possible answer
        let c = small_config(3);
        let samples: Vec<_> = (0..2048).map(|_| sample(&[0, 0, 1, 2], 3)).collect();
        let cfg = TrainConfig {
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train(&samples, &c, &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 5);
        assert!(*out.loss_history.last().unwrap() < 0.01, "{:?}", out.loss_history);
        let p = forward(&samples[0].window, &out.params, &c, None).unwrap();
        let best = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(EventId::from_class_index(best), EventId(3));

        let again = train(&samples, &c, &cfg).unwrap();
        assert_eq!(again.params, out.params);
        assert_eq!(again.loss_history, out.loss_history);
    }

    #[test]
    fn dropout_training_is_seeded() {
        let c = ModelConfig {
            dropout: 0.1,
            ..small_config(4)
        };
        let samples: Vec<_> = (0..64)
            .map(|i| sample(&[0, 1, 2, 3], 1 + (i % 4) as u32))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&samples, &c, &cfg).unwrap();
        let b = train(&samples, &c, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.is_finite());
        let other = train(&samples, &c, &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.params, other.params);
    }
}
