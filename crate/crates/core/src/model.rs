//! The attention network: event + sinusoidal position embedding, a stack of
//! post-norm multi-head self-attention blocks, and a softmax head over the
//! trained events.
//!
//! All forward passes are recorded on a [`GradTape`], so the same code path
//! serves inference, training and gradient checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{EventId, WindowSample};
use crate::tape::{AttentionSpec, GradTape, Var};
use crate::tensor::{softmax_rows, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the final `l x d` block output is reduced to one vector per window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Row of the most recent window position.
    Last,
    /// Mean over non-padding positions.
    Mean,
}

impl Pooling {
    pub fn code(self) -> u8 {
        match self {
            Pooling::Last => 0,
            Pooling::Mean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Pooling> {
        match code {
            0 => Some(Pooling::Last),
            1 => Some(Pooling::Mean),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Window length `l`.
    pub window: usize,
    /// Number of trained events `n` (padding excluded).
    pub num_events: usize,
    pub top_k: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl ModelConfig {
    /// Table-1 style defaults for a vocabulary of `num_events`.
    pub fn with_events(num_events: usize) -> Self {
        ModelConfig {
            d_model: 256,
            heads: 8,
            layers: 4,
            d_ff: 1024,
            window: 10,
            num_events,
            top_k: 4,
            dropout: 0.1,
            pooling: Pooling::Last,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
            ("window", self.window),
            ("num_events", self.num_events),
            ("top_k", self.top_k),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Weights of one attention block. Head `i` of the query/key/value
/// projections is the column block `i * d/h .. (i + 1) * d/h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub b_1: Matrix,
    pub w_2: Matrix,
    pub b_2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl LayerParams {
    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    const NAMES: [&'static str; 12] = [
        "w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2", "ln1_gain", "ln1_bias", "ln2_gain",
        "ln2_bias",
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `(n + 1) x d`; row 0 embeds padding.
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ModelParams {
    /// Uniform `[-1/sqrt(d), 1/sqrt(d)]` weights, zero biases, unit gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.d_model as f64).sqrt();
        let mut uniform = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect();
            Matrix::from_vec(r, c, data).expect("shape")
        };
        let (d, f, n) = (config.d_model, config.d_ff, config.num_events);
        let embedding = uniform(n + 1, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: uniform(d, d),
                w_k: uniform(d, d),
                w_v: uniform(d, d),
                w_o: uniform(d, d),
                w_1: uniform(d, f),
                b_1: Matrix::zeros(1, f),
                w_2: uniform(f, d),
                b_2: Matrix::zeros(1, d),
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
            })
            .collect();
        let head_w = uniform(d, n);
        Ok(ModelParams {
            embedding,
            layers,
            head_w,
            head_b: Matrix::zeros(1, n),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            let (r, c) = t.shape();
            *t = Matrix::zeros(r, c);
        }
        z
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Canonical tensor names, aligned with [`tensors`](Self::tensors).
    pub fn tensor_names(layers: usize) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for i in 0..layers {
            out.extend(LayerParams::NAMES.iter().map(|n| format!("layer{i}.{n}")));
        }
        out.push("head_w".into());
        out.push("head_b".into());
        out
    }

    /// Expected tensor shapes for a config, aligned with [`tensors`](Self::tensors).
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let (d, f, n) = (config.d_model, config.d_ff, config.num_events);
        let layer = [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, f),
            (1, f),
            (f, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        let mut out = vec![(n + 1, d)];
        for _ in 0..config.layers {
            out.extend(layer);
        }
        out.push((d, n));
        out.push((1, n));
        out
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let shapes = Self::expected_shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} tensors for a config expecting {}",
                tensors.len(),
                shapes.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != *s {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {i} has shape {:?}, config expects {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let embedding = next();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                w_1: next(),
                b_1: next(),
                w_2: next(),
                b_2: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        Ok(ModelParams {
            embedding,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Sinusoidal position table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    let mut pe = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

struct LayerVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    w_1: Var,
    b_1: Var,
    w_2: Var,
    b_2: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

impl LayerVars {
    fn register(tape: &mut GradTape, layer: &LayerParams, trainable: bool) -> Self {
        let mut reg = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.input(m.clone())
            }
        };
        LayerVars {
            w_q: reg(&layer.w_q),
            w_k: reg(&layer.w_k),
            w_v: reg(&layer.w_v),
            w_o: reg(&layer.w_o),
            w_1: reg(&layer.w_1),
            b_1: reg(&layer.b_1),
            w_2: reg(&layer.w_2),
            b_2: reg(&layer.b_2),
            ln1_gain: reg(&layer.ln1_gain),
            ln1_bias: reg(&layer.ln1_bias),
            ln2_gain: reg(&layer.ln2_gain),
            ln2_bias: reg(&layer.ln2_bias),
        }
    }
}

struct BlockShape<'a> {
    heads: usize,
    window: usize,
    key_mask: &'a [bool],
    dropout: f64,
    /// Compute only the last query position of every window.
    last_only: bool,
}

/// One post-norm encoder block. Returns the block output and its attention node.
fn block(
    tape: &mut GradTape,
    x: Var,
    w: &LayerVars,
    shape: &BlockShape<'_>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let l = shape.window;
    let batch = tape.value(x).rows() / l;
    // rows are position-wise after attention, so the final block can drop
    // every query row except the last without changing that row's value
    let query_src = if shape.last_only {
        tape.gather_rows(x, (0..batch).map(|s| s * l + l - 1).collect())?
    } else {
        x
    };
    let q = tape.matmul(query_src, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let spec = AttentionSpec {
        heads: shape.heads,
        query_len: if shape.last_only { 1 } else { l },
        key_len: l,
        key_mask: shape.key_mask.to_vec(),
    };
    let att = tape.attention(q, k, v, spec)?;
    let mut s = tape.matmul(att, w.w_o)?;
    if let Some(r) = rng.as_deref_mut() {
        s = tape.dropout(s, shape.dropout, r);
    }
    let res1 = tape.add(query_src, s)?;
    let h1 = tape.layer_norm(res1, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;

    let f = tape.matmul(h1, w.w_1)?;
    let f = tape.add_row(f, w.b_1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w.w_2)?;
    let mut f = tape.add_row(f, w.b_2)?;
    if let Some(r) = rng {
        f = tape.dropout(f, shape.dropout, r);
    }
    let res2 = tape.add(h1, f)?;
    let out = tape.layer_norm(res2, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)?;
    Ok((out, att))
}

/// Handles into a recorded forward pass.
pub struct ForwardGraph {
    /// `batch x n` unnormalised scores.
    pub logits: Var,
    /// Per block: its output node and its attention node.
    pub blocks: Vec<(Var, Var)>,
    pub embedded: Var,
}

fn check_windows(windows: &[&[EventId]], config: &ModelConfig) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for w in windows {
        if w.len() != config.window {
            return Err(Error::InvalidArgument(format!(
                "window of length {} (expected {})",
                w.len(),
                config.window
            )));
        }
        if let Some(bad) = w.iter().find(|e| e.0 as usize > config.num_events) {
            return Err(Error::EventOutOfRange {
                id: bad.0,
                size: config.num_events,
            });
        }
    }
    Ok(())
}

/// Records the full forward pass of a batch of windows on `tape`.
///
/// Parameters are registered as tape parameters (in canonical order) when
/// `trainable` is set, otherwise as constants. Dropout is applied only when
/// `rng` is given. With `full_sequence` the last block keeps every position.
pub fn record_forward(
    tape: &mut GradTape,
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[&[EventId]],
    trainable: bool,
    full_sequence: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardGraph> {
    config.validate()?;
    check_windows(windows, config)?;
    let l = config.window;
    let batch = windows.len();

    let reg = |tape: &mut GradTape, m: &Matrix| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.input(m.clone())
        }
    };
    let emb = reg(tape, &params.embedding);
    let layer_vars: Vec<LayerVars> = params
        .layers
        .iter()
        .map(|lp| LayerVars::register(tape, lp, trainable))
        .collect();
    let head_w = reg(tape, &params.head_w);
    let head_b = reg(tape, &params.head_b);

    let ids: Vec<usize> = windows.iter().flat_map(|w| w.iter().map(|e| e.0 as usize)).collect();
    let key_mask: Vec<bool> = ids.iter().map(|&i| i == 0).collect();
    let pe = positional_encoding(l, config.d_model)?;
    let mut tiled = Matrix::zeros(batch * l, config.d_model);
    for s in 0..batch {
        for p in 0..l {
            tiled.row_mut(s * l + p).copy_from_slice(pe.row(p));
        }
    }
    let tokens = tape.gather_rows(emb, ids)?;
    let pe = tape.input(tiled);
    let mut x = tape.add(tokens, pe)?;
    if let Some(r) = rng.as_deref_mut() {
        x = tape.dropout(x, config.dropout, r);
    }
    let embedded = x;

    let mut blocks = Vec::with_capacity(config.layers);
    for (i, w) in layer_vars.iter().enumerate() {
        let last_only = !full_sequence && config.pooling == Pooling::Last && i + 1 == config.layers;
        let shape = BlockShape {
            heads: config.heads,
            window: l,
            key_mask: &key_mask,
            dropout: config.dropout,
            last_only,
        };
        let (out, att) = block(tape, x, w, &shape, rng.as_deref_mut())?;
        blocks.push((out, att));
        x = out;
    }

    let rows = tape.value(x).rows();
    let pooled = if rows == batch {
        x
    } else {
        match config.pooling {
            Pooling::Last => tape.gather_rows(x, (0..batch).map(|s| s * l + l - 1).collect())?,
            Pooling::Mean => {
                let mut pool = Matrix::zeros(batch, batch * l);
                for s in 0..batch {
                    let open: Vec<usize> = (0..l).filter(|&p| !key_mask[s * l + p]).collect();
                    let open = if open.is_empty() { (0..l).collect() } else { open };
                    let w = 1.0 / open.len() as f64;
                    for p in open {
                        pool.set(s, s * l + p, w);
                    }
                }
                let pool = tape.input(pool);
                tape.matmul(pool, x)?
            }
        }
    };
    let logits = tape.matmul(pooled, head_w)?;
    let logits = tape.add_row(logits, head_b)?;
    Ok(ForwardGraph {
        logits,
        blocks,
        embedded,
    })
}

/// Embeds a single window: event embedding plus positional encoding, with
/// dropout only when `rng` is given.
pub fn embed(
    window: &[EventId],
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let g = record_forward(&mut tape, params, config, &[window], false, true, rng)?;
    Ok(tape.value(g.embedded).clone())
}

/// Output of a standalone attention block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Matrix,
    /// One `l x l` weight matrix per head.
    pub attention: Vec<Matrix>,
}

/// Applies one encoder block to an `l x d` input.
pub fn attention_block(
    x: &Matrix,
    layer: &LayerParams,
    pad_mask: &[bool],
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BlockOutput> {
    config.validate()?;
    if x.shape() != (config.window, config.d_model) || pad_mask.len() != config.window {
        return Err(Error::Shape {
            op: "attention_block",
            left: x.shape(),
            right: (pad_mask.len(), config.d_model),
        });
    }
    let mut tape = GradTape::new();
    let xv = tape.input(x.clone());
    let w = LayerVars::register(&mut tape, layer, false);
    let shape = BlockShape {
        heads: config.heads,
        window: config.window,
        key_mask: pad_mask,
        dropout: config.dropout,
        last_only: false,
    };
    let (out, att) = block(&mut tape, xv, &w, &shape, rng)?;
    Ok(BlockOutput {
        output: tape.value(out).clone(),
        attention: tape.attention_weights(att).expect("attention node"),
    })
}

/// Next-event probabilities (length `n`) for one window.
pub fn forward(
    window: &[EventId],
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let g = record_forward(&mut tape, params, config, &[window], false, false, rng)?;
    Ok(softmax_rows(tape.value(g.logits)).into_vec())
}

/// Eval-mode probabilities for a batch of windows, one row per window.
pub fn predict_proba(windows: &[&[EventId]], params: &ModelParams, config: &ModelConfig) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let g = record_forward(&mut tape, params, config, windows, false, false, None)?;
    Ok(softmax_rows(tape.value(g.logits)))
}

/// Mean cross-entropy over `batch` and its gradient for every parameter.
pub fn loss_and_grads(
    batch: &[WindowSample],
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let windows: Vec<&[EventId]> = batch.iter().map(|s| s.window.as_slice()).collect();
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        if s.target.is_pad() || s.target.0 as usize > config.num_events {
            return Err(Error::EventOutOfRange {
                id: s.target.0,
                size: config.num_events,
            });
        }
        targets.push(s.target.class_index());
    }
    let mut tape = GradTape::new();
    let g = record_forward(&mut tape, params, config, &windows, true, false, rng)?;
    let loss = tape.softmax_cross_entropy(g.logits, targets)?;
    let grads = tape.backward(loss)?;
    let grads = ModelParams::from_tensors(config, grads)?;
    Ok((tape.value(loss).get(0, 0), grads))
}

/// Compares [`loss_and_grads`] with central finite differences on every
/// parameter tensor (dropout off). Returns `(tensor name, max relative error)`.
pub fn check_gradients(
    batch: &[WindowSample],
    params: &ModelParams,
    config: &ModelConfig,
    epsilon: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, grads) = loss_and_grads(batch, params, config, None)?;
    let names = ModelParams::tensor_names(config.layers);
    let mut out = Vec::with_capacity(names.len());
    let mut probe = params.clone();
    for (i, (g, name)) in grads.tensors().into_iter().zip(names).enumerate() {
        let base = params.tensors()[i].clone();
        let loss_of = |m: &Matrix| {
            *probe.tensors_mut()[i] = m.clone();
            loss_and_grads(batch, &probe, config, None).map_or(f64::NAN, |r| r.0)
        };
        let err = crate::tensor::grad_check(loss_of, &base, g, epsilon)?;
        *probe.tensors_mut()[i] = base;
        out.push((name, err));
    }
    Ok(out)
}
