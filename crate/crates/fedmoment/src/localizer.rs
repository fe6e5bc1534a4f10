//! The toy differentiable moment localizer and client-side local training.
//!
//! One tanh hidden layer over the concatenated video and query features feeds
//! three heads: a start scalar, a length scalar, and a 16-way temporal class
//! head. The start and end are produced as `start = sigmoid(s_raw)`,
//! `end = start + (1 - start) * sigmoid(l_raw)`, which guarantees
//! `0 <= start <= end <= 1` for every parameter setting. Gradients are exact
//! analytic backprop; training is plain seeded mini-batch gradient descent.

use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{ClientDataset, MomentSample};
use crate::error::{Error, Result};
use crate::temporal::{self, TemporalDistribution, NUM_CLASSES};
use crate::textfmt::{g9, Fnv1a};

/// Head width: start raw, length raw, then the 16 class logits.
const HEAD_DIM: usize = 2 + NUM_CLASSES;

/// Architecture dimensions; two parameter vectors are combinable only when
/// their layouts (and therefore digests) agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelLayout {
    pub d_v: usize,
    pub d_q: usize,
    pub hidden: usize,
}

impl ModelLayout {
    pub fn input_dim(&self) -> usize {
        self.d_v + self.d_q
    }

    pub fn param_count(&self) -> usize {
        let d = self.input_dim();
        d * self.hidden + self.hidden + self.hidden * HEAD_DIM + HEAD_DIM
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.d_v as u64);
        h.write_u64(self.d_q as u64);
        h.write_u64(self.hidden as u64);
        h.finish()
    }

    // Flat layout: W1 (input x hidden), b1, W2 (hidden x head), b2.
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.input_dim() * self.hidden
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.hidden * HEAD_DIM
    }
}

/// Flat ordered model weights; the unit of transfer, handoff and aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: ModelLayout,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::InvalidConfig(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                layout.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "parameter vector contains non-finite values".into(),
            ));
        }
        Ok(ParameterVector { layout, values })
    }

    pub fn zeros(layout: ModelLayout) -> Self {
        ParameterVector {
            values: vec![0.0; layout.param_count()],
            layout,
        }
    }

    pub fn layout(&self) -> ModelLayout {
        self.layout
    }

    pub fn layout_digest(&self) -> u64 {
        self.layout.digest()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Order-sensitive hash of layout and value bits; used to verify exact
    /// weight handoff without retaining copies.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.layout.digest());
        for &v in &self.values {
            h.write_f64(v);
        }
        h.finish()
    }

    /// Binary form: layout digest (u64, little-endian) then the values as
    /// little-endian 64-bit reals.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.layout.digest().to_le_bytes())?;
        for &v in &self.values {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary form, verifying the digest against `layout`.
    pub fn read_binary(mut r: impl Read, layout: ModelLayout) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let digest = u64::from_le_bytes(word);
        if digest != layout.digest() {
            return Err(Error::LayoutMismatch {
                left: digest,
                right: layout.digest(),
            });
        }
        let mut values = Vec::with_capacity(layout.param_count());
        for _ in 0..layout.param_count() {
            r.read_exact(&mut word)?;
            values.push(f64::from_bits(u64::from_le_bytes(word)));
        }
        if r.read(&mut word)? != 0 {
            return Err(Error::MalformedInput {
                line: 0,
                message: "trailing bytes after parameter vector".into(),
            });
        }
        ParameterVector::new(layout, values)
    }
}

impl fmt::Display for ParameterVector {
    /// Text debug form: digest then one value per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layout_digest={:016x}", self.layout.digest())?;
        for v in &self.values {
            writeln!(f, "{}", g9(*v))?;
        }
        Ok(())
    }
}

/// One sample's prediction: an interval and a strictly positive class
/// distribution from the softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pred_start: f64,
    pub pred_end: f64,
    class_probs: [f64; NUM_CLASSES],
}

impl Prediction {
    /// Wraps an externally supplied interval (uniform class head); handy for
    /// feeding precomputed predictions to the metrics.
    pub fn from_interval(pred_start: f64, pred_end: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pred_start) || !(0.0..=1.0).contains(&pred_end) {
            return Err(Error::TimepointOutOfRange {
                value: if (0.0..=1.0).contains(&pred_start) {
                    pred_end
                } else {
                    pred_start
                },
            });
        }
        if pred_start > pred_end {
            return Err(Error::InvertedInterval {
                start: pred_start,
                end: pred_end,
            });
        }
        Ok(Prediction {
            pred_start,
            pred_end,
            class_probs: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.pred_start, self.pred_end)
    }

    pub fn class_probs(&self) -> &[f64; NUM_CLASSES] {
        &self.class_probs
    }

    pub fn class_distribution(&self) -> TemporalDistribution {
        TemporalDistribution::new(self.class_probs).expect("softmax head is a distribution")
    }
}

/// Predictions for a batch, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    predictions: Vec<Prediction>,
}

impl PredictionBatch {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Self {
        PredictionBatch { predictions }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prediction> {
        self.predictions.iter()
    }

    /// Mean of the class heads over the batch (`q` of the batch).
    pub fn mean_class_probs(&self) -> [f64; NUM_CLASSES] {
        let mut mean = [0.0; NUM_CLASSES];
        for p in &self.predictions {
            for (m, &c) in mean.iter_mut().zip(p.class_probs.iter()) {
                *m += c;
            }
        }
        let n = self.predictions.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

impl<'a> IntoIterator for &'a PredictionBatch {
    type Item = &'a Prediction;
    type IntoIter = std::slice::Iter<'a, Prediction>;
    fn into_iter(self) -> Self::IntoIter {
        self.predictions.iter()
    }
}

/// Local training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Weight of the temporal-distribution-gap term in the local loss.
    pub lambda_dis: f64,
    pub batch_size: usize,
    /// Shuffling seed; the federation layer overrides this per
    /// (round, client) so runs stay deterministic under any scheduling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_epochs: 10,
            learning_rate: 0.05,
            lambda_dis: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs < 1 {
            return Err(Error::InvalidConfig("local_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be a nonnegative real, got {}",
                self.learning_rate
            )));
        }
        if !self.lambda_dis.is_finite() || self.lambda_dis < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda_dis must be a nonnegative real, got {}",
                self.lambda_dis
            )));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Seeded model initialization: every weight uniform in (-0.1, 0.1).
pub fn init_model(d_v: usize, d_q: usize, hidden: usize, seed: u64) -> Result<ParameterVector> {
    if d_v < 1 || d_q < 1 || hidden < 1 {
        return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
    }
    let layout = ModelLayout { d_v, d_q, hidden };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..layout.param_count())
        .map(|_| rng.gen_range(-0.1..0.1))
        .collect();
    ParameterVector::new(layout, values)
}

/// Per-sample head outputs.
struct ForwardState {
    start: f64,
    length_gate: f64,
    probs: [f64; NUM_CLASSES],
}

fn forward_sample(params: &ParameterVector, x: &[f64]) -> ForwardState {
    let layout = params.layout;
    let v = &params.values;
    let h_dim = layout.hidden;

    let mut hidden = v[layout.b1()..layout.b1() + h_dim].to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let w1_row = &v[layout.w1() + i * h_dim..layout.w1() + (i + 1) * h_dim];
        for (h, &w) in hidden.iter_mut().zip(w1_row.iter()) {
            *h += xi * w;
        }
    }
    hidden.iter_mut().for_each(|h| *h = h.tanh());

    let mut heads = [0.0; HEAD_DIM];
    heads.copy_from_slice(&v[layout.b2()..layout.b2() + HEAD_DIM]);
    for (j, &hj) in hidden.iter().enumerate() {
        let w2_row = &v[layout.w2() + j * HEAD_DIM..layout.w2() + (j + 1) * HEAD_DIM];
        for (u, &w) in heads.iter_mut().zip(w2_row.iter()) {
            *u += hj * w;
        }
    }

    let start = sigmoid(heads[0]);
    let length_gate = sigmoid(heads[1]);

    // Softmax over the class logits, max-subtracted.
    let logits = &heads[2..];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits.iter()) {
        *p = (l - max).exp();
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);

    ForwardState {
        start,
        length_gate,
        probs,
    }
}

fn concat_features(sample: &MomentSample) -> Vec<f64> {
    let mut x = Vec::with_capacity(sample.video_features.len() + sample.query_features.len());
    x.extend_from_slice(&sample.video_features);
    x.extend_from_slice(&sample.query_features);
    x
}

fn check_dims(params: &ParameterVector, sample: &MomentSample) -> Result<()> {
    if sample.video_features.len() != params.layout.d_v
        || sample.query_features.len() != params.layout.d_q
    {
        return Err(Error::DimensionMismatch {
            expected: params.layout.input_dim(),
            found: sample.video_features.len() + sample.query_features.len(),
            sample_id: sample.sample_id,
        });
    }
    Ok(())
}

/// Deterministic batch predictions, in input order.
pub fn forward(params: &ParameterVector, samples: &[MomentSample]) -> Result<PredictionBatch> {
    let mut predictions = Vec::with_capacity(samples.len());
    for sample in samples {
        check_dims(params, sample)?;
        let state = forward_sample(params, &concat_features(sample));
        let pred_start = state.start;
        let pred_end = pred_start + (1.0 - pred_start) * state.length_gate;
        predictions.push(Prediction {
            pred_start,
            pred_end,
            class_probs: state.probs,
        });
    }
    Ok(PredictionBatch { predictions })
}

/// Mean squared endpoint error plus the weighted distribution-gap term, with
/// its exact gradient with respect to the flattened parameters.
///
/// `loss = mean_i [(start_i - gt_start_i)^2 + (end_i - gt_end_i)^2]
///       + lambda_dis * KL(mean_i class_probs_i || p)`
pub fn local_loss(
    params: &ParameterVector,
    batch: &[MomentSample],
    p: &TemporalDistribution,
    lambda_dis: f64,
) -> Result<(f64, Vec<f64>)> {
    for sample in batch {
        check_dims(params, sample)?;
    }
    let rows: Vec<Vec<f64>> = batch.iter().map(concat_features).collect();
    let row_refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let targets: Vec<(f64, f64)> = batch.iter().map(MomentSample::interval).collect();
    let mut grad = vec![0.0; params.layout.param_count()];
    let mut scratch = BatchScratch::default();
    let loss = loss_and_grad_rows(
        params,
        &row_refs,
        &targets,
        p,
        lambda_dis,
        &mut grad,
        &mut scratch,
    )?;
    Ok((loss, grad))
}

/// Reusable flat buffers for the training inner loop.
#[derive(Default)]
struct BatchScratch {
    hidden: Vec<f64>,
    starts: Vec<f64>,
    gates: Vec<f64>,
    probs: Vec<f64>,
    d_hidden: Vec<f64>,
}

/// Training core over prevalidated feature rows. Writes the gradient into
/// `grad` (overwriting it) and returns the loss.
fn loss_and_grad_rows(
    params: &ParameterVector,
    rows: &[&[f64]],
    targets: &[(f64, f64)],
    p: &TemporalDistribution,
    lambda_dis: f64,
    grad: &mut [f64],
    scratch: &mut BatchScratch,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput {
            context: "local_loss",
        });
    }
    if lambda_dis > 0.0 && !p.is_strictly_positive() {
        return Err(Error::NonPositiveMass {
            index: p.mass().iter().position(|&m| m <= 0.0).unwrap_or(0),
            value: 0.0,
        });
    }

    let layout = params.layout;
    let v = &params.values;
    let h_dim = layout.hidden;
    let d = layout.input_dim();
    let count = rows.len();
    let n = count as f64;

    scratch.hidden.clear();
    scratch.hidden.resize(count * h_dim, 0.0);
    scratch.starts.clear();
    scratch.starts.resize(count, 0.0);
    scratch.gates.clear();
    scratch.gates.resize(count, 0.0);
    scratch.probs.clear();
    scratch.probs.resize(count * NUM_CLASSES, 0.0);
    scratch.d_hidden.clear();
    scratch.d_hidden.resize(h_dim, 0.0);

    // Forward pass into the flat buffers.
    let mut q_batch = [0.0; NUM_CLASSES];
    let mut mse = 0.0;
    for (s, (&x, &(gt_start, gt_end))) in rows.iter().zip(targets.iter()).enumerate() {
        debug_assert_eq!(x.len(), d);
        let hidden = &mut scratch.hidden[s * h_dim..(s + 1) * h_dim];
        hidden.copy_from_slice(&v[layout.b1()..layout.b1() + h_dim]);
        for (i, &xi) in x.iter().enumerate() {
            let w1_row = &v[layout.w1() + i * h_dim..layout.w1() + (i + 1) * h_dim];
            for (h, &w) in hidden.iter_mut().zip(w1_row.iter()) {
                *h += xi * w;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.tanh());

        let mut heads = [0.0; HEAD_DIM];
        heads.copy_from_slice(&v[layout.b2()..layout.b2() + HEAD_DIM]);
        for (j, &hj) in hidden.iter().enumerate() {
            let w2_row = &v[layout.w2() + j * HEAD_DIM..layout.w2() + (j + 1) * HEAD_DIM];
            for (u, &w) in heads.iter_mut().zip(w2_row.iter()) {
                *u += hj * w;
            }
        }
        let start = sigmoid(heads[0]);
        let gate = sigmoid(heads[1]);
        scratch.starts[s] = start;
        scratch.gates[s] = gate;

        let logits = &heads[2..];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs = &mut scratch.probs[s * NUM_CLASSES..(s + 1) * NUM_CLASSES];
        let mut total = 0.0;
        for (pr, &l) in probs.iter_mut().zip(logits.iter()) {
            *pr = (l - max).exp();
            total += *pr;
        }
        for (pr, q) in probs.iter_mut().zip(q_batch.iter_mut()) {
            *pr /= total;
            *q += *pr / n;
        }

        let end = start + (1.0 - start) * gate;
        mse += (start - gt_start).powi(2) + (end - gt_end).powi(2);
    }
    mse /= n;

    let mut loss = mse;
    // d(loss)/d(q_batch_x), shared by every sample's class head.
    let mut kl_grad = [0.0; NUM_CLASSES];
    if lambda_dis > 0.0 {
        loss += lambda_dis * temporal::kl_divergence(&q_batch, p.mass());
        for (g, (&q, &px)) in kl_grad.iter_mut().zip(q_batch.iter().zip(p.mass().iter())) {
            *g = lambda_dis * ((q / px).ln() + 1.0);
        }
    }

    grad.iter_mut().for_each(|g| *g = 0.0);
    for (s, (&x, &(gt_start, gt_end))) in rows.iter().zip(targets.iter()).enumerate() {
        let hidden = &scratch.hidden[s * h_dim..(s + 1) * h_dim];
        let probs = &scratch.probs[s * NUM_CLASSES..(s + 1) * NUM_CLASSES];
        let start = scratch.starts[s];
        let gate = scratch.gates[s];
        let end = start + (1.0 - start) * gate;

        let d_start_direct = 2.0 / n * (start - gt_start);
        let d_end = 2.0 / n * (end - gt_end);
        let d_start = d_start_direct + d_end * (1.0 - gate);
        let d_gate = d_end * (1.0 - start);

        let mut d_heads = [0.0; HEAD_DIM];
        d_heads[0] = d_start * start * (1.0 - start);
        d_heads[1] = d_gate * gate * (1.0 - gate);

        // Softmax backward: each sample contributes probs/n to q_batch.
        let inner: f64 = kl_grad.iter().zip(probs.iter()).map(|(&g, &c)| g * c).sum();
        for (o, (&g, &c)) in kl_grad.iter().zip(probs.iter()).enumerate() {
            d_heads[2 + o] = c / n * (g - inner);
        }

        // Head layer.
        for (o, &du) in d_heads.iter().enumerate() {
            grad[layout.b2() + o] += du;
        }
        for (j, (&hj, dh)) in hidden.iter().zip(scratch.d_hidden.iter_mut()).enumerate() {
            let w2_row = &v[layout.w2() + j * HEAD_DIM..layout.w2() + (j + 1) * HEAD_DIM];
            let g2_row = &mut grad[layout.w2() + j * HEAD_DIM..layout.w2() + (j + 1) * HEAD_DIM];
            let mut acc = 0.0;
            for (o, &du) in d_heads.iter().enumerate() {
                g2_row[o] += hj * du;
                acc += w2_row[o] * du;
            }
            *dh = acc * (1.0 - hj * hj);
        }

        // Input layer.
        for (j, &dz) in scratch.d_hidden.iter().enumerate() {
            grad[layout.b1() + j] += dz;
        }
        for (i, &xi) in x.iter().enumerate() {
            let g1_row = &mut grad[layout.w1() + i * h_dim..layout.w1() + (i + 1) * h_dim];
            for (g, &dz) in g1_row.iter_mut().zip(scratch.d_hidden.iter()) {
                *g += xi * dz;
            }
        }
    }

    Ok(loss)
}

/// Runs `cfg.local_epochs` epochs of seeded mini-batch gradient descent on
/// the client's shard and returns the updated parameters.
pub fn client_update(
    init: &ParameterVector,
    data: &ClientDataset,
    p: &TemporalDistribution,
    cfg: &TrainConfig,
) -> Result<ParameterVector> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::EmptyInput {
            context: "client_update",
        });
    }

    for sample in &data.samples {
        check_dims(init, sample)?;
    }
    let features: Vec<Vec<f64>> = data.samples.iter().map(concat_features).collect();
    let targets: Vec<(f64, f64)> = data.samples.iter().map(MomentSample::interval).collect();

    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut grad = vec![0.0; init.layout.param_count()];
    let mut scratch = BatchScratch::default();
    let mut rows = Vec::with_capacity(cfg.batch_size);
    let mut batch_targets = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            rows.clear();
            batch_targets.clear();
            rows.extend(chunk.iter().map(|&i| features[i].as_slice()));
            batch_targets.extend(chunk.iter().map(|&i| targets[i]));
            loss_and_grad_rows(
                &params,
                &rows,
                &batch_targets,
                p,
                cfg.lambda_dis,
                &mut grad,
                &mut scratch,
            )?;
            for (value, g) in params.values.iter_mut().zip(grad.iter()) {
                *value -= cfg.learning_rate * g;
            }
            if params.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, ClientDataset};
    use crate::metrics;
    use crate::seeds;
    use proptest::prelude::*;

    fn layout() -> ModelLayout {
        ModelLayout {
            d_v: 4,
            d_q: 3,
            hidden: 6,
        }
    }

    fn planted_client(n: usize, seed: u64) -> ClientDataset {
        let corpus =
            generate_corpus(n, 4, 3, seed, &TemporalDistribution::uniform_feasible()).unwrap();
        ClientDataset {
            client_id: 0,
            samples: corpus.samples,
        }
    }

    fn random_params(seed: u64) -> ParameterVector {
        init_model(4, 3, 6, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(8, 4, 16, 42).unwrap();
        let b = init_model(8, 4, 16, 42).unwrap();
        let c = init_model(8, 4, 16, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values().iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn parameter_count_matches_block_arithmetic() {
        // Independent count: sum the four blocks one by one.
        for (d_v, d_q, hidden) in [(8, 4, 16), (3, 2, 5), (1, 1, 1)] {
            let w1 = (d_v + d_q) * hidden;
            let b1 = hidden;
            let w2 = hidden * 18;
            let b2 = 18;
            let params = init_model(d_v, d_q, hidden, 0).unwrap();
            assert_eq!(params.values().len(), w1 + b1 + w2 + b2);
            assert_eq!(params.layout().param_count(), w1 + b1 + w2 + b2);
        }
    }

    #[test]
    fn zero_parameters_give_the_closed_form_outputs() {
        let params = ParameterVector::zeros(layout());
        let client = planted_client(3, 7);
        let batch = forward(&params, &client.samples).unwrap();
        for pred in &batch {
            assert!((pred.pred_start - 0.5).abs() < 1e-15);
            assert!((pred.pred_end - 0.75).abs() < 1e-15);
            for &c in pred.class_probs() {
                assert!((c - 1.0 / 16.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_preserves_order_and_normalization() {
        let params = random_params(3);
        let client = planted_client(20, 11);
        let batch = forward(&params, &client.samples).unwrap();
        assert_eq!(batch.len(), 20);
        for pred in &batch {
            let sum: f64 = pred.class_probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(pred.class_probs().iter().all(|&c| c > 0.0 && c < 1.0));
        }
        // Reversing the input reverses the output.
        let mut reversed = client.samples.clone();
        reversed.reverse();
        let rbatch = forward(&params, &reversed).unwrap();
        for (a, b) in batch.iter().zip(rbatch.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let params = random_params(5);
        let corpus =
            generate_corpus(2, 5, 3, 1, &TemporalDistribution::uniform_feasible()).unwrap();
        assert!(matches!(
            forward(&params, &corpus.samples),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn perfect_predictions_give_zero_loss_without_gap_term() {
        let params = random_params(9);
        let mut client = planted_client(6, 2);
        let preds = forward(&params, &client.samples).unwrap();
        for (sample, pred) in client.samples.iter_mut().zip(preds.iter()) {
            sample.gt_start = pred.pred_start;
            sample.gt_end = pred.pred_end;
            sample.temporal_class =
                crate::temporal::assign_temporal_class(sample.gt_start, sample.gt_end).unwrap();
        }
        let (loss, _) = local_loss(
            &params,
            &client.samples,
            &TemporalDistribution::uniform(),
            0.0,
        )
        .unwrap();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = TemporalDistribution::uniform();
        let step = 1e-5;
        let mut checked = 0usize;
        for model_seed in 0..4 {
            let params = random_params(model_seed);
            let client = planted_client(8, 100 + model_seed);
            let (_, grad) = local_loss(&params, &client.samples, &p, 0.1).unwrap();
            for pick in 0..25u64 {
                let coord = seeds::mix(model_seed, pick) as usize % params.values().len();
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.values_mut()[coord] += step;
                minus.values_mut()[coord] -= step;
                let (lp, _) = local_loss(&plus, &client.samples, &p, 0.1).unwrap();
                let (lm, _) = local_loss(&minus, &client.samples, &p, 0.1).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let rel = (grad[coord] - numeric).abs()
                    / f64::max(grad[coord].abs() + numeric.abs(), 1e-3);
                assert!(
                    rel < 1e-4,
                    "seed {model_seed} coord {coord}: analytic {} vs numeric {numeric} (rel {rel})",
                    grad[coord]
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let init = random_params(21);
        let client = planted_client(16, 4);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            local_epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = client_update(&init, &client, &TemporalDistribution::uniform(), &cfg).unwrap();
        assert_eq!(out.values(), init.values());
    }

    #[test]
    fn training_reduces_loss_on_planted_data() {
        let init = random_params(33);
        let client = planted_client(100, 8);
        let p = crate::temporal::counts_to_distribution(&client.class_counts(), true).unwrap();
        let cfg = TrainConfig {
            seed: 17,
            ..TrainConfig::default()
        };
        let (before, _) = local_loss(&init, &client.samples, &p, cfg.lambda_dis).unwrap();
        let trained = client_update(&init, &client, &p, &cfg).unwrap();
        let (after, _) = local_loss(&trained, &client.samples, &p, cfg.lambda_dis).unwrap();
        assert!(
            after < before,
            "training loss did not decrease: {before} -> {after}"
        );
    }

    #[test]
    fn client_update_is_deterministic() {
        let init = random_params(2);
        let client = planted_client(50, 14);
        let p = TemporalDistribution::uniform();
        let cfg = TrainConfig {
            seed: 77,
            local_epochs: 3,
            ..TrainConfig::default()
        };
        let a = client_update(&init, &client, &p, &cfg).unwrap();
        let b = client_update(&init, &client, &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_gap_weight_pulls_batch_distribution_toward_population() {
        // Small step size against the enormous penalty weight; the KL to p
        // must never increase across any 20-step window.
        let mut params = random_params(6);
        let client = planted_client(32, 19);
        let p = crate::temporal::counts_to_distribution(&client.class_counts(), true).unwrap();
        let lambda = 1e6;
        let lr = 1e-8;
        let mut kls = Vec::new();
        for _ in 0..200 {
            let preds = forward(&params, &client.samples).unwrap();
            kls.push(crate::temporal::kl_divergence(
                &preds.mean_class_probs(),
                p.mass(),
            ));
            let (_, grad) = local_loss(&params, &client.samples, &p, lambda).unwrap();
            for (v, g) in params.values_mut().iter_mut().zip(grad.iter()) {
                *v -= lr * g;
            }
        }
        for (t, window) in kls.windows(21).enumerate() {
            assert!(
                window[20] <= window[0] + 1e-12,
                "KL increased over window starting at step {t}: {} -> {}",
                window[0],
                window[20]
            );
        }
        assert!(kls.last().unwrap() < &kls[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let init = random_params(1);
        let client = planted_client(8, 3);
        let cfg = TrainConfig {
            learning_rate: 1e12,
            local_epochs: 50,
            ..TrainConfig::default()
        };
        let result = client_update(&init, &client, &TemporalDistribution::uniform(), &cfg);
        assert!(matches!(result, Err(Error::Divergence { .. })));
    }

    #[test]
    fn single_client_training_reaches_good_iou() {
        // Learnability: the planted task is solvable by this model.
        let client = planted_client(400, 50);
        let p = crate::temporal::counts_to_distribution(&client.class_counts(), true).unwrap();
        let mut params = init_model(4, 3, 16, 1).unwrap();
        let cfg = TrainConfig {
            lambda_dis: 0.0,
            learning_rate: 0.1,
            seed: 23,
            ..TrainConfig::default()
        };
        for round in 0..20 {
            let mut c = cfg.clone();
            c.seed = 23 + round;
            params = client_update(&params, &client, &p, &c).unwrap();
        }
        let preds = forward(&params, &client.samples).unwrap();
        let mut total = 0.0;
        for (pred, sample) in preds.iter().zip(client.samples.iter()) {
            total += metrics::iou(pred.interval(), sample.interval()).unwrap();
        }
        let mean_iou = total / client.n_k() as f64;
        assert!(mean_iou > 0.5, "mean training IoU {mean_iou} <= 0.5");
    }

    #[test]
    fn binary_form_round_trips_and_checks_layout() {
        let params = random_params(12);
        let mut buf = Vec::new();
        params.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (1 + params.values().len()));
        let back = ParameterVector::read_binary(buf.as_slice(), params.layout()).unwrap();
        assert_eq!(back, params);

        let wrong = ModelLayout {
            d_v: 4,
            d_q: 3,
            hidden: 7,
        };
        assert!(matches!(
            ParameterVector::read_binary(buf.as_slice(), wrong),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn debug_text_lists_digest_and_values() {
        let params = ParameterVector::zeros(ModelLayout {
            d_v: 1,
            d_q: 1,
            hidden: 1,
        });
        let text = params.to_string();
        assert!(text.starts_with("layout_digest="));
        assert_eq!(text.lines().count(), 1 + params.values().len());
    }

    proptest! {
        #[test]
        fn predictions_always_respect_interval_ordering(
            seed in 0u64..1000,
            scale in 0.1f64..30.0,
        ) {
            // Scale weights well beyond the init range to probe saturation.
            let mut params = random_params(seed);
            for v in params.values_mut() {
                *v *= scale;
            }
            let client = planted_client(5, seed);
            let batch = forward(&params, &client.samples).unwrap();
            for pred in &batch {
                prop_assert!(pred.pred_start >= 0.0);
                prop_assert!(pred.pred_start <= pred.pred_end);
                prop_assert!(pred.pred_end <= 1.0);
            }
        }
    }
}
