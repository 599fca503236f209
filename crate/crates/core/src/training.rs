use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, TokenizedBatch, TokenizedRow, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::pooling::PoolingHead;
use crate::rng::{seeded, Dropout};
use crate::siamese::{
    classification_loss_on, regression_loss_on, SentencePair, SiameseModel,
};

fn default_warmup() -> f64 {
    0.1
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_shuffle() -> bool {
    true
}

/// Optimization settings. The learning rate ramps linearly over the first
/// `warmup_fraction` of all steps (rounded up) and stays at `learning_rate`
/// afterwards; there is no decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Baseline settings: the given schedule with the standard optimizer
    /// constants and shuffling on.
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize) -> Self {
        TrainConfig {
            learning_rate,
            batch_size,
            epochs,
            warmup_fraction: default_warmup(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            shuffle: default_shuffle(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} must lie in [0, 1]", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }
}

/// Task-dependent defaults: similarity regression trains longer with larger
/// batches; pair classification sees each example once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Regression,
    Classification,
}

impl Objective {
    pub fn default_batch_size(self) -> usize {
        match self {
            Objective::Regression => 32,
            Objective::Classification => 16,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Objective::Regression => 10,
            Objective::Classification => 1,
        }
    }
}

/// Head-dependent default learning rate.
pub fn default_learning_rate(head: &PoolingHead) -> f64 {
    match head {
        PoolingHead::Cls => 3e-5,
        PoolingHead::Mean | PoolingHead::Max => 2e-5,
        PoolingHead::Cnn { .. } => 1e-5,
    }
}

/// Learning rate at 1-based `step` of `total_steps`. During the first
/// `ceil(warmup_fraction * total_steps)` steps the rate climbs linearly from
/// zero; afterwards it is constant.
pub fn lr_at(step: usize, total_steps: usize, warmup_fraction: f64, base_lr: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

// ── Adam ───────────────────────────────────────────────────────────────────

/// First/second moment buffers, one pair per parameter tensor, plus the
/// global step count for bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamState<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        AdamState { m: Vec::new(), v: Vec::new(), t: 0 }
    }
}

/// One Adam update with bias correction. `params` and `grads` must line up
/// one-to-one, in the same order on every call.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} parameter tensors vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        state.v = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam_step: optimizer state covers {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let one = F::one();
    let bc1 = F::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let eps = F::from_f64(cfg.epsilon);
    let step = F::from_f64(lr);
    for ((p, g), i) in params.iter_mut().zip(grads).zip(0..) {
        if p.numel() != g.len() {
            return Err(Error::Shape(format!(
                "adam_step: tensor {i} has {} elements but gradient has {}",
                p.numel(),
                g.len()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        if m.len() != g.len() {
            return Err(Error::Shape(format!(
                "adam_step: optimizer state for tensor {i} has wrong length"
            )));
        }
        let data = p.data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] = data[j] - step * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── training loop ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global 1-based step.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Example-weighted mean loss per epoch.
    pub epoch_mean: Vec<f64>,
}

impl TrainLog {
    /// Tab-separated rendering with a header row; floats use enough digits
    /// to reproduce the run byte for byte.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tstep\tlr\tloss\n");
        for s in &self.steps {
            out.push_str(&format!("{}\t{}\t{:e}\t{:e}\n", s.epoch, s.step, s.lr, s.loss));
        }
        out
    }
}

fn require_supervision(pairs: &[SentencePair], objective: Objective) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        match objective {
            Objective::Regression if p.score.is_none() => {
                return Err(Error::Input(format!("pair {i} has no similarity score")));
            }
            Objective::Classification if p.label.is_none() => {
                return Err(Error::Input(format!("pair {i} has no class label")));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Fine-tunes the model in place. Shuffling, dropout, and every weight
/// update are driven by seeded generators, so two runs with identical
/// inputs produce identical logs and identical final weights.
pub fn train<F: Real>(
    model: &mut SiameseModel<F>,
    vocab: &Vocab,
    pairs: &[SentencePair],
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    model.config().validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    require_supervision(pairs, objective)?;
    if objective == Objective::Classification && model.classifier.is_none() {
        return Err(Error::Config(
            "classification training needs a model with a pair classifier".into(),
        ));
    }

    let max_len = model.config().max_len;
    let rows: Vec<(TokenizedRow, TokenizedRow)> = pairs
        .iter()
        .map(|p| Ok((tokenize(vocab, &p.text_a, max_len)?, tokenize(vocab, &p.text_b, max_len)?)))
        .collect::<Result<_>>()?;

    let n = pairs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seeded(cfg.seed);
    let dropout_rate = model.config().dropout_rate;
    let mut dropout = (dropout_rate > 0.0)
        .then(|| Dropout::new(dropout_rate, cfg.seed.wrapping_add(1)));

    let mut adam = AdamState::new();
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            global_step += 1;
            let lr = lr_at(global_step, total_steps, cfg.warmup_fraction, cfg.learning_rate);

            let batch_a = TokenizedBatch::from_rows(
                &chunk.iter().map(|&i| rows[i].0.clone()).collect::<Vec<_>>(),
            )?;
            let batch_b = TokenizedBatch::from_rows(
                &chunk.iter().map(|&i| rows[i].1.clone()).collect::<Vec<_>>(),
            )?;

            let mut tape = crate::numerics::Tape::new();
            let bound = model.bind(&mut tape, true);
            let loss = match objective {
                Objective::Regression => {
                    let scores: Vec<f64> =
                        chunk.iter().map(|&i| pairs[i].score.unwrap()).collect();
                    regression_loss_on(
                        &mut tape,
                        model.config(),
                        &model.head,
                        &bound,
                        &batch_a,
                        &batch_b,
                        &scores,
                        dropout.as_mut(),
                    )?
                }
                Objective::Classification => {
                    let labels: Vec<usize> =
                        chunk.iter().map(|&i| pairs[i].label.unwrap()).collect();
                    classification_loss_on(
                        &mut tape,
                        model.config(),
                        &model.head,
                        &bound,
                        &batch_a,
                        &batch_b,
                        &labels,
                        dropout.as_mut(),
                    )?
                }
            };
            let loss_val = tape.data(loss)[0].as_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch} step {global_step}: {loss_val}"
                )));
            }
            tape.backward(loss)?;

            let vars = bound.flatten();
            let grads: Vec<Vec<F>> = vars
                .iter()
                .map(|&v| match tape.grad(v) {
                    Some(g) => g.to_vec(),
                    // Parameters outside this objective's graph (e.g. the
                    // classifier during regression) simply do not move.
                    None => vec![F::zero(); tape.value(v).numel()],
                })
                .collect();
            drop(tape);

            let mut refs: Vec<&mut Tensor<F>> =
                model.named_params_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut refs, &grads, &mut adam, lr, cfg)?;

            epoch_loss += loss_val * chunk.len() as f64;
            log.steps.push(StepRecord { epoch, step: global_step, lr, loss: loss_val });
        }
        log.epoch_mean.push(epoch_loss / n as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn cfg(lr: f64, batch: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            epochs,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle: true,
            seed: 0,
        }
    }

    #[test]
    fn warmup_ramps_then_holds() {
        // 1000 steps, 10% warmup: steps 1..99 scale linearly, 100+ hold.
        assert_eq!(lr_at(1, 1000, 0.1, 1.0), 0.01);
        assert_eq!(lr_at(50, 1000, 0.1, 1.0), 0.5);
        assert_eq!(lr_at(100, 1000, 0.1, 1.0), 1.0);
        assert_eq!(lr_at(999, 1000, 0.1, 1.0), 1.0);
        // Warmup length rounds up: 7 steps at 10% gives ceil(0.7) = 1.
        assert_eq!(lr_at(1, 7, 0.1, 1.0), 1.0);
        // Zero warmup: full rate from the first step.
        assert_eq!(lr_at(1, 100, 0.0, 2.0), 2.0);
    }

    #[test]
    fn adam_matches_hand_computed_first_step() {
        // Single parameter p = 1, gradient 0.5, lr 0.1: after one step
        // mhat = g, vhat = g^2, update = lr * g / (|g| + eps) ~= lr.
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut state = AdamState::new();
        let c = cfg(0.1, 1, 1);
        adam_step(&mut [&mut p], &[vec![0.5]], &mut state, 0.1, &c).unwrap();
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut state = AdamState::new();
        let c = cfg(0.1, 1, 1);
        let r = adam_step(&mut [&mut p], &[vec![0.5]], &mut state, 0.1, &c);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn objective_defaults_match_protocol() {
        assert_eq!(Objective::Regression.default_batch_size(), 32);
        assert_eq!(Objective::Regression.default_epochs(), 10);
        assert_eq!(Objective::Classification.default_batch_size(), 16);
        assert_eq!(Objective::Classification.default_epochs(), 1);
        assert_eq!(default_learning_rate(&PoolingHead::Cls), 3e-5);
        assert_eq!(default_learning_rate(&PoolingHead::Mean), 2e-5);
        assert_eq!(default_learning_rate(&PoolingHead::Cnn { blocks: 2, kernel: 3 }), 1e-5);
    }

    #[test]
    fn train_config_validation() {
        assert!(cfg(0.0, 1, 1).validate().is_err());
        assert!(cfg(1e-3, 0, 1).validate().is_err());
        let mut c = cfg(1e-3, 4, 1);
        c.warmup_fraction = 1.5;
        assert!(c.validate().is_err());
        assert!(cfg(1e-3, 4, 1).validate().is_ok());
    }

    fn tiny_model(head: PoolingHead, with_classifier: bool) -> (SiameseModel<f32>, Vocab) {
        let vocab = Vocab::from_words((0..20).map(|i| format!("w{i}"))).unwrap();
        let config = EncoderConfig {
            vocab_size: vocab.size(),
            embed_dim: 8,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_len: 8,
            factorized_embedding: false,
            share_layers: false,
            num_hidden_groups: 1,
            dropout_rate: 0.0,
            seed: 1,
        };
        (SiameseModel::new(config, head, with_classifier).unwrap(), vocab)
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (mut model, vocab) = tiny_model(PoolingHead::Mean, false);
        let before = model.encoder.params.token_embedding.clone();
        let pairs = vec![SentencePair::scored("w1 w2", "w1 w3", 4.0)];
        let log = train(&mut model, &vocab, &pairs, Objective::Regression, &cfg(1e-3, 2, 0))
            .unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(model.encoder.params.token_embedding.data(), before.data());
    }

    #[test]
    fn training_reduces_regression_loss() {
        let (mut model, vocab) = tiny_model(PoolingHead::Mean, false);
        let pairs = vec![
            SentencePair::scored("w1 w2 w3", "w1 w2 w3", 5.0),
            SentencePair::scored("w4 w5", "w6 w7 w8", 0.0),
            SentencePair::scored("w9 w10 w11", "w9 w10", 4.0),
            SentencePair::scored("w12", "w13 w14", 1.0),
        ];
        let log =
            train(&mut model, &vocab, &pairs, Objective::Regression, &cfg(5e-3, 2, 20)).unwrap();
        let first = log.epoch_mean.first().unwrap();
        let last = log.epoch_mean.last().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn classification_without_classifier_errors() {
        let (mut model, vocab) = tiny_model(PoolingHead::Mean, false);
        let pairs = vec![SentencePair::labeled("w1", "w2", 0)];
        let r = train(&mut model, &vocab, &pairs, Objective::Classification, &cfg(1e-3, 1, 1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn missing_supervision_is_an_input_error() {
        let (mut model, vocab) = tiny_model(PoolingHead::Mean, false);
        let pairs = vec![SentencePair::labeled("w1", "w2", 0)];
        let r = train(&mut model, &vocab, &pairs, Objective::Regression, &cfg(1e-3, 1, 1));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let pairs = vec![
            SentencePair::scored("w1 w2 w3", "w1 w2", 4.0),
            SentencePair::scored("w4 w5", "w6 w7", 1.0),
            SentencePair::scored("w8 w9", "w8 w9 w10", 5.0),
        ];
        let run = || {
            let (mut model, vocab) = tiny_model(PoolingHead::Mean, false);
            let log =
                train(&mut model, &vocab, &pairs, Objective::Regression, &cfg(1e-3, 2, 3))
                    .unwrap();
            (log.to_tsv(), model.encoder.params.token_embedding.data().to_vec())
        };
        let (log1, emb1) = run();
        let (log2, emb2) = run();
        assert_eq!(log1, log2);
        assert_eq!(emb1, emb2);
    }

    #[test]
    fn divergence_is_reported_as_non_finite() {
        let (mut model, vocab) = tiny_model(PoolingHead::Mean, false);
        // Poison the embedding of a word the batch actually uses; a NaN in
        // a padding row would be masked out and never reach the loss.
        let row = vocab.id("w1");
        let width = model.encoder.config.embed_dim;
        model.encoder.params.token_embedding.data_mut()[row * width] = f32::NAN;
        let pairs = vec![SentencePair::scored("w1 w2", "w1 w3", 4.0)];
        let r = train(&mut model, &vocab, &pairs, Objective::Regression, &cfg(1e-3, 1, 1));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
