use crate::data::TokenizedBatch;
use crate::encoder::{
    encode_on, init_linear, Encoder, EncoderConfig, EncoderParams, LinearParams,
};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::pooling::{pool_on, HeadParams, PoolingHead};
use crate::rng::{seeded, Dropout};

/// Pair classification labels, in logit order.
pub const CLASS_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];
pub const NUM_CLASSES: usize = CLASS_LABELS.len();

/// Similarity scores live on this scale; the regression target is
/// `score / SCORE_SCALE`.
pub const SCORE_SCALE: f64 = 5.0;

/// One example: two sentences plus whichever supervision the task provides.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub text_a: String,
    pub text_b: String,
    /// Similarity in [0, SCORE_SCALE] for regression tasks.
    pub score: Option<f64>,
    /// Index into [`CLASS_LABELS`] for classification tasks.
    pub label: Option<usize>,
}

impl SentencePair {
    pub fn scored(a: impl Into<String>, b: impl Into<String>, score: f64) -> Self {
        SentencePair { text_a: a.into(), text_b: b.into(), score: Some(score), label: None }
    }

    pub fn labeled(a: impl Into<String>, b: impl Into<String>, label: usize) -> Self {
        SentencePair { text_a: a.into(), text_b: b.into(), score: None, label: Some(label) }
    }
}

/// Encoder, pooling head, and (for classification) the pair classifier.
/// Both sentences of a pair run through the *same* parameters; there is no
/// second tower to keep in sync.
#[derive(Debug, Clone)]
pub struct SiameseModel<F: Real> {
    pub encoder: Encoder<F>,
    pub head: PoolingHead,
    pub head_params: HeadParams<Tensor<F>>,
    pub classifier: Option<LinearParams<Tensor<F>>>,
}

/// Tape handles for every model tensor, in the model's canonical order.
pub struct BoundModel {
    pub encoder: EncoderParams<Var>,
    pub head: HeadParams<Var>,
    pub classifier: Option<LinearParams<Var>>,
}

impl BoundModel {
    pub fn flatten(&self) -> Vec<Var> {
        let mut out: Vec<Var> =
            self.encoder.fields().into_iter().map(|(_, v)| *v).collect();
        out.extend(self.head.fields().into_iter().map(|(_, v)| *v));
        if let Some(c) = &self.classifier {
            out.push(c.weight);
            out.push(c.bias);
        }
        out
    }
}

impl<F: Real> SiameseModel<F> {
    /// Builds a fresh model. All weights, encoder and head and classifier
    /// alike, come from one stream seeded by `config.seed`.
    pub fn new(config: EncoderConfig, head: PoolingHead, with_classifier: bool) -> Result<Self> {
        config.validate()?;
        head.validate()?;
        let mut rng = seeded(config.seed);
        let params = EncoderParams::init(&config, &mut rng)?;
        let head_params = HeadParams::init(&head, config.hidden_dim, &mut rng)?;
        let classifier =
            with_classifier.then(|| init_linear(&mut rng, 3 * config.hidden_dim, NUM_CLASSES));
        Ok(SiameseModel {
            encoder: Encoder { config, params },
            head,
            head_params,
            classifier,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Every tensor with its checkpoint name, in the canonical order shared
    /// with `named_params_mut` and [`BoundModel::flatten`].
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = self
            .encoder
            .params
            .fields()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.head_params.fields().into_iter().map(|(n, t)| (format!("head.{n}"), t)),
        );
        if let Some(c) = &self.classifier {
            out.push(("classifier.weight".into(), &c.weight));
            out.push(("classifier.bias".into(), &c.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let SiameseModel { encoder, head_params, classifier, .. } = self;
        let mut out: Vec<(String, &mut Tensor<F>)> = encoder
            .params
            .fields_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            head_params.fields_mut().into_iter().map(|(n, t)| (format!("head.{n}"), t)),
        );
        if let Some(c) = classifier {
            out.push(("classifier.weight".into(), &mut c.weight));
            out.push(("classifier.bias".into(), &mut c.bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<F>, tracked: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.params.bind(tape, tracked),
            head: self.head_params.bind(tape, tracked),
            classifier: self.classifier.as_ref().map(|c| LinearParams {
                weight: if tracked { tape.param(&c.weight) } else { tape.constant(&c.weight) },
                bias: if tracked { tape.param(&c.bias) } else { tape.constant(&c.bias) },
            }),
        }
    }

    /// Sentence embeddings `[B, H]` without gradients or dropout.
    pub fn embed(&self, batch: &TokenizedBatch) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = embed_on(&mut tape, self.config(), &self.head, &bound, batch, None)?;
        Ok(tape.value(v).clone())
    }

    /// Classification logits `[B, NUM_CLASSES]` for sentence pairs, without
    /// gradients or dropout.
    pub fn classify_pair(&self, a: &TokenizedBatch, b: &TokenizedBatch) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = classify_on(&mut tape, self.config(), &self.head, &bound, a, b, None)?;
        Ok(tape.value(v).clone())
    }
}

/// Encode + pool one batch on an existing tape.
pub fn embed_on<F: Real>(
    tape: &mut Tape<F>,
    config: &EncoderConfig,
    head: &PoolingHead,
    bound: &BoundModel,
    batch: &TokenizedBatch,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let hidden = encode_on(
        tape,
        config,
        &bound.encoder,
        &batch.ids,
        &batch.mask,
        batch.batch,
        batch.seq_len,
        dropout,
    )?;
    pool_on(tape, head, &bound.head, hidden, &batch.mask)
}

/// Pair features `(u, v, |u - v|)` concatenated to `[B, 3H]`.
pub fn pair_features_on<F: Real>(
    tape: &mut Tape<F>,
    config: &EncoderConfig,
    head: &PoolingHead,
    bound: &BoundModel,
    a: &TokenizedBatch,
    b: &TokenizedBatch,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if a.batch != b.batch {
        return Err(Error::Shape(format!(
            "pair batches disagree: {} vs {}",
            a.batch, b.batch
        )));
    }
    let u = embed_on(tape, config, head, bound, a, dropout.as_deref_mut())?;
    let v = embed_on(tape, config, head, bound, b, dropout)?;
    let diff = tape.abs_diff(u, v)?;
    tape.concat_cols(&[u, v, diff])
}

/// Classifier logits on an existing tape. Fails with a config error when the
/// model was built without a classifier.
pub fn classify_on<F: Real>(
    tape: &mut Tape<F>,
    config: &EncoderConfig,
    head: &PoolingHead,
    bound: &BoundModel,
    a: &TokenizedBatch,
    b: &TokenizedBatch,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let classifier = bound
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no pair classifier".into()))?;
    let feats = pair_features_on(tape, config, head, bound, a, b, dropout)?;
    tape.linear(feats, classifier.weight, Some(classifier.bias))
}

/// Regression objective: mean squared error between the cosine of the two
/// sentence embeddings and `score / SCORE_SCALE`.
#[allow(clippy::too_many_arguments)]
pub fn regression_loss_on<F: Real>(
    tape: &mut Tape<F>,
    config: &EncoderConfig,
    head: &PoolingHead,
    bound: &BoundModel,
    a: &TokenizedBatch,
    b: &TokenizedBatch,
    scores: &[f64],
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if a.batch != b.batch || scores.len() != a.batch {
        return Err(Error::Shape(format!(
            "regression batch mismatch: {} vs {} sentences, {} scores",
            a.batch,
            b.batch,
            scores.len()
        )));
    }
    let u = embed_on(tape, config, head, bound, a, dropout.as_deref_mut())?;
    let v = embed_on(tape, config, head, bound, b, dropout)?;
    let cos = tape.cosine_rows(u, v)?;
    let targets: Vec<F> = scores.iter().map(|s| F::from_f64(s / SCORE_SCALE)).collect();
    tape.mse_loss(cos, &targets)
}

/// Classification objective: softmax cross-entropy of the pair classifier.
#[allow(clippy::too_many_arguments)]
pub fn classification_loss_on<F: Real>(
    tape: &mut Tape<F>,
    config: &EncoderConfig,
    head: &PoolingHead,
    bound: &BoundModel,
    a: &TokenizedBatch,
    b: &TokenizedBatch,
    labels: &[usize],
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let logits = classify_on(tape, config, head, bound, a, b, dropout)?;
    tape.cross_entropy(logits, labels)
}

/// Clamped cosine similarity of two host vectors. Clamping guards the
/// reported value against float drift just outside [-1, 1]; the training
/// path works on the unclamped tape op instead.
pub fn cosine_similarity<F: Real>(u: &[F], v: &[F]) -> Result<F> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape(format!(
            "cosine_similarity: {} vs {} elements",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (F::zero(), F::zero(), F::zero());
    for (x, y) in u.iter().zip(v) {
        dot = dot + *x * *y;
        nu = nu + *x * *x;
        nv = nv + *y * *y;
    }
    if nu == F::zero() || nv == F::zero() {
        return Err(Error::Degenerate("cosine_similarity: zero-norm vector".into()));
    }
    let c = dot / (nu.sqrt() * nv.sqrt());
    Ok(c.min(F::one()).max(-F::one()))
}

/// Mean cross-entropy of host logits `[B, C]` against class indices.
pub fn cross_entropy_loss<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let mut tape = Tape::new();
    let z = tape.constant(logits);
    let l = tape.cross_entropy(z, labels)?;
    Ok(tape.data(l)[0])
}
