use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Real, Tape, Tensor, Var};
use crate::rng::{seeded, truncated_normal, Dropout};

/// Weight initialization scale; all matrices draw from N(0, 0.02^2)
/// truncated at two standard deviations.
pub const INIT_STD: f64 = 0.02;

fn default_groups() -> usize {
    1
}

/// Architecture of the token encoder.
///
/// With `factorized_embedding` the vocabulary is embedded at `embed_dim` and
/// projected up to `hidden_dim`; otherwise the two must be equal and the
/// projection is absent. With `share_layers` only `num_hidden_groups`
/// distinct transformer blocks are materialized and layer `i` reuses group
/// `i * groups / layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    #[serde(default)]
    pub factorized_embedding: bool,
    #[serde(default)]
    pub share_layers: bool,
    #[serde(default = "default_groups")]
    pub num_hidden_groups: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.ffn_dim == 0
        {
            return bad("encoder dimensions must all be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!(
                "max_len {} cannot hold a leading marker plus content",
                self.max_len
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if !self.factorized_embedding && self.embed_dim != self.hidden_dim {
            return bad(format!(
                "without a factorized embedding, embed_dim {} must equal hidden_dim {}",
                self.embed_dim, self.hidden_dim
            ));
        }
        if self.num_hidden_groups == 0 || self.num_hidden_groups > self.layers {
            return bad(format!(
                "num_hidden_groups {} must lie in 1..={}",
                self.num_hidden_groups, self.layers
            ));
        }
        if self.share_layers && !self.layers.is_multiple_of(self.num_hidden_groups) {
            return bad(format!(
                "layers {} must be a multiple of num_hidden_groups {}",
                self.layers, self.num_hidden_groups
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Number of transformer blocks actually materialized.
    pub fn num_groups(&self) -> usize {
        if self.share_layers {
            self.num_hidden_groups
        } else {
            self.layers
        }
    }

    /// Which materialized block layer `layer` runs. Contiguous runs of
    /// layers share a group.
    pub fn group_of(&self, layer: usize) -> usize {
        debug_assert!(layer < self.layers);
        if self.share_layers {
            layer * self.num_hidden_groups / self.layers
        } else {
            layer
        }
    }
}

// ── parameter containers ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub query: LinearParams<T>,
    pub key: LinearParams<T>,
    pub value: LinearParams<T>,
    pub output: LinearParams<T>,
    pub ffn_in: LinearParams<T>,
    pub ffn_out: LinearParams<T>,
    pub norm_attn: NormParams<T>,
    pub norm_ffn: NormParams<T>,
}

/// Every tensor of the encoder, generic over the storage (host tensors or
/// tape vars). `fields`/`fields_mut` fix the canonical traversal order that
/// optimizer state, gradient collection, and checkpoints all rely on.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub embed_projection: Option<T>,
    pub position_embedding: T,
    pub segment_embedding: T,
    pub embed_norm: NormParams<T>,
    pub groups: Vec<BlockParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> =
            vec![("token_embedding".into(), &self.token_embedding)];
        if let Some(p) = &self.embed_projection {
            out.push(("embed_projection".into(), p));
        }
        out.push(("position_embedding".into(), &self.position_embedding));
        out.push(("segment_embedding".into(), &self.segment_embedding));
        out.push(("embed_norm.gamma".into(), &self.embed_norm.gamma));
        out.push(("embed_norm.beta".into(), &self.embed_norm.beta));
        for (g, block) in self.groups.iter().enumerate() {
            for (name, lin) in [
                ("query", &block.query),
                ("key", &block.key),
                ("value", &block.value),
                ("output", &block.output),
                ("ffn_in", &block.ffn_in),
                ("ffn_out", &block.ffn_out),
            ] {
                out.push((format!("group{g}.{name}.weight"), &lin.weight));
                out.push((format!("group{g}.{name}.bias"), &lin.bias));
            }
            out.push((format!("group{g}.norm_attn.gamma"), &block.norm_attn.gamma));
            out.push((format!("group{g}.norm_attn.beta"), &block.norm_attn.beta));
            out.push((format!("group{g}.norm_ffn.gamma"), &block.norm_ffn.gamma));
            out.push((format!("group{g}.norm_ffn.beta"), &block.norm_ffn.beta));
        }
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut T)> {
        let EncoderParams {
            token_embedding,
            embed_projection,
            position_embedding,
            segment_embedding,
            embed_norm,
            groups,
        } = self;
        let mut out: Vec<(String, &mut T)> =
            vec![("token_embedding".into(), token_embedding)];
        if let Some(p) = embed_projection {
            out.push(("embed_projection".into(), p));
        }
        out.push(("position_embedding".into(), position_embedding));
        out.push(("segment_embedding".into(), segment_embedding));
        out.push(("embed_norm.gamma".into(), &mut embed_norm.gamma));
        out.push(("embed_norm.beta".into(), &mut embed_norm.beta));
        for (g, block) in groups.iter_mut().enumerate() {
            let BlockParams { query, key, value, output, ffn_in, ffn_out, norm_attn, norm_ffn } =
                block;
            for (name, lin) in [
                ("query", query),
                ("key", key),
                ("value", value),
                ("output", output),
                ("ffn_in", ffn_in),
                ("ffn_out", ffn_out),
            ] {
                out.push((format!("group{g}.{name}.weight"), &mut lin.weight));
                out.push((format!("group{g}.{name}.bias"), &mut lin.bias));
            }
            out.push((format!("group{g}.norm_attn.gamma"), &mut norm_attn.gamma));
            out.push((format!("group{g}.norm_attn.beta"), &mut norm_attn.beta));
            out.push((format!("group{g}.norm_ffn.gamma"), &mut norm_ffn.gamma));
            out.push((format!("group{g}.norm_ffn.beta"), &mut norm_ffn.beta));
        }
        out
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            token_embedding: f(&self.token_embedding),
            embed_projection: self.embed_projection.as_ref().map(&mut *f),
            position_embedding: f(&self.position_embedding),
            segment_embedding: f(&self.segment_embedding),
            embed_norm: NormParams {
                gamma: f(&self.embed_norm.gamma),
                beta: f(&self.embed_norm.beta),
            },
            groups: self
                .groups
                .iter()
                .map(|b| BlockParams {
                    query: LinearParams { weight: f(&b.query.weight), bias: f(&b.query.bias) },
                    key: LinearParams { weight: f(&b.key.weight), bias: f(&b.key.bias) },
                    value: LinearParams { weight: f(&b.value.weight), bias: f(&b.value.bias) },
                    output: LinearParams {
                        weight: f(&b.output.weight),
                        bias: f(&b.output.bias),
                    },
                    ffn_in: LinearParams {
                        weight: f(&b.ffn_in.weight),
                        bias: f(&b.ffn_in.bias),
                    },
                    ffn_out: LinearParams {
                        weight: f(&b.ffn_out.weight),
                        bias: f(&b.ffn_out.bias),
                    },
                    norm_attn: NormParams {
                        gamma: f(&b.norm_attn.gamma),
                        beta: f(&b.norm_attn.beta),
                    },
                    norm_ffn: NormParams {
                        gamma: f(&b.norm_ffn.gamma),
                        beta: f(&b.norm_ffn.beta),
                    },
                })
                .collect(),
        }
    }
}

pub(crate) fn init_linear<F: Real>(
    rng: &mut ChaCha8Rng,
    nin: usize,
    nout: usize,
) -> LinearParams<Tensor<F>> {
    LinearParams {
        weight: Tensor::new(vec![nin, nout], truncated_normal(rng, nin * nout, INIT_STD))
            .expect("sized above"),
        bias: Tensor::zeros(vec![nout]),
    }
}

fn init_norm<F: Real>(h: usize) -> NormParams<Tensor<F>> {
    NormParams { gamma: Tensor::full(vec![h], F::one()), beta: Tensor::zeros(vec![h]) }
}

impl<F: Real> EncoderParams<Tensor<F>> {
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, h, ff) =
            (config.vocab_size, config.embed_dim, config.hidden_dim, config.ffn_dim);
        let token_embedding =
            Tensor::new(vec![v, e], truncated_normal(rng, v * e, INIT_STD))?;
        let embed_projection = if config.factorized_embedding {
            Some(Tensor::new(vec![e, h], truncated_normal(rng, e * h, INIT_STD))?)
        } else {
            None
        };
        let position_embedding = Tensor::new(
            vec![config.max_len, h],
            truncated_normal(rng, config.max_len * h, INIT_STD),
        )?;
        let segment_embedding = Tensor::new(vec![2, h], truncated_normal(rng, 2 * h, INIT_STD))?;
        let groups = (0..config.num_groups())
            .map(|_| BlockParams {
                query: init_linear(rng, h, h),
                key: init_linear(rng, h, h),
                value: init_linear(rng, h, h),
                output: init_linear(rng, h, h),
                ffn_in: init_linear(rng, h, ff),
                ffn_out: init_linear(rng, ff, h),
                norm_attn: init_norm(h),
                norm_ffn: init_norm(h),
            })
            .collect();
        Ok(EncoderParams {
            token_embedding,
            embed_projection,
            position_embedding,
            segment_embedding,
            embed_norm: init_norm(h),
            groups,
        })
    }

    pub fn bind(&self, tape: &mut Tape<F>, tracked: bool) -> EncoderParams<Var> {
        self.map(&mut |t| if tracked { tape.param(t) } else { tape.constant(t) })
    }
}

// ── parameter census ───────────────────────────────────────────────────────

/// Parameter totals by component, computed from the configuration alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Token embedding table (V x E).
    pub embedding: usize,
    /// Factorized projection (E x H), zero when absent.
    pub projection: usize,
    /// All materialized transformer blocks.
    pub blocks: usize,
    /// Position and segment tables plus the embedding norm.
    pub other: usize,
    pub total: usize,
}

pub fn param_count(config: &EncoderConfig) -> Result<ParamCount> {
    config.validate()?;
    let (v, e, h, ff) = (config.vocab_size, config.embed_dim, config.hidden_dim, config.ffn_dim);
    let embedding = v * e;
    let projection = if config.factorized_embedding { e * h } else { 0 };
    let per_block = 4 * (h * h + h) + (h * ff + ff) + (ff * h + h) + 2 * (2 * h);
    let blocks = config.num_groups() * per_block;
    let other = config.max_len * h + 2 * h + 2 * h;
    Ok(ParamCount {
        embedding,
        projection,
        blocks,
        other,
        total: embedding + projection + blocks + other,
    })
}

// ── forward pass ───────────────────────────────────────────────────────────

/// Runs the encoder over a tokenized batch already bound to `tape`.
///
/// `ids` and `mask` are row-major `[batch, seq_len]`; `mask` marks real
/// tokens (true) versus padding. Returns hidden states `[batch, seq_len, H]`.
/// `dropout` is only passed during training.
#[allow(clippy::too_many_arguments)]
pub fn encode_on<F: Real>(
    tape: &mut Tape<F>,
    config: &EncoderConfig,
    params: &EncoderParams<Var>,
    ids: &[usize],
    mask: &[bool],
    batch: usize,
    seq_len: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::Input("encode: empty batch or sequence".into()));
    }
    if seq_len > config.max_len {
        return Err(Error::Input(format!(
            "encode: sequence length {seq_len} exceeds max_len {}",
            config.max_len
        )));
    }
    if ids.len() != batch * seq_len || mask.len() != batch * seq_len {
        return Err(Error::Shape(format!(
            "encode: {} ids / {} mask entries for batch {batch} x {seq_len}",
            ids.len(),
            mask.len()
        )));
    }

    let prefix = [batch, seq_len];
    let tok = tape.gather(params.token_embedding, ids, &prefix)?;
    let projected = match params.embed_projection {
        Some(p) => tape.linear(tok, p, None)?,
        None => tok,
    };

    let pos_ids: Vec<usize> = (0..batch * seq_len).map(|i| i % seq_len).collect();
    let pos = tape.gather(params.position_embedding, &pos_ids, &prefix)?;
    // Single sentences: every token sits in segment zero. The gather keeps
    // the table wired into the graph.
    let seg_ids = vec![0usize; batch * seq_len];
    let seg = tape.gather(params.segment_embedding, &seg_ids, &prefix)?;

    let summed = tape.add(projected, pos)?;
    let summed = tape.add(summed, seg)?;
    let mut x = tape.layer_norm(summed, params.embed_norm.gamma, params.embed_norm.beta)?;
    if let Some(d) = dropout.as_deref_mut() {
        let m = d.mask(tape.value(x).numel());
        x = tape.mul_mask(x, &m)?;
    }

    let heads = config.heads;
    let dh = config.hidden_dim / heads;
    let inv_sqrt_dh = F::from_f64(1.0 / (dh as f64).sqrt());
    for layer in 0..config.layers {
        let block = &params.groups[config.group_of(layer)];

        let q = tape.linear(x, block.query.weight, Some(block.query.bias))?;
        let k = tape.linear(x, block.key.weight, Some(block.key.bias))?;
        let v = tape.linear(x, block.value.weight, Some(block.value.bias))?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let logits = tape.batch_matmul_tb(qh, kh)?;
        let scaled = tape.scale(logits, inv_sqrt_dh)?;
        let probs = tape.masked_softmax(scaled, mask, heads)?;
        let ctx = tape.batch_matmul(probs, vh)?;
        let merged = tape.merge_heads(ctx, heads)?;
        let mut attn = tape.linear(merged, block.output.weight, Some(block.output.bias))?;
        if let Some(d) = dropout.as_deref_mut() {
            let m = d.mask(tape.value(attn).numel());
            attn = tape.mul_mask(attn, &m)?;
        }
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, block.norm_attn.gamma, block.norm_attn.beta)?;

        let ff = tape.linear(x, block.ffn_in.weight, Some(block.ffn_in.bias))?;
        let ff = tape.activation(ff, Activation::Gelu)?;
        let mut ff = tape.linear(ff, block.ffn_out.weight, Some(block.ffn_out.bias))?;
        if let Some(d) = dropout.as_deref_mut() {
            let m = d.mask(tape.value(ff).numel());
            ff = tape.mul_mask(ff, &m)?;
        }
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, block.norm_ffn.gamma, block.norm_ffn.beta)?;
    }
    Ok(x)
}

/// A configured encoder with its parameters.
#[derive(Debug, Clone)]
pub struct Encoder<F: Real> {
    pub config: EncoderConfig,
    pub params: EncoderParams<Tensor<F>>,
}

impl<F: Real> Encoder<F> {
    /// Fresh encoder; weights drawn from the config seed.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let mut rng = seeded(config.seed);
        let params = EncoderParams::init(&config, &mut rng)?;
        Ok(Encoder { config, params })
    }

    /// Inference-mode forward: no dropout, no gradients.
    pub fn encode(
        &self,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        seq_len: usize,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = encode_on(&mut tape, &self.config, &bound, ids, mask, batch, seq_len, None)?;
        Ok(tape.value(out).clone())
    }
}
