use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Real, Tape, Tensor, Var};
use crate::rng::truncated_normal;

/// Pooling windows are fixed at width 2, stride 2: each stage halves the
/// time axis (rounding up) until the final masked mean.
pub const POOL_WIDTH: usize = 2;
pub const POOL_STRIDE: usize = 2;

fn default_blocks() -> usize {
    2
}

fn default_kernel() -> usize {
    3
}

/// How token representations `[B,T,H]` collapse into one sentence vector
/// `[B,H]`. Every head preserves the hidden width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PoolingHead {
    /// First position (the sentence marker token).
    Cls,
    /// Mean over valid positions.
    Mean,
    /// Per-channel max over valid positions.
    Max,
    /// Stacked same-width convolutions with tanh, each followed by masked
    /// max pooling, then a masked mean over what remains of the time axis.
    Cnn {
        #[serde(default = "default_blocks")]
        blocks: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
}

impl PoolingHead {
    pub fn validate(&self) -> Result<()> {
        if let PoolingHead::Cnn { blocks, kernel } = self {
            if *blocks == 0 {
                return Err(Error::Config("cnn head needs at least one block".into()));
            }
            if *kernel == 0 || *kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "cnn kernel width {kernel} must be odd and positive"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlockParams<T> {
    pub kernel: T,
    pub bias: T,
}

/// Trainable state of a pooling head. Only the CNN head owns tensors.
#[derive(Debug, Clone)]
pub enum HeadParams<T> {
    Simple,
    Cnn(Vec<ConvBlockParams<T>>),
}

impl<T> HeadParams<T> {
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        if let HeadParams::Cnn(blocks) = self {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("cnn{i}.kernel"), &b.kernel));
                out.push((format!("cnn{i}.bias"), &b.bias));
            }
        }
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        if let HeadParams::Cnn(blocks) = self {
            for (i, b) in blocks.iter_mut().enumerate() {
                let ConvBlockParams { kernel, bias } = b;
                out.push((format!("cnn{i}.kernel"), kernel));
                out.push((format!("cnn{i}.bias"), bias));
            }
        }
        out
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> HeadParams<U> {
        match self {
            HeadParams::Simple => HeadParams::Simple,
            HeadParams::Cnn(blocks) => HeadParams::Cnn(
                blocks
                    .iter()
                    .map(|b| ConvBlockParams { kernel: f(&b.kernel), bias: f(&b.bias) })
                    .collect(),
            ),
        }
    }
}

impl<F: Real> HeadParams<Tensor<F>> {
    pub fn init(head: &PoolingHead, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        head.validate()?;
        Ok(match *head {
            PoolingHead::Cls | PoolingHead::Mean | PoolingHead::Max => HeadParams::Simple,
            PoolingHead::Cnn { blocks, kernel } => HeadParams::Cnn(
                (0..blocks)
                    .map(|_| ConvBlockParams {
                        kernel: Tensor::new(
                            vec![kernel, hidden_dim, hidden_dim],
                            truncated_normal(rng, kernel * hidden_dim * hidden_dim, INIT_STD),
                        )
                        .expect("sized above"),
                        bias: Tensor::zeros(vec![hidden_dim]),
                    })
                    .collect(),
            ),
        })
    }

    pub fn bind(&self, tape: &mut Tape<F>, tracked: bool) -> HeadParams<Var> {
        self.map(&mut |t| if tracked { tape.param(t) } else { tape.constant(t) })
    }
}

// ── pooling forward passes ─────────────────────────────────────────────────

pub fn pool_cls<F: Real>(tape: &mut Tape<F>, hidden: Var) -> Result<Var> {
    tape.take_first(hidden)
}

pub fn pool_mean<F: Real>(tape: &mut Tape<F>, hidden: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_mean(hidden, mask)
}

pub fn pool_max<F: Real>(tape: &mut Tape<F>, hidden: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_max(hidden, mask)
}

/// Convolutional pooling stack. Inputs are re-zeroed at masked positions
/// before each convolution so padding length can never leak into valid
/// outputs; the validity mask is carried through each pooling stage.
pub fn pool_cnn<F: Real>(
    tape: &mut Tape<F>,
    params: &[ConvBlockParams<Var>],
    hidden: Var,
    mask: &[bool],
) -> Result<Var> {
    if params.is_empty() {
        return Err(Error::Config("cnn head needs at least one block".into()));
    }
    let mut x = hidden;
    let mut mask = mask.to_vec();
    for block in params {
        let zeroed = tape.zero_masked(x, &mask)?;
        let conv = tape.conv1d(zeroed, block.kernel, block.bias)?;
        let act = tape.activation(conv, Activation::Tanh)?;
        let (pooled, next_mask) = tape.max_pool1d(act, POOL_WIDTH, POOL_STRIDE, &mask)?;
        x = pooled;
        mask = next_mask;
    }
    tape.masked_mean(x, &mask)
}

/// Dispatches on the configured head. `params` must be the state built for
/// this head kind.
pub fn pool_on<F: Real>(
    tape: &mut Tape<F>,
    head: &PoolingHead,
    params: &HeadParams<Var>,
    hidden: Var,
    mask: &[bool],
) -> Result<Var> {
    match (head, params) {
        (PoolingHead::Cls, HeadParams::Simple) => pool_cls(tape, hidden),
        (PoolingHead::Mean, HeadParams::Simple) => pool_mean(tape, hidden, mask),
        (PoolingHead::Max, HeadParams::Simple) => pool_max(tape, hidden, mask),
        (PoolingHead::Cnn { .. }, HeadParams::Cnn(blocks)) => {
            pool_cnn(tape, blocks, hidden, mask)
        }
        _ => Err(Error::Config("pooling head kind does not match its parameters".into())),
    }
}
