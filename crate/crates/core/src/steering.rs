//! Steering directions mined from the gradient of a contrastive loss.
//!
//! For a pair `(x⁺, x⁻)` the loss is `log P(x⁻) − log P(x⁺)` at the answer
//! position. Its gradient with respect to the residual stream after block `l` points
//! toward the unwanted completion, so the steering direction is the negated mean
//! gradient over the mining pairs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{greedy_with, DecodeResult, DecodingError};
use crate::evalharness::{evaluate, Condition, EvalError, EvalResult, SweepReport};
use crate::model::{EncoderStates, InjectionMode, InjectionSpec, Model, ModelError};
use crate::numerics::{self, NumericsError, Scalar, Tape, Tensor};
use crate::tasks::TrapExample;

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("no mining examples")]
    NoExamples,
    #[error("decoder layer {layer} outside 1..={n_layers}")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("token {0} outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("contrast pair needs distinct target and competing tokens")]
    DegeneratePair,
    #[error("loss does not depend on the activation at layer {0}")]
    GradientPathAbsent(usize),
    #[error("steering vector has zero norm")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("steering vector for layer {found}, expected {expected}")]
    LayerMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decoding(#[from] DecodingError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Prompt, decoder prefix, desired token `x⁺` and competing token `x⁻`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub input_tokens: Vec<usize>,
    pub decoder_prefix: Vec<usize>,
    pub target: usize,
    pub competing: usize,
}

/// Mean-gradient direction for one decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SteeringVector<T> {
    pub layer: usize,
    pub direction: Vec<T>,
    pub n_examples: usize,
}

impl<T: Scalar + Serialize + for<'de> Deserialize<'de>> SteeringVector<T> {
    pub fn to_json(&self) -> Result<String, SteeringError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SteeringError> {
        Ok(serde_json::from_str(text)?)
    }
}

impl<T: Scalar> SteeringVector<T> {
    pub fn direction_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.direction.clone())
    }

    pub fn norm(&self) -> T {
        self.direction.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Injection adding `alpha · v / ‖v‖` after this vector's layer.
    pub fn injection(&self, alpha: T, mode: InjectionMode) -> InjectionSpec<T> {
        InjectionSpec::new(self.layer, self.direction_tensor(), alpha).with_mode(mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningConfig {
    pub layer: usize,
    pub examples: Vec<ContrastPair>,
}

fn check_pair<T: Scalar>(model: &Model<T>, pair: &ContrastPair) -> Result<(), SteeringError> {
    let v = model.config().vocab_size;
    for t in [pair.target, pair.competing] {
        if t >= v {
            return Err(SteeringError::TokenOutOfRange(t));
        }
    }
    if pair.target == pair.competing {
        return Err(SteeringError::DegeneratePair);
    }
    Ok(())
}

fn check_layer<T: Scalar>(model: &Model<T>, layer: usize) -> Result<(), SteeringError> {
    let n_layers = model.n_dec_layers();
    if layer == 0 || layer > n_layers {
        return Err(SteeringError::InvalidLayer { layer, n_layers });
    }
    Ok(())
}

/// `log P(x⁻) − log P(x⁺)` under next-token `logits`.
pub fn contrastive_loss<T: Scalar>(
    logits: &Tensor<T>,
    pair: &ContrastPair,
) -> Result<T, SteeringError> {
    let logp = numerics::log_softmax(&logits.last_row())?;
    let row = logp.data();
    let get = |t: usize| row.get(t).copied().ok_or(SteeringError::TokenOutOfRange(t));
    Ok(get(pair.competing)? - get(pair.target)?)
}

/// Gradient of the contrastive loss with respect to the residual stream after
/// decoder block `layer`, at the last prefix position.
pub fn mine_gradient<T: Scalar>(
    model: &Model<T>,
    pair: &ContrastPair,
    layer: usize,
) -> Result<Tensor<T>, SteeringError> {
    check_layer(model, layer)?;
    check_pair(model, pair)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let enc = model.encode_on(&mut tape, &p, &pair.input_tokens)?;
    let enc_pad: Vec<bool> = pair
        .input_tokens
        .iter()
        .map(|&t| t == crate::model::PAD)
        .collect();
    let taps = model.decode_on(&mut tape, &p, enc, &enc_pad, &pair.decoder_prefix, None)?;
    let hidden = taps.layers[layer - 1];
    let last = *taps.layers.last().expect("decoder layers");
    let logits = tape.matmul(last, p[model.lm_head_index()])?;
    let logp = tape.log_softmax(logits)?;
    let len = pair.decoder_prefix.len();
    let v = model.config().vocab_size;
    let mut picks = vec![T::zero(); len * v];
    picks[(len - 1) * v + pair.competing] = T::one();
    picks[(len - 1) * v + pair.target] = -T::one();
    let picks = tape.input(Tensor::new(vec![len, v], picks)?);
    let picked = tape.mul(logp, picks)?;
    let loss = tape.sum(picked)?;
    let mut grads = tape.backward(loss, &[hidden])?;
    let grad = grads
        .take(hidden)
        .ok_or(SteeringError::GradientPathAbsent(layer))?
        .last_row();
    if !grad.is_finite() {
        return Err(SteeringError::NonFinite("mined gradient"));
    }
    Ok(grad)
}

/// Negated mean gradient over the mining pairs, accumulated in input order.
pub fn mine_vector<T: Scalar>(
    model: &Model<T>,
    config: &MiningConfig,
) -> Result<SteeringVector<T>, SteeringError> {
    check_layer(model, config.layer)?;
    if config.examples.is_empty() {
        return Err(SteeringError::NoExamples);
    }
    let mut sum = vec![T::zero(); model.config().d_model];
    for pair in &config.examples {
        let g = mine_gradient(model, pair, config.layer)?;
        for (s, &v) in sum.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    let scale = -T::one() / T::lit(config.examples.len() as f64);
    let direction: Vec<T> = sum.into_iter().map(|v| v * scale).collect();
    let vector = SteeringVector {
        layer: config.layer,
        direction,
        n_examples: config.examples.len(),
    };
    if vector.norm() == T::zero() {
        return Err(SteeringError::ZeroVector);
    }
    Ok(vector)
}

/// Greedy decoding with `alpha · v / ‖v‖` added after the vector's layer.
pub fn steer_decode<T: Scalar>(
    model: &Model<T>,
    enc: &EncoderStates<T>,
    vector: &SteeringVector<T>,
    alpha: T,
    mode: InjectionMode,
    max_len: usize,
) -> Result<DecodeResult<T>, SteeringError> {
    check_layer(model, vector.layer)?;
    let spec = vector.injection(alpha, mode);
    Ok(greedy_with(model, enc, max_len, Some(&spec))?)
}

/// Result of [`sweep`]: the grid, the vector mined at each layer, and every
/// evaluation run, baseline first then cells in layer-major order.
#[derive(Clone, Debug)]
pub struct SweepOutcome<T> {
    pub report: SweepReport,
    pub vectors: Vec<SteeringVector<T>>,
    pub baseline: EvalResult,
    pub cells: Vec<EvalResult>,
}

/// Mines a fresh vector at each layer and evaluates every `(layer, α)` cell.
pub fn sweep<T: Scalar>(
    model: &Model<T>,
    mining: &[ContrastPair],
    layers: &[usize],
    alphas: &[f64],
    mode: InjectionMode,
    eval_set: &[TrapExample],
    max_len: usize,
) -> Result<SweepOutcome<T>, EvalError> {
    let baseline = evaluate(model, &Condition::Baseline, eval_set, max_len)?;
    let mut vectors = Vec::with_capacity(layers.len());
    let mut grid = Vec::with_capacity(layers.len());
    let mut cells = Vec::with_capacity(layers.len() * alphas.len());
    for &layer in layers {
        let vector = mine_vector(
            model,
            &MiningConfig {
                layer,
                examples: mining.to_vec(),
            },
        )?;
        let mut row = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let condition = Condition::Steered {
                vector: vector.clone(),
                alpha: T::lit(alpha),
                mode,
            };
            let result = evaluate(model, &condition, eval_set, max_len)?;
            row.push(result.accuracy);
            cells.push(result);
        }
        grid.push(row);
        vectors.push(vector);
    }
    let report = SweepReport::new(
        layers.to_vec(),
        alphas.to_vec(),
        grid,
        baseline.accuracy,
    )?;
    Ok(SweepOutcome {
        report,
        vectors,
        baseline,
        cells,
    })
}
