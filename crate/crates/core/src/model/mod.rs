//! Miniature T5-style encoder–decoder.
//!
//! Pre-normalized blocks with RMS normalization and no bias terms, ReLU
//! feed-forward layers, relative-position bias shared within each stack, and an
//! untied bias-free LM head that is the only hidden-to-logit map. Every decoder
//! block exposes its residual stream, and any block can receive a steering offset.

mod checkpoint;
mod config;
mod forward;
mod params;
mod trace;

pub use config::{ModelConfig, EOS, PAD, START};
pub use params::ModelParams;
pub use trace::{InjectionMode, InjectionSpec, LayerState, LayerTrace};

use rand::Rng;
use thiserror::Error;

use crate::numerics::{self, NumericsError, Scalar, Slot, Tape, Tensor};
use params::Layout;

/// Epsilon inside every RMS normalization.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("decoder prefix must begin with the start token")]
    InvalidPrefix,
    #[error("decoder layer {layer} outside 1..={n_layers}")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("zero-norm steering direction with positive strength")]
    ZeroDirection,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Encoder output together with the padding pattern of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates<T> {
    pub states: Tensor<T>,
    pub pad_mask: Vec<bool>,
}

impl<T> EncoderStates<T> {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }
}

/// One supervised sequence pair. `target` is what the decoder should emit after
/// the start token, typically ending in `EOS`; `PAD` positions are not scored.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Recorded batch loss, ready for reverse accumulation into the parameters.
pub struct LossRecord<'a, T: Scalar> {
    pub tape: Tape<'a, T>,
    pub loss: Slot,
    pub params: Vec<Slot>,
}

impl<T: Scalar> LossRecord<'_, T> {
    pub fn value(&self) -> T {
        self.tape.value(self.loss).expect("loss slot").data()[0]
    }

    /// Gradient of the loss for every parameter tensor, in parameter order.
    pub fn param_gradients(&self) -> Result<Vec<Tensor<T>>, ModelError> {
        let mut grads = self.tape.backward(self.loss, &self.params)?;
        Ok(self
            .params
            .iter()
            .map(|&s| {
                grads
                    .take(s)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(s).expect("slot").shape()))
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    params: ModelParams<T>,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self::assemble(config, params))
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let named = params
            .names()
            .iter()
            .cloned()
            .zip(params.tensors().iter().cloned())
            .collect();
        let params = ModelParams::from_named(&config, named)?;
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: ModelParams<T>) -> Self {
        let layout = Layout::new(&config);
        Self {
            config,
            layout,
            params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn n_dec_layers(&self) -> usize {
        self.config.n_dec_layers
    }

    /// The shared LM-head matrix `[d_model, vocab_size]`.
    pub fn lm_head(&self) -> &Tensor<T> {
        self.params.get(self.layout.lm_head)
    }

    pub(crate) fn lm_head_index(&self) -> usize {
        self.layout.lm_head
    }

    pub fn encode(&self, input: &[usize]) -> Result<EncoderStates<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let out = self.encode_on(&mut tape, &p, input)?;
        let states = tape.value(out)?.clone();
        states.ensure_finite("encode")?;
        Ok(EncoderStates {
            states,
            pad_mask: input.iter().map(|&t| t == PAD).collect(),
        })
    }

    /// Shared LM head: `hidden · W_lm`. Identical for every decoder depth.
    pub fn project_layer(&self, hidden: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(numerics::matmul(hidden, self.lm_head())?)
    }

    /// Next-token logits for the last position of `prefix`, without the per-depth trace.
    pub fn next_logits(
        &self,
        enc: &EncoderStates<T>,
        prefix: &[usize],
        injection: Option<&InjectionSpec<T>>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let enc_slot = tape.input_ref(&enc.states);
        let taps = self.decode_on(&mut tape, &p, enc_slot, &enc.pad_mask, prefix, injection)?;
        let hidden = tape
            .value(*taps.layers.last().expect("decoder layers"))?
            .last_row();
        hidden.ensure_finite("next_logits")?;
        self.project_layer(&hidden)
    }

    /// Runs the decoder over `prefix` and returns the next-token logits for the
    /// last position together with the per-depth trace at that position.
    pub fn decode_step(
        &self,
        enc: &EncoderStates<T>,
        prefix: &[usize],
        injection: Option<&InjectionSpec<T>>,
    ) -> Result<(Tensor<T>, LayerTrace<T>), ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let enc_slot = tape.input_ref(&enc.states);
        let taps = self.decode_on(&mut tape, &p, enc_slot, &enc.pad_mask, prefix, injection)?;
        let state = |slot: Slot| -> Result<LayerState<T>, ModelError> {
            let hidden = tape.value(slot)?.last_row();
            hidden.ensure_finite("decode_step")?;
            let logits = self.project_layer(&hidden)?;
            let dist = numerics::softmax(&logits)?;
            Ok(LayerState {
                hidden,
                logits,
                dist,
            })
        };
        let embedding = state(taps.embedding)?;
        let layers = taps
            .layers
            .iter()
            .map(|&s| state(s))
            .collect::<Result<Vec<_>, _>>()?;
        let trace = LayerTrace { embedding, layers };
        Ok((trace.final_state().logits.clone(), trace))
    }

    /// Mean token-level cross-entropy over all non-pad target positions of `batch`.
    pub fn training_loss(&self, batch: &[TrainExample]) -> Result<LossRecord<'_, T>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let scored: usize = batch
            .iter()
            .map(|ex| ex.target.iter().filter(|&&t| t != PAD).count())
            .sum();
        if scored == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let weight = -T::one() / T::lit(scored as f64);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let mut total: Option<Slot> = None;
        for ex in batch {
            self.check_tokens(&ex.target)?;
            let enc = self.encode_on(&mut tape, &p, &ex.input)?;
            let enc_pad: Vec<bool> = ex.input.iter().map(|&t| t == PAD).collect();
            let mut prefix = Vec::with_capacity(ex.target.len());
            prefix.push(START);
            prefix.extend_from_slice(&ex.target[..ex.target.len() - 1]);
            let taps = self.decode_on(&mut tape, &p, enc, &enc_pad, &prefix, None)?;
            let hidden = *taps.layers.last().expect("decoder layers");
            let logits = tape.matmul(hidden, p[self.layout.lm_head])?;
            let logp = tape.log_softmax(logits)?;
            let v = self.config.vocab_size;
            let mut picks = vec![T::zero(); ex.target.len() * v];
            for (pos, &t) in ex.target.iter().enumerate() {
                if t != PAD {
                    picks[pos * v + t] = weight;
                }
            }
            let picks = tape.input(Tensor::new(vec![ex.target.len(), v], picks)?);
            let picked = tape.mul(logp, picks)?;
            let term = tape.sum(picked)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let loss = total.expect("non-empty batch");
        tape.value(loss)?.ensure_finite("training_loss")?;
        Ok(LossRecord {
            tape,
            loss,
            params: p,
        })
    }
}
