use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{Scalar, Tensor};

/// Residual stream of one decoder depth at the answer position, with its
/// shared-head projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    pub dist: Tensor<T>,
}

/// Per-depth view of one decoding step.
///
/// `hidden_states(j)` for `j = 1..=n_dec_layers` is the output of decoder block `j`
/// after its last residual addition. The final entry is taken after the stack's
/// closing normalization, so its projection is exactly the model's output
/// logits. Depth 0 (token embeddings) is kept separately for contrast candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub embedding: LayerState<T>,
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> LayerTrace<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// State at depth `j`, `0..=n_layers`.
    pub fn depth(&self, j: usize) -> Option<&LayerState<T>> {
        if j == 0 {
            Some(&self.embedding)
        } else {
            self.layers.get(j - 1)
        }
    }

    /// Residual stream after block `j` (1-based).
    pub fn hidden_state(&self, j: usize) -> Option<&Tensor<T>> {
        j.checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .map(|s| &s.hidden)
    }

    pub fn final_state(&self) -> &LayerState<T> {
        self.layers.last().expect("trace has at least two layers")
    }
}

/// Which decoder positions receive the steering offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Every generated position, i.e. each decoding step is steered.
    #[default]
    EveryStep,
    /// Only the position that emits the first answer token.
    FirstStep,
}

/// Adds `strength · direction / ‖direction‖` to the residual stream after block `layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec<T> {
    pub layer: usize,
    pub direction: Tensor<T>,
    pub strength: T,
    pub mode: InjectionMode,
}

impl<T: Scalar> InjectionSpec<T> {
    pub fn new(layer: usize, direction: Tensor<T>, strength: T) -> Self {
        Self {
            layer,
            direction,
            strength,
            mode: InjectionMode::EveryStep,
        }
    }

    pub fn with_mode(mut self, mode: InjectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub(crate) fn validate(&self, n_layers: usize, d_model: usize) -> Result<(), ModelError> {
        if self.layer == 0 || self.layer > n_layers {
            return Err(ModelError::InvalidLayer {
                layer: self.layer,
                n_layers,
            });
        }
        if self.direction.len() != d_model {
            return Err(ModelError::Config(format!(
                "steering direction has {} entries, d_model is {d_model}",
                self.direction.len()
            )));
        }
        if !self.strength.is_finite() || self.strength < T::zero() {
            return Err(ModelError::Config(
                "steering strength must be finite and non-negative".into(),
            ));
        }
        if !self.direction.is_finite() {
            return Err(ModelError::Config("steering direction not finite".into()));
        }
        if self.strength > T::zero() && self.direction.norm() == T::zero() {
            return Err(ModelError::ZeroDirection);
        }
        Ok(())
    }

    /// `strength · direction / ‖direction‖`.
    pub fn offset(&self) -> Tensor<T> {
        let scale = self.strength / self.direction.norm();
        self.direction.map(|v| v * scale)
    }

    pub(crate) fn is_active(&self) -> bool {
        self.strength > T::zero()
    }
}
