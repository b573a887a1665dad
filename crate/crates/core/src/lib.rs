//! Layer-contrastive decoding and gradient-mined activation steering on a
//! miniature T5-style encoder–decoder, with a synthetic memorization-trap task.

pub mod decoding;
pub mod evalharness;
pub mod model;
pub mod numerics;
pub mod steering;
pub mod tasks;

/// Double-precision aliases used by the command-line tool and the experiments.
pub type Tensor = numerics::Tensor<f64>;
pub type Tape<'a> = numerics::Tape<'a, f64>;
pub type Model = model::Model<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type LayerTrace = model::LayerTrace<f64>;
pub type InjectionSpec = model::InjectionSpec<f64>;
pub type EncoderStates = model::EncoderStates<f64>;
pub type DecodeResult = decoding::DecodeResult<f64>;
pub type SteeringVector = steering::SteeringVector<f64>;
pub type Condition = evalharness::Condition<f64>;
