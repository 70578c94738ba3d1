//! Tensor container, reverse-mode autodiff, dense layers, Adam and the
//! learning-rate schedule everything else trains on.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use optim::{Adam, AdamConfig, AdamState, LrSchedule};
pub use params::{Ctx, Dense, NormDense, ParamGrads, ParamId, ParamStore, Trainable};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Softmax { axis: usize },
}

pub fn activation<T: Real>(tape: &mut Tape<T>, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => Ok(tape.relu(x)),
        Activation::LeakyRelu(alpha) => Ok(tape.leaky_relu(x, T::lit(alpha))),
        Activation::Softmax { axis } => tape.softmax(x, axis),
    }
}

#[cfg(test)]
mod tests;
