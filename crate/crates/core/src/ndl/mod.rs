//! Differentiable-computation core: tensor values, a define-by-run tape
//! with reverse-mode gradients, optimizers, and finite-difference checking.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::gradient_check;
pub use optim::{Adam, Sgd};
pub use tape::{dropout_mask, Gradients, NodeId, Tape};
pub use tensor::{Sparse, Tensor};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Affine layer parameters for y = x·w + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        Linear {
            w: Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: Tensor::zeros(fan_in, fan_out),
            b: Tensor::zeros(1, fan_out),
        }
    }
}
