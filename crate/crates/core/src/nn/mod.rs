//! Minimal dense autodiff used by the attack models.

mod graph;
pub mod layers;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{dot, order_free_sum, softmax, Tensor};

use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Dropout only fires when `training` is set and a rate
/// above zero is configured.
pub struct Mode {
    pub training: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
}

impl Mode {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self { training: false, dropout: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Self { training: true, dropout, rng }
    }

    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        if self.training {
            g.dropout(x, self.dropout, &mut self.rng)
        } else {
            x
        }
    }
}
