//! Reverse-mode differentiation, dense and masked networks, optimizers.

mod dense;
mod init;
mod made;
mod optim;
mod params;
mod tape;

pub use dense::{Activation, CriticNodes, DenseNetwork, SpectralState};
pub use init::glorot_uniform;
pub use made::MadeNetwork;
pub use optim::{AdamW, AdamWConfig, Optimizer, RmsProp, RmsPropConfig};
pub use params::{NamedTensor, Parameterized};
pub use tape::{Gradients, Tape, Tensor, Unary, Var, NORM_FLOOR};
