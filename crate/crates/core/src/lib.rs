//! GibbsNet: adversarial training of a blocked-Gibbs transition operator.
//!
//! An encoder `q(z|x)` and a decoder `p(x|z)` define a Markov chain over
//! joint states `(x, z)`. A joint discriminator is trained to separate the
//! last step of a free-running chain started from `z ~ N(0, I)` from pairs
//! `(x_data, z ~ q(z|x_data))`; the encoder and decoder are trained to fool
//! it, with gradients flowing through the final chain step only.
//!
//! With a one-step chain the procedure is exactly adversarially learned
//! inference (ALI).

pub mod chains;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
