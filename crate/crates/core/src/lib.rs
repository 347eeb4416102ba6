pub mod anomaly_sim;
pub mod autograd;
pub mod config;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod layers;
pub mod memory;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
