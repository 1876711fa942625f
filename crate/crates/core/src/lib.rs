//! Simulator and calculators for step-ahead partial error feedback in
//! compressed federated learning.

pub mod compressors;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod protocol;
pub mod theory;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/compressors.md")]
    mod compressors {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
