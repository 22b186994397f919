//! Continual sequential recommendation over a stream of interaction blocks.
//!
//! A Transformer encoder whose attention is kernelized linear attention with
//! per-user memories that persist across blocks. Memories can be
//! normalized by a Cauchy-Schwarz bound on the attention denominator,
//! enriched from shared interest pools, and bootstrapped for new users from
//! similar existing users.

pub mod backbone;
mod binio;
pub mod cie;
pub mod csa;
pub mod datastream;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod pka;
pub mod trainer;

pub use error::{Error, Result};
