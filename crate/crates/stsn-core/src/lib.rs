//! Spatio-temporal grid prediction with transformer-based global relation
//! modelling and learned region sampling.
//!
//! The crate is organised around a small dense-tensor engine with
//! reverse-mode automatic differentiation ([`tape`]), on top of which the
//! model is assembled: grid feature construction ([`features`]), the local /
//! semantic / temporal encoders ([`encoders`]), a hierarchical position
//! embedding ([`scpe`]), Gumbel-Softmax region sampling ([`sampler`]), the
//! full network ([`model`]) and its training loop ([`training`]). Evaluation
//! utilities (metrics, a historical-average baseline, an analytic
//! multiply-accumulate cost model and synthetic data generators) live in
//! [`eval`], [`flops`], [`synthcity`] and [`synthtrips`].
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the command
//! line frontend live in the companion `stsn-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod civil;
pub mod dataset;
pub mod encoders;
pub mod eval;
pub mod features;
pub mod flops;
pub(crate) mod fmath;
pub mod gradcheck;
pub mod grid;
pub mod model;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod scpe;
pub mod synthcity;
pub mod synthtrips;
pub mod tape;
pub mod tensor;
pub mod training;

pub use grid::GridSpec;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
