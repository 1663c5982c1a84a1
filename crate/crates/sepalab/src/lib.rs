//! sepalab: a verification laboratory for finite-precision sequence
//! models. Everything here computes on an explicit saturating fixed-point
//! grid so that claims about constructions, communication protocols and
//! width bounds can be checked bit for bit against brute-force oracles.

pub mod constructions;
pub mod fixed;
pub mod cli;
pub mod jl;
pub mod protocols;
pub mod rnn;
pub mod tasks;
pub mod transformer;
