//! Two-party evaluation of polynomials over Paillier ciphertexts with fixed-point
//! encoding and slot packing, and privacy-preserving training of social
//! recommendation models on top of it.

pub mod encoding;
pub mod error;
pub mod packing;
pub mod paillier;
pub mod circuit;
pub mod protocol;
pub mod transport;
pub mod data;
pub mod soreg;
pub mod bench;
