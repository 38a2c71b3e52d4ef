//! Adversarial machine-learning toolkit at desk scale: a minimal
//! exact-gradient dense-network engine, evasion and poisoning attacks,
//! defenses and certification procedures, and a deterministic batch
//! experiment harness.
//!
//! Everything computes in 64-bit reals on the unit box [0,1]^d. All
//! randomized procedures take explicit seeds and are bit-reproducible.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod io;
pub mod net;
pub mod poison;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{GradientModel, LossKind, Network};
pub use tensor::Tensor;

/// Derives a named substream seed from a master seed so experiment stages
/// (data / train / attack / noise) can be re-run independently.
pub fn substream(master: u64, name: &str) -> u64 {
    // FNV-1a over the master seed bytes then the name bytes.
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in master.to_le_bytes().iter().chain(name.as_bytes()) {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
