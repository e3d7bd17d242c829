//! Secure aggregation by additive masking.
//!
//! Every client splits its encoded local statistics into a masked share and
//! one mask per peer. Masks are encrypted to their destination, so the
//! coordinator only ever learns the sum over all clients.

mod additive;
pub mod fixed;
pub mod keys;
pub mod mask;
pub mod payload;

use thiserror::Error;

use crate::app::AppError;

pub use additive::{decode_stats, encode_stats, AdditiveModel, AuditEntry, PlainAdditive, SecureApp, AUDIT_FILE};
pub use fixed::{decode_fixed, encode_fixed, FixedPointVector, DEFAULT_SCALE};
pub use keys::{keygen, KeyDirectory, KeyPair};
pub use mask::{aggregate, mask_model, sum_received_masks, EncryptedMask, MaskedShare};
pub use payload::{SmpcBody, SmpcMessage};

#[derive(Debug, Error)]
pub enum SmpcError {
    #[error("entry {index} = {value} is outside the fixed-point range (|x| < {limit})")]
    Overflow { index: usize, value: f64, limit: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("decryption failed: {0}")]
    Decryption(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

impl From<SmpcError> for AppError {
    fn from(e: SmpcError) -> Self {
        AppError::Failure(format!("smpc: {e}"))
    }
}
