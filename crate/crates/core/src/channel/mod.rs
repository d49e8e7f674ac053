//! The secure session between an enclave and the supervisor.

pub mod ca;
pub mod fifo;
pub mod frame;
pub mod session;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::Fault;

pub use ca::{measure, CertificateAuthority, EnclaveCredential, Epid, SsvToken};
pub use fifo::{FifoHandle, FifoPair, SharedAllocator};
pub use frame::{Direction, Operation, PlainFrame, SealedFrame, SessionKey, Status};
pub use session::{Reply, RequestMode, Response, Session, SessionState};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelError {
    #[error("frame failed authentication")]
    AuthFail,
    #[error("sequence mismatch: expected {expected}, got {got}")]
    ReplayOrReorder { expected: u64, got: u64 },
    #[error("session closed")]
    Closed,
    #[error("FIFO full")]
    FifoFull,
    #[error("enclave identity rejected")]
    AuthFailEnclave,
    #[error("supervisor identity rejected")]
    AuthFailSsv,
    #[error("no shared memory for the session")]
    SharedMemUnavailable,
    #[error("no response within the time budget")]
    Timeout,
    #[error("payload of {0} bytes exceeds the frame")]
    PayloadTooLarge(usize),
    #[error("malformed frame")]
    Malformed,
    #[error("platform fault: {0}")]
    Fault(Fault),
}

impl From<Fault> for ChannelError {
    fn from(f: Fault) -> Self {
        ChannelError::Fault(f)
    }
}

impl ChannelError {
    /// Stable name used in reports and attack outcomes.
    pub fn kind(&self) -> &'static str {
        match self {
            ChannelError::AuthFail => "AuthFail",
            ChannelError::ReplayOrReorder { .. } => "ReplayOrReorder",
            ChannelError::Closed => "Closed",
            ChannelError::FifoFull => "FifoFull",
            ChannelError::AuthFailEnclave => "AuthFailEnclave",
            ChannelError::AuthFailSsv => "AuthFailSsv",
            ChannelError::SharedMemUnavailable => "SharedMemUnavailable",
            ChannelError::Timeout => "Timeout",
            ChannelError::PayloadTooLarge(_) => "PayloadTooLarge",
            ChannelError::Malformed => "Malformed",
            ChannelError::Fault(_) => "Fault",
        }
    }
}
