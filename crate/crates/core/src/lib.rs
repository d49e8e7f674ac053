//! Deterministic model of a secure channel between an SMM-resident supervisor
//! and isolated enclaves, delivering trusted time and end-to-end networking
//! across a hostile operating system.
//!
//! The crate is layered bottom-up:
//!
//! * [`platform`]: isolation domains, the protected/SMM mode machine, interrupt
//!   redirection, virtual time and the cost table.
//! * [`devices`]: five clock sources and an OWN-bit descriptor-ring NIC on a
//!   virtual fabric.
//! * [`channel`]: fixed-size authenticated frames, shared-memory FIFOs, the
//!   simulated certificate authority and the enclave side of a session.
//! * [`ssv`]: the SMM supervisor (driver registry, secure heap, flow table,
//!   SMI dispatch).
//! * [`machine`]: glue owning the platform, supervisor, CA and adversary.
//! * [`time_tss`] and [`net`]: the enclave-side trusted time library and the
//!   per-thread network stack.
//! * [`adversary`]: scripted man-in-the-kernel attacks.
//! * [`harness`]: scenarios, benchmarks and reports.

pub mod adversary;
pub mod channel;
pub mod devices;
pub mod harness;
pub mod machine;
pub mod net;
pub mod platform;
pub mod ssv;
pub mod time_tss;

pub use machine::{Machine, MachineConfig};
pub use platform::{Actor, DomainKind, EnclaveId, Platform};
