//! The per-thread in-enclave network stack.

pub mod network;
pub mod pool;
pub mod stack;
pub mod tcp;
pub mod wire;

pub use network::{EchoProbe, Network};
pub use stack::{NetError, Protocol, RxMode, SocketHandle, SocketId, StackConfig, StackInstance};
pub use tcp::TcpState;
