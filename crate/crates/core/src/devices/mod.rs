//! Simulated hardware reachable through recorded MMIO/port addresses.

pub mod clock;
pub mod fabric;
pub mod nic;

pub use clock::{ClockBank, ClockConfig, ClockSource, ClockTamper, RawReading, RtcTime};
pub use fabric::{CapturedFrame, Fabric};
pub use nic::{DescriptorRing, Nic, NicConfig, NicError, NicRegs, Own, MAX_FRAME};

/// Port the software SMI is raised through.
pub const SMI_COMMAND_PORT: u16 = 0xb2;
/// Legacy CMOS/RTC index port.
pub const RTC_PORT: u16 = 0x70;
pub const PIT_PORT: u16 = 0x40;
pub const HPET_MMIO_BASE: u64 = 0xfed0_0000;
pub const APIC_MMIO_BASE: u64 = 0xfee0_0000;

/// Device identifiers used on the wire and in the driver registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum DeviceId {
    Clock,
    Nic,
}

impl DeviceId {
    pub fn code(self) -> u8 {
        match self {
            DeviceId::Clock => 1,
            DeviceId::Nic => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(DeviceId::Clock),
            2 => Some(DeviceId::Nic),
            _ => None,
        }
    }
}
