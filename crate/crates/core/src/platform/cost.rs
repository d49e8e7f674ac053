//! Virtual-time cost table.
//!
//! Defaults follow the relative proportions of a measured time-service
//! breakdown; absolute values are modeled, not measured.

use serde::{Deserialize, Serialize};

/// Per-action virtual-time charges in nanoseconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostTable {
    pub epc_encrypt: u64,
    pub enclave_copy_to_shared: u64,
    pub smm_switch: u64,
    pub copy_to_smram: u64,
    pub smram_decrypt: u64,
    pub clock_driver_base: u64,
    pub rtc_read: u64,
    pub timer_read: u64,
    pub smram_encrypt: u64,
    pub ssv_copy_to_shared: u64,
    pub return_to_enclave: u64,
    pub copy_to_epc: u64,
    pub epc_decrypt: u64,
    /// Suspending the adapter and saving/restoring its control registers.
    pub nic_context_save_restore: u64,
    pub nic_transmit: u64,
    pub nic_rx_scan: u64,
    pub nic_per_byte: u64,
    pub stack_per_frame: u64,
    pub stack_per_byte: u64,
    /// Granularity of an enclave waiting on its inbound FIFO.
    pub poll_interval: u64,
    /// Extra SMM residency per dispatch, used to emulate preemption lengths.
    pub smm_extra_stall: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            epc_encrypt: 2_000,
            enclave_copy_to_shared: 2_000,
            smm_switch: 13_000,
            copy_to_smram: 300,
            smram_decrypt: 3_000,
            clock_driver_base: 20_000,
            rtc_read: 14_000,
            timer_read: 2_500,
            smram_encrypt: 3_000,
            ssv_copy_to_shared: 300,
            return_to_enclave: 12_000,
            copy_to_epc: 3_000,
            epc_decrypt: 2_000,
            nic_context_save_restore: 400_000,
            nic_transmit: 100_000,
            nic_rx_scan: 200_000,
            nic_per_byte: 8,
            stack_per_frame: 2_000,
            stack_per_byte: 1,
            poll_interval: 1_000,
            smm_extra_stall: 0,
        }
    }
}

impl CostTable {
    /// Modeled cost of one honest clock service call (no RTC collision).
    pub fn clock_service(&self) -> u64 {
        self.clock_driver_base + self.rtc_read + 4 * self.timer_read
    }

    /// Modeled end-to-end cost of one immediate time request.
    pub fn time_request(&self) -> u64 {
        self.epc_encrypt
            + self.enclave_copy_to_shared
            + self.smm_switch
            + self.copy_to_smram
            + self.smram_decrypt
            + self.clock_service()
            + self.smram_encrypt
            + self.ssv_copy_to_shared
            + self.return_to_enclave
            + self.copy_to_epc
            + self.epc_decrypt
            + self.smm_extra_stall
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_clock_service_dominates() {
        let c = CostTable::default();
        assert_eq!(c.clock_service(), 44_000);
        assert!(c.clock_service() > 3 * c.smm_switch);
        assert_eq!(c.time_request(), 84_600);
    }
}
