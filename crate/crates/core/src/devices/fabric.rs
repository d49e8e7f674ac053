//! Virtual network fabric joining the simulated adapters.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedFrame {
    pub vt_ns: u64,
    pub port: usize,
    pub bytes: Vec<u8>,
}

/// A hub: every frame reaches every other port, and the sender's own port
/// too when hairpin is on (machine-local traffic between enclave stacks).
#[derive(Clone, Debug, Default)]
pub struct Fabric {
    pub hairpin: bool,
    pub capture_enabled: bool,
    capture: Vec<CapturedFrame>,
}

impl Fabric {
    pub fn new(hairpin: bool) -> Self {
        Fabric { hairpin, capture_enabled: false, capture: Vec::new() }
    }

    /// Ports that should receive a frame sent on `from`.
    pub fn destinations(&self, from: usize, ports: usize) -> Vec<usize> {
        (0..ports).filter(|&p| p != from || self.hairpin).collect()
    }

    pub fn record(&mut self, vt_ns: u64, port: usize, bytes: &[u8]) {
        if self.capture_enabled {
            self.capture.push(CapturedFrame { vt_ns, port, bytes: bytes.to_vec() });
        }
    }

    pub fn captured(&self) -> &[CapturedFrame] {
        &self.capture
    }

    /// Write the capture in classic libpcap format (Ethernet link type).
    pub fn write_pcap<W: Write>(&self, mut w: W) -> io::Result<()> {
        write_pcap(&mut w, &self.capture)
    }
}

pub fn write_pcap<W: Write>(w: &mut W, frames: &[CapturedFrame]) -> io::Result<()> {
    w.write_all(&0xa1b2_c3d4u32.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&4u16.to_le_bytes())?;
    w.write_all(&0i32.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&65_535u32.to_le_bytes())?;
    w.write_all(&1u32.to_le_bytes())?;
    for f in frames {
        let secs = (f.vt_ns / 1_000_000_000) as u32;
        let usecs = ((f.vt_ns % 1_000_000_000) / 1_000) as u32;
        w.write_all(&secs.to_le_bytes())?;
        w.write_all(&usecs.to_le_bytes())?;
        w.write_all(&(f.bytes.len() as u32).to_le_bytes())?;
        w.write_all(&(f.bytes.len() as u32).to_le_bytes())?;
        w.write_all(&f.bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hub_destinations() {
        assert_eq!(Fabric::new(false).destinations(0, 3), vec![1, 2]);
        assert_eq!(Fabric::new(true).destinations(1, 2), vec![0, 1]);
    }

    #[test]
    fn pcap_layout() {
        let frames = vec![CapturedFrame { vt_ns: 1_500_000_000, port: 0, bytes: vec![0xaa; 60] }];
        let mut out = Vec::new();
        write_pcap(&mut out, &frames).unwrap();
        assert_eq!(out.len(), 24 + 16 + 60);
        assert_eq!(&out[..4], &[0xd4, 0xc3, 0xb2, 0xa1]);
        assert_eq!(u32::from_le_bytes(out[24..28].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(out[28..32].try_into().unwrap()), 500_000);
    }
}
