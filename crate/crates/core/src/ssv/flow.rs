//! Per-enclave flow table and the packet introspection used to classify frames.
//!
//! A flow tag is the 4-byte IPv4 option carried by every packet of an
//! enclave stack: `0x88, 4, epid[14], epid[15]`. The legacy pattern of four
//! zero bytes is accepted as a tag too.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channel::Epid;

pub type FlowTag = [u8; 4];

pub const LEGACY_TAG: FlowTag = [0, 0, 0, 0];
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
const ETH_HDR: usize = 14;

/// The tag an enclave with this identity must use.
pub fn tag_for(epid: &Epid) -> FlowTag {
    [0x88, 4, epid[14], epid[15]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub session: u32,
    pub tag: FlowTag,
    pub ip: [u8; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowTable {
    entries: BTreeMap<Epid, FlowEntry>,
}

impl FlowTable {
    pub fn insert(&mut self, epid: Epid, entry: FlowEntry) -> Result<(), FlowEntry> {
        if let Some(clash) = self.entries.iter().find(|(e, f)| **e != epid && (f.tag == entry.tag || f.ip == entry.ip)) {
            return Err(*clash.1);
        }
        self.entries.insert(epid, entry);
        Ok(())
    }

    pub fn remove(&mut self, epid: &Epid) -> Option<FlowEntry> {
        self.entries.remove(epid)
    }

    pub fn get(&self, epid: &Epid) -> Option<&FlowEntry> {
        self.entries.get(epid)
    }

    pub fn by_tag(&self, tag: &FlowTag) -> Option<&FlowEntry> {
        self.entries.values().find(|f| f.tag == *tag)
    }

    pub fn by_ip(&self, ip: &[u8; 4]) -> Option<&FlowEntry> {
        self.entries.values().find(|f| f.ip == *ip)
    }

    pub fn contains(&self, epid: &Epid) -> bool {
        self.entries.contains_key(epid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Epid, &FlowEntry)> {
        self.entries.iter()
    }
}

pub fn ethertype(frame: &[u8]) -> Option<u16> {
    (frame.len() >= ETH_HDR).then(|| u16::from_be_bytes([frame[12], frame[13]]))
}

/// The 4-byte option of an IPv4 header carrying exactly one option word.
pub fn ipv4_tag(frame: &[u8]) -> Option<FlowTag> {
    if ethertype(frame)? != ETHERTYPE_IPV4 || frame.len() < ETH_HDR + 24 {
        return None;
    }
    let vihl = frame[ETH_HDR];
    if vihl != 0x46 {
        return None;
    }
    frame[ETH_HDR + 20..ETH_HDR + 24].try_into().ok()
}

pub fn ipv4_dst(frame: &[u8]) -> Option<[u8; 4]> {
    if ethertype(frame)? != ETHERTYPE_IPV4 || frame.len() < ETH_HDR + 20 {
        return None;
    }
    frame[ETH_HDR + 16..ETH_HDR + 20].try_into().ok()
}

/// Target protocol address of an ARP packet.
pub fn arp_target(frame: &[u8]) -> Option<[u8; 4]> {
    if ethertype(frame)? != ETHERTYPE_ARP || frame.len() < ETH_HDR + 28 {
        return None;
    }
    frame[ETH_HDR + 24..ETH_HDR + 28].try_into().ok()
}

/// Replace the tag of a tagged IPv4 frame and fix the header checksum.
pub fn rewrite_tag(frame: &mut [u8], tag: FlowTag) -> bool {
    if ipv4_tag(frame).is_none() {
        return false;
    }
    frame[ETH_HDR + 20..ETH_HDR + 24].copy_from_slice(&tag);
    frame[ETH_HDR + 10] = 0;
    frame[ETH_HDR + 11] = 0;
    let sum = internet_checksum(&frame[ETH_HDR..ETH_HDR + 24]);
    frame[ETH_HDR + 10..ETH_HDR + 12].copy_from_slice(&sum.to_be_bytes());
    true
}

/// RFC 1071 ones'-complement checksum.
pub fn internet_checksum(data: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    for chunk in data.chunks(2) {
        let word = if chunk.len() == 2 { u16::from_be_bytes([chunk[0], chunk[1]]) } else { u16::from(chunk[0]) << 8 };
        sum += u32::from(word);
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(tag: FlowTag) -> Vec<u8> {
        let mut f = vec![0u8; 14 + 24 + 8];
        f[12..14].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        f[14] = 0x46;
        f[14 + 16..14 + 20].copy_from_slice(&[10, 0, 0, 2]);
        f[14 + 20..14 + 24].copy_from_slice(&tag);
        f
    }

    #[test]
    fn checksum_known_header() {
        // Classic worked example header; its checksum field is 0xb861.
        let hdr = [
            0x45, 0x00, 0x00, 0x73, 0x00, 0x00, 0x40, 0x00, 0x40, 0x11, 0x00, 0x00, 0xc0, 0xa8, 0x00, 0x01, 0xc0, 0xa8,
            0x00, 0xc7,
        ];
        assert_eq!(internet_checksum(&hdr), 0xb861);
    }

    #[test]
    fn tag_extraction_and_rewrite() {
        let mut f = tagged([0x88, 4, 0, 7]);
        assert_eq!(ipv4_tag(&f), Some([0x88, 4, 0, 7]));
        assert_eq!(ipv4_dst(&f), Some([10, 0, 0, 2]));
        assert!(rewrite_tag(&mut f, [0x88, 4, 0, 9]));
        assert_eq!(ipv4_tag(&f), Some([0x88, 4, 0, 9]));
        assert_eq!(internet_checksum(&f[14..38]), 0);
    }

    #[test]
    fn untagged_has_no_tag() {
        let mut f = tagged([0; 4]);
        f[14] = 0x45;
        assert_eq!(ipv4_tag(&f), None);
    }

    #[test]
    fn table_rejects_collisions() {
        let mut t = FlowTable::default();
        let a = FlowEntry { session: 1, tag: [0x88, 4, 0, 1], ip: [10, 0, 0, 1] };
        t.insert([1; 16], a).unwrap();
        let clash = FlowEntry { session: 2, tag: [0x88, 4, 0, 1], ip: [10, 0, 0, 2] };
        assert_eq!(t.insert([2; 16], clash), Err(a));
        assert_eq!(t.by_tag(&[0x88, 4, 0, 1]).unwrap().session, 1);
    }
}
