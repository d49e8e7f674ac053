//! Ethernet, ARP, IPv4 (with the flow-tag option), ICMP, UDP and TCP codecs.

use std::net::Ipv4Addr;

pub use crate::ssv::flow::{internet_checksum, FlowTag, ETHERTYPE_ARP, ETHERTYPE_IPV4};

pub type Mac = [u8; 6];

pub const BROADCAST: Mac = [0xff; 6];
pub const ETH_HDR: usize = 14;
/// IPv4 header with exactly one 4-byte option word.
pub const IPV4_HDR: usize = 24;
pub const UDP_HDR: usize = 8;
pub const TCP_HDR: usize = 20;
pub const ICMP_HDR: usize = 8;
pub const MTU: usize = 1500;
/// Largest fragment payload: MTU minus header, rounded down to 8 bytes.
pub const FRAG_PAYLOAD: usize = (MTU - IPV4_HDR) / 8 * 8;
pub const TCP_MSS: usize = MTU - IPV4_HDR - TCP_HDR;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EthHeader {
    pub dst: Mac,
    pub src: Mac,
    pub ethertype: u16,
}

pub fn eth_build(h: &EthHeader, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(ETH_HDR + payload.len());
    f.extend_from_slice(&h.dst);
    f.extend_from_slice(&h.src);
    f.extend_from_slice(&h.ethertype.to_be_bytes());
    f.extend_from_slice(payload);
    f
}

pub fn eth_parse(f: &[u8]) -> Option<(EthHeader, &[u8])> {
    if f.len() < ETH_HDR {
        return None;
    }
    let h = EthHeader {
        dst: f[0..6].try_into().ok()?,
        src: f[6..12].try_into().ok()?,
        ethertype: u16::from_be_bytes([f[12], f[13]]),
    };
    Some((h, &f[ETH_HDR..]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arp {
    /// 1 request, 2 reply.
    pub op: u16,
    pub sha: Mac,
    pub spa: Ipv4Addr,
    pub tha: Mac,
    pub tpa: Ipv4Addr,
}

pub const ARP_REQUEST: u16 = 1;
pub const ARP_REPLY: u16 = 2;

impl Arp {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(28);
        b.extend_from_slice(&1u16.to_be_bytes());
        b.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        b.push(6);
        b.push(4);
        b.extend_from_slice(&self.op.to_be_bytes());
        b.extend_from_slice(&self.sha);
        b.extend_from_slice(&self.spa.octets());
        b.extend_from_slice(&self.tha);
        b.extend_from_slice(&self.tpa.octets());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Arp> {
        if b.len() < 28 || b[0..2] != [0, 1] || b[2..4] != ETHERTYPE_IPV4.to_be_bytes() || b[4] != 6 || b[5] != 4 {
            return None;
        }
        let ip = |s: &[u8]| Ipv4Addr::new(s[0], s[1], s[2], s[3]);
        Some(Arp {
            op: u16::from_be_bytes([b[6], b[7]]),
            sha: b[8..14].try_into().ok()?,
            spa: ip(&b[14..18]),
            tha: b[18..24].try_into().ok()?,
            tpa: ip(&b[24..28]),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ipv4Header {
    pub id: u16,
    pub dont_fragment: bool,
    pub more_fragments: bool,
    /// Offset in 8-byte units.
    pub frag_offset: u16,
    pub ttl: u8,
    pub proto: u8,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    /// The single option word; `None` for a bare 20-byte header.
    pub option: Option<FlowTag>,
}

impl Ipv4Header {
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, tag: FlowTag) -> Self {
        Ipv4Header {
            id: 0,
            dont_fragment: false,
            more_fragments: false,
            frag_offset: 0,
            ttl: 64,
            proto,
            src,
            dst,
            option: Some(tag),
        }
    }

    pub fn header_len(&self) -> usize {
        if self.option.is_some() {
            IPV4_HDR
        } else {
            20
        }
    }

    pub fn encode(&self, payload: &[u8]) -> Vec<u8> {
        let hl = self.header_len();
        let mut b = vec![0u8; hl];
        b[0] = 0x40 | (hl / 4) as u8;
        b[2..4].copy_from_slice(&((hl + payload.len()) as u16).to_be_bytes());
        b[4..6].copy_from_slice(&self.id.to_be_bytes());
        let mut frag = self.frag_offset & 0x1fff;
        if self.dont_fragment {
            frag |= 0x4000;
        }
        if self.more_fragments {
            frag |= 0x2000;
        }
        b[6..8].copy_from_slice(&frag.to_be_bytes());
        b[8] = self.ttl;
        b[9] = self.proto;
        b[12..16].copy_from_slice(&self.src.octets());
        b[16..20].copy_from_slice(&self.dst.octets());
        if let Some(tag) = self.option {
            b[20..24].copy_from_slice(&tag);
        }
        let sum = internet_checksum(&b);
        b[10..12].copy_from_slice(&sum.to_be_bytes());
        b.extend_from_slice(payload);
        b
    }

    /// Parse and verify the header checksum. Returns the header and payload.
    pub fn decode(b: &[u8]) -> Option<(Ipv4Header, &[u8])> {
        if b.len() < 20 || b[0] >> 4 != 4 {
            return None;
        }
        let hl = usize::from(b[0] & 0x0f) * 4;
        let total = usize::from(u16::from_be_bytes([b[2], b[3]]));
        if hl < 20 || total < hl || b.len() < total || internet_checksum(&b[..hl]) != 0 {
            return None;
        }
        let frag = u16::from_be_bytes([b[6], b[7]]);
        let ip = |s: &[u8]| Ipv4Addr::new(s[0], s[1], s[2], s[3]);
        let h = Ipv4Header {
            id: u16::from_be_bytes([b[4], b[5]]),
            dont_fragment: frag & 0x4000 != 0,
            more_fragments: frag & 0x2000 != 0,
            frag_offset: frag & 0x1fff,
            ttl: b[8],
            proto: b[9],
            src: ip(&b[12..16]),
            dst: ip(&b[16..20]),
            option: (hl == IPV4_HDR).then(|| b[20..24].try_into().unwrap()),
        };
        Some((h, &b[hl..total]))
    }
}

fn pseudo_sum(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, segment: &[u8]) -> u16 {
    let mut buf = Vec::with_capacity(12 + segment.len());
    buf.extend_from_slice(&src.octets());
    buf.extend_from_slice(&dst.octets());
    buf.push(0);
    buf.push(proto);
    buf.extend_from_slice(&(segment.len() as u16).to_be_bytes());
    buf.extend_from_slice(segment);
    internet_checksum(&buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Icmp {
    /// 8 echo request, 0 echo reply.
    pub kind: u8,
    pub id: u16,
    pub seq: u16,
}

pub const ICMP_ECHO_REQUEST: u8 = 8;
pub const ICMP_ECHO_REPLY: u8 = 0;

impl Icmp {
    pub fn encode(&self, data: &[u8]) -> Vec<u8> {
        let mut b = vec![self.kind, 0, 0, 0];
        b.extend_from_slice(&self.id.to_be_bytes());
        b.extend_from_slice(&self.seq.to_be_bytes());
        b.extend_from_slice(data);
        let sum = internet_checksum(&b);
        b[2..4].copy_from_slice(&sum.to_be_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<(Icmp, &[u8])> {
        if b.len() < ICMP_HDR || internet_checksum(b) != 0 || b[1] != 0 {
            return None;
        }
        let h = Icmp { kind: b[0], id: u16::from_be_bytes([b[4], b[5]]), seq: u16::from_be_bytes([b[6], b[7]]) };
        Some((h, &b[ICMP_HDR..]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Udp {
    pub src_port: u16,
    pub dst_port: u16,
}

impl Udp {
    pub fn encode(&self, src: Ipv4Addr, dst: Ipv4Addr, data: &[u8]) -> Vec<u8> {
        let mut b = Vec::with_capacity(UDP_HDR + data.len());
        b.extend_from_slice(&self.src_port.to_be_bytes());
        b.extend_from_slice(&self.dst_port.to_be_bytes());
        b.extend_from_slice(&((UDP_HDR + data.len()) as u16).to_be_bytes());
        b.extend_from_slice(&[0, 0]);
        b.extend_from_slice(data);
        let mut sum = pseudo_sum(src, dst, PROTO_UDP, &b);
        if sum == 0 {
            sum = 0xffff;
        }
        b[6..8].copy_from_slice(&sum.to_be_bytes());
        b
    }

    pub fn decode(src: Ipv4Addr, dst: Ipv4Addr, b: &[u8]) -> Option<(Udp, &[u8])> {
        if b.len() < UDP_HDR {
            return None;
        }
        let len = usize::from(u16::from_be_bytes([b[4], b[5]]));
        if len < UDP_HDR || len > b.len() {
            return None;
        }
        let b = &b[..len];
        if b[6..8] != [0, 0] && pseudo_sum(src, dst, PROTO_UDP, b) != 0 {
            return None;
        }
        Some((Udp { src_port: u16::from_be_bytes([b[0], b[1]]), dst_port: u16::from_be_bytes([b[2], b[3]]) }, &b[UDP_HDR..]))
    }
}

pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
}

impl TcpHeader {
    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }

    pub fn encode(&self, src: Ipv4Addr, dst: Ipv4Addr, data: &[u8]) -> Vec<u8> {
        let mut b = Vec::with_capacity(TCP_HDR + data.len());
        b.extend_from_slice(&self.src_port.to_be_bytes());
        b.extend_from_slice(&self.dst_port.to_be_bytes());
        b.extend_from_slice(&self.seq.to_be_bytes());
        b.extend_from_slice(&self.ack.to_be_bytes());
        b.push(((TCP_HDR / 4) as u8) << 4);
        b.push(self.flags);
        b.extend_from_slice(&self.window.to_be_bytes());
        b.extend_from_slice(&[0, 0, 0, 0]);
        b.extend_from_slice(data);
        let sum = pseudo_sum(src, dst, PROTO_TCP, &b);
        b[16..18].copy_from_slice(&sum.to_be_bytes());
        b
    }

    pub fn decode(src: Ipv4Addr, dst: Ipv4Addr, b: &[u8]) -> Option<(TcpHeader, &[u8])> {
        if b.len() < TCP_HDR || pseudo_sum(src, dst, PROTO_TCP, b) != 0 {
            return None;
        }
        let off = usize::from(b[12] >> 4) * 4;
        if off < TCP_HDR || off > b.len() {
            return None;
        }
        let h = TcpHeader {
            src_port: u16::from_be_bytes([b[0], b[1]]),
            dst_port: u16::from_be_bytes([b[2], b[3]]),
            seq: u32::from_be_bytes(b[4..8].try_into().unwrap()),
            ack: u32::from_be_bytes(b[8..12].try_into().unwrap()),
            flags: b[13],
            window: u16::from_be_bytes([b[14], b[15]]),
        };
        Some((h, &b[off..]))
    }
}

/// A tagged IPv4/UDP Ethernet frame, used by tests and scripted attacks.
pub fn udp_frame(src_mac: Mac, dst_mac: Mac, src: Ipv4Addr, dst: Ipv4Addr, tag: FlowTag, ports: (u16, u16), data: &[u8]) -> Vec<u8> {
    let udp = Udp { src_port: ports.0, dst_port: ports.1 }.encode(src, dst, data);
    let ip = Ipv4Header::new(src, dst, PROTO_UDP, tag).encode(&udp);
    eth_build(&EthHeader { dst: dst_mac, src: src_mac, ethertype: ETHERTYPE_IPV4 }, &ip)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const B: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

    #[test]
    fn constants() {
        assert_eq!(FRAG_PAYLOAD, 1472);
        assert_eq!(TCP_MSS, 1456);
    }

    #[test]
    fn ipv4_round_trip_with_tag() {
        let h = Ipv4Header { id: 77, more_fragments: true, frag_offset: 184, ..Ipv4Header::new(A, B, PROTO_UDP, [0x88, 4, 0, 1]) };
        let b = h.encode(b"hello");
        assert_eq!(b.len(), 29);
        let (back, payload) = Ipv4Header::decode(&b).unwrap();
        assert_eq!(back, h);
        assert_eq!(payload, b"hello");
    }

    #[test]
    fn ipv4_bad_checksum_rejected() {
        let mut b = Ipv4Header::new(A, B, PROTO_UDP, [0; 4]).encode(b"x");
        b[8] ^= 1;
        assert!(Ipv4Header::decode(&b).is_none());
    }

    #[test]
    fn udp_checksum_detects_corruption() {
        let mut b = Udp { src_port: 1000, dst_port: 7 }.encode(A, B, b"payload");
        assert_eq!(Udp::decode(A, B, &b).unwrap().1, b"payload");
        b[9] ^= 0x40;
        assert!(Udp::decode(A, B, &b).is_none());
    }

    #[test]
    fn tcp_round_trip() {
        let h = TcpHeader { src_port: 5, dst_port: 6, seq: 1, ack: 2, flags: tcp_flags::SYN | tcp_flags::ACK, window: 100 };
        let b = h.encode(A, B, b"data");
        let (back, d) = TcpHeader::decode(A, B, &b).unwrap();
        assert_eq!(back, h);
        assert_eq!(d, b"data");
    }

    #[test]
    fn icmp_echo_checksum() {
        let b = Icmp { kind: ICMP_ECHO_REQUEST, id: 1, seq: 2 }.encode(&[0xab; 56]);
        assert_eq!(internet_checksum(&b), 0);
        assert_eq!(Icmp::decode(&b).unwrap().1.len(), 56);
    }

    #[test]
    fn arp_round_trip() {
        let a = Arp { op: ARP_REQUEST, sha: [2, 0, 0, 0, 0, 1], spa: A, tha: [0; 6], tpa: B };
        assert_eq!(Arp::decode(&a.encode()), Some(a));
    }

    #[test]
    fn tagged_frame_is_classifiable() {
        let f = udp_frame([2; 6], [3; 6], A, B, [0x88, 4, 0, 9], (1, 2), b"z");
        assert_eq!(crate::ssv::flow::ipv4_tag(&f), Some([0x88, 4, 0, 9]));
        assert_eq!(crate::ssv::flow::ipv4_dst(&f), Some(B.octets()));
    }
}
