//! One in-enclave network stack. Its link layer is the secure session: every
//! egress frame is a sealed NIC write and every ingress frame an opened event.
//! A stack is driven by exactly one thread of control and shares nothing with
//! its siblings.

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pool::PacketPool;
use super::tcp::{self, Endpoint, TcpPcb, TcpState};
use super::wire::*;
use crate::channel::{ChannelError, Operation, Session, Status};
use crate::devices::DeviceId;
use crate::machine::Machine;
use crate::ssv::flow::tag_for;
use crate::time_tss::{TimeConfig, TimeError, TimeService};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("connection refused")]
    ConnRefused,
    #[error("operation timed out")]
    Timeout,
    #[error("operation would block")]
    WouldBlock,
    #[error("connection closed")]
    Closed,
    #[error("NIC probe failed")]
    ProbeFailed,
    #[error("flow tag already registered")]
    TagCollision,
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("trusted clock: {0}")]
    Time(TimeError),
    #[error("address in use")]
    AddrInUse,
    #[error("invalid socket")]
    InvalidSocket,
    #[error("socket not connected")]
    NotConnected,
    #[error("frame rejected with status {0}")]
    Rejected(u8),
}

impl NetError {
    /// Stable name used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            NetError::ConnRefused => "ConnRefused",
            NetError::Timeout => "Timeout",
            NetError::WouldBlock => "WouldBlock",
            NetError::Closed => "Closed",
            NetError::ProbeFailed => "ProbeFailed",
            NetError::TagCollision => "TagCollision",
            NetError::Channel(e) => e.kind(),
            NetError::Time(TimeError::Channel(e)) => e.kind(),
            NetError::Time(TimeError::AttackDetected(_)) => "TimeVerdict",
            NetError::Time(_) => "Time",
            NetError::AddrInUse => "AddrInUse",
            NetError::InvalidSocket => "InvalidSocket",
            NetError::NotConnected => "NotConnected",
            NetError::Rejected(_) => "Rejected",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RxMode {
    /// Wait for the supervisor's notification interrupt before draining.
    Notify,
    /// Drain the inbound FIFO on every poll.
    Poll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub ip: Ipv4Addr,
    pub rx_mode: RxMode,
    pub pool_buffers: usize,
    pub rto_us: i128,
    pub time: TimeConfig,
    /// Keep a copy of every delivered ingress frame.
    pub record_rx: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            ip: Ipv4Addr::new(10, 0, 0, 1),
            rx_mode: RxMode::Notify,
            pool_buffers: 64,
            rto_us: 20_000,
            time: TimeConfig::default(),
            record_rx: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Udp,
    Tcp,
    RawIcmp,
}

pub type SocketId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SocketHandle {
    pub id: SocketId,
    pub protocol: Protocol,
    pub state: Option<TcpState>,
    pub peer: Option<Endpoint>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoReply {
    pub from: Ipv4Addr,
    pub id: u16,
    pub seq: u16,
    pub data: Vec<u8>,
    pub vt_ns: u64,
}

#[derive(Debug)]
enum Sock {
    Udp { port: Option<u16>, rx: VecDeque<(Endpoint, Vec<u8>)> },
    Tcp { pcb: TcpPcb, backlog: VecDeque<SocketId>, closed_by_app: bool },
    Icmp { rx: VecDeque<EchoReply> },
}

#[derive(Debug)]
struct Reassembly {
    parts: BTreeMap<usize, Vec<u8>>,
    total: Option<usize>,
}

const MAX_REASSEMBLIES: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackStats {
    pub tx_frames: u64,
    pub tx_rejected: u64,
    pub rx_frames: u64,
    pub polls: u64,
    pub empty_polls: u64,
    pub notifications: u64,
    pub rx_pool_drops: u64,
    pub rx_untagged: u64,
    pub rx_malformed: u64,
    pub rx_not_for_us: u64,
    pub arp_requests: u64,
    pub arp_replies: u64,
    pub fragments_tx: u64,
    pub reassembled: u64,
    pub udp_no_port: u64,
    pub tcp_rst_tx: u64,
    pub clock_reads: u64,
}

pub struct StackInstance {
    pub session: Session,
    pub mac: Mac,
    pub ip: Ipv4Addr,
    pub flow_tag: FlowTag,
    /// Adapter address reported by the supervisor's probe.
    pub nic_mac: Mac,
    config: StackConfig,
    arp_cache: BTreeMap<Ipv4Addr, Mac>,
    /// IPv4 packets waiting for address resolution.
    arp_pending: BTreeMap<Ipv4Addr, Vec<Vec<u8>>>,
    sockets: Vec<Option<Sock>>,
    pool: PacketPool,
    rx_ring: VecDeque<super::pool::PacketBuf>,
    reassembly: BTreeMap<(Ipv4Addr, u16, u8), Reassembly>,
    entropy: ChaCha20Rng,
    clock: TimeService,
    ip_id: u16,
    pub stats: StackStats,
    pub rx_log: Vec<Vec<u8>>,
}

impl StackInstance {
    /// Probe the NIC through the supervisor, register this stack's flow and
    /// announce the address.
    pub fn init(m: &mut Machine, mut session: Session, config: StackConfig) -> Result<Self, NetError> {
        let probe = session.call(m, DeviceId::Nic, Operation::Probe, &[])?;
        if !probe.is_ok() || probe.payload.len() != 6 {
            return Err(NetError::ProbeFailed);
        }
        let nic_mac: Mac = probe.payload[..].try_into().unwrap();
        let epid = session.epid;
        let flow_tag = tag_for(&epid);
        let mut reg = flow_tag.to_vec();
        reg.extend_from_slice(&config.ip.octets());
        let r = session.call(m, DeviceId::Nic, Operation::Probe, &reg)?;
        match Status::from_code(r.status) {
            Some(Status::Ok) => {}
            Some(Status::TagCollision) => return Err(NetError::TagCollision),
            _ => return Err(NetError::ProbeFailed),
        }
        let clock = TimeService::new(m, &mut session, config.time.clone()).map_err(NetError::Time)?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&m.fresh_key());
        let mac = [0x02, 0x88, epid[12], epid[13], epid[14], epid[15]];
        let mut s = StackInstance {
            session,
            mac,
            ip: config.ip,
            flow_tag,
            nic_mac,
            pool: PacketPool::new(config.pool_buffers),
            config,
            arp_cache: BTreeMap::new(),
            arp_pending: BTreeMap::new(),
            sockets: Vec::new(),
            rx_ring: VecDeque::new(),
            reassembly: BTreeMap::new(),
            entropy: ChaCha20Rng::from_seed(seed),
            clock,
            ip_id: 0,
            stats: StackStats::default(),
            rx_log: Vec::new(),
        };
        s.ip_id = s.entropy.gen();
        let announce = Arp { op: ARP_REQUEST, sha: s.mac, spa: s.ip, tha: [0; 6], tpa: s.ip };
        s.transmit(m, eth_build(&EthHeader { dst: BROADCAST, src: s.mac, ethertype: ETHERTYPE_ARP }, &announce.encode()))?;
        Ok(s)
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn pool(&self) -> &PacketPool {
        &self.pool
    }

    pub fn arp_lookup(&self, ip: Ipv4Addr) -> Option<Mac> {
        self.arp_cache.get(&ip).copied()
    }

    // ---- link layer -----------------------------------------------------

    /// The only egress path: one sealed NIC write per frame.
    fn transmit(&mut self, m: &mut Machine, frame: Vec<u8>) -> Result<(), NetError> {
        let c = m.platform.costs().clone();
        m.platform.charge("Stack processing", c.stack_per_frame + c.stack_per_byte * frame.len() as u64, None);
        let r = self.session.call(m, DeviceId::Nic, Operation::Write, &frame)?;
        if !r.is_ok() {
            self.stats.tx_rejected += 1;
            return Err(NetError::Rejected(r.status));
        }
        self.stats.tx_frames += 1;
        Ok(())
    }

    /// Pull delivered frames off the channel and process them. Returns the
    /// number of frames handled.
    pub fn poll(&mut self, m: &mut Machine) -> Result<usize, NetError> {
        self.stats.polls += 1;
        match self.config.rx_mode {
            RxMode::Notify => {
                let tokens = m.platform.take_notifications(self.session.enclave);
                self.stats.notifications += tokens.len() as u64;
                if !tokens.is_empty() {
                    self.session.poll(m)?;
                }
            }
            RxMode::Poll => {
                self.session.poll(m)?;
            }
        }
        for ev in self.session.take_events() {
            if ev.device != DeviceId::Nic.code() {
                continue;
            }
            match self.pool.alloc(&ev.payload) {
                Some(buf) => self.rx_ring.push_back(buf),
                None => self.stats.rx_pool_drops += 1,
            }
        }
        if self.rx_ring.is_empty() {
            self.stats.empty_polls += 1;
            return Ok(0);
        }
        let mut n = 0;
        while let Some(buf) = self.rx_ring.pop_front() {
            let frame = self.pool.take(buf);
            self.input(m, &frame)?;
            n += 1;
        }
        self.flush(m)?;
        Ok(n)
    }

    fn input(&mut self, m: &mut Machine, frame: &[u8]) -> Result<(), NetError> {
        let c = m.platform.costs().clone();
        m.platform.charge("Stack processing", c.stack_per_frame + c.stack_per_byte * frame.len() as u64, None);
        self.stats.rx_frames += 1;
        if self.config.record_rx {
            self.rx_log.push(frame.to_vec());
        }
        let Some((eth, body)) = eth_parse(frame) else {
            self.stats.rx_malformed += 1;
            return Ok(());
        };
        if eth.dst != self.mac && eth.dst != BROADCAST {
            self.stats.rx_not_for_us += 1;
            return Ok(());
        }
        match eth.ethertype {
            ETHERTYPE_ARP => self.arp_input(m, body),
            ETHERTYPE_IPV4 => self.ip_input(m, body),
            _ => {
                self.stats.rx_malformed += 1;
                Ok(())
            }
        }
    }

    fn arp_input(&mut self, m: &mut Machine, body: &[u8]) -> Result<(), NetError> {
        let Some(arp) = Arp::decode(body) else {
            self.stats.rx_malformed += 1;
            return Ok(());
        };
        // Our own announcement coming back through the fabric.
        if arp.spa == self.ip {
            return Ok(());
        }
        if arp.tpa != self.ip {
            self.stats.rx_not_for_us += 1;
            return Ok(());
        }
        self.arp_cache.insert(arp.spa, arp.sha);
        if arp.op == ARP_REQUEST {
            self.stats.arp_replies += 1;
            let reply = Arp { op: ARP_REPLY, sha: self.mac, spa: self.ip, tha: arp.sha, tpa: arp.spa };
            self.transmit(m, eth_build(&EthHeader { dst: arp.sha, src: self.mac, ethertype: ETHERTYPE_ARP }, &reply.encode()))?;
        }
        if let Some(queued) = self.arp_pending.remove(&arp.spa) {
            for pkt in queued {
                self.transmit(m, eth_build(&EthHeader { dst: arp.sha, src: self.mac, ethertype: ETHERTYPE_IPV4 }, &pkt))?;
            }
        }
        Ok(())
    }

    // ---- IPv4 -----------------------------------------------------------

    fn next_ip_id(&mut self) -> u16 {
        self.ip_id = self.ip_id.wrapping_add(1);
        self.ip_id
    }

    /// Send an IPv4 datagram, fragmenting above the MTU. Every fragment
    /// carries the flow tag.
    fn ip_output(&mut self, m: &mut Machine, dst: Ipv4Addr, proto: u8, payload: &[u8]) -> Result<(), NetError> {
        let id = self.next_ip_id();
        let mut packets = Vec::new();
        if payload.len() <= MTU - IPV4_HDR {
            let mut h = Ipv4Header::new(self.ip, dst, proto, self.flow_tag);
            h.id = id;
            packets.push(h.encode(payload));
        } else {
            for (k, chunk) in payload.chunks(FRAG_PAYLOAD).enumerate() {
                let mut h = Ipv4Header::new(self.ip, dst, proto, self.flow_tag);
                h.id = id;
                h.frag_offset = (k * FRAG_PAYLOAD / 8) as u16;
                h.more_fragments = (k + 1) * FRAG_PAYLOAD < payload.len();
                packets.push(h.encode(chunk));
                self.stats.fragments_tx += 1;
            }
        }
        let Some(dst_mac) = self.arp_cache.get(&dst).copied() else {
            let first = !self.arp_pending.contains_key(&dst);
            self.arp_pending.entry(dst).or_default().extend(packets);
            if first {
                self.stats.arp_requests += 1;
                let req = Arp { op: ARP_REQUEST, sha: self.mac, spa: self.ip, tha: [0; 6], tpa: dst };
                self.transmit(m, eth_build(&EthHeader { dst: BROADCAST, src: self.mac, ethertype: ETHERTYPE_ARP }, &req.encode()))?;
            }
            return Ok(());
        };
        for pkt in packets {
            self.transmit(m, eth_build(&EthHeader { dst: dst_mac, src: self.mac, ethertype: ETHERTYPE_IPV4 }, &pkt))?;
        }
        Ok(())
    }

    fn ip_input(&mut self, m: &mut Machine, body: &[u8]) -> Result<(), NetError> {
        let Some((h, payload)) = Ipv4Header::decode(body) else {
            self.stats.rx_malformed += 1;
            return Ok(());
        };
        if h.option != Some(self.flow_tag) {
            self.stats.rx_untagged += 1;
            return Ok(());
        }
        if h.dst != self.ip {
            self.stats.rx_not_for_us += 1;
            return Ok(());
        }
        if h.more_fragments || h.frag_offset != 0 {
            let Some(whole) = self.reassemble(&h, payload) else { return Ok(()) };
            return self.deliver(m, &h, &whole);
        }
        self.deliver(m, &h, payload)
    }

    fn reassemble(&mut self, h: &Ipv4Header, payload: &[u8]) -> Option<Vec<u8>> {
        let key = (h.src, h.id, h.proto);
        if !self.reassembly.contains_key(&key) && self.reassembly.len() >= MAX_REASSEMBLIES {
            let oldest = *self.reassembly.keys().next().unwrap();
            self.reassembly.remove(&oldest);
        }
        let r = self.reassembly.entry(key).or_insert_with(|| Reassembly { parts: BTreeMap::new(), total: None });
        let at = usize::from(h.frag_offset) * 8;
        if !h.more_fragments {
            r.total = Some(at + payload.len());
        }
        r.parts.insert(at, payload.to_vec());
        let total = r.total?;
        let mut next = 0;
        for (off, part) in &r.parts {
            if *off != next {
                return None;
            }
            next += part.len();
        }
        if next != total {
            return None;
        }
        let r = self.reassembly.remove(&key)?;
        self.stats.reassembled += 1;
        Some(r.parts.into_values().flatten().collect())
    }

    fn deliver(&mut self, m: &mut Machine, h: &Ipv4Header, payload: &[u8]) -> Result<(), NetError> {
        match h.proto {
            PROTO_ICMP => self.icmp_input(m, h, payload),
            PROTO_UDP => {
                let Some((u, data)) = Udp::decode(h.src, h.dst, payload) else {
                    self.stats.rx_malformed += 1;
                    return Ok(());
                };
                let target = self.sockets.iter_mut().flatten().find_map(|s| match s {
                    Sock::Udp { port: Some(p), rx } if *p == u.dst_port => Some(rx),
                    _ => None,
                });
                match target {
                    Some(rx) => rx.push_back(((h.src, u.src_port), data.to_vec())),
                    None => self.stats.udp_no_port += 1,
                }
                Ok(())
            }
            PROTO_TCP => self.tcp_input(m, h, payload),
            _ => Ok(()),
        }
    }

    fn icmp_input(&mut self, m: &mut Machine, h: &Ipv4Header, payload: &[u8]) -> Result<(), NetError> {
        let Some((icmp, data)) = Icmp::decode(payload) else {
            self.stats.rx_malformed += 1;
            return Ok(());
        };
        match icmp.kind {
            ICMP_ECHO_REQUEST => {
                let reply = Icmp { kind: ICMP_ECHO_REPLY, ..icmp }.encode(data);
                self.ip_output(m, h.src, PROTO_ICMP, &reply)
            }
            ICMP_ECHO_REPLY => {
                let vt_ns = m.now();
                let rec = EchoReply { from: h.src, id: icmp.id, seq: icmp.seq, data: data.to_vec(), vt_ns };
                if let Some(Sock::Icmp { rx }) = self.sockets.iter_mut().flatten().find(|s| matches!(s, Sock::Icmp { .. })) {
                    rx.push_back(rec);
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn tcp_input(&mut self, m: &mut Machine, h: &Ipv4Header, payload: &[u8]) -> Result<(), NetError> {
        let Some((seg, data)) = TcpHeader::decode(h.src, h.dst, payload) else {
            self.stats.rx_malformed += 1;
            return Ok(());
        };
        let local = (h.dst, seg.dst_port);
        let remote = (h.src, seg.src_port);
        for s in self.sockets.iter_mut().flatten() {
            if let Sock::Tcp { pcb, .. } = s {
                if pcb.matches(local, remote) {
                    pcb.input(&seg, data);
                    return Ok(());
                }
            }
        }
        let listener = self.sockets.iter().position(|s| {
            matches!(s, Some(Sock::Tcp { pcb, .. }) if pcb.state == TcpState::Listen && pcb.local.1 == seg.dst_port)
        });
        if let Some(l) = listener {
            if seg.has(tcp_flags::SYN) && !seg.has(tcp_flags::ACK) {
                let iss = self.entropy.gen();
                let child = TcpPcb::from_syn(local, remote, &seg, iss, self.config.rto_us);
                let id = self.insert(Sock::Tcp { pcb: child, backlog: VecDeque::new(), closed_by_app: false });
                if let Some(Sock::Tcp { backlog, .. }) = &mut self.sockets[l] {
                    backlog.push_back(id);
                }
                return Ok(());
            }
        }
        if let Some(rst) = tcp::reset_for(local, remote, &seg, data.len()) {
            self.stats.tcp_rst_tx += 1;
            self.tcp_send(m, rst)?;
        }
        Ok(())
    }

    fn tcp_send(&mut self, m: &mut Machine, seg: tcp::Segment) -> Result<(), NetError> {
        let bytes = seg.hdr.encode(seg.local.0, seg.remote.0, &seg.data);
        self.ip_output(m, seg.remote.0, PROTO_TCP, &bytes)
    }

    /// Emit whatever the TCP state machines want to send.
    fn flush(&mut self, m: &mut Machine) -> Result<(), NetError> {
        let mut out = Vec::new();
        for s in self.sockets.iter_mut().flatten() {
            if let Sock::Tcp { pcb, .. } = s {
                out.extend(pcb.output());
            }
        }
        for seg in out {
            self.tcp_send(m, seg)?;
        }
        Ok(())
    }

    /// True while some connection has a timer running.
    pub fn timers_pending(&self) -> bool {
        self.sockets.iter().flatten().any(|s| matches!(s, Sock::Tcp { pcb, .. } if pcb.needs_timer()))
    }

    /// Run TCP timers against the trusted clock.
    pub fn tick(&mut self, m: &mut Machine) -> Result<(), NetError> {
        if !self.timers_pending() {
            return Ok(());
        }
        self.stats.clock_reads += 1;
        let now = self.clock.now(m, &mut self.session).map_err(NetError::Time)?;
        let us = now.value.as_micros();
        for s in self.sockets.iter_mut().flatten() {
            if let Sock::Tcp { pcb, .. } = s {
                pcb.on_timer(us);
            }
        }
        self.flush(m)
    }

    pub fn clock(&self) -> &TimeService {
        &self.clock
    }

    // ---- sockets --------------------------------------------------------

    fn insert(&mut self, s: Sock) -> SocketId {
        if let Some(i) = self.sockets.iter().position(Option::is_none) {
            self.sockets[i] = Some(s);
            return i;
        }
        self.sockets.push(Some(s));
        self.sockets.len() - 1
    }

    fn port_in_use(&self, port: u16, proto: Protocol) -> bool {
        self.sockets.iter().flatten().any(|s| match (s, proto) {
            (Sock::Udp { port: Some(p), .. }, Protocol::Udp) => *p == port,
            (Sock::Tcp { pcb, .. }, Protocol::Tcp) => pcb.local.1 == port && pcb.state != TcpState::Closed,
            _ => false,
        })
    }

    fn ephemeral_port(&mut self, proto: Protocol) -> u16 {
        loop {
            let p = self.entropy.gen_range(49152..=65535);
            if !self.port_in_use(p, proto) {
                return p;
            }
        }
    }

    pub fn socket(&mut self, protocol: Protocol) -> SocketId {
        let s = match protocol {
            Protocol::Udp => Sock::Udp { port: None, rx: VecDeque::new() },
            Protocol::Tcp => Sock::Tcp {
                pcb: TcpPcb::new((self.ip, 0), self.config.rto_us),
                backlog: VecDeque::new(),
                closed_by_app: false,
            },
            Protocol::RawIcmp => Sock::Icmp { rx: VecDeque::new() },
        };
        self.insert(s)
    }

    fn sock(&mut self, id: SocketId) -> Result<&mut Sock, NetError> {
        self.sockets.get_mut(id).and_then(Option::as_mut).ok_or(NetError::InvalidSocket)
    }

    pub fn bind(&mut self, id: SocketId, port: u16) -> Result<(), NetError> {
        let proto = self.handle(id)?.protocol;
        if self.port_in_use(port, proto) {
            return Err(NetError::AddrInUse);
        }
        let ip = self.ip;
        match self.sock(id)? {
            Sock::Udp { port: p, .. } => *p = Some(port),
            Sock::Tcp { pcb, .. } => pcb.local = (ip, port),
            Sock::Icmp { .. } => return Err(NetError::InvalidSocket),
        }
        Ok(())
    }

    pub fn listen(&mut self, id: SocketId) -> Result<(), NetError> {
        match self.sock(id)? {
            Sock::Tcp { pcb, .. } if pcb.local.1 != 0 => {
                pcb.listen();
                Ok(())
            }
            Sock::Tcp { .. } => Err(NetError::NotConnected),
            _ => Err(NetError::InvalidSocket),
        }
    }

    /// Start an active open. Completion is observed with [`Self::connected`].
    pub fn connect(&mut self, m: &mut Machine, id: SocketId, remote: Endpoint) -> Result<(), NetError> {
        let needs_port = matches!(self.sock(id)?, Sock::Tcp { pcb, .. } if pcb.local.1 == 0);
        let port = if needs_port { Some(self.ephemeral_port(Protocol::Tcp)) } else { None };
        let iss = self.entropy.gen();
        let ip = self.ip;
        match self.sock(id)? {
            Sock::Tcp { pcb, .. } => {
                if let Some(p) = port {
                    pcb.local = (ip, p);
                }
                pcb.connect(remote, iss);
            }
            _ => return Err(NetError::InvalidSocket),
        }
        self.flush(m)
    }

    /// `Ok(true)` once established; `ConnRefused` after a RST.
    pub fn connected(&mut self, id: SocketId) -> Result<bool, NetError> {
        match self.sock(id)? {
            Sock::Tcp { pcb, .. } if pcb.refused => Err(NetError::ConnRefused),
            Sock::Tcp { pcb, .. } if pcb.reset => Err(NetError::Closed),
            Sock::Tcp { pcb, .. } => Ok(!matches!(pcb.state, TcpState::SynSent | TcpState::SynRcvd)),
            _ => Err(NetError::InvalidSocket),
        }
    }

    pub fn accept(&mut self, id: SocketId) -> Result<SocketId, NetError> {
        let candidates: Vec<SocketId> = match self.sock(id)? {
            Sock::Tcp { backlog, .. } => backlog.iter().copied().collect(),
            _ => return Err(NetError::InvalidSocket),
        };
        for c in candidates {
            let established = matches!(
                self.sockets.get(c),
                Some(Some(Sock::Tcp { pcb, .. })) if !matches!(pcb.state, TcpState::SynRcvd | TcpState::Closed)
            );
            if established {
                if let Sock::Tcp { backlog, .. } = self.sock(id)? {
                    backlog.retain(|x| *x != c);
                }
                return Ok(c);
            }
        }
        Err(NetError::WouldBlock)
    }

    pub fn send(&mut self, m: &mut Machine, id: SocketId, data: &[u8]) -> Result<usize, NetError> {
        let n = match self.sock(id)? {
            Sock::Tcp { pcb, .. } if pcb.reset => return Err(NetError::Closed),
            Sock::Tcp { pcb, .. } if pcb.can_send() => pcb.send(data),
            Sock::Tcp { pcb, .. } if pcb.state == TcpState::Closed => return Err(NetError::Closed),
            Sock::Tcp { .. } => return Err(NetError::NotConnected),
            _ => return Err(NetError::InvalidSocket),
        };
        self.flush(m)?;
        Ok(n)
    }

    /// Bytes queued on a TCP socket and not yet acknowledged.
    pub fn unacked(&self, id: SocketId) -> usize {
        match self.sockets.get(id) {
            Some(Some(Sock::Tcp { pcb, .. })) => pcb.unacked(),
            _ => 0,
        }
    }

    /// Up to `max` bytes. An empty result means the peer closed.
    pub fn recv(&mut self, m: &mut Machine, id: SocketId, max: usize) -> Result<Vec<u8>, NetError> {
        let out = match self.sock(id)? {
            Sock::Tcp { pcb, .. } => {
                if pcb.readable() > 0 {
                    pcb.read(max)
                } else if pcb.fin_received {
                    return Ok(Vec::new());
                } else if pcb.reset {
                    return Err(NetError::Closed);
                } else {
                    return Err(NetError::WouldBlock);
                }
            }
            _ => return Err(NetError::InvalidSocket),
        };
        self.flush(m)?;
        Ok(out)
    }

    pub fn close(&mut self, m: &mut Machine, id: SocketId) -> Result<(), NetError> {
        match self.sock(id)? {
            Sock::Tcp { pcb, closed_by_app, .. } => {
                pcb.close();
                *closed_by_app = true;
            }
            _ => {
                self.sockets[id] = None;
                return Ok(());
            }
        }
        self.flush(m)
    }

    pub fn sendto(&mut self, m: &mut Machine, id: SocketId, dst: Endpoint, data: &[u8]) -> Result<usize, NetError> {
        let bound = match self.sock(id)? {
            Sock::Udp { port, .. } => *port,
            _ => return Err(NetError::InvalidSocket),
        };
        let src_port = match bound {
            Some(p) => p,
            None => {
                let p = self.ephemeral_port(Protocol::Udp);
                if let Sock::Udp { port, .. } = self.sock(id)? {
                    *port = Some(p);
                }
                p
            }
        };
        let seg = Udp { src_port, dst_port: dst.1 }.encode(self.ip, dst.0, data);
        self.ip_output(m, dst.0, PROTO_UDP, &seg)?;
        Ok(data.len())
    }

    pub fn recvfrom(&mut self, id: SocketId) -> Result<(Endpoint, Vec<u8>), NetError> {
        match self.sock(id)? {
            Sock::Udp { rx, .. } => rx.pop_front().ok_or(NetError::WouldBlock),
            _ => Err(NetError::InvalidSocket),
        }
    }

    pub fn echo_request(&mut self, m: &mut Machine, dst: Ipv4Addr, id: u16, seq: u16, data: &[u8]) -> Result<(), NetError> {
        if !self.sockets.iter().flatten().any(|s| matches!(s, Sock::Icmp { .. })) {
            self.socket(Protocol::RawIcmp);
        }
        let pkt = Icmp { kind: ICMP_ECHO_REQUEST, id, seq }.encode(data);
        self.ip_output(m, dst, PROTO_ICMP, &pkt)
    }

    pub fn take_echo_replies(&mut self) -> Vec<EchoReply> {
        self.sockets
            .iter_mut()
            .flatten()
            .filter_map(|s| match s {
                Sock::Icmp { rx } => Some(rx.drain(..).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn handle(&self, id: SocketId) -> Result<SocketHandle, NetError> {
        let s = self.sockets.get(id).and_then(Option::as_ref).ok_or(NetError::InvalidSocket)?;
        Ok(match s {
            Sock::Udp { .. } => SocketHandle { id, protocol: Protocol::Udp, state: None, peer: None },
            Sock::Tcp { pcb, .. } => SocketHandle {
                id,
                protocol: Protocol::Tcp,
                state: Some(pcb.state),
                peer: (pcb.remote.1 != 0).then_some(pcb.remote),
            },
            Sock::Icmp { .. } => SocketHandle { id, protocol: Protocol::RawIcmp, state: None, peer: None },
        })
    }

    /// Every TCP state a socket has been in.
    pub fn tcp_history(&self, id: SocketId) -> Vec<TcpState> {
        match self.sockets.get(id) {
            Some(Some(Sock::Tcp { pcb, .. })) => pcb.history.clone(),
            _ => Vec::new(),
        }
    }

    pub fn tcp_retransmits(&self) -> u64 {
        self.sockets
            .iter()
            .flatten()
            .map(|s| match s {
                Sock::Tcp { pcb, .. } => pcb.retransmits,
                _ => 0,
            })
            .sum()
    }

    /// Fuzz this stack's protocol control blocks. A stack corrupted this way
    /// may break its own connections and nothing else.
    pub fn corrupt_pcbs(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for s in self.sockets.iter_mut().flatten() {
            match s {
                Sock::Tcp { pcb, .. } => pcb.corrupt(rng.gen()),
                Sock::Udp { port, .. } => *port = Some(rng.gen()),
                Sock::Icmp { .. } => {}
            }
        }
        self.arp_cache.clear();
        self.ip_id = rng.gen();
    }

    /// Release the flow and the session.
    pub fn shutdown(&mut self, m: &mut Machine) {
        self.session.teardown(m);
    }
}
