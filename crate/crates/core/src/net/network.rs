//! Cooperative driver for several stacks on one machine, with blocking
//! BSD-style wrappers. Each stack still runs on its own; the driver only
//! interleaves them and lets virtual time pass when nobody has work.

use std::net::Ipv4Addr;

use super::stack::{EchoReply, NetError, Protocol, RxMode, SocketId, StackConfig, StackInstance};
use super::tcp::Endpoint;
use crate::channel::Session;
use crate::machine::Machine;

/// Virtual time between TCP timer checks while idle.
pub const TICK_NS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoProbe {
    pub seq: u16,
    pub rtt_ns: u64,
    pub sent_at: u64,
    pub data: Vec<u8>,
}

pub struct Network {
    pub stacks: Vec<StackInstance>,
    /// Virtual-time budget for one blocking call.
    pub budget_ns: u64,
    last_tick: u64,
    echo_backlog: Vec<(usize, EchoReply)>,
}

impl Default for Network {
    fn default() -> Self {
        Network { stacks: Vec::new(), budget_ns: 5_000_000_000, last_tick: 0, echo_backlog: Vec::new() }
    }
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create an enclave with identity `n`, attest it and bring up its stack.
    pub fn spawn(&mut self, m: &mut Machine, n: u16, ip: Ipv4Addr, rx_mode: RxMode) -> Result<usize, NetError> {
        let cfg = StackConfig { ip, rx_mode, ..StackConfig::default() };
        self.spawn_with(m, n, cfg)
    }

    pub fn spawn_with(&mut self, m: &mut Machine, n: u16, cfg: StackConfig) -> Result<usize, NetError> {
        let enclave = m.create_enclave(Machine::epid_from(n), true);
        let session = Session::establish(m, enclave)?;
        let stack = StackInstance::init(m, session, cfg)?;
        self.stacks.push(stack);
        Ok(self.stacks.len() - 1)
    }

    /// Poll every stack once. Returns the number of frames processed.
    pub fn step(&mut self, m: &mut Machine) -> Result<usize, NetError> {
        let mut work = 0;
        for s in &mut self.stacks {
            work += s.poll(m)?;
        }
        Ok(work)
    }

    fn idle(&mut self, m: &mut Machine) -> Result<(), NetError> {
        m.pump();
        if m.now().saturating_sub(self.last_tick) >= TICK_NS {
            self.last_tick = m.now();
            for s in &mut self.stacks {
                s.tick(m)?;
            }
        }
        let poll = m.platform.costs().poll_interval.max(1);
        m.platform.charge("Idle", poll, None);
        Ok(())
    }

    /// Drive all stacks until `cond` holds or the budget runs out.
    pub fn run_until<T>(
        &mut self,
        m: &mut Machine,
        mut cond: impl FnMut(&mut Network, &mut Machine) -> Result<Option<T>, NetError>,
    ) -> Result<T, NetError> {
        let start = m.now();
        loop {
            if let Some(v) = cond(self, m)? {
                return Ok(v);
            }
            if self.step(m)? == 0 {
                self.idle(m)?;
            }
            if m.now().saturating_sub(start) > self.budget_ns {
                return Err(NetError::Timeout);
            }
        }
    }

    /// Let in-flight traffic settle for `ns` of virtual time.
    pub fn run_for(&mut self, m: &mut Machine, ns: u64) -> Result<(), NetError> {
        let end = m.now() + ns;
        self.run_until(m, |_, m| Ok((m.now() >= end).then_some(())))
    }

    pub fn socket(&mut self, s: usize, p: Protocol) -> SocketId {
        self.stacks[s].socket(p)
    }

    pub fn bind(&mut self, s: usize, sock: SocketId, port: u16) -> Result<(), NetError> {
        self.stacks[s].bind(sock, port)
    }

    pub fn listen(&mut self, s: usize, sock: SocketId) -> Result<(), NetError> {
        self.stacks[s].listen(sock)
    }

    pub fn connect(&mut self, m: &mut Machine, s: usize, sock: SocketId, remote: Endpoint) -> Result<(), NetError> {
        self.stacks[s].connect(m, sock, remote)?;
        self.run_until(m, |n, _| Ok(n.stacks[s].connected(sock)?.then_some(())))
    }

    pub fn accept(&mut self, m: &mut Machine, s: usize, sock: SocketId) -> Result<SocketId, NetError> {
        self.run_until(m, |n, _| match n.stacks[s].accept(sock) {
            Ok(c) => Ok(Some(c)),
            Err(NetError::WouldBlock) => Ok(None),
            Err(e) => Err(e),
        })
    }

    pub fn send(&mut self, m: &mut Machine, s: usize, sock: SocketId, data: &[u8]) -> Result<usize, NetError> {
        self.stacks[s].send(m, sock, data)
    }

    /// Block until at least one byte or end of stream.
    pub fn recv(&mut self, m: &mut Machine, s: usize, sock: SocketId, max: usize) -> Result<Vec<u8>, NetError> {
        self.run_until(m, |n, m| match n.stacks[s].recv(m, sock, max) {
            Ok(v) => Ok(Some(v)),
            Err(NetError::WouldBlock) => Ok(None),
            Err(e) => Err(e),
        })
    }

    /// Read until the peer closes.
    pub fn recv_to_end(&mut self, m: &mut Machine, s: usize, sock: SocketId) -> Result<Vec<u8>, NetError> {
        let mut out = Vec::new();
        loop {
            let chunk = self.recv(m, s, sock, usize::MAX)?;
            if chunk.is_empty() {
                return Ok(out);
            }
            out.extend(chunk);
        }
    }

    pub fn close(&mut self, m: &mut Machine, s: usize, sock: SocketId) -> Result<(), NetError> {
        self.stacks[s].close(m, sock)
    }

    pub fn sendto(&mut self, m: &mut Machine, s: usize, sock: SocketId, dst: Endpoint, data: &[u8]) -> Result<usize, NetError> {
        self.stacks[s].sendto(m, sock, dst, data)
    }

    pub fn recvfrom(&mut self, m: &mut Machine, s: usize, sock: SocketId) -> Result<(Endpoint, Vec<u8>), NetError> {
        self.run_until(m, |n, _| match n.stacks[s].recvfrom(sock) {
            Ok(v) => Ok(Some(v)),
            Err(NetError::WouldBlock) => Ok(None),
            Err(e) => Err(e),
        })
    }

    /// Send `count` echo requests one after another; RTTs are in virtual time.
    /// A probe without a reply within the budget yields `Timeout`.
    pub fn icmp_echo(
        &mut self,
        m: &mut Machine,
        s: usize,
        dst: Ipv4Addr,
        payload: &[u8],
        count: u16,
    ) -> Vec<Result<EchoProbe, NetError>> {
        let ident = 0x4155;
        let mut out = Vec::new();
        for seq in 0..count {
            let sent_at = m.now();
            if let Err(e) = self.stacks[s].echo_request(m, dst, ident, seq, payload) {
                out.push(Err(e));
                continue;
            }
            let got = self.run_until(m, |n, _| {
                let fresh = n.stacks[s].take_echo_replies();
                n.echo_backlog.extend(fresh.into_iter().map(|r| (s, r)));
                let hit = n.echo_backlog.iter().position(|(k, r)| *k == s && r.id == ident && r.seq == seq && r.from == dst);
                Ok(hit.map(|i| n.echo_backlog.remove(i).1))
            });
            out.push(got.map(|r| EchoProbe { seq, rtt_ns: r.vt_ns - sent_at, sent_at, data: r.data }));
        }
        out
    }
}
