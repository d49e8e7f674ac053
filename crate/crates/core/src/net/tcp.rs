//! Minimal TCP: the standard state machine without window scaling, SACK or
//! congestion control. The send window is fixed at a few segments and lost
//! data is recovered go-back-N style on retransmission timeout. Nagle is off.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::wire::{tcp_flags::*, TcpHeader, TCP_MSS};

pub type Endpoint = (Ipv4Addr, u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TcpState {
    Closed,
    Listen,
    SynSent,
    SynRcvd,
    Established,
    FinWait1,
    FinWait2,
    CloseWait,
    LastAck,
    TimeWait,
}

/// Segments in flight before the sender waits for an ACK.
pub const WINDOW_SEGMENTS: usize = 8;
pub const RECV_BUF: usize = 64 * 1024;

fn seq_lt(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) < 0
}

fn seq_le(a: u32, b: u32) -> bool {
    a == b || seq_lt(a, b)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub local: Endpoint,
    pub remote: Endpoint,
    pub hdr: TcpHeader,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct TcpPcb {
    pub state: TcpState,
    pub local: Endpoint,
    pub remote: Endpoint,
    /// Every state entered, in order.
    pub history: Vec<TcpState>,
    iss: u32,
    snd_una: u32,
    snd_nxt: u32,
    snd_wnd: u32,
    /// Bytes from `snd_una` on: unacknowledged, then unsent.
    send_buf: VecDeque<u8>,
    close_requested: bool,
    fin_seq: Option<u32>,
    rcv_nxt: u32,
    recv_buf: VecDeque<u8>,
    pub fin_received: bool,
    /// Connection torn down by a peer RST.
    pub reset: bool,
    /// Active open answered with RST.
    pub refused: bool,
    ack_pending: bool,
    probe: bool,
    timer_start: Option<i128>,
    pub rto_us: i128,
    pub retransmits: u64,
}

impl TcpPcb {
    pub fn new(local: Endpoint, rto_us: i128) -> Self {
        TcpPcb {
            state: TcpState::Closed,
            local,
            remote: (Ipv4Addr::UNSPECIFIED, 0),
            history: vec![TcpState::Closed],
            iss: 0,
            snd_una: 0,
            snd_nxt: 0,
            snd_wnd: 0,
            send_buf: VecDeque::new(),
            close_requested: false,
            fin_seq: None,
            rcv_nxt: 0,
            recv_buf: VecDeque::new(),
            fin_received: false,
            reset: false,
            refused: false,
            ack_pending: false,
            probe: false,
            timer_start: None,
            rto_us,
            retransmits: 0,
        }
    }

    fn set_state(&mut self, s: TcpState) {
        if self.state != s {
            self.state = s;
            self.history.push(s);
        }
    }

    pub fn listen(&mut self) {
        self.set_state(TcpState::Listen);
    }

    pub fn connect(&mut self, remote: Endpoint, iss: u32) {
        self.remote = remote;
        self.iss = iss;
        self.snd_una = iss;
        self.snd_nxt = iss;
        self.set_state(TcpState::SynSent);
    }

    /// A child connection for a SYN that reached a listener.
    pub fn from_syn(local: Endpoint, remote: Endpoint, syn: &TcpHeader, iss: u32, rto_us: i128) -> Self {
        let mut p = TcpPcb::new(local, rto_us);
        p.history = vec![TcpState::Listen];
        p.state = TcpState::Listen;
        p.remote = remote;
        p.iss = iss;
        p.snd_una = iss;
        p.snd_nxt = iss;
        p.snd_wnd = u32::from(syn.window);
        p.rcv_nxt = syn.seq.wrapping_add(1);
        p.set_state(TcpState::SynRcvd);
        p
    }

    pub fn matches(&self, local: Endpoint, remote: Endpoint) -> bool {
        self.local == local && self.remote == remote && !matches!(self.state, TcpState::Closed | TcpState::Listen)
    }

    pub fn can_send(&self) -> bool {
        matches!(self.state, TcpState::SynSent | TcpState::SynRcvd | TcpState::Established | TcpState::CloseWait)
            && !self.close_requested
    }

    pub fn send(&mut self, data: &[u8]) -> usize {
        self.send_buf.extend(data);
        data.len()
    }

    /// Bytes queued but not yet acknowledged.
    pub fn unacked(&self) -> usize {
        self.send_buf.len()
    }

    pub fn readable(&self) -> usize {
        self.recv_buf.len()
    }

    pub fn read(&mut self, max: usize) -> Vec<u8> {
        let before = self.window();
        let n = max.min(self.recv_buf.len());
        let out: Vec<u8> = self.recv_buf.drain(..n).collect();
        if usize::from(before) < TCP_MSS && usize::from(self.window()) >= TCP_MSS {
            // Reopen a window the peer may be waiting on.
            self.ack_pending = true;
        }
        out
    }

    pub fn close(&mut self) {
        match self.state {
            TcpState::Closed | TcpState::Listen | TcpState::SynSent => self.set_state(TcpState::Closed),
            _ => self.close_requested = true,
        }
    }

    fn window(&self) -> u16 {
        (RECV_BUF - self.recv_buf.len()).min(usize::from(u16::MAX)) as u16
    }

    fn segment(&self, seq: u32, flags: u8, data: Vec<u8>) -> Segment {
        let ack = if flags & ACK != 0 { self.rcv_nxt } else { 0 };
        Segment {
            local: self.local,
            remote: self.remote,
            hdr: TcpHeader { src_port: self.local.1, dst_port: self.remote.1, seq, ack, flags, window: self.window() },
            data,
        }
    }

    pub fn input(&mut self, hdr: &TcpHeader, data: &[u8]) {
        if hdr.has(RST) {
            match self.state {
                TcpState::SynSent => {
                    if hdr.has(ACK) && hdr.ack == self.iss.wrapping_add(1) {
                        self.refused = true;
                        self.set_state(TcpState::Closed);
                    }
                }
                TcpState::Closed | TcpState::Listen => {}
                _ => {
                    if hdr.seq == self.rcv_nxt {
                        self.reset = true;
                        self.set_state(TcpState::Closed);
                    }
                }
            }
            return;
        }
        match self.state {
            TcpState::Closed | TcpState::Listen => return,
            TcpState::SynSent => {
                if hdr.has(SYN) && hdr.has(ACK) && hdr.ack == self.iss.wrapping_add(1) {
                    self.rcv_nxt = hdr.seq.wrapping_add(1);
                    self.snd_una = hdr.ack;
                    self.snd_nxt = hdr.ack;
                    self.snd_wnd = u32::from(hdr.window);
                    self.timer_start = None;
                    self.set_state(TcpState::Established);
                    self.ack_pending = true;
                }
                return;
            }
            TcpState::SynRcvd => {
                if hdr.has(SYN) {
                    // Our SYN-ACK was lost: send it again.
                    self.snd_nxt = self.iss;
                    return;
                }
                if !(hdr.has(ACK) && hdr.ack == self.iss.wrapping_add(1)) {
                    return;
                }
                self.snd_una = hdr.ack;
                self.snd_wnd = u32::from(hdr.window);
                self.timer_start = None;
                self.set_state(TcpState::Established);
            }
            _ => {}
        }

        if hdr.has(ACK) {
            if seq_lt(self.snd_una, hdr.ack) && seq_le(hdr.ack, self.snd_nxt) {
                let mut acked = hdr.ack.wrapping_sub(self.snd_una) as usize;
                let fin_acked = self.fin_seq.is_some_and(|f| seq_lt(f, hdr.ack));
                if fin_acked {
                    acked -= 1;
                }
                let n = acked.min(self.send_buf.len());
                self.send_buf.drain(..n);
                self.snd_una = hdr.ack;
                self.timer_start = None;
                self.probe = false;
                if fin_acked {
                    match self.state {
                        TcpState::FinWait1 if self.fin_received => self.set_state(TcpState::TimeWait),
                        TcpState::FinWait1 => self.set_state(TcpState::FinWait2),
                        TcpState::LastAck => self.set_state(TcpState::Closed),
                        _ => {}
                    }
                }
            }
            if seq_le(self.snd_una, hdr.ack) {
                self.snd_wnd = u32::from(hdr.window);
            }
        }

        let receiving = matches!(self.state, TcpState::Established | TcpState::FinWait1 | TcpState::FinWait2);
        let mut in_order = hdr.seq == self.rcv_nxt;
        if !data.is_empty() {
            if receiving && in_order {
                let room = RECV_BUF - self.recv_buf.len();
                let take = room.min(data.len());
                self.recv_buf.extend(&data[..take]);
                self.rcv_nxt = self.rcv_nxt.wrapping_add(take as u32);
                in_order = take == data.len();
            }
            self.ack_pending = true;
        }
        if hdr.has(FIN) {
            self.ack_pending = true;
            let fin_at = hdr.seq.wrapping_add(data.len() as u32);
            if in_order && fin_at == self.rcv_nxt && !self.fin_received {
                self.rcv_nxt = self.rcv_nxt.wrapping_add(1);
                self.fin_received = true;
                match self.state {
                    TcpState::Established => self.set_state(TcpState::CloseWait),
                    TcpState::FinWait2 => self.set_state(TcpState::TimeWait),
                    _ => {}
                }
            }
        }
    }

    /// Segments to transmit now.
    pub fn output(&mut self) -> Vec<Segment> {
        let mut out = Vec::new();
        match self.state {
            TcpState::SynSent if self.snd_nxt == self.iss => {
                out.push(self.segment(self.iss, SYN, Vec::new()));
                self.snd_nxt = self.iss.wrapping_add(1);
            }
            TcpState::SynRcvd if self.snd_nxt == self.iss => {
                out.push(self.segment(self.iss, SYN | ACK, Vec::new()));
                self.snd_nxt = self.iss.wrapping_add(1);
            }
            TcpState::Established | TcpState::CloseWait | TcpState::FinWait1 | TcpState::LastAck => {
                let wnd = (self.snd_wnd as usize).min(WINDOW_SEGMENTS * TCP_MSS);
                loop {
                    let offset = self.snd_nxt.wrapping_sub(self.snd_una) as usize;
                    let unsent = self.send_buf.len().saturating_sub(offset);
                    let inflight = offset;
                    let room = if self.probe && inflight == 0 { 1 } else { wnd.saturating_sub(inflight) };
                    if unsent == 0 || room == 0 {
                        break;
                    }
                    let n = unsent.min(TCP_MSS).min(room);
                    let data: Vec<u8> = self.send_buf.range(offset..offset + n).copied().collect();
                    out.push(self.segment(self.snd_nxt, ACK | PSH, data));
                    self.snd_nxt = self.snd_nxt.wrapping_add(n as u32);
                    self.probe = false;
                }
                let offset = self.snd_nxt.wrapping_sub(self.snd_una) as usize;
                let all_sent = offset == self.send_buf.len();
                let fin_due = self.fin_seq.is_none_or(|f| f == self.snd_nxt);
                if self.close_requested && all_sent && fin_due && matches!(self.state, TcpState::Established | TcpState::CloseWait)
                    || self.fin_seq == Some(self.snd_nxt) && all_sent
                {
                    self.fin_seq = Some(self.snd_nxt);
                    out.push(self.segment(self.snd_nxt, FIN | ACK, Vec::new()));
                    self.snd_nxt = self.snd_nxt.wrapping_add(1);
                    match self.state {
                        TcpState::Established => self.set_state(TcpState::FinWait1),
                        TcpState::CloseWait => self.set_state(TcpState::LastAck),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
        let synced = !matches!(self.state, TcpState::Closed | TcpState::Listen | TcpState::SynSent);
        if self.ack_pending && out.is_empty() && synced {
            out.push(self.segment(self.snd_nxt, ACK, Vec::new()));
        }
        self.ack_pending = false;
        out
    }

    /// True while a retransmission or TIME-WAIT timer must run.
    pub fn needs_timer(&self) -> bool {
        match self.state {
            TcpState::SynSent | TcpState::SynRcvd | TcpState::TimeWait => true,
            TcpState::Closed | TcpState::Listen => false,
            _ => self.snd_una != self.snd_nxt || (!self.send_buf.is_empty() && self.snd_wnd == 0),
        }
    }

    /// Drive timers with the trusted clock. Timers start lazily at the first
    /// check after they become needed.
    pub fn on_timer(&mut self, now_us: i128) {
        if !self.needs_timer() {
            self.timer_start = None;
            return;
        }
        let start = *self.timer_start.get_or_insert(now_us);
        if self.state == TcpState::TimeWait {
            if now_us - start >= 2 * self.rto_us {
                self.set_state(TcpState::Closed);
            }
            return;
        }
        if now_us - start < self.rto_us {
            return;
        }
        self.retransmits += 1;
        self.timer_start = Some(now_us);
        match self.state {
            TcpState::SynSent | TcpState::SynRcvd => self.snd_nxt = self.iss,
            _ => {
                if self.snd_una == self.snd_nxt {
                    self.probe = true;
                }
                self.snd_nxt = self.snd_una;
            }
        }
    }

    /// Scramble sequence state. Used to show a corrupted stack only hurts itself.
    pub fn corrupt(&mut self, noise: u32) {
        self.snd_una ^= noise;
        self.snd_nxt = self.snd_nxt.wrapping_add(noise.rotate_left(7));
        self.rcv_nxt = self.rcv_nxt.wrapping_sub(noise);
        self.remote.1 ^= (noise & 0xffff) as u16;
    }
}

/// Reply to a segment that matches no connection.
pub fn reset_for(local: Endpoint, remote: Endpoint, hdr: &TcpHeader, data_len: usize) -> Option<Segment> {
    if hdr.has(RST) {
        return None;
    }
    let (seq, ack, flags) = if hdr.has(ACK) {
        (hdr.ack, 0, RST)
    } else {
        let mut len = data_len as u32;
        if hdr.has(SYN) {
            len += 1;
        }
        if hdr.has(FIN) {
            len += 1;
        }
        (0, hdr.seq.wrapping_add(len), RST | ACK)
    };
    Some(Segment {
        local,
        remote,
        hdr: TcpHeader { src_port: local.1, dst_port: remote.1, seq, ack, flags, window: 0 },
        data: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Endpoint = (Ipv4Addr::new(10, 0, 0, 1), 40000);
    const B: Endpoint = (Ipv4Addr::new(10, 0, 0, 2), 80);

    /// Deliver every segment from `from` into `to`; returns how many moved.
    fn pump(from: &mut TcpPcb, to: &mut TcpPcb) -> usize {
        let segs = from.output();
        for s in &segs {
            to.input(&s.hdr, &s.data);
        }
        segs.len()
    }

    fn handshake() -> (TcpPcb, TcpPcb) {
        let mut a = TcpPcb::new(A, 1000);
        a.connect(B, 1000);
        let syn = a.output().remove(0);
        assert!(syn.hdr.has(SYN));
        let mut b = TcpPcb::from_syn(B, A, &syn.hdr, 5000, 1000);
        pump(&mut b, &mut a);
        pump(&mut a, &mut b);
        (a, b)
    }

    #[test]
    fn three_way_handshake_states() {
        let (a, b) = handshake();
        assert_eq!(a.history, vec![TcpState::Closed, TcpState::SynSent, TcpState::Established]);
        assert_eq!(b.history, vec![TcpState::Listen, TcpState::SynRcvd, TcpState::Established]);
    }

    #[test]
    fn transfer_and_close() {
        let (mut a, mut b) = handshake();
        let data: Vec<u8> = (0..50_000u32).map(|i| (i % 251) as u8).collect();
        a.send(&data);
        a.close();
        let mut got = Vec::new();
        for _ in 0..200 {
            pump(&mut a, &mut b);
            got.extend(b.read(usize::MAX));
            pump(&mut b, &mut a);
        }
        assert_eq!(got, data);
        assert_eq!(b.state, TcpState::CloseWait);
        b.close();
        pump(&mut b, &mut a);
        pump(&mut a, &mut b);
        assert_eq!(a.state, TcpState::TimeWait);
        assert_eq!(b.state, TcpState::Closed);
        assert!(a.history.contains(&TcpState::FinWait2));
        assert_eq!(b.history[b.history.len() - 2], TcpState::LastAck);
    }

    #[test]
    fn lost_segment_recovered_after_timeout() {
        let (mut a, mut b) = handshake();
        a.send(&[7u8; 3000]);
        let first = a.output();
        assert_eq!(first.len(), 3);
        // Drop the first segment, deliver the rest out of order.
        for s in &first[1..] {
            b.input(&s.hdr, &s.data);
        }
        assert_eq!(b.readable(), 0);
        pump(&mut b, &mut a);
        a.on_timer(0);
        a.on_timer(1000);
        assert_eq!(a.retransmits, 1);
        pump(&mut a, &mut b);
        assert_eq!(b.readable(), 3000);
    }

    #[test]
    fn window_limits_flight() {
        let (mut a, _b) = handshake();
        a.send(&vec![1u8; 20 * TCP_MSS]);
        assert_eq!(a.output().len(), WINDOW_SEGMENTS);
        assert!(a.output().is_empty());
    }

    #[test]
    fn rst_to_syn_refuses() {
        let mut a = TcpPcb::new(A, 1000);
        a.connect(B, 77);
        let syn = a.output().remove(0);
        let rst = reset_for(B, A, &syn.hdr, 0).unwrap();
        a.input(&rst.hdr, &rst.data);
        assert!(a.refused);
        assert_eq!(a.state, TcpState::Closed);
    }

    #[test]
    fn sequence_comparison_wraps() {
        assert!(seq_lt(u32::MAX - 1, 2));
        assert!(!seq_lt(2, u32::MAX - 1));
        assert!(seq_le(5, 5));
    }
}
