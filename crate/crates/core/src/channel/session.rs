//! The enclave end of a secure session.
//!
//! The session key lives in the enclave's EPC at offset 0; every seal and
//! open reads it back from there, so the platform's access rules govern it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::fifo::{self, FifoPair};
use super::frame::{self, Direction, PlainFrame, SealedFrame, SessionKey, FRAME_SIZE, KEY_LEN, PLAIN_SIZE};
use super::{ChannelError, EnclaveCredential, Epid, SsvToken};
use crate::adversary::Hook;
use crate::devices::DeviceId;
use crate::machine::Machine;
use crate::platform::{Actor, Context, DomainKind, EnclaveId, Step};

const EPC_KEY: usize = 0;
const EPC_PLAIN: usize = 4096;
const EPC_SEALED: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Establishing,
    Active,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestMode {
    /// Raise an SMI right away and wait for the reply.
    Immediate,
    /// Queue until `n` requests are pending, then raise one SMI for all.
    Batched(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub seq: u64,
    pub device: u8,
    pub operation: u8,
    pub status: u8,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn is_ok(&self) -> bool {
        self.status == super::Status::Ok as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Ready(Response),
    Queued { pending: usize },
    Batch(Vec<Response>),
}

impl Reply {
    pub fn into_single(self) -> Option<Response> {
        match self {
            Reply::Ready(r) => Some(r),
            Reply::Batch(mut v) if v.len() == 1 => v.pop(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub requests: u64,
    pub replies: u64,
    pub events: u64,
    pub timeouts: u64,
    pub integrity_errors: u64,
}

#[derive(Debug)]
pub struct Session {
    pub id: u32,
    pub enclave: EnclaveId,
    pub epid: Epid,
    pub fifos: FifoPair,
    state: SessionState,
    tx_seq: u64,
    rx_seq: u64,
    /// Sequence numbers of requests still waiting for a reply, oldest first.
    pending: VecDeque<u64>,
    stash: VecDeque<PlainFrame>,
    /// Workflow of the most recent immediate request.
    pub last_trace: Vec<Step>,
    pub stats: SessionStats,
}

impl Session {
    /// Attest both ends through the CA and agree on a fresh key.
    pub fn establish(m: &mut Machine, enclave: EnclaveId) -> Result<Session, ChannelError> {
        let epid = m.epid_of(enclave).ok_or(ChannelError::AuthFailEnclave)?;
        let token = m.handshake_token();
        Self::establish_with(m, enclave, EnclaveCredential { epid }, token)
    }

    /// Establish with an explicit credential and whatever token answered the
    /// handshake SMI.
    pub fn establish_with(
        m: &mut Machine,
        enclave: EnclaveId,
        cred: EnclaveCredential,
        token: SsvToken,
    ) -> Result<Session, ChannelError> {
        m.ca.verify(&cred, &token).inspect_err(|e| {
            m.platform.log("ca", format!("enclave {enclave} rejected: {}", e.kind()));
        })?;
        let cap = m.config().fifo_capacity;
        let fifos = m.shared.alloc_pair(cap).ok_or(ChannelError::SharedMemUnavailable)?;
        let key = m.fresh_key();
        let mut s = Session {
            id: 0,
            enclave,
            epid: cred.epid,
            fifos,
            state: SessionState::Establishing,
            tx_seq: 0,
            rx_seq: 0,
            pending: VecDeque::new(),
            stash: VecDeque::new(),
            last_trace: Vec::new(),
            stats: SessionStats::default(),
        };
        s.enter(m)?;
        let stored = m.platform.write(Actor::Enclave(enclave), DomainKind::Epc(enclave), EPC_KEY, &key);
        s.leave(m);
        if let Err(f) = stored {
            m.shared.free_pair(&fifos);
            return Err(f.into());
        }
        fifo::reset(&mut m.platform, Actor::Os, &fifos.to_ssv)?;
        fifo::reset(&mut m.platform, Actor::Os, &fifos.from_ssv)?;
        // Out-of-band delivery to the supervisor.
        let epid = cred.epid;
        let installed = m.with_smm(|p, ssv| ssv.install(p, enclave, epid, &key, fifos))?;
        match installed {
            Ok(id) => s.id = id,
            Err(e) => {
                m.shared.free_pair(&fifos);
                return Err(e);
            }
        }
        s.state = SessionState::Active;
        m.platform.log("channel", format!("session {} active for enclave {enclave}", s.id));
        Ok(s)
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn tx_seq(&self) -> u64 {
        self.tx_seq
    }

    pub fn rx_seq(&self) -> u64 {
        self.rx_seq
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn enter(&self, m: &mut Machine) -> Result<(), ChannelError> {
        m.platform.set_context(Context::Enclave(self.enclave))?;
        Ok(())
    }

    fn leave(&self, m: &mut Machine) {
        let _ = m.platform.set_context(Context::Os);
    }

    fn key(&self, m: &mut Machine) -> Result<SessionKey, ChannelError> {
        let b = m.platform.read(Actor::Enclave(self.enclave), DomainKind::Epc(self.enclave), EPC_KEY, KEY_LEN)?;
        Ok(b.try_into().unwrap())
    }

    /// Seal one request and place it in the outbound FIFO. Runs in enclave context.
    fn push_request(&mut self, m: &mut Machine, device: u8, op: u8, payload: &[u8]) -> Result<u64, ChannelError> {
        let seq = self.tx_seq;
        let plain = PlainFrame { session_id: self.id, seq, device, operation: op, status: 0, payload: payload.to_vec() };
        let block = plain.encode()?;
        let me = Actor::Enclave(self.enclave);
        let epc = DomainKind::Epc(self.enclave);
        let costs = m.platform.costs().clone();
        let tag = Some((self.id, seq));
        self.enter(m)?;
        let result = (|| {
            m.platform.write(me, epc, EPC_PLAIN, &block[..])?;
            let key = self.key(m)?;
            m.platform.charge("EPC encryption", costs.epc_encrypt, tag);
            let sealed = frame::seal_bytes(&key, Direction::ToSsv, seq, &block);
            m.platform.write(me, epc, EPC_SEALED, sealed.as_bytes())?;
            m.platform.charge("Copy to shared RAM", costs.enclave_copy_to_shared, tag);
            fifo::enqueue(&mut m.platform, me, &self.fifos.to_ssv, &sealed)
        })();
        m.platform.write(me, epc, EPC_PLAIN, &[0u8; PLAIN_SIZE]).ok();
        self.leave(m);
        result?;
        m.frames.enclave_sealed += 1;
        self.tx_seq += 1;
        self.pending.push_back(seq);
        self.stats.requests += 1;
        m.hook(Hook::RequestEnqueued { session: self.id });
        Ok(seq)
    }

    /// Take one frame from the inbound FIFO and open it in the EPC.
    ///
    /// Replies are returned; events are stashed for [`Session::take_events`].
    fn pull(&mut self, m: &mut Machine) -> Result<Option<Response>, ChannelError> {
        let me = Actor::Enclave(self.enclave);
        let epc = DomainKind::Epc(self.enclave);
        let costs = m.platform.costs().clone();
        self.enter(m)?;
        let result = (|| -> Result<Option<PlainFrame>, ChannelError> {
            let Some(sealed) = fifo::dequeue(&mut m.platform, me, &self.fifos.from_ssv)? else {
                return Ok(None);
            };
            let copy = m.platform.charge("Copy to EPC", costs.copy_to_epc, None);
            m.platform.write(me, epc, EPC_SEALED, sealed.as_bytes())?;
            let local = SealedFrame::from_bytes(&m.platform.read(me, epc, EPC_SEALED, FRAME_SIZE)?)?;
            let key = self.key(m)?;
            let dec = m.platform.charge("EPC decryption", costs.epc_decrypt, None);
            match frame::open(&key, Direction::FromSsv, &local, self.rx_seq) {
                Ok(plain) => {
                    if !plain.is_event() {
                        let tag = self.pending.front().map(|s| (self.id, *s));
                        m.platform.retag(copy, tag);
                        m.platform.retag(dec, tag);
                    }
                    Ok(Some(plain))
                }
                Err(e) => {
                    m.frames.enclave_dropped += 1;
                    self.stats.integrity_errors += 1;
                    m.platform.log("channel", format!("session {} open failed: {}", self.id, e.kind()));
                    Err(e)
                }
            }
        })();
        self.leave(m);
        let Some(plain) = result? else { return Ok(None) };
        m.frames.enclave_opened += 1;
        self.rx_seq += 1;
        if plain.is_event() {
            self.stats.events += 1;
            self.stash.push_back(plain);
            return Ok(None);
        }
        self.pending.pop_front();
        self.stats.replies += 1;
        Ok(Some(Response {
            seq: plain.seq,
            device: plain.device,
            operation: plain.operation,
            status: plain.status,
            payload: plain.payload,
        }))
    }

    /// Wait until `want` replies arrived or the time budget runs out.
    fn await_replies(&mut self, m: &mut Machine, want: usize) -> Result<Vec<Response>, ChannelError> {
        let start = m.now();
        let budget = m.config().timeout_ns;
        let poll = m.platform.costs().poll_interval.max(1);
        let mut got = Vec::with_capacity(want);
        loop {
            m.pump();
            loop {
                match self.pull(m)? {
                    Some(r) => got.push(r),
                    None if self.more_inbound(m) => continue,
                    None => break,
                }
                if got.len() == want {
                    return Ok(got);
                }
            }
            if m.now().saturating_sub(start) >= budget {
                self.stats.timeouts += 1;
                m.platform.log("channel", format!("session {} timed out", self.id));
                return Err(ChannelError::Timeout);
            }
            m.platform.charge("Poll wait", poll, None);
        }
    }

    /// Issue a request to `device`. The verb byte is passed through untouched
    /// so the supervisor's whitelist can be exercised.
    pub fn request_raw(
        &mut self,
        m: &mut Machine,
        device: u8,
        op: u8,
        payload: &[u8],
        mode: RequestMode,
    ) -> Result<Reply, ChannelError> {
        if self.state != SessionState::Active {
            return Err(ChannelError::Closed);
        }
        let trace_from = m.platform.steps_len();
        let seq = self.push_request(m, device, op, payload)?;
        match mode {
            RequestMode::Immediate => {
                let want = self.pending.len();
                m.request_smi(Some(self.id));
                let mut replies = self.await_replies(m, want)?;
                self.last_trace = m.workflow_trace(trace_from, self.id, seq);
                if replies.len() == 1 {
                    Ok(Reply::Ready(replies.pop().unwrap()))
                } else {
                    Ok(Reply::Batch(replies))
                }
            }
            RequestMode::Batched(n) => {
                let pending = self.pending.len();
                if pending < n.max(1) {
                    return Ok(Reply::Queued { pending });
                }
                m.request_smi(Some(self.id));
                Ok(Reply::Batch(self.await_replies(m, pending)?))
            }
        }
    }

    pub fn request(
        &mut self,
        m: &mut Machine,
        device: DeviceId,
        op: super::Operation,
        payload: &[u8],
        mode: RequestMode,
    ) -> Result<Reply, ChannelError> {
        self.request_raw(m, device.code(), op as u8, payload, mode)
    }

    /// Immediate request returning the single reply.
    pub fn call(
        &mut self,
        m: &mut Machine,
        device: DeviceId,
        op: super::Operation,
        payload: &[u8],
    ) -> Result<Response, ChannelError> {
        match self.request(m, device, op, payload, RequestMode::Immediate)? {
            Reply::Ready(r) => Ok(r),
            Reply::Batch(mut v) => v.pop().ok_or(ChannelError::Malformed),
            Reply::Queued { .. } => Err(ChannelError::Malformed),
        }
    }

    /// Drain the inbound FIFO without issuing a request (poll mode).
    pub fn poll(&mut self, m: &mut Machine) -> Result<usize, ChannelError> {
        if self.state != SessionState::Active {
            return Err(ChannelError::Closed);
        }
        let mut n = 0;
        while self.more_inbound(m) {
            if let Some(r) = self.pull(m)? {
                // A late reply to a request that already timed out.
                m.platform.log("channel", format!("session {} late reply seq {}", self.id, r.seq));
            }
            n += 1;
        }
        Ok(n)
    }

    fn more_inbound(&self, m: &mut Machine) -> bool {
        fifo::len(&mut m.platform, Actor::Os, &self.fifos.from_ssv).unwrap_or(0) > 0
    }

    pub fn take_events(&mut self) -> Vec<PlainFrame> {
        self.stash.drain(..).collect()
    }

    pub fn has_events(&self) -> bool {
        !self.stash.is_empty()
    }

    /// Re-run key agreement: fresh key, zeroed counters, emptied FIFOs.
    pub fn reset(&mut self, m: &mut Machine) -> Result<(), ChannelError> {
        if self.state != SessionState::Active {
            return Err(ChannelError::Closed);
        }
        let token = m.handshake_token();
        m.ca.verify(&EnclaveCredential { epid: self.epid }, &token)?;
        let key = m.fresh_key();
        m.frames.discarded += m.queued(&self.fifos);
        self.enter(m)?;
        let stored = m.platform.write(Actor::Enclave(self.enclave), DomainKind::Epc(self.enclave), EPC_KEY, &key);
        self.leave(m);
        stored?;
        fifo::reset(&mut m.platform, Actor::Os, &self.fifos.to_ssv)?;
        fifo::reset(&mut m.platform, Actor::Os, &self.fifos.from_ssv)?;
        let id = self.id;
        m.with_smm(|p, ssv| ssv.rekey(p, id, &key))??;
        self.tx_seq = 0;
        self.rx_seq = 0;
        self.pending.clear();
        self.stash.clear();
        m.platform.log("channel", format!("session {id} reset"));
        Ok(())
    }

    /// Zeroize keys at both ends and release the FIFOs.
    pub fn teardown(&mut self, m: &mut Machine) {
        if self.state == SessionState::Closed {
            return;
        }
        m.frames.discarded += m.queued(&self.fifos);
        if self.enter(m).is_ok() {
            let _ = m.platform.write(Actor::Enclave(self.enclave), DomainKind::Epc(self.enclave), EPC_KEY, &[0; KEY_LEN]);
            self.leave(m);
        }
        let id = self.id;
        if let Ok(Some(fifos)) = m.with_smm(|p, ssv| ssv.remove(p, id)) {
            m.shared.free_pair(&fifos);
        }
        self.state = SessionState::Closed;
        self.pending.clear();
        self.stash.clear();
        m.platform.log("channel", format!("session {id} closed"));
    }
}
