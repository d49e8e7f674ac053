//! Fixed-size frame layout and authenticated encryption.
//!
//! ```text
//! SealedFrame (4096) = nonce (12) | ciphertext (4068) | tag (16)
//! PlainFrame  (4068) = session_id u32 | seq u64 | device u8 | operation u8
//!                      | status u8 | payload_len u16 | payload | zero padding
//! nonce              = direction u8 | 0 0 0 | seq u64
//! ```
//!
//! All integers are big-endian.

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce, Tag};

use super::ChannelError;

pub const FRAME_SIZE: usize = 4096;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const PLAIN_SIZE: usize = FRAME_SIZE - NONCE_LEN - TAG_LEN;
pub const HEADER_LEN: usize = 17;
pub const MAX_PAYLOAD: usize = PLAIN_SIZE - HEADER_LEN;
pub const KEY_LEN: usize = 32;

/// Set in `status` on frames the supervisor pushes without a request.
pub const STATUS_EVENT: u8 = 0x80;

pub type SessionKey = [u8; KEY_LEN];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    ToSsv = 1,
    FromSsv = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Operation {
    Probe = 0,
    Read = 1,
    Write = 2,
}

impl Operation {
    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Operation::Probe),
            1 => Some(Operation::Read),
            2 => Some(Operation::Write),
            _ => None,
        }
    }
}

/// Reply status codes; the high bit marks unsolicited events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Status {
    Ok = 0,
    UnknownDevice = 1,
    OperationUnsupported = 2,
    DriverError = 3,
    PolicyViolation = 4,
    TagCollision = 5,
}

impl Status {
    pub fn from_code(c: u8) -> Option<Self> {
        match c & !STATUS_EVENT {
            0 => Some(Status::Ok),
            1 => Some(Status::UnknownDevice),
            2 => Some(Status::OperationUnsupported),
            3 => Some(Status::DriverError),
            4 => Some(Status::PolicyViolation),
            5 => Some(Status::TagCollision),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainFrame {
    pub session_id: u32,
    pub seq: u64,
    pub device: u8,
    /// Raw verb byte; the supervisor rejects anything outside [`Operation`].
    pub operation: u8,
    pub status: u8,
    pub payload: Vec<u8>,
}

impl PlainFrame {
    pub fn is_event(&self) -> bool {
        self.status & STATUS_EVENT != 0
    }

    pub fn encode(&self) -> Result<Box<[u8; PLAIN_SIZE]>, ChannelError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(ChannelError::PayloadTooLarge(self.payload.len()));
        }
        let mut out = Box::new([0u8; PLAIN_SIZE]);
        out[0..4].copy_from_slice(&self.session_id.to_be_bytes());
        out[4..12].copy_from_slice(&self.seq.to_be_bytes());
        out[12] = self.device;
        out[13] = self.operation;
        out[14] = self.status;
        out[15..17].copy_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out[HEADER_LEN..HEADER_LEN + self.payload.len()].copy_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(b: &[u8]) -> Result<Self, ChannelError> {
        if b.len() != PLAIN_SIZE {
            return Err(ChannelError::Malformed);
        }
        let len = usize::from(u16::from_be_bytes([b[15], b[16]]));
        if len > MAX_PAYLOAD {
            return Err(ChannelError::Malformed);
        }
        Ok(PlainFrame {
            session_id: u32::from_be_bytes(b[0..4].try_into().unwrap()),
            seq: u64::from_be_bytes(b[4..12].try_into().unwrap()),
            device: b[12],
            operation: b[13],
            status: b[14],
            payload: b[HEADER_LEN..HEADER_LEN + len].to_vec(),
        })
    }
}

/// One 4096-byte wire unit.
#[derive(Clone, PartialEq, Eq)]
pub struct SealedFrame(pub Box<[u8; FRAME_SIZE]>);

impl SealedFrame {
    pub fn from_bytes(b: &[u8]) -> Result<Self, ChannelError> {
        let arr: [u8; FRAME_SIZE] = b.try_into().map_err(|_| ChannelError::Malformed)?;
        Ok(SealedFrame(Box::new(arr)))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0[..]
    }

    pub fn nonce(&self) -> &[u8] {
        &self.0[..NONCE_LEN]
    }
}

impl std::fmt::Debug for SealedFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SealedFrame(nonce={:02x?})", self.nonce())
    }
}

pub fn nonce_for(dir: Direction, seq: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[0] = dir as u8;
    n[4..].copy_from_slice(&seq.to_be_bytes());
    n
}

/// Encrypt an encoded plaintext block. The nonce is derived from `dir` and `seq`.
pub fn seal_bytes(key: &SessionKey, dir: Direction, seq: u64, plain: &[u8; PLAIN_SIZE]) -> SealedFrame {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let nonce = nonce_for(dir, seq);
    let mut out = Box::new([0u8; FRAME_SIZE]);
    out[..NONCE_LEN].copy_from_slice(&nonce);
    out[NONCE_LEN..NONCE_LEN + PLAIN_SIZE].copy_from_slice(plain);
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), &[], &mut out[NONCE_LEN..NONCE_LEN + PLAIN_SIZE])
        .expect("plaintext length within AES-GCM limits");
    out[NONCE_LEN + PLAIN_SIZE..].copy_from_slice(&tag);
    SealedFrame(out)
}

/// Verify and decrypt, returning the plaintext block and the nonce's sequence number.
///
/// The nonce must carry `dir`; sequence checks are the caller's job.
pub fn open_bytes(key: &SessionKey, dir: Direction, frame: &SealedFrame) -> Result<(Box<[u8; PLAIN_SIZE]>, u64), ChannelError> {
    let b = &frame.0;
    if b[0] != dir as u8 || b[1..4] != [0, 0, 0] {
        return Err(ChannelError::AuthFail);
    }
    let seq = u64::from_be_bytes(b[4..12].try_into().unwrap());
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let mut plain = Box::new([0u8; PLAIN_SIZE]);
    plain.copy_from_slice(&b[NONCE_LEN..NONCE_LEN + PLAIN_SIZE]);
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&b[..NONCE_LEN]),
            &[],
            &mut plain[..],
            Tag::from_slice(&b[NONCE_LEN + PLAIN_SIZE..]),
        )
        .map_err(|_| ChannelError::AuthFail)?;
    Ok((plain, seq))
}

/// Seal a frame whose `seq` field must equal the nonce counter.
pub fn seal(key: &SessionKey, dir: Direction, plain: &PlainFrame) -> Result<SealedFrame, ChannelError> {
    let block = plain.encode()?;
    Ok(seal_bytes(key, dir, plain.seq, &block))
}

/// Open and check the sequence number against `expected`.
pub fn open(key: &SessionKey, dir: Direction, frame: &SealedFrame, expected: u64) -> Result<PlainFrame, ChannelError> {
    let (block, seq) = open_bytes(key, dir, frame)?;
    let plain = PlainFrame::decode(&block[..])?;
    if seq != expected || plain.seq != seq {
        return Err(ChannelError::ReplayOrReorder { expected, got: seq });
    }
    Ok(plain)
}

/// Raw AES-256-GCM used by the known-answer tests.
pub fn aead_encrypt(key: &[u8; 32], nonce: &[u8; 12], aad: &[u8], plain: &[u8]) -> (Vec<u8>, [u8; 16]) {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let mut buf = plain.to_vec();
    let tag = cipher.encrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf).expect("length ok");
    (buf, tag.into())
}

pub fn aead_decrypt(key: &[u8; 32], nonce: &[u8; 12], aad: &[u8], ct: &[u8], tag: &[u8; 16]) -> Option<Vec<u8>> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let mut buf = ct.to_vec();
    cipher.decrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf, Tag::from_slice(tag)).ok()?;
    Some(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(payload: &[u8]) -> PlainFrame {
        PlainFrame { session_id: 3, seq: 0, device: 1, operation: 1, status: 0, payload: payload.to_vec() }
    }

    #[test]
    fn sizes_add_up() {
        assert_eq!(NONCE_LEN + PLAIN_SIZE + TAG_LEN, 4096);
        assert_eq!(MAX_PAYLOAD, 4096 - 12 - 16 - 17);
    }

    #[test]
    fn round_trip() {
        let key = [7u8; 32];
        let p = frame(b"time?");
        let s = seal(&key, Direction::ToSsv, &p).unwrap();
        assert_eq!(s.as_bytes().len(), FRAME_SIZE);
        assert_eq!(open(&key, Direction::ToSsv, &s, 0).unwrap(), p);
    }

    #[test]
    fn bit_flip_fails() {
        let key = [7u8; 32];
        let mut s = seal(&key, Direction::ToSsv, &frame(b"x")).unwrap();
        s.0[100] ^= 1;
        assert_eq!(open(&key, Direction::ToSsv, &s, 0), Err(ChannelError::AuthFail));
    }

    #[test]
    fn wrong_direction_fails() {
        let key = [7u8; 32];
        let s = seal(&key, Direction::ToSsv, &frame(b"x")).unwrap();
        assert_eq!(open(&key, Direction::FromSsv, &s, 0), Err(ChannelError::AuthFail));
    }

    #[test]
    fn nonce_layout() {
        assert_eq!(nonce_for(Direction::FromSsv, 0x0102), [2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2]);
    }

    #[test]
    fn oversized_payload_rejected() {
        assert_eq!(frame(&[0; MAX_PAYLOAD + 1]).encode().unwrap_err(), ChannelError::PayloadTooLarge(MAX_PAYLOAD + 1));
        assert!(frame(&[0; MAX_PAYLOAD]).encode().is_ok());
    }
}
