//! Simulated certificate authority brokering identities for key agreement.
//!
//! The CA holds the measurement of the genuine supervisor image and the set
//! of registered enclave identities. It talks to both endpoints over an
//! out-of-band channel the adversary cannot observe.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use super::ChannelError;

pub type Epid = [u8; 16];

/// Measurement of a supervisor image.
pub type SsvToken = [u8; 32];

pub fn measure(image: &[u8]) -> SsvToken {
    Sha256::digest(image).into()
}

/// What an enclave presents during attestation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnclaveCredential {
    pub epid: Epid,
}

#[derive(Clone, Debug, Default)]
pub struct CertificateAuthority {
    ssv_measurement: SsvToken,
    registered: BTreeSet<Epid>,
    pub verified: u64,
    pub rejected_enclave: u64,
    pub rejected_ssv: u64,
}

impl CertificateAuthority {
    pub fn new(genuine_ssv_image: &[u8]) -> Self {
        CertificateAuthority { ssv_measurement: measure(genuine_ssv_image), ..Default::default() }
    }

    pub fn register(&mut self, epid: Epid) {
        self.registered.insert(epid);
    }

    pub fn is_registered(&self, epid: &Epid) -> bool {
        self.registered.contains(epid)
    }

    pub fn ssv_measurement(&self) -> SsvToken {
        self.ssv_measurement
    }

    /// Check both identities. The enclave is checked first.
    pub fn verify(&mut self, cred: &EnclaveCredential, token: &SsvToken) -> Result<(), ChannelError> {
        if !self.registered.contains(&cred.epid) {
            self.rejected_enclave += 1;
            return Err(ChannelError::AuthFailEnclave);
        }
        if *token != self.ssv_measurement {
            self.rejected_ssv += 1;
            return Err(ChannelError::AuthFailSsv);
        }
        self.verified += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verification_outcomes() {
        let mut ca = CertificateAuthority::new(b"ssv image");
        let epid = [1u8; 16];
        ca.register(epid);
        let good = measure(b"ssv image");
        assert_eq!(ca.verify(&EnclaveCredential { epid }, &good), Ok(()));
        assert_eq!(ca.verify(&EnclaveCredential { epid }, &measure(b"evil")), Err(ChannelError::AuthFailSsv));
        assert_eq!(ca.verify(&EnclaveCredential { epid: [2; 16] }, &good), Err(ChannelError::AuthFailEnclave));
    }
}
