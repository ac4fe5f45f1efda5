//! authenticatorData: rpIdHash(32) || flags(1) || signCount(4, BE) ||
//! [aaguid(16) || credIdLen(2, BE) || credId || COSE key].

use sha2::{Digest, Sha256};

use crate::cbor::cose::CoseKey;
use crate::cbor::value::decode_prefix;

pub const FLAG_UP: u8 = 0x01;
pub const FLAG_UV: u8 = 0x04;
pub const FLAG_AT: u8 = 0x40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedCredential {
    pub aaguid: [u8; 16],
    pub credential_id: Vec<u8>,
    pub public_key: CoseKey,
}

pub fn rp_id_hash(rp_id: &str) -> [u8; 32] {
    Sha256::digest(rp_id.as_bytes()).into()
}

/// The AT flag is derived from `attested`; callers pass UP/UV only.
pub fn build_auth_data(rp_id: &str, flags: u8, counter: u32, attested: Option<&AttestedCredential>) -> Vec<u8> {
    let mut flags = flags & !FLAG_AT;
    if attested.is_some() {
        flags |= FLAG_AT;
    }
    let mut out = Vec::with_capacity(37 + attested.map_or(0, |a| 18 + a.credential_id.len() + 77));
    out.extend_from_slice(&rp_id_hash(rp_id));
    out.push(flags);
    out.extend_from_slice(&counter.to_be_bytes());
    if let Some(a) = attested {
        out.extend_from_slice(&a.aaguid);
        out.extend_from_slice(&(a.credential_id.len() as u16).to_be_bytes());
        out.extend_from_slice(&a.credential_id);
        out.extend_from_slice(&a.public_key.to_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAuthData {
    pub rp_id_hash: [u8; 32],
    pub flags: u8,
    pub counter: u32,
    pub attested: Option<AttestedCredential>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed authenticator data: {0}")]
pub struct AuthDataError(pub &'static str);

impl ParsedAuthData {
    pub fn parse(bytes: &[u8]) -> Result<ParsedAuthData, AuthDataError> {
        if bytes.len() < 37 {
            return Err(AuthDataError("shorter than 37 bytes"));
        }
        let rp_id_hash = bytes[..32].try_into().expect("32 bytes");
        let flags = bytes[32];
        let counter = u32::from_be_bytes(bytes[33..37].try_into().expect("4 bytes"));
        let rest = &bytes[37..];
        let attested = if flags & FLAG_AT != 0 {
            if rest.len() < 18 {
                return Err(AuthDataError("attested data truncated"));
            }
            let aaguid = rest[..16].try_into().expect("16 bytes");
            let id_len = u16::from_be_bytes([rest[16], rest[17]]) as usize;
            let id = rest.get(18..18 + id_len).ok_or(AuthDataError("credential id truncated"))?.to_vec();
            let key_bytes = &rest[18 + id_len..];
            let (key_value, used) = decode_prefix(key_bytes).map_err(|_| AuthDataError("public key is not CBOR"))?;
            if used != key_bytes.len() {
                return Err(AuthDataError("trailing bytes after public key"));
            }
            let public_key = CoseKey::from_value(&key_value).map_err(|_| AuthDataError("public key is not a P-256 COSE key"))?;
            Some(AttestedCredential { aaguid, credential_id: id, public_key })
        } else {
            if !rest.is_empty() {
                return Err(AuthDataError("trailing bytes without AT flag"));
            }
            None
        };
        Ok(ParsedAuthData { rp_id_hash, flags, counter, attested })
    }
}
