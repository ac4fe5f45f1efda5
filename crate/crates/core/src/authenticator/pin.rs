//! PIN protocol version 1 primitives, shared by authenticator and platform.
//!
//! sharedSecret = SHA-256(x-coordinate of ECDH); pinAuth = first 16 bytes of
//! HMAC-SHA-256; transport encryption is AES-256-CBC with a zero IV and no
//! padding.

use aes::cipher::{block_padding::NoPadding, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

use crate::cbor::cose::{CoseKey, ALG_ECDH_ES_HKDF_256};
use crate::crypto::es256::Es256PrivateKey;

pub const PIN_PROTOCOL_V1: u8 = 1;
pub const MAX_RETRIES: u8 = 8;
pub const PIN_TOKEN_LEN: usize = 16;
pub const MIN_PIN_LEN: usize = 4;
pub const MAX_PIN_LEN: usize = 63;
/// newPinEnc carries the PIN zero-padded to this many bytes.
pub const PADDED_PIN_LEN: usize = 64;

const ZERO_IV: [u8; 16] = [0; 16];

pub fn shared_secret(ecdh_x: &[u8; 32]) -> Zeroizing<[u8; 32]> {
    Zeroizing::new(Sha256::digest(ecdh_x).into())
}

pub fn pin_auth(key: &[u8], message: &[u8]) -> [u8; 16] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("any key length");
    mac.update(message);
    mac.finalize().into_bytes()[..16].try_into().expect("16 bytes")
}

pub fn verify_pin_auth(key: &[u8], message: &[u8], candidate: &[u8; 16]) -> bool {
    pin_auth(key, message).ct_eq(candidate).into()
}

/// Returns None unless `data` is a whole number of blocks.
pub fn encrypt(key: &[u8; 32], data: &[u8]) -> Option<Vec<u8>> {
    if data.len() % 16 != 0 {
        return None;
    }
    Some(cbc::Encryptor::<aes::Aes256>::new(key.into(), (&ZERO_IV).into()).encrypt_padded_vec_mut::<NoPadding>(data))
}

pub fn decrypt(key: &[u8; 32], data: &[u8]) -> Option<Zeroizing<Vec<u8>>> {
    if data.is_empty() || data.len() % 16 != 0 {
        return None;
    }
    cbc::Decryptor::<aes::Aes256>::new(key.into(), (&ZERO_IV).into())
        .decrypt_padded_vec_mut::<NoPadding>(data)
        .ok()
        .map(Zeroizing::new)
}

/// First 16 bytes of SHA-256(PIN).
pub fn pin_hash(pin: &[u8]) -> [u8; 16] {
    Sha256::digest(pin)[..16].try_into().expect("16 bytes")
}

pub fn pad_pin(pin: &[u8]) -> Option<Zeroizing<Vec<u8>>> {
    if pin.len() < MIN_PIN_LEN || pin.len() > MAX_PIN_LEN {
        return None;
    }
    let mut out = Zeroizing::new(vec![0u8; PADDED_PIN_LEN]);
    out[..pin.len()].copy_from_slice(pin);
    Some(out)
}

/// Strip the zero padding. The PIN itself may not contain NUL bytes.
pub fn unpad_pin(padded: &[u8]) -> &[u8] {
    let end = padded.iter().position(|&b| b == 0).unwrap_or(padded.len());
    &padded[..end]
}

/// Per power-up PIN state: the key agreement pair and the PIN token.
pub struct PinSession {
    key_agreement: Es256PrivateKey,
    pin_token: Zeroizing<[u8; PIN_TOKEN_LEN]>,
}

impl PinSession {
    pub fn new(rng: &mut dyn RngCore) -> PinSession {
        let mut token = Zeroizing::new([0u8; PIN_TOKEN_LEN]);
        rng.fill_bytes(token.as_mut());
        PinSession { key_agreement: Es256PrivateKey::random(rng, ALG_ECDH_ES_HKDF_256), pin_token: token }
    }

    pub fn key_agreement_public(&self) -> CoseKey {
        self.key_agreement.cose_with_alg(ALG_ECDH_ES_HKDF_256)
    }

    pub fn regenerate_key_agreement(&mut self, rng: &mut dyn RngCore) {
        self.key_agreement = Es256PrivateKey::random(rng, ALG_ECDH_ES_HKDF_256);
    }

    pub fn shared_secret_with(&self, platform: &CoseKey) -> Zeroizing<[u8; 32]> {
        shared_secret(&self.key_agreement.ecdh_x(platform))
    }

    pub fn pin_token(&self) -> &[u8; PIN_TOKEN_LEN] {
        &self.pin_token
    }

    pub fn verify_token_auth(&self, message: &[u8], candidate: &[u8; 16]) -> bool {
        verify_pin_auth(self.pin_token.as_ref(), message, candidate)
    }
}

/// The platform half: an ephemeral key pair and the secret shared with a
/// given authenticator key agreement key.
pub struct PlatformKeyAgreement {
    key: Es256PrivateKey,
    shared: Zeroizing<[u8; 32]>,
}

impl PlatformKeyAgreement {
    pub fn new(rng: &mut dyn RngCore, authenticator_key: &CoseKey) -> Self {
        let key = Es256PrivateKey::random(rng, ALG_ECDH_ES_HKDF_256);
        let shared = shared_secret(&key.ecdh_x(authenticator_key));
        PlatformKeyAgreement { key, shared }
    }

    pub fn public(&self) -> CoseKey {
        self.key.cose_with_alg(ALG_ECDH_ES_HKDF_256)
    }

    pub fn shared_secret(&self) -> &[u8; 32] {
        &self.shared
    }
}
