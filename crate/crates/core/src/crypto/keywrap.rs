//! AES key wrap with padding (RFC 5649) and the credential wrapper built on it.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

const AIV_PREFIX: [u8; 4] = [0xA6, 0x59, 0x59, 0xA6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum KeyWrapError {
    #[error("key encryption key must be 16, 24 or 32 bytes")]
    BadKekLength,
    #[error("nothing to wrap")]
    EmptyInput,
    #[error("wrapped data has an invalid length")]
    BadLength,
    #[error("integrity check failed")]
    IntegrityCheckFailed,
}

enum Kek {
    Aes128(aes::Aes128),
    Aes192(aes::Aes192),
    Aes256(aes::Aes256),
}

impl Kek {
    fn new(key: &[u8]) -> Result<Kek, KeyWrapError> {
        Ok(match key.len() {
            16 => Kek::Aes128(aes::Aes128::new(GenericArray::from_slice(key))),
            24 => Kek::Aes192(aes::Aes192::new(GenericArray::from_slice(key))),
            32 => Kek::Aes256(aes::Aes256::new(GenericArray::from_slice(key))),
            _ => return Err(KeyWrapError::BadKekLength),
        })
    }

    fn encrypt(&self, block: &mut [u8; 16]) {
        let b = GenericArray::from_mut_slice(block);
        match self {
            Kek::Aes128(c) => c.encrypt_block(b),
            Kek::Aes192(c) => c.encrypt_block(b),
            Kek::Aes256(c) => c.encrypt_block(b),
        }
    }

    fn decrypt(&self, block: &mut [u8; 16]) {
        let b = GenericArray::from_mut_slice(block);
        match self {
            Kek::Aes128(c) => c.decrypt_block(b),
            Kek::Aes192(c) => c.decrypt_block(b),
            Kek::Aes256(c) => c.decrypt_block(b),
        }
    }
}

pub fn wrap_with_padding(kek: &[u8], plaintext: &[u8]) -> Result<Vec<u8>, KeyWrapError> {
    let cipher = Kek::new(kek)?;
    if plaintext.is_empty() {
        return Err(KeyWrapError::EmptyInput);
    }
    let mli = u32::try_from(plaintext.len()).map_err(|_| KeyWrapError::BadLength)?;
    let mut aiv = [0u8; 8];
    aiv[..4].copy_from_slice(&AIV_PREFIX);
    aiv[4..].copy_from_slice(&mli.to_be_bytes());

    let padded_len = plaintext.len().div_ceil(8) * 8;
    let mut padded = Zeroizing::new(vec![0u8; padded_len]);
    padded[..plaintext.len()].copy_from_slice(plaintext);

    let mut block = [0u8; 16];
    if padded_len == 8 {
        block[..8].copy_from_slice(&aiv);
        block[8..].copy_from_slice(&padded);
        cipher.encrypt(&mut block);
        return Ok(block.to_vec());
    }

    let n = padded_len / 8;
    let mut a = aiv;
    let mut r = padded;
    for j in 0..6u64 {
        for i in 0..n {
            block[..8].copy_from_slice(&a);
            block[8..].copy_from_slice(&r[i * 8..i * 8 + 8]);
            cipher.encrypt(&mut block);
            let t = (n as u64) * j + (i as u64 + 1);
            a.copy_from_slice(&block[..8]);
            for (x, y) in a.iter_mut().zip(t.to_be_bytes()) {
                *x ^= y;
            }
            r[i * 8..i * 8 + 8].copy_from_slice(&block[8..]);
        }
    }
    let mut out = a.to_vec();
    out.extend_from_slice(&r);
    Ok(out)
}

pub fn unwrap_with_padding(kek: &[u8], wrapped: &[u8]) -> Result<Vec<u8>, KeyWrapError> {
    let cipher = Kek::new(kek)?;
    if wrapped.len() < 16 || wrapped.len() % 8 != 0 {
        return Err(KeyWrapError::BadLength);
    }
    let n = wrapped.len() / 8 - 1;
    let mut a = [0u8; 8];
    let mut r = Zeroizing::new(vec![0u8; n * 8]);
    let mut block = Zeroizing::new([0u8; 16]);

    if n == 1 {
        block.copy_from_slice(wrapped);
        cipher.decrypt(&mut block);
        a.copy_from_slice(&block[..8]);
        r.copy_from_slice(&block[8..]);
    } else {
        a.copy_from_slice(&wrapped[..8]);
        r.copy_from_slice(&wrapped[8..]);
        for j in (0..6u64).rev() {
            for i in (0..n).rev() {
                let t = (n as u64) * j + (i as u64 + 1);
                for (x, y) in a.iter_mut().zip(t.to_be_bytes()) {
                    *x ^= y;
                }
                block[..8].copy_from_slice(&a);
                block[8..].copy_from_slice(&r[i * 8..i * 8 + 8]);
                cipher.decrypt(&mut block);
                a.copy_from_slice(&block[..8]);
                r[i * 8..i * 8 + 8].copy_from_slice(&block[8..]);
            }
        }
    }

    let prefix_ok = a[..4].ct_eq(&AIV_PREFIX);
    let mli = u32::from_be_bytes(a[4..].try_into().expect("4 bytes")) as usize;
    let len_ok = mli > 8 * (n - 1) && mli <= 8 * n;
    if !bool::from(prefix_ok) || !len_ok {
        return Err(KeyWrapError::IntegrityCheckFailed);
    }
    if r[mli..].iter().any(|&b| b != 0) {
        return Err(KeyWrapError::IntegrityCheckFailed);
    }
    Ok(r[..mli].to_vec())
}

/// Wraps serialized credential sources into credential ids under a
/// device-lifetime 256-bit key.
#[derive(Clone)]
pub struct CredentialWrapper {
    key: Zeroizing<[u8; 32]>,
}

impl CredentialWrapper {
    pub fn new(key: [u8; 32]) -> Self {
        CredentialWrapper { key: Zeroizing::new(key) }
    }

    pub fn wrap(&self, plaintext: &[u8]) -> Result<Vec<u8>, KeyWrapError> {
        wrap_with_padding(self.key.as_ref(), plaintext)
    }

    pub fn unwrap(&self, wrapped: &[u8]) -> Result<Vec<u8>, KeyWrapError> {
        unwrap_with_padding(self.key.as_ref(), wrapped)
    }
}

impl std::fmt::Debug for CredentialWrapper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CredentialWrapper { .. }")
    }
}
