//! Crypto providers keyed by COSE algorithm id, plus the credential wrapper
//! used for non-resident keys.

pub mod es256;
pub mod keywrap;
pub mod tpm_provider;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;

use crate::cbor::cose::CoseKey;

pub use es256::Es256Provider;
pub use keywrap::{CredentialWrapper, KeyWrapError};
pub use tpm_provider::TpmEs256Provider;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("algorithm {0} is not registered")]
    UnsupportedAlgorithm(i64),
    #[error("a provider for algorithm {0} is already registered")]
    DuplicateAlgorithm(i64),
    #[error("private key encoding rejected: {0}")]
    BadEncoding(String),
    #[error("signing failed: {0}")]
    Signing(String),
    #[error("key generation failed: {0}")]
    Generation(String),
}

/// Where a new key will be used. Providers that scope keys (the TPM one)
/// use the RP id as the key label.
#[derive(Debug, Clone, Copy)]
pub struct KeyContext<'a> {
    pub rp_id: &'a str,
}

/// Private half of a credential key pair. The public half is reachable
/// through [`PrivateKey::public_key`].
pub trait PrivateKey: Send + Sync {
    fn alg(&self) -> i64;
    fn public_key(&self) -> CoseKey;
    /// ECDSA over SHA-256(data), DER encoded.
    fn sign(&self, data: &[u8]) -> Result<Vec<u8>, CryptoError>;
    /// Serialized form accepted by the owning provider's `load`.
    fn encoded(&self) -> Vec<u8>;
}

pub trait CryptoProvider: Send + Sync {
    fn alg(&self) -> i64;
    fn name(&self) -> &'static str;
    fn generate(&self, rng: &mut dyn RngCore, ctx: KeyContext<'_>) -> Result<Box<dyn PrivateKey>, CryptoError>;
    fn load(&self, encoded: &[u8]) -> Result<Box<dyn PrivateKey>, CryptoError>;
}

#[derive(Clone, Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<i64, Arc<dyn CryptoProvider>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_provider(provider: Arc<dyn CryptoProvider>) -> Self {
        let mut registry = Self::new();
        registry.register(provider).expect("empty registry");
        registry
    }

    /// One provider per algorithm; a second registration is refused.
    pub fn register(&mut self, provider: Arc<dyn CryptoProvider>) -> Result<(), CryptoError> {
        let alg = provider.alg();
        if self.providers.contains_key(&alg) {
            return Err(CryptoError::DuplicateAlgorithm(alg));
        }
        self.providers.insert(alg, provider);
        Ok(())
    }

    pub fn get(&self, alg: i64) -> Result<&Arc<dyn CryptoProvider>, CryptoError> {
        self.providers.get(&alg).ok_or(CryptoError::UnsupportedAlgorithm(alg))
    }

    pub fn supports(&self, alg: i64) -> bool {
        self.providers.contains_key(&alg)
    }

    pub fn algorithms(&self) -> Vec<i64> {
        self.providers.keys().copied().collect()
    }

    pub fn generate(&self, alg: i64, rng: &mut dyn RngCore, ctx: KeyContext<'_>) -> Result<Box<dyn PrivateKey>, CryptoError> {
        self.get(alg)?.generate(rng, ctx)
    }

    pub fn load(&self, alg: i64, encoded: &[u8]) -> Result<Box<dyn PrivateKey>, CryptoError> {
        self.get(alg)?.load(encoded)
    }
}

impl std::fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.providers.iter().map(|(k, v)| (k, v.name())))
            .finish()
    }
}

/// DER `SEQUENCE { INTEGER r, INTEGER s }` from raw 32-byte scalars.
pub fn der_from_raw(r: &[u8; 32], s: &[u8; 32]) -> Result<Vec<u8>, CryptoError> {
    let sig = p256::ecdsa::Signature::from_scalars(*r, *s).map_err(|e| CryptoError::Signing(e.to_string()))?;
    Ok(sig.to_der().as_bytes().to_vec())
}
