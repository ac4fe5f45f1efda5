//! Software ES256: P-256 keys held in memory, PKCS#8 for storage.

use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey};
use p256::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::SecretKey;
use rand::RngCore;

use super::{CryptoError, CryptoProvider, KeyContext, PrivateKey};
use crate::cbor::cose::{CoseKey, ALG_ES256};

#[derive(Debug, Clone, Copy, Default)]
pub struct Es256Provider;

pub struct Es256PrivateKey {
    secret: SecretKey,
    alg: i64,
}

impl Es256PrivateKey {
    /// Draw scalars from `rng` until one is valid (non-zero and below n).
    pub fn random(rng: &mut dyn RngCore, alg: i64) -> Self {
        let mut bytes = zeroize::Zeroizing::new([0u8; 32]);
        loop {
            rng.fill_bytes(bytes.as_mut());
            if let Ok(secret) = SecretKey::from_slice(bytes.as_ref()) {
                return Es256PrivateKey { secret, alg };
            }
        }
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }

    /// x-coordinate of ECDH with a peer point.
    pub fn ecdh_x(&self, peer: &CoseKey) -> [u8; 32] {
        let shared = p256::ecdh::diffie_hellman(self.secret.to_nonzero_scalar(), peer.to_affine());
        (*shared.raw_secret_bytes()).into()
    }

    pub fn cose_with_alg(&self, alg: i64) -> CoseKey {
        let point = self.secret.public_key().to_encoded_point(false);
        CoseKey {
            alg,
            x: point.x().expect("uncompressed").as_slice().try_into().expect("32 bytes"),
            y: point.y().expect("uncompressed").as_slice().try_into().expect("32 bytes"),
        }
    }
}

impl PrivateKey for Es256PrivateKey {
    fn alg(&self) -> i64 {
        self.alg
    }

    fn public_key(&self) -> CoseKey {
        self.cose_with_alg(self.alg)
    }

    // RFC 6979 nonces: same key and data give the same signature.
    fn sign(&self, data: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let sig: Signature = SigningKey::from(&self.secret).sign(data);
        Ok(sig.to_der().as_bytes().to_vec())
    }

    fn encoded(&self) -> Vec<u8> {
        self.secret
            .to_pkcs8_der()
            .expect("P-256 keys always encode")
            .as_bytes()
            .to_vec()
    }
}

impl CryptoProvider for Es256Provider {
    fn alg(&self) -> i64 {
        ALG_ES256
    }

    fn name(&self) -> &'static str {
        "es256-software"
    }

    fn generate(&self, rng: &mut dyn RngCore, _ctx: KeyContext<'_>) -> Result<Box<dyn PrivateKey>, CryptoError> {
        Ok(Box::new(Es256PrivateKey::random(rng, ALG_ES256)))
    }

    fn load(&self, encoded: &[u8]) -> Result<Box<dyn PrivateKey>, CryptoError> {
        let secret = SecretKey::from_pkcs8_der(encoded).map_err(|e| CryptoError::BadEncoding(e.to_string()))?;
        Ok(Box::new(Es256PrivateKey { secret, alg: ALG_ES256 }))
    }
}
