//! ES256 provider whose keys live in the simulated TPM.
//!
//! One user storage key per provider, persisted as a blob in the TPM data
//! directory. Each credential gets its own RP key under it. The encoded
//! private key is a CBOR map {1: label, 2: public_data, 3: private_data,
//! 4: rp key auth}; it is only usable with the same SRK and user key.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::{der_from_raw, CryptoError, CryptoProvider, KeyContext, PrivateKey};
use crate::cbor::cose::{CoseKey, ALG_ES256};
use crate::cbor::value::{decode, MapBuilder, Value};
use crate::tpm::{ByteArray, KeyData, KeyEccPoint, Tpm, STATUS_OK};

struct Inner {
    tpm: Tpm,
    user_label: ByteArray,
    user_auth: ByteArray,
    user_blob: KeyData,
}

impl Inner {
    fn error(&mut self, context: &str) -> String {
        format!("{context}: {}", self.tpm.get_last_error())
    }

    fn ensure_user(&mut self) -> Result<(), CryptoError> {
        if self.tpm.loaded_user_label() == Some(self.user_label.data()) {
            return Ok(());
        }
        let blob = self.user_blob.clone();
        if self.tpm.load_user_key(&blob, &self.user_label) != STATUS_OK {
            return Err(CryptoError::Signing(self.error("load_user_key")));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct TpmEs256Provider {
    inner: Arc<Mutex<Inner>>,
    data_dir: PathBuf,
}

fn blob_path(data_dir: &Path, user: &[u8]) -> PathBuf {
    data_dir.join(format!("user_{}.blob", hex::encode(user)))
}

fn encode_key_data(kd: &KeyData) -> Vec<u8> {
    MapBuilder::new()
        .insert(1, kd.public_data.data())
        .insert(2, kd.private_data.data())
        .build()
        .to_vec()
}

fn decode_key_data(bytes: &[u8]) -> Option<KeyData> {
    let v = decode(bytes).ok()?;
    Some(KeyData {
        public_data: ByteArray::new(v.get_int(1)?.as_bytes()?),
        private_data: ByteArray::new(v.get_int(2)?.as_bytes()?),
    })
}

impl TpmEs256Provider {
    /// Set up the TPM in `data_dir` and load (or create and persist) the
    /// storage key for `user`.
    pub fn open(data_dir: &Path, user: &str, user_auth: &[u8], seed: Option<u64>) -> Result<Self, CryptoError> {
        let mut tpm = match seed {
            Some(s) => Tpm::with_seed(s),
            None => Tpm::new(),
        };
        if tpm.setup(data_dir, None) != STATUS_OK {
            return Err(CryptoError::Generation(format!("TPM setup: {}", tpm.get_last_error())));
        }
        let user_label = ByteArray::from(user);
        let user_auth = ByteArray::new(user_auth);
        let path = blob_path(data_dir, user.as_bytes());
        let user_blob = match fs::read(&path) {
            Ok(bytes) => {
                let kd = decode_key_data(&bytes)
                    .ok_or_else(|| CryptoError::BadEncoding(format!("{} is not a key blob", path.display())))?;
                if tpm.load_user_key(&kd, &user_label) != STATUS_OK {
                    return Err(CryptoError::BadEncoding(format!("load_user_key: {}", tpm.get_last_error())));
                }
                kd
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let kd = tpm.create_and_load_user_key(&user_label, &user_auth);
                if kd.is_empty() {
                    return Err(CryptoError::Generation(format!("create_and_load_user_key: {}", tpm.get_last_error())));
                }
                crate::storage::write_atomic(&path, &encode_key_data(&kd))
                    .map_err(|e| CryptoError::Generation(format!("persisting user key blob: {e}")))?;
                kd
            }
            Err(e) => return Err(CryptoError::Generation(format!("reading {}: {e}", path.display()))),
        };
        Ok(TpmEs256Provider {
            inner: Arc::new(Mutex::new(Inner { tpm, user_label, user_auth, user_blob })),
            data_dir: data_dir.to_path_buf(),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }
}

pub struct TpmPrivateKey {
    inner: Arc<Mutex<Inner>>,
    label: ByteArray,
    blob: KeyData,
    rp_auth: ByteArray,
    public: CoseKey,
}

fn cose_from_point(p: &KeyEccPoint) -> Result<CoseKey, CryptoError> {
    let x = p.x_coord.data().try_into().map_err(|_| CryptoError::BadEncoding("x coordinate".into()))?;
    let y = p.y_coord.data().try_into().map_err(|_| CryptoError::BadEncoding("y coordinate".into()))?;
    Ok(CoseKey { alg: ALG_ES256, x, y })
}

impl PrivateKey for TpmPrivateKey {
    fn alg(&self) -> i64 {
        ALG_ES256
    }

    fn public_key(&self) -> CoseKey {
        self.public.clone()
    }

    fn sign(&self, data: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let mut inner = self.inner.lock();
        inner.ensure_user()?;
        let user_auth = inner.user_auth.clone();
        if inner.tpm.load_rp_key(&self.blob, &self.label, &user_auth).is_empty() {
            return Err(CryptoError::Signing(inner.error("load_rp_key")));
        }
        let digest = ByteArray::new(Sha256::digest(data).to_vec());
        let sig = inner.tpm.sign_using_rp_key(&self.label, &digest, &self.rp_auth);
        if sig.is_empty() {
            return Err(CryptoError::Signing(inner.error("sign_using_rp_key")));
        }
        let r: [u8; 32] = sig.sig_r.data().try_into().map_err(|_| CryptoError::Signing("r length".into()))?;
        let s: [u8; 32] = sig.sig_s.data().try_into().map_err(|_| CryptoError::Signing("s length".into()))?;
        der_from_raw(&r, &s)
    }

    fn encoded(&self) -> Vec<u8> {
        MapBuilder::new()
            .insert(1, self.label.data())
            .insert(2, self.blob.public_data.data())
            .insert(3, self.blob.private_data.data())
            .insert(4, self.rp_auth.data())
            .build()
            .to_vec()
    }
}

impl CryptoProvider for TpmEs256Provider {
    fn alg(&self) -> i64 {
        ALG_ES256
    }

    fn name(&self) -> &'static str {
        "es256-tpm"
    }

    fn generate(&self, rng: &mut dyn RngCore, ctx: KeyContext<'_>) -> Result<Box<dyn PrivateKey>, CryptoError> {
        let mut auth = [0u8; 16];
        rng.fill_bytes(&mut auth);
        let label = ByteArray::from(ctx.rp_id);
        let rp_auth = ByteArray::new(auth);
        let mut inner = self.inner.lock();
        inner.ensure_user().map_err(|e| CryptoError::Generation(e.to_string()))?;
        let user_auth = inner.user_auth.clone();
        let key = inner.tpm.create_and_load_rp_key(&label, &user_auth, &rp_auth);
        if key.key_blob.is_empty() {
            return Err(CryptoError::Generation(inner.error("create_and_load_rp_key")));
        }
        let public = cose_from_point(&key.key_point)?;
        Ok(Box::new(TpmPrivateKey { inner: self.inner.clone(), label, blob: key.key_blob, rp_auth, public }))
    }

    fn load(&self, encoded: &[u8]) -> Result<Box<dyn PrivateKey>, CryptoError> {
        let bad = |what: &str| CryptoError::BadEncoding(format!("TPM key encoding: {what}"));
        let v: Value = decode(encoded).map_err(|e| bad(&e.to_string()))?;
        let field = |k: i128| v.get_int(k).and_then(Value::as_bytes).map(ByteArray::new).ok_or_else(|| bad("missing field"));
        let label = field(1)?;
        let blob = KeyData { public_data: field(2)?, private_data: field(3)? };
        let rp_auth = field(4)?;

        let mut inner = self.inner.lock();
        inner.ensure_user().map_err(|e| CryptoError::BadEncoding(e.to_string()))?;
        let user_auth = inner.user_auth.clone();
        let point = inner.tpm.load_rp_key(&blob, &label, &user_auth);
        if point.is_empty() {
            return Err(CryptoError::BadEncoding(inner.error("load_rp_key")));
        }
        let public = cose_from_point(&point)?;
        drop(inner);
        Ok(Box::new(TpmPrivateKey { inner: self.inner.clone(), label, blob, rp_auth, public }))
    }
}
