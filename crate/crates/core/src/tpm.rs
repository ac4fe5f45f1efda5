//! Software stand-in for a TPM 2.0 key hierarchy.
//!
//! A persistent storage root key (SRK) wraps user storage keys, which wrap
//! relying-party P-256 signing keys. Keys leave the device only as
//! [`KeyData`] blobs. Nothing here panics or returns `Result`: failures come
//! back as a non-zero status or empty values, with the reason available once
//! through [`Tpm::get_last_error`].
//!
//! Blob layout: `private_data = nonce(12) || AES-256-GCM(parent,
//! key || SHA-256(auth) || label)` with `public_data` as associated data.
//! This is not interchangeable with real TPM2B blobs.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use p256::ecdsa::signature::hazmat::RandomizedPrehashSigner;
use p256::ecdsa::{Signature, SigningKey};
use p256::SecretKey;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

pub const STATUS_OK: u32 = 0;
pub const STATUS_FAILURE: u32 = 1;

pub const SRK_FILE: &str = "srk.bin";
const NONCE_LEN: usize = 12;
const MAX_DIGEST: usize = 32;

/// Size-prefixed opaque bytes. Size 0 means no data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ByteArray {
    data: Vec<u8>,
}

impl ByteArray {
    pub fn new(data: impl Into<Vec<u8>>) -> ByteArray {
        ByteArray { data: data.into() }
    }

    pub fn empty() -> ByteArray {
        ByteArray::default()
    }

    /// Saturates for oversized buffers; the TPM rejects those before use.
    pub fn size(&self) -> u16 {
        u16::try_from(self.data.len()).unwrap_or(u16::MAX)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn fits(&self) -> bool {
        self.data.len() <= u16::MAX as usize
    }
}

impl From<&str> for ByteArray {
    fn from(s: &str) -> Self {
        ByteArray::new(s.as_bytes())
    }
}

impl From<&[u8]> for ByteArray {
    fn from(s: &[u8]) -> Self {
        ByteArray::new(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyData {
    pub public_data: ByteArray,
    pub private_data: ByteArray,
}

impl KeyData {
    pub fn is_empty(&self) -> bool {
        self.public_data.is_empty() && self.private_data.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyEccPoint {
    pub x_coord: ByteArray,
    pub y_coord: ByteArray,
}

impl KeyEccPoint {
    pub fn is_empty(&self) -> bool {
        self.x_coord.is_empty() && self.y_coord.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelyingPartyKey {
    pub key_blob: KeyData,
    pub key_point: KeyEccPoint,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EcdsaSig {
    pub sig_r: ByteArray,
    pub sig_s: ByteArray,
}

impl EcdsaSig {
    pub fn is_empty(&self) -> bool {
        self.sig_r.is_empty() && self.sig_s.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Error = 1,
    Info = 2,
    Full = 3,
}

struct LoadedUser {
    label: Vec<u8>,
    key: Zeroizing<[u8; 32]>,
    auth_digest: [u8; 32],
}

struct LoadedRp {
    label: Vec<u8>,
    signing: SigningKey,
    auth_digest: [u8; 32],
}

pub struct Tpm {
    srk: Option<Zeroizing<[u8; 32]>>,
    user: Option<LoadedUser>,
    rp: Option<LoadedRp>,
    last_error: String,
    log_level: LogLevel,
    log: Option<File>,
    log_path: Option<PathBuf>,
    rng: ChaCha20Rng,
}

impl Default for Tpm {
    fn default() -> Self {
        Tpm::new()
    }
}

fn auth_digest(auth: &ByteArray) -> [u8; 32] {
    Sha256::digest(auth.data()).into()
}

fn storage_commitment(key: &[u8; 32]) -> Vec<u8> {
    Sha256::new()
        .chain_update(b"storage-key")
        .chain_update(key)
        .finalize()
        .to_vec()
}

fn sec1_point(signing: &SigningKey) -> Vec<u8> {
    signing.verifying_key().to_encoded_point(false).as_bytes().to_vec()
}

fn point_from_sec1(sec1: &[u8]) -> KeyEccPoint {
    KeyEccPoint { x_coord: ByteArray::new(&sec1[1..33]), y_coord: ByteArray::new(&sec1[33..65]) }
}

impl Tpm {
    pub fn new() -> Tpm {
        Tpm::with_rng(ChaCha20Rng::from_entropy())
    }

    pub fn with_seed(seed: u64) -> Tpm {
        Tpm::with_rng(ChaCha20Rng::seed_from_u64(seed))
    }

    fn with_rng(rng: ChaCha20Rng) -> Tpm {
        Tpm {
            srk: None,
            user: None,
            rp: None,
            last_error: String::new(),
            log_level: LogLevel::Info,
            log: None,
            log_path: None,
            rng,
        }
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn log(&mut self, level: LogLevel, msg: &str) {
        if level > self.log_level {
            return;
        }
        if let Some(f) = self.log.as_mut() {
            let tag = match level {
                LogLevel::Error => "ERROR",
                LogLevel::Info => "INFO",
                LogLevel::Full => "TRACE",
            };
            let _ = writeln!(f, "{} {tag} {msg}", chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ"));
        }
    }

    fn fail(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        self.log(LogLevel::Error, &msg);
        self.last_error = msg;
    }

    fn seal(&mut self, parent: &[u8; 32], key: &[u8], auth: &[u8; 32], label: &[u8], public: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        self.rng.fill_bytes(&mut nonce);
        let mut plain = Zeroizing::new(Vec::with_capacity(key.len() + 32 + label.len()));
        plain.extend_from_slice(key);
        plain.extend_from_slice(auth);
        plain.extend_from_slice(label);
        let cipher = Aes256Gcm::new(parent.into());
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: &plain, aad: public })
            .expect("in-memory AES-GCM encryption");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&ct);
        out
    }

    /// Returns (key, auth digest) after checking the label matches.
    fn unseal(parent: &[u8; 32], kd: &KeyData, label: &[u8]) -> Result<(Zeroizing<[u8; 32]>, [u8; 32]), String> {
        let blob = kd.private_data.data();
        if blob.len() < NONCE_LEN + 16 {
            return Err("unwrap failed: private data too short".into());
        }
        let cipher = Aes256Gcm::new(parent.into());
        let plain = Zeroizing::new(
            cipher
                .decrypt(
                    Nonce::from_slice(&blob[..NONCE_LEN]),
                    Payload { msg: &blob[NONCE_LEN..], aad: kd.public_data.data() },
                )
                .map_err(|_| "unwrap failed: blob was not created under this parent key".to_string())?,
        );
        if plain.len() < 64 {
            return Err("unwrap failed: malformed key material".into());
        }
        if !bool::from(plain[64..].ct_eq(label)) {
            return Err("key label does not match the blob".into());
        }
        let mut key = Zeroizing::new([0u8; 32]);
        key.copy_from_slice(&plain[..32]);
        let auth = plain[32..64].try_into().expect("32 bytes");
        Ok((key, auth))
    }

    /// Create or reload the SRK in `data_dir`. The TPM log goes to
    /// `log_file`, or `data_dir/tpm_log_<timestamp>` when none is given.
    pub fn setup(&mut self, data_dir: &Path, log_file: Option<&Path>) -> u32 {
        self.srk = None;
        self.user = None;
        self.rp = None;
        if let Err(e) = fs::create_dir_all(data_dir) {
            self.fail(format!("cannot create data directory {}: {e}", data_dir.display()));
            return STATUS_FAILURE;
        }
        let log_path = match log_file {
            Some(p) => p.to_path_buf(),
            None => data_dir.join(format!("tpm_log_{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.6f"))),
        };
        match OpenOptions::new().create(true).append(true).open(&log_path) {
            Ok(f) => {
                self.log = Some(f);
                self.log_path = Some(log_path);
            }
            Err(e) => {
                self.fail(format!("cannot open TPM log {}: {e}", log_path.display()));
                return STATUS_FAILURE;
            }
        }

        let srk_path = data_dir.join(SRK_FILE);
        let srk = match fs::read(&srk_path) {
            Ok(bytes) => match <[u8; 32]>::try_from(bytes.as_slice()) {
                Ok(k) => {
                    self.log(LogLevel::Info, "loaded persistent SRK");
                    Zeroizing::new(k)
                }
                Err(_) => {
                    self.fail(format!("SRK file {} is corrupt", srk_path.display()));
                    return STATUS_FAILURE;
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let mut k = Zeroizing::new([0u8; 32]);
                self.rng.fill_bytes(k.as_mut());
                if let Err(e) = write_private(&srk_path, k.as_ref()) {
                    self.fail(format!("cannot persist SRK to {}: {e}", srk_path.display()));
                    return STATUS_FAILURE;
                }
                self.log(LogLevel::Info, "created persistent SRK");
                k
            }
            Err(e) => {
                self.fail(format!("cannot read SRK {}: {e}", srk_path.display()));
                return STATUS_FAILURE;
            }
        };
        self.srk = Some(srk);
        STATUS_OK
    }

    pub fn create_and_load_user_key(&mut self, user: &ByteArray, key_auth: &ByteArray) -> KeyData {
        let Some(srk) = self.srk.clone() else {
            self.fail("TPM not set up");
            return KeyData::default();
        };
        if user.is_empty() || !user.fits() || !key_auth.fits() {
            self.fail("user label must be 1..=65535 bytes");
            return KeyData::default();
        }
        self.flush_slots();
        let mut key = Zeroizing::new([0u8; 32]);
        self.rng.fill_bytes(key.as_mut());
        let auth = auth_digest(key_auth);
        let public = storage_commitment(&key);
        let private = self.seal(&srk, key.as_ref(), &auth, user.data(), &public);
        self.user = Some(LoadedUser { label: user.data().to_vec(), key, auth_digest: auth });
        self.log(LogLevel::Info, &format!("created user key {}", hex::encode(user.data())));
        KeyData { public_data: ByteArray::new(public), private_data: ByteArray::new(private) }
    }

    /// Loading needs no authorisation; auth is checked when the user key is
    /// used as a parent.
    pub fn load_user_key(&mut self, kd: &KeyData, user: &ByteArray) -> u32 {
        let Some(srk) = self.srk.clone() else {
            self.fail("TPM not set up");
            return STATUS_FAILURE;
        };
        match Tpm::unseal(&srk, kd, user.data()) {
            Ok((key, auth)) => {
                if !bool::from(storage_commitment(&key).ct_eq(kd.public_data.data())) {
                    self.fail("user key public data does not match its private part");
                    return STATUS_FAILURE;
                }
                self.flush_slots();
                self.user = Some(LoadedUser { label: user.data().to_vec(), key, auth_digest: auth });
                self.log(LogLevel::Info, &format!("loaded user key {}", hex::encode(user.data())));
                STATUS_OK
            }
            Err(e) => {
                self.fail(format!("load_user_key: {e}"));
                STATUS_FAILURE
            }
        }
    }

    fn check_user_auth(&mut self, user_auth: &ByteArray) -> Option<Zeroizing<[u8; 32]>> {
        let Some(user) = self.user.as_ref() else {
            self.fail("no user key loaded");
            return None;
        };
        if !bool::from(user.auth_digest.ct_eq(&auth_digest(user_auth))) {
            self.fail("user key authorisation failed");
            return None;
        }
        Some(user.key.clone())
    }

    pub fn create_and_load_rp_key(&mut self, rp: &ByteArray, user_auth: &ByteArray, rp_key_auth: &ByteArray) -> RelyingPartyKey {
        if self.srk.is_none() {
            self.fail("TPM not set up");
            return RelyingPartyKey::default();
        }
        if rp.is_empty() || !rp.fits() || !rp_key_auth.fits() {
            self.fail("relying party label must be 1..=65535 bytes");
            return RelyingPartyKey::default();
        }
        let Some(parent) = self.check_user_auth(user_auth) else {
            return RelyingPartyKey::default();
        };
        let mut scalar = Zeroizing::new([0u8; 32]);
        let secret = loop {
            self.rng.fill_bytes(scalar.as_mut());
            if let Ok(s) = SecretKey::from_slice(scalar.as_ref()) {
                break s;
            }
        };
        let signing = SigningKey::from(&secret);
        let public = sec1_point(&signing);
        let auth = auth_digest(rp_key_auth);
        let private = self.seal(&parent, scalar.as_ref(), &auth, rp.data(), &public);
        self.rp = Some(LoadedRp { label: rp.data().to_vec(), signing, auth_digest: auth });
        self.log(LogLevel::Info, &format!("created rp key {}", String::from_utf8_lossy(rp.data())));
        self.log(LogLevel::Full, &format!("rp key public {}", hex::encode(&public)));
        RelyingPartyKey {
            key_point: point_from_sec1(&public),
            key_blob: KeyData { public_data: ByteArray::new(public), private_data: ByteArray::new(private) },
        }
    }

    pub fn load_rp_key(&mut self, kd: &KeyData, rp: &ByteArray, user_auth: &ByteArray) -> KeyEccPoint {
        if self.srk.is_none() {
            self.fail("TPM not set up");
            return KeyEccPoint::default();
        }
        let Some(parent) = self.check_user_auth(user_auth) else {
            return KeyEccPoint::default();
        };
        let (scalar, auth) = match Tpm::unseal(&parent, kd, rp.data()) {
            Ok(v) => v,
            Err(e) => {
                self.fail(format!("load_rp_key: {e}"));
                return KeyEccPoint::default();
            }
        };
        let Ok(secret) = SecretKey::from_slice(scalar.as_ref()) else {
            self.fail("load_rp_key: invalid key material");
            return KeyEccPoint::default();
        };
        let signing = SigningKey::from(&secret);
        let public = sec1_point(&signing);
        if public != kd.public_data.data() {
            self.fail("load_rp_key: public data does not match private part");
            return KeyEccPoint::default();
        }
        self.rp = Some(LoadedRp { label: rp.data().to_vec(), signing, auth_digest: auth });
        self.log(LogLevel::Full, &format!("loaded rp key {}", String::from_utf8_lossy(rp.data())));
        point_from_sec1(&public)
    }

    /// Raw ECDSA over `digest` as given (no hashing). Shorter digests are
    /// treated as left-padded integers.
    pub fn sign_using_rp_key(&mut self, rp: &ByteArray, digest: &ByteArray, rp_key_auth: &ByteArray) -> EcdsaSig {
        if digest.is_empty() || digest.data().len() > MAX_DIGEST {
            self.fail(format!("digest must be 1..={MAX_DIGEST} bytes, got {}", digest.data().len()));
            return EcdsaSig::default();
        }
        let Some(loaded) = self.rp.as_ref() else {
            self.fail("no relying party key loaded");
            return EcdsaSig::default();
        };
        if loaded.label != rp.data() {
            self.fail("loaded relying party key has a different label");
            return EcdsaSig::default();
        }
        if !bool::from(loaded.auth_digest.ct_eq(&auth_digest(rp_key_auth))) {
            self.fail("relying party key authorisation failed");
            return EcdsaSig::default();
        }
        let mut prehash = [0u8; 32];
        prehash[32 - digest.data().len()..].copy_from_slice(digest.data());
        let signing = loaded.signing.clone();
        let sig: Signature = match signing.sign_prehash_with_rng(&mut self.rng, &prehash) {
            Ok(s) => s,
            Err(e) => {
                self.fail(format!("signing failed: {e}"));
                return EcdsaSig::default();
            }
        };
        let (r, s) = sig.split_bytes();
        self.log(LogLevel::Full, &format!("signed digest {}", hex::encode(digest.data())));
        EcdsaSig { sig_r: ByteArray::new(r.to_vec()), sig_s: ByteArray::new(s.to_vec()) }
    }

    fn flush_slots(&mut self) {
        self.user = None;
        self.rp = None;
    }

    pub fn flush_data(&mut self) -> u32 {
        self.flush_slots();
        self.log(LogLevel::Info, "flushed loaded keys");
        STATUS_OK
    }

    /// Returns the last error and clears it.
    pub fn get_last_error(&mut self) -> String {
        std::mem::take(&mut self.last_error)
    }

    pub fn set_log_level(&mut self, level: u8) -> u32 {
        self.log_level = match level {
            1 => LogLevel::Error,
            2 => LogLevel::Info,
            3 => LogLevel::Full,
            other => {
                self.fail(format!("log level must be 1, 2 or 3, got {other}"));
                return STATUS_FAILURE;
            }
        };
        STATUS_OK
    }

    pub fn user_loaded(&self) -> bool {
        self.user.is_some()
    }

    pub fn loaded_user_label(&self) -> Option<&[u8]> {
        self.user.as_ref().map(|u| u.label.as_slice())
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}
