//! Authenticator state persistence.
//!
//! One JSON document holds the global signature counter, the credential
//! wrap key, the PIN record and per-RP credential lists (creation order).
//! The encrypted backend stores `salt(16) || iterations(4, BE) || envelope`
//! where the envelope is `0x80 || timestamp(8, BE) || iv(16) ||
//! AES-128-CBC-PKCS7(ciphertext) || HMAC-SHA-256(all preceding)`, keyed by
//! PBKDF2-HMAC-SHA256(password, salt): first 16 bytes sign, last 16 encrypt.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use crate::credential::CredentialSource;

pub const DOCUMENT_VERSION: u32 = 1;
pub const DEFAULT_KDF_ITERATIONS: u32 = 600_000;
pub const MAX_KDF_ITERATIONS: u32 = 2_000_000;
pub const SALT_LEN: usize = 16;
const HEADER_LEN: usize = SALT_LEN + 4;
const ENVELOPE_VERSION: u8 = 0x80;
const TAG_LEN: usize = 32;
const MIN_ENVELOPE: usize = 1 + 8 + 16 + 16 + TAG_LEN;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("storage i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("storage file is not in the expected format: {0}")]
    Format(String),
    #[error("storage authentication failed (wrong password or tampered file)")]
    Authentication,
    #[error("storage file {0} is already open in this process")]
    AlreadyOpen(PathBuf),
    #[error("a storage password must not be empty")]
    EmptyPassword,
    #[error("credential id already present")]
    DuplicateCredential,
    #[error("signature counter exhausted")]
    CounterExhausted,
}

impl StorageError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        StorageError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinRecord {
    #[serde(with = "hex")]
    pub pin_hash: [u8; 16],
    pub retries: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreDocument {
    pub version: u32,
    pub signature_counter: u64,
    #[serde(with = "hex")]
    pub wrap_key: [u8; 32],
    pub client_pin: Option<PinRecord>,
    /// rpId -> hex-encoded serialized credential sources, oldest first.
    pub credentials: BTreeMap<String, Vec<String>>,
}

impl StoreDocument {
    pub fn fresh(wrap_key: [u8; 32]) -> Self {
        StoreDocument {
            version: DOCUMENT_VERSION,
            signature_counter: 0,
            wrap_key,
            client_pin: None,
            credentials: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("document serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, StorageError> {
        let doc: StoreDocument = serde_json::from_slice(bytes).map_err(|e| StorageError::Format(e.to_string()))?;
        if doc.version != DOCUMENT_VERSION {
            return Err(StorageError::Format(format!("unsupported document version {}", doc.version)));
        }
        Ok(doc)
    }

    fn contains_id(&self, id: &[u8]) -> bool {
        let needle = hex::encode(id);
        self.credentials.values().flatten().any(|entry| {
            hex::decode(entry)
                .ok()
                .and_then(|b| CredentialSource::deserialize(&b).ok())
                .is_some_and(|s| hex::encode(&s.id) == needle)
        })
    }
}

/// Storage abstraction used by the authenticator. Implementors provide the
/// current document and an all-or-nothing `commit`; mutations only become
/// visible once the commit has succeeded.
pub trait AuthenticatorStorage: Send {
    fn document(&self) -> &StoreDocument;
    fn commit(&mut self, doc: StoreDocument) -> Result<(), StorageError>;

    fn counter(&self) -> u64 {
        self.document().signature_counter
    }

    fn increment_counter(&mut self) -> Result<u64, StorageError> {
        let mut doc = self.document().clone();
        doc.signature_counter = doc.signature_counter.checked_add(1).ok_or(StorageError::CounterExhausted)?;
        let value = doc.signature_counter;
        self.commit(doc)?;
        Ok(value)
    }

    fn wrap_key(&self) -> [u8; 32] {
        self.document().wrap_key
    }

    fn set_wrap_key(&mut self, key: [u8; 32]) -> Result<(), StorageError> {
        let mut doc = self.document().clone();
        doc.wrap_key = key;
        self.commit(doc)
    }

    fn pin_record(&self) -> Option<PinRecord> {
        self.document().client_pin
    }

    fn set_pin_record(&mut self, record: Option<PinRecord>) -> Result<(), StorageError> {
        let mut doc = self.document().clone();
        doc.client_pin = record;
        self.commit(doc)
    }

    fn add_credential_source(&mut self, source: &CredentialSource) -> Result<(), StorageError> {
        if source.id.is_empty() {
            return Err(StorageError::Format("credential id must not be empty".into()));
        }
        if self.document().contains_id(&source.id) {
            return Err(StorageError::DuplicateCredential);
        }
        let mut doc = self.document().clone();
        doc.credentials
            .entry(source.rp_id.clone())
            .or_default()
            .push(hex::encode(source.serialize()));
        self.commit(doc)
    }

    /// Credentials for `rp_id`, most recent first, optionally restricted to
    /// the ids in `allow`.
    fn credential_sources(&self, rp_id: &str, allow: Option<&[Vec<u8>]>) -> Vec<CredentialSource> {
        let Some(list) = self.document().credentials.get(rp_id) else {
            return Vec::new();
        };
        list.iter()
            .rev()
            .filter_map(|entry| hex::decode(entry).ok())
            .filter_map(|bytes| CredentialSource::deserialize(&bytes).ok())
            .filter(|s| allow.is_none_or(|ids| ids.iter().any(|id| *id == s.id)))
            .collect()
    }

    /// Check a password against the one protecting the store, for
    /// password-based user verification.
    fn verify_password(&self, _password: &str) -> bool {
        false
    }

    /// Clear credentials and PIN, install a new wrap key, zero the counter.
    fn reset_document(&mut self, new_wrap_key: [u8; 32]) -> Result<(), StorageError> {
        self.commit(StoreDocument::fresh(new_wrap_key))
    }
}

/// Volatile storage for tests and throwaway devices.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    doc: StoreDocument,
}

impl MemoryStore {
    pub fn new(wrap_key: [u8; 32]) -> Self {
        MemoryStore { doc: StoreDocument::fresh(wrap_key) }
    }
}

impl AuthenticatorStorage for MemoryStore {
    fn document(&self) -> &StoreDocument {
        &self.doc
    }

    fn commit(&mut self, doc: StoreDocument) -> Result<(), StorageError> {
        self.doc = doc;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Key derivation and envelope

pub fn derive_storage_key(password: &str, salt: &[u8; SALT_LEN], iterations: u32) -> Result<Zeroizing<[u8; 32]>, StorageError> {
    if password.is_empty() {
        return Err(StorageError::EmptyPassword);
    }
    let mut key = Zeroizing::new([0u8; 32]);
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, key.as_mut());
    Ok(key)
}

pub fn seal_envelope(key: &[u8; 32], timestamp: u64, iv: &[u8; 16], plaintext: &[u8]) -> Vec<u8> {
    let (sign_key, enc_key) = key.split_at(16);
    let ct = cbc::Encryptor::<aes::Aes128>::new(enc_key.into(), iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mut out = Vec::with_capacity(1 + 8 + 16 + ct.len() + TAG_LEN);
    out.push(ENVELOPE_VERSION);
    out.extend_from_slice(&timestamp.to_be_bytes());
    out.extend_from_slice(iv);
    out.extend_from_slice(&ct);
    let mut mac = HmacSha256::new_from_slice(sign_key).expect("any key length");
    mac.update(&out);
    out.extend_from_slice(&mac.finalize().into_bytes());
    out
}

/// Verifies the tag before looking at anything else.
pub fn open_envelope(key: &[u8; 32], envelope: &[u8]) -> Result<Zeroizing<Vec<u8>>, StorageError> {
    if envelope.len() < MIN_ENVELOPE || (envelope.len() - 1 - 8 - 16 - TAG_LEN) % 16 != 0 {
        return Err(StorageError::Format("envelope has an invalid length".into()));
    }
    let (sign_key, enc_key) = key.split_at(16);
    let (body, tag) = envelope.split_at(envelope.len() - TAG_LEN);
    let mut mac = HmacSha256::new_from_slice(sign_key).expect("any key length");
    mac.update(body);
    mac.verify_slice(tag).map_err(|_| StorageError::Authentication)?;
    if body[0] != ENVELOPE_VERSION {
        return Err(StorageError::Format(format!("unknown envelope version 0x{:02X}", body[0])));
    }
    let iv: [u8; 16] = body[9..25].try_into().expect("16 bytes");
    let pt = cbc::Decryptor::<aes::Aes128>::new(enc_key.into(), (&iv).into())
        .decrypt_padded_vec_mut::<Pkcs7>(&body[25..])
        .map_err(|_| StorageError::Format("bad padding".into()))?;
    Ok(Zeroizing::new(pt))
}

// ---------------------------------------------------------------------------
// File backend

pub enum Backend {
    Plaintext,
    Encrypted { password: Zeroizing<String>, iterations: u32 },
}

impl Backend {
    pub fn encrypted(password: &str) -> Backend {
        Backend::Encrypted { password: Zeroizing::new(password.to_owned()), iterations: DEFAULT_KDF_ITERATIONS }
    }

    pub fn encrypted_with_iterations(password: &str, iterations: u32) -> Backend {
        Backend::Encrypted { password: Zeroizing::new(password.to_owned()), iterations }
    }
}

enum Codec {
    Plain,
    Sealed { key: Zeroizing<[u8; 32]>, salt: [u8; SALT_LEN], iterations: u32 },
}

impl Codec {
    fn encode(&self, doc: &StoreDocument) -> Vec<u8> {
        let json = Zeroizing::new(doc.to_json());
        match self {
            Codec::Plain => json.to_vec(),
            Codec::Sealed { key, salt, iterations } => {
                let mut iv = [0u8; 16];
                rand::rngs::OsRng.fill_bytes(&mut iv);
                let ts = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                let mut out = salt.to_vec();
                out.extend_from_slice(&iterations.to_be_bytes());
                out.extend_from_slice(&seal_envelope(key, ts, &iv, &json));
                out
            }
        }
    }
}

/// Decode an encrypted store file. Every header byte feeds the key
/// derivation, so a tampered header surfaces as an authentication failure.
pub fn decode_encrypted(bytes: &[u8], password: &str) -> Result<(StoreDocument, [u8; SALT_LEN], u32, Zeroizing<[u8; 32]>), StorageError> {
    if bytes.first() == Some(&b'{') {
        return Err(StorageError::Format("file is a plaintext store".into()));
    }
    if bytes.len() < HEADER_LEN + MIN_ENVELOPE {
        return Err(StorageError::Format("file too short for an encrypted store".into()));
    }
    let salt: [u8; SALT_LEN] = bytes[..SALT_LEN].try_into().expect("16 bytes");
    let iterations = u32::from_be_bytes(bytes[SALT_LEN..HEADER_LEN].try_into().expect("4 bytes"));
    if iterations == 0 || iterations > MAX_KDF_ITERATIONS {
        return Err(StorageError::Authentication);
    }
    let key = derive_storage_key(password, &salt, iterations)?;
    let json = open_envelope(&key, &bytes[HEADER_LEN..])?;
    Ok((StoreDocument::from_json(&json)?, salt, iterations, key))
}

static OPEN_PATHS: Mutex<BTreeSet<PathBuf>> = parking_lot::const_mutex(BTreeSet::new());

fn owner_key(path: &Path) -> PathBuf {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let dir = fs::canonicalize(parent).unwrap_or_else(|_| parent.to_path_buf());
    dir.join(path.file_name().unwrap_or_default())
}

struct OwnerGuard(PathBuf);

impl OwnerGuard {
    fn acquire(path: &Path) -> Result<Self, StorageError> {
        let key = owner_key(path);
        if !OPEN_PATHS.lock().insert(key.clone()) {
            return Err(StorageError::AlreadyOpen(key));
        }
        Ok(OwnerGuard(key))
    }
}

impl Drop for OwnerGuard {
    fn drop(&mut self) {
        OPEN_PATHS.lock().remove(&self.0);
    }
}

/// Write via a temporary sibling and rename, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let result = (|| {
        let mut f = opts.open(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Single-owner file store with write-through on every mutation.
pub struct FileStore {
    path: PathBuf,
    codec: Codec,
    doc: StoreDocument,
    _owner: OwnerGuard,
}

impl std::fmt::Debug for FileStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileStore").field("path", &self.path).finish_non_exhaustive()
    }
}

impl FileStore {
    /// Open `path`, or create it with a fresh document (new random wrap key)
    /// when missing.
    pub fn open_or_init(path: &Path, backend: Backend, rng: &mut dyn RngCore) -> Result<FileStore, StorageError> {
        let owner = OwnerGuard::acquire(path)?;
        let existing = match fs::read(path) {
            Ok(bytes) => Some(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(StorageError::io(path, e)),
        };
        let (codec, doc, fresh) = match (backend, existing) {
            (Backend::Plaintext, Some(bytes)) => (Codec::Plain, StoreDocument::from_json(&bytes)?, false),
            (Backend::Plaintext, None) => (Codec::Plain, StoreDocument::fresh(random_key(rng)), true),
            (Backend::Encrypted { password, .. }, Some(bytes)) => {
                let (doc, salt, iterations, key) = decode_encrypted(&bytes, &password)?;
                (Codec::Sealed { key, salt, iterations }, doc, false)
            }
            (Backend::Encrypted { password, iterations }, None) => {
                if iterations == 0 || iterations > MAX_KDF_ITERATIONS {
                    return Err(StorageError::Format(format!("iteration count {iterations} out of range")));
                }
                let mut salt = [0u8; SALT_LEN];
                rng.fill_bytes(&mut salt);
                let key = derive_storage_key(&password, &salt, iterations)?;
                (Codec::Sealed { key, salt, iterations }, StoreDocument::fresh(random_key(rng)), true)
            }
        };
        let mut store = FileStore { path: path.to_path_buf(), codec, doc, _owner: owner };
        if fresh {
            let doc = store.doc.clone();
            store.commit(doc)?;
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_encrypted(&self) -> bool {
        matches!(self.codec, Codec::Sealed { .. })
    }

    fn password_matches(&self, password: &str) -> bool {
        match &self.codec {
            Codec::Plain => false,
            Codec::Sealed { key, salt, iterations } => derive_storage_key(password, salt, *iterations)
                .map(|k| bool::from(subtle::ConstantTimeEq::ct_eq(k.as_ref(), key.as_ref())))
                .unwrap_or(false),
        }
    }
}

fn random_key(rng: &mut dyn RngCore) -> [u8; 32] {
    let mut k = [0u8; 32];
    rng.fill_bytes(&mut k);
    k
}

impl AuthenticatorStorage for FileStore {
    fn document(&self) -> &StoreDocument {
        &self.doc
    }

    fn commit(&mut self, doc: StoreDocument) -> Result<(), StorageError> {
        let bytes = self.codec.encode(&doc);
        write_atomic(&self.path, &bytes).map_err(|e| StorageError::io(&self.path, e))?;
        self.doc = doc;
        Ok(())
    }

    /// Plaintext stores have no password and always refuse.
    fn verify_password(&self, password: &str) -> bool {
        self.password_matches(password)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbor::messages::UserEntity;
    use rand::SeedableRng;

    const FAST: u32 = 1000;

    fn rng() -> rand_chacha::ChaCha20Rng {
        rand_chacha::ChaCha20Rng::seed_from_u64(11)
    }

    fn source(id: u8, rp: &str) -> CredentialSource {
        CredentialSource {
            id: vec![id; 16],
            rp_id: rp.into(),
            rp_name: None,
            user: UserEntity { id: vec![id], name: None, display_name: None },
            alg: -7,
            key: vec![1, 2, 3],
            created: id as u64,
        }
    }

    #[test]
    fn envelope_matches_reference_token() {
        // Produced by an independent implementation of the same token layout
        // (fixed time and IV).
        let key: [u8; 32] = std::array::from_fn(|i| i as u8);
        let expected = "80000000006553f1001111111111111111111111111111111100d4d0a90f53bc1a8c940946392b5464158203ddbe4e87e738013b2e1e083dec9a79a9089af77b3147b9081073778b04";
        let token = seal_envelope(&key, 1_700_000_000, &[0x11; 16], br#"{"a":1}"#);
        assert_eq!(hex::encode(&token), expected);
        assert_eq!(open_envelope(&key, &token).unwrap().as_slice(), br#"{"a":1}"#);
    }

    #[test]
    fn envelope_tag_checked_with_oracle_hmac() {
        let key = [5u8; 32];
        let token = seal_envelope(&key, 1, &[0; 16], b"payload");
        let (body, tag) = token.split_at(token.len() - 32);
        assert_eq!(vauth_oracle::hmac_sha256(&key[..16], body).as_slice(), tag);
    }

    #[test]
    fn pbkdf2_reference_value() {
        let salt: [u8; 16] = std::array::from_fn(|i| i as u8);
        let key = derive_storage_key("password", &salt, 1000).unwrap();
        assert_eq!(hex::encode(key.as_ref()), "25eb86acc76e43018f18b9a8f90c2fed462d1c799e83d48ae3d7c69046a60b67");
        assert_eq!(derive_storage_key("password", &salt, 1000).unwrap(), key);
        assert_ne!(derive_storage_key("password", &[0; 16], 1000).unwrap(), key);
        assert!(matches!(derive_storage_key("", &salt, 1000), Err(StorageError::EmptyPassword)));
    }

    #[test]
    fn init_writes_fresh_document() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let store = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
        assert!(path.exists());
        assert_eq!(store.counter(), 0);
        assert_eq!(store.pin_record(), None);
    }

    #[test]
    fn second_handle_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let _a = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
        assert!(matches!(
            FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()),
            Err(StorageError::AlreadyOpen(_))
        ));
    }

    #[test]
    fn counter_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        {
            let mut s = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
            assert_eq!(s.increment_counter().unwrap(), 1);
            for _ in 1..100 {
                s.increment_counter().unwrap();
            }
        }
        let s = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
        assert_eq!(s.counter(), 100);
    }

    #[test]
    fn failed_write_leaves_memory_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("store.json");
        fs::create_dir(dir.path().join("sub")).unwrap();
        let mut s = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
        fs::remove_dir_all(dir.path().join("sub")).unwrap();
        assert!(matches!(s.increment_counter(), Err(StorageError::Io { .. })));
        assert_eq!(s.counter(), 0);
    }

    #[test]
    fn credential_ordering_and_filter() {
        let mut s = MemoryStore::new([0; 32]);
        s.add_credential_source(&source(1, "rp")).unwrap();
        s.add_credential_source(&source(2, "rp")).unwrap();
        let ids: Vec<u8> = s.credential_sources("rp", None).iter().map(|c| c.id[0]).collect();
        assert_eq!(ids, vec![2, 1]);
        let only_a = s.credential_sources("rp", Some(&[vec![1; 16]]));
        assert_eq!(only_a.len(), 1);
        assert_eq!(only_a[0].id, vec![1; 16]);
        assert!(s.credential_sources("other", None).is_empty());
        assert!(matches!(s.add_credential_source(&source(1, "x")), Err(StorageError::DuplicateCredential)));
    }

    #[test]
    fn wrap_key_and_reset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        {
            let mut s = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
            s.set_wrap_key([7; 32]).unwrap();
        }
        let mut s = FileStore::open_or_init(&path, Backend::Plaintext, &mut rng()).unwrap();
        assert_eq!(s.wrap_key(), [7; 32]);
        s.add_credential_source(&source(1, "rp")).unwrap();
        s.set_pin_record(Some(PinRecord { pin_hash: [1; 16], retries: 8 })).unwrap();
        s.increment_counter().unwrap();
        s.reset_document([8; 32]).unwrap();
        assert_eq!(s.counter(), 0);
        assert_eq!(s.wrap_key(), [8; 32]);
        assert!(s.credential_sources("rp", None).is_empty());
        assert_eq!(s.pin_record(), None);
    }

    #[test]
    fn encrypted_round_trip_and_wrong_password() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        {
            let mut s = FileStore::open_or_init(&path, Backend::encrypted_with_iterations("pw", FAST), &mut rng()).unwrap();
            s.increment_counter().unwrap();
            assert!(s.verify_password("pw"));
            assert!(!s.verify_password("nope"));
        }
        let before = fs::read(&path).unwrap();
        assert!(matches!(
            FileStore::open_or_init(&path, Backend::encrypted("wrong"), &mut rng()),
            Err(StorageError::Authentication)
        ));
        assert_eq!(fs::read(&path).unwrap(), before);
        let s = FileStore::open_or_init(&path, Backend::encrypted("pw"), &mut rng()).unwrap();
        assert_eq!(s.counter(), 1);
    }

    #[test]
    fn backend_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("plain.json");
        drop(FileStore::open_or_init(&plain, Backend::Plaintext, &mut rng()).unwrap());
        assert!(matches!(
            FileStore::open_or_init(&plain, Backend::encrypted("pw"), &mut rng()),
            Err(StorageError::Format(_))
        ));
        let enc = dir.path().join("enc.bin");
        drop(FileStore::open_or_init(&enc, Backend::encrypted_with_iterations("pw", FAST), &mut rng()).unwrap());
        assert!(matches!(
            FileStore::open_or_init(&enc, Backend::Plaintext, &mut rng()),
            Err(StorageError::Format(_))
        ));
    }

    #[test]
    fn every_byte_of_encrypted_file_is_authenticated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        drop(FileStore::open_or_init(&path, Backend::encrypted_with_iterations("pw", 10), &mut rng()).unwrap());
        let bytes = fs::read(&path).unwrap();
        for i in 0..bytes.len() {
            let mut m = bytes.clone();
            m[i] ^= 0x01;
            assert!(matches!(decode_encrypted(&m, "pw"), Err(StorageError::Authentication)), "byte {i}");
        }
    }
}
