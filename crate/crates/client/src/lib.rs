//! Conformance client: registers and asserts against a running
//! authenticator and checks every answer locally.

use std::path::Path;

use p256::ecdsa::signature::Verifier;
use p256::ecdsa::{Signature, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use vauth_core::authenticator::auth_data::{rp_id_hash, ParsedAuthData, FLAG_AT, FLAG_UP};
use vauth_core::authenticator::pin::{self, PlatformKeyAgreement, PIN_PROTOCOL_V1};
use vauth_core::cbor::cose::{CoseKey, ALG_ES256};
use vauth_core::cbor::messages::{
    ClientPinParameters, ClientPinResponse, CredentialDescriptor, CredentialParameter, GetAssertionOptions,
    GetAssertionParameters, GetAssertionResponse, GetInfoResponse, MakeCredentialOptions,
    MakeCredentialParameters, PinSubCommand, Request, Response, RpEntity, UserEntity,
};
use vauth_core::status::StatusCode;
use vauth_core::transport::{Transport, TransportError};

mod hid_client;

pub use hid_client::{HidClient, InitInfo};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("timed out waiting for the authenticator")]
    Timeout,
    #[error("CTAPHID error 0x{0:02X}")]
    Hid(u8),
    #[error("CTAP2 error 0x{0:02X} ({name})", name = StatusCode::from_u8(*.0).map_or("unknown", StatusCode::name))]
    Ctap(u8),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("no registered credential for {0}")]
    NotRegistered(String),
    #[error("client state: {0}")]
    State(String),
}

impl ClientError {
    /// The error byte reported by the authenticator, if any.
    pub fn code(&self) -> Option<u8> {
        match self {
            ClientError::Hid(c) | ClientError::Ctap(c) => Some(*c),
            _ => None,
        }
    }
}

/// One credential as remembered by the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCredential {
    pub rp_id: String,
    #[serde(with = "hex")]
    pub credential_id: Vec<u8>,
    #[serde(with = "hex")]
    pub public_x: [u8; 32],
    #[serde(with = "hex")]
    pub public_y: [u8; 32],
    #[serde(with = "hex")]
    pub user_id: Vec<u8>,
    pub user_name: Option<String>,
    pub counter: u32,
}

impl StoredCredential {
    pub fn public_key(&self) -> CoseKey {
        CoseKey { alg: ALG_ES256, x: self.public_x, y: self.public_y }
    }
}

/// Client-side record of registrations, kept as JSON between CLI runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientState {
    pub credentials: Vec<StoredCredential>,
}

impl ClientState {
    pub fn load(path: &Path) -> Result<ClientState, ClientError> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ClientError::State(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ClientState::default()),
            Err(e) => Err(ClientError::State(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        let json = serde_json::to_vec_pretty(self).expect("state serializes");
        std::fs::write(path, json).map_err(|e| ClientError::State(format!("{}: {e}", path.display())))
    }

    pub fn find(&self, credential_id: &[u8]) -> Option<&StoredCredential> {
        self.credentials.iter().find(|c| c.credential_id == credential_id)
    }

    pub fn for_rp<'a>(&'a self, rp_id: &'a str) -> impl Iterator<Item = &'a StoredCredential> {
        self.credentials.iter().filter(move |c| c.rp_id == rp_id)
    }

    /// Highest counter seen from the authenticator. It keeps one global
    /// counter, so every new response must exceed this.
    pub fn last_counter(&self) -> u32 {
        self.credentials.iter().map(|c| c.counter).max().unwrap_or(0)
    }

    pub fn forget_all(&mut self) {
        self.credentials.clear();
    }
}

#[derive(Debug, Clone, Default)]
pub struct RegisterOptions {
    pub resident: Option<bool>,
    pub pin: Option<String>,
    pub exclude: Vec<Vec<u8>>,
    pub algorithms: Option<Vec<i64>>,
}

/// A verified makeCredential result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub record: StoredCredential,
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
    pub client_data_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionReport {
    pub credential_id: Vec<u8>,
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
    pub client_data_hash: [u8; 32],
    pub counter: u32,
    pub flags: u8,
    pub user: Option<UserEntity>,
    pub number_of_credentials: Option<u32>,
}

pub fn verify_signature(key: &CoseKey, message: &[u8], der: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(&key.to_sec1()) else { return false };
    let Ok(sig) = Signature::from_der(der) else { return false };
    vk.verify(message, &sig).is_ok()
}

fn signed_message(auth_data: &[u8], client_data_hash: &[u8; 32]) -> Vec<u8> {
    let mut m = auth_data.to_vec();
    m.extend_from_slice(client_data_hash);
    m
}

fn client_data_hash(rng: &mut dyn rand::RngCore, kind: &str, rp_id: &str) -> [u8; 32] {
    let mut challenge = [0u8; 16];
    rng.fill_bytes(&mut challenge);
    let client_data = format!(
        r#"{{"type":"{kind}","challenge":"{}","origin":"https://{rp_id}"}}"#,
        hex::encode(challenge)
    );
    Sha256::digest(client_data.as_bytes()).into()
}

fn pin_params(sub: PinSubCommand) -> ClientPinParameters {
    ClientPinParameters {
        pin_protocol: PIN_PROTOCOL_V1,
        sub_command: sub,
        key_agreement: None,
        pin_auth: None,
        new_pin_enc: None,
        pin_hash_enc: None,
    }
}

fn expect_pin(resp: Response) -> Result<ClientPinResponse, ClientError> {
    match resp {
        Response::ClientPin(r) => Ok(r),
        other => Err(ClientError::Protocol(format!("unexpected {:?} response", other.command()))),
    }
}

pub fn get_info<T: Transport>(client: &mut HidClient<T>) -> Result<GetInfoResponse, ClientError> {
    match client.cbor(&Request::GetInfo)? {
        Response::GetInfo(info) => Ok(info),
        other => Err(ClientError::Protocol(format!("unexpected {:?} response", other.command()))),
    }
}

fn key_agreement<T: Transport>(client: &mut HidClient<T>) -> Result<PlatformKeyAgreement, ClientError> {
    let ka = expect_pin(client.cbor(&Request::ClientPin(pin_params(PinSubCommand::GetKeyAgreement)))?)?
        .key_agreement
        .ok_or_else(|| ClientError::Protocol("keyAgreement missing".into()))?;
    Ok(PlatformKeyAgreement::new(client.rng(), &ka))
}

pub fn pin_retries<T: Transport>(client: &mut HidClient<T>) -> Result<u8, ClientError> {
    expect_pin(client.cbor(&Request::ClientPin(pin_params(PinSubCommand::GetRetries)))?)?
        .retries
        .ok_or_else(|| ClientError::Protocol("retries missing".into()))
}

fn padded(new_pin: &str) -> Result<Vec<u8>, ClientError> {
    pin::pad_pin(new_pin.as_bytes())
        .map(|p| p.to_vec())
        .ok_or_else(|| ClientError::Protocol("PIN must be 4 to 63 bytes".into()))
}

pub fn set_pin<T: Transport>(client: &mut HidClient<T>, new_pin: &str) -> Result<(), ClientError> {
    let ka = key_agreement(client)?;
    let enc = pin::encrypt(ka.shared_secret(), &padded(new_pin)?).expect("block multiple");
    let mut p = pin_params(PinSubCommand::SetPin);
    p.key_agreement = Some(ka.public());
    p.pin_auth = Some(pin::pin_auth(ka.shared_secret(), &enc));
    p.new_pin_enc = Some(enc);
    client.cbor(&Request::ClientPin(p)).map(|_| ())
}

pub fn change_pin<T: Transport>(client: &mut HidClient<T>, old_pin: &str, new_pin: &str) -> Result<(), ClientError> {
    let ka = key_agreement(client)?;
    let new_enc = pin::encrypt(ka.shared_secret(), &padded(new_pin)?).expect("block multiple");
    let hash_enc: [u8; 16] = pin::encrypt(ka.shared_secret(), &pin::pin_hash(old_pin.as_bytes()))
        .expect("one block")
        .try_into()
        .expect("16 bytes");
    let mut msg = new_enc.clone();
    msg.extend_from_slice(&hash_enc);
    let mut p = pin_params(PinSubCommand::ChangePin);
    p.key_agreement = Some(ka.public());
    p.pin_auth = Some(pin::pin_auth(ka.shared_secret(), &msg));
    p.new_pin_enc = Some(new_enc);
    p.pin_hash_enc = Some(hash_enc);
    client.cbor(&Request::ClientPin(p)).map(|_| ())
}

pub fn pin_token<T: Transport>(client: &mut HidClient<T>, pin_text: &str) -> Result<Vec<u8>, ClientError> {
    let ka = key_agreement(client)?;
    let mut p = pin_params(PinSubCommand::GetPinToken);
    p.key_agreement = Some(ka.public());
    p.pin_hash_enc = Some(
        pin::encrypt(ka.shared_secret(), &pin::pin_hash(pin_text.as_bytes()))
            .expect("one block")
            .try_into()
            .expect("16 bytes"),
    );
    let enc = expect_pin(client.cbor(&Request::ClientPin(p))?)?
        .pin_token
        .ok_or_else(|| ClientError::Protocol("pinToken missing".into()))?;
    pin::decrypt(ka.shared_secret(), &enc)
        .map(|t| t.to_vec())
        .ok_or_else(|| ClientError::Protocol("pinToken is not a block multiple".into()))
}

pub fn reset<T: Transport>(client: &mut HidClient<T>, state: &mut ClientState) -> Result<(), ClientError> {
    client.cbor(&Request::Reset)?;
    state.forget_all();
    Ok(())
}

/// getInfo, optional PIN token, makeCredential, then local verification
/// of the packed self-attestation.
pub fn client_register<T: Transport>(
    client: &mut HidClient<T>,
    state: &mut ClientState,
    rp_id: &str,
    user: UserEntity,
    options: &RegisterOptions,
) -> Result<Registration, ClientError> {
    let info = get_info(client)?;
    let cdh = client_data_hash(client.rng(), "webauthn.create", rp_id);
    let (pin_auth, pin_protocol) = match &options.pin {
        Some(p) => {
            let token = pin_token(client, p)?;
            (Some(pin::pin_auth(&token, &cdh)), Some(PIN_PROTOCOL_V1))
        }
        None => (None, None),
    };
    let algs = options.algorithms.clone().unwrap_or_else(|| info.algorithms.iter().map(|a| a.alg).collect());
    let params = MakeCredentialParameters {
        client_data_hash: cdh,
        rp: RpEntity { id: rp_id.into(), name: Some(rp_id.into()) },
        user: user.clone(),
        pub_key_cred_params: algs
            .into_iter()
            .map(|alg| CredentialParameter { cred_type: "public-key".into(), alg })
            .collect(),
        exclude_list: (!options.exclude.is_empty())
            .then(|| options.exclude.iter().cloned().map(CredentialDescriptor::public_key).collect()),
        options: MakeCredentialOptions { rk: options.resident, uv: None },
        pin_auth,
        pin_protocol,
    };
    let resp = match client.cbor(&Request::MakeCredential(params))? {
        Response::MakeCredential(r) => r,
        other => return Err(ClientError::Protocol(format!("unexpected {:?} response", other.command()))),
    };
    if resp.fmt != "packed" || resp.att_stmt.alg != ALG_ES256 {
        return Err(ClientError::Verification(format!("attestation {} alg {}", resp.fmt, resp.att_stmt.alg)));
    }
    let parsed = ParsedAuthData::parse(&resp.auth_data).map_err(|e| ClientError::Verification(e.0.into()))?;
    if parsed.rp_id_hash != rp_id_hash(rp_id) {
        return Err(ClientError::Verification("rpIdHash mismatch".into()));
    }
    if parsed.flags & (FLAG_UP | FLAG_AT) != FLAG_UP | FLAG_AT {
        return Err(ClientError::Verification(format!("flags 0x{:02X}", parsed.flags)));
    }
    if parsed.counter <= state.last_counter() {
        return Err(ClientError::Verification(format!(
            "counter {} not above {}",
            parsed.counter,
            state.last_counter()
        )));
    }
    let attested = parsed.attested.ok_or_else(|| ClientError::Verification("no attested credential".into()))?;
    if !verify_signature(&attested.public_key, &signed_message(&resp.auth_data, &cdh), &resp.att_stmt.sig) {
        return Err(ClientError::Verification("self-attestation signature".into()));
    }
    let record = StoredCredential {
        rp_id: rp_id.into(),
        credential_id: attested.credential_id,
        public_x: attested.public_key.x,
        public_y: attested.public_key.y,
        user_id: user.id,
        user_name: user.name,
        counter: parsed.counter,
    };
    state.credentials.push(record.clone());
    Ok(Registration { record, auth_data: resp.auth_data, signature: resp.att_stmt.sig, client_data_hash: cdh })
}

/// getAssertion plus getNextAssertion for every further credential. Each
/// signature is checked against the recorded public key and each counter
/// must exceed everything seen before.
pub fn client_assert<T: Transport>(
    client: &mut HidClient<T>,
    state: &mut ClientState,
    rp_id: &str,
    credential_id: Option<&[u8]>,
    pin_text: Option<&str>,
) -> Result<Vec<AssertionReport>, ClientError> {
    let cdh = client_data_hash(client.rng(), "webauthn.get", rp_id);
    let (pin_auth, pin_protocol) = match pin_text {
        Some(p) => {
            let token = pin_token(client, p)?;
            (Some(pin::pin_auth(&token, &cdh)), Some(PIN_PROTOCOL_V1))
        }
        None => (None, None),
    };
    let allow_list = credential_id.map(|id| vec![CredentialDescriptor::public_key(id.to_vec())]);
    let params = GetAssertionParameters {
        rp_id: rp_id.into(),
        client_data_hash: cdh,
        allow_list,
        options: GetAssertionOptions::default(),
        pin_auth,
        pin_protocol,
    };
    let first = match client.cbor(&Request::GetAssertion(params))? {
        Response::GetAssertion(r) => r,
        other => return Err(ClientError::Protocol(format!("unexpected {:?} response", other.command()))),
    };
    let total = first.number_of_credentials.unwrap_or(1);
    let mut reports = vec![check_assertion(state, rp_id, &cdh, first)?];
    for _ in 1..total {
        let next = match client.cbor(&Request::GetNextAssertion)? {
            Response::GetNextAssertion(r) | Response::GetAssertion(r) => r,
            other => return Err(ClientError::Protocol(format!("unexpected {:?} response", other.command()))),
        };
        reports.push(check_assertion(state, rp_id, &cdh, next)?);
    }
    Ok(reports)
}

fn check_assertion(
    state: &mut ClientState,
    rp_id: &str,
    cdh: &[u8; 32],
    resp: GetAssertionResponse,
) -> Result<AssertionReport, ClientError> {
    let id = resp.credential.id.clone();
    let known = state.find(&id).ok_or_else(|| ClientError::NotRegistered(hex::encode(&id)))?;
    if known.rp_id != rp_id {
        return Err(ClientError::Verification(format!("credential belongs to {}", known.rp_id)));
    }
    let parsed = ParsedAuthData::parse(&resp.auth_data).map_err(|e| ClientError::Verification(e.0.into()))?;
    if parsed.rp_id_hash != rp_id_hash(rp_id) {
        return Err(ClientError::Verification("rpIdHash mismatch".into()));
    }
    if !verify_signature(&known.public_key(), &signed_message(&resp.auth_data, cdh), &resp.signature) {
        return Err(ClientError::Verification("assertion signature".into()));
    }
    let last = state.last_counter();
    if parsed.counter <= last {
        return Err(ClientError::Verification(format!("counter {} not above {last}", parsed.counter)));
    }
    if let Some(c) = state.credentials.iter_mut().find(|c| c.credential_id == id) {
        c.counter = parsed.counter;
    }
    Ok(AssertionReport {
        credential_id: id,
        auth_data: resp.auth_data,
        signature: resp.signature,
        client_data_hash: *cdh,
        counter: parsed.counter,
        flags: parsed.flags,
        user: resp.user,
        number_of_credentials: resp.number_of_credentials,
    })
}
