//! CTAP2 authenticator API: makeCredential, getAssertion, getNextAssertion,
//! getInfo, clientPIN and reset.

pub mod auth_data;
pub mod pin;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::RngCore;

use crate::cbor::messages::{
    decode_request, encode_response, ClientPinParameters, ClientPinResponse, CredentialDescriptor,
    CredentialParameter, GetAssertionParameters, GetAssertionResponse, GetInfoResponse, MakeCredentialParameters,
    MakeCredentialResponse, PackedAttestation, PinSubCommand, Request, Response, PUBLIC_KEY_TYPE,
};
use crate::credential::CredentialSource;
use crate::crypto::{CredentialWrapper, KeyContext, ProviderRegistry};
use crate::hid::MAX_PAYLOAD;
use crate::logging::{LogHub, Sink};
use crate::policy::{CancelToken, Decision, Operation, PresencePolicy, Prompt};
use crate::status::StatusCode;
use crate::storage::{AuthenticatorStorage, PinRecord};

use auth_data::{build_auth_data, AttestedCredential, FLAG_UP, FLAG_UV};
use pin::{PinSession, MAX_RETRIES, PIN_PROTOCOL_V1};

pub const VERSION_FIDO_2_0: &str = "FIDO_2_0";
pub const DEFAULT_ITERATION_TIMEOUT: Duration = Duration::from_secs(30);
const RESIDENT_ID_LEN: usize = 16;

/// Keep-alive payload byte while a request is in progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum KeepaliveStatus {
    Processing = 1,
    UpNeeded = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UvMode {
    /// UV only through a PIN token.
    PinOnly,
    /// The `uv` option triggers a password check against the store.
    Password,
}

#[derive(Debug, Clone)]
pub struct AuthenticatorConfig {
    pub aaguid: [u8; 16],
    pub resident_default: bool,
    pub iteration_timeout: Duration,
    pub uv_mode: UvMode,
}

impl Default for AuthenticatorConfig {
    fn default() -> Self {
        AuthenticatorConfig {
            aaguid: [0; 16],
            resident_default: true,
            iteration_timeout: DEFAULT_ITERATION_TIMEOUT,
            uv_mode: UvMode::PinOnly,
        }
    }
}

/// Per-request hooks: cancellation from the transport and keep-alive
/// status updates back to it.
pub struct RequestContext<'a> {
    pub cancel: &'a CancelToken,
    pub status: &'a (dyn Fn(KeepaliveStatus) + Sync),
}

struct Candidate {
    source: CredentialSource,
    resident: bool,
}

struct Iteration {
    remaining: Vec<Candidate>,
    rp_id: String,
    client_data_hash: [u8; 32],
    flags: u8,
    started: Instant,
}

pub struct Authenticator {
    config: AuthenticatorConfig,
    registry: ProviderRegistry,
    storage: Box<dyn AuthenticatorStorage>,
    policy: Arc<dyn PresencePolicy>,
    rng: Box<dyn RngCore + Send>,
    pin: PinSession,
    iteration: Option<Iteration>,
    log: Arc<LogHub>,
}

type CtapResult<T> = Result<T, StatusCode>;

fn storage_failure(log: &LogHub, e: crate::storage::StorageError) -> StatusCode {
    log.log(Sink::Auth, &format!("storage failure: {e}"));
    StatusCode::Other
}

impl Authenticator {
    pub fn new(
        config: AuthenticatorConfig,
        registry: ProviderRegistry,
        storage: Box<dyn AuthenticatorStorage>,
        policy: Arc<dyn PresencePolicy>,
        mut rng: Box<dyn RngCore + Send>,
        log: Arc<LogHub>,
    ) -> Authenticator {
        let pin = PinSession::new(rng.as_mut());
        Authenticator { config, registry, storage, policy, rng, pin, iteration: None, log }
    }

    pub fn storage(&self) -> &dyn AuthenticatorStorage {
        self.storage.as_ref()
    }

    pub fn policy(&self) -> &Arc<dyn PresencePolicy> {
        &self.policy
    }

    pub fn registry(&self) -> &ProviderRegistry {
        &self.registry
    }

    fn audit(&self, msg: &str) {
        self.log.log(Sink::Auth, msg);
    }

    /// Process one CTAPHID_CBOR payload and return `status || body`.
    pub fn handle_cbor(&mut self, payload: &[u8], ctx: &RequestContext<'_>) -> Vec<u8> {
        let request = match decode_request(payload) {
            Ok(r) => r,
            Err(status) => {
                self.audit(&format!("request rejected: {status}"));
                self.iteration = None;
                return vec![status.as_u8()];
            }
        };
        let name = request.command().name();
        if !matches!(request, Request::GetNextAssertion) {
            self.iteration = None;
        }
        let result = match request {
            Request::MakeCredential(p) => self.make_credential(&p, ctx).map(Response::MakeCredential),
            Request::GetAssertion(p) => self.get_assertion(&p, ctx).map(Response::GetAssertion),
            Request::GetNextAssertion => self.get_next_assertion().map(Response::GetNextAssertion),
            Request::GetInfo => Ok(Response::GetInfo(self.get_info())),
            Request::ClientPin(p) => self.client_pin(&p).map(Response::ClientPin),
            Request::Reset => self.reset(ctx).map(|()| Response::Reset),
        };
        let out = match &result {
            Ok(resp) => encode_response(StatusCode::Success, Some(resp)),
            Err(status) => encode_response(*status, None),
        };
        if out.len() > MAX_PAYLOAD {
            self.audit(&format!("{name}: response of {} bytes exceeds the message limit", out.len()));
            return vec![StatusCode::Other.as_u8()];
        }
        match &result {
            Ok(_) => self.audit(&format!("{name}: ok, {} bytes", out.len())),
            Err(status) => self.audit(&format!("{name}: {status}")),
        }
        out
    }

    pub fn get_info(&self) -> GetInfoResponse {
        let mut options = BTreeMap::new();
        options.insert("rk".to_string(), true);
        options.insert("up".to_string(), true);
        options.insert("clientPin".to_string(), self.storage.pin_record().is_some());
        if self.config.uv_mode == UvMode::Password {
            options.insert("uv".to_string(), true);
        }
        GetInfoResponse {
            versions: vec![VERSION_FIDO_2_0.to_string()],
            aaguid: self.config.aaguid,
            options,
            max_msg_size: MAX_PAYLOAD as u32,
            pin_protocols: vec![PIN_PROTOCOL_V1],
            algorithms: self
                .registry
                .algorithms()
                .into_iter()
                .map(|alg| CredentialParameter { cred_type: PUBLIC_KEY_TYPE.to_string(), alg })
                .collect(),
        }
    }

    fn wrapper(&self) -> CredentialWrapper {
        CredentialWrapper::new(self.storage.wrap_key())
    }

    /// Returns whether the request carried a valid PIN token proof.
    fn check_pin_auth(&self, pin_auth: Option<&[u8; 16]>, protocol: Option<u8>, cdh: &[u8; 32], required: bool) -> CtapResult<bool> {
        match pin_auth {
            Some(auth) => {
                if protocol != Some(PIN_PROTOCOL_V1) {
                    return Err(StatusCode::InvalidParameter);
                }
                if self.storage.pin_record().is_none() {
                    return Err(StatusCode::PinNotSet);
                }
                if !self.pin.verify_token_auth(cdh, auth) {
                    return Err(StatusCode::PinAuthInvalid);
                }
                Ok(true)
            }
            None if required && self.storage.pin_record().is_some() => Err(StatusCode::PinRequired),
            None => Ok(false),
        }
    }

    fn ask_presence(&self, prompt: &Prompt, ctx: &RequestContext<'_>) -> CtapResult<()> {
        (ctx.status)(KeepaliveStatus::UpNeeded);
        let decision = self.policy.confirm_presence(prompt, ctx.cancel);
        (ctx.status)(KeepaliveStatus::Processing);
        decision_to_result(decision)
    }

    fn ask_uv(&self, prompt: &Prompt, ctx: &RequestContext<'_>) -> CtapResult<()> {
        if self.config.uv_mode != UvMode::Password {
            return Err(StatusCode::UnsupportedOption);
        }
        (ctx.status)(KeepaliveStatus::UpNeeded);
        let storage = self.storage.as_ref();
        let decision = self.policy.verify_user(prompt, &|pw| storage.verify_password(pw), ctx.cancel);
        (ctx.status)(KeepaliveStatus::Processing);
        decision_to_result(decision)
    }

    fn next_counter(&mut self) -> CtapResult<u32> {
        let value = self.storage.increment_counter().map_err(|e| storage_failure(&self.log, e))?;
        u32::try_from(value).map_err(|_| StatusCode::Other)
    }

    /// Unwrap a non-resident credential id bound to `rp_id`.
    fn unwrap_for_rp(&self, wrapper: &CredentialWrapper, id: &[u8], rp_id: &str) -> Option<CredentialSource> {
        let plain = wrapper.unwrap(id).ok()?;
        let mut source = CredentialSource::deserialize(&plain).ok()?;
        if source.rp_id != rp_id {
            return None;
        }
        source.id = id.to_vec();
        Some(source)
    }

    fn find_candidates(&self, rp_id: &str, allow: Option<&[CredentialDescriptor]>) -> Vec<Candidate> {
        let Some(allow) = allow.filter(|a| !a.is_empty()) else {
            return self
                .storage
                .credential_sources(rp_id, None)
                .into_iter()
                .map(|source| Candidate { source, resident: true })
                .collect();
        };
        let ids: Vec<Vec<u8>> = allow.iter().map(|d| d.id.clone()).collect();
        let mut found: Vec<Candidate> = self
            .storage
            .credential_sources(rp_id, Some(&ids))
            .into_iter()
            .map(|source| Candidate { source, resident: true })
            .collect();
        let wrapper = self.wrapper();
        for id in &ids {
            if found.iter().any(|c| c.source.id == *id) {
                continue;
            }
            if let Some(source) = self.unwrap_for_rp(&wrapper, id, rp_id) {
                found.push(Candidate { source, resident: false });
            }
        }
        // Newest first; stable so resident order is kept for equal ordinals.
        found.sort_by(|a, b| b.source.created.cmp(&a.source.created));
        found
    }

    pub fn make_credential(&mut self, p: &MakeCredentialParameters, ctx: &RequestContext<'_>) -> CtapResult<MakeCredentialResponse> {
        let pin_verified = self.check_pin_auth(p.pin_auth.as_ref(), p.pin_protocol, &p.client_data_hash, true)?;

        let alg = p
            .pub_key_cred_params
            .iter()
            .find(|c| c.cred_type == PUBLIC_KEY_TYPE && self.registry.supports(c.alg))
            .map(|c| c.alg)
            .ok_or(StatusCode::UnsupportedAlgorithm)?;

        if let Some(exclude) = p.exclude_list.as_deref() {
            if !self.find_candidates(&p.rp.id, Some(exclude)).is_empty() {
                return Err(StatusCode::CredentialExcluded);
            }
        }

        let prompt = Prompt {
            operation: Operation::MakeCredential,
            rp_id: Some(p.rp.id.clone()),
            user_name: p.user.name.clone().or_else(|| p.user.display_name.clone()),
        };
        let mut uv = pin_verified;
        if p.options.uv == Some(true) && !pin_verified {
            self.ask_uv(&prompt, ctx)?;
            uv = true;
        } else {
            self.ask_presence(&prompt, ctx)?;
        }

        let key = self
            .registry
            .generate(alg, self.rng.as_mut(), KeyContext { rp_id: &p.rp.id })
            .map_err(|e| {
                self.audit(&format!("key generation failed: {e}"));
                StatusCode::Other
            })?;
        let resident = p.options.rk.unwrap_or(self.config.resident_default);
        let counter = self.next_counter()?;
        let mut source = CredentialSource {
            id: Vec::new(),
            rp_id: p.rp.id.clone(),
            rp_name: p.rp.name.clone(),
            user: p.user.clone(),
            alg,
            key: key.encoded(),
            created: counter as u64,
        };
        if resident {
            let mut id = vec![0u8; RESIDENT_ID_LEN];
            self.rng.fill_bytes(&mut id);
            source.id = id;
            self.storage.add_credential_source(&source).map_err(|e| storage_failure(&self.log, e))?;
        } else {
            source.id = self.wrapper().wrap(&source.serialize()).map_err(|_| StatusCode::Other)?;
            if source.id.len() > u16::MAX as usize {
                return Err(StatusCode::InvalidLength);
            }
        }

        let flags = FLAG_UP | if uv { FLAG_UV } else { 0 };
        let attested = AttestedCredential {
            aaguid: self.config.aaguid,
            credential_id: source.id.clone(),
            public_key: key.public_key(),
        };
        let auth_data = build_auth_data(&p.rp.id, flags, counter, Some(&attested));
        let mut signed = auth_data.clone();
        signed.extend_from_slice(&p.client_data_hash);
        let sig = key.sign(&signed).map_err(|_| StatusCode::Other)?;
        self.audit(&format!(
            "makeCredential rp={} resident={resident} alg={alg} counter={counter} uv={uv}",
            p.rp.id
        ));
        Ok(MakeCredentialResponse { fmt: "packed".to_string(), auth_data, att_stmt: PackedAttestation { alg, sig } })
    }

    fn assertion_for(&self, candidate: &Candidate, rp_id: &str, flags: u8, counter: u32, cdh: &[u8; 32]) -> CtapResult<GetAssertionResponse> {
        let key = self.registry.load(candidate.source.alg, &candidate.source.key).map_err(|e| {
            self.audit(&format!("credential key unusable: {e}"));
            StatusCode::Other
        })?;
        let auth_data = build_auth_data(rp_id, flags, counter, None);
        let mut signed = auth_data.clone();
        signed.extend_from_slice(cdh);
        let signature = key.sign(&signed).map_err(|_| StatusCode::Other)?;
        Ok(GetAssertionResponse {
            credential: CredentialDescriptor::public_key(candidate.source.id.clone()),
            auth_data,
            signature,
            user: candidate.resident.then(|| candidate.source.user.clone()),
            number_of_credentials: None,
        })
    }

    pub fn get_assertion(&mut self, p: &GetAssertionParameters, ctx: &RequestContext<'_>) -> CtapResult<GetAssertionResponse> {
        let pin_verified = self.check_pin_auth(p.pin_auth.as_ref(), p.pin_protocol, &p.client_data_hash, false)?;
        let mut candidates = self.find_candidates(&p.rp_id, p.allow_list.as_deref());
        if candidates.is_empty() {
            return Err(StatusCode::NoCredentials);
        }

        let prompt = Prompt {
            operation: Operation::GetAssertion,
            rp_id: Some(p.rp_id.clone()),
            user_name: candidates[0].source.user.name.clone(),
        };
        let up = p.options.up.unwrap_or(true);
        let mut uv = pin_verified;
        if p.options.uv == Some(true) && !pin_verified {
            self.ask_uv(&prompt, ctx)?;
            uv = true;
        } else if up {
            self.ask_presence(&prompt, ctx)?;
        }
        let flags = if up { FLAG_UP } else { 0 } | if uv { FLAG_UV } else { 0 };

        let counter = self.next_counter()?;
        let first = candidates.remove(0);
        let mut response = self.assertion_for(&first, &p.rp_id, flags, counter, &p.client_data_hash)?;
        let total = candidates.len() + 1;
        response.number_of_credentials = Some(total as u32);
        if !candidates.is_empty() {
            self.iteration = Some(Iteration {
                remaining: candidates,
                rp_id: p.rp_id.clone(),
                client_data_hash: p.client_data_hash,
                flags,
                started: Instant::now(),
            });
        }
        self.audit(&format!("getAssertion rp={} matches={total} counter={counter} uv={uv}", p.rp_id));
        Ok(response)
    }

    pub fn get_next_assertion(&mut self) -> CtapResult<GetAssertionResponse> {
        let mut state = self.iteration.take().ok_or(StatusCode::NotAllowed)?;
        if state.started.elapsed() > self.config.iteration_timeout || state.remaining.is_empty() {
            return Err(StatusCode::NotAllowed);
        }
        let next = state.remaining.remove(0);
        let counter = self.next_counter()?;
        let response = self.assertion_for(&next, &state.rp_id, state.flags, counter, &state.client_data_hash)?;
        if !state.remaining.is_empty() {
            self.iteration = Some(state);
        }
        Ok(response)
    }

    fn set_retries(&mut self, record: PinRecord, retries: u8) -> CtapResult<()> {
        self.storage
            .set_pin_record(Some(PinRecord { retries, ..record }))
            .map_err(|e| storage_failure(&self.log, e))
    }

    /// Check pinHashEnc against the stored PIN, handling the retry counter.
    fn verify_pin_hash(&mut self, shared: &[u8; 32], pin_hash_enc: &[u8; 16]) -> CtapResult<()> {
        let record = self.storage.pin_record().ok_or(StatusCode::PinNotSet)?;
        if record.retries == 0 {
            return Err(StatusCode::PinBlocked);
        }
        self.set_retries(record, record.retries - 1)?;
        let decrypted = pin::decrypt(shared, pin_hash_enc).ok_or(StatusCode::InvalidParameter)?;
        if !bool::from(subtle::ConstantTimeEq::ct_eq(decrypted.as_slice(), &record.pin_hash[..])) {
            self.pin.regenerate_key_agreement(self.rng.as_mut());
            return Err(if record.retries - 1 == 0 { StatusCode::PinBlocked } else { StatusCode::PinInvalid });
        }
        self.set_retries(record, MAX_RETRIES)
    }

    fn decrypt_new_pin(&self, shared: &[u8; 32], new_pin_enc: &[u8]) -> CtapResult<[u8; 16]> {
        if new_pin_enc.len() < pin::PADDED_PIN_LEN || new_pin_enc.len() % 16 != 0 {
            return Err(StatusCode::InvalidParameter);
        }
        let padded = pin::decrypt(shared, new_pin_enc).ok_or(StatusCode::InvalidParameter)?;
        let pin = pin::unpad_pin(&padded);
        if pin.len() < pin::MIN_PIN_LEN || pin.len() > pin::MAX_PIN_LEN {
            return Err(StatusCode::PinPolicyViolation);
        }
        Ok(pin::pin_hash(pin))
    }

    pub fn client_pin(&mut self, p: &ClientPinParameters) -> CtapResult<ClientPinResponse> {
        if p.pin_protocol != PIN_PROTOCOL_V1 {
            return Err(StatusCode::InvalidParameter);
        }
        let shared = || -> CtapResult<_> {
            let key = p.key_agreement.as_ref().ok_or(StatusCode::MissingParameter)?;
            Ok(self.pin.shared_secret_with(key))
        };
        match p.sub_command {
            PinSubCommand::GetRetries => Ok(ClientPinResponse {
                retries: Some(self.storage.pin_record().map_or(MAX_RETRIES, |r| r.retries)),
                ..Default::default()
            }),
            PinSubCommand::GetKeyAgreement => Ok(ClientPinResponse {
                key_agreement: Some(self.pin.key_agreement_public()),
                ..Default::default()
            }),
            PinSubCommand::SetPin => {
                if self.storage.pin_record().is_some() {
                    return Err(StatusCode::NotAllowed);
                }
                let shared = shared()?;
                let new_pin_enc = p.new_pin_enc.as_deref().ok_or(StatusCode::MissingParameter)?;
                let auth = p.pin_auth.as_ref().ok_or(StatusCode::MissingParameter)?;
                if !pin::verify_pin_auth(shared.as_ref(), new_pin_enc, auth) {
                    return Err(StatusCode::PinAuthInvalid);
                }
                let pin_hash = self.decrypt_new_pin(&shared, new_pin_enc)?;
                self.storage
                    .set_pin_record(Some(PinRecord { pin_hash, retries: MAX_RETRIES }))
                    .map_err(|e| storage_failure(&self.log, e))?;
                self.audit("clientPIN: PIN set");
                Ok(ClientPinResponse::default())
            }
            PinSubCommand::ChangePin => {
                let record = self.storage.pin_record().ok_or(StatusCode::PinNotSet)?;
                if record.retries == 0 {
                    return Err(StatusCode::PinBlocked);
                }
                let shared = shared()?;
                let new_pin_enc = p.new_pin_enc.as_deref().ok_or(StatusCode::MissingParameter)?;
                let pin_hash_enc = p.pin_hash_enc.ok_or(StatusCode::MissingParameter)?;
                let auth = p.pin_auth.as_ref().ok_or(StatusCode::MissingParameter)?;
                let mut message = new_pin_enc.to_vec();
                message.extend_from_slice(&pin_hash_enc);
                if !pin::verify_pin_auth(shared.as_ref(), &message, auth) {
                    return Err(StatusCode::PinAuthInvalid);
                }
                self.verify_pin_hash(&shared, &pin_hash_enc)?;
                let pin_hash = self.decrypt_new_pin(&shared, new_pin_enc)?;
                self.storage
                    .set_pin_record(Some(PinRecord { pin_hash, retries: MAX_RETRIES }))
                    .map_err(|e| storage_failure(&self.log, e))?;
                self.audit("clientPIN: PIN changed");
                Ok(ClientPinResponse::default())
            }
            PinSubCommand::GetPinToken => {
                let shared = shared()?;
                let pin_hash_enc = p.pin_hash_enc.ok_or(StatusCode::MissingParameter)?;
                let outcome = self.verify_pin_hash(&shared, &pin_hash_enc);
                if let Err(status) = outcome {
                    self.audit(&format!("clientPIN: token refused, {status}"));
                    return Err(status);
                }
                let token = pin::encrypt(&shared, self.pin.pin_token()).expect("token is one block");
                Ok(ClientPinResponse { pin_token: Some(token), ..Default::default() })
            }
        }
    }

    pub fn reset(&mut self, ctx: &RequestContext<'_>) -> CtapResult<()> {
        let prompt = Prompt { operation: Operation::Reset, rp_id: None, user_name: None };
        self.ask_presence(&prompt, ctx)?;
        let mut key = [0u8; 32];
        self.rng.fill_bytes(&mut key);
        self.storage.reset_document(key).map_err(|e| storage_failure(&self.log, e))?;
        self.pin = PinSession::new(self.rng.as_mut());
        self.iteration = None;
        self.audit("reset: credentials, PIN and wrap key cleared");
        Ok(())
    }
}

fn decision_to_result(decision: Decision) -> CtapResult<()> {
    match decision {
        Decision::Approve => Ok(()),
        Decision::Deny => Err(StatusCode::OperationDenied),
        Decision::Cancelled => Err(StatusCode::KeepaliveCancel),
        Decision::Error(_) => Err(StatusCode::Other),
    }
}

/// Default registry: the software ES256 provider.
pub fn default_registry() -> ProviderRegistry {
    ProviderRegistry::with_provider(Arc::new(crate::crypto::Es256Provider))
}
