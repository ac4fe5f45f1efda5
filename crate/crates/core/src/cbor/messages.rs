//! Typed CTAP2 authenticator API requests and responses.
//!
//! Requests arrive as `command byte || CBOR map`; responses leave as
//! `status byte || CBOR map`. Map keys follow the authenticator API tables.

use std::collections::BTreeMap;

use super::cose::CoseKey;
use super::value::{decode, MapBuilder, Value};
use crate::status::StatusCode;

pub const PUBLIC_KEY_TYPE: &str = "public-key";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CommandCode {
    MakeCredential = 0x01,
    GetAssertion = 0x02,
    GetInfo = 0x04,
    ClientPin = 0x06,
    Reset = 0x07,
    GetNextAssertion = 0x08,
}

impl CommandCode {
    pub fn from_u8(b: u8) -> Option<CommandCode> {
        Some(match b {
            0x01 => CommandCode::MakeCredential,
            0x02 => CommandCode::GetAssertion,
            0x04 => CommandCode::GetInfo,
            0x06 => CommandCode::ClientPin,
            0x07 => CommandCode::Reset,
            0x08 => CommandCode::GetNextAssertion,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            CommandCode::MakeCredential => "authenticatorMakeCredential",
            CommandCode::GetAssertion => "authenticatorGetAssertion",
            CommandCode::GetInfo => "authenticatorGetInfo",
            CommandCode::ClientPin => "authenticatorClientPIN",
            CommandCode::Reset => "authenticatorReset",
            CommandCode::GetNextAssertion => "authenticatorGetNextAssertion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpEntity {
    pub id: String,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserEntity {
    pub id: Vec<u8>,
    pub name: Option<String>,
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialParameter {
    pub cred_type: String,
    pub alg: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialDescriptor {
    pub cred_type: String,
    pub id: Vec<u8>,
    pub transports: Option<Vec<String>>,
}

impl CredentialDescriptor {
    pub fn public_key(id: Vec<u8>) -> Self {
        CredentialDescriptor { cred_type: PUBLIC_KEY_TYPE.to_owned(), id, transports: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MakeCredentialOptions {
    pub rk: Option<bool>,
    pub uv: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GetAssertionOptions {
    pub up: Option<bool>,
    pub uv: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MakeCredentialParameters {
    pub client_data_hash: [u8; 32],
    pub rp: RpEntity,
    pub user: UserEntity,
    pub pub_key_cred_params: Vec<CredentialParameter>,
    pub exclude_list: Option<Vec<CredentialDescriptor>>,
    pub options: MakeCredentialOptions,
    pub pin_auth: Option<[u8; 16]>,
    pub pin_protocol: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetAssertionParameters {
    pub rp_id: String,
    pub client_data_hash: [u8; 32],
    pub allow_list: Option<Vec<CredentialDescriptor>>,
    pub options: GetAssertionOptions,
    pub pin_auth: Option<[u8; 16]>,
    pub pin_protocol: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PinSubCommand {
    GetRetries = 0x01,
    GetKeyAgreement = 0x02,
    SetPin = 0x03,
    ChangePin = 0x04,
    GetPinToken = 0x05,
}

impl PinSubCommand {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => PinSubCommand::GetRetries,
            2 => PinSubCommand::GetKeyAgreement,
            3 => PinSubCommand::SetPin,
            4 => PinSubCommand::ChangePin,
            5 => PinSubCommand::GetPinToken,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPinParameters {
    pub pin_protocol: u8,
    pub sub_command: PinSubCommand,
    pub key_agreement: Option<CoseKey>,
    pub pin_auth: Option<[u8; 16]>,
    pub new_pin_enc: Option<Vec<u8>>,
    pub pin_hash_enc: Option<[u8; 16]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    MakeCredential(MakeCredentialParameters),
    GetAssertion(GetAssertionParameters),
    GetInfo,
    ClientPin(ClientPinParameters),
    Reset,
    GetNextAssertion,
}

impl Request {
    pub fn command(&self) -> CommandCode {
        match self {
            Request::MakeCredential(_) => CommandCode::MakeCredential,
            Request::GetAssertion(_) => CommandCode::GetAssertion,
            Request::GetInfo => CommandCode::GetInfo,
            Request::ClientPin(_) => CommandCode::ClientPin,
            Request::Reset => CommandCode::Reset,
            Request::GetNextAssertion => CommandCode::GetNextAssertion,
        }
    }

    /// Encode as `command byte || canonical CBOR map` (no map for the
    /// parameterless commands).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.command() as u8];
        let body = match self {
            Request::MakeCredential(p) => Some(p.to_value()),
            Request::GetAssertion(p) => Some(p.to_value()),
            Request::ClientPin(p) => Some(p.to_value()),
            Request::GetInfo | Request::Reset | Request::GetNextAssertion => None,
        };
        if let Some(body) = body {
            out.extend_from_slice(&body.to_vec());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Field extraction helpers. Missing → 0x14, wrong CBOR type → 0x11.

fn required<'a>(map: &'a Value, key: i128) -> Result<&'a Value, StatusCode> {
    map.get_int(key).ok_or(StatusCode::MissingParameter)
}

fn as_bytes(v: &Value) -> Result<&[u8], StatusCode> {
    v.as_bytes().ok_or(StatusCode::CborUnexpectedType)
}

fn as_text(v: &Value) -> Result<&str, StatusCode> {
    v.as_text().ok_or(StatusCode::CborUnexpectedType)
}

fn as_array(v: &Value) -> Result<&[Value], StatusCode> {
    v.as_array().ok_or(StatusCode::CborUnexpectedType)
}

fn as_int(v: &Value) -> Result<i128, StatusCode> {
    v.as_integer().ok_or(StatusCode::CborUnexpectedType)
}

fn fixed<const N: usize>(v: &Value) -> Result<[u8; N], StatusCode> {
    as_bytes(v)?.try_into().map_err(|_| StatusCode::InvalidParameter)
}

fn opt_text(map: &Value, key: &str) -> Result<Option<String>, StatusCode> {
    map.get_text(key).map(|v| as_text(v).map(str::to_owned)).transpose()
}

fn opt_bool(map: &Value, key: &str) -> Result<Option<bool>, StatusCode> {
    map.get_text(key)
        .map(|v| v.as_bool().ok_or(StatusCode::CborUnexpectedType))
        .transpose()
}

fn small_uint(v: &Value) -> Result<u8, StatusCode> {
    u8::try_from(as_int(v)?).map_err(|_| StatusCode::InvalidParameter)
}

fn ensure_map(v: &Value) -> Result<(), StatusCode> {
    v.as_map().map(|_| ()).ok_or(StatusCode::CborUnexpectedType)
}

impl RpEntity {
    fn from_value(v: &Value) -> Result<Self, StatusCode> {
        ensure_map(v)?;
        let id = as_text(v.get_text("id").ok_or(StatusCode::MissingParameter)?)?.to_owned();
        if id.is_empty() {
            return Err(StatusCode::InvalidParameter);
        }
        Ok(RpEntity { id, name: opt_text(v, "name")? })
    }

    fn to_value(&self) -> Value {
        MapBuilder::new()
            .insert("id", self.id.as_str())
            .insert_opt("name", self.name.clone())
            .build()
    }
}

impl UserEntity {
    pub fn from_value(v: &Value) -> Result<Self, StatusCode> {
        ensure_map(v)?;
        let id = as_bytes(v.get_text("id").ok_or(StatusCode::MissingParameter)?)?.to_vec();
        Ok(UserEntity {
            id,
            name: opt_text(v, "name")?,
            display_name: opt_text(v, "displayName")?,
        })
    }

    pub fn to_value(&self) -> Value {
        MapBuilder::new()
            .insert("id", self.id.clone())
            .insert_opt("name", self.name.clone())
            .insert_opt("displayName", self.display_name.clone())
            .build()
    }
}

impl CredentialParameter {
    fn from_value(v: &Value) -> Result<Self, StatusCode> {
        ensure_map(v)?;
        let cred_type = as_text(v.get_text("type").ok_or(StatusCode::MissingParameter)?)?.to_owned();
        let alg = as_int(v.get_text("alg").ok_or(StatusCode::MissingParameter)?)?;
        let alg = i64::try_from(alg).map_err(|_| StatusCode::InvalidParameter)?;
        Ok(CredentialParameter { cred_type, alg })
    }

    fn to_value(&self) -> Value {
        MapBuilder::new()
            .insert("alg", self.alg)
            .insert("type", self.cred_type.as_str())
            .build()
    }
}

impl CredentialDescriptor {
    pub fn from_value(v: &Value) -> Result<Self, StatusCode> {
        ensure_map(v)?;
        let cred_type = as_text(v.get_text("type").ok_or(StatusCode::MissingParameter)?)?.to_owned();
        let id = as_bytes(v.get_text("id").ok_or(StatusCode::MissingParameter)?)?.to_vec();
        if cred_type != PUBLIC_KEY_TYPE || id.is_empty() {
            return Err(StatusCode::InvalidParameter);
        }
        let transports = match v.get_text("transports") {
            None => None,
            Some(t) => Some(
                as_array(t)?
                    .iter()
                    .map(|s| as_text(s).map(str::to_owned))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        Ok(CredentialDescriptor { cred_type, id, transports })
    }

    pub fn to_value(&self) -> Value {
        let transports = self
            .transports
            .as_ref()
            .map(|t| Value::Array(t.iter().map(|s| Value::text(s.as_str())).collect()));
        MapBuilder::new()
            .insert("id", self.id.clone())
            .insert("type", self.cred_type.as_str())
            .insert_opt("transports", transports)
            .build()
    }
}

fn descriptor_list(v: &Value) -> Result<Vec<CredentialDescriptor>, StatusCode> {
    as_array(v)?.iter().map(CredentialDescriptor::from_value).collect()
}

fn descriptor_list_value(list: &[CredentialDescriptor]) -> Value {
    Value::Array(list.iter().map(CredentialDescriptor::to_value).collect())
}

impl MakeCredentialParameters {
    pub fn from_value(map: &Value) -> Result<Self, StatusCode> {
        ensure_map(map)?;
        let client_data_hash = fixed::<32>(required(map, 1)?)?;
        let rp = RpEntity::from_value(required(map, 2)?)?;
        let user = UserEntity::from_value(required(map, 3)?)?;
        let pub_key_cred_params = as_array(required(map, 4)?)?
            .iter()
            .map(CredentialParameter::from_value)
            .collect::<Result<Vec<_>, _>>()?;
        if pub_key_cred_params.is_empty() {
            return Err(StatusCode::InvalidParameter);
        }
        let exclude_list = map.get_int(5).map(descriptor_list).transpose()?;
        let options = match map.get_int(7) {
            None => MakeCredentialOptions::default(),
            Some(o) => {
                ensure_map(o)?;
                MakeCredentialOptions { rk: opt_bool(o, "rk")?, uv: opt_bool(o, "uv")? }
            }
        };
        let pin_auth = map.get_int(8).map(fixed::<16>).transpose()?;
        let pin_protocol = map.get_int(9).map(small_uint).transpose()?;
        Ok(MakeCredentialParameters {
            client_data_hash,
            rp,
            user,
            pub_key_cred_params,
            exclude_list,
            options,
            pin_auth,
            pin_protocol,
        })
    }

    pub fn to_value(&self) -> Value {
        let options = (self.options != MakeCredentialOptions::default()).then(|| {
            MapBuilder::new()
                .insert_opt("rk", self.options.rk)
                .insert_opt("uv", self.options.uv)
                .build()
        });
        MapBuilder::new()
            .insert(1, self.client_data_hash.to_vec())
            .insert(2, self.rp.to_value())
            .insert(3, self.user.to_value())
            .insert(
                4,
                Value::Array(self.pub_key_cred_params.iter().map(CredentialParameter::to_value).collect()),
            )
            .insert_opt(5, self.exclude_list.as_deref().map(descriptor_list_value))
            .insert_opt(7, options)
            .insert_opt(8, self.pin_auth.map(|p| p.to_vec()))
            .insert_opt(9, self.pin_protocol)
            .build()
    }
}

impl GetAssertionParameters {
    pub fn from_value(map: &Value) -> Result<Self, StatusCode> {
        ensure_map(map)?;
        let rp_id = as_text(required(map, 1)?)?.to_owned();
        if rp_id.is_empty() {
            return Err(StatusCode::InvalidParameter);
        }
        let client_data_hash = fixed::<32>(required(map, 2)?)?;
        let allow_list = map.get_int(3).map(descriptor_list).transpose()?;
        let options = match map.get_int(5) {
            None => GetAssertionOptions::default(),
            Some(o) => {
                ensure_map(o)?;
                GetAssertionOptions { up: opt_bool(o, "up")?, uv: opt_bool(o, "uv")? }
            }
        };
        let pin_auth = map.get_int(6).map(fixed::<16>).transpose()?;
        let pin_protocol = map.get_int(7).map(small_uint).transpose()?;
        Ok(GetAssertionParameters { rp_id, client_data_hash, allow_list, options, pin_auth, pin_protocol })
    }

    pub fn to_value(&self) -> Value {
        let options = (self.options != GetAssertionOptions::default()).then(|| {
            MapBuilder::new()
                .insert_opt("up", self.options.up)
                .insert_opt("uv", self.options.uv)
                .build()
        });
        MapBuilder::new()
            .insert(1, self.rp_id.as_str())
            .insert(2, self.client_data_hash.to_vec())
            .insert_opt(3, self.allow_list.as_deref().map(descriptor_list_value))
            .insert_opt(5, options)
            .insert_opt(6, self.pin_auth.map(|p| p.to_vec()))
            .insert_opt(7, self.pin_protocol)
            .build()
    }
}

impl ClientPinParameters {
    pub fn from_value(map: &Value) -> Result<Self, StatusCode> {
        ensure_map(map)?;
        let pin_protocol = small_uint(required(map, 1)?)?;
        let sub = small_uint(required(map, 2)?)?;
        let sub_command = PinSubCommand::from_u8(sub).ok_or(StatusCode::InvalidParameter)?;
        let key_agreement = map.get_int(3).map(CoseKey::from_value).transpose()?;
        let pin_auth = map.get_int(4).map(fixed::<16>).transpose()?;
        let new_pin_enc = map.get_int(5).map(|v| as_bytes(v).map(<[u8]>::to_vec)).transpose()?;
        let pin_hash_enc = map.get_int(6).map(fixed::<16>).transpose()?;

        let needs_key = matches!(
            sub_command,
            PinSubCommand::SetPin | PinSubCommand::ChangePin | PinSubCommand::GetPinToken
        );
        let needs_auth = matches!(sub_command, PinSubCommand::SetPin | PinSubCommand::ChangePin);
        let needs_hash = matches!(sub_command, PinSubCommand::ChangePin | PinSubCommand::GetPinToken);
        if (needs_key && key_agreement.is_none())
            || (needs_auth && (pin_auth.is_none() || new_pin_enc.is_none()))
            || (needs_hash && pin_hash_enc.is_none())
        {
            return Err(StatusCode::MissingParameter);
        }
        Ok(ClientPinParameters { pin_protocol, sub_command, key_agreement, pin_auth, new_pin_enc, pin_hash_enc })
    }

    pub fn to_value(&self) -> Value {
        MapBuilder::new()
            .insert(1, self.pin_protocol)
            .insert(2, self.sub_command as u8)
            .insert_opt(3, self.key_agreement.as_ref().map(CoseKey::to_value))
            .insert_opt(4, self.pin_auth.map(|p| p.to_vec()))
            .insert_opt(5, self.new_pin_enc.clone())
            .insert_opt(6, self.pin_hash_enc.map(|p| p.to_vec()))
            .build()
    }
}

/// Decode a CTAPHID_CBOR request payload: `command byte || CBOR map`.
pub fn decode_request(payload: &[u8]) -> Result<Request, StatusCode> {
    let (&cmd, body) = payload.split_first().ok_or(StatusCode::InvalidLength)?;
    let command = CommandCode::from_u8(cmd).ok_or(StatusCode::InvalidCommand)?;
    let parse_map = |body: &[u8]| -> Result<Value, StatusCode> {
        if body.is_empty() {
            return Err(StatusCode::MissingParameter);
        }
        let value = decode(body).map_err(|_| StatusCode::InvalidCbor)?;
        ensure_map(&value)?;
        Ok(value)
    };
    Ok(match command {
        CommandCode::MakeCredential => Request::MakeCredential(MakeCredentialParameters::from_value(&parse_map(body)?)?),
        CommandCode::GetAssertion => Request::GetAssertion(GetAssertionParameters::from_value(&parse_map(body)?)?),
        CommandCode::ClientPin => Request::ClientPin(ClientPinParameters::from_value(&parse_map(body)?)?),
        CommandCode::GetInfo => Request::GetInfo,
        CommandCode::Reset => Request::Reset,
        CommandCode::GetNextAssertion => Request::GetNextAssertion,
    })
}

// ---------------------------------------------------------------------------
// Responses

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetInfoResponse {
    pub versions: Vec<String>,
    pub aaguid: [u8; 16],
    pub options: BTreeMap<String, bool>,
    pub max_msg_size: u32,
    pub pin_protocols: Vec<u8>,
    pub algorithms: Vec<CredentialParameter>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedAttestation {
    pub alg: i64,
    pub sig: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MakeCredentialResponse {
    pub fmt: String,
    pub auth_data: Vec<u8>,
    pub att_stmt: PackedAttestation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetAssertionResponse {
    pub credential: CredentialDescriptor,
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
    pub user: Option<UserEntity>,
    pub number_of_credentials: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClientPinResponse {
    pub key_agreement: Option<CoseKey>,
    pub pin_token: Option<Vec<u8>>,
    pub retries: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    MakeCredential(MakeCredentialResponse),
    GetAssertion(GetAssertionResponse),
    GetNextAssertion(GetAssertionResponse),
    GetInfo(GetInfoResponse),
    ClientPin(ClientPinResponse),
    Reset,
}

impl Response {
    pub fn command(&self) -> CommandCode {
        match self {
            Response::MakeCredential(_) => CommandCode::MakeCredential,
            Response::GetAssertion(_) => CommandCode::GetAssertion,
            Response::GetNextAssertion(_) => CommandCode::GetNextAssertion,
            Response::GetInfo(_) => CommandCode::GetInfo,
            Response::ClientPin(_) => CommandCode::ClientPin,
            Response::Reset => CommandCode::Reset,
        }
    }

    fn body(&self) -> Option<Value> {
        match self {
            Response::MakeCredential(r) => Some(
                MapBuilder::new()
                    .insert(1, r.fmt.as_str())
                    .insert(2, r.auth_data.clone())
                    .insert(
                        3,
                        MapBuilder::new()
                            .insert("alg", r.att_stmt.alg)
                            .insert("sig", r.att_stmt.sig.clone())
                            .build(),
                    )
                    .build(),
            ),
            Response::GetAssertion(r) | Response::GetNextAssertion(r) => Some(
                MapBuilder::new()
                    .insert(1, r.credential.to_value())
                    .insert(2, r.auth_data.clone())
                    .insert(3, r.signature.clone())
                    .insert_opt(4, r.user.as_ref().map(UserEntity::to_value))
                    .insert_opt(5, r.number_of_credentials)
                    .build(),
            ),
            Response::GetInfo(r) => {
                let mut options = MapBuilder::new();
                for (k, v) in &r.options {
                    options = options.insert(k.as_str(), *v);
                }
                Some(
                    MapBuilder::new()
                        .insert(1, Value::Array(r.versions.iter().map(|v| Value::text(v.as_str())).collect()))
                        .insert(3, r.aaguid.to_vec())
                        .insert(4, options.build())
                        .insert(5, r.max_msg_size)
                        .insert(6, Value::Array(r.pin_protocols.iter().map(|p| Value::from(*p)).collect()))
                        .insert(
                            10,
                            Value::Array(r.algorithms.iter().map(CredentialParameter::to_value).collect()),
                        )
                        .build(),
                )
            }
            Response::ClientPin(r) => Some(
                MapBuilder::new()
                    .insert_opt(1, r.key_agreement.as_ref().map(CoseKey::to_value))
                    .insert_opt(2, r.pin_token.clone())
                    .insert_opt(3, r.retries)
                    .build(),
            ),
            Response::Reset => None,
        }
    }
}

/// `status || canonical CBOR body`. Error statuses and Reset carry no body.
pub fn encode_response(status: StatusCode, response: Option<&Response>) -> Vec<u8> {
    let mut out = vec![status.as_u8()];
    if status == StatusCode::Success {
        if let Some(body) = response.and_then(Response::body) {
            out.extend_from_slice(&body.to_vec());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResponseError {
    #[error("authenticator returned status {0}")]
    Status(StatusCode),
    #[error("authenticator returned unknown status 0x{0:02X}")]
    UnknownStatus(u8),
    #[error("empty response payload")]
    Empty,
    #[error("malformed response body: {0}")]
    Malformed(StatusCode),
}

impl ResponseError {
    /// The wire status byte, when the failure came from the authenticator.
    pub fn status_byte(&self) -> Option<u8> {
        match self {
            ResponseError::Status(s) => Some(s.as_u8()),
            ResponseError::UnknownStatus(b) => Some(*b),
            _ => None,
        }
    }
}

fn assertion_from(map: &Value) -> Result<GetAssertionResponse, StatusCode> {
    Ok(GetAssertionResponse {
        credential: CredentialDescriptor::from_value(required(map, 1)?)?,
        auth_data: as_bytes(required(map, 2)?)?.to_vec(),
        signature: as_bytes(required(map, 3)?)?.to_vec(),
        user: map.get_int(4).map(UserEntity::from_value).transpose()?,
        number_of_credentials: map
            .get_int(5)
            .map(|v| as_int(v).and_then(|n| u32::try_from(n).map_err(|_| StatusCode::InvalidParameter)))
            .transpose()?,
    })
}

fn decode_body(command: CommandCode, map: &Value) -> Result<Response, StatusCode> {
    Ok(match command {
        CommandCode::MakeCredential => {
            let att = required(map, 3)?;
            ensure_map(att)?;
            let alg = as_int(att.get_text("alg").ok_or(StatusCode::MissingParameter)?)? as i64;
            let sig = as_bytes(att.get_text("sig").ok_or(StatusCode::MissingParameter)?)?.to_vec();
            Response::MakeCredential(MakeCredentialResponse {
                fmt: as_text(required(map, 1)?)?.to_owned(),
                auth_data: as_bytes(required(map, 2)?)?.to_vec(),
                att_stmt: PackedAttestation { alg, sig },
            })
        }
        CommandCode::GetAssertion => Response::GetAssertion(assertion_from(map)?),
        CommandCode::GetNextAssertion => Response::GetNextAssertion(assertion_from(map)?),
        CommandCode::GetInfo => {
            let versions = as_array(required(map, 1)?)?
                .iter()
                .map(|v| as_text(v).map(str::to_owned))
                .collect::<Result<Vec<_>, _>>()?;
            let mut options = BTreeMap::new();
            if let Some(o) = map.get_int(4) {
                for (k, v) in o.as_map().ok_or(StatusCode::CborUnexpectedType)? {
                    options.insert(as_text(k)?.to_owned(), v.as_bool().ok_or(StatusCode::CborUnexpectedType)?);
                }
            }
            let pin_protocols = match map.get_int(6) {
                Some(v) => as_array(v)?.iter().map(small_uint).collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
            };
            let algorithms = match map.get_int(10) {
                Some(v) => as_array(v)?.iter().map(CredentialParameter::from_value).collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
            };
            Response::GetInfo(GetInfoResponse {
                versions,
                aaguid: fixed::<16>(required(map, 3)?)?,
                options,
                max_msg_size: map
                    .get_int(5)
                    .map(|v| as_int(v).map(|n| n as u32))
                    .transpose()?
                    .unwrap_or(0),
                pin_protocols,
                algorithms,
            })
        }
        CommandCode::ClientPin => Response::ClientPin(ClientPinResponse {
            key_agreement: map.get_int(1).map(CoseKey::from_value).transpose()?,
            pin_token: map.get_int(2).map(|v| as_bytes(v).map(<[u8]>::to_vec)).transpose()?,
            retries: map.get_int(3).map(small_uint).transpose()?,
        }),
        CommandCode::Reset => Response::Reset,
    })
}

/// Client-side decoding of a `status || body` response for `command`.
pub fn decode_response(command: CommandCode, payload: &[u8]) -> Result<Response, ResponseError> {
    let (&status, body) = payload.split_first().ok_or(ResponseError::Empty)?;
    match StatusCode::from_u8(status) {
        Some(StatusCode::Success) => {}
        Some(code) => return Err(ResponseError::Status(code)),
        None => return Err(ResponseError::UnknownStatus(status)),
    }
    if body.is_empty() {
        return match command {
            CommandCode::Reset => Ok(Response::Reset),
            CommandCode::ClientPin => Ok(Response::ClientPin(ClientPinResponse::default())),
            _ => Err(ResponseError::Malformed(StatusCode::MissingParameter)),
        };
    }
    let map = decode(body).map_err(|_| ResponseError::Malformed(StatusCode::InvalidCbor))?;
    ensure_map(&map).map_err(ResponseError::Malformed)?;
    decode_body(command, &map).map_err(ResponseError::Malformed)
}
