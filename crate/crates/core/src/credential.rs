//! The authenticator-side credential record.

use crate::cbor::messages::{UserEntity, PUBLIC_KEY_TYPE};
use crate::cbor::value::{decode, MapBuilder, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialSource {
    /// Empty inside a wrapped (non-resident) id; filled in after unwrap.
    pub id: Vec<u8>,
    pub rp_id: String,
    pub rp_name: Option<String>,
    pub user: UserEntity,
    pub alg: i64,
    /// Provider-specific encoded private key.
    pub key: Vec<u8>,
    /// Signature counter value at creation; orders credentials per RP.
    pub created: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("credential source encoding is invalid: {0}")]
pub struct CredentialDecodeError(pub &'static str);

impl CredentialSource {
    pub fn serialize(&self) -> Vec<u8> {
        MapBuilder::new()
            .insert(1, PUBLIC_KEY_TYPE)
            .insert(2, self.id.clone())
            .insert(3, self.rp_id.as_str())
            .insert_opt(4, self.rp_name.clone())
            .insert(5, self.user.to_value())
            .insert(6, self.alg)
            .insert(7, self.key.clone())
            .insert(8, Value::Integer(self.created as i128))
            .build()
            .to_vec()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<CredentialSource, CredentialDecodeError> {
        let v = decode(bytes).map_err(|_| CredentialDecodeError("not CBOR"))?;
        if v.get_int(1).and_then(Value::as_text) != Some(PUBLIC_KEY_TYPE) {
            return Err(CredentialDecodeError("type"));
        }
        let bytes_field = |k, what| v.get_int(k).and_then(Value::as_bytes).map(<[u8]>::to_vec).ok_or(CredentialDecodeError(what));
        let int_field = |k, what| v.get_int(k).and_then(Value::as_integer).ok_or(CredentialDecodeError(what));
        let rp_name = match v.get_int(4) {
            None => None,
            Some(n) => Some(n.as_text().ok_or(CredentialDecodeError("rp name"))?.to_owned()),
        };
        Ok(CredentialSource {
            id: bytes_field(2, "id")?,
            rp_id: v.get_int(3).and_then(Value::as_text).ok_or(CredentialDecodeError("rp id"))?.to_owned(),
            rp_name,
            user: UserEntity::from_value(v.get_int(5).ok_or(CredentialDecodeError("user"))?)
                .map_err(|_| CredentialDecodeError("user"))?,
            alg: i64::try_from(int_field(6, "alg")?).map_err(|_| CredentialDecodeError("alg"))?,
            key: bytes_field(7, "key")?,
            created: u64::try_from(int_field(8, "created")?).map_err(|_| CredentialDecodeError("created"))?,
        })
    }
}
