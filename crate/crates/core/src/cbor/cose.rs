//! COSE_Key encoding for EC2 P-256 public keys.

use p256::elliptic_curve::sec1::{EncodedPoint, FromEncodedPoint};
use p256::{AffinePoint, NistP256};

use super::value::{MapBuilder, Value};
use crate::status::StatusCode;

pub const KTY_EC2: i128 = 2;
pub const CRV_P256: i128 = 1;
pub const ALG_ES256: i64 = -7;
/// ECDH-ES + HKDF-256, used for the PIN protocol key agreement key.
pub const ALG_ECDH_ES_HKDF_256: i64 = -25;

const LABEL_KTY: i128 = 1;
const LABEL_ALG: i128 = 3;
const LABEL_CRV: i128 = -1;
const LABEL_X: i128 = -2;
const LABEL_Y: i128 = -3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    P256,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoseKey {
    pub alg: i64,
    pub x: [u8; 32],
    pub y: [u8; 32],
}

impl CoseKey {
    pub fn to_value(&self) -> Value {
        MapBuilder::new()
            .insert(Value::Integer(LABEL_KTY), Value::Integer(KTY_EC2))
            .insert(Value::Integer(LABEL_ALG), self.alg)
            .insert(Value::Integer(LABEL_CRV), Value::Integer(CRV_P256))
            .insert(Value::Integer(LABEL_X), Value::bytes(self.x.to_vec()))
            .insert(Value::Integer(LABEL_Y), Value::bytes(self.y.to_vec()))
            .build()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_value().to_vec()
    }

    /// Uncompressed SEC1 encoding (0x04 || x || y).
    pub fn to_sec1(&self) -> [u8; 65] {
        let mut out = [0u8; 65];
        out[0] = 0x04;
        out[1..33].copy_from_slice(&self.x);
        out[33..].copy_from_slice(&self.y);
        out
    }

    pub fn from_value(value: &Value) -> Result<CoseKey, StatusCode> {
        let (_, x, y) = cose_ec2_decode(value)?;
        let alg = value
            .get_int(LABEL_ALG)
            .and_then(Value::as_integer)
            .ok_or(StatusCode::MissingParameter)?;
        Ok(CoseKey { alg: alg as i64, x, y })
    }

    pub fn to_affine(&self) -> AffinePoint {
        point_from_coordinates(&self.x, &self.y).expect("CoseKey always holds an on-curve point")
    }
}

fn point_from_coordinates(x: &[u8; 32], y: &[u8; 32]) -> Option<AffinePoint> {
    let encoded = EncodedPoint::<NistP256>::from_affine_coordinates(x.into(), y.into(), false);
    Option::from(AffinePoint::from_encoded_point(&encoded))
}

pub fn is_on_curve(x: &[u8; 32], y: &[u8; 32]) -> bool {
    point_from_coordinates(x, y).is_some()
}

fn coordinate(value: &Value, label: i128) -> Result<[u8; 32], StatusCode> {
    let raw = value.get_int(label).ok_or(StatusCode::MissingParameter)?;
    let bytes = raw.as_bytes().ok_or(StatusCode::CborUnexpectedType)?;
    bytes.try_into().map_err(|_| StatusCode::InvalidParameter)
}

/// Decode an EC2 COSE key, accepting ES256 and the ECDH-ES+HKDF-256
/// algorithm used by the PIN protocol. Off-curve points are rejected.
pub fn cose_ec2_decode(value: &Value) -> Result<(Curve, [u8; 32], [u8; 32]), StatusCode> {
    if value.as_map().is_none() {
        return Err(StatusCode::CborUnexpectedType);
    }
    let kty = value
        .get_int(LABEL_KTY)
        .ok_or(StatusCode::MissingParameter)?
        .as_integer()
        .ok_or(StatusCode::CborUnexpectedType)?;
    let crv = value
        .get_int(LABEL_CRV)
        .ok_or(StatusCode::MissingParameter)?
        .as_integer()
        .ok_or(StatusCode::CborUnexpectedType)?;
    if kty != KTY_EC2 || crv != CRV_P256 {
        return Err(StatusCode::UnsupportedAlgorithm);
    }
    if let Some(alg) = value.get_int(LABEL_ALG) {
        let alg = alg.as_integer().ok_or(StatusCode::CborUnexpectedType)?;
        if alg != ALG_ES256 as i128 && alg != ALG_ECDH_ES_HKDF_256 as i128 {
            return Err(StatusCode::UnsupportedAlgorithm);
        }
    }
    let x = coordinate(value, LABEL_X)?;
    let y = coordinate(value, LABEL_Y)?;
    if !is_on_curve(&x, &y) {
        return Err(StatusCode::InvalidParameter);
    }
    Ok((Curve::P256, x, y))
}
