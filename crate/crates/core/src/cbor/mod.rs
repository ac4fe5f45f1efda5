//! CBOR codec, COSE keys and the CTAP2 message models.

pub mod cose;
pub mod messages;
pub mod value;

pub use value::{decode, decode_prefix, encode, DecodeError, MapBuilder, Value};
