pub mod authenticator;
pub mod cbor;
pub mod config;
pub mod credential;
pub mod ctaphid;
pub mod crypto;
pub mod daemon;
pub mod device;
pub mod hid;
pub mod logging;
pub mod policy;
pub mod status;
pub mod storage;
pub mod tpm;
pub mod transport;
