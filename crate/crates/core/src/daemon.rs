//! Assembles an authenticator from a [`Config`] and serves it.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::authenticator::{Authenticator, AuthenticatorConfig, UvMode};
use crate::config::{BackendKind, Config, ProviderKind, TransportKind};
use crate::crypto::{Es256Provider, ProviderRegistry, TpmEs256Provider};
use crate::ctaphid::LayerConfig;
use crate::device::{spawn_device, DeviceHandle, ShutdownHandle};
use crate::logging::{LogHub, Sink};
use crate::policy::{policy_from_spec, PresencePolicy};
use crate::storage::{Backend, FileStore, StorageError};
use crate::transport::{SocketServer, Transport};

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("log directory: {0}")]
    Logging(std::io::Error),
    #[error("storage: {0}")]
    Storage(#[from] StorageError),
    #[error("storage password required for the encrypted backend")]
    NoPassword,
    #[error("crypto provider: {0}")]
    Crypto(#[from] crate::crypto::CryptoError),
    #[error("bind {path}: {source}")]
    Bind { path: String, source: std::io::Error },
    #[error("policy: {0}")]
    Policy(String),
    #[error("the loopback transport needs an in-process client")]
    LoopbackNeedsClient,
}

/// Everything needed to serve except the transport.
pub struct Prepared {
    pub authenticator: Authenticator,
    pub log: Arc<LogHub>,
    pub layer: LayerConfig,
}

/// Open logs, storage and the crypto provider. For the encrypted backend
/// the password comes from `password` or else from the policy.
pub fn prepare(config: &Config, policy: Arc<dyn PresencePolicy>, password: Option<String>) -> Result<Prepared, DaemonError> {
    let log = Arc::new(match &config.log_dir {
        Some(dir) => LogHub::open(dir, false).map_err(DaemonError::Logging)?,
        None => LogHub::disabled(),
    });
    let mut rng = rand::rngs::OsRng;
    let (backend, secret) = match config.backend {
        BackendKind::Plaintext => (Backend::Plaintext, None),
        BackendKind::Encrypted => {
            let pw = password
                .or_else(|| policy.request_password("storage"))
                .filter(|p| !p.is_empty())
                .ok_or(DaemonError::NoPassword)?;
            (Backend::encrypted_with_iterations(&pw, config.kdf_iterations), Some(pw))
        }
    };
    let store = FileStore::open_or_init(&config.storage_path, backend, &mut rng)?;
    log.log(Sink::Debug, &format!("storage {} opened", config.storage_path.display()));

    let registry = match config.crypto_provider {
        ProviderKind::Software => ProviderRegistry::with_provider(Arc::new(Es256Provider)),
        ProviderKind::Tpm => {
            std::fs::create_dir_all(&config.tpm_dir).map_err(|e| StorageError::io(&config.tpm_dir, e))?;
            let auth = secret.as_deref().unwrap_or("").as_bytes().to_vec();
            let provider = TpmEs256Provider::open(&config.tpm_dir, &config.tpm_user, &auth, None)?;
            ProviderRegistry::with_provider(Arc::new(provider))
        }
    };

    let auth_config = AuthenticatorConfig {
        aaguid: config.aaguid,
        resident_default: config.resident_default,
        uv_mode: if secret.is_some() { UvMode::Password } else { UvMode::PinOnly },
        ..AuthenticatorConfig::default()
    };
    let authenticator = Authenticator::new(auth_config, registry, Box::new(store), policy, Box::new(rand::rngs::OsRng), log.clone());
    let layer = LayerConfig { keepalive_interval: Duration::from_millis(config.keepalive_interval_ms), ..LayerConfig::default() };
    Ok(Prepared { authenticator, log, layer })
}

impl Prepared {
    pub fn serve(self, transport: Arc<dyn Transport>, shutdown: ShutdownHandle) -> DeviceHandle {
        self.log.log(Sink::Debug, "serving");
        spawn_device(transport, self.authenticator, self.layer, self.log, shutdown)
    }
}

/// Start serving with the configured socket. Returns once bound.
pub fn start_socket_daemon(
    config: &Config,
    policy: Arc<dyn PresencePolicy>,
    password: Option<String>,
    shutdown: ShutdownHandle,
) -> Result<(DeviceHandle, Arc<LogHub>), DaemonError> {
    if config.transport == TransportKind::Loopback {
        return Err(DaemonError::LoopbackNeedsClient);
    }
    let prepared = prepare(config, policy, password)?;
    let server = bind(&config.socket_path)?;
    let log = prepared.log.clone();
    log.log(Sink::Debug, &format!("listening on {}", config.socket_path.display()));
    Ok((prepared.serve(Arc::new(server), shutdown), log))
}

fn bind(path: &Path) -> Result<SocketServer, DaemonError> {
    SocketServer::bind(path).map_err(|source| DaemonError::Bind { path: path.display().to_string(), source })
}

/// Serve until the policy or `shutdown` asks to stop, then archive logs.
pub fn run_daemon(config: &Config, password: Option<String>, shutdown: ShutdownHandle) -> Result<(), DaemonError> {
    let policy = policy_from_spec(&config.policy).map_err(DaemonError::Policy)?;
    let (handle, log) = start_socket_daemon(config, policy, password, shutdown)?;
    handle.wait();
    drop(handle.stop());
    log.log(Sink::Debug, "shutting down");
    let _ = log.archive();
    Ok(())
}
