#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use vauth_core::authenticator::{default_registry, Authenticator, AuthenticatorConfig};
use vauth_core::cbor::messages::UserEntity;
use vauth_core::crypto::ProviderRegistry;
use vauth_core::ctaphid::LayerConfig;
use vauth_core::device::{spawn_device, DeviceHandle, ShutdownHandle};
use vauth_core::logging::LogHub;
use vauth_core::policy::{AutoApprove, PresencePolicy};
use vauth_core::storage::{AuthenticatorStorage, MemoryStore};
use vauth_core::transport::{loopback_pair, Loopback, SocketServer, Transport};

pub fn user(n: u8) -> UserEntity {
    UserEntity { id: vec![n; 8], name: Some(format!("user{n}")), display_name: Some(format!("User {n}")) }
}

pub struct Setup {
    pub policy: Arc<dyn PresencePolicy>,
    pub registry: ProviderRegistry,
    pub storage: Box<dyn AuthenticatorStorage>,
    pub seed: u64,
    pub config: AuthenticatorConfig,
    pub log: Arc<LogHub>,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            policy: Arc::new(AutoApprove),
            registry: default_registry(),
            storage: Box::new(MemoryStore::new([0x5A; 32])),
            seed: 7,
            config: AuthenticatorConfig::default(),
            log: Arc::new(LogHub::disabled()),
        }
    }
}

impl Setup {
    pub fn authenticator(self) -> (Authenticator, Arc<LogHub>) {
        let rng = rand_chacha::ChaCha20Rng::seed_from_u64(self.seed);
        let log = self.log.clone();
        (Authenticator::new(self.config, self.registry, self.storage, self.policy, Box::new(rng), self.log), log)
    }

    pub fn on_loopback(self) -> (DeviceHandle, Loopback) {
        let (dev, client) = loopback_pair();
        (self.serve(Arc::new(dev)), client)
    }

    pub fn on_socket(self, path: &Path) -> DeviceHandle {
        let server = SocketServer::bind(path).expect("bind socket");
        self.serve(Arc::new(server))
    }

    pub fn serve(self, transport: Arc<dyn Transport>) -> DeviceHandle {
        let (auth, log) = self.authenticator();
        spawn_device(transport, auth, LayerConfig::default(), log, ShutdownHandle::new())
    }
}
