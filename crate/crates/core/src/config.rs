//! Daemon configuration: flat `key = value` lines, `#` comments.
//!
//! ```text
//! storage_path = vauth-store.json
//! backend = plaintext            # or encrypted
//! resident_default = true
//! transport = socket             # or loopback (in-process only)
//! socket_path = /tmp/vauth.sock
//! log_dir = logs                 # empty disables logging
//! aaguid = 00000000000000000000000000000000
//! crypto_provider = software     # or tpm
//! tpm_dir = tpm
//! tpm_user = vauth
//! policy = auto-approve
//! keepalive_interval_ms = 100
//! kdf_iterations = 600000
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::storage::{DEFAULT_KDF_ITERATIONS, MAX_KDF_ITERATIONS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("line {line}: bad value for {key}: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Plaintext,
    Encrypted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Socket,
    Loopback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Software,
    Tpm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub storage_path: PathBuf,
    pub backend: BackendKind,
    pub resident_default: bool,
    pub transport: TransportKind,
    pub socket_path: PathBuf,
    pub log_dir: Option<PathBuf>,
    pub aaguid: [u8; 16],
    pub crypto_provider: ProviderKind,
    pub tpm_dir: PathBuf,
    pub tpm_user: String,
    pub policy: String,
    pub keepalive_interval_ms: u64,
    pub kdf_iterations: u32,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            storage_path: PathBuf::from("vauth-store.json"),
            backend: BackendKind::Plaintext,
            resident_default: true,
            transport: TransportKind::Socket,
            socket_path: std::env::temp_dir().join("vauth.sock"),
            log_dir: Some(PathBuf::from("logs")),
            aaguid: [0; 16],
            crypto_provider: ProviderKind::Software,
            tpm_dir: PathBuf::from("tpm"),
            tpm_user: "vauth".into(),
            policy: "auto-approve".into(),
            keepalive_interval_ms: 100,
            kdf_iterations: DEFAULT_KDF_ITERATIONS,
        }
    }
}

pub const KEYS: [&str; 13] = [
    "storage_path",
    "backend",
    "resident_default",
    "transport",
    "socket_path",
    "log_dir",
    "aaguid",
    "crypto_provider",
    "tpm_dir",
    "tpm_user",
    "policy",
    "keepalive_interval_ms",
    "kdf_iterations",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            config.set_at(key.trim(), value.trim(), line)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
        Config::parse(&text)
    }

    /// Apply one override, as from the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(key, value, 0)
    }

    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue { line, key: key.to_owned(), reason };
        match key {
            "storage_path" => self.storage_path = value.into(),
            "backend" => {
                self.backend = match value {
                    "plaintext" => BackendKind::Plaintext,
                    "encrypted" => BackendKind::Encrypted,
                    _ => return Err(bad("expected plaintext or encrypted".into())),
                }
            }
            "resident_default" => self.resident_default = parse_bool(value).map_err(bad)?,
            "transport" => {
                self.transport = match value {
                    "socket" => TransportKind::Socket,
                    "loopback" => TransportKind::Loopback,
                    _ => return Err(bad("expected socket or loopback".into())),
                }
            }
            "socket_path" => self.socket_path = value.into(),
            "log_dir" => self.log_dir = (!value.is_empty()).then(|| value.into()),
            "aaguid" => {
                let bytes = hex::decode(value.replace('-', "")).map_err(|e| bad(e.to_string()))?;
                self.aaguid = bytes.try_into().map_err(|_| bad("expected 16 bytes of hex".into()))?;
            }
            "crypto_provider" => {
                self.crypto_provider = match value {
                    "software" => ProviderKind::Software,
                    "tpm" => ProviderKind::Tpm,
                    _ => return Err(bad("expected software or tpm".into())),
                }
            }
            "tpm_dir" => self.tpm_dir = value.into(),
            "tpm_user" => {
                if value.is_empty() {
                    return Err(bad("must not be empty".into()));
                }
                self.tpm_user = value.into();
            }
            "policy" => {
                crate::policy::policy_from_spec(value).map_err(bad)?;
                self.policy = value.into();
            }
            "keepalive_interval_ms" => {
                let ms: u64 = value.parse().map_err(|_| bad("expected milliseconds".into()))?;
                if ms == 0 {
                    return Err(bad("must be positive".into()));
                }
                self.keepalive_interval_ms = ms;
            }
            "kdf_iterations" => {
                let n: u32 = value.parse().map_err(|_| bad("expected an integer".into()))?;
                if n == 0 || n > MAX_KDF_ITERATIONS {
                    return Err(bad(format!("must be in 1..={MAX_KDF_ITERATIONS}")));
                }
                self.kdf_iterations = n;
            }
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_owned() }),
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let backend = match self.backend {
            BackendKind::Plaintext => "plaintext",
            BackendKind::Encrypted => "encrypted",
        };
        let transport = match self.transport {
            TransportKind::Socket => "socket",
            TransportKind::Loopback => "loopback",
        };
        let provider = match self.crypto_provider {
            ProviderKind::Software => "software",
            ProviderKind::Tpm => "tpm",
        };
        writeln!(f, "storage_path = {}", self.storage_path.display())?;
        writeln!(f, "backend = {backend}")?;
        writeln!(f, "resident_default = {}", self.resident_default)?;
        writeln!(f, "transport = {transport}")?;
        writeln!(f, "socket_path = {}", self.socket_path.display())?;
        writeln!(f, "log_dir = {}", self.log_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default())?;
        writeln!(f, "aaguid = {}", hex::encode(self.aaguid))?;
        writeln!(f, "crypto_provider = {provider}")?;
        writeln!(f, "tpm_dir = {}", self.tpm_dir.display())?;
        writeln!(f, "tpm_user = {}", self.tpm_user)?;
        writeln!(f, "policy = {}", self.policy)?;
        writeln!(f, "keepalive_interval_ms = {}", self.keepalive_interval_ms)?;
        writeln!(f, "kdf_iterations = {}", self.kdf_iterations)
    }
}
