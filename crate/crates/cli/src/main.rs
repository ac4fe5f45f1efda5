use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use vauth_client::{
    change_pin, client_assert, client_register, get_info, pin_retries, pin_token, reset, set_pin, ClientError, ClientState,
    HidClient, RegisterOptions,
};
use vauth_core::cbor::messages::UserEntity;
use vauth_core::config::{Config, ConfigError};
use vauth_core::daemon::start_socket_daemon;
use vauth_core::device::ShutdownHandle;
use vauth_core::logging::Sink;
use vauth_core::policy::{policy_from_spec, Interactive, PresencePolicy};
use vauth_core::transport::SocketClient;

const PASSWORD_ENV: &str = "VAUTH_PASSWORD";

#[derive(Parser)]
#[command(name = "vauth", version, about = "Virtual CTAP2 authenticator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the authenticator until interrupted
    Daemon(DaemonArgs),
    /// Talk to a running daemon
    Client(ClientArgs),
    /// Print the effective configuration
    Config {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct DaemonArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    socket: Option<PathBuf>,
    /// auto-approve, auto-deny, interactive or scripted:<y|n>*[@ms]
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    socket: Option<PathBuf>,
    /// Where registered credentials are remembered
    #[arg(long, default_value = "vauth-client.json")]
    state: PathBuf,
    #[arg(long, default_value_t = 35)]
    timeout_secs: u64,
    #[command(subcommand)]
    action: ClientAction,
}

#[derive(Subcommand)]
enum ClientAction {
    Ping {
        #[arg(default_value = "ping")]
        data: String,
    },
    Wink,
    Info,
    Register {
        #[arg(long)]
        rp: String,
        #[arg(long)]
        user: String,
        #[arg(long)]
        resident: Option<bool>,
        /// Obtain a PIN token first; prompts for the PIN
        #[arg(long)]
        pin: bool,
    },
    Assert {
        #[arg(long)]
        rp: String,
        /// Hex credential id for an allow list
        #[arg(long)]
        credential: Option<String>,
        #[arg(long)]
        pin: bool,
    },
    Pin {
        #[command(subcommand)]
        action: PinAction,
    },
    Reset,
}

#[derive(Subcommand)]
enum PinAction {
    Set,
    Change,
    Retries,
    Token,
}

#[derive(Debug)]
struct Failure {
    message: String,
    code: u8,
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure { code: e.code().unwrap_or(1), message: e.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure { message: message.into(), code: 1 }
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<Config, Failure> {
    let mut config = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| fail(format!("expected KEY=VALUE, got '{o}'")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(config)
}

fn secret(prompt: &str) -> Result<String, Failure> {
    rpassword::prompt_password(prompt).map_err(|e| fail(format!("reading secret: {e}")))
}

fn daemon(args: DaemonArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_ref(), &args.overrides)?;
    if let Some(s) = args.socket {
        config.socket_path = s;
    }
    if let Some(p) = args.policy {
        config.set("policy", &p)?;
    }
    if let Some(d) = args.log_dir {
        config.log_dir = Some(d);
    }
    let policy: Arc<dyn PresencePolicy> = if config.policy == "interactive" {
        Arc::new(Interactive::terminal().with_secret_reader(Box::new(|q| rpassword::prompt_password(q))))
    } else {
        policy_from_spec(&config.policy).map_err(fail)?
    };
    let password = std::env::var(PASSWORD_ENV).ok();

    let shutdown = ShutdownHandle::new();
    let on_signal = shutdown.clone();
    ctrlc::set_handler(move || on_signal.request()).map_err(|e| fail(format!("signal handler: {e}")))?;

    let (handle, log) = start_socket_daemon(&config, policy, password, shutdown).map_err(|e| fail(e.to_string()))?;
    eprintln!("vauth: listening on {}", config.socket_path.display());
    handle.wait();
    drop(handle.stop());
    log.log(Sink::Debug, "shutting down");
    let _ = log.archive();
    Ok(())
}

fn client(args: ClientArgs) -> Result<(), Failure> {
    let socket = match (args.socket, &args.config) {
        (Some(s), _) => s,
        (None, Some(c)) => Config::load(c)?.socket_path,
        (None, None) => Config::default().socket_path,
    };
    let transport = SocketClient::connect(&socket).map_err(|e| fail(format!("{}: {e}", socket.display())))?;
    let mut c = HidClient::new(transport);
    c.set_timeout(Duration::from_secs(args.timeout_secs));
    c.init()?;
    let mut state = if args.state.exists() { ClientState::load(&args.state)? } else { ClientState::default() };

    match args.action {
        ClientAction::Ping { data } => {
            let echo = c.ping(data.as_bytes())?;
            println!("{}", String::from_utf8_lossy(&echo));
        }
        ClientAction::Wink => c.wink()?,
        ClientAction::Info => println!("{:#?}", get_info(&mut c)?),
        ClientAction::Register { rp, user, resident, pin } => {
            let pin = pin.then(|| secret("PIN: ")).transpose()?;
            let entity = UserEntity { id: user.as_bytes().to_vec(), name: Some(user.clone()), display_name: None };
            let options = RegisterOptions { resident, pin, ..Default::default() };
            let reg = client_register(&mut c, &mut state, &rp, entity, &options)?;
            state.save(&args.state)?;
            println!("registered {} counter {}", hex::encode(&reg.record.credential_id), reg.record.counter);
        }
        ClientAction::Assert { rp, credential, pin } => {
            let id = credential
                .map(|h| hex::decode(h).map_err(|e| fail(format!("credential id: {e}"))))
                .transpose()?;
            let pin = pin.then(|| secret("PIN: ")).transpose()?;
            let reports = client_assert(&mut c, &mut state, &rp, id.as_deref(), pin.as_deref())?;
            state.save(&args.state)?;
            for r in reports {
                let name = r.user.and_then(|u| u.name).unwrap_or_default();
                println!("verified {} counter {} flags 0x{:02x} {name}", hex::encode(&r.credential_id), r.counter, r.flags);
            }
        }
        ClientAction::Pin { action } => match action {
            PinAction::Set => set_pin(&mut c, &secret("new PIN: ")?)?,
            PinAction::Change => change_pin(&mut c, &secret("current PIN: ")?, &secret("new PIN: ")?)?,
            PinAction::Retries => println!("{}", pin_retries(&mut c)?),
            PinAction::Token => println!("{}", hex::encode(pin_token(&mut c, &secret("PIN: ")?)?)),
        },
        ClientAction::Reset => {
            reset(&mut c, &mut state)?;
            state.save(&args.state)?;
            println!("reset");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Daemon(a) => daemon(a),
        Command::Client(a) => client(a),
        Command::Config { config, overrides } => load_config(config.as_ref(), &overrides).map(|c| print!("{c}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("vauth: {}", f.message);
            ExitCode::from(f.code.max(1))
        }
    }
}
