//! User presence and verification policies.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

/// Set by the transaction layer when the host sends CTAPHID_CANCEL.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    MakeCredential,
    GetAssertion,
    Reset,
}

impl Operation {
    pub fn label(self) -> &'static str {
        match self {
            Operation::MakeCredential => "register",
            Operation::GetAssertion => "sign in",
            Operation::Reset => "reset authenticator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub operation: Operation,
    pub rp_id: Option<String>,
    pub user_name: Option<String>,
}

impl Prompt {
    pub fn describe(&self) -> String {
        let mut s = self.operation.label().to_string();
        if let Some(rp) = &self.rp_id {
            s.push_str(&format!(" at {rp}"));
        }
        if let Some(user) = &self.user_name {
            s.push_str(&format!(" as {user}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Approve,
    Deny,
    Cancelled,
    /// The policy could not produce a decision (scripted list exhausted).
    Error(String),
}

pub trait PresencePolicy: Send + Sync {
    fn confirm_presence(&self, prompt: &Prompt, cancel: &CancelToken) -> Decision;

    /// Identity check for password-based user verification. Policies that
    /// cannot collect a password refuse.
    fn verify_user(&self, _prompt: &Prompt, _check: &dyn Fn(&str) -> bool, _cancel: &CancelToken) -> Decision {
        Decision::Deny
    }

    fn request_password(&self, _purpose: &str) -> Option<String> {
        None
    }

    fn shutdown_requested(&self) -> bool {
        false
    }
}

#[derive(Debug, Default)]
pub struct AutoApprove;

impl PresencePolicy for AutoApprove {
    fn confirm_presence(&self, _prompt: &Prompt, cancel: &CancelToken) -> Decision {
        if cancel.is_cancelled() {
            Decision::Cancelled
        } else {
            Decision::Approve
        }
    }

    fn verify_user(&self, prompt: &Prompt, _check: &dyn Fn(&str) -> bool, cancel: &CancelToken) -> Decision {
        self.confirm_presence(prompt, cancel)
    }
}

#[derive(Debug, Default)]
pub struct AutoDeny;

impl PresencePolicy for AutoDeny {
    fn confirm_presence(&self, _prompt: &Prompt, _cancel: &CancelToken) -> Decision {
        Decision::Deny
    }
}

/// Sleep for `delay`, waking early on cancel. Returns false if cancelled.
fn wait(delay: Duration, cancel: &CancelToken) -> bool {
    let deadline = Instant::now() + delay;
    loop {
        if cancel.is_cancelled() {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(5)));
    }
}

/// Replays a fixed list of approve/deny answers, optionally after a delay.
#[derive(Debug)]
pub struct Scripted {
    decisions: Mutex<VecDeque<bool>>,
    delay: Duration,
    password: Option<String>,
}

impl Scripted {
    pub fn new(decisions: impl IntoIterator<Item = bool>, delay: Duration) -> Self {
        Scripted { decisions: Mutex::new(decisions.into_iter().collect()), delay, password: None }
    }

    /// Password answered to verification and password prompts.
    pub fn with_password(mut self, password: &str) -> Self {
        self.password = Some(password.to_owned());
        self
    }

    pub fn remaining(&self) -> usize {
        self.decisions.lock().len()
    }
}

impl PresencePolicy for Scripted {
    fn confirm_presence(&self, _prompt: &Prompt, cancel: &CancelToken) -> Decision {
        if !wait(self.delay, cancel) {
            return Decision::Cancelled;
        }
        match self.decisions.lock().pop_front() {
            Some(true) => Decision::Approve,
            Some(false) => Decision::Deny,
            None => Decision::Error("scripted policy has no decisions left".into()),
        }
    }

    fn verify_user(&self, prompt: &Prompt, check: &dyn Fn(&str) -> bool, cancel: &CancelToken) -> Decision {
        match self.confirm_presence(prompt, cancel) {
            Decision::Approve => match &self.password {
                Some(pw) if check(pw) => Decision::Approve,
                _ => Decision::Deny,
            },
            other => other,
        }
    }

    fn request_password(&self, _purpose: &str) -> Option<String> {
        self.password.clone()
    }
}

type SecretReader = Box<dyn Fn(&str) -> std::io::Result<String> + Send + Sync>;

/// Terminal prompt. Answers: `y` approve, `n` deny, `q` deny and request
/// daemon shutdown.
pub struct Interactive {
    io: Mutex<(Box<dyn BufRead + Send>, Box<dyn Write + Send>)>,
    secret_reader: Option<SecretReader>,
    shutdown: AtomicBool,
}

impl Interactive {
    pub fn new(input: Box<dyn BufRead + Send>, output: Box<dyn Write + Send>) -> Self {
        Interactive { io: Mutex::new((input, output)), secret_reader: None, shutdown: AtomicBool::new(false) }
    }

    pub fn terminal() -> Self {
        Interactive::new(Box::new(std::io::BufReader::new(std::io::stdin())), Box::new(std::io::stdout()))
    }

    /// Use a non-echoing reader for passwords instead of the line input.
    pub fn with_secret_reader(mut self, reader: SecretReader) -> Self {
        self.secret_reader = Some(reader);
        self
    }

    fn ask(&self, question: &str) -> Option<String> {
        let mut io = self.io.lock();
        let (input, output) = &mut *io;
        write!(output, "{question}").ok()?;
        output.flush().ok()?;
        let mut line = String::new();
        if input.read_line(&mut line).ok()? == 0 {
            return None;
        }
        Some(line.trim().to_owned())
    }

    fn read_secret(&self, question: &str) -> Option<String> {
        match &self.secret_reader {
            Some(reader) => reader(question).ok(),
            None => self.ask(question),
        }
    }
}

impl PresencePolicy for Interactive {
    fn confirm_presence(&self, prompt: &Prompt, cancel: &CancelToken) -> Decision {
        let answer = self.ask(&format!("[vauth] {}? [y/n/q] ", prompt.describe()));
        if cancel.is_cancelled() {
            return Decision::Cancelled;
        }
        match answer.as_deref().map(str::to_ascii_lowercase).as_deref() {
            Some("y") | Some("yes") => Decision::Approve,
            Some("q") | Some("quit") => {
                self.shutdown.store(true, Ordering::SeqCst);
                Decision::Deny
            }
            _ => Decision::Deny,
        }
    }

    fn verify_user(&self, prompt: &Prompt, check: &dyn Fn(&str) -> bool, cancel: &CancelToken) -> Decision {
        let pw = self.read_secret(&format!("[vauth] password to {}: ", prompt.describe()));
        if cancel.is_cancelled() {
            return Decision::Cancelled;
        }
        match pw {
            Some(pw) if check(&pw) => Decision::Approve,
            _ => Decision::Deny,
        }
    }

    fn request_password(&self, purpose: &str) -> Option<String> {
        self.read_secret(&format!("[vauth] {purpose}: "))
    }

    fn shutdown_requested(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }
}

/// Parse `auto-approve`, `auto-deny`, `interactive` or
/// `scripted:<y|n>*[@delay_ms]`.
pub fn policy_from_spec(spec: &str) -> Result<Arc<dyn PresencePolicy>, String> {
    match spec {
        "auto-approve" => return Ok(Arc::new(AutoApprove)),
        "auto-deny" => return Ok(Arc::new(AutoDeny)),
        "interactive" => return Ok(Arc::new(Interactive::terminal())),
        _ => {}
    }
    let script = spec
        .strip_prefix("scripted:")
        .ok_or_else(|| format!("unknown policy '{spec}'"))?;
    let (answers, delay) = match script.split_once('@') {
        Some((a, d)) => (a, d.parse::<u64>().map_err(|_| format!("bad delay in '{spec}'"))?),
        None => (script, 0),
    };
    let decisions = answers
        .chars()
        .map(|c| match c {
            'y' | 'Y' => Ok(true),
            'n' | 'N' => Ok(false),
            other => Err(format!("scripted decisions must be y or n, got '{other}'")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Arc::new(Scripted::new(decisions, Duration::from_millis(delay))))
}
