//! CTAPHID command layer: channel allocation, ping, cancel, keep-alive,
//! errors and CBOR dispatch, under the one-transaction-at-a-time rule.
//!
//! The layer does no I/O. Raw reports go in through
//! [`CtapHidLayer::handle_report`]; reports to write and CBOR requests to
//! run come back as [`Action`]s. The CBOR worker reports back through
//! [`CtapHidLayer::complete_transaction`] using the ticket from the
//! dispatch. Time is passed in to [`CtapHidLayer::tick`].

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::authenticator::KeepaliveStatus;
use crate::hid::{
    fragment_reports, AssemblyError, Assembler, ChannelAllocator, ChannelId, Message, Packet,
    Report,
};
use crate::logging::{LogHub, Sink};
use crate::status::StatusCode;

pub mod cmd {
    pub const PING: u8 = 0x01;
    pub const MSG: u8 = 0x03;
    pub const INIT: u8 = 0x06;
    pub const WINK: u8 = 0x08;
    pub const CBOR: u8 = 0x10;
    pub const CANCEL: u8 = 0x11;
    pub const KEEPALIVE: u8 = 0x3B;
    pub const ERROR: u8 = 0x3F;

    pub fn name(cmd: u8) -> &'static str {
        match cmd {
            PING => "PING",
            MSG => "MSG",
            INIT => "INIT",
            WINK => "WINK",
            CBOR => "CBOR",
            CANCEL => "CANCEL",
            KEEPALIVE => "KEEPALIVE",
            ERROR => "ERROR",
            _ => "UNKNOWN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum HidError {
    InvalidCommand = 0x01,
    InvalidLength = 0x03,
    InvalidSeq = 0x04,
    Timeout = 0x05,
    ChannelBusy = 0x06,
    InvalidChannel = 0x0B,
    Other = 0x7F,
}

impl HidError {
    pub fn from_u8(code: u8) -> Option<HidError> {
        Some(match code {
            0x01 => HidError::InvalidCommand,
            0x03 => HidError::InvalidLength,
            0x04 => HidError::InvalidSeq,
            0x05 => HidError::Timeout,
            0x06 => HidError::ChannelBusy,
            0x0B => HidError::InvalidChannel,
            0x7F => HidError::Other,
            _ => return None,
        })
    }
}

pub const INIT_NONCE_LEN: usize = 8;
pub const INIT_RESPONSE_LEN: usize = 17;
pub const PROTOCOL_VERSION: u8 = 2;
pub const CAPABILITY_WINK: u8 = 0x01;
pub const CAPABILITY_CBOR: u8 = 0x04;
pub const CAPABILITY_NMSG: u8 = 0x08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransactionState {
    Empty,
    RequestRecv,
    ResponseSet,
    KeepAlive,
    Cancel,
    Error,
}

impl TransactionState {
    pub fn is_legal(from: TransactionState, to: TransactionState) -> bool {
        use TransactionState::*;
        matches!(
            (from, to),
            (Empty, RequestRecv)
                | (RequestRecv, ResponseSet)
                | (Empty, Error)
                | (Empty, Cancel)
                | (Empty, KeepAlive)
                | (Error, ResponseSet)
                | (KeepAlive, ResponseSet)
                | (_, Empty)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IllegalTransition {
    pub cid: ChannelId,
    pub from: TransactionState,
    pub to: TransactionState,
}

/// Transition counters fed by every state change the layer makes.
#[derive(Debug, Default, Clone)]
pub struct TransitionAudit {
    pub transitions: u64,
    pub illegal: Vec<IllegalTransition>,
    /// Highest number of simultaneously active transactions ever seen.
    pub max_active: usize,
    /// Outbound non-error, non-keepalive messages sent without a request.
    pub unsolicited: u64,
}

impl TransitionAudit {
    pub fn is_clean(&self) -> bool {
        self.illegal.is_empty() && self.max_active <= 1 && self.unsolicited == 0
    }
}

pub struct Transaction {
    pub cid: ChannelId,
    pub state: TransactionState,
    pub request: Option<Message>,
    pub response: Option<Message>,
}

impl Transaction {
    fn new(cid: ChannelId) -> Self {
        Transaction { cid, state: TransactionState::Empty, request: None, response: None }
    }

    fn move_to(&mut self, to: TransactionState, audit: &mut TransitionAudit) {
        audit.transitions += 1;
        if !TransactionState::is_legal(self.state, to) {
            audit.illegal.push(IllegalTransition { cid: self.cid, from: self.state, to });
        }
        self.state = to;
        if to == TransactionState::Empty {
            self.request = None;
            self.response = None;
        }
    }
}

/// One outbound message, already split into reports. The writer must emit
/// the reports back to back.
#[derive(Clone, PartialEq, Eq)]
pub struct Outbound {
    pub cid: ChannelId,
    pub cmd: u8,
    pub reports: Vec<Report>,
}

impl fmt::Debug for Outbound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Outbound({} {} x{})", self.cid, cmd::name(self.cmd), self.reports.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(Outbound),
    Dispatch { ticket: u64, cid: ChannelId, payload: Vec<u8> },
    Cancel { ticket: u64 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayerError {
    #[error("no open transaction for ticket {0}")]
    NoTransaction(u64),
}

#[derive(Debug, Clone)]
pub struct DeviceVersion {
    pub major: u8,
    pub minor: u8,
    pub build: u8,
}

#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub version: DeviceVersion,
    pub keepalive_interval: Duration,
    /// Overall budget for one CBOR request before it is timed out.
    pub budget: Duration,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            version: DeviceVersion { major: 1, minor: 0, build: 0 },
            keepalive_interval: Duration::from_millis(100),
            budget: Duration::from_secs(30),
        }
    }
}

struct Active {
    cid: ChannelId,
    ticket: u64,
    started: Instant,
    last_keepalive: Instant,
    status: Option<KeepaliveStatus>,
    cancelled: bool,
}

pub struct CtapHidLayer {
    config: LayerConfig,
    allocator: ChannelAllocator,
    allocated: std::collections::HashSet<ChannelId>,
    assembler: Assembler,
    transactions: HashMap<ChannelId, Transaction>,
    active: Option<Active>,
    next_ticket: u64,
    audit: TransitionAudit,
    log: Arc<LogHub>,
}

impl CtapHidLayer {
    pub fn new(config: LayerConfig, log: Arc<LogHub>) -> Self {
        CtapHidLayer {
            config,
            allocator: ChannelAllocator::new(),
            allocated: Default::default(),
            assembler: Assembler::new(),
            transactions: HashMap::new(),
            active: None,
            next_ticket: 1,
            audit: TransitionAudit::default(),
            log,
        }
    }

    pub fn audit(&self) -> &TransitionAudit {
        &self.audit
    }

    pub fn active_channel(&self) -> Option<ChannelId> {
        self.active.as_ref().map(|a| a.cid)
    }

    pub fn state(&self, cid: ChannelId) -> TransactionState {
        self.transactions.get(&cid).map_or(TransactionState::Empty, |t| t.state)
    }

    pub fn is_allocated(&self, cid: ChannelId) -> bool {
        self.allocated.contains(&cid)
    }

    fn tx(&mut self, cid: ChannelId) -> &mut Transaction {
        self.transactions.entry(cid).or_insert_with(|| Transaction::new(cid))
    }

    fn note_active(&mut self) {
        let n = self
            .transactions
            .values()
            .filter(|t| matches!(t.state, TransactionState::RequestRecv | TransactionState::ResponseSet))
            .count();
        self.audit.max_active = self.audit.max_active.max(n);
    }

    fn ctap_log(&self, msg: String) {
        self.log.log(Sink::Ctap, &msg);
    }

    /// Feed one raw report from the transport.
    pub fn handle_report(&mut self, raw: &[u8]) -> Vec<Action> {
        match Packet::parse(raw) {
            Ok(packet) => self.handle_packet(packet),
            Err(e) => {
                self.ctap_log(format!("dropped report: {e}"));
                Vec::new()
            }
        }
    }

    pub fn handle_packet(&mut self, packet: Packet) -> Vec<Action> {
        let mut out = Vec::new();
        if let Packet::Init(init) = &packet {
            let cid = init.cid;
            let known = self.allocated.contains(&cid) || (cid.is_broadcast() && init.cmd == cmd::INIT);
            if !known {
                self.assembler.abort(cid);
                self.ctap_log(format!("{} on unallocated channel {cid}", cmd::name(init.cmd)));
                out.push(self.error(cid, HidError::InvalidChannel));
                return out;
            }
        }
        match self.assembler.push(packet) {
            Ok(None) => {}
            Ok(Some(message)) => self.handle_message(message, &mut out),
            Err(AssemblyError::SpuriousInit { cid, restarted }) => {
                let resync = restarted.as_ref().is_some_and(|m| m.cmd == cmd::INIT);
                if !resync {
                    self.ctap_log(format!("{cid}: new message before previous finished"));
                    out.push(self.error(cid, HidError::InvalidSeq));
                }
                if let Some(message) = restarted {
                    self.handle_message(message, &mut out);
                }
            }
            Err(AssemblyError::UnexpectedContinuation(cid)) => {
                self.ctap_log(format!("{cid}: stray continuation ignored"));
            }
            Err(AssemblyError::InvalidSequence { cid, expected, got }) => {
                self.ctap_log(format!("{cid}: sequence {got}, expected {expected}"));
                out.push(self.error(cid, HidError::InvalidSeq));
            }
            Err(AssemblyError::TooLarge { cid, bcnt }) => {
                self.ctap_log(format!("{cid}: declared length {bcnt} too large"));
                out.push(self.error(cid, HidError::InvalidLength));
            }
        }
        out
    }

    fn handle_message(&mut self, msg: Message, out: &mut Vec<Action>) {
        self.ctap_log(format!("{} {} request, {} bytes", msg.cid, cmd::name(msg.cmd), msg.payload.len()));
        if msg.cmd == cmd::CANCEL {
            self.process_cancel(msg.cid, out);
            return;
        }
        if let Some(active) = &self.active {
            let reinit = msg.cmd == cmd::INIT && msg.cid == active.cid;
            if !reinit {
                self.ctap_log(format!("{} busy: transaction open on {}", msg.cid, active.cid));
                out.push(self.error(msg.cid, HidError::ChannelBusy));
                return;
            }
        }
        match msg.cmd {
            cmd::INIT => self.process_init(msg, out),
            cmd::PING => {
                let payload = msg.payload.clone();
                self.respond_now(msg, cmd::PING, payload, out);
            }
            cmd::WINK => self.respond_now(msg, cmd::WINK, Vec::new(), out),
            cmd::CBOR => self.start_cbor(msg, out),
            cmd::MSG => out.push(self.error(msg.cid, HidError::InvalidCommand)),
            _ => out.push(self.error(msg.cid, HidError::InvalidCommand)),
        }
    }

    fn process_init(&mut self, msg: Message, out: &mut Vec<Action>) {
        if msg.payload.len() != INIT_NONCE_LEN {
            out.push(self.error(msg.cid, HidError::InvalidLength));
            return;
        }
        let new_cid = if msg.cid.is_broadcast() {
            match self.allocator.allocate() {
                Ok(cid) => {
                    self.allocated.insert(cid);
                    cid
                }
                Err(_) => {
                    out.push(self.error(msg.cid, HidError::Other));
                    return;
                }
            }
        } else {
            self.abort_channel(msg.cid, out);
            msg.cid
        };
        let mut payload = Vec::with_capacity(INIT_RESPONSE_LEN);
        payload.extend_from_slice(&msg.payload);
        payload.extend_from_slice(&new_cid.to_bytes());
        payload.push(PROTOCOL_VERSION);
        payload.push(self.config.version.major);
        payload.push(self.config.version.minor);
        payload.push(self.config.version.build);
        payload.push(CAPABILITY_WINK | CAPABILITY_CBOR | CAPABILITY_NMSG);
        self.respond_now(msg, cmd::INIT, payload, out);
    }

    /// Drop whatever the channel had open, including a running CBOR request.
    fn abort_channel(&mut self, cid: ChannelId, out: &mut Vec<Action>) {
        if self.active.as_ref().is_some_and(|a| a.cid == cid) {
            let active = self.active.take().expect("checked");
            out.push(Action::Cancel { ticket: active.ticket });
            self.ctap_log(format!("{cid}: re-initialised, open transaction aborted"));
        }
        let mut audit = std::mem::take(&mut self.audit);
        let tx = self.tx(cid);
        if tx.state != TransactionState::Empty {
            tx.move_to(TransactionState::Empty, &mut audit);
        }
        self.audit = audit;
    }

    fn process_cancel(&mut self, cid: ChannelId, out: &mut Vec<Action>) {
        let mut audit = std::mem::take(&mut self.audit);
        let mut marker = Transaction::new(cid);
        marker.move_to(TransactionState::Cancel, &mut audit);
        marker.move_to(TransactionState::Empty, &mut audit);
        self.audit = audit;
        match &mut self.active {
            Some(active) if active.cid == cid && !active.cancelled => {
                active.cancelled = true;
                active.status = None;
                out.push(Action::Cancel { ticket: active.ticket });
                self.ctap_log(format!("{cid}: cancel requested"));
            }
            _ => self.ctap_log(format!("{cid}: cancel with nothing pending")),
        }
    }

    fn respond_now(&mut self, request: Message, cmd: u8, payload: Vec<u8>, out: &mut Vec<Action>) {
        let cid = request.cid;
        let mut audit = std::mem::take(&mut self.audit);
        let tx = self.tx(cid);
        tx.request = Some(request);
        tx.move_to(TransactionState::RequestRecv, &mut audit);
        self.audit = audit;
        self.note_active();
        out.push(self.finish(cid, cmd, payload));
    }

    fn start_cbor(&mut self, msg: Message, out: &mut Vec<Action>) {
        let cid = msg.cid;
        let payload = msg.payload.clone();
        let mut audit = std::mem::take(&mut self.audit);
        let tx = self.tx(cid);
        tx.request = Some(msg);
        tx.move_to(TransactionState::RequestRecv, &mut audit);
        self.audit = audit;
        self.note_active();
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        let now = Instant::now();
        self.active = Some(Active {
            cid,
            ticket,
            started: now,
            last_keepalive: now,
            status: Some(KeepaliveStatus::Processing),
            cancelled: false,
        });
        out.push(Action::Dispatch { ticket, cid, payload });
    }

    /// RequestRecv -> ResponseSet -> Empty, producing the response reports.
    /// An oversize response turns into error 0x7F.
    fn finish(&mut self, cid: ChannelId, cmd: u8, payload: Vec<u8>) -> Action {
        let reports = match fragment_reports(cid, cmd, &payload) {
            Ok(r) => r,
            Err(e) => {
                self.ctap_log(format!("{cid}: {e}"));
                let mut audit = std::mem::take(&mut self.audit);
                let tx = self.tx(cid);
                if tx.state != TransactionState::Empty {
                    tx.move_to(TransactionState::Empty, &mut audit);
                }
                self.audit = audit;
                return self.error(cid, HidError::Other);
            }
        };
        let mut audit = std::mem::take(&mut self.audit);
        let tx = self.tx(cid);
        if tx.state != TransactionState::RequestRecv {
            audit.unsolicited += 1;
        }
        tx.response = Some(Message { cid, cmd, payload });
        tx.move_to(TransactionState::ResponseSet, &mut audit);
        tx.move_to(TransactionState::Empty, &mut audit);
        self.audit = audit;
        self.ctap_log(format!("{cid} {} response, {} reports", cmd::name(cmd), reports.len()));
        Action::Send(Outbound { cid, cmd, reports })
    }

    /// A response-only ERROR message on `cid`.
    pub fn error(&mut self, cid: ChannelId, code: HidError) -> Action {
        let mut audit = std::mem::take(&mut self.audit);
        let mut tx = Transaction::new(cid);
        tx.move_to(TransactionState::Error, &mut audit);
        let reports = fragment_reports(cid, cmd::ERROR, &[code as u8]).expect("one byte fits");
        tx.response = Some(Message { cid, cmd: cmd::ERROR, payload: vec![code as u8] });
        tx.move_to(TransactionState::ResponseSet, &mut audit);
        tx.move_to(TransactionState::Empty, &mut audit);
        self.audit = audit;
        self.ctap_log(format!("{cid} error 0x{:02X}", code as u8));
        Action::Send(Outbound { cid, cmd: cmd::ERROR, reports })
    }

    /// The worker finished the CBOR request identified by `ticket`.
    pub fn complete_transaction(&mut self, ticket: u64, response: Vec<u8>) -> Result<Action, LayerError> {
        let active = match &self.active {
            Some(a) if a.ticket == ticket => self.active.take().expect("checked"),
            _ => return Err(LayerError::NoTransaction(ticket)),
        };
        let response = if active.cancelled {
            vec![StatusCode::KeepaliveCancel.as_u8()]
        } else {
            response
        };
        Ok(self.finish(active.cid, cmd::CBOR, response))
    }

    /// Worker status for the keep-alive ticker. Ignored once the ticket is
    /// no longer active.
    pub fn set_status(&mut self, ticket: u64, status: KeepaliveStatus) {
        if let Some(active) = &mut self.active {
            if active.ticket == ticket && !active.cancelled {
                active.status = Some(status);
            }
        }
    }

    /// Stop keep-alives for the ticket without completing it.
    pub fn keepalive_stop(&mut self, ticket: u64) {
        if let Some(active) = &mut self.active {
            if active.ticket == ticket {
                active.status = None;
            }
        }
    }

    /// Emit a keep-alive when one is due and time out a request that has
    /// used up its budget.
    pub fn tick(&mut self, now: Instant) -> Vec<Action> {
        let Some(active) = &mut self.active else { return Vec::new() };
        if now.duration_since(active.started) >= self.config.budget {
            let active = self.active.take().expect("checked");
            let cid = active.cid;
            let mut out = vec![Action::Cancel { ticket: active.ticket }];
            let mut audit = std::mem::take(&mut self.audit);
            self.tx(cid).move_to(TransactionState::Empty, &mut audit);
            self.audit = audit;
            self.ctap_log(format!("{cid}: request timed out"));
            out.push(self.error(cid, HidError::Timeout));
            return out;
        }
        let Some(status) = active.status else { return Vec::new() };
        if now.duration_since(active.last_keepalive) < self.config.keepalive_interval {
            return Vec::new();
        }
        active.last_keepalive = now;
        let cid = active.cid;
        vec![self.keepalive(cid, status)]
    }

    fn keepalive(&mut self, cid: ChannelId, status: KeepaliveStatus) -> Action {
        let mut audit = std::mem::take(&mut self.audit);
        let mut tx = Transaction::new(cid);
        tx.move_to(TransactionState::KeepAlive, &mut audit);
        tx.move_to(TransactionState::ResponseSet, &mut audit);
        tx.move_to(TransactionState::Empty, &mut audit);
        self.audit = audit;
        let reports = fragment_reports(cid, cmd::KEEPALIVE, &[status as u8]).expect("one byte fits");
        Action::Send(Outbound { cid, cmd: cmd::KEEPALIVE, reports })
    }
}
