//! Host side of CTAPHID: channel setup, message exchange and CID filtering.

use std::time::{Duration, Instant};

use rand::RngCore;
use vauth_core::cbor::messages::{decode_response, Request, Response, ResponseError};
use vauth_core::ctaphid::{cmd, INIT_NONCE_LEN, INIT_RESPONSE_LEN};
use vauth_core::hid::{fragment_reports, Assembler, ChannelId, Message, Packet};
use vauth_core::transport::Transport;

use crate::ClientError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitInfo {
    pub cid: ChannelId,
    pub protocol: u8,
    pub version: (u8, u8, u8),
    pub capabilities: u8,
}

pub struct HidClient<T: Transport> {
    transport: T,
    cid: ChannelId,
    assembler: Assembler,
    rng: Box<dyn RngCore + Send>,
    timeout: Duration,
    keepalives: Vec<u8>,
}

impl<T: Transport> HidClient<T> {
    pub fn new(transport: T) -> Self {
        Self::with_rng(transport, Box::new(rand::rngs::OsRng))
    }

    pub fn with_rng(transport: T, rng: Box<dyn RngCore + Send>) -> Self {
        HidClient {
            transport,
            cid: ChannelId::BROADCAST,
            assembler: Assembler::new(),
            rng,
            timeout: Duration::from_secs(40),
            keepalives: Vec::new(),
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn cid(&self) -> ChannelId {
        self.cid
    }

    /// Use a channel obtained elsewhere (or an unallocated one, for tests).
    pub fn set_cid(&mut self, cid: ChannelId) {
        self.cid = cid;
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng.as_mut()
    }

    /// Status bytes of the keep-alives received so far.
    pub fn keepalives(&self) -> &[u8] {
        &self.keepalives
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Allocate a fresh channel through the broadcast CID.
    pub fn init(&mut self) -> Result<InitInfo, ClientError> {
        self.init_on(ChannelId::BROADCAST)
    }

    /// INIT on `cid`; on an allocated channel this re-synchronises it.
    pub fn init_on(&mut self, cid: ChannelId) -> Result<InitInfo, ClientError> {
        let mut nonce = [0u8; INIT_NONCE_LEN];
        self.rng.fill_bytes(&mut nonce);
        self.send(cid, cmd::INIT, &nonce)?;
        loop {
            let msg = self.recv_on(cid)?;
            match msg.cmd {
                cmd::INIT if msg.payload.len() >= INIT_RESPONSE_LEN && msg.payload[..8] == nonce => {
                    let p = &msg.payload;
                    let info = InitInfo {
                        cid: ChannelId::from_bytes([p[8], p[9], p[10], p[11]]),
                        protocol: p[12],
                        version: (p[13], p[14], p[15]),
                        capabilities: p[16],
                    };
                    self.cid = info.cid;
                    return Ok(info);
                }
                // A reply to someone else's INIT on the shared broadcast channel.
                cmd::INIT => continue,
                cmd::ERROR => return Err(ClientError::Hid(msg.payload.first().copied().unwrap_or(0))),
                other => return Err(ClientError::Protocol(format!("unexpected {} reply to INIT", cmd::name(other)))),
            }
        }
    }

    /// Write one message on `cid` without waiting for a reply.
    pub fn send(&mut self, cid: ChannelId, command: u8, payload: &[u8]) -> Result<(), ClientError> {
        let reports = fragment_reports(cid, command, payload).map_err(|e| ClientError::Protocol(e.to_string()))?;
        for r in &reports {
            self.transport.write_report(r)?;
        }
        Ok(())
    }

    /// Next complete message on `cid`, skipping keep-alives and traffic
    /// for other channels.
    pub fn recv_on(&mut self, cid: ChannelId) -> Result<Message, ClientError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.checked_duration_since(Instant::now()).ok_or(ClientError::Timeout)?;
            let Some(report) = self.transport.read_report(Some(left))? else {
                return Err(ClientError::Timeout);
            };
            let Ok(packet) = Packet::parse(&report) else { continue };
            if packet.cid() != cid {
                continue;
            }
            let Ok(Some(msg)) = self.assembler.push(packet) else { continue };
            if msg.cmd == cmd::KEEPALIVE {
                self.keepalives.extend_from_slice(&msg.payload);
                continue;
            }
            return Ok(msg);
        }
    }

    /// Send on the current channel and wait for its reply. ERROR replies
    /// become [`ClientError::Hid`].
    pub fn transact(&mut self, command: u8, payload: &[u8]) -> Result<Message, ClientError> {
        let cid = self.cid;
        self.send(cid, command, payload)?;
        let msg = self.recv_on(cid)?;
        if msg.cmd == cmd::ERROR {
            return Err(ClientError::Hid(msg.payload.first().copied().unwrap_or(0)));
        }
        if msg.cmd != command {
            return Err(ClientError::Protocol(format!(
                "{} reply to {}",
                cmd::name(msg.cmd),
                cmd::name(command)
            )));
        }
        Ok(msg)
    }

    pub fn ping(&mut self, data: &[u8]) -> Result<Vec<u8>, ClientError> {
        Ok(self.transact(cmd::PING, data)?.payload)
    }

    pub fn wink(&mut self) -> Result<(), ClientError> {
        self.transact(cmd::WINK, &[]).map(|_| ())
    }

    /// Raw `status || body` for a CBOR request payload.
    pub fn cbor_raw(&mut self, payload: &[u8]) -> Result<Vec<u8>, ClientError> {
        Ok(self.transact(cmd::CBOR, payload)?.payload)
    }

    pub fn cbor(&mut self, request: &Request) -> Result<Response, ClientError> {
        let raw = self.cbor_raw(&request.encode())?;
        decode_response(request.command(), &raw).map_err(|e| match e {
            ResponseError::Status(s) => ClientError::Ctap(s.as_u8()),
            ResponseError::UnknownStatus(b) => ClientError::Ctap(b),
            other => ClientError::Protocol(other.to_string()),
        })
    }
}
