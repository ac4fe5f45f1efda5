//! Report transports. Every read and write moves exactly one 64-byte
//! report.
//!
//! * loopback: an in-process channel pair
//! * socket: a Unix stream socket carrying raw 64-byte records. The device
//!   side accepts any number of connections, merges their reports and
//!   writes every outbound report to all of them; clients filter by CID
//!   as they would on a shared HID device.

use std::io::{self, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use crate::hid::{Report, REPORT_LEN};
use crate::logging::Direction;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport closed")]
    Closed,
    #[error("transport i/o: {0}")]
    Io(#[from] io::Error),
}

pub trait Transport: Send + Sync {
    /// Block for the next report. `None` timeout waits forever; `Ok(None)`
    /// means the timeout passed with nothing to read.
    fn read_report(&self, timeout: Option<Duration>) -> Result<Option<Report>, TransportError>;

    fn write_report(&self, report: &Report) -> Result<(), TransportError>;
}

fn recv(rx: &Receiver<Report>, timeout: Option<Duration>) -> Result<Option<Report>, TransportError> {
    match timeout {
        None => rx.recv().map(Some).map_err(|_| TransportError::Closed),
        Some(t) => match rx.recv_timeout(t) {
            Ok(r) => Ok(Some(r)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        },
    }
}

pub struct Loopback {
    tx: Sender<Report>,
    rx: Receiver<Report>,
}

/// Two connected ends: `(device, client)`.
pub fn loopback_pair() -> (Loopback, Loopback) {
    let (a_tx, a_rx) = crossbeam_channel::unbounded();
    let (b_tx, b_rx) = crossbeam_channel::unbounded();
    (Loopback { tx: a_tx, rx: b_rx }, Loopback { tx: b_tx, rx: a_rx })
}

impl Transport for Loopback {
    fn read_report(&self, timeout: Option<Duration>) -> Result<Option<Report>, TransportError> {
        recv(&self.rx, timeout)
    }

    fn write_report(&self, report: &Report) -> Result<(), TransportError> {
        self.tx.send(*report).map_err(|_| TransportError::Closed)
    }
}

/// Device end of the socket transport.
pub struct SocketServer {
    path: PathBuf,
    inbound: Receiver<Report>,
    peers: Arc<Mutex<Vec<UnixStream>>>,
    stop: Arc<AtomicBool>,
}

impl SocketServer {
    /// Bind `path`, replacing a stale socket file.
    pub fn bind(path: &Path) -> io::Result<SocketServer> {
        if path.exists() {
            if UnixStream::connect(path).is_ok() {
                return Err(io::Error::new(io::ErrorKind::AddrInUse, format!("{} is in use", path.display())));
            }
            std::fs::remove_file(path)?;
        }
        let listener = UnixListener::bind(path)?;
        listener.set_nonblocking(true)?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let peers = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        {
            let peers = peers.clone();
            let stop = stop.clone();
            thread::Builder::new().name("socket-accept".into()).spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = stream.set_nonblocking(false);
                            if let Ok(writer) = stream.try_clone() {
                                peers.lock().push(writer);
                            }
                            let tx = tx.clone();
                            let stop = stop.clone();
                            let _ = thread::Builder::new()
                                .name("socket-read".into())
                                .spawn(move || read_records(stream, tx, stop));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            thread::sleep(Duration::from_millis(5));
                        }
                        Err(_) => break,
                    }
                }
            })?;
        }
        Ok(SocketServer { path: path.to_path_buf(), inbound: rx, peers, stop })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn connections(&self) -> usize {
        self.peers.lock().len()
    }
}

fn read_records(mut stream: UnixStream, tx: Sender<Report>, stop: Arc<AtomicBool>) {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
    let mut buf = [0u8; REPORT_LEN];
    let mut filled = 0;
    while !stop.load(Ordering::SeqCst) {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return,
            Ok(n) => {
                filled += n;
                if filled == REPORT_LEN {
                    if tx.send(buf).is_err() {
                        return;
                    }
                    filled = 0;
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
            Err(_) => return,
        }
    }
}

impl Transport for SocketServer {
    fn read_report(&self, timeout: Option<Duration>) -> Result<Option<Report>, TransportError> {
        recv(&self.inbound, timeout)
    }

    fn write_report(&self, report: &Report) -> Result<(), TransportError> {
        // A peer that fails a write has gone away.
        self.peers.lock().retain_mut(|peer| peer.write_all(report).is_ok());
        Ok(())
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for peer in self.peers.lock().drain(..) {
            let _ = peer.shutdown(std::net::Shutdown::Both);
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Client end of the socket transport.
pub struct SocketClient {
    reader: Mutex<UnixStream>,
    writer: Mutex<UnixStream>,
}

impl SocketClient {
    pub fn connect(path: &Path) -> io::Result<SocketClient> {
        let stream = UnixStream::connect(path)?;
        let writer = stream.try_clone()?;
        Ok(SocketClient { reader: Mutex::new(stream), writer: Mutex::new(writer) })
    }
}

impl Transport for SocketClient {
    fn read_report(&self, timeout: Option<Duration>) -> Result<Option<Report>, TransportError> {
        let mut stream = self.reader.lock();
        stream.set_read_timeout(timeout)?;
        let mut buf = [0u8; REPORT_LEN];
        let mut filled = 0;
        while filled < REPORT_LEN {
            match stream.read(&mut buf[filled..]) {
                Ok(0) => return Err(TransportError::Closed),
                Ok(n) => filled += n,
                Err(e) if filled == 0 && matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                // Never hand back half a record once it started arriving.
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(buf))
    }

    fn write_report(&self, report: &Report) -> Result<(), TransportError> {
        self.writer.lock().write_all(report)?;
        Ok(())
    }
}

pub type Trace = Arc<Mutex<Vec<(Direction, Report)>>>;

/// Records every report that passes through, as seen from the wrapped end.
pub struct Recording<T> {
    inner: T,
    trace: Trace,
}

impl<T: Transport> Recording<T> {
    pub fn new(inner: T) -> Self {
        Recording { inner, trace: Trace::default() }
    }

    pub fn trace(&self) -> Trace {
        self.trace.clone()
    }
}

impl<T: Transport> Transport for Recording<T> {
    fn read_report(&self, timeout: Option<Duration>) -> Result<Option<Report>, TransportError> {
        let r = self.inner.read_report(timeout)?;
        if let Some(report) = &r {
            self.trace.lock().push((Direction::In, *report));
        }
        Ok(r)
    }

    fn write_report(&self, report: &Report) -> Result<(), TransportError> {
        self.trace.lock().push((Direction::Out, *report));
        self.inner.write_report(report)
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn read_report(&self, timeout: Option<Duration>) -> Result<Option<Report>, TransportError> {
        (**self).read_report(timeout)
    }

    fn write_report(&self, report: &Report) -> Result<(), TransportError> {
        (**self).write_report(report)
    }
}
