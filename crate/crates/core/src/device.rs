//! Runs an [`Authenticator`] behind a [`CtapHidLayer`] on a transport.
//!
//! Four threads: a reader feeding reports to the layer, one CBOR worker,
//! a keep-alive ticker and a single writer so that the reports of one
//! message are never interleaved with another's.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use crate::authenticator::{Authenticator, KeepaliveStatus, RequestContext};
use crate::ctaphid::{Action, CtapHidLayer, LayerConfig, Outbound, TransitionAudit};
use crate::hid::ChannelId;
use crate::logging::{Direction, LogHub, Sink};
use crate::policy::CancelToken;
use crate::transport::{Transport, TransportError};

const POLL: Duration = Duration::from_millis(20);

#[derive(Clone, Default)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_requested(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

struct Job {
    ticket: u64,
    cid: ChannelId,
    payload: Vec<u8>,
    cancel: CancelToken,
}

struct Shared {
    layer: Mutex<CtapHidLayer>,
    cancels: Mutex<HashMap<u64, CancelToken>>,
    writer: Sender<Outbound>,
    jobs: Sender<Job>,
    log: Arc<LogHub>,
}

impl Shared {
    /// Route layer actions. Called with the layer lock held so that
    /// outbound messages reach the writer in the order the layer made them.
    fn route(&self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(out) => {
                    let _ = self.writer.send(out);
                }
                Action::Dispatch { ticket, cid, payload } => {
                    let cancel = CancelToken::new();
                    self.cancels.lock().insert(ticket, cancel.clone());
                    let _ = self.jobs.send(Job { ticket, cid, payload, cancel });
                }
                Action::Cancel { ticket } => {
                    if let Some(token) = self.cancels.lock().get(&ticket) {
                        token.cancel();
                    }
                }
            }
        }
    }
}

pub struct DeviceHandle {
    shutdown: ShutdownHandle,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    worker: Option<JoinHandle<Authenticator>>,
}

impl DeviceHandle {
    pub fn shutdown_handle(&self) -> ShutdownHandle {
        self.shutdown.clone()
    }

    pub fn audit(&self) -> TransitionAudit {
        self.shared.layer.lock().audit().clone()
    }

    pub fn is_finished(&self) -> bool {
        self.shutdown.is_requested()
    }

    /// Block until shutdown is requested from any source.
    pub fn wait(&self) {
        while !self.shutdown.is_requested() {
            thread::sleep(POLL);
        }
    }

    /// Stop all threads and hand back the authenticator.
    pub fn stop(mut self) -> Authenticator {
        self.shutdown.request();
        for token in self.shared.cancels.lock().values() {
            token.cancel();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.worker.take().expect("worker present").join().expect("worker thread panicked")
    }
}

pub fn spawn_device(
    transport: Arc<dyn Transport>,
    authenticator: Authenticator,
    config: LayerConfig,
    log: Arc<LogHub>,
    shutdown: ShutdownHandle,
) -> DeviceHandle {
    let (writer_tx, writer_rx) = crossbeam_channel::unbounded::<Outbound>();
    let (job_tx, job_rx) = crossbeam_channel::unbounded::<Job>();
    let interval = config.keepalive_interval;
    let shared = Arc::new(Shared {
        layer: Mutex::new(CtapHidLayer::new(config, log.clone())),
        cancels: Mutex::new(HashMap::new()),
        writer: writer_tx,
        jobs: job_tx,
        log: log.clone(),
    });
    let mut threads = Vec::new();

    {
        let transport = transport.clone();
        let shared = shared.clone();
        let shutdown = shutdown.clone();
        threads.push(spawn("hid-reader", move || {
            while !shutdown.is_requested() {
                match transport.read_report(Some(POLL)) {
                    Ok(Some(report)) => {
                        shared.log.usbhid(Direction::In, &report, None);
                        let mut layer = shared.layer.lock();
                        let actions = layer.handle_report(&report);
                        shared.route(actions);
                    }
                    Ok(None) => {}
                    Err(TransportError::Closed) => {
                        shared.log.log(Sink::Debug, "transport closed");
                        shutdown.request();
                    }
                    Err(e) => {
                        shared.log.log(Sink::Debug, &format!("read failed: {e}"));
                        thread::sleep(POLL);
                    }
                }
            }
        }));
    }

    {
        let shared = shared.clone();
        let shutdown = shutdown.clone();
        threads.push(spawn("keepalive", move || {
            let step = (interval / 4).clamp(Duration::from_millis(5), POLL);
            while !shutdown.is_requested() {
                thread::sleep(step);
                let mut layer = shared.layer.lock();
                let actions = layer.tick(Instant::now());
                shared.route(actions);
            }
        }));
    }

    {
        let transport = transport.clone();
        let log = log.clone();
        let shutdown = shutdown.clone();
        threads.push(spawn("hid-writer", move || writer_loop(transport, writer_rx, log, shutdown)));
    }

    let worker = {
        let shared = shared.clone();
        let shutdown = shutdown.clone();
        thread::Builder::new()
            .name("ctap-worker".into())
            .spawn(move || worker_loop(authenticator, shared, job_rx, shutdown))
            .expect("spawn worker")
    };

    DeviceHandle { shutdown, shared, threads, worker: Some(worker) }
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    thread::Builder::new().name(name.into()).spawn(f).expect("spawn device thread")
}

fn writer_loop(transport: Arc<dyn Transport>, rx: Receiver<Outbound>, log: Arc<LogHub>, shutdown: ShutdownHandle) {
    loop {
        let out = match rx.recv_timeout(POLL) {
            Ok(out) => out,
            Err(_) if shutdown.is_requested() => return,
            Err(_) => continue,
        };
        for report in &out.reports {
            log.usbhid(Direction::Out, report, None);
            if let Err(e) = transport.write_report(report) {
                log.log(Sink::Debug, &format!("write to {} failed: {e}", out.cid));
                break;
            }
        }
    }
}

fn worker_loop(mut authenticator: Authenticator, shared: Arc<Shared>, jobs: Receiver<Job>, shutdown: ShutdownHandle) -> Authenticator {
    loop {
        let job = match jobs.recv_timeout(POLL) {
            Ok(job) => job,
            Err(_) if shutdown.is_requested() => return authenticator,
            Err(_) => {
                if authenticator.policy().shutdown_requested() {
                    shutdown.request();
                }
                continue;
            }
        };
        let ticket = job.ticket;
        let status_shared = shared.clone();
        let status = move |s: KeepaliveStatus| status_shared.layer.lock().set_status(ticket, s);
        let ctx = RequestContext { cancel: &job.cancel, status: &status };
        let response = authenticator.handle_cbor(&job.payload, &ctx);
        shared.cancels.lock().remove(&ticket);
        {
            let mut layer = shared.layer.lock();
            match layer.complete_transaction(ticket, response) {
                Ok(action) => shared.route(vec![action]),
                Err(e) => shared.log.log(Sink::Ctap, &format!("{}: response dropped, {e}", job.cid)),
            }
        }
        if authenticator.policy().shutdown_requested() {
            shutdown.request();
        }
    }
}
