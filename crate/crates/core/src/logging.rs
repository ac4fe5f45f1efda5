//! Per-layer log sinks.
//!
//! Each sink writes to `<dir>/<sink>` while running. On startup any file
//! left behind by a previous run is renamed to `<sink>_<timestamp>`, and
//! [`LogHub::archive`] does the same at clean shutdown. Every record also
//! lands in the debug sink, which can mirror to stdout. A sink that cannot
//! be written falls back to stderr.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sink {
    Debug,
    UsbHid,
    Ctap,
    Auth,
}

impl Sink {
    pub const ALL: [Sink; 4] = [Sink::Debug, Sink::UsbHid, Sink::Ctap, Sink::Auth];

    pub fn file_name(self) -> &'static str {
        match self {
            Sink::Debug => "debug",
            Sink::UsbHid => "usbhid",
            Sink::Ctap => "ctap",
            Sink::Auth => "auth",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Serialize)]
struct HidRecord<'a> {
    ts: String,
    direction: Direction,
    cid: String,
    payload: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

#[derive(Default)]
struct Files {
    open: [Option<File>; 4],
}

pub struct LogHub {
    dir: Option<PathBuf>,
    files: Mutex<Files>,
    mirror_stdout: bool,
}

impl std::fmt::Debug for LogHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogHub").field("dir", &self.dir).finish_non_exhaustive()
    }
}

fn timestamp() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn archive_name(dir: &Path, sink: Sink) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3f");
    let base = format!("{}_{stamp}", sink.file_name());
    let mut candidate = dir.join(&base);
    let mut n = 1;
    while candidate.exists() {
        candidate = dir.join(format!("{base}.{n}"));
        n += 1;
    }
    candidate
}

impl LogHub {
    /// A hub that drops everything.
    pub fn disabled() -> LogHub {
        LogHub { dir: None, files: Mutex::new(Files::default()), mirror_stdout: false }
    }

    pub fn open(dir: &Path, mirror_stdout: bool) -> io::Result<LogHub> {
        fs::create_dir_all(dir)?;
        let mut files = Files::default();
        for sink in Sink::ALL {
            let path = dir.join(sink.file_name());
            if path.exists() {
                fs::rename(&path, archive_name(dir, sink))?;
            }
            files.open[sink.index()] = OpenOptions::new().create(true).append(true).open(&path).ok();
        }
        Ok(LogHub { dir: Some(dir.to_path_buf()), files: Mutex::new(files), mirror_stdout })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn is_enabled(&self) -> bool {
        self.dir.is_some() || self.mirror_stdout
    }

    fn write_line(files: &mut Files, sink: Sink, line: &str) {
        if let Some(f) = files.open[sink.index()].as_mut() {
            if writeln!(f, "{line}").is_ok() {
                return;
            }
            files.open[sink.index()] = None;
        }
        eprintln!("[{}] {line}", sink.file_name());
    }

    /// Record `msg` in `sink` and in the debug sink.
    pub fn log(&self, sink: Sink, msg: &str) {
        if !self.is_enabled() {
            return;
        }
        let line = format!("{} {msg}", timestamp());
        let mut files = self.files.lock();
        if self.dir.is_some() {
            if sink != Sink::Debug {
                Self::write_line(&mut files, sink, &line);
            }
            let debug_line = format!("{} [{}] {msg}", timestamp(), sink.file_name());
            Self::write_line(&mut files, Sink::Debug, &debug_line);
        }
        if self.mirror_stdout {
            println!("[{}] {msg}", sink.file_name());
        }
    }

    /// One JSON object per 64-byte report, payload as hex.
    pub fn usbhid(&self, direction: Direction, report: &[u8], note: Option<&str>) {
        if !self.is_enabled() {
            return;
        }
        let cid = report.get(..4).map(hex::encode).unwrap_or_default();
        let record = HidRecord { ts: timestamp(), direction, cid, payload: hex::encode(report), note };
        let json = serde_json::to_string(&record).expect("record serializes");
        let mut files = self.files.lock();
        if self.dir.is_some() {
            Self::write_line(&mut files, Sink::UsbHid, &json);
            Self::write_line(&mut files, Sink::Debug, &format!("{} [usbhid] {json}", record.ts));
        }
        if self.mirror_stdout {
            println!("[usbhid] {json}");
        }
    }

    /// Close the active files and rename them with a timestamp suffix.
    pub fn archive(&self) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut files = self.files.lock();
        for sink in Sink::ALL {
            if let Some(f) = files.open[sink.index()].take() {
                let _ = f.sync_all();
            }
            let path = dir.join(sink.file_name());
            if path.exists() {
                fs::rename(&path, archive_name(dir, sink))?;
            }
        }
        Ok(())
    }
}
