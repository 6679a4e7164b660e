//! The single result writer. Workers hold [`RecordSender`]s; one thread owns
//! the file and appends lines in arrival order, flushing each.

use std::fs::File;
use std::io::{self, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::{self, JoinHandle};

use serde::Serialize;

use super::{timestamp_now, RunManifest};
use crate::flowpair::{PairResult, ResultSink};

const PLACEHOLDER: &str = "0000-00-00T00:00:00.000000Z";
const QUEUE_DEPTH: usize = 1024;

enum Msg {
    Line(String),
    Finish,
}

#[derive(Clone)]
pub struct RecordSender(SyncSender<Msg>);

impl RecordSender {
    pub fn append<T: Serialize>(&self, record: &T) -> io::Result<()> {
        let line = serde_json::to_string(record).map_err(io::Error::other)?;
        self.0.send(Msg::Line(line)).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "result writer has stopped"))
    }
}

impl ResultSink for RecordSender {
    fn append(&mut self, result: &PairResult) -> io::Result<()> {
        RecordSender::append(self, result)
    }
}

pub struct ResultWriter {
    sender: RecordSender,
    thread: Option<JoinHandle<io::Result<u64>>>,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    manifest: &'a RunManifest,
}

fn manifest_line(m: &RunManifest) -> io::Result<String> {
    serde_json::to_string(&ManifestLine { manifest: m }).map_err(io::Error::other)
}

/// The manifest as first written: `finished_at` is null, padded with
/// whitespace to the width of a timestamp so it can be filled in later.
fn open_manifest_line(m: &RunManifest) -> io::Result<String> {
    let mut m = m.clone();
    m.finished_at = Some(PLACEHOLDER.into());
    let line = manifest_line(&m)?;
    let quoted = format!("\"finished_at\":\"{PLACEHOLDER}\"");
    let null = format!("\"finished_at\":null{}", " ".repeat(quoted.len() - "\"finished_at\":null".len()));
    Ok(line.replacen(&quoted, &null, 1))
}

enum Sink {
    File(BufWriter<File>),
    Stdout(io::Stdout),
}

impl Sink {
    fn out(&mut self) -> &mut dyn Write {
        match self {
            Sink::File(f) => f,
            Sink::Stdout(s) => s,
        }
    }
}

fn writer_loop(mut sink: Sink, manifest: RunManifest, first_len: usize, rx: Receiver<Msg>) -> io::Result<u64> {
    let mut written = 0;
    for msg in rx {
        match msg {
            Msg::Line(line) => {
                let out = sink.out();
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
                out.flush()?;
                written += 1;
            }
            Msg::Finish => break,
        }
    }
    if let Sink::File(f) = &mut sink {
        let mut m = manifest;
        m.finished_at = Some(timestamp_now());
        let line = manifest_line(&m)?;
        if line.len() == first_len {
            f.flush()?;
            let file = f.get_mut();
            file.seek(SeekFrom::Start(0))?;
            file.write_all(line.as_bytes())?;
            file.seek(SeekFrom::End(0))?;
        } else {
            log::warn!("manifest width changed; finish time not recorded");
        }
        f.flush()?;
    }
    Ok(written)
}

impl ResultWriter {
    /// Opens `path` (`-` is stdout) and writes the manifest line.
    pub fn create(path: &Path, manifest: &RunManifest) -> io::Result<Self> {
        let mut sink = if path.as_os_str() == "-" {
            Sink::Stdout(io::stdout())
        } else {
            Sink::File(BufWriter::new(File::create(path)?))
        };
        let first = open_manifest_line(manifest)?;
        let out = sink.out();
        out.write_all(first.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        let (tx, rx) = sync_channel(QUEUE_DEPTH);
        let manifest = manifest.clone();
        let first_len = first.len();
        let thread = thread::spawn(move || writer_loop(sink, manifest, first_len, rx));
        Ok(Self { sender: RecordSender(tx), thread: Some(thread) })
    }

    pub fn sender(&self) -> RecordSender {
        self.sender.clone()
    }

    pub fn append<T: Serialize>(&self, record: &T) -> io::Result<()> {
        self.sender.append(record)
    }

    /// Drains queued records, stamps the finish time and returns the number
    /// of record lines written.
    pub fn finish(mut self) -> io::Result<u64> {
        let _ = self.sender.0.send(Msg::Finish);
        self.thread.take().expect("writer thread").join().map_err(|_| io::Error::other("writer thread panicked"))?
    }
}

impl Drop for ResultWriter {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.sender.0.send(Msg::Finish);
            let _ = t.join();
        }
    }
}
