//! Text-in/text-out client used for subject parsing and generative scoring.
//!
//! Backends are pluggable. Offline runs use [`ReplayBackend`], which serves
//! responses from a transcript file of `{"request": .., "response": ..}`
//! records, one JSON object per line. [`RecordingBackend`] produces such
//! transcripts from any live backend.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, prompt: &str) -> Result<String> {
        (**self).complete(prompt)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, prompt: &str) -> Result<String> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request: String,
    pub response: String,
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format("transcript", format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("transcript records serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Serves recorded responses in order for each distinct request.
///
/// A request that was recorded once is answered with the same response on
/// every later call; a request recorded several times is answered in
/// recording order and then repeats its last response.
pub struct ReplayBackend {
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let mut queues: HashMap<String, VecDeque<String>> = HashMap::new();
        for r in records {
            queues.entry(r.request).or_default().push_back(r.response);
        }
        Self {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(read_transcript(path)?))
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut queues = self.queues.lock().expect("replay lock poisoned");
        let queue = queues
            .get_mut(prompt)
            .ok_or_else(|| Error::Backend("no recorded response for request".into()))?;
        if queue.len() > 1 {
            Ok(queue.pop_front().expect("non-empty queue"))
        } else {
            queue
                .front()
                .cloned()
                .ok_or_else(|| Error::Backend("empty transcript queue".into()))
        }
    }
}

/// Wraps a backend and keeps every successful exchange.
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<Vec<TranscriptRecord>>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().expect("recording lock poisoned").clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_transcript(path, &self.records())
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn complete(&self, prompt: &str) -> Result<String> {
        let response = self.inner.complete(prompt)?;
        self.records
            .lock()
            .expect("recording lock poisoned")
            .push(TranscriptRecord {
                request: prompt.to_string(),
                response: response.clone(),
            });
        Ok(response)
    }
}

/// Runs an external program per request: the prompt goes to stdin and the
/// response is read from stdout. Works with any local model runner that
/// behaves like a filter.
pub struct CommandBackend {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl CommandBackend {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        Self {
            program: program.into(),
            args,
            timeout,
        }
    }
}

impl LlmBackend for CommandBackend {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawn {}: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin
                .write_all(prompt.as_bytes())
                .map_err(|e| Error::Transport(format!("write prompt: {e}")))?;
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            stdout.read_to_string(&mut buf).map(|_| buf)
        });
        let start = Instant::now();
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let out = reader
                        .join()
                        .map_err(|_| Error::Transport("reader thread panicked".into()))?
                        .map_err(|e| Error::Transport(format!("read response: {e}")))?;
                    if !status.success() {
                        return Err(Error::Transport(format!(
                            "{} exited with {status}",
                            self.program
                        )));
                    }
                    return Ok(out);
                }
                Ok(None) if start.elapsed() > self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Transport(format!(
                        "{} timed out after {:?}",
                        self.program, self.timeout
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Transport(format!("wait: {e}"))),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Retries after a transport failure (0 = single attempt).
    pub retries: usize,
    pub max_in_flight: usize,
    pub timeout_secs: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            retries: 2,
            max_in_flight: 4,
            timeout_secs: 60.0,
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Bounded-concurrency client with transport retries.
pub struct LlmClient<B> {
    backend: B,
    config: ClientConfig,
    slots: Semaphore,
}

impl<B: LlmBackend> LlmClient<B> {
    pub fn new(backend: B, config: ClientConfig) -> Self {
        Self {
            backend,
            slots: Semaphore::new(config.max_in_flight),
            config,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn request(&self, prompt: &str) -> Result<String> {
        let _permit = self.slots.acquire();
        let mut attempt = 0;
        loop {
            match self.backend.complete(prompt) {
                Err(e) if e.is_retriable() && attempt < self.config.retries => {
                    log::warn!("llm request failed (attempt {}): {e}", attempt + 1);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl<B: LlmBackend> LlmBackend for LlmClient<B> {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.request(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Flaky {
        failures: AtomicUsize,
    }

    impl LlmBackend for Flaky {
        fn complete(&self, _prompt: &str) -> Result<String> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                Err(Error::Transport("connection reset".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn transport_failures_are_retried_up_to_the_limit() {
        let cfg = ClientConfig {
            retries: 2,
            ..Default::default()
        };
        let client = LlmClient::new(Flaky { failures: AtomicUsize::new(2) }, cfg);
        assert_eq!(client.request("x").unwrap(), "ok");

        let client = LlmClient::new(Flaky { failures: AtomicUsize::new(3) }, cfg);
        let err = client.request("x").unwrap_err();
        assert!(err.is_retriable());
    }

    #[test]
    fn replay_serves_in_order_then_repeats() {
        let backend = ReplayBackend::new(vec![
            TranscriptRecord { request: "a".into(), response: "1".into() },
            TranscriptRecord { request: "a".into(), response: "2".into() },
            TranscriptRecord { request: "b".into(), response: "3".into() },
        ]);
        assert_eq!(backend.complete("a").unwrap(), "1");
        assert_eq!(backend.complete("a").unwrap(), "2");
        assert_eq!(backend.complete("a").unwrap(), "2");
        assert_eq!(backend.complete("b").unwrap(), "3");
        assert!(!backend.complete("c").unwrap_err().is_retriable());
    }

    #[test]
    fn recording_round_trips_through_a_transcript_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = RecordingBackend::new(ReplayBackend::new(vec![TranscriptRecord {
            request: "line one\nline \"two\"".into(),
            response: "subject: dog\nattributes: none".into(),
        }]));
        rec.complete("line one\nline \"two\"").unwrap();
        rec.save(&path).unwrap();
        let back = read_transcript(&path).unwrap();
        assert_eq!(back, rec.records());
    }

    #[test]
    fn in_flight_requests_are_bounded() {
        struct Probe {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl LlmBackend for Probe {
            fn complete(&self, _p: &str) -> Result<String> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(10));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
        }
        let client = Arc::new(LlmClient::new(
            Probe { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) },
            ClientConfig { max_in_flight: 2, ..Default::default() },
        ));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let c = Arc::clone(&client);
                std::thread::spawn(move || c.request("p").unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(client.backend().peak.load(Ordering::SeqCst) <= 2);
    }

    #[cfg(unix)]
    #[test]
    fn command_backend_pipes_prompt_through_a_process() {
        let backend = CommandBackend::new("cat", vec![], Duration::from_secs(5));
        assert_eq!(backend.complete("subject: lamp").unwrap(), "subject: lamp");
        let missing = CommandBackend::new("/nonexistent/llm", vec![], Duration::from_secs(1));
        assert!(missing.complete("x").unwrap_err().is_retriable());
    }
}
