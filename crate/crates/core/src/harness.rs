//! End-to-end evaluation runs.
//!
//! Each QA item becomes an [`InferenceRequest`] (prompt plus PNG bytes of
//! the composited image when the item has one, else the base image), is
//! sent once through a [`ModelAdapter`], and the answer is scored by
//! question type. Failed or timed-out items score 0 and stay in the
//! denominators.
//!
//! Three adapters ship with the crate:
//!
//! - [`MockAdapter`]: answers from a JSONL fixture `{"qa_id", "answer"}`.
//! - [`SubprocessAdapter`]: one child process speaking JSON lines on
//!   stdin/stdout: `{"qa_id","prompt","image_b64"}` out,
//!   `{"qa_id","answer"}` back.
//! - [`HttpAdapter`]: POSTs `{"qa_id","prompt","image_b64"}` and expects
//!   `{"answer"}`, retrying transient failures.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::sha256_hex;
use crate::corpus::{load_dataset_with, CorpusError, Dataset, LoadOptions, QAPair, QType};
use crate::metrics::{
    aggregate, closed_match, extract_choice, localization_hit, parse_bbox, token_recall, EvalReport, ItemScore,
    MetricError, RunMeta, DEFAULT_IOU_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter unreachable: {0}")]
    Unreachable(String),
    #[error("cannot spawn model process: {0}")]
    Spawn(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("model process exited")]
    Exited,
    #[error("http status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("fixture {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("run aborted: {failed} of {total} items failed")]
    Aborted {
        failed: usize,
        total: usize,
        partial: Box<RunOutput>,
    },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One request to a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceRequest {
    pub qa_id: String,
    pub prompt: String,
    /// PNG bytes.
    pub image: Vec<u8>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    qa_id: &'a str,
    prompt: &'a str,
    image_b64: String,
}

impl InferenceRequest {
    fn wire(&self) -> WireRequest<'_> {
        WireRequest {
            qa_id: &self.qa_id,
            prompt: &self.prompt,
            image_b64: BASE64.encode(&self.image),
        }
    }
}

/// Anything that can answer an [`InferenceRequest`].
pub trait ModelAdapter: Send + Sync {
    fn model_id(&self) -> &str;

    /// Fails if the model cannot be reached at all; called once before a run.
    fn probe(&self) -> Result<(), AdapterError> {
        Ok(())
    }

    fn answer(&self, req: &InferenceRequest) -> Result<String, AdapterError>;
}

// ---------------------------------------------------------------------------
// Mock

#[derive(Debug, Serialize, Deserialize)]
struct FixtureLine {
    qa_id: String,
    answer: String,
}

/// Scripted answers looked up by `qa_id`; unknown ids get `""`.
#[derive(Debug, Clone)]
pub struct MockAdapter {
    id: String,
    answers: BTreeMap<String, String>,
}

impl MockAdapter {
    pub fn new(id: impl Into<String>, answers: BTreeMap<String, String>) -> Self {
        Self { id: id.into(), answers }
    }

    pub fn from_fixture(path: impl AsRef<Path>) -> Result<Self, AdapterError> {
        let path = path.as_ref();
        let fixture_err = |reason: String| AdapterError::Fixture {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut answers = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: FixtureLine =
                serde_json::from_str(line).map_err(|e| fixture_err(format!("line {}: {e}", i + 1)))?;
            if answers.insert(l.qa_id.clone(), l.answer).is_some() {
                return Err(fixture_err(format!("line {}: duplicate fixture id {}", i + 1, l.qa_id)));
            }
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::new(format!("mock:{stem}"), answers))
    }
}

impl ModelAdapter for MockAdapter {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn answer(&self, req: &InferenceRequest) -> Result<String, AdapterError> {
        Ok(self.answers.get(&req.qa_id).cloned().unwrap_or_default())
    }
}

/// Writes a fixture that answers every item with `answer_for(item)`.
pub fn write_fixture(d: &Dataset, path: &Path, answer_for: impl Fn(&QAPair) -> String) -> Result<(), HarnessError> {
    let mut buf = String::new();
    for qa in d.sorted_qa() {
        let line = FixtureLine {
            qa_id: qa.qa_id.clone(),
            answer: answer_for(qa),
        };
        buf.push_str(&serde_json::to_string(&line).expect("fixture lines serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Fixture echoing each item's gold answer.
pub fn write_gold_fixture(d: &Dataset, path: &Path) -> Result<(), HarnessError> {
    write_fixture(d, path, |qa| qa.answer.clone())
}

// ---------------------------------------------------------------------------
// Subprocess

#[derive(Deserialize)]
struct WireAnswer {
    qa_id: Option<String>,
    answer: String,
}

struct ChildIo {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
}

/// A long-lived child process. Requests are serialized over its stdio.
pub struct SubprocessAdapter {
    id: String,
    timeout: Duration,
    io: Mutex<ChildIo>,
}

impl SubprocessAdapter {
    /// `command` is split shell-style; no shell is involved.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, AdapterError> {
        let argv = shlex::split(command).filter(|v| !v.is_empty()).ok_or_else(|| AdapterError::Spawn(format!("cannot parse command {command:?}")))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AdapterError::Spawn(format!("{}: {e}", argv[0])))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            id: format!("subprocess:{command}"),
            timeout,
            io: Mutex::new(ChildIo {
                child,
                stdin,
                lines: rx,
            }),
        })
    }
}

impl ModelAdapter for SubprocessAdapter {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn probe(&self) -> Result<(), AdapterError> {
        let mut io = self.io.lock().unwrap_or_else(|e| e.into_inner());
        match io.child.try_wait() {
            Ok(None) => Ok(()),
            Ok(Some(status)) => Err(AdapterError::Unreachable(format!("model process exited with {status}"))),
            Err(e) => Err(AdapterError::Unreachable(e.to_string())),
        }
    }

    fn answer(&self, req: &InferenceRequest) -> Result<String, AdapterError> {
        let mut io = self.io.lock().unwrap_or_else(|e| e.into_inner());
        let mut line = serde_json::to_string(&req.wire()).expect("requests serialize");
        line.push('\n');
        let stdin = io.stdin.as_mut().ok_or(AdapterError::Exited)?;
        if stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()).is_err() {
            io.stdin = None;
            return Err(AdapterError::Exited);
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match io.lines.recv_timeout(left) {
                Ok(text) => {
                    let reply: WireAnswer = serde_json::from_str(&text)
                        .map_err(|e| AdapterError::Protocol(format!("bad reply {text:?}: {e}")))?;
                    match reply.qa_id.as_deref() {
                        Some(id) if id == req.qa_id => return Ok(reply.answer),
                        Some(id) => log::debug!("dropping stale reply for {id}"),
                        None => return Err(AdapterError::Protocol(format!("reply without qa_id: {text:?}"))),
                    }
                }
                Err(RecvTimeoutError::Timeout) => return Err(AdapterError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(AdapterError::Exited),
            }
        }
    }
}

impl Drop for SubprocessAdapter {
    fn drop(&mut self) {
        let io = self.io.get_mut().unwrap_or_else(|e| e.into_inner());
        io.stdin = None;
        // Closing stdin is the polite stop signal; don't wait on a stuck child.
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = io.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = io.child.kill();
        let _ = io.child.wait();
    }
}

// ---------------------------------------------------------------------------
// HTTP

pub const HTTP_RETRIES: u32 = 3;

pub struct HttpAdapter {
    id: String,
    endpoint: url::Url,
    agent: ureq::Agent,
    timeout: Duration,
    backoff: Duration,
}

#[derive(Deserialize)]
struct HttpAnswer {
    answer: String,
}

impl HttpAdapter {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, AdapterError> {
        let url = url::Url::parse(endpoint).map_err(|e| AdapterError::Unreachable(format!("bad endpoint {endpoint:?}: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
            return Err(AdapterError::Unreachable(format!("bad endpoint {endpoint:?}")));
        }
        Ok(Self {
            id: format!("http:{endpoint}"),
            endpoint: url,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            timeout,
            backoff: Duration::from_millis(200),
        })
    }

    /// First retry waits `base`, then `2·base`, `4·base`.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<String, (bool, AdapterError)> {
        match self.agent.post(self.endpoint.as_str()).send_json(body) {
            Ok(resp) => resp
                .into_json::<HttpAnswer>()
                .map(|a| a.answer)
                .map_err(|e| (false, AdapterError::Protocol(e.to_string()))),
            Err(ureq::Error::Status(code, _)) => Err((code >= 500 || code == 429, AdapterError::Status(code))),
            Err(ureq::Error::Transport(t)) => Err((true, AdapterError::Transport(t.to_string()))),
        }
    }
}

impl ModelAdapter for HttpAdapter {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn probe(&self) -> Result<(), AdapterError> {
        let host = self.endpoint.host_str().unwrap_or_default();
        let port = self.endpoint.port_or_known_default().unwrap_or(80);
        let addrs = (host, port)
            .to_socket_addrs()
            .map_err(|e| AdapterError::Unreachable(format!("{host}:{port}: {e}")))?;
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(_) => return Ok(()),
                Err(e) => last = Some(e),
            }
        }
        Err(AdapterError::Unreachable(format!(
            "{host}:{port}: {}",
            last.map_or_else(|| "no address".to_string(), |e| e.to_string())
        )))
    }

    fn answer(&self, req: &InferenceRequest) -> Result<String, AdapterError> {
        let body = req.wire();
        let mut delay = self.backoff;
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Ok(a) => return Ok(a),
                Err((transient, err)) if transient && retries < HTTP_RETRIES => {
                    log::debug!("{}: {err}, retrying in {delay:?}", req.qa_id);
                    std::thread::sleep(delay);
                    delay *= 2;
                    retries += 1;
                }
                Err((_, err)) => return Err(err),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterKind {
    Mock { fixture: PathBuf },
    Subprocess { command: String },
    Http { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub split: PathBuf,
    pub adapter: AdapterKind,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub seed: u64,
    pub strict: bool,
    /// Fixed timestamp for the report; the current UTC time when absent.
    pub timestamp: Option<String>,
}

impl RunConfig {
    pub fn new(split: impl Into<PathBuf>, adapter: AdapterKind) -> Self {
        Self {
            split: split.into(),
            adapter,
            max_in_flight: 1,
            timeout: Duration::from_secs(60),
            seed: 0,
            strict: true,
            timestamp: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.max_in_flight == 0 {
            return Err(HarnessError::Config("max_in_flight must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(HarnessError::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn build_adapter(&self) -> Result<Box<dyn ModelAdapter>, AdapterError> {
        Ok(match &self.adapter {
            AdapterKind::Mock { fixture } => Box::new(MockAdapter::from_fixture(fixture)?),
            AdapterKind::Subprocess { command } => Box::new(SubprocessAdapter::spawn(command, self.timeout)?),
            AdapterKind::Http { endpoint } => Box::new(HttpAdapter::new(endpoint, self.timeout)?),
        })
    }
}

/// One line of the per-item log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLog {
    pub qa_id: String,
    pub qtype: QType,
    pub prompt: String,
    pub answer: String,
    /// `None` when the item could not be scored (empty open-ended gold).
    pub score: Option<f64>,
    pub image_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: EvalReport,
    /// Sorted by `qa_id`.
    pub items: Vec<ItemLog>,
}

/// Score of one answer, `None` if the item is unscorable.
pub fn score_item(qa: &QAPair, answer: &str) -> Option<f64> {
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    match qa.qtype {
        QType::Closed => Some(hit(closed_match(answer, &qa.answer))),
        QType::Multichoice => {
            let gold = qa.answer_letter().or_else(|| extract_choice(&qa.answer, &qa.option_colors()));
            let pred = extract_choice(answer, &qa.option_colors());
            Some(hit(gold.is_some() && pred == gold))
        }
        QType::Open => match token_recall(answer, &qa.answer) {
            Ok(v) => Some(v),
            Err(MetricError::EmptyGold(_)) => None,
            Err(_) => Some(0.0),
        },
        QType::Localization => {
            let gold = parse_bbox(&qa.answer)?;
            Some(hit(localization_hit(answer, &gold, DEFAULT_IOU_THRESHOLD)))
        }
    }
}

/// PNG bytes sent for an item: the composite file when the item has one,
/// else the base image file, else a fresh encoding of the base pixels.
pub fn request_image(d: &Dataset, qa: &QAPair) -> Result<Vec<u8>, HarnessError> {
    if qa.composite_ref.is_some() {
        let path = qa
            .composite_path
            .as_ref()
            .ok_or_else(|| HarnessError::Config(format!("{} has a composite_ref but no file", qa.qa_id)))?;
        return fs::read(path).map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        });
    }
    let img = d
        .image(&qa.image_id)
        .ok_or_else(|| HarnessError::Config(format!("{} references unknown image {}", qa.qa_id, qa.image_id)))?;
    match fs::read(&img.source_path) {
        Ok(bytes) => Ok(bytes),
        Err(_) => Ok(img.encode_png()?),
    }
}

/// Options for [`evaluate`] beyond the adapter itself.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_in_flight: usize,
    pub seed: u64,
    pub split_name: String,
    pub timestamp: Option<String>,
}

/// Runs every item of `d` through `adapter` and scores it.
pub fn evaluate(d: &Dataset, adapter: &dyn ModelAdapter, opts: &EvalOptions) -> Result<RunOutput, HarnessError> {
    adapter.probe()?;
    let items = d.sorted_qa();
    let total = items.len();
    let failed = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;

    let logs: Vec<Option<ItemLog>> = pool.install(|| {
        items
            .par_iter()
            .map(|qa| -> Result<Option<ItemLog>, HarnessError> {
                if failed.load(Ordering::SeqCst) * 2 > total {
                    return Ok(None);
                }
                let image = request_image(d, qa)?;
                let image_sha256 = sha256_hex(&image);
                let req = InferenceRequest {
                    qa_id: qa.qa_id.clone(),
                    prompt: qa.question.clone(),
                    image,
                };
                let (answer, score, error) = match adapter.answer(&req) {
                    Ok(a) => {
                        let s = score_item(qa, &a);
                        (a, s, None)
                    }
                    Err(e) => {
                        log::warn!("{}: {e}", qa.qa_id);
                        failed.fetch_add(1, Ordering::SeqCst);
                        (String::new(), Some(0.0), Some(e.to_string()))
                    }
                };
                Ok(Some(ItemLog {
                    qa_id: qa.qa_id.clone(),
                    qtype: qa.qtype,
                    prompt: req.prompt,
                    answer,
                    score,
                    image_sha256,
                    error,
                }))
            })
            .collect::<Result<_, _>>()
    })?;

    let logs: Vec<ItemLog> = logs.into_iter().flatten().collect();
    let n_failed = logs.iter().filter(|l| l.error.is_some()).count();
    let aborted = n_failed * 2 > total;
    let scores: Vec<ItemScore> = logs
        .iter()
        .filter_map(|l| {
            l.score.map(|score| ItemScore {
                qa_id: l.qa_id.clone(),
                qtype: l.qtype,
                score,
            })
        })
        .collect();
    let meta = RunMeta {
        model_id: adapter.model_id().to_string(),
        split: opts.split_name.clone(),
        seed: opts.seed,
        timestamp: opts.timestamp.clone().unwrap_or_else(now_utc),
        failed: n_failed,
        skipped: logs.iter().filter(|l| l.score.is_none()).count(),
        aborted,
    };
    let out = RunOutput {
        report: aggregate(&scores, meta),
        items: logs,
    };
    if n_failed > 0 && !aborted {
        log::warn!("{n_failed} of {total} items failed and were scored 0");
    }
    if aborted {
        return Err(HarnessError::Aborted {
            failed: n_failed,
            total,
            partial: Box::new(out),
        });
    }
    Ok(out)
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Loads the split, builds the adapter and evaluates.
pub fn run_eval(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let d = load_dataset_with(
        &cfg.split,
        &LoadOptions {
            strict: cfg.strict,
            name: None,
        },
    )?;
    let adapter = cfg.build_adapter()?;
    evaluate(
        &d,
        adapter.as_ref(),
        &EvalOptions {
            max_in_flight: cfg.max_in_flight,
            seed: cfg.seed,
            split_name: d.name.clone(),
            timestamp: cfg.timestamp.clone(),
        },
    )
}

pub const ITEMS_FILE: &str = "items.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

/// Writes `items.jsonl`, `report.json` and `report.md` under `dir`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    let io = |path: PathBuf| move |source| HarnessError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let mut items = Vec::new();
    for l in &out.items {
        serde_json::to_writer(&mut items, l).expect("item logs serialize");
        items.push(b'\n');
    }
    let p = dir.join(ITEMS_FILE);
    fs::File::create(&p).and_then(|mut f| f.write_all(&items)).map_err(io(p))?;
    let p = dir.join(REPORT_JSON);
    fs::write(&p, out.report.to_json()).map_err(io(p))?;
    let p = dir.join(REPORT_MD);
    fs::write(&p, out.report.to_markdown(&out.report.run_meta.split)).map_err(io(p))?;
    Ok(())
}
