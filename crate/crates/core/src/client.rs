//! Boundary to answer-producing systems.
//!
//! Two transports are provided: a file exchange (request lines out, answer
//! lines back) and an HTTP endpoint taking one POST per batch. Stub oracles
//! produce predictions locally for testing and for the expert-classifier
//! baseline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, ExpertPrediction, ImageRecord, Openness, QaCategory, QaRecord};
use crate::enrich::{self, EnrichOptions, Variant};
use crate::error::{Error, Result};
use crate::metrics::Prediction;

/// Environment variable holding the bearer token for HTTP endpoints.
pub const ENDPOINT_TOKEN_VAR: &str = "CXR_ENDPOINT_TOKEN";

/// Answer emitted by the expert oracle when it cannot map a question to a condition.
pub const NOT_APPLICABLE: &str = "n/a";

/// Request line: `{qa_id, image, prompt}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub qa_id: String,
    pub image: String,
    pub prompt: String,
}

/// Response line: `{qa_id, answer}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub qa_id: String,
    pub answer: String,
}

/// Builds one request per QA. The prompt is the human turn the QA occupies in
/// its image's instruction record, verbatim.
pub fn build_requests(
    qas: &[QaRecord],
    images: &[ImageRecord],
    experts: &[ExpertPrediction],
    variant: Variant,
    opts: &EnrichOptions,
) -> Result<Vec<InferenceRequest>> {
    let records = enrich::build_dataset(images, qas, experts, variant, opts)?;
    let by_image: HashMap<&str, &enrich::InstructionRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut position: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::with_capacity(qas.len());
    for qa in qas {
        let rec = by_image[qa.image_id.as_str()];
        let t = position.entry(qa.image_id.as_str()).or_default();
        out.push(InferenceRequest {
            qa_id: qa.qa_id.clone(),
            image: rec.image.clone(),
            prompt: rec.turns[2 * *t].text.clone(),
        });
        *t += 1;
    }
    Ok(out)
}

/// A failed exchange, tagged with whether retrying may help.
#[derive(Debug)]
pub struct TransportFailure {
    pub retryable: bool,
    pub error: Error,
}

impl TransportFailure {
    pub fn transient(error: Error) -> Self {
        TransportFailure { retryable: true, error }
    }

    pub fn fatal(error: Error) -> Self {
        TransportFailure { retryable: false, error }
    }
}

pub trait Transport: Sync {
    fn exchange(&self, batch: &[InferenceRequest]) -> std::result::Result<Vec<AnswerRecord>, TransportFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "duration_ms")]
    pub initial_backoff: Duration,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2,
        }
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

fn ensure_unique(requests: &[InferenceRequest]) -> Result<()> {
    let mut seen = HashSet::new();
    let mut dups: Vec<String> = requests
        .iter()
        .filter(|r| !seen.insert(r.qa_id.as_str()))
        .map(|r| r.qa_id.clone())
        .collect();
    if dups.is_empty() {
        return Ok(());
    }
    dups.sort();
    dups.dedup();
    Err(Error::Contract(format!("duplicate qa ids in request batch: {}", dups.join(", "))))
}

/// Matches a response to its requests and returns predictions in request order.
fn match_answers(requests: &[InferenceRequest], answers: Vec<AnswerRecord>, run_id: &str) -> Result<Vec<Prediction>> {
    let wanted: HashSet<&str> = requests.iter().map(|r| r.qa_id.as_str()).collect();
    let mut by_id: HashMap<String, String> = HashMap::with_capacity(answers.len());
    for a in answers {
        if !wanted.contains(a.qa_id.as_str()) {
            return Err(Error::MalformedResponse(format!("answer for unrequested qa id {}", a.qa_id)));
        }
        if by_id.contains_key(&a.qa_id) {
            return Err(Error::MalformedResponse(format!("duplicate answer for qa id {}", a.qa_id)));
        }
        by_id.insert(a.qa_id, a.answer);
    }
    let missing: Vec<String> = requests
        .iter()
        .filter(|r| !by_id.contains_key(&r.qa_id))
        .map(|r| r.qa_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    Ok(requests
        .iter()
        .map(|r| Prediction {
            qa_id: r.qa_id.clone(),
            answer_text: by_id.remove(&r.qa_id).expect("checked above"),
            run_id: run_id.to_string(),
        })
        .collect())
}

fn exchange_with_retry<T: Transport + ?Sized>(
    requests: &[InferenceRequest],
    transport: &T,
    policy: &RetryPolicy,
) -> Result<Vec<AnswerRecord>> {
    let mut backoff = policy.initial_backoff;
    let attempts = policy.attempts.max(1);
    let mut attempt = 1;
    loop {
        match transport.exchange(requests) {
            Ok(answers) => return Ok(answers),
            Err(f) if f.retryable && attempt < attempts => {
                std::thread::sleep(backoff);
                backoff *= policy.multiplier;
                attempt += 1;
            }
            Err(f) => return Err(f.error),
        }
    }
}

/// Sends one batch, retrying transient failures with exponential backoff.
/// Returns exactly one prediction per request, in request order.
pub fn submit_batch<T: Transport + ?Sized>(
    requests: &[InferenceRequest],
    transport: &T,
    policy: &RetryPolicy,
    run_id: &str,
) -> Result<Vec<Prediction>> {
    ensure_unique(requests)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let answers = exchange_with_retry(requests, transport, policy)?;
    match_answers(requests, answers, run_id)
}

/// Splits the requests into shards of `shard_size` and submits up to
/// `parallel` shards at a time. Output order follows input order.
pub fn submit_sharded<T: Transport + ?Sized>(
    requests: &[InferenceRequest],
    transport: &T,
    policy: &RetryPolicy,
    run_id: &str,
    shard_size: usize,
    parallel: usize,
) -> Result<Vec<Prediction>> {
    ensure_unique(requests)?;
    let shards: Vec<&[InferenceRequest]> = requests.chunks(shard_size.max(1)).collect();
    let mut out = Vec::with_capacity(requests.len());
    for wave in shards.chunks(parallel.max(1)) {
        let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|shard| scope.spawn(move || submit_batch(shard, transport, policy, run_id)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("shard worker panicked".into()))))
                .collect()
        });
        for r in results {
            out.extend(r?);
        }
    }
    Ok(out)
}

/// File-based exchange: each batch is written to
/// `<dir>/batch-<k>.requests.jsonl`; the answering process writes
/// `<dir>/batch-<k>.responses.jsonl`, which is polled for until the timeout.
pub struct FileExchange {
    pub dir: PathBuf,
    pub poll_interval: Duration,
    pub timeout: Duration,
    counter: AtomicUsize,
}

impl FileExchange {
    pub fn new(dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        FileExchange {
            dir: dir.into(),
            poll_interval: Duration::from_millis(50),
            timeout,
            counter: AtomicUsize::new(0),
        }
    }

    pub fn request_path(dir: &std::path::Path, k: usize) -> PathBuf {
        dir.join(format!("batch-{k:05}.requests.jsonl"))
    }

    pub fn response_path(dir: &std::path::Path, k: usize) -> PathBuf {
        dir.join(format!("batch-{k:05}.responses.jsonl"))
    }
}

pub fn parse_answer_lines<R: BufRead>(reader: R) -> Result<Vec<AnswerRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnswerRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedResponse(format!("response line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

impl Transport for FileExchange {
    fn exchange(&self, batch: &[InferenceRequest]) -> std::result::Result<Vec<AnswerRecord>, TransportFailure> {
        let io = |e: std::io::Error| TransportFailure::fatal(Error::Io(e));
        std::fs::create_dir_all(&self.dir).map_err(io)?;
        let k = self.counter.fetch_add(1, Ordering::SeqCst);
        let req = Self::request_path(&self.dir, k);
        let resp = Self::response_path(&self.dir, k);
        let _ = std::fs::remove_file(&resp);

        // Written under a temporary name, then renamed, so readers never see a partial batch.
        let tmp = req.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
            for r in batch {
                serde_json::to_writer(&mut f, r).map_err(|e| io(std::io::Error::other(e)))?;
                f.write_all(b"\n").map_err(io)?;
            }
            f.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, &req).map_err(io)?;

        let start = Instant::now();
        loop {
            if resp.exists() {
                let f = std::fs::File::open(&resp).map_err(io)?;
                return parse_answer_lines(BufReader::new(f)).map_err(TransportFailure::fatal);
            }
            if start.elapsed() >= self.timeout {
                return Err(TransportFailure::transient(Error::Timeout(self.timeout)));
            }
            std::thread::sleep(self.poll_interval);
        }
    }
}

/// HTTP endpoint: POST a JSON array of requests, receive a JSON array of answers.
pub struct HttpEndpoint {
    pub url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpEndpoint {
            url: url.into(),
            token: std::env::var(ENDPOINT_TOKEN_VAR).ok().filter(|t| !t.is_empty()),
            agent: config.into(),
        }
    }
}

impl Transport for HttpEndpoint {
    fn exchange(&self, batch: &[InferenceRequest]) -> std::result::Result<Vec<AnswerRecord>, TransportFailure> {
        let body = serde_json::to_string(batch).map_err(|e| TransportFailure::fatal(Error::Io(std::io::Error::other(e))))?;
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let resp = match req.send(body.as_str()) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(TransportFailure::transient(Error::Transport(format!("{} timed out", self.url))))
            }
            Err(e) => return Err(TransportFailure::transient(Error::Transport(e.to_string()))),
        };
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| TransportFailure::transient(Error::Transport(e.to_string())))?;
        if !(200..300).contains(&status) {
            let err = Error::Transport(format!("{} returned HTTP {status}", self.url));
            let retryable = status >= 500 || status == 408 || status == 429;
            return Err(TransportFailure { retryable, error: err });
        }
        serde_json::from_str(&text)
            .map_err(|e| TransportFailure::fatal(Error::MalformedResponse(format!("response body: {e}"))))
    }
}

/// Finds the condition a question asks about: the longest known phrase
/// (canonical names plus synonyms, singular or plural) occurring on word
/// boundaries of the normalized question.
#[derive(Debug, Clone)]
pub struct ConditionMatcher {
    /// Padded phrases, longest first.
    phrases: Vec<(String, Condition)>,
}

pub fn default_synonyms() -> BTreeMap<String, Condition> {
    [
        ("enlarged heart", Condition::Cardiomegaly),
        ("cardiac enlargement", Condition::Cardiomegaly),
        ("enlarged cardiac silhouette", Condition::Cardiomegaly),
        ("pleural effusion", Condition::Effusion),
        ("opacity", Condition::LungOpacity),
        ("enlarged cardio mediastinum", Condition::EnlargedCardiomediastinum),
        ("pulmonary edema", Condition::Edema),
        ("lung mass", Condition::Mass),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn normalize_text(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ConditionMatcher {
    pub fn new(synonyms: &BTreeMap<String, Condition>) -> Self {
        let mut phrases: Vec<(String, Condition)> = Vec::new();
        let base = Condition::ALL.iter().map(|c| (c.label().to_string(), *c));
        let extra = synonyms.iter().map(|(k, v)| (normalize_text(k), *v));
        for (phrase, c) in base.chain(extra) {
            if phrase.is_empty() {
                continue;
            }
            phrases.push((format!(" {phrase} "), c));
            phrases.push((format!(" {phrase}s "), c));
        }
        phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        phrases.dedup_by(|a, b| a.0 == b.0);
        ConditionMatcher { phrases }
    }

    pub fn extract(&self, question: &str) -> Option<Condition> {
        let padded = format!(" {} ", normalize_text(question));
        self.phrases
            .iter()
            .find(|(p, _)| padded.contains(p.as_str()))
            .map(|(_, c)| *c)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    EchoGt,
    Constant {
        text: String,
    },
    Lookup {
        table: BTreeMap<String, String>,
    },
    ExpertThreshold {
        threshold: f64,
        #[serde(default)]
        synonyms: BTreeMap<String, Condition>,
        /// Merge [`default_synonyms`] under the user-supplied table.
        #[serde(default = "default_true")]
        default_synonyms: bool,
    },
}

impl OracleSpec {
    pub fn expert(threshold: f64) -> Self {
        OracleSpec::ExpertThreshold {
            threshold,
            synonyms: BTreeMap::new(),
            default_synonyms: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            OracleSpec::ExpertThreshold { threshold, .. } if !(0.0..=1.0).contains(threshold) => Err(Error::Config(
                format!("expert_threshold oracle needs a threshold in [0,1], got {threshold}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Whether the expert oracle answers a question at all.
pub fn expert_applicable(qa: &QaRecord) -> bool {
    qa.openness == Openness::Closed && matches!(qa.category, QaCategory::Abnormality | QaCategory::Presence)
}

pub fn run_oracle(
    spec: &OracleSpec,
    qas: &[QaRecord],
    experts: Option<&[ExpertPrediction]>,
    run_id: &str,
) -> Result<Vec<Prediction>> {
    spec.check()?;
    let predict = |qa: &QaRecord, answer: String| Prediction {
        qa_id: qa.qa_id.clone(),
        answer_text: answer,
        run_id: run_id.to_string(),
    };
    match spec {
        OracleSpec::EchoGt => Ok(qas.iter().map(|q| predict(q, q.answer.clone())).collect()),
        OracleSpec::Constant { text } => Ok(qas.iter().map(|q| predict(q, text.clone())).collect()),
        OracleSpec::Lookup { table } => qas
            .iter()
            .map(|q| {
                table
                    .get(&q.qa_id)
                    .map(|a| predict(q, a.clone()))
                    .ok_or_else(|| Error::Contract(format!("lookup oracle has no answer for qa {}", q.qa_id)))
            })
            .collect(),
        OracleSpec::ExpertThreshold {
            threshold,
            synonyms,
            default_synonyms: use_defaults,
        } => {
            let mut table = if *use_defaults { default_synonyms() } else { BTreeMap::new() };
            table.extend(synonyms.iter().map(|(k, v)| (k.clone(), *v)));
            let matcher = ConditionMatcher::new(&table);
            let experts: HashMap<&str, &ExpertPrediction> = experts
                .unwrap_or_default()
                .iter()
                .map(|e| (e.image_id.as_str(), e))
                .collect();
            let mut missing: Vec<&str> = qas
                .iter()
                .map(|q| q.image_id.as_str())
                .filter(|id| !experts.contains_key(id))
                .collect();
            missing.sort_unstable();
            missing.dedup();
            if !missing.is_empty() {
                return Err(Error::Contract(format!(
                    "no expert prediction for image(s): {}",
                    missing.join(", ")
                )));
            }
            Ok(qas
                .iter()
                .map(|q| {
                    let answer = expert_applicable(q)
                        .then(|| matcher.extract(&q.question))
                        .flatten()
                        .map(|c| {
                            let p = experts[q.image_id.as_str()].disease_probs.get(c);
                            if p >= *threshold { "yes" } else { "no" }
                        })
                        .unwrap_or(NOT_APPLICABLE);
                    predict(q, answer.to_string())
                })
                .collect())
        }
    }
}
