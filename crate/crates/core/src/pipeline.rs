//! File-level pipeline steps behind the CLI subcommands. Every step reads its
//! inputs from the run config and writes deterministic outputs under `out`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{self, FileExchange, HttpEndpoint, OracleSpec};
use crate::config::RunConfig;
use crate::corpus::{self, CorpusReport, ExpertPrediction, ImageRecord, QaRecord};
use crate::enrich::{self, Variant, TEMPLATE_VERSION};
use crate::error::{Error, Result};
use crate::ingest;
use crate::metrics::{self, Bucket, BucketMean, Prediction, QuestionScore, RunScores, METRIC_VERSION};
use crate::report::{self, EvalReport, ReportMeta};
use crate::split::{self, DatasetStats, Partition, SplitManifest};
use crate::stats::{self, RunSummary};

pub const MANIFEST_FILE: &str = "split_manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Clone)]
pub struct Corpus {
    pub images: Vec<ImageRecord>,
    pub qas: Vec<QaRecord>,
    pub experts: Vec<ExpertPrediction>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("inputs.{key} is not set")))
}

fn with_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Reads all inputs without cross-checking them.
pub fn read_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let ip = required(&cfg.inputs.images, "images")?;
    let images = with_file(ip, ingest::parse_image_metadata(open(ip)?, &cfg.schema))?;
    let qp = required(&cfg.inputs.qas, "qas")?;
    let qas = with_file(qp, ingest::parse_qa_table(open(qp)?, &cfg.schema))?;
    let experts = match &cfg.inputs.experts {
        Some(ep) => with_file(ep, ingest::parse_expert_predictions(open(ep)?))?,
        None => Vec::new(),
    };
    Ok(Corpus { images, qas, experts })
}

pub fn validate(cfg: &RunConfig) -> Result<CorpusReport> {
    let c = read_corpus(cfg)?;
    Ok(corpus::validate(&c.images, &c.qas, &c.experts))
}

/// Reads and validates the corpus, failing on any referential problem.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let c = read_corpus(cfg)?;
    let report = corpus::validate(&c.images, &c.qas, &c.experts);
    if !report.is_valid() {
        return Err(Error::Validation(Box::new(report)));
    }
    Ok(c)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::parse(e.line() as u64, format!("{}: {e}", path.display())))
}

fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    ingest::write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

fn read_jsonl_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(i as u64 + 1, format!("{}: {e}", path.display())))
        })
        .collect()
}

/// The configured split: a stored manifest when one is named, else computed.
pub fn resolve_split(cfg: &RunConfig, images: &[ImageRecord]) -> Result<SplitManifest> {
    match &cfg.split.manifest {
        Some(path) => {
            let m: SplitManifest = read_json(path)?;
            m.check(images)?;
            Ok(m)
        }
        None => split::make_split(images, &cfg.split.to_split_config(cfg.seed)?),
    }
}

/// QAs of one partition after the configured category filter.
pub fn partition_qas(c: &Corpus, manifest: &SplitManifest, partition: Partition) -> Vec<QaRecord> {
    let kept = split::filter_categories(&c.qas, &manifest.config.drop_categories);
    split::select_qas(manifest, &kept, partition)
}

pub fn run_split(cfg: &RunConfig) -> Result<SplitManifest> {
    let c = load_corpus(cfg)?;
    let manifest = resolve_split(cfg, &c.images)?;
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub template_version: String,
    pub partition: Partition,
    pub split_fingerprint: String,
    pub config_fingerprint: String,
    pub files: BTreeMap<Variant, BuildFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildFile {
    pub path: String,
    pub records: usize,
    pub qa_pairs: usize,
}

pub fn instructions_file(variant: Variant) -> String {
    format!("instructions_{}.jsonl", variant.as_str())
}

pub fn run_build(cfg: &RunConfig, variants: &[Variant]) -> Result<BuildSummary> {
    let c = load_corpus(cfg)?;
    let manifest = resolve_split(cfg, &c.images)?;
    let qas = partition_qas(&c, &manifest, cfg.build.partition);
    let mut files = BTreeMap::new();
    for &variant in variants {
        let records = enrich::build_dataset(&c.images, &qas, &c.experts, variant, &cfg.enrich)?;
        let name = instructions_file(variant);
        write_jsonl_file(&cfg.out.join(&name), &records)?;
        files.insert(
            variant,
            BuildFile {
                path: name,
                records: records.len(),
                qa_pairs: records.iter().map(|r| r.n_exchanges()).sum(),
            },
        );
    }
    let summary = BuildSummary {
        template_version: TEMPLATE_VERSION.into(),
        partition: cfg.build.partition,
        split_fingerprint: manifest.fingerprint.clone(),
        config_fingerprint: cfg.fingerprint(),
        files,
    };
    write_json(&cfg.out.join("build_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsOutput {
    pub partitions: BTreeMap<String, DatasetStats>,
    pub rendered: String,
}

pub fn run_stats(cfg: &RunConfig) -> Result<StatsOutput> {
    let c = load_corpus(cfg)?;
    let manifest = resolve_split(cfg, &c.images)?;
    let mut partitions = BTreeMap::new();
    let mut rendered = String::new();
    for (name, p) in [
        ("train", Partition::Train),
        ("test", Partition::Test),
        ("extended_test", Partition::ExtendedTest),
    ] {
        let qas = partition_qas(&c, &manifest, p);
        let ids = qas.iter().map(|q| q.image_id.clone()).collect();
        let s = split::summarize(&qas, &ids);
        rendered.push_str(&s.render(name));
        rendered.push('\n');
        partitions.insert(name.to_string(), s);
    }
    let out = StatsOutput { partitions, rendered };
    write_json(&cfg.out.join("stats.json"), &out)?;
    Ok(out)
}

/// Where predictions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Oracle(OracleSpec),
    Http(String),
    FileExchange(PathBuf),
}

impl Backend {
    /// `http(s)://...` or `file:<dir>`.
    pub fn endpoint(spec: &str) -> Result<Self> {
        if let Some(dir) = spec.strip_prefix("file:") {
            Ok(Backend::FileExchange(PathBuf::from(dir)))
        } else if spec.starts_with("http://") || spec.starts_with("https://") {
            Ok(Backend::Http(spec.to_string()))
        } else {
            Err(Error::Config(format!("endpoint must be http(s):// or file:<dir>, got {spec}")))
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match (&cfg.eval.oracle, &cfg.eval.endpoint) {
            (Some(_), Some(_)) => Err(Error::Config("eval.oracle and eval.endpoint are mutually exclusive".into())),
            (Some(o), None) => Ok(Backend::Oracle(o.clone())),
            (None, Some(e)) => Backend::endpoint(e),
            (None, None) => Err(Error::Config("set eval.oracle or eval.endpoint".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub scores_file: String,
    pub predictions_file: String,
    pub buckets: BTreeMap<Bucket, BucketMean>,
    pub excluded: Vec<String>,
}

/// Everything `eval` writes about one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemAggregate {
    pub system: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub split_fingerprint: String,
    pub template_version: String,
    pub metric_version: String,
    pub variant: Variant,
    pub partition: Partition,
    pub runs: Vec<RunRecord>,
    pub summary: RunSummary,
}

pub fn system_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("scores").join(&cfg.eval.system)
}

fn predict(
    backend: &Backend,
    cfg: &RunConfig,
    c: &Corpus,
    qas: &[QaRecord],
    run_id: &str,
) -> Result<Vec<Prediction>> {
    let ev = &cfg.eval;
    let timeout = Duration::from_secs(ev.timeout_secs);
    let requests = || client::build_requests(qas, &c.images, &c.experts, ev.variant, &cfg.enrich);
    match backend {
        Backend::Oracle(spec) => client::run_oracle(spec, qas, Some(&c.experts), run_id),
        Backend::Http(url) => client::submit_sharded(
            &requests()?,
            &HttpEndpoint::new(url.clone(), timeout),
            &ev.retry,
            run_id,
            ev.shard_size,
            ev.parallel,
        ),
        Backend::FileExchange(dir) => {
            let run_dir = dir.join(run_id.replace('/', "_"));
            client::submit_sharded(
                &requests()?,
                &FileExchange::new(run_dir, timeout),
                &ev.retry,
                run_id,
                ev.shard_size,
                1,
            )
        }
    }
}

pub fn run_eval(cfg: &RunConfig, backend: &Backend) -> Result<SystemAggregate> {
    if cfg.eval.runs == 0 {
        return Err(Error::Config("eval.runs must be at least 1".into()));
    }
    let c = load_corpus(cfg)?;
    let manifest = resolve_split(cfg, &c.images)?;
    let qas = partition_qas(&c, &manifest, cfg.eval.partition);
    if qas.is_empty() {
        return Err(Error::Contract(format!(
            "partition {:?} has no questions to evaluate",
            cfg.eval.partition
        )));
    }
    let dir = system_dir(cfg);
    fs::create_dir_all(&dir)?;

    let mut runs = Vec::with_capacity(cfg.eval.runs);
    let mut per_run = Vec::with_capacity(cfg.eval.runs);
    for i in 0..cfg.eval.runs {
        let run_id = format!("run_{i}");
        let preds = predict(backend, cfg, &c, &qas, &format!("{}/{run_id}", cfg.eval.system))?;
        let scored = metrics::score_run(&preds, &qas, &cfg.eval.metric)?;
        let predictions_file = format!("{run_id}.predictions.jsonl");
        let scores_file = format!("{run_id}.jsonl");
        write_jsonl_file(&dir.join(&predictions_file), &preds)?;
        write_jsonl_file(&dir.join(&scores_file), &scored.scores)?;
        let buckets = metrics::aggregate_with_averages(&scored.scores);
        per_run.push(buckets.iter().map(|(b, m)| (*b, m.mean)).collect());
        runs.push(RunRecord {
            run_id,
            scores_file,
            predictions_file,
            buckets,
            excluded: scored.excluded,
        });
    }
    let agg = SystemAggregate {
        system: cfg.eval.system.clone(),
        seed: cfg.seed,
        config_fingerprint: cfg.fingerprint(),
        split_fingerprint: manifest.fingerprint.clone(),
        template_version: TEMPLATE_VERSION.into(),
        metric_version: METRIC_VERSION.into(),
        variant: cfg.eval.variant,
        partition: cfg.eval.partition,
        runs,
        summary: stats::summarize_runs(&per_run)?,
    };
    write_json(&dir.join(AGGREGATE_FILE), &agg)?;
    Ok(agg)
}

/// Reads a system directory written by [`run_eval`].
pub fn load_system(dir: &Path) -> Result<(SystemAggregate, Vec<RunScores>)> {
    let agg: SystemAggregate = read_json(&dir.join(AGGREGATE_FILE))?;
    let runs = agg
        .runs
        .iter()
        .map(|r| {
            Ok(RunScores {
                run_id: r.run_id.clone(),
                scores: read_jsonl_file::<QuestionScore>(&dir.join(&r.scores_file))?,
                excluded: r.excluded.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((agg, runs))
}

pub fn run_compare(cfg: &RunConfig, a_dir: &Path, b_dir: &Path) -> Result<EvalReport> {
    let (a, a_runs) = load_system(a_dir)?;
    let (b, b_runs) = load_system(b_dir)?;
    for (what, x, y) in [
        ("metric version", &a.metric_version, &b.metric_version),
        ("split", &a.split_fingerprint, &b.split_fingerprint),
    ] {
        if x != y {
            return Err(Error::Contract(format!("systems differ in {what}: {x} vs {y}")));
        }
    }
    let meta = ReportMeta {
        config_fingerprint: cfg.fingerprint(),
        template_version: a.template_version.clone(),
        metric_version: a.metric_version.clone(),
        seed: cfg.seed,
    };
    let mut rep = report::build_report(meta, (&a.system, &a_runs), (&b.system, &b_runs), &cfg.compare.settings())?;
    if let Some(path) = &cfg.inputs.auc {
        rep.auc = Some(with_file(path, report::auc_table_from_csv(open(path)?))?);
    }
    write_json(&cfg.out.join("report.json"), &rep)?;
    fs::write(cfg.out.join("report.md"), rep.render())?;
    Ok(rep)
}

pub fn run_auc(path: &Path) -> Result<Vec<report::AucRow>> {
    with_file(path, report::auc_table_from_csv(open(path)?))
}
