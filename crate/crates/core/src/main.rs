use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cxr_instruct::client::OracleSpec;
use cxr_instruct::config::RunConfig;
use cxr_instruct::enrich::Variant;
use cxr_instruct::error::{Error, ErrorKind, Result};
use cxr_instruct::pipeline::{self, Backend};
use cxr_instruct::report;
use cxr_instruct::split::Partition;

#[derive(Parser)]
#[command(name = "cxr-instruct", version, about = "Chest X-ray instruction data builder and evaluator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Expert-context probability threshold (overrides `enrich.threshold`).
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check referential integrity of the inputs.
    Validate,
    /// Compute the patient-level split and write its manifest.
    Split,
    /// Write basic and/or expert-enhanced instruction files.
    Build {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        partition: Option<Partition>,
    },
    /// Per-partition dataset statistics.
    Stats,
    /// Collect predictions for a partition and score them.
    Eval {
        #[arg(long)]
        variant: Option<Variant>,
        /// `echo_gt`, `constant=<text>`, `expert_threshold[=<t>]`, or a JSON spec.
        #[arg(long, conflicts_with = "endpoint")]
        oracle: Option<String>,
        /// `http(s)://...` or `file:<dir>`.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        partition: Option<Partition>,
    },
    /// Compare two scored systems and write the report.
    Compare {
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// AUC per condition from a `condition,score,label` CSV.
    Auc { input: PathBuf },
}

fn parse_oracle(s: &str, threshold: f64) -> Result<OracleSpec> {
    if s.trim_start().starts_with('{') {
        return serde_json::from_str(s).map_err(|e| Error::Config(format!("oracle spec: {e}")));
    }
    let (name, arg) = match s.split_once('=') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    match (name, arg) {
        ("echo_gt", None) => Ok(OracleSpec::EchoGt),
        ("constant", Some(text)) => Ok(OracleSpec::Constant { text: text.into() }),
        ("expert_threshold", None) => Ok(OracleSpec::expert(threshold)),
        ("expert_threshold", Some(t)) => t
            .parse()
            .map(OracleSpec::expert)
            .map_err(|_| Error::Config(format!("bad oracle threshold: {t}"))),
        _ => Err(Error::Config(format!("unknown oracle: {s}"))),
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threshold {
        cfg.enrich.threshold = t;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Validate => {
            let rep = pipeline::validate(&cfg)?;
            print_json(&rep);
            if !rep.is_valid() {
                return Ok(ExitCode::from(ErrorKind::Validation.exit_code() as u8));
            }
        }
        Command::Split => {
            let m = pipeline::run_split(&cfg)?;
            println!(
                "train {} | test {} | extended test {} images; fingerprint {}",
                m.train_image_ids.len(),
                m.test_image_ids.len(),
                m.extended_test_image_ids.len(),
                m.fingerprint
            );
        }
        Command::Build { variant, partition } => {
            if let Some(p) = partition {
                cfg.build.partition = p;
            }
            let variants = match variant {
                Some(v) => vec![v],
                None => cfg.build.variants.clone(),
            };
            let s = pipeline::run_build(&cfg, &variants)?;
            for (v, f) in &s.files {
                println!("{}: {} records, {} QA pairs -> {}", v.as_str(), f.records, f.qa_pairs, f.path);
            }
        }
        Command::Stats => {
            print!("{}", pipeline::run_stats(&cfg)?.rendered);
        }
        Command::Eval {
            variant,
            oracle,
            endpoint,
            runs,
            system,
            partition,
        } => {
            if let Some(v) = variant {
                cfg.eval.variant = v;
            }
            if let Some(r) = runs {
                cfg.eval.runs = r;
            }
            if let Some(s) = system {
                cfg.eval.system = s;
            }
            if let Some(p) = partition {
                cfg.eval.partition = p;
            }
            if let Some(o) = oracle {
                cfg.eval.oracle = Some(parse_oracle(&o, cfg.enrich.threshold)?);
                cfg.eval.endpoint = None;
            }
            if let Some(e) = endpoint {
                cfg.eval.endpoint = Some(e);
                cfg.eval.oracle = None;
            }
            let backend = Backend::from_config(&cfg)?;
            let agg = pipeline::run_eval(&cfg, &backend)?;
            for (bucket, ms) in &agg.summary.buckets {
                println!("{:<20} {}", report::row_label(bucket), report::render_value(ms, true));
            }
        }
        Command::Compare { a, b } => {
            let a = a.or(cfg.compare.a.clone()).ok_or_else(|| Error::Config("compare needs --a".into()))?;
            let b = b.or(cfg.compare.b.clone()).ok_or_else(|| Error::Config("compare needs --b".into()))?;
            print!("{}", pipeline::run_compare(&cfg, &a, &b)?.render());
        }
        Command::Auc { input } => {
            print!("{}", report::render_auc_table(&pipeline::run_auc(&input)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Validation(rep) = &e {
                eprintln!("{}", serde_json::to_string_pretty(rep).unwrap_or_default());
            }
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
