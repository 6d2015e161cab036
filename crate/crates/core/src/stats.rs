//! Paired significance testing (Wilcoxon signed-rank), aggregation across
//! repeated inference runs, and significance stars.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::metrics::{Bucket, RunScores};
use crate::error::{Error, Result};

/// Largest `n_effective` handled by the exact null distribution by default.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub qa_ids: Vec<String>,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
}

impl PairedSample {
    pub fn new(qa_ids: Vec<String>, a_values: Vec<f64>, b_values: Vec<f64>) -> Result<Self> {
        if qa_ids.len() != a_values.len() || a_values.len() != b_values.len() {
            return Err(Error::Contract(format!(
                "paired sample lengths differ: {} ids, {} a, {} b",
                qa_ids.len(),
                a_values.len(),
                b_values.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let dups: BTreeSet<&str> = qa_ids
            .iter()
            .filter(|id| !seen.insert(id.as_str()))
            .map(String::as_str)
            .collect();
        if !dups.is_empty() {
            return Err(Error::DuplicateIds(dups.into_iter().map(str::to_string).collect()));
        }
        if a_values.iter().chain(&b_values).any(|v| !v.is_finite()) {
            return Err(Error::Contract("paired sample contains non-finite values".into()));
        }
        Ok(PairedSample {
            qa_ids,
            a_values,
            b_values,
        })
    }

    /// A sample whose differences `b - a` are exactly `diffs` (a = 0).
    pub fn from_differences(diffs: &[f64]) -> Result<Self> {
        Self::new(
            (0..diffs.len()).map(|i| i.to_string()).collect(),
            vec![0.0; diffs.len()],
            diffs.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.qa_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qa_ids.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a_values.iter().zip(&self.b_values).map(|(a, b)| b - a).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// B tends to exceed A.
    Greater,
    /// B tends to fall below A.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WilcoxonConfig {
    pub alternative: Alternative,
    /// Exact p-values up to and including this many non-zero differences.
    pub exact_max_n: usize,
    pub continuity_correction: bool,
}

impl Default for WilcoxonConfig {
    fn default() -> Self {
        WilcoxonConfig {
            alternative: Alternative::TwoSided,
            exact_max_n: EXACT_MAX_N,
            continuity_correction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-).
    pub w_statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n: usize,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub p_value: f64,
    pub alternative: Alternative,
    pub method: PMethod,
    /// Every difference was zero.
    pub degenerate: bool,
    /// Zero differences are dropped before ranking ("wilcox" treatment).
    pub zero_method: String,
}

/// Doubled average ranks of `values` (ascending); doubling keeps tied ranks integral.
/// Also returns the tie-group sizes.
pub fn doubled_ranks(values: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r2 = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r2;
        }
        ties.push((j - i) as u64);
        i = j;
    }
    (ranks, ties)
}

/// Null distribution of 2·W+ as counts over all 2ⁿ sign assignments.
fn null_counts(ranks2: &[u64]) -> Vec<u64> {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c > 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    counts
}

fn normal_sf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

pub fn wilcoxon_signed_rank(sample: &PairedSample, cfg: &WilcoxonConfig) -> Result<WilcoxonResult> {
    if sample.is_empty() {
        return Err(Error::Contract("wilcoxon test needs at least one pair".into()));
    }
    let nonzero: Vec<f64> = sample.differences().into_iter().filter(|d| *d != 0.0).collect();
    let n_eff = nonzero.len();
    let mut result = WilcoxonResult {
        w_statistic: 0.0,
        w_plus: 0.0,
        w_minus: 0.0,
        n: sample.len(),
        n_effective: n_eff,
        p_value: 1.0,
        alternative: cfg.alternative,
        method: PMethod::Exact,
        degenerate: n_eff == 0,
        zero_method: "wilcox".to_string(),
    };
    if n_eff == 0 {
        return Ok(result);
    }

    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks2, ties) = doubled_ranks(&abs);
    let total2: u64 = ranks2.iter().sum();
    let w_plus2: u64 = ranks2.iter().zip(&nonzero).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let w_minus2 = total2 - w_plus2;
    result.w_plus = w_plus2 as f64 / 2.0;
    result.w_minus = w_minus2 as f64 / 2.0;
    result.w_statistic = result.w_plus.min(result.w_minus);

    let p = if n_eff <= cfg.exact_max_n {
        let counts = null_counts(&ranks2);
        let all = (1u64 << n_eff) as f64;
        let at_most = |s: u64| counts[..=s as usize].iter().sum::<u64>() as f64 / all;
        let at_least = |s: u64| counts[s as usize..].iter().sum::<u64>() as f64 / all;
        match cfg.alternative {
            Alternative::TwoSided => 2.0 * at_most(w_plus2.min(w_minus2)),
            Alternative::Greater => at_least(w_plus2),
            Alternative::Less => at_most(w_plus2),
        }
    } else {
        result.method = PMethod::NormalApprox;
        let n = n_eff as f64;
        let mean = n * (n + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
        let sd = var.sqrt();
        let cc = if cfg.continuity_correction { 0.5 } else { 0.0 };
        let d = result.w_plus - mean;
        match cfg.alternative {
            Alternative::TwoSided => 2.0 * normal_sf((d.abs() - cc).max(0.0) / sd),
            Alternative::Greater => normal_sf((d - cc) / sd),
            Alternative::Less => normal_sf(-(d + cc) / sd),
        }
    };
    result.p_value = p.clamp(f64::MIN_POSITIVE, 1.0);
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StarThresholds {
    /// `*` below this p-value.
    pub significant: f64,
    /// `**` below this p-value.
    pub highly_significant: f64,
}

impl Default for StarThresholds {
    fn default() -> Self {
        StarThresholds {
            significant: 0.05,
            highly_significant: 0.001,
        }
    }
}

impl StarThresholds {
    pub fn star(&self, p: f64) -> &'static str {
        if p < self.highly_significant {
            "**"
        } else if p < self.significant {
            "*"
        } else {
            ""
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            runs: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub buckets: BTreeMap<Bucket, MeanStd>,
}

/// Mean and population std per bucket across runs. Every run must cover the
/// same buckets.
pub fn summarize_runs(run_aggregates: &[BTreeMap<Bucket, f64>]) -> Result<RunSummary> {
    let first = run_aggregates
        .first()
        .ok_or_else(|| Error::Contract("summarize_runs needs at least one run".into()))?;
    let keys: BTreeSet<&Bucket> = first.keys().collect();
    for (i, run) in run_aggregates.iter().enumerate().skip(1) {
        let other: BTreeSet<&Bucket> = run.keys().collect();
        if other != keys {
            let diff: Vec<String> = keys.symmetric_difference(&other).map(|b| b.to_string()).collect();
            return Err(Error::Contract(format!(
                "run {i} bucket set differs from run 0: {}",
                diff.join(", ")
            )));
        }
    }
    let buckets = keys
        .into_iter()
        .map(|b| {
            let values: Vec<f64> = run_aggregates.iter().map(|r| r[b]).collect();
            (*b, MeanStd::of(&values).expect("at least one run"))
        })
        .collect();
    Ok(RunSummary { buckets })
}

/// How repeated runs are turned into paired observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Run i of A is paired with run i of B, question by question, and all
    /// runs' pairs are pooled into one sample.
    #[default]
    PairedRuns,
    /// Each question's score is averaged across runs first, one pair per question.
    QuestionMeans,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub wilcoxon: WilcoxonConfig,
    pub stars: StarThresholds,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub bucket: Bucket,
    pub a: MeanStd,
    pub b: MeanStd,
    pub wilcoxon: WilcoxonResult,
    pub star: String,
    /// Side with the strictly higher mean.
    pub winner: Option<Side>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub rows: Vec<ComparisonRow>,
    pub config: CompareConfig,
}

type ScoreTable = Vec<HashMap<String, f64>>;

fn id_set(run: &RunScores) -> BTreeSet<&str> {
    run.scores
        .iter()
        .map(|s| s.qa_id.as_str())
        .chain(run.excluded.iter().map(String::as_str))
        .collect()
}

fn check_runs<'a>(label: &str, runs: &'a [RunScores]) -> Result<BTreeSet<&'a str>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Contract(format!("system {label} has no runs")))?;
    let ids = id_set(first);
    for r in &runs[1..] {
        let other = id_set(r);
        if other != ids {
            return Err(Error::QaSetMismatch(
                ids.symmetric_difference(&other).map(|s| s.to_string()).collect(),
            ));
        }
    }
    Ok(ids)
}

/// Per-bucket comparison of systems A and B, each given as one or more runs
/// over the same question set.
pub fn compare_systems(a_runs: &[RunScores], b_runs: &[RunScores], cfg: &CompareConfig) -> Result<ComparisonResult> {
    let a_ids = check_runs("A", a_runs)?;
    let b_ids = check_runs("B", b_runs)?;
    if a_ids != b_ids {
        return Err(Error::QaSetMismatch(
            a_ids.symmetric_difference(&b_ids).map(|s| s.to_string()).collect(),
        ));
    }
    if cfg.pooling == Pooling::PairedRuns && a_runs.len() != b_runs.len() {
        return Err(Error::Contract(format!(
            "paired-run pooling needs equal run counts, got {} and {}",
            a_runs.len(),
            b_runs.len()
        )));
    }

    // Question metadata from A's first run; questions excluded anywhere are dropped.
    let excluded: BTreeSet<&str> = a_runs
        .iter()
        .chain(b_runs)
        .flat_map(|r| r.excluded.iter().map(String::as_str))
        .collect();
    let mut questions: Vec<(&str, crate::metrics::QuestionScore)> = a_runs[0]
        .scores
        .iter()
        .filter(|s| !excluded.contains(s.qa_id.as_str()))
        .map(|s| (s.qa_id.as_str(), s.clone()))
        .collect();
    questions.sort_by(|x, y| x.0.cmp(y.0));

    let table = |runs: &[RunScores]| -> ScoreTable {
        runs.iter()
            .map(|r| r.scores.iter().map(|s| (s.qa_id.clone(), s.value)).collect())
            .collect()
    };
    let a_table = table(a_runs);
    let b_table = table(b_runs);

    let mut buckets: BTreeSet<Bucket> = BTreeSet::new();
    for (_, q) in &questions {
        buckets.insert(q.bucket());
        buckets.insert(Bucket::average(q.openness));
    }

    let mut rows = Vec::with_capacity(buckets.len());
    for bucket in buckets {
        let members: Vec<&str> = questions
            .iter()
            .filter(|(_, q)| bucket.contains(q))
            .map(|(id, _)| *id)
            .collect();
        let run_means = |t: &ScoreTable| -> Vec<f64> {
            t.iter()
                .map(|run| members.iter().map(|id| run[*id]).sum::<f64>() / members.len() as f64)
                .collect()
        };
        let a = MeanStd::of(&run_means(&a_table)).expect("runs checked non-empty");
        let b = MeanStd::of(&run_means(&b_table)).expect("runs checked non-empty");

        let (mut ids, mut av, mut bv) = (Vec::new(), Vec::new(), Vec::new());
        match cfg.pooling {
            Pooling::PairedRuns => {
                for (i, (ra, rb)) in a_table.iter().zip(&b_table).enumerate() {
                    for id in &members {
                        ids.push(format!("{i}/{id}"));
                        av.push(ra[*id]);
                        bv.push(rb[*id]);
                    }
                }
            }
            Pooling::QuestionMeans => {
                let mean_of = |t: &ScoreTable, id: &str| t.iter().map(|r| r[id]).sum::<f64>() / t.len() as f64;
                for id in &members {
                    ids.push(id.to_string());
                    av.push(mean_of(&a_table, id));
                    bv.push(mean_of(&b_table, id));
                }
            }
        }
        let wilcoxon = wilcoxon_signed_rank(&PairedSample::new(ids, av, bv)?, &cfg.wilcoxon)?;
        let star = cfg.stars.star(wilcoxon.p_value).to_string();
        let winner = if b.mean > a.mean {
            Some(Side::B)
        } else if a.mean > b.mean {
            Some(Side::A)
        } else {
            None
        };
        rows.push(ComparisonRow {
            bucket,
            a,
            b,
            wilcoxon,
            star,
            winner,
        });
    }
    Ok(ComparisonResult { rows, config: *cfg })
}
