//! TOML run configuration shared by every subcommand.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{OracleSpec, RetryPolicy};
use crate::corpus::QaCategory;
use crate::enrich::{EnrichOptions, Variant};
use crate::error::{Error, Result};
use crate::ingest::SchemaConfig;
use crate::metrics::MetricConfig;
use crate::split::{Partition, SplitConfig, TestPatients};
use crate::stats::{CompareConfig, Pooling, StarThresholds, WilcoxonConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub images: Option<PathBuf>,
    pub qas: Option<PathBuf>,
    pub experts: Option<PathBuf>,
    /// Long-format `condition,score,label` table for the AUC report.
    pub auc: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub drop_categories: BTreeSet<QaCategory>,
    pub test_patients: Option<BTreeSet<String>>,
    /// Fraction of patients sampled into the test set with the run seed.
    pub test_fraction: Option<f64>,
    /// Previously written manifest to reuse instead of recomputing.
    pub manifest: Option<PathBuf>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            drop_categories: SplitConfig::default().drop_categories,
            test_patients: None,
            test_fraction: None,
            manifest: None,
        }
    }
}

impl SplitSection {
    pub fn to_split_config(&self, seed: u64) -> Result<SplitConfig> {
        let test_patients = match (&self.test_patients, self.test_fraction) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "split.test_patients and split.test_fraction are mutually exclusive".into(),
                ))
            }
            (Some(ids), None) => TestPatients::Explicit { ids: ids.clone() },
            (None, Some(fraction)) => TestPatients::Sample { fraction, seed },
            (None, None) => TestPatients::default(),
        };
        Ok(SplitConfig {
            drop_categories: self.drop_categories.clone(),
            test_patients,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub variants: Vec<Variant>,
    pub partition: Partition,
}

impl Default for BuildSection {
    fn default() -> Self {
        BuildSection {
            variants: vec![Variant::Basic, Variant::Enhanced],
            partition: Partition::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub system: String,
    pub runs: usize,
    pub variant: Variant,
    pub partition: Partition,
    pub oracle: Option<OracleSpec>,
    /// `http(s)://...` for an HTTP endpoint or `file:<dir>` for a file exchange.
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub shard_size: usize,
    pub parallel: usize,
    pub retry: RetryPolicy,
    pub metric: MetricConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            system: "system".into(),
            runs: 3,
            variant: Variant::Basic,
            partition: Partition::Test,
            oracle: None,
            endpoint: None,
            timeout_secs: 600,
            shard_size: 256,
            parallel: 1,
            retry: RetryPolicy::default(),
            metric: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Score directories written by `eval`.
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub pooling: Pooling,
    pub stars: StarThresholds,
    pub wilcoxon: WilcoxonConfig,
}

impl CompareSection {
    pub fn settings(&self) -> CompareConfig {
        CompareConfig {
            wilcoxon: self.wilcoxon,
            stars: self.stars,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub inputs: Inputs,
    pub schema: SchemaConfig,
    pub enrich: EnrichOptions,
    pub split: SplitSection,
    pub build: BuildSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            inputs: Inputs::default(),
            schema: SchemaConfig::default(),
            enrich: EnrichOptions::default(),
            split: SplitSection::default(),
            build: BuildSection::default(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let cfg = RunConfig::from_toml(
            r#"
seed = 7
out = "runs"

[inputs]
images = "images.csv"
qas = "qa.csv"

[split]
test_fraction = 0.2

[eval]
system = "enhanced"
runs = 2
variant = "enhanced"
oracle = { kind = "expert_threshold", threshold = 0.4 }

[compare]
pooling = "question_means"
"#,
        )
        .unwrap();
        assert_eq!(cfg.eval.runs, 2);
        assert_eq!(cfg.eval.variant, Variant::Enhanced);
        assert_eq!(cfg.compare.pooling, Pooling::QuestionMeans);
        let split = cfg.split.to_split_config(cfg.seed).unwrap();
        assert_eq!(split.test_patients, TestPatients::Sample { fraction: 0.2, seed: 7 });
        assert!(split.drop_categories.contains(&QaCategory::Difference));
    }

    #[test]
    fn rejects_unknown_keys_and_conflicts() {
        assert!(matches!(RunConfig::from_toml("sede = 1"), Err(Error::Config(_))));
        let cfg = RunConfig::from_toml("[split]\ntest_fraction = 0.1\ntest_patients = [\"p1\"]").unwrap();
        assert!(cfg.split.to_split_config(0).is_err());
    }

    #[test]
    fn partial_column_bindings_keep_defaults() {
        use crate::ingest::Column;
        let cfg = RunConfig::from_toml("[schema.qas]\nquestion = 3\n[schema.images]\nimage_id = \"dicom_id\"").unwrap();
        assert_eq!(cfg.schema.qas.question, Column::Index(3));
        assert_eq!(cfg.schema.qas.qa_id, Some(Column::Name("qa_id".into())));
        assert_eq!(cfg.schema.images.image_id, Column::Name("dicom_id".into()));
        assert_eq!(cfg.schema.images.patient_id, Column::Name("patient_id".into()));
        let unbound = RunConfig::from_toml("[schema.qas]\nqa_id = \"\"").unwrap();
        assert_eq!(unbound.schema.qas.qa_id, None);
        let json = serde_json::to_string(&unbound.schema).unwrap();
        assert_eq!(serde_json::from_str::<crate::ingest::SchemaConfig>(&json).unwrap(), unbound.schema);
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
