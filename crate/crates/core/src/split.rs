//! Train / test / extended-test partitions, category filters, and dataset
//! statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ImageRecord, Openness, QaCategory, QaRecord};
use crate::error::{Error, Result};

pub fn filter_categories(qas: &[QaRecord], drop: &BTreeSet<QaCategory>) -> Vec<QaRecord> {
    qas.iter().filter(|q| !drop.contains(&q.category)).cloned().collect()
}

/// How test patients are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TestPatients {
    Explicit { ids: BTreeSet<String> },
    /// Shuffle the sorted distinct patient ids with a seeded ChaCha8 generator
    /// and take `round(fraction * n)` of them.
    Sample { fraction: f64, seed: u64 },
}

impl Default for TestPatients {
    fn default() -> Self {
        TestPatients::Explicit { ids: BTreeSet::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub drop_categories: BTreeSet<QaCategory>,
    pub test_patients: TestPatients,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            drop_categories: BTreeSet::from([QaCategory::Difference]),
            test_patients: TestPatients::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
    ExtendedTest,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "test" => Ok(Partition::Test),
            "extended_test" | "extended-test" => Ok(Partition::ExtendedTest),
            other => Err(Error::Config(format!("unknown partition: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_image_ids: BTreeSet<String>,
    pub test_image_ids: BTreeSet<String>,
    pub extended_test_image_ids: BTreeSet<String>,
    pub test_patient_ids: BTreeSet<String>,
    pub config: SplitConfig,
    /// SHA-256 over the sorted image table and the config.
    pub fingerprint: String,
}

impl SplitManifest {
    pub fn ids(&self, partition: Partition) -> &BTreeSet<String> {
        match partition {
            Partition::Train => &self.train_image_ids,
            Partition::Test => &self.test_image_ids,
            Partition::ExtendedTest => &self.extended_test_image_ids,
        }
    }

    /// Checks the partition invariants against the image table.
    pub fn check(&self, images: &[ImageRecord]) -> Result<()> {
        if let Some(id) = self.train_image_ids.intersection(&self.extended_test_image_ids).next() {
            return Err(Error::Contract(format!("image {id} is in both train and extended test")));
        }
        if let Some(id) = self.test_image_ids.difference(&self.extended_test_image_ids).next() {
            return Err(Error::Contract(format!("test image {id} missing from extended test")));
        }
        let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
        for img in images {
            if self.test_image_ids.contains(&img.image_id) {
                *per_patient.entry(img.patient_id.as_str()).or_default() += 1;
            }
        }
        if let Some((p, n)) = per_patient.iter().find(|(_, n)| **n > 1) {
            return Err(Error::Contract(format!("patient {p} has {n} test images")));
        }
        Ok(())
    }
}

pub fn sample_patients(images: &[ImageRecord], fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("test fraction must lie in [0,1], got {fraction}")));
    }
    let patients: BTreeSet<&str> = images.iter().map(|i| i.patient_id.as_str()).collect();
    let mut patients: Vec<&str> = patients.into_iter().collect();
    let k = (fraction * patients.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    Ok(patients.into_iter().take(k).map(str::to_string).collect())
}

fn fingerprint(images: &[ImageRecord], config: &SplitConfig) -> String {
    let mut rows: Vec<(&str, &str, &str)> = images
        .iter()
        .map(|i| (i.image_id.as_str(), i.patient_id.as_str(), i.study_id.as_str()))
        .collect();
    rows.sort_unstable();
    let mut hasher = Sha256::new();
    for (image, patient, study) in rows {
        for part in [image, patient, study] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
    }
    let cfg = serde_json::to_vec(config).expect("split config serializes");
    hasher.update(&cfg);
    hex::encode(hasher.finalize())
}

/// One test image per test patient (the lexicographically smallest image id);
/// all of that patient's images go to the extended test set; everything else
/// is train.
pub fn make_test_split(images: &[ImageRecord], test_patient_ids: &BTreeSet<String>) -> Result<SplitManifest> {
    let config = SplitConfig {
        test_patients: TestPatients::Explicit {
            ids: test_patient_ids.clone(),
        },
        ..SplitConfig::default()
    };
    split_with(images, test_patient_ids, config)
}

/// Resolves the config's patient selection, then splits.
pub fn make_split(images: &[ImageRecord], config: &SplitConfig) -> Result<SplitManifest> {
    let patients = match &config.test_patients {
        TestPatients::Explicit { ids } => ids.clone(),
        TestPatients::Sample { fraction, seed } => sample_patients(images, *fraction, *seed)?,
    };
    split_with(images, &patients, config.clone())
}

fn split_with(images: &[ImageRecord], test_patients: &BTreeSet<String>, config: SplitConfig) -> Result<SplitManifest> {
    let mut first_image: BTreeMap<&str, &str> = BTreeMap::new();
    let mut train = BTreeSet::new();
    let mut extended = BTreeSet::new();
    for img in images {
        if test_patients.contains(&img.patient_id) {
            extended.insert(img.image_id.clone());
            let slot = first_image.entry(img.patient_id.as_str()).or_insert(img.image_id.as_str());
            if img.image_id.as_str() < *slot {
                *slot = img.image_id.as_str();
            }
        } else {
            train.insert(img.image_id.clone());
        }
    }
    if let Some(p) = test_patients.iter().find(|p| !first_image.contains_key(p.as_str())) {
        return Err(Error::Contract(format!("test patient {p} has no images")));
    }
    let test: BTreeSet<String> = first_image.values().map(|s| s.to_string()).collect();
    let manifest = SplitManifest {
        train_image_ids: train,
        test_image_ids: test,
        extended_test_image_ids: extended,
        test_patient_ids: test_patients.clone(),
        fingerprint: fingerprint(images, &config),
        config,
    };
    manifest.check(images)?;
    Ok(manifest)
}

pub fn select_qas(manifest: &SplitManifest, qas: &[QaRecord], partition: Partition) -> Vec<QaRecord> {
    let ids = manifest.ids(partition);
    qas.iter().filter(|q| ids.contains(&q.image_id)).cloned().collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpennessCounts {
    pub open: usize,
    pub closed: usize,
}

impl OpennessCounts {
    pub fn total(&self) -> usize {
        self.open + self.closed
    }

    pub fn get(&self, o: Openness) -> usize {
        match o {
            Openness::Open => self.open,
            Openness::Closed => self.closed,
        }
    }
}

/// Counts are exact; percentages are unrounded (rounding happens at render).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub image_count: usize,
    pub open: usize,
    pub closed: usize,
    pub counts: BTreeMap<QaCategory, OpennessCounts>,
    /// Share of all QAs, per category.
    pub category_pct: BTreeMap<QaCategory, f64>,
    /// Share of open QAs, per category.
    pub open_category_pct: BTreeMap<QaCategory, f64>,
    /// Share of closed QAs, per category.
    pub closed_category_pct: BTreeMap<QaCategory, f64>,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

pub fn summarize(qas: &[QaRecord], images: &BTreeSet<String>) -> DatasetStats {
    let mut counts: BTreeMap<QaCategory, OpennessCounts> =
        QaCategory::ALL.iter().map(|c| (*c, OpennessCounts::default())).collect();
    for qa in qas {
        let slot = counts.get_mut(&qa.category).expect("all categories seeded");
        match qa.openness {
            Openness::Open => slot.open += 1,
            Openness::Closed => slot.closed += 1,
        }
    }
    let open: usize = counts.values().map(|c| c.open).sum();
    let closed: usize = counts.values().map(|c| c.closed).sum();
    let total = open + closed;
    let category_pct = counts.iter().map(|(c, n)| (*c, pct(n.total(), total))).collect();
    let open_category_pct = counts.iter().map(|(c, n)| (*c, pct(n.open, open))).collect();
    let closed_category_pct = counts.iter().map(|(c, n)| (*c, pct(n.closed, closed))).collect();
    DatasetStats {
        total,
        image_count: images.len(),
        open,
        closed,
        counts,
        category_pct,
        open_category_pct,
        closed_category_pct,
    }
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// One-decimal percentage; exact integers print without the decimal, as in
/// the published summary tables.
fn render_pct(v: f64) -> String {
    let r = format!("{v:.1}");
    match r.strip_suffix(".0") {
        Some(i) => i.to_string(),
        None => r,
    }
}

impl DatasetStats {
    /// Categories that appear in the table: all non-difference categories,
    /// plus difference if any remain.
    fn shown_categories(&self) -> Vec<QaCategory> {
        QaCategory::ALL
            .into_iter()
            .filter(|c| *c != QaCategory::Difference || self.counts[c].total() > 0)
            .collect()
    }

    /// Summary table in the layout of a dataset-description table.
    pub fn render(&self, label: &str) -> String {
        let cats = self.shown_categories();
        let mut out = String::new();
        let _ = write!(out, "{label} ({} images) | Total", thousands(self.image_count));
        for c in &cats {
            let _ = write!(out, " | {}", c.title());
        }
        out.push('\n');
        let rows: [(&str, usize, &BTreeMap<QaCategory, f64>); 3] = [
            ("#QA Pairs", self.total, &self.category_pct),
            ("#Open", self.open, &self.open_category_pct),
            ("#Close", self.closed, &self.closed_category_pct),
        ];
        for (name, n, pcts) in rows {
            let _ = write!(out, "{name} | {}", thousands(n));
            for c in &cats {
                let _ = write!(out, " | {}", render_pct(pcts[c]));
            }
            out.push('\n');
        }
        out
    }
}
