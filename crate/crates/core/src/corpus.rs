//! Shared domain types and referential-integrity checks.
//!
//! Everything here is a plain value; parsing lives in [`crate::ingest`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub study_id: String,
    /// Opaque reference; pixels are never read.
    pub image_path: String,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        patient_id: impl Into<String>,
        study_id: impl Into<String>,
        image_path: impl Into<String>,
    ) -> Result<Self> {
        let rec = ImageRecord {
            image_id: image_id.into(),
            patient_id: patient_id.into(),
            study_id: study_id.into(),
            image_path: image_path.into(),
        };
        rec.check()?;
        Ok(rec)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("image_id", &self.image_id),
            ("patient_id", &self.patient_id),
            ("study_id", &self.study_id),
        ] {
            if v.trim().is_empty() {
                return Err(Error::InvalidRecord(format!("empty {name}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaCategory {
    Abnormality,
    Presence,
    View,
    Location,
    Level,
    Type,
    Difference,
}

impl QaCategory {
    pub const ALL: [QaCategory; 7] = [
        QaCategory::Abnormality,
        QaCategory::Presence,
        QaCategory::View,
        QaCategory::Location,
        QaCategory::Level,
        QaCategory::Type,
        QaCategory::Difference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QaCategory::Abnormality => "abnormality",
            QaCategory::Presence => "presence",
            QaCategory::View => "view",
            QaCategory::Location => "location",
            QaCategory::Level => "level",
            QaCategory::Type => "type",
            QaCategory::Difference => "difference",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            QaCategory::Abnormality => "Abnormality",
            QaCategory::Presence => "Presence",
            QaCategory::View => "View",
            QaCategory::Location => "Location",
            QaCategory::Level => "Level",
            QaCategory::Type => "Type",
            QaCategory::Difference => "Difference",
        }
    }
}

impl fmt::Display for QaCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QaCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase();
        QaCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| Error::InvalidRecord(format!("unknown category: {}", s.trim())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Openness {
    Open,
    Closed,
}

impl Openness {
    /// Table marker, `O` or `C`.
    pub fn marker(self) -> &'static str {
        match self {
            Openness::Open => "O",
            Openness::Closed => "C",
        }
    }
}

/// Lowercase, trim, then strip trailing `.`, `,`, `!`, `?` (and any
/// whitespace they uncover).
pub fn normalize_answer(answer: &str) -> String {
    answer
        .trim()
        .to_lowercase()
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | '!' | '?') || c.is_whitespace())
        .to_string()
}

/// `yes`/`no` after normalization, if the answer is binary.
pub fn binary_answer(answer: &str) -> Option<bool> {
    match normalize_answer(answer).as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub fn classify_openness(answer: &str) -> Result<Openness> {
    if answer.trim().is_empty() {
        return Err(Error::InvalidRecord("empty answer".into()));
    }
    Ok(match binary_answer(answer) {
        Some(_) => Openness::Closed,
        None => Openness::Open,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qa_id: String,
    pub image_id: String,
    pub patient_id: String,
    pub question: String,
    pub answer: String,
    pub category: QaCategory,
    pub openness: Openness,
}

impl QaRecord {
    /// Builds a record, deriving openness from the answer.
    pub fn new(
        qa_id: impl Into<String>,
        image_id: impl Into<String>,
        patient_id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
        category: QaCategory,
    ) -> Result<Self> {
        let question = question.into();
        let answer = answer.into();
        if question.trim().is_empty() {
            return Err(Error::InvalidRecord("empty question".into()));
        }
        let openness = classify_openness(&answer)?;
        let rec = QaRecord {
            qa_id: qa_id.into(),
            image_id: image_id.into(),
            patient_id: patient_id.into(),
            question,
            answer,
            category,
            openness,
        };
        rec.check()?;
        Ok(rec)
    }

    /// Re-asserts the type invariants that do not depend on the rest of the corpus.
    pub fn check(&self) -> Result<()> {
        if self.qa_id.trim().is_empty() {
            return Err(Error::InvalidRecord("empty qa_id".into()));
        }
        if self.image_id.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("qa {}: empty image_id", self.qa_id)));
        }
        if self.question.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("qa {}: empty question", self.qa_id)));
        }
        let expected = classify_openness(&self.answer)
            .map_err(|_| Error::InvalidRecord(format!("qa {}: empty answer", self.qa_id)))?;
        if expected != self.openness {
            return Err(Error::InvalidRecord(format!(
                "qa {}: openness {:?} inconsistent with answer",
                self.qa_id, self.openness
            )));
        }
        Ok(())
    }
}

macro_rules! conditions {
    ($($variant:ident => $id:literal, $label:literal;)*) => {
        /// The 18 diagnostic conditions scored by the disease expert model.
        ///
        /// Declaration order is the canonical listing order used for rendering.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum Condition {
            $($variant,)*
        }

        impl Condition {
            pub const ALL: [Condition; 18] = [$(Condition::$variant,)*];

            /// Lowercase snake-case key.
            pub fn id(self) -> &'static str {
                match self {
                    $(Condition::$variant => $id,)*
                }
            }

            /// Natural-language name, as used in rendered text.
            pub fn label(self) -> &'static str {
                match self {
                    $(Condition::$variant => $label,)*
                }
            }
        }
    };
}

conditions! {
    Cardiomegaly => "cardiomegaly", "cardiomegaly";
    Atelectasis => "atelectasis", "atelectasis";
    Pneumonia => "pneumonia", "pneumonia";
    Infiltration => "infiltration", "infiltration";
    Fracture => "fracture", "fracture";
    EnlargedCardiomediastinum => "enlarged_cardiomediastinum", "enlarged cardiomediastinum";
    LungOpacity => "lung_opacity", "lung opacity";
    Pneumothorax => "pneumothorax", "pneumothorax";
    Emphysema => "emphysema", "emphysema";
    Hernia => "hernia", "hernia";
    LungLesion => "lung_lesion", "lung lesion";
    PleuralThickening => "pleural_thickening", "pleural thickening";
    Edema => "edema", "edema";
    Effusion => "effusion", "effusion";
    Fibrosis => "fibrosis", "fibrosis";
    Nodule => "nodule", "nodule";
    Mass => "mass", "mass";
    Consolidation => "consolidation", "consolidation";
}

impl Condition {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase().replace([' ', '-'], "_");
        Condition::ALL
            .into_iter()
            .find(|c| c.id() == key)
            .ok_or_else(|| Error::InvalidRecord(format!("unknown condition: {}", s.trim())))
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// One probability per condition, always complete.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiseaseProbs([f64; 18]);

impl DiseaseProbs {
    pub fn new(probs: [f64; 18]) -> Result<Self> {
        for (c, p) in Condition::ALL.iter().zip(probs) {
            check_probability(*c, p)?;
        }
        Ok(DiseaseProbs(probs))
    }

    pub fn uniform(p: f64) -> Result<Self> {
        Self::new([p; 18])
    }

    /// Builds from a name-keyed map; every condition must appear exactly once.
    pub fn from_map<'a>(entries: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut slots: [Option<f64>; 18] = [None; 18];
        for (name, p) in entries {
            let c: Condition = name.parse()?;
            if slots[c.index()].replace(p).is_some() {
                return Err(Error::InvalidRecord(format!("duplicate condition: {}", c.id())));
            }
        }
        let mut probs = [0.0; 18];
        for c in Condition::ALL {
            probs[c.index()] = slots[c.index()]
                .ok_or_else(|| Error::InvalidRecord(format!("missing condition: {}", c.id())))?;
        }
        Self::new(probs)
    }

    pub fn get(&self, c: Condition) -> f64 {
        self.0[c.index()]
    }

    pub fn with(mut self, c: Condition, p: f64) -> Result<Self> {
        check_probability(c, p)?;
        self.0[c.index()] = p;
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Condition, f64)> + '_ {
        Condition::ALL.into_iter().map(|c| (c, self.0[c.index()]))
    }
}

fn check_probability(c: Condition, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidRecord(format!(
            "probability for {} out of range [0,1]: {p}",
            c.id()
        )));
    }
    Ok(())
}

impl Serialize for DiseaseProbs {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(18))?;
        for (c, p) in self.iter() {
            map.serialize_entry(c.id(), &p)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for DiseaseProbs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ProbsVisitor;

        impl<'de> Visitor<'de> for ProbsVisitor {
            type Value = DiseaseProbs;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of the 18 condition names to probabilities")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<DiseaseProbs, A::Error> {
                let mut entries: Vec<(String, f64)> = Vec::with_capacity(18);
                while let Some((k, v)) = access.next_entry::<String, f64>()? {
                    entries.push((k, v));
                }
                DiseaseProbs::from_map(entries.iter().map(|(k, v)| (k.as_str(), *v)))
                    .map_err(|e| match e {
                        Error::InvalidRecord(m) => de::Error::custom(m),
                        other => de::Error::custom(other),
                    })
            }
        }

        d.deserialize_map(ProbsVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Race {
    Asian,
    Black,
    White,
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Race::Asian => "Asian",
            Race::Black => "Black",
            Race::White => "White",
        })
    }
}

impl FromStr for Race {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Asian" => Ok(Race::Asian),
            "Black" => Ok(Race::Black),
            "White" => Ok(Race::White),
            other => Err(Error::InvalidRecord(format!("unknown race label: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    Frontal,
    Lateral,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Frontal => "Frontal",
            View::Lateral => "Lateral",
        })
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Frontal" => Ok(View::Frontal),
            "Lateral" => Ok(View::Lateral),
            other => Err(Error::InvalidRecord(format!("unknown view label: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPrediction {
    pub image_id: String,
    pub disease_probs: DiseaseProbs,
    pub age_years: f64,
    pub race: Race,
    pub view: View,
}

impl ExpertPrediction {
    pub fn new(
        image_id: impl Into<String>,
        disease_probs: DiseaseProbs,
        age_years: f64,
        race: Race,
        view: View,
    ) -> Result<Self> {
        let pred = ExpertPrediction {
            image_id: image_id.into(),
            disease_probs,
            age_years,
            race,
            view,
        };
        pred.check()?;
        Ok(pred)
    }

    pub fn check(&self) -> Result<()> {
        if self.image_id.trim().is_empty() {
            return Err(Error::InvalidRecord("empty image_id".into()));
        }
        if !self.age_years.is_finite() || self.age_years < 0.0 {
            return Err(Error::InvalidRecord(format!(
                "age_years must be a non-negative number, got {}",
                self.age_years
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Image,
    Qa,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DanglingRef {
    pub from: RecordKind,
    /// qa_id for QA records, image_id for expert records.
    pub record_id: String,
    pub missing_image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DuplicateId {
    pub kind: RecordKind,
    pub id: String,
    pub occurrences: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub counts: BTreeMap<RecordKind, usize>,
    pub dangling: Vec<DanglingRef>,
    pub duplicates: Vec<DuplicateId>,
}

impl CorpusReport {
    pub fn is_valid(&self) -> bool {
        self.dangling.is_empty() && self.duplicates.is_empty()
    }
}

/// Reports dangling image references and duplicated ids. Output lists are
/// sorted, so the report does not depend on input order.
pub fn validate(
    images: &[ImageRecord],
    qas: &[QaRecord],
    experts: &[ExpertPrediction],
) -> CorpusReport {
    let mut counts = BTreeMap::new();
    counts.insert(RecordKind::Image, images.len());
    counts.insert(RecordKind::Qa, qas.len());
    counts.insert(RecordKind::Expert, experts.len());

    let image_ids: HashSet<&str> = images.iter().map(|i| i.image_id.as_str()).collect();

    let mut dangling = Vec::new();
    for qa in qas {
        if !image_ids.contains(qa.image_id.as_str()) {
            dangling.push(DanglingRef {
                from: RecordKind::Qa,
                record_id: qa.qa_id.clone(),
                missing_image_id: qa.image_id.clone(),
            });
        }
    }
    for e in experts {
        if !image_ids.contains(e.image_id.as_str()) {
            dangling.push(DanglingRef {
                from: RecordKind::Expert,
                record_id: e.image_id.clone(),
                missing_image_id: e.image_id.clone(),
            });
        }
    }
    dangling.sort();

    let mut duplicates = Vec::new();
    duplicates.extend(find_duplicates(
        RecordKind::Image,
        images.iter().map(|i| i.image_id.as_str()),
    ));
    duplicates.extend(find_duplicates(RecordKind::Qa, qas.iter().map(|q| q.qa_id.as_str())));
    duplicates.extend(find_duplicates(
        RecordKind::Expert,
        experts.iter().map(|e| e.image_id.as_str()),
    ));

    CorpusReport {
        counts,
        dangling,
        duplicates,
    }
}

fn find_duplicates<'a>(kind: RecordKind, ids: impl Iterator<Item = &'a str>) -> Vec<DuplicateId> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for id in ids {
        *seen.entry(id).or_default() += 1;
    }
    seen.into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(id, occurrences)| DuplicateId {
            kind,
            id: id.to_string(),
            occurrences,
        })
        .collect()
}

/// Distinct image ids, sorted.
pub fn image_id_set(images: &[ImageRecord]) -> BTreeSet<String> {
    images.iter().map(|i| i.image_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str, patient: &str) -> ImageRecord {
        ImageRecord::new(id, patient, format!("s-{id}"), format!("{id}.jpg")).unwrap()
    }

    fn qa(id: &str, image: &str, answer: &str) -> QaRecord {
        QaRecord::new(id, image, "p1", "is there effusion", answer, QaCategory::Presence).unwrap()
    }

    #[test]
    fn openness_examples() {
        assert_eq!(classify_openness("yes").unwrap(), Openness::Closed);
        assert_eq!(classify_openness("Yes.").unwrap(), Openness::Closed);
        assert_eq!(classify_openness(" NO! ").unwrap(), Openness::Closed);
        assert_eq!(classify_openness("in the left lower lobe").unwrap(), Openness::Open);
        assert_eq!(classify_openness("yes, small").unwrap(), Openness::Open);
        assert!(matches!(classify_openness("  "), Err(Error::InvalidRecord(_))));
    }

    #[test]
    fn normalization_is_idempotent() {
        for a in ["Yes.", "No?!", "  left lobe. ", "Yes , ", "x"] {
            let once = normalize_answer(a);
            assert_eq!(normalize_answer(&once), once);
            assert_eq!(classify_openness(&once).unwrap(), classify_openness(a).unwrap());
        }
    }

    #[test]
    fn category_parsing() {
        assert_eq!("Difference".parse::<QaCategory>().unwrap(), QaCategory::Difference);
        assert_eq!(" type ".parse::<QaCategory>().unwrap(), QaCategory::Type);
        assert!("severity".parse::<QaCategory>().is_err());
    }

    #[test]
    fn conditions_canonical() {
        assert_eq!(Condition::ALL.len(), 18);
        assert_eq!(Condition::ALL[0], Condition::Cardiomegaly);
        assert_eq!(Condition::ALL[17], Condition::Consolidation);
        let ids: BTreeSet<_> = Condition::ALL.iter().map(|c| c.id()).collect();
        assert_eq!(ids.len(), 18);
        assert_eq!(
            "Enlarged Cardiomediastinum".parse::<Condition>().unwrap(),
            Condition::EnlargedCardiomediastinum
        );
    }

    #[test]
    fn probs_missing_and_range() {
        let entries: Vec<(&str, f64)> = Condition::ALL
            .iter()
            .filter(|c| **c != Condition::Hernia)
            .map(|c| (c.id(), 0.0))
            .collect();
        let err = DiseaseProbs::from_map(entries).unwrap_err();
        assert_eq!(err.to_string(), "invalid record: missing condition: hernia");
        assert!(DiseaseProbs::uniform(1.5).is_err());
        assert!(DiseaseProbs::uniform(0.0).unwrap().with(Condition::Mass, -0.1).is_err());
    }

    #[test]
    fn race_and_view_closed_sets() {
        assert!("Hispanic".parse::<Race>().is_err());
        assert_eq!("Black".parse::<Race>().unwrap(), Race::Black);
        assert!("AP".parse::<View>().is_err());
    }

    #[test]
    fn validate_consistent() {
        let images = vec![img("i1", "p1"), img("i2", "p1"), img("i3", "p2")];
        let qas = vec![qa("q1", "i1", "yes"), qa("q2", "i3", "no")];
        let report = validate(&images, &qas, &[]);
        assert!(report.is_valid());
        assert_eq!(report.counts[&RecordKind::Qa], 2);
    }

    #[test]
    fn validate_dangling_and_duplicates() {
        let images = vec![img("i1", "p1"), img("i1", "p2")];
        let qas = vec![qa("q1", "imgX", "yes")];
        let probs = DiseaseProbs::uniform(0.1).unwrap();
        let experts = vec![ExpertPrediction::new("i9", probs, 40.0, Race::Asian, View::Frontal).unwrap()];
        let report = validate(&images, &qas, &experts);
        assert_eq!(report.dangling.len(), 2);
        assert!(report.dangling.iter().any(|d| d.missing_image_id == "imgX"));
        assert_eq!(
            report.duplicates,
            vec![DuplicateId {
                kind: RecordKind::Image,
                id: "i1".into(),
                occurrences: 2
            }]
        );
    }

    #[test]
    fn validate_order_insensitive() {
        let mut images = vec![img("i1", "p1"), img("i2", "p1"), img("i2", "p3")];
        let mut qas = vec![qa("q1", "x", "yes"), qa("q2", "i1", "no"), qa("q1", "y", "no")];
        let a = validate(&images, &qas, &[]);
        images.reverse();
        qas.rotate_left(1);
        let b = validate(&images, &qas, &[]);
        assert_eq!(a, b);
    }

    #[test]
    fn qa_record_rejects_inconsistent_openness() {
        let mut r = qa("q1", "i1", "yes");
        r.openness = Openness::Open;
        assert!(r.check().is_err());
        assert!(QaRecord::new("q", "i", "p", "", "yes", QaCategory::View).is_err());
    }
}
