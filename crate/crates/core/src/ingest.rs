//! Parsers for the three source artifacts, and writers that emit the same
//! formats back.
//!
//! Tables are delimiter-separated with user-bound columns ([`SchemaConfig`]).
//! Expert predictions are one JSON object per line.
//!
//! All parsers are streaming: the `*_iter` variants yield one record at a time
//! and keep only the current row in memory.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    classify_openness, DiseaseProbs, ExpertPrediction, ImageRecord, QaCategory, QaRecord,
};
use crate::error::{Error, Result};

/// A column is bound either by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl From<&str> for Column {
    fn from(s: &str) -> Self {
        Column::Name(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageColumns {
    pub image_id: Column,
    pub patient_id: Column,
    pub study_id: Column,
    pub image_path: Column,
}

impl Default for ImageColumns {
    fn default() -> Self {
        ImageColumns {
            image_id: "image_id".into(),
            patient_id: "patient_id".into(),
            study_id: "study_id".into(),
            image_path: "image_path".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaColumns {
    /// When unbound, qa ids are synthesized from the zero-based data-row
    /// ordinal. An empty name (`qa_id = ""`) unbinds it.
    #[serde(with = "optional_column")]
    pub qa_id: Option<Column>,
    pub image_id: Column,
    pub patient_id: Column,
    pub question: Column,
    pub answer: Column,
    pub category: Column,
}

mod optional_column {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Column;

    pub fn serialize<S: Serializer>(c: &Option<Column>, s: S) -> Result<S::Ok, S::Error> {
        match c {
            Some(c) => c.serialize(s),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Column>, D::Error> {
        Ok(match Column::deserialize(d)? {
            Column::Name(n) if n.is_empty() => None,
            c => Some(c),
        })
    }
}

impl Default for QaColumns {
    fn default() -> Self {
        QaColumns {
            qa_id: Some("qa_id".into()),
            image_id: "image_id".into(),
            patient_id: "patient_id".into(),
            question: "question".into(),
            answer: "answer".into(),
            category: "category".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub delimiter: char,
    pub has_header: bool,
    pub images: ImageColumns,
    pub qas: QaColumns,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            delimiter: ',',
            has_header: true,
            images: ImageColumns::default(),
            qas: QaColumns::default(),
        }
    }
}

impl SchemaConfig {
    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(|b| b.is_ascii())
            .ok_or_else(|| Error::Config(format!("delimiter must be ASCII, got {:?}", self.delimiter)))
    }
}

/// Read-buffer capacity for table parsing.
const TABLE_BUFFER: usize = 64 * 1024;

struct Table<R: Read> {
    reader: csv::Reader<R>,
    record: csv::StringRecord,
}

impl<R: Read> Table<R> {
    fn open(stream: R, cfg: &SchemaConfig, buffer: usize) -> Result<(Self, Option<csv::StringRecord>)> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(cfg.delimiter_byte()?)
            .has_headers(cfg.has_header)
            .flexible(false)
            .buffer_capacity(buffer)
            .from_reader(stream);
        let header = if cfg.has_header {
            Some(reader.headers().map_err(csv_error)?.clone())
        } else {
            None
        };
        Ok((
            Table {
                reader,
                record: csv::StringRecord::new(),
            },
            header,
        ))
    }

    /// Advances to the next row; returns its 1-based line number.
    fn next_row(&mut self) -> Option<Result<u64>> {
        match self.reader.read_record(&mut self.record) {
            Ok(true) => {
                let line = self.record.position().map(|p| p.line()).unwrap_or(0);
                Some(Ok(line))
            }
            Ok(false) => None,
            Err(e) => Some(Err(csv_error(e))),
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("malformed row: expected {expected_len} fields, found {len}"),
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".to_string(),
        csv::ErrorKind::Io(err) => format!("read error: {err}"),
        _ => e.to_string(),
    };
    Error::parse(line, message)
}

fn resolve(col: &Column, header: Option<&csv::StringRecord>, field: &str) -> Result<usize> {
    match (col, header) {
        (Column::Index(i), _) => Ok(*i),
        (Column::Name(name), Some(h)) => h
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::Config(format!("column {name:?} (for {field}) not found in header"))),
        (Column::Name(name), None) => Err(Error::Config(format!(
            "column {name:?} (for {field}) is bound by name but the table has no header"
        ))),
    }
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'r str> {
    let v = record
        .get(idx)
        .ok_or_else(|| Error::parse(line, format!("missing column for {name}")))?
        .trim();
    if v.is_empty() {
        return Err(Error::parse(line, format!("missing required field {name}")));
    }
    Ok(v)
}

/// Streaming image-metadata parser.
pub struct ImageRows<R: Read> {
    table: Table<R>,
    idx: [usize; 4],
}

impl<R: Read> Iterator for ImageRows<R> {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.table.next_row()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let rec = &self.table.record;
        let row = (|| {
            let image_id = field(rec, self.idx[0], "image_id", line)?;
            let patient_id = field(rec, self.idx[1], "patient_id", line)?;
            let study_id = field(rec, self.idx[2], "study_id", line)?;
            let image_path = field(rec, self.idx[3], "image_path", line)?;
            Ok(ImageRecord {
                image_id: image_id.to_string(),
                patient_id: patient_id.to_string(),
                study_id: study_id.to_string(),
                image_path: image_path.to_string(),
            })
        })();
        Some(row)
    }
}

pub fn image_rows<R: Read>(stream: R, cfg: &SchemaConfig) -> Result<ImageRows<R>> {
    image_rows_with_buffer(stream, cfg, TABLE_BUFFER)
}

pub fn image_rows_with_buffer<R: Read>(stream: R, cfg: &SchemaConfig, buffer: usize) -> Result<ImageRows<R>> {
    let (table, header) = Table::open(stream, cfg, buffer)?;
    let c = &cfg.images;
    let h = header.as_ref();
    let idx = [
        resolve(&c.image_id, h, "image_id")?,
        resolve(&c.patient_id, h, "patient_id")?,
        resolve(&c.study_id, h, "study_id")?,
        resolve(&c.image_path, h, "image_path")?,
    ];
    Ok(ImageRows { table, idx })
}

pub fn parse_image_metadata<R: Read>(stream: R, cfg: &SchemaConfig) -> Result<Vec<ImageRecord>> {
    image_rows(stream, cfg)?.collect()
}

/// Streaming QA-table parser.
pub struct QaRows<R: Read> {
    table: Table<R>,
    qa_id: Option<usize>,
    idx: [usize; 5],
    ordinal: u64,
}

impl<R: Read> Iterator for QaRows<R> {
    type Item = Result<QaRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.table.next_row()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let ordinal = self.ordinal;
        self.ordinal += 1;
        let rec = &self.table.record;
        let row = (|| {
            let qa_id = match self.qa_id {
                Some(i) => field(rec, i, "qa_id", line)?.to_string(),
                None => ordinal.to_string(),
            };
            let image_id = field(rec, self.idx[0], "image_id", line)?;
            let patient_id = field(rec, self.idx[1], "patient_id", line)?;
            let question = field(rec, self.idx[2], "question", line)?;
            let answer = field(rec, self.idx[3], "answer", line)?;
            let category: QaCategory = field(rec, self.idx[4], "category", line)?
                .parse()
                .map_err(|e: Error| Error::parse(line, strip_prefix(e)))?;
            let openness = classify_openness(answer).map_err(|e| Error::parse(line, strip_prefix(e)))?;
            Ok(QaRecord {
                qa_id,
                image_id: image_id.to_string(),
                patient_id: patient_id.to_string(),
                question: question.to_string(),
                answer: answer.to_string(),
                category,
                openness,
            })
        })();
        Some(row)
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::InvalidRecord(m) => m,
        other => other.to_string(),
    }
}

pub fn qa_rows<R: Read>(stream: R, cfg: &SchemaConfig) -> Result<QaRows<R>> {
    let (table, header) = Table::open(stream, cfg, TABLE_BUFFER)?;
    let c = &cfg.qas;
    let h = header.as_ref();
    let qa_id = c.qa_id.as_ref().map(|col| resolve(col, h, "qa_id")).transpose()?;
    let idx = [
        resolve(&c.image_id, h, "image_id")?,
        resolve(&c.patient_id, h, "patient_id")?,
        resolve(&c.question, h, "question")?,
        resolve(&c.answer, h, "answer")?,
        resolve(&c.category, h, "category")?,
    ];
    Ok(QaRows {
        table,
        qa_id,
        idx,
        ordinal: 0,
    })
}

pub fn parse_qa_table<R: Read>(stream: R, cfg: &SchemaConfig) -> Result<Vec<QaRecord>> {
    qa_rows(stream, cfg)?.collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpert {
    image_id: String,
    disease_probs: HashMap<String, serde_json::Value>,
    age_years: f64,
    race: String,
    view: String,
}

fn expert_from_raw(raw: RawExpert) -> Result<ExpertPrediction> {
    let mut probs = Vec::with_capacity(raw.disease_probs.len());
    for (k, v) in &raw.disease_probs {
        let p = v
            .as_f64()
            .ok_or_else(|| Error::InvalidRecord(format!("probability for {k} is not a number")))?;
        probs.push((k.as_str(), p));
    }
    // Sort so that error messages do not depend on hash order.
    probs.sort_by(|a, b| a.0.cmp(b.0));
    let disease_probs = DiseaseProbs::from_map(probs)?;
    ExpertPrediction::new(
        raw.image_id,
        disease_probs,
        raw.age_years,
        raw.race.parse()?,
        raw.view.parse()?,
    )
}

/// Streaming expert-prediction parser; blank lines are skipped.
pub struct ExpertLines<R: BufRead> {
    lines: std::io::Lines<R>,
    line: u64,
}

impl<R: BufRead> Iterator for ExpertLines<R> {
    type Item = Result<ExpertPrediction>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::parse(self.line + 1, format!("read error: {e}")))),
            };
            self.line += 1;
            let text = if self.line == 1 {
                text.trim_start_matches('\u{feff}').to_string()
            } else {
                text
            };
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let parsed = serde_json::from_str::<RawExpert>(&text)
                .map_err(|e| Error::parse(line, e.to_string()))
                .and_then(|raw| expert_from_raw(raw).map_err(|e| Error::parse(line, strip_prefix(e))));
            return Some(parsed);
        }
    }
}

pub fn expert_lines<R: Read>(stream: R) -> ExpertLines<BufReader<R>> {
    ExpertLines {
        lines: BufReader::new(stream).lines(),
        line: 0,
    }
}

pub fn parse_expert_predictions<R: Read>(stream: R) -> Result<Vec<ExpertPrediction>> {
    expert_lines(stream).collect()
}

fn csv_writer<W: Write>(out: W, cfg: &SchemaConfig) -> Result<csv::Writer<W>> {
    Ok(csv::WriterBuilder::new()
        .delimiter(cfg.delimiter_byte()?)
        .from_writer(out))
}

fn write_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes images using the default column names (header always emitted).
pub fn write_image_metadata<W: Write>(out: W, images: &[ImageRecord], cfg: &SchemaConfig) -> Result<()> {
    let mut w = csv_writer(out, cfg)?;
    w.write_record(["image_id", "patient_id", "study_id", "image_path"])
        .map_err(write_err)?;
    for i in images {
        w.write_record([&i.image_id, &i.patient_id, &i.study_id, &i.image_path])
            .map_err(write_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes QAs using the default column names (header always emitted).
pub fn write_qa_table<W: Write>(out: W, qas: &[QaRecord], cfg: &SchemaConfig) -> Result<()> {
    let mut w = csv_writer(out, cfg)?;
    w.write_record(["qa_id", "image_id", "patient_id", "question", "answer", "category"])
        .map_err(write_err)?;
    for q in qas {
        w.write_record([
            q.qa_id.as_str(),
            &q.image_id,
            &q.patient_id,
            &q.question,
            &q.answer,
            q.category.as_str(),
        ])
        .map_err(write_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_expert_predictions<W: Write>(out: W, preds: &[ExpertPrediction]) -> Result<()> {
    write_jsonl(out, preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Condition, Openness, Race, View};

    fn cfg() -> SchemaConfig {
        SchemaConfig::default()
    }

    fn expert_line(skip: Option<&str>, race: &str) -> String {
        let probs: Vec<String> = Condition::ALL
            .iter()
            .filter(|c| Some(c.id()) != skip)
            .map(|c| format!("\"{}\":0.0", c.id()))
            .collect();
        format!(
            r#"{{"image_id":"img1","disease_probs":{{{}}},"age_years":50,"race":"{race}","view":"Frontal"}}"#,
            probs.join(",")
        )
    }

    #[test]
    fn images_in_order() {
        let data = "image_id,patient_id,study_id,image_path\n img1 ,p1,s1,a.jpg\nimg2,p2,s2,b.jpg\n";
        let imgs = parse_image_metadata(data.as_bytes(), &cfg()).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].image_id, "img1");
        assert_eq!(imgs[1].patient_id, "p2");
    }

    #[test]
    fn image_missing_field_names_line() {
        let data = "image_id,patient_id,study_id,image_path\nimg1,,s1,a.jpg\n";
        let err = parse_image_metadata(data.as_bytes(), &cfg()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("patient_id"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_structure() {
        let data = "image_id,patient_id,study_id,image_path\nimg1,p1,s1,a.jpg\nimg2,p2\n";
        let err = parse_image_metadata(data.as_bytes(), &cfg()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn bom_is_skipped() {
        let data = "\u{feff}image_id,patient_id,study_id,image_path\nimg1,p1,s1,a.jpg\n";
        let imgs = parse_image_metadata(data.as_bytes(), &cfg()).unwrap();
        assert_eq!(imgs[0].image_id, "img1");
    }

    #[test]
    fn headerless_positional_binding() {
        let cfg = SchemaConfig {
            delimiter: '\t',
            has_header: false,
            images: ImageColumns {
                image_id: Column::Index(2),
                patient_id: Column::Index(0),
                study_id: Column::Index(1),
                image_path: Column::Index(3),
            },
            ..SchemaConfig::default()
        };
        let imgs = parse_image_metadata("p1\ts1\timg1\tx.jpg\n".as_bytes(), &cfg).unwrap();
        assert_eq!(imgs[0].image_id, "img1");
        assert_eq!(imgs[0].patient_id, "p1");
    }

    #[test]
    fn unknown_header_column() {
        let mut c = cfg();
        c.images.image_id = "dicom_id".into();
        let err = parse_image_metadata("image_id,patient_id,study_id,image_path\n".as_bytes(), &c).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn qa_rows_and_quoting() {
        let data = "qa_id,image_id,patient_id,question,answer,category\n\
                    q1,img1,p1,is there effusion,yes,presence\n\
                    q2,img1,p1,where is it,\"left, lower \"\"lobe\"\"\",location\n\
                    q3,img1,p1,what changed,nothing,difference\n";
        let qas = parse_qa_table(data.as_bytes(), &cfg()).unwrap();
        assert_eq!(qas[0].openness, Openness::Closed);
        assert_eq!(qas[0].category, QaCategory::Presence);
        assert_eq!(qas[1].answer, "left, lower \"lobe\"");
        assert_eq!(qas[1].openness, Openness::Open);
        assert_eq!(qas[2].category, QaCategory::Difference);
    }

    #[test]
    fn qa_id_synthesized_when_unbound() {
        let mut c = cfg();
        c.qas.qa_id = None;
        let data = "image_id,patient_id,question,answer,category\nimg1,p1,q,yes,view\nimg1,p1,q2,no,view\n";
        let qas = parse_qa_table(data.as_bytes(), &c).unwrap();
        assert_eq!(qas[0].qa_id, "0");
        assert_eq!(qas[1].qa_id, "1");
    }

    #[test]
    fn qa_unknown_category_and_empty_answer() {
        let data = "qa_id,image_id,patient_id,question,answer,category\nq1,img1,p1,how bad,mild,severity\n";
        let err = parse_qa_table(data.as_bytes(), &cfg()).unwrap_err();
        assert!(err.to_string().contains("unknown category: severity"), "{err}");
        let data = "qa_id,image_id,patient_id,question,answer,category\nq1,img1,p1,how bad,,level\n";
        assert!(matches!(
            parse_qa_table(data.as_bytes(), &cfg()).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn expert_valid_degenerate() {
        let preds = parse_expert_predictions(expert_line(None, "White").as_bytes()).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].race, Race::White);
        assert_eq!(preds[0].view, View::Frontal);
        assert_eq!(preds[0].age_years, 50.0);
        assert!(preds[0].disease_probs.iter().all(|(_, p)| p == 0.0));
    }

    #[test]
    fn expert_missing_condition() {
        let err = parse_expert_predictions(expert_line(Some("hernia"), "White").as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "line 1: missing condition: hernia");
    }

    #[test]
    fn expert_label_and_range_errors() {
        let err = parse_expert_predictions(expert_line(None, "Hispanic").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("unknown race label: Hispanic"), "{err}");
        let bad = expert_line(None, "Asian").replace("\"mass\":0.0", "\"mass\":1.2");
        let err = parse_expert_predictions(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn expert_blank_lines_and_line_numbers() {
        let text = format!("{}\n\n{}\n", expert_line(None, "Asian"), expert_line(None, "Martian"));
        let err = parse_expert_predictions(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn age_kept_unrounded() {
        let line = expert_line(None, "Black").replace("\"age_years\":50", "\"age_years\":63.7");
        let p = parse_expert_predictions(line.as_bytes()).unwrap();
        assert_eq!(p[0].age_years, 63.7);
    }
}
