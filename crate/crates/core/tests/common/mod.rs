#![allow(dead_code)]

use std::fs::File;
use std::path::Path;

use cxr_instruct::config::RunConfig;
use cxr_instruct::corpus::{Condition, DiseaseProbs, ExpertPrediction, ImageRecord, QaCategory, QaRecord, Race, View};
use cxr_instruct::ingest;
use cxr_instruct::pipeline::Corpus;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const WORDS: &[&str] = &[
    "left", "right", "lower", "upper", "lobe", "mild", "moderate", "severe", "effusion", "edema",
    "atelectasis", "opacity", "pneumonia", "heart", "lung", "base", "bilateral", "small", "large",
    "nodule", "the", "of", "and", "pa", "ap", "lateral", "cardiomegaly",
];

pub fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_qa(rng: &mut ChaCha8Rng, qa_id: String, img: &ImageRecord, allow_difference: bool) -> QaRecord {
    let closed = rng.random_bool(0.5);
    let cat = if allow_difference && rng.random_bool(0.05) {
        QaCategory::Difference
    } else if closed {
        [QaCategory::Abnormality, QaCategory::Presence, QaCategory::View][rng.random_range(0..3)]
    } else {
        [
            QaCategory::Abnormality,
            QaCategory::View,
            QaCategory::Location,
            QaCategory::Level,
            QaCategory::Type,
        ][rng.random_range(0..5)]
    };
    let (question, answer) = if closed {
        let cond = Condition::ALL[rng.random_range(0..Condition::ALL.len())];
        let q = match cat {
            QaCategory::View => "is this a frontal view?".to_string(),
            QaCategory::Abnormality => "is there any abnormality?".to_string(),
            _ => format!("is there evidence of {} in this image?", cond.label()),
        };
        (q, if rng.random_bool(0.4) { "yes" } else { "no" }.to_string())
    } else {
        (format!("what is the {} here?", cat.as_str()), random_text(rng, 1, 6))
    };
    QaRecord::new(qa_id, &img.image_id, &img.patient_id, question, answer, cat).unwrap()
}

pub fn random_expert(rng: &mut ChaCha8Rng, image_id: &str) -> ExpertPrediction {
    let mut probs = [0.0; 18];
    for p in probs.iter_mut() {
        *p = (rng.random::<f64>() * 100.0).round() / 100.0;
    }
    ExpertPrediction::new(
        image_id,
        DiseaseProbs::new(probs).unwrap(),
        rng.random_range(18.0..95.0),
        [Race::Asian, Race::Black, Race::White][rng.random_range(0..3)],
        if rng.random_bool(0.7) { View::Frontal } else { View::Lateral },
    )
    .unwrap()
}

/// Random valid corpus: `patients` patients with 1..=`max_images` images each
/// and 1..=`max_qas` QAs per image. Every image has an expert prediction.
pub fn synthetic_corpus(seed: u64, patients: usize, max_images: usize, max_qas: usize) -> Corpus {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut qas = Vec::new();
    let mut experts = Vec::new();
    for p in 0..patients {
        let pid = format!("p{p:04}");
        for i in 0..r.random_range(1..=max_images) {
            let iid = format!("img{p:04}_{i:02}");
            let img = ImageRecord::new(&iid, &pid, format!("s{p:04}_{i}"), format!("files/{pid}/{iid}.jpg")).unwrap();
            for _ in 0..r.random_range(1..=max_qas) {
                let qa = random_qa(&mut r, format!("qa{:06}", qas.len()), &img, true);
                qas.push(qa);
            }
            experts.push(random_expert(&mut r, &iid));
            images.push(img);
        }
    }
    Corpus { images, qas, experts }
}

/// Exactly `n` QAs over `images` images, no difference questions.
pub fn corpus_with_qa_count(seed: u64, images: usize, n: usize) -> Corpus {
    let mut r = rng(seed);
    let imgs: Vec<ImageRecord> = (0..images)
        .map(|i| ImageRecord::new(format!("img{i:04}"), format!("p{:04}", i / 2), format!("s{i}"), format!("f/{i}.jpg")).unwrap())
        .collect();
    let qas = (0..n)
        .map(|k| {
            let img = &imgs[k % images];
            random_qa(&mut r, format!("qa{k:06}"), img, false)
        })
        .collect();
    let experts = imgs.iter().map(|i| random_expert(&mut r, &i.image_id)).collect();
    Corpus {
        images: imgs,
        qas,
        experts,
    }
}

/// Writes the corpus as CSV/JSONL under `dir` and returns a config reading it.
pub fn write_corpus(dir: &Path, c: &Corpus) -> RunConfig {
    let mut cfg = RunConfig::default();
    let images = dir.join("images.csv");
    let qas = dir.join("qa.csv");
    let experts = dir.join("experts.jsonl");
    ingest::write_image_metadata(File::create(&images).unwrap(), &c.images, &cfg.schema).unwrap();
    ingest::write_qa_table(File::create(&qas).unwrap(), &c.qas, &cfg.schema).unwrap();
    ingest::write_expert_predictions(File::create(&experts).unwrap(), &c.experts).unwrap();
    cfg.inputs.images = Some(images);
    cfg.inputs.qas = Some(qas);
    cfg.inputs.experts = Some(experts);
    cfg.out = dir.join("out");
    cfg
}

/// Every file under `root`, relative path to contents, sorted.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
