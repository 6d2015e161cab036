mod common;

use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;

use cxr_instruct::corpus::{ImageRecord, Openness, QaCategory, QaRecord};
use cxr_instruct::ingest::{self, SchemaConfig};
use cxr_instruct::metrics::{self, Bucket, RecallMode};
use cxr_instruct::split::{self, SplitConfig, TestPatients};
use cxr_instruct::stats::{self, PairedSample, WilcoxonConfig};

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["left", "right", "lobe", "edema", "mild", "the", "yes", "no", "opacity", "base"])
        .prop_map(str::to_string)
}

fn text() -> impl Strategy<Value = Vec<String>> {
    vec(word(), 1..10)
}

/// Cell text as the parser returns it: cells are trimmed on read.
fn field() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,\"'.\\-]{1,12}".prop_filter("trimmed, non-blank", |s| !s.is_empty() && s.trim() == s)
}

proptest! {
    #[test]
    fn recall_bounds_and_monotonicity(pred in text(), gt in text(), extra in word()) {
        let (p, g) = (pred.join(" "), gt.join(" "));
        let r = metrics::token_recall(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let longer = metrics::token_recall(&format!("{p} {extra}"), &g).unwrap();
        prop_assert!(longer >= r);
        let novel = "zzzunseen";
        let harder = metrics::token_recall(&p, &format!("{g} {novel}")).unwrap();
        prop_assert!(harder < r || r == 0.0);
    }

    #[test]
    fn recall_is_permutation_invariant(pred in text(), gt in text(), seed in any::<u64>()) {
        let shuffle = |mut v: Vec<String>, s: u64| {
            let n = v.len();
            for i in (1..n).rev() {
                v.swap(i, (s.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
            }
            v.join(" ")
        };
        for mode in [RecallMode::Multiset, RecallMode::Set] {
            let a = metrics::token_recall_with(&pred.join(" "), &gt.join(" "), mode).unwrap();
            let b = metrics::token_recall_with(&shuffle(pred.clone(), seed), &shuffle(gt.clone(), seed ^ 1), mode).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn auc_bounds_and_label_flip(scores in vec(0u8..20, 2..60), labels in vec(any::<bool>(), 2..60)) {
        let n = scores.len().min(labels.len());
        let s: Vec<f64> = scores[..n].iter().map(|x| *x as f64).collect();
        let l: Vec<u8> = labels[..n].iter().map(|b| *b as u8).collect();
        let both = l.contains(&0) && l.contains(&1);
        match metrics::auc(&s, &l) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert!((0.0..=1.0).contains(&a));
                let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
                let f = metrics::auc(&s, &flipped).unwrap();
                prop_assert!((a + f - 1.0).abs() < 1e-12);
            }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn wilcoxon_p_is_a_probability(d in vec(-5i8..=5, 1..40)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        let r = stats::wilcoxon_signed_rank(&PairedSample::from_differences(&d).unwrap(), &WilcoxonConfig::default()).unwrap();
        prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let n = r.n_effective as f64;
        prop_assert_eq!(r.w_plus + r.w_minus, n * (n + 1.0) / 2.0);
    }

    #[test]
    fn image_table_round_trips(rows in vec((field(), field(), field(), field()), 1..20)) {
        let images: Vec<ImageRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (a, b, c, d))| ImageRecord::new(format!("{a}{i}"), b.clone(), c.clone(), d.clone()).unwrap())
            .collect();
        let cfg = SchemaConfig::default();
        let mut buf = Vec::new();
        ingest::write_image_metadata(&mut buf, &images, &cfg).unwrap();
        prop_assert_eq!(ingest::parse_image_metadata(buf.as_slice(), &cfg).unwrap(), images);
    }

    #[test]
    fn qa_table_round_trips(rows in vec((field(), field(), any::<bool>(), 0usize..7), 1..20)) {
        let qas: Vec<QaRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (q, a, closed, c))| {
                let answer = if *closed { "yes".to_string() } else { format!("{a} x") };
                QaRecord::new(format!("q{i}"), format!("img{i}"), "p", q.clone(), answer, QaCategory::ALL[*c]).unwrap()
            })
            .collect();
        let cfg = SchemaConfig::default();
        let mut buf = Vec::new();
        ingest::write_qa_table(&mut buf, &qas, &cfg).unwrap();
        prop_assert_eq!(ingest::parse_qa_table(buf.as_slice(), &cfg).unwrap(), qas);
    }

    #[test]
    fn split_partitions_images(seed in any::<u64>(), patients in 1usize..20, fraction in 0.0f64..=1.0) {
        let c = common::synthetic_corpus(seed, patients, 4, 2);
        let cfg = SplitConfig {
            test_patients: TestPatients::Sample { fraction, seed },
            ..SplitConfig::default()
        };
        let m = split::make_split(&c.images, &cfg).unwrap();
        prop_assert!(m.check(&c.images).is_ok());
        let all: BTreeSet<String> = c.images.iter().map(|i| i.image_id.clone()).collect();
        let union: BTreeSet<String> = m.train_image_ids.union(&m.extended_test_image_ids).cloned().collect();
        prop_assert_eq!(union, all);
        prop_assert!(m.train_image_ids.is_disjoint(&m.extended_test_image_ids));
        let again = split::make_split(&c.images, &cfg).unwrap();
        prop_assert_eq!(again.fingerprint, m.fingerprint);
    }

    #[test]
    fn bucket_text_round_trips(c in prop::option::of(0usize..7), closed in any::<bool>()) {
        let o = if closed { Openness::Closed } else { Openness::Open };
        let b = match c {
            Some(i) => Bucket::new(QaCategory::ALL[i], o),
            None => Bucket::average(o),
        };
        prop_assert_eq!(b.to_string().parse::<Bucket>().unwrap(), b);
    }
}
