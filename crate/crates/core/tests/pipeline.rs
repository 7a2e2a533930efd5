//! Preprocessing, corpus splitting, pretraining invariants and downstream
//! protocol conformance.

mod common;

use std::collections::BTreeSet;

use common::criteria;
use mammolab::corpus::{split_by_patient, Split, Task, DEFAULT_RATIOS};
use mammolab::encoders::checkpoint_bytes;
use mammolab::preprocess::{flip, generate_corpus, preprocess_record, CorpusSpec};
use mammolab::pretrain::{train_stage1, train_stage2, Ablation, Stage1Config, Stage2Config};
use proptest::prelude::*;

#[test]
fn preprocessing_fixture_and_idempotence() {
    criteria::preprocessing().unwrap();
}

#[test]
fn pretraining_invariants() {
    criteria::pretraining_invariants().unwrap();
}

#[test]
fn protocol_conformance() {
    criteria::protocol_conformance().unwrap();
}

#[test]
fn corpus_generation_is_seeded() {
    let spec = CorpusSpec {
        patients: 6,
        seed: 3,
        ..Default::default()
    };
    let a = generate_corpus(&spec).unwrap();
    assert_eq!(a, generate_corpus(&spec).unwrap());
    assert_ne!(a, generate_corpus(&CorpusSpec { seed: 4, ..spec }).unwrap());
}

#[test]
fn splits_are_patient_disjoint_and_seeded() {
    let m = common::small_corpus(20, 1);
    let s = split_by_patient(&m, DEFAULT_RATIOS, 9).unwrap();
    assert_eq!(s.counts(), [14, 2, 4]);
    let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&k| s.patients(k).into_iter().collect())
        .collect();
    assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
    for r in &m.records {
        let bucket = s.bucket(&r.patient_id).unwrap();
        assert!(s.records(&m, bucket).iter().any(|x| x.image_id == r.image_id));
    }
    assert_eq!(split_by_patient(&m, DEFAULT_RATIOS, 9).unwrap().counts(), s.counts());
    assert!(split_by_patient(&m, [0.5, 0.5, 0.5], 9).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn flips_are_involutions(seed in 0u64..1000, h: bool, v: bool) {
        let m = common::small_corpus(1, seed);
        for r in &m.records {
            prop_assert_eq!(&flip(&flip(r, h, v), h, v), r);
        }
    }

    #[test]
    fn preprocessing_keeps_annotations_in_frame(seed in 0u64..1000, side in prop::sample::select(vec![32usize, 64, 128])) {
        let m = common::small_corpus(1, seed);
        for r in &m.records {
            let p = preprocess_record(r, side).unwrap();
            prop_assert_eq!((p.pixels.height(), p.pixels.width()), (side, side));
            for b in &p.boxes {
                prop_assert!(0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= side as f64);
                prop_assert!(0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= side as f64);
            }
            if let Some(mask) = &p.mask {
                prop_assert_eq!((mask.height(), mask.width()), (side, side));
            }
        }
    }
}

fn tiny_stage1() -> Stage1Config {
    Stage1Config {
        vit: common::tiny_vit(),
        steps: 4,
        batch: 4,
        ..Default::default()
    }
}

#[test]
fn stage1_is_seeded_and_teacher_lags_online() {
    let m = common::small_corpus(4, 0);
    let recs: Vec<_> = m.records.iter().collect();
    let a = train_stage1(&recs, &tiny_stage1(), 1).unwrap();
    let b = train_stage1(&recs, &tiny_stage1(), 1).unwrap();
    assert_eq!(checkpoint_bytes(&a.teacher), checkpoint_bytes(&b.teacher));
    assert_eq!(a.curve.rows, b.curve.rows);
    assert_ne!(a.teacher.params(), a.online.params());
    assert!(a.curve.totals().iter().all(|t| t.is_finite()));
    assert_eq!(a.curve.rows.len(), 4);
}

#[test]
fn stage2_ablations_zero_their_terms() {
    let m = common::small_corpus(4, 0);
    let recs: Vec<_> = m.records.iter().collect();
    let teacher = train_stage1(&recs, &tiny_stage1(), 1).unwrap().teacher;
    let base = Stage2Config {
        student: common::tiny_cnn(),
        high: 32,
        low: 16,
        steps: 2,
        batch: 4,
        tasks: vec![Task::Birads, Task::Composition],
        ..Default::default()
    };
    let run = |ablation: Option<Ablation>| {
        let mut cfg = base.clone();
        cfg.ablation.extend(ablation);
        train_stage2(&recs, &teacher, &cfg, 2).unwrap()
    };
    let full = run(None);
    assert!(full.curve.rows.iter().all(|(_, terms, _)| terms.iter().all(|&t| t > 0.0)));
    for (ablation, term) in [(Ablation::NoDistill, 0), (Ablation::NoSup, 1)] {
        let o = run(Some(ablation));
        assert!(o.curve.rows.iter().all(|(_, t, _)| t[term] == 0.0), "{ablation:?}");
        assert_ne!(o.student.params(), full.student.params());
    }
    let vit_student = run(Some(Ablation::NoCnn));
    assert_eq!(vit_student.student.kind(), mammolab::encoders::EncoderKind::Vit);
    assert_eq!(vit_student.student.input_side(), Some(32));
}
