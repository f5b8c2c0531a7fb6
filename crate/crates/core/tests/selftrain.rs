use std::fs;

use dualmix::distill::predict;
use dualmix::segnet::{self, Role};
use dualmix::selftrain::{
    checkpoint_path, generate_pseudo_labels, merge_into_labeled, pseudo_path, run_framework, Experiment, FrameworkConfig, LabelOrigin,
};
use dualmix::synthdata::{build_splits, read_dataset, DatasetBundle, DatasetConfig};

fn bundle() -> DatasetBundle {
    build_splits(&DatasetConfig {
        n_source: 12,
        n_target_labeled: 3,
        n_target_unlabeled: 8,
        n_val: 4,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn config(rounds: usize) -> FrameworkConfig {
    let mut c = FrameworkConfig::new(12, rounds, 77);
    c.teacher_schedule.base_lr = 0.01;
    c.student_schedule.base_lr = 0.01;
    c
}

#[test]
fn one_round_gives_one_report() {
    let b = bundle();
    let out = run_framework(&b, &config(1), None).unwrap();
    assert_eq!(out.reports.len(), 1);
    let r = &out.reports[0];
    assert_eq!((r.round, r.labeled_genuine, r.labeled_pseudo), (1, 3, 0));
    assert!(r.checkpoints.student.is_none());
    for s in [&r.teacher_rl, &r.teacher_sl, &r.ensemble, &r.student] {
        assert!((0.0..=1.0).contains(&s.miou));
    }
    assert!(out.final_student.is_finite());
}

#[test]
fn a_round_depends_only_on_the_stored_pseudo_set() {
    let b = bundle();
    let cfg = config(2);
    let full = tempfile::tempdir().unwrap();
    let whole = run_framework(&b, &cfg, Some(full.path())).unwrap();
    assert_eq!(whole.reports.len(), 2);
    assert_eq!(whole.reports[1].labeled_pseudo, b.target_unlabeled.len());

    // replay round 2 in a fresh directory that only holds round 1's pseudo set
    let replay = tempfile::tempdir().unwrap();
    fs::create_dir_all(replay.path().join("round1")).unwrap();
    fs::copy(pseudo_path(full.path(), 1), pseudo_path(replay.path(), 1)).unwrap();
    let exp = Experiment::new(&b, cfg.clone(), Some(replay.path())).unwrap();
    let state = exp.load_state(2).unwrap();
    assert_eq!(state.round, 2);
    let out = exp.run_round(&state, None).unwrap();

    let (mut a, mut e) = (out.report.clone(), whole.reports[1].clone());
    a.checkpoints = Default::default();
    e.checkpoints = Default::default();
    assert_eq!(a, e);
    for role in [Role::TeacherRl, Role::TeacherSl, Role::Student] {
        assert_eq!(
            fs::read(checkpoint_path(full.path(), 2, role)).unwrap(),
            fs::read(checkpoint_path(replay.path(), 2, role)).unwrap(),
            "{role:?}"
        );
    }
    assert_eq!(fs::read(pseudo_path(full.path(), 2)).unwrap(), fs::read(pseudo_path(replay.path(), 2)).unwrap());
}

#[test]
fn stored_pseudo_set_matches_the_student_that_made_it() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    let out = run_framework(&b, &config(1), Some(dir.path())).unwrap();
    let student = segnet::load_checkpoint(&checkpoint_path(dir.path(), 1, Role::Student), Role::Student).unwrap();
    assert_eq!(segnet::encode_checkpoint(&student), segnet::encode_checkpoint(&out.final_student));

    let cfg = config(1).pseudo;
    let fresh = generate_pseudo_labels(&student, &b.target_unlabeled, cfg).unwrap();
    let (header, stored) = read_dataset(&pseudo_path(dir.path(), 1)).unwrap();
    assert_eq!(header.num_classes, b.num_classes);
    assert_eq!(stored, fresh.samples);

    // every class the student predicts keeps at least a `portion` share of its pixels
    for c in 0..b.num_classes {
        let predicted: usize = b
            .target_unlabeled
            .iter()
            .map(|s| predict(&student, s).unwrap().iter().filter(|&&v| v as usize == c).count())
            .sum();
        let kept: usize = stored.iter().map(|s| s.labels.iter().filter(|&&v| v as usize == c).count()).sum();
        assert!(kept as f64 >= cfg.portion * predicted as f64 - 1e-9, "class {c}: {kept}/{predicted}");
    }
}

#[test]
fn genuine_labels_survive_every_merge() {
    let b = bundle();
    let exp = Experiment::new(&b, config(3), None).unwrap();
    let mut state = exp.initial_state().unwrap();
    for _ in 0..3 {
        let out = exp.run_round(&state, None).unwrap();
        let merged = merge_into_labeled(&state.labeled, &out.pseudo).unwrap();
        assert_eq!(merged, out.next.labeled);
        assert_eq!(merged.len(), b.target_labeled.len() + b.target_unlabeled.len());
        assert_eq!(merged.genuine_samples(), b.target_labeled);
        assert_eq!(merged.count(LabelOrigin::Pseudo), b.target_unlabeled.len());
        state = out.next;
    }
    assert_eq!(state.round, 4);
}

mod merge {
    use dualmix::selftrain::{merge_into_labeled, LabelOrigin, LabeledTargetSet, PseudoConfig, PseudoLabeledSet};
    use dualmix::synthdata::{Domain, ImageSample};
    use dualmix::Error;
    use proptest::prelude::*;

    fn sample(id: u64, label: u8) -> ImageSample {
        ImageSample {
            sample_id: id,
            domain: Domain::Target,
            height: 1,
            width: 1,
            rgb: vec![0; 3],
            labels: vec![label],
        }
    }

    fn pseudo(ids: &[u64], label: u8) -> PseudoLabeledSet {
        PseudoLabeledSet {
            samples: ids.iter().map(|&i| sample(i, label)).collect(),
            ..PseudoLabeledSet::empty(PseudoConfig::default(), 5)
        }
    }

    proptest! {
        #[test]
        fn cardinality_and_replacement(
            ids in proptest::collection::btree_set(0u64..10_000, 1..40),
            split in 0usize..40,
        ) {
            let ids: Vec<u64> = ids.into_iter().collect();
            let k = split.clamp(1, ids.len());
            let (genuine_ids, unlabeled_ids) = ids.split_at(k);
            let genuine = LabeledTargetSet::genuine(genuine_ids.iter().map(|&i| sample(i, 1)).collect()).unwrap();

            let once = merge_into_labeled(&genuine, &pseudo(unlabeled_ids, 2)).unwrap();
            prop_assert_eq!(once.len(), ids.len());
            prop_assert_eq!(once.genuine_samples(), genuine.samples().to_vec());

            let twice = merge_into_labeled(&once, &pseudo(unlabeled_ids, 3)).unwrap();
            prop_assert_eq!(twice.len(), ids.len());
            prop_assert_eq!(twice.count(LabelOrigin::Pseudo), unlabeled_ids.len());
            for (s, o) in twice.samples().iter().zip(twice.origins()) {
                let expected = if *o == LabelOrigin::Genuine { 1 } else { 3 };
                prop_assert_eq!(s.labels[0], expected);
            }

            let clash = merge_into_labeled(&genuine, &pseudo(&[genuine_ids[0]], 2));
            prop_assert!(matches!(clash, Err(Error::IdCollision(id)) if id == genuine_ids[0]));
        }
    }
}
