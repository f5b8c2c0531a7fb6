use dualmix::autodiff::Tape;
use dualmix::distill::{
    ensemble_predict, evaluate, loss_region_teacher, loss_student, train_student, train_student_on_targets, train_teacher,
    KdWeights, TeacherKind, Teachers, TrainSchedule,
};
use dualmix::domainmix::{region_mix, BinaryMask, Rect};
use dualmix::ops;
use dualmix::optim::{OptimizerState, SgdConfig};
use dualmix::segnet::{self, encode_checkpoint, ModelParams, Role};
use dualmix::synthdata::{build_splits, DatasetBundle, DatasetConfig, ImageSample, NUM_CLASSES};
use dualmix::{Scalar, Tensor};

fn bundle(seed: u64, labeled: usize, unlabeled: usize, val: usize) -> DatasetBundle {
    build_splits(&DatasetConfig {
        n_source: 16,
        n_target_labeled: labeled,
        n_target_unlabeled: unlabeled,
        n_val: val,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn schedule(iters: usize, lr: f64, seed: u64) -> TrainSchedule {
    TrainSchedule {
        base_lr: lr,
        ..TrainSchedule::new(iters, seed)
    }
}

/// A model whose logits are `logit` on `class` and 0 elsewhere, at every pixel.
fn constant_model<T: Scalar>(class: usize, logit: f64, role: Role) -> ModelParams<T> {
    let mut p = ModelParams::<T>::init(1, NUM_CLASSES, role).unwrap();
    p.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = T::zero());
    let bias = p.get_mut("head.bias").unwrap().data_mut();
    bias.iter_mut().for_each(|v| *v = T::zero());
    bias[class] = T::from_f64(logit);
    p
}

fn relabel(s: &ImageSample, class: u8) -> ImageSample {
    ImageSample {
        labels: vec![class; s.pixels()],
        ..s.clone()
    }
}

#[test]
fn region_loss_of_a_perfect_model_vanishes() {
    let b = bundle(3, 2, 2, 1);
    let mut target = relabel(&b.target_labeled[0], 2);
    target.labels[5] = 255;
    let source = relabel(&b.source_labeled[0], 2);
    let mask = BinaryMask::from_rect(64, 64, Rect::new(10, 20, 30, 25)).unwrap();
    let mixed = region_mix(&target, &source, &mask).unwrap();

    let params = constant_model::<f64>(2, 20.0, Role::TeacherRl);
    let mut tape = Tape::<f64>::new();
    let vars = segnet::register_params(&mut tape, &params);
    let loss = loss_region_teacher(&mut tape, &vars, &mixed).unwrap();
    let v = tape.value(loss).item();
    assert!((0.0..1e-8).contains(&v), "{v}");
}

#[test]
fn student_loss_vanishes_when_it_matches_the_ensemble_and_the_labels() {
    let b = bundle(4, 2, 2, 1);
    let m = constant_model::<f32>(0, 30.0, Role::Student);
    let labeled = relabel(&b.target_labeled[0], 0);
    let mut tape = Tape::new();
    let vars = segnet::register_params(&mut tape, &m);
    let teachers = Teachers { region: &m, sample: &m };
    let l = loss_student(&mut tape, &vars, teachers, &b.target_unlabeled[0], &labeled, KdWeights::default()).unwrap();
    let v = tape.value(l.total).item();
    assert!(v.abs() < 1e-6, "{v}");
}

#[test]
fn full_batch_sgd_overfits_five_images() {
    let b = bundle(5, 5, 2, 1);
    let samples = &b.target_labeled;
    let mut params = ModelParams::<f32>::init(9, NUM_CLASSES, Role::Student).unwrap();
    let cfg = SgdConfig {
        base_lr: 0.01,
        ..SgdConfig::new(200)
    };
    let mut opt = OptimizerState::new(cfg, params.tensors());
    let mut tape = Tape::new();
    let mut losses = Vec::new();
    for it in 0..=200 {
        tape.reset();
        let vars = segnet::register_params(&mut tape, &params);
        let mut total = None;
        for s in samples {
            let x = tape.constant(s.to_tensor());
            let logits = segnet::forward_with(&mut tape, &vars, x).unwrap();
            let ce = tape.cross_entropy(logits, &s.labels).unwrap();
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce).unwrap(),
            });
        }
        let total = total.unwrap();
        if it % 50 == 0 {
            losses.push(tape.value(total).item());
        }
        if it == 200 {
            break;
        }
        let grads = tape.backward(total).unwrap();
        opt.step(params.tensors_mut(), &grads.into_tensors()).unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[4] < 0.8 * losses[0], "{losses:?}");
}

fn trains(kind: TeacherKind, same_domain: bool) {
    let b = bundle(6, 6, 2, 1);
    let target = if same_domain { &b.source_labeled } else { &b.target_labeled };
    let out = train_teacher(kind, &b.source_labeled, target, &schedule(240, 0.01, 2), None).unwrap();
    assert!(out.params.is_finite());
    assert_eq!(out.curve.len(), 4);
    let (first, last) = (out.curve[0].loss, out.final_loss());
    assert!(last < first, "{kind:?}: {first} → {last}");
}

#[test]
fn region_teacher_loss_decreases() {
    trains(TeacherKind::RegionLevel, false);
}

#[test]
fn sample_teacher_loss_decreases() {
    trains(TeacherKind::SampleLevel, false);
}

#[test]
fn region_teacher_trains_when_target_equals_source() {
    trains(TeacherKind::RegionLevel, true);
}

#[test]
fn ensemble_is_a_distribution_that_respects_agreement() {
    let b = bundle(7, 2, 6, 1);
    let mut agreeing = 0;
    for seed in 0..3u64 {
        let r = ModelParams::<f32>::init(seed, NUM_CLASSES, Role::TeacherRl).unwrap();
        // a perturbed copy, so the two argmaxes agree on part of the image
        let noise = ModelParams::<f32>::init(seed + 100, NUM_CLASSES, Role::TeacherSl).unwrap();
        let mut s = r.clone();
        s.role = Role::TeacherSl;
        for (t, n) in s.tensors_mut().iter_mut().zip(noise.tensors()) {
            t.axpy(0.3, n);
        }
        for img in &b.target_unlabeled {
            let x = img.to_tensor::<f32>();
            let e = ensemble_predict(&r, &s, &x).unwrap();
            let pr = ops::softmax_channel(&segnet::forward(&r, &x).unwrap()).unwrap();
            let ps = ops::softmax_channel(&segnet::forward(&s, &x).unwrap()).unwrap();
            let (ar, _) = ops::argmax_channel(&pr).unwrap();
            let (as_, _) = ops::argmax_channel(&ps).unwrap();
            let (ae, _) = ops::argmax_channel(&e).unwrap();
            let hw = img.pixels();
            for p in 0..hw {
                let sum: f64 = (0..NUM_CLASSES).map(|c| e.data()[c * hw + p] as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                if ar[p] == as_[p] {
                    agreeing += 1;
                    assert_eq!(ae[p], ar[p], "pixel {p}");
                }
            }
        }
    }
    assert!(agreeing > 1000, "{agreeing}");
}

#[test]
fn teachers_are_untouched_by_student_training() {
    let b = bundle(8, 3, 4, 1);
    let r = ModelParams::<f32>::init(1, NUM_CLASSES, Role::TeacherRl).unwrap();
    let s = ModelParams::<f32>::init(2, NUM_CLASSES, Role::TeacherSl).unwrap();
    let (before_r, before_s) = (encode_checkpoint(&r), encode_checkpoint(&s));
    let teachers = Teachers { region: &r, sample: &s };
    let out = train_student(teachers, &b.target_labeled, &b.target_unlabeled, &schedule(20, 0.01, 3), KdWeights::default(), None)
        .unwrap();
    assert_eq!(encode_checkpoint(&r), before_r);
    assert_eq!(encode_checkpoint(&s), before_s);
    assert_ne!(encode_checkpoint(&out.params), before_r);
}

fn one_hot(labels: &[u8], hw: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[NUM_CLASSES, 64, 64]);
    for (p, &l) in labels.iter().enumerate() {
        t.data_mut()[l as usize * hw + p] = 1.0;
    }
    t
}

#[test]
fn oracle_teachers_beat_plain_supervision() {
    let b = bundle(9, 2, 30, 20);
    let truth = b.unlabeled_ground_truth();
    let targets: Vec<Tensor<f32>> = truth.iter().map(|s| one_hot(&s.labels, s.pixels())).collect();
    let inputs: Vec<Tensor<f32>> = b.target_unlabeled.iter().map(ImageSample::to_tensor).collect();
    let val = b.validation_ground_truth();
    let sched = schedule(400, 0.01, 5);
    let run = |lambda_kl| {
        let w = KdWeights {
            lambda_kl,
            ..KdWeights::default()
        };
        let out = train_student_on_targets(NUM_CLASSES, &targets, &inputs, &b.target_labeled, &sched, w, None).unwrap();
        evaluate(&out.params, &val).unwrap().miou().unwrap()
    };
    let (oracle, ce_only) = (run(0.5), run(0.0));
    assert!(oracle > ce_only, "oracle {oracle} vs CE-only {ce_only}");
}
