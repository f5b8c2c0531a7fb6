//! Teacher losses and training on mixed data, teacher ensembling, and
//! multi-teacher distillation of the student.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domainmix::{self, region_mix, sample_mask, MixedSample, SIDE_RATIO_RANGE};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::ops;
use crate::optim::{OptimizerState, SgdConfig};
use crate::segnet::{self, ModelParams, ParamVars, Role};
use crate::synthdata::ImageSample;
use crate::tensor::{Scalar, Tensor};

/// Optimization schedule of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_iters: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Loss (and validation mIoU, when a validation set is given) is recorded
    /// every `eval_every` iterations.
    pub eval_every: usize,
    pub rng_seed: u64,
    /// Images (or image pairs) per iteration; gradients are averaged.
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn new(total_iters: usize, rng_seed: u64) -> Self {
        TrainSchedule {
            total_iters,
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            eval_every: (total_iters / 4).max(1),
            rng_seed,
            batch_size: 1,
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        TrainSchedule {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.poly_power,
            max_iter: self.total_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Weights of the distillation and supervised terms of the student loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub lambda_kl: f64,
    pub lambda_ce: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        KdWeights {
            lambda_kl: 0.5,
            lambda_ce: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherKind {
    /// Trained on region-mixed images.
    RegionLevel,
    /// Trained on one source and one target image per step.
    SampleLevel,
}

impl TeacherKind {
    pub fn role(self) -> Role {
        match self {
            TeacherKind::RegionLevel => Role::TeacherRl,
            TeacherKind::SampleLevel => Role::TeacherSl,
        }
    }
}

/// One point of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    /// Mean training loss over the iterations since the previous point.
    pub loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub curve: Vec<CurvePoint>,
    /// Loss of the very first iteration.
    pub initial_loss: f64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(self.initial_loss, |p| p.loss)
    }
}

/// Region-level teacher loss: CE of the model on the mixed image.
pub fn loss_region_teacher<T: Scalar>(tape: &mut Tape<T>, params: &ParamVars, mixed: &MixedSample) -> Result<Var> {
    let sample = mixed.clone().into_sample(0);
    let x = tape.constant(sample.to_tensor());
    let logits = segnet::forward_with(tape, params, x)?;
    tape.cross_entropy(logits, &mixed.labels)
}

/// Sample-level teacher loss: `CE(x_s, y_s) + CE(x_t, y_t)` (a sum).
pub fn loss_sample_teacher<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    source: &ImageSample,
    target: &ImageSample,
) -> Result<Var> {
    let xs = tape.constant(source.to_tensor());
    let ls = segnet::forward_with(tape, params, xs)?;
    let ce_s = tape.cross_entropy(ls, &source.labels)?;
    let xt = tape.constant(target.to_tensor());
    let lt = segnet::forward_with(tape, params, xt)?;
    let ce_t = tape.cross_entropy(lt, &target.labels)?;
    tape.add(ce_s, ce_t)
}

/// Per-pixel mean of the two teachers' softmax outputs.
pub fn ensemble_predict<T: Scalar>(
    region: &ModelParams<T>,
    sample: &ModelParams<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    if region.num_classes() != sample.num_classes() {
        return Err(Error::ClassMismatch(region.num_classes(), sample.num_classes()));
    }
    let a = ops::softmax_channel(&segnet::forward(region, image)?)?;
    let b = ops::softmax_channel(&segnet::forward(sample, image)?)?;
    Ok(average_probs(&a, &b))
}

fn average_probs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = (*o + v) * half;
    }
    out
}

/// The two frozen teachers used to distil a student.
#[derive(Clone, Copy, Debug)]
pub struct Teachers<'a> {
    pub region: &'a ModelParams<f32>,
    pub sample: &'a ModelParams<f32>,
}

/// Slots of the student loss and its weighted terms.
#[derive(Clone, Copy, Debug)]
pub struct StudentLoss {
    pub total: Var,
    /// `λ_kl · KL(ensemble ‖ student)` on the unlabeled image.
    pub kd_term: Var,
    /// `λ_ce · CE` on the labeled target image.
    pub ce_term: Var,
}

/// Records the student objective given a precomputed ensemble target.
pub fn loss_student_with_target<T: Scalar>(
    tape: &mut Tape<T>,
    student: &ParamVars,
    ensemble: &Tensor<T>,
    unlabeled: &Tensor<T>,
    labeled: &ImageSample,
    weights: KdWeights,
) -> Result<StudentLoss> {
    let xu = tape.constant(unlabeled.clone());
    let lu = segnet::forward_with(tape, student, xu)?;
    let kl = tape.kl_divergence(ensemble, lu)?;
    let xt = tape.constant(labeled.to_tensor());
    let lt = segnet::forward_with(tape, student, xt)?;
    let ce = tape.cross_entropy(lt, &labeled.labels)?;
    let kd_term = tape.scale(kl, T::from_f64(weights.lambda_kl));
    let ce_term = tape.scale(ce, T::from_f64(weights.lambda_ce));
    let total = tape.add(kd_term, ce_term)?;
    Ok(StudentLoss {
        total,
        kd_term,
        ce_term,
    })
}

/// `λ_kl · KL(E(x_u) ‖ M_S(x_u)) + λ_ce · CE(M_S(x_t), y_t)`; teachers get no gradient.
pub fn loss_student(
    tape: &mut Tape<f32>,
    student: &ParamVars,
    teachers: Teachers<'_>,
    unlabeled: &ImageSample,
    labeled: &ImageSample,
    weights: KdWeights,
) -> Result<StudentLoss> {
    let xu = unlabeled.to_tensor();
    let target = ensemble_predict(teachers.region, teachers.sample, &xu)?;
    loss_student_with_target(tape, student, &target, &xu, labeled, weights)
}

/// Argmax prediction of one model.
pub fn predict(params: &ModelParams<f32>, image: &ImageSample) -> Result<Vec<u8>> {
    let logits = segnet::forward(params, &image.to_tensor())?;
    Ok(ops::argmax_channel(&logits)?.0)
}

/// Confusion matrix of a model over labeled samples.
pub fn evaluate(params: &ModelParams<f32>, samples: &[ImageSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.num_classes());
    for s in samples {
        cm.accumulate(&predict(params, s)?, &s.labels)?;
    }
    Ok(cm)
}

/// Confusion matrix of the averaged-probability ensemble.
pub fn evaluate_ensemble(teachers: Teachers<'_>, samples: &[ImageSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(teachers.region.num_classes());
    for s in samples {
        let probs = ensemble_predict(teachers.region, teachers.sample, &s.to_tensor())?;
        cm.accumulate(&ops::argmax_channel(&probs)?.0, &s.labels)?;
    }
    Ok(cm)
}

/// Shared SGD loop: `step` records the loss of one example on the tape.
fn optimize<F>(
    mut params: ModelParams<f32>,
    schedule: &TrainSchedule,
    val: Option<&[ImageSample]>,
    mut step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut Tape<f32>, &ParamVars, &mut ChaCha8Rng) -> Result<Var>,
{
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.rng_seed);
    rng.set_stream(1);
    let mut opt = OptimizerState::new(schedule.sgd(), params.tensors());
    let mut tape = Tape::new();
    let mut curve = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut window = 0.0;
    let mut window_len = 0usize;
    for iter in 0..schedule.total_iters {
        tape.reset();
        let vars = segnet::register_params(&mut tape, &params);
        let mut loss = step(&mut tape, &vars, &mut rng)?;
        if schedule.batch_size > 1 {
            for _ in 1..schedule.batch_size {
                let more = step(&mut tape, &vars, &mut rng)?;
                loss = tape.add(loss, more)?;
            }
            loss = tape.scale(loss, 1.0 / schedule.batch_size as f32);
        }
        let value = tape.value(loss).item() as f64;
        if iter == 0 {
            initial_loss = value;
        }
        window += value;
        window_len += 1;
        let grads = tape.backward(loss)?;
        opt.step(params.tensors_mut(), &grads.into_tensors())?;

        let done = iter + 1;
        if done % schedule.eval_every == 0 || done == schedule.total_iters {
            let val_miou = match val {
                Some(v) if !v.is_empty() => Some(evaluate(&params, v)?.miou()?),
                _ => None,
            };
            curve.push(CurvePoint {
                iter: done,
                loss: window / window_len as f64,
                val_miou,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome {
        params,
        curve,
        initial_loss,
    })
}

/// Trains a domain-mixed teacher from a fresh initialization.
pub fn train_teacher(
    kind: TeacherKind,
    source: &[ImageSample],
    target: &[ImageSample],
    schedule: &TrainSchedule,
    val: Option<&[ImageSample]>,
) -> Result<TrainOutcome> {
    let init = ModelParams::init(schedule.rng_seed, crate::synthdata::NUM_CLASSES, kind.role())?;
    train_teacher_from(init, kind, source, target, schedule, val)
}

/// [`train_teacher`] starting from given parameters.
pub fn train_teacher_from(
    init: ModelParams<f32>,
    kind: TeacherKind,
    source: &[ImageSample],
    target: &[ImageSample],
    schedule: &TrainSchedule,
    val: Option<&[ImageSample]>,
) -> Result<TrainOutcome> {
    if source.is_empty() {
        return Err(Error::EmptySet("labeled source set"));
    }
    if target.is_empty() {
        return Err(Error::EmptySet("labeled target set"));
    }
    match kind {
        TeacherKind::RegionLevel => optimize(init, schedule, val, |tape, vars, rng| {
            let (s, t) = domainmix::draw_pair(rng, source, target)?;
            let mask = sample_mask(rng.gen(), t.height, t.width, SIDE_RATIO_RANGE)?;
            let mixed = region_mix(t, s, &mask)?;
            loss_region_teacher(tape, vars, &mixed)
        }),
        TeacherKind::SampleLevel => optimize(init, schedule, val, |tape, vars, rng| {
            let (s, t) = domainmix::draw_pair(rng, source, target)?;
            loss_sample_teacher(tape, vars, s, t)
        }),
    }
}

/// Plain cross-entropy training on one labeled set, from `init` (or a fresh
/// initialization when `None`). Used for the source-only baseline and for
/// vanilla self-training.
pub fn train_supervised(
    samples: &[ImageSample],
    schedule: &TrainSchedule,
    role: Role,
    init: Option<ModelParams<f32>>,
    val: Option<&[ImageSample]>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptySet("training set"));
    }
    let init = match init {
        Some(p) => p,
        None => ModelParams::init(schedule.rng_seed, crate::synthdata::NUM_CLASSES, role)?,
    };
    optimize(init, schedule, val, |tape, vars, rng| {
        let s = &samples[rng.gen_range(0..samples.len())];
        let x = tape.constant(s.to_tensor());
        let logits = segnet::forward_with(tape, vars, x)?;
        tape.cross_entropy(logits, &s.labels)
    })
}

/// Distils the teacher ensemble into a freshly initialized student.
///
/// Each iteration draws one labeled target image and one unlabeled image.
/// Ensemble targets are computed once per unlabeled image up front.
pub fn train_student(
    teachers: Teachers<'_>,
    labeled: &[ImageSample],
    unlabeled: &[ImageSample],
    schedule: &TrainSchedule,
    weights: KdWeights,
    val: Option<&[ImageSample]>,
) -> Result<TrainOutcome> {
    if unlabeled.is_empty() {
        return Err(Error::EmptySet("unlabeled target set"));
    }
    if labeled.is_empty() {
        return Err(Error::EmptySet("labeled target set"));
    }
    let inputs: Vec<Tensor<f32>> = unlabeled.iter().map(ImageSample::to_tensor).collect();
    let targets = inputs
        .iter()
        .map(|x| ensemble_predict(teachers.region, teachers.sample, x))
        .collect::<Result<Vec<_>>>()?;
    train_student_on_targets(teachers.region.num_classes(), &targets, &inputs, labeled, schedule, weights, val)
}

/// Student training against fixed per-image soft targets (one `C×H×W`
/// distribution per entry of `inputs`).
pub fn train_student_on_targets(
    num_classes: usize,
    targets: &[Tensor<f32>],
    inputs: &[Tensor<f32>],
    labeled: &[ImageSample],
    schedule: &TrainSchedule,
    weights: KdWeights,
    val: Option<&[ImageSample]>,
) -> Result<TrainOutcome> {
    if inputs.is_empty() {
        return Err(Error::EmptySet("unlabeled target set"));
    }
    if labeled.is_empty() {
        return Err(Error::EmptySet("labeled target set"));
    }
    if targets.len() != inputs.len() {
        return Err(Error::Shape(format!("{} targets for {} inputs", targets.len(), inputs.len())));
    }
    let init = ModelParams::init(schedule.rng_seed, num_classes, Role::Student)?;
    optimize(init, schedule, val, |tape, vars, rng| {
        let t = &labeled[rng.gen_range(0..labeled.len())];
        let u = rng.gen_range(0..inputs.len());
        Ok(loss_student_with_target(tape, vars, &targets[u], &inputs[u], t, weights)?.total)
    })
}
