//! Pseudo labels, the labeled-target-set update, and the round loop of the
//! progressive framework and of the vanilla self-training baseline.

mod pseudo;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{self, CurvePoint, KdWeights, TeacherKind, Teachers, TrainSchedule};
use crate::domainmix::{compute_lab_stats, lab_style_transfer};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::segnet::{self, ModelParams, Role};
use crate::synthdata::{read_dataset, splitmix64, write_dataset, DatasetBundle, ImageSample};

pub use pseudo::{apply_thresholds, class_thresholds, generate_pseudo_labels, PseudoConfig, PseudoLabeledSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    Genuine,
    Pseudo,
}

/// The labeled target set `D_T`, each entry tagged genuine or pseudo.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTargetSet {
    samples: Vec<ImageSample>,
    origins: Vec<LabelOrigin>,
}

impl LabeledTargetSet {
    pub fn genuine(samples: Vec<ImageSample>) -> Result<Self> {
        let set = LabeledTargetSet {
            origins: vec![LabelOrigin::Genuine; samples.len()],
            samples,
        };
        set.check_unique()?;
        Ok(set)
    }

    fn check_unique(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.sample_id).collect();
        ids.sort_unstable();
        match ids.windows(2).find(|w| w[0] == w[1]) {
            Some(w) => Err(Error::IdCollision(w[0])),
            None => Ok(()),
        }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn origins(&self) -> &[LabelOrigin] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, origin: LabelOrigin) -> usize {
        self.origins.iter().filter(|&&o| o == origin).count()
    }

    pub fn genuine_samples(&self) -> Vec<ImageSample> {
        self.samples
            .iter()
            .zip(&self.origins)
            .filter(|(_, &o)| o == LabelOrigin::Genuine)
            .map(|(s, _)| s.clone())
            .collect()
    }
}

/// `D_T ∪ pseudo`; pseudo entries from an earlier merge are replaced, genuine
/// entries are kept as they are.
pub fn merge_into_labeled(labeled: &LabeledTargetSet, pseudo: &PseudoLabeledSet) -> Result<LabeledTargetSet> {
    let mut out = LabeledTargetSet {
        samples: Vec::with_capacity(labeled.len() + pseudo.samples.len()),
        origins: Vec::new(),
    };
    for s in labeled.genuine_samples() {
        out.samples.push(s);
        out.origins.push(LabelOrigin::Genuine);
    }
    for s in &pseudo.samples {
        out.samples.push(s.clone());
        out.origins.push(LabelOrigin::Pseudo);
    }
    out.check_unique()?;
    Ok(out)
}

/// Everything the round loop needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameworkConfig {
    pub teacher_schedule: TrainSchedule,
    pub student_schedule: TrainSchedule,
    pub kd: KdWeights,
    pub pseudo: PseudoConfig,
    pub rounds: usize,
    pub style_transfer: bool,
    pub master_seed: u64,
    /// Student CE uses only the genuine labeled images instead of `D_T′`.
    pub student_ce_genuine_only: bool,
    /// Teachers of round `r ≥ 2` start from the round `r−1` teachers.
    pub warm_start_teachers: bool,
}

impl FrameworkConfig {
    pub fn new(iters_per_stage: usize, rounds: usize, master_seed: u64) -> Self {
        let schedule = TrainSchedule::new(iters_per_stage, 0);
        FrameworkConfig {
            teacher_schedule: schedule.clone(),
            student_schedule: schedule,
            kd: KdWeights::default(),
            pseudo: PseudoConfig::default(),
            rounds,
            style_transfer: true,
            master_seed,
            student_ce_genuine_only: false,
            warm_start_teachers: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if !(self.kd.lambda_kl >= 0.0) {
            return Err(Error::config("lambda_kl", "must be ≥ 0"));
        }
        if !(self.kd.lambda_ce >= 0.0) {
            return Err(Error::config("lambda_ce", "must be ≥ 0"));
        }
        self.teacher_schedule.validate()?;
        self.student_schedule.validate()?;
        self.pseudo.validate()
    }
}

/// Seed of one training stage of one round.
pub fn stage_seed(master: u64, round: usize, stage: Stage) -> u64 {
    splitmix64(splitmix64(master) ^ ((round as u64) << 8 | stage as u64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TeacherRl = 1,
    TeacherSl = 2,
    Student = 3,
    SourceOnly = 4,
    VanillaStudent = 5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl ModelScore {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(ModelScore {
            miou: cm.miou()?,
            per_class: cm.per_class_iou(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCheckpoints {
    pub teacher_rl: Option<PathBuf>,
    pub teacher_sl: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub pseudo: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub teacher_rl: ModelScore,
    pub teacher_sl: ModelScore,
    pub ensemble: ModelScore,
    pub student: ModelScore,
    /// Selected fraction of unlabeled pixels after this round's student.
    pub coverage: f64,
    pub thresholds: Vec<Option<f32>>,
    /// Genuine and pseudo entries of `D_T` used in this round.
    pub labeled_genuine: usize,
    pub labeled_pseudo: usize,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub checkpoints: RoundCheckpoints,
}

/// Input of one round: its index and the labeled target set it trains on.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub round: usize,
    pub labeled: LabeledTargetSet,
}

pub struct RoundOutput {
    pub report: RoundReport,
    pub teacher_rl: ModelParams<f32>,
    pub teacher_sl: ModelParams<f32>,
    pub student: ModelParams<f32>,
    pub pseudo: PseudoLabeledSet,
    pub next: RoundState,
}

pub struct FrameworkOutcome {
    pub reports: Vec<RoundReport>,
    pub final_student: ModelParams<f32>,
}

/// Prepared data of one experiment: the (optionally style-transferred) source
/// set and the labeled validation set.
pub struct Experiment<'a> {
    bundle: &'a DatasetBundle,
    config: FrameworkConfig,
    source: Vec<ImageSample>,
    val: Vec<ImageSample>,
    out_dir: Option<PathBuf>,
}

fn round_dir(out: &Path, round: usize) -> PathBuf {
    out.join(format!("round{round}"))
}

/// Checkpoint path of one role inside a round directory.
pub fn checkpoint_path(out: &Path, round: usize, role: Role) -> PathBuf {
    round_dir(out, round).join(format!("{}.dmck", role.as_str()))
}

pub fn pseudo_path(out: &Path, round: usize) -> PathBuf {
    round_dir(out, round).join("unlabeled_pseudo.dmx1")
}

impl<'a> Experiment<'a> {
    pub fn new(bundle: &'a DatasetBundle, config: FrameworkConfig, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        if bundle.target_unlabeled.is_empty() {
            return Err(Error::EmptySet("unlabeled target set"));
        }
        let source = if config.style_transfer {
            let target_images: Vec<ImageSample> = bundle
                .target_labeled
                .iter()
                .chain(&bundle.target_unlabeled)
                .cloned()
                .collect();
            let stats = compute_lab_stats(&target_images)?;
            bundle
                .source_labeled
                .iter()
                .map(|s| lab_style_transfer(s, &stats))
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("style_transfer"))?
        } else {
            bundle.source_labeled.clone()
        };
        Ok(Experiment {
            bundle,
            config,
            source,
            val: bundle.validation_ground_truth(),
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    pub fn config(&self) -> &FrameworkConfig {
        &self.config
    }

    pub fn source(&self) -> &[ImageSample] {
        &self.source
    }

    pub fn validation(&self) -> &[ImageSample] {
        &self.val
    }

    pub fn initial_state(&self) -> Result<RoundState> {
        Ok(RoundState {
            round: 1,
            labeled: LabeledTargetSet::genuine(self.bundle.target_labeled.clone())?,
        })
    }

    /// Rebuilds the input of `round` from the pseudo set stored by the
    /// previous round.
    pub fn load_state(&self, round: usize) -> Result<RoundState> {
        let mut state = self.initial_state()?;
        if round > 1 {
            let out = self.out_dir.as_deref().ok_or_else(|| Error::config("out", "no output directory"))?;
            let (_, samples) = read_dataset(&pseudo_path(out, round - 1))?;
            let pseudo = PseudoLabeledSet {
                selected: Vec::new(),
                confidences: Vec::new(),
                samples,
                thresholds: Vec::new(),
                config: self.config.pseudo,
            };
            state.labeled = merge_into_labeled(&state.labeled, &pseudo)?;
            state.round = round;
        }
        Ok(state)
    }

    fn seeded(&self, schedule: &TrainSchedule, round: usize, stage: Stage) -> TrainSchedule {
        schedule.with_seed(stage_seed(self.config.master_seed, round, stage))
    }

    fn score(&self, params: &ModelParams<f32>) -> Result<ModelScore> {
        ModelScore::from_confusion(&distill::evaluate(params, &self.val)?)
    }

    fn save(&self, round: usize, params: &ModelParams<f32>) -> Result<Option<PathBuf>> {
        let Some(out) = &self.out_dir else { return Ok(None) };
        std::fs::create_dir_all(round_dir(out, round))?;
        let path = checkpoint_path(out, round, params.role);
        segnet::save_checkpoint(params, &path)?;
        Ok(Some(path))
    }

    fn save_pseudo(&self, round: usize, pseudo: &PseudoLabeledSet) -> Result<Option<PathBuf>> {
        let Some(out) = &self.out_dir else { return Ok(None) };
        std::fs::create_dir_all(round_dir(out, round))?;
        let path = pseudo_path(out, round);
        write_dataset(&pseudo.samples, self.bundle.num_classes, &path)?;
        Ok(Some(path))
    }

    fn val(&self) -> Option<&[ImageSample]> {
        Some(&self.val)
    }

    /// Trains both teachers of `round` on `(D_S, labeled)`.
    pub fn train_teachers(
        &self,
        state: &RoundState,
        previous: Option<(&ModelParams<f32>, &ModelParams<f32>)>,
    ) -> Result<(distill::TrainOutcome, distill::TrainOutcome)> {
        let r = state.round;
        let labeled = state.labeled.samples();
        let warm = previous.filter(|_| self.config.warm_start_teachers);
        let train = |kind: TeacherKind, stage: Stage, init: Option<&ModelParams<f32>>| {
            let sched = self.seeded(&self.config.teacher_schedule, r, stage);
            match init {
                Some(p) => distill::train_teacher_from(p.clone(), kind, &self.source, labeled, &sched, self.val()),
                None => distill::train_teacher(kind, &self.source, labeled, &sched, self.val()),
            }
            .map_err(|e| e.in_stage(format!("round {r}: {}", kind.role().as_str())))
        };
        let rl = train(TeacherKind::RegionLevel, Stage::TeacherRl, warm.map(|w| w.0))?;
        let sl = train(TeacherKind::SampleLevel, Stage::TeacherSl, warm.map(|w| w.1))?;
        Ok((rl, sl))
    }

    /// Distils the two teachers into a fresh student for `round`.
    pub fn distill(&self, state: &RoundState, teachers: Teachers<'_>) -> Result<distill::TrainOutcome> {
        let r = state.round;
        let genuine;
        let labeled = if self.config.student_ce_genuine_only {
            genuine = state.labeled.genuine_samples();
            &genuine[..]
        } else {
            state.labeled.samples()
        };
        let sched = self.seeded(&self.config.student_schedule, r, Stage::Student);
        distill::train_student(teachers, labeled, &self.bundle.target_unlabeled, &sched, self.config.kd, self.val())
            .map_err(|e| e.in_stage(format!("round {r}: student")))
    }

    fn pseudo_label(&self, round: usize, student: &ModelParams<f32>) -> Result<PseudoLabeledSet> {
        generate_pseudo_labels(student, &self.bundle.target_unlabeled, self.config.pseudo)
            .map_err(|e| e.in_stage(format!("round {round}: pseudo labels")))
    }

    /// One round of the framework: two teachers, the student, pseudo labels.
    pub fn run_round(
        &self,
        state: &RoundState,
        previous: Option<(&ModelParams<f32>, &ModelParams<f32>)>,
    ) -> Result<RoundOutput> {
        let r = state.round;
        let (rl, sl) = self.train_teachers(state, previous)?;
        let teachers = Teachers {
            region: &rl.params,
            sample: &sl.params,
        };
        let student = self.distill(state, teachers)?;
        let pseudo = self.pseudo_label(r, &student.params)?;
        let next = RoundState {
            round: r + 1,
            labeled: merge_into_labeled(&state.labeled, &pseudo)?,
        };
        let checkpoints = RoundCheckpoints {
            teacher_rl: self.save(r, &rl.params)?,
            teacher_sl: self.save(r, &sl.params)?,
            student: self.save(r, &student.params)?,
            pseudo: self.save_pseudo(r, &pseudo)?,
        };
        let report = RoundReport {
            round: r,
            teacher_rl: self.score(&rl.params)?,
            teacher_sl: self.score(&sl.params)?,
            ensemble: ModelScore::from_confusion(&distill::evaluate_ensemble(teachers, &self.val)?)?,
            student: self.score(&student.params)?,
            coverage: pseudo.coverage(),
            thresholds: pseudo.thresholds.clone(),
            labeled_genuine: state.labeled.count(LabelOrigin::Genuine),
            labeled_pseudo: state.labeled.count(LabelOrigin::Pseudo),
            curves: vec![
                (Role::TeacherRl.as_str().to_owned(), rl.curve),
                (Role::TeacherSl.as_str().to_owned(), sl.curve),
                (Role::Student.as_str().to_owned(), student.curve),
            ],
            checkpoints,
        };
        Ok(RoundOutput {
            report,
            teacher_rl: rl.params,
            teacher_sl: sl.params,
            student: student.params,
            pseudo,
            next,
        })
    }

    /// A vanilla self-training round: only the student is retrained, starting
    /// from `previous`, with plain CE on the pseudo-augmented set.
    pub fn run_vanilla_round(
        &self,
        state: &RoundState,
        previous: &ModelParams<f32>,
        teacher_report: &RoundReport,
    ) -> Result<(RoundReport, ModelParams<f32>, RoundState)> {
        let r = state.round;
        let sched = self.seeded(&self.config.student_schedule, r, Stage::VanillaStudent);
        let student = distill::train_supervised(
            state.labeled.samples(),
            &sched,
            Role::Student,
            Some(previous.clone()),
            self.val(),
        )
        .map_err(|e| e.in_stage(format!("round {r}: student")))?;
        let pseudo = self.pseudo_label(r, &student.params)?;
        let next = RoundState {
            round: r + 1,
            labeled: merge_into_labeled(&state.labeled, &pseudo)?,
        };
        let checkpoints = RoundCheckpoints {
            student: self.save(r, &student.params)?,
            pseudo: self.save_pseudo(r, &pseudo)?,
            ..teacher_report.checkpoints.clone()
        };
        let report = RoundReport {
            round: r,
            student: self.score(&student.params)?,
            coverage: pseudo.coverage(),
            thresholds: pseudo.thresholds.clone(),
            labeled_genuine: state.labeled.count(LabelOrigin::Genuine),
            labeled_pseudo: state.labeled.count(LabelOrigin::Pseudo),
            curves: vec![(Role::Student.as_str().to_owned(), student.curve)],
            checkpoints,
            ..teacher_report.clone()
        };
        Ok((report, student.params, next))
    }

    /// Source-only baseline: CE on the raw (untransferred) source images.
    pub fn source_only(&self) -> Result<(ModelScore, ModelParams<f32>)> {
        let sched = self.seeded(&self.config.teacher_schedule, 0, Stage::SourceOnly);
        let out = distill::train_supervised(&self.bundle.source_labeled, &sched, Role::Student, None, None)
            .map_err(|e| e.in_stage("source_only"))?;
        Ok((self.score(&out.params)?, out.params))
    }
}

/// Algorithm 1: `rounds` rounds of teachers → student → pseudo labels.
pub fn run_framework(bundle: &DatasetBundle, config: &FrameworkConfig, out_dir: Option<&Path>) -> Result<FrameworkOutcome> {
    let exp = Experiment::new(bundle, config.clone(), out_dir)?;
    let mut state = exp.initial_state()?;
    let mut reports = Vec::with_capacity(config.rounds);
    let mut last: Option<RoundOutput> = None;
    for _ in 0..config.rounds {
        let previous = last.as_ref().map(|o| (&o.teacher_rl, &o.teacher_sl));
        let out = exp.run_round(&state, previous)?;
        reports.push(out.report.clone());
        state = out.next.clone();
        last = Some(out);
    }
    Ok(FrameworkOutcome {
        reports,
        final_student: last.expect("rounds ≥ 1").student,
    })
}

/// Round 1 as in [`run_framework`], then student-only retraining on its own
/// pseudo labels.
pub fn run_vanilla_self_training(
    bundle: &DatasetBundle,
    config: &FrameworkConfig,
    out_dir: Option<&Path>,
) -> Result<FrameworkOutcome> {
    let exp = Experiment::new(bundle, config.clone(), out_dir)?;
    let first = exp.run_round(&exp.initial_state()?, None)?;
    continue_vanilla(&exp, first)
}

/// Vanilla rounds `2..=R` following an already computed framework round 1.
pub fn continue_vanilla(exp: &Experiment<'_>, first: RoundOutput) -> Result<FrameworkOutcome> {
    let mut reports = vec![first.report.clone()];
    let mut student = first.student;
    let mut state = first.next;
    for _ in 1..exp.config().rounds {
        let (report, next_student, next_state) = exp.run_vanilla_round(&state, &student, &first.report)?;
        reports.push(report);
        student = next_student;
        state = next_state;
    }
    Ok(FrameworkOutcome {
        reports,
        final_student: student,
    })
}
