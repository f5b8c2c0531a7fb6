use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dualmix::distill::{self, Teachers};
use dualmix::segnet::{self, Role};
use dualmix::selftrain::{self, checkpoint_path, Experiment, ModelScore, RoundReport, RoundState};
use dualmix::synthdata::{self, build_splits, write_dataset, DatasetBundle, CLASS_NAMES};
use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Fixed metrics.csv header.
pub fn metrics_header() -> String {
    let mut h = String::from("round,stage,model,seed,miou");
    for name in CLASS_NAMES {
        write!(h, ",iou_{name}").unwrap();
    }
    h
}

/// One line of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub round: usize,
    pub stage: &'static str,
    pub model: &'static str,
    pub seed: u64,
    pub score: ModelScore,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let mut line = format!(
            "{},{},{},{},{:.6}",
            self.round, self.stage, self.model, self.seed, self.score.miou
        );
        for iou in &self.score.per_class {
            match iou {
                Some(v) => write!(line, ",{v:.6}").unwrap(),
                None => line.push(','),
            }
        }
        line
    }
}

fn framework_rows(report: &RoundReport, seed: u64, vanilla_round: bool) -> Vec<MetricRow> {
    let row = |stage, model, score: &ModelScore| MetricRow {
        round: report.round,
        stage,
        model,
        seed,
        score: score.clone(),
    };
    if vanilla_round {
        return vec![row("self_train", Role::Student.as_str(), &report.student)];
    }
    vec![
        row("teachers", Role::TeacherRl.as_str(), &report.teacher_rl),
        row("teachers", Role::TeacherSl.as_str(), &report.teacher_sl),
        row("teachers", "ensemble", &report.ensemble),
        row("distill", Role::Student.as_str(), &report.student),
    ]
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: std::collections::BTreeMap<&'static str, String>,
    mode: Mode,
    student_init: &'static str,
    teacher_init: &'static str,
    rows: &'a [MetricRow],
    reports: &'a [RoundReport],
}

pub struct RunSummary {
    pub rows: Vec<MetricRow>,
    pub reports: Vec<RoundReport>,
}

fn write_outputs(cfg: &RunConfig, rows: &[MetricRow], reports: &[RoundReport]) -> Result<(), CliError> {
    let mut csv = metrics_header();
    csv.push('\n');
    for r in rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(cfg.out.join(METRICS_FILE), csv).map_err(dualmix::Error::from)?;
    let record = RunRecord {
        config: cfg.entries(),
        mode: cfg.mode,
        student_init: "fresh random init every round",
        teacher_init: if cfg.warm_start_teachers {
            "warm start from previous round"
        } else {
            "fresh random init every round"
        },
        rows,
        reports,
    };
    let json = serde_json::to_string_pretty(&record).expect("run record serializes");
    fs::write(cfg.out.join(RUN_FILE), json).map_err(dualmix::Error::from)?;
    Ok(())
}

/// Writes the four splits as DMX1 files; validation labels are included.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let bundle = build_splits(&cfg.dataset())?;
    fs::create_dir_all(&cfg.out).map_err(dualmix::Error::from)?;
    let val = bundle.validation_ground_truth();
    let splits: [(&str, &[synthdata::ImageSample]); 4] = [
        ("source_labeled", &bundle.source_labeled),
        ("target_labeled", &bundle.target_labeled),
        ("target_unlabeled", &bundle.target_unlabeled),
        ("target_val", &val),
    ];
    let mut paths = Vec::new();
    for (name, samples) in splits {
        let path = cfg.out.join(format!("{name}.dmx1"));
        write_dataset(samples, bundle.num_classes, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn teachers_only(cfg: &RunConfig, exp: &Experiment<'_>, state: &RoundState) -> Result<Vec<MetricRow>, CliError> {
    let (rl, sl) = exp.train_teachers(state, None)?;
    fs::create_dir_all(cfg.out.join("round1")).map_err(dualmix::Error::from)?;
    for p in [&rl.params, &sl.params] {
        segnet::save_checkpoint(p, &checkpoint_path(&cfg.out, 1, p.role))?;
    }
    let val = exp.validation();
    let score = |cm: dualmix::metrics::ConfusionMatrix| ModelScore::from_confusion(&cm);
    let teachers = Teachers {
        region: &rl.params,
        sample: &sl.params,
    };
    let row = |model, score| MetricRow {
        round: 1,
        stage: "teachers",
        model,
        seed: cfg.seed,
        score,
    };
    Ok(vec![
        row(Role::TeacherRl.as_str(), score(distill::evaluate(&rl.params, val)?)?),
        row(Role::TeacherSl.as_str(), score(distill::evaluate(&sl.params, val)?)?),
        row("ensemble", score(distill::evaluate_ensemble(teachers, val)?)?),
    ])
}

fn distill_only(cfg: &RunConfig, exp: &Experiment<'_>, state: &RoundState) -> Result<Vec<MetricRow>, CliError> {
    let dir = cfg.teacher_dir.as_ref().expect("validated");
    let load = |role: Role| segnet::load_checkpoint(&dir.join(format!("{}.dmck", role.as_str())), role);
    let rl = load(Role::TeacherRl)?;
    let sl = load(Role::TeacherSl)?;
    let student = exp.distill(
        state,
        Teachers {
            region: &rl,
            sample: &sl,
        },
    )?;
    fs::create_dir_all(cfg.out.join("round1")).map_err(dualmix::Error::from)?;
    segnet::save_checkpoint(&student.params, &checkpoint_path(&cfg.out, 1, Role::Student))?;
    Ok(vec![MetricRow {
        round: 1,
        stage: "distill",
        model: Role::Student.as_str(),
        seed: cfg.seed,
        score: ModelScore::from_confusion(&distill::evaluate(&student.params, exp.validation())?)?,
    }])
}

/// Runs the configured mode and writes checkpoints, metrics.csv, run.json.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let bundle = build_splits(&cfg.dataset())?;
    run_on_bundle(cfg, &bundle)
}

pub fn run_on_bundle(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<RunSummary, CliError> {
    fs::create_dir_all(&cfg.out).map_err(dualmix::Error::from)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text()).map_err(dualmix::Error::from)?;
    let fw = cfg.framework();
    let (rows, reports) = match cfg.mode {
        Mode::Framework | Mode::VanillaSt => {
            let outcome = if cfg.mode == Mode::Framework {
                selftrain::run_framework(bundle, &fw, Some(&cfg.out))?
            } else {
                selftrain::run_vanilla_self_training(bundle, &fw, Some(&cfg.out))?
            };
            let vanilla = cfg.mode == Mode::VanillaSt;
            let rows = outcome
                .reports
                .iter()
                .flat_map(|r| framework_rows(r, cfg.seed, vanilla && r.round > 1))
                .collect();
            (rows, outcome.reports)
        }
        Mode::TeachersOnly | Mode::DistillOnly => {
            let exp = Experiment::new(bundle, fw, Some(&cfg.out))?;
            let state = exp.initial_state()?;
            let rows = if cfg.mode == Mode::TeachersOnly {
                teachers_only(cfg, &exp, &state)?
            } else {
                distill_only(cfg, &exp, &state)?
            };
            (rows, Vec::new())
        }
    };
    write_outputs(cfg, &rows, &reports)?;
    Ok(RunSummary { rows, reports })
}

/// Per-class IoU and mIoU of one checkpoint on one dataset file.
pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<String, CliError> {
    let params = segnet::load_checkpoint(checkpoint, Role::Student)?;
    let (header, samples) = synthdata::read_dataset(data)?;
    if header.num_classes != params.num_classes() {
        return Err(dualmix::Error::ClassMismatch(params.num_classes(), header.num_classes).into());
    }
    let cm = distill::evaluate(&params, &samples)?;
    let score = ModelScore::from_confusion(&cm)?;
    let mut out = String::new();
    for (c, iou) in score.per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
        match iou {
            Some(v) => writeln!(out, "{name:<12} {v:.4}").unwrap(),
            None => writeln!(out, "{name:<12} -").unwrap(),
        }
    }
    writeln!(out, "{:<12} {:.4}", "mIoU", score.miou).unwrap();
    Ok(out)
}
