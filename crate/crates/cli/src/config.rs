//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualmix::distill::{KdWeights, TrainSchedule};
use dualmix::selftrain::{FrameworkConfig, PseudoConfig};
use dualmix::synthdata::{DatasetConfig, DomainStyle};
use dualmix::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Framework,
    VanillaSt,
    TeachersOnly,
    DistillOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Framework => "framework",
            Mode::VanillaSt => "vanilla_st",
            Mode::TeachersOnly => "teachers_only",
            Mode::DistillOnly => "distill_only",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "framework" => Ok(Mode::Framework),
            "vanilla_st" => Ok(Mode::VanillaSt),
            "teachers_only" => Ok(Mode::TeachersOnly),
            "distill_only" => Ok(Mode::DistillOnly),
            _ => Err("expected framework, vanilla_st, teachers_only or distill_only".into()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_source: usize,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
    pub n_val: usize,
    pub data_seed: u64,
    pub target_gain: [f64; 3],
    pub target_offset: [f64; 3],
    pub target_blur: bool,
    pub target_noise: f64,
    pub target_saturation: f64,

    pub teacher_iters: usize,
    pub student_iters: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub eval_every: usize,
    pub batch_size: usize,

    pub lambda_kl: f64,
    pub lambda_ce: f64,
    pub rounds: usize,
    pub pseudo_portion: f64,
    pub pseudo_ceiling: f64,
    pub style_transfer: bool,
    pub student_ce_genuine_only: bool,
    pub warm_start_teachers: bool,

    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding `teacher_RL.dmck` and `teacher_SL.dmck` (distill_only).
    pub teacher_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let style = DomainStyle::target();
        let sched = TrainSchedule::new(8000, 0);
        let kd = KdWeights::default();
        let pseudo = PseudoConfig::default();
        RunConfig {
            n_source: data.n_source,
            n_target_labeled: data.n_target_labeled,
            n_target_unlabeled: data.n_target_unlabeled,
            n_val: data.n_val,
            data_seed: data.seed,
            target_gain: style.gain,
            target_offset: style.offset,
            target_blur: style.blur,
            target_noise: style.noise_sigma,
            target_saturation: style.saturation,
            teacher_iters: sched.total_iters,
            student_iters: sched.total_iters,
            base_lr: sched.base_lr,
            momentum: sched.momentum,
            weight_decay: sched.weight_decay,
            poly_power: sched.poly_power,
            eval_every: 2000,
            batch_size: sched.batch_size,
            lambda_kl: kd.lambda_kl,
            lambda_ce: kd.lambda_ce,
            rounds: 3,
            pseudo_portion: pseudo.portion,
            pseudo_ceiling: pseudo.ceiling,
            style_transfer: true,
            student_ce_genuine_only: false,
            warm_start_teachers: false,
            mode: Mode::Framework,
            seed: 0,
            out: PathBuf::from("runs/default"),
            teacher_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got {value:?}"))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::config(key, "expected three comma-separated numbers"));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

fn triple(v: [f64; 3]) -> String {
    format!("{}, {}, {}", v[0], v[1], v[2])
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_source" => self.n_source = parse(key, value)?,
            "n_target_labeled" => self.n_target_labeled = parse(key, value)?,
            "n_target_unlabeled" => self.n_target_unlabeled = parse(key, value)?,
            "n_val" => self.n_val = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "target_gain" => self.target_gain = parse_triple(key, value)?,
            "target_offset" => self.target_offset = parse_triple(key, value)?,
            "target_blur" => self.target_blur = parse_bool(key, value)?,
            "target_noise" => self.target_noise = parse(key, value)?,
            "target_saturation" => self.target_saturation = parse(key, value)?,
            "teacher_iters" => self.teacher_iters = parse(key, value)?,
            "student_iters" => self.student_iters = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lambda_kl" => self.lambda_kl = parse(key, value)?,
            "lambda_ce" => self.lambda_ce = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "pseudo_portion" => self.pseudo_portion = parse(key, value)?,
            "pseudo_ceiling" => self.pseudo_ceiling = parse(key, value)?,
            "style_transfer" => self.style_transfer = parse_bool(key, value)?,
            "student_ce_genuine_only" => self.student_ce_genuine_only = parse_bool(key, value)?,
            "warm_start_teachers" => self.warm_start_teachers = parse_bool(key, value)?,
            "mode" => self.mode = value.parse().map_err(|m: String| Error::config(key, m))?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "teacher_dir" => self.teacher_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in the file syntax.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("n_source", self.n_source.to_string());
        m.insert("n_target_labeled", self.n_target_labeled.to_string());
        m.insert("n_target_unlabeled", self.n_target_unlabeled.to_string());
        m.insert("n_val", self.n_val.to_string());
        m.insert("data_seed", self.data_seed.to_string());
        m.insert("target_gain", triple(self.target_gain));
        m.insert("target_offset", triple(self.target_offset));
        m.insert("target_blur", self.target_blur.to_string());
        m.insert("target_noise", self.target_noise.to_string());
        m.insert("target_saturation", self.target_saturation.to_string());
        m.insert("teacher_iters", self.teacher_iters.to_string());
        m.insert("student_iters", self.student_iters.to_string());
        m.insert("base_lr", self.base_lr.to_string());
        m.insert("momentum", self.momentum.to_string());
        m.insert("weight_decay", self.weight_decay.to_string());
        m.insert("poly_power", self.poly_power.to_string());
        m.insert("eval_every", self.eval_every.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("lambda_kl", self.lambda_kl.to_string());
        m.insert("lambda_ce", self.lambda_ce.to_string());
        m.insert("rounds", self.rounds.to_string());
        m.insert("pseudo_portion", self.pseudo_portion.to_string());
        m.insert("pseudo_ceiling", self.pseudo_ceiling.to_string());
        m.insert("style_transfer", self.style_transfer.to_string());
        m.insert("student_ce_genuine_only", self.student_ce_genuine_only.to_string());
        m.insert("warm_start_teachers", self.warm_start_teachers.to_string());
        m.insert("mode", self.mode.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("out", self.out.display().to_string());
        m.insert(
            "teacher_dir",
            self.teacher_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        m
    }

    /// The config in file syntax; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a flat config file, or the `config` object of a `run.json`,
    /// without validating it.
    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
            let map = v
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::config("config", "run.json has no config object"))?;
            for (k, val) in map {
                let s = val.as_str().ok_or_else(|| Error::config(k.as_str(), "expected a string"))?;
                cfg.set(k, s)?;
            }
        } else {
            cfg.apply_text(&text)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_source", self.n_source),
            ("n_target_labeled", self.n_target_labeled),
            ("n_target_unlabeled", self.n_target_unlabeled),
            ("n_val", self.n_val),
            ("teacher_iters", self.teacher_iters),
            ("student_iters", self.student_iters),
            ("eval_every", self.eval_every),
            ("batch_size", self.batch_size),
            ("rounds", self.rounds),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let ranged = [
            ("base_lr", self.base_lr, 0.0, f64::INFINITY, false),
            ("momentum", self.momentum, 0.0, 1.0, true),
            ("weight_decay", self.weight_decay, 0.0, f64::INFINITY, true),
            ("poly_power", self.poly_power, 0.0, f64::INFINITY, true),
            ("lambda_kl", self.lambda_kl, 0.0, f64::INFINITY, true),
            ("lambda_ce", self.lambda_ce, 0.0, f64::INFINITY, true),
            ("pseudo_portion", self.pseudo_portion, 0.0, 1.0, false),
            ("pseudo_ceiling", self.pseudo_ceiling, 0.0, 1.0, false),
        ];
        for (key, v, lo, hi, lo_inclusive) in ranged {
            let above = if lo_inclusive { v >= lo } else { v > lo };
            if !(above && v <= hi && v.is_finite()) {
                let open = if lo_inclusive { '[' } else { '(' };
                return Err(Error::config(key, format!("{v} is outside {open}{lo}, {hi}]")));
            }
        }
        self.dataset().validate().map_err(|e| match e {
            Error::Config { key, message } => {
                let key = match key.as_str() {
                    "gain" => "target_gain",
                    "noise_sigma" => "target_noise",
                    "saturation" => "target_saturation",
                    _ => "n_source",
                };
                Error::config(key, message)
            }
            other => other,
        })?;
        if self.mode == Mode::DistillOnly {
            let dir = self
                .teacher_dir
                .as_ref()
                .ok_or_else(|| Error::config("teacher_dir", "required in distill_only mode"))?;
            if !dir.is_dir() {
                return Err(Error::config("teacher_dir", format!("{} is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_source: self.n_source,
            n_target_labeled: self.n_target_labeled,
            n_target_unlabeled: self.n_target_unlabeled,
            n_val: self.n_val,
            seed: self.data_seed,
            target_style: DomainStyle {
                gain: self.target_gain,
                offset: self.target_offset,
                blur: self.target_blur,
                noise_sigma: self.target_noise,
                saturation: self.target_saturation,
            },
            ..DatasetConfig::default()
        }
    }

    fn schedule(&self, iters: usize) -> TrainSchedule {
        TrainSchedule {
            total_iters: iters,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            eval_every: self.eval_every.min(iters),
            rng_seed: 0,
            batch_size: self.batch_size,
        }
    }

    pub fn framework(&self) -> FrameworkConfig {
        FrameworkConfig {
            teacher_schedule: self.schedule(self.teacher_iters),
            student_schedule: self.schedule(self.student_iters),
            kd: KdWeights {
                lambda_kl: self.lambda_kl,
                lambda_ce: self.lambda_ce,
            },
            pseudo: PseudoConfig {
                portion: self.pseudo_portion,
                ceiling: self.pseudo_ceiling,
            },
            rounds: self.rounds,
            style_transfer: self.style_transfer,
            master_seed: self.seed,
            student_ce_genuine_only: self.student_ce_genuine_only,
            warm_start_teachers: self.warm_start_teachers,
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub no_style_transfer: bool,
    pub mode: Option<Mode>,
}

/// File (or defaults) first, then flags; validated last.
pub fn parse_config(path: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::read_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &flags.out {
        cfg.out = out.clone();
    }
    if let Some(r) = flags.rounds {
        cfg.rounds = r;
    }
    if flags.no_style_transfer {
        cfg.style_transfer = false;
    }
    if let Some(m) = flags.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}
