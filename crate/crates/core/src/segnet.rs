//! The fixed toy segmentation network.
//!
//! ```text
//! image 3×H×W
//!   stem1  3→16, 3×3, pad 1            + ReLU
//!   stem2  16→32, 3×3, stride 2, pad 1 + ReLU      (H/2 × W/2)
//!   aspp_d1 + aspp_d2 + aspp_d4        + ReLU      (3×3, dilation = padding = 1, 2, 4)
//!   head   32→C, 1×1
//!   bilinear ×2                                    (C×H×W logits)
//! ```
//!
//! There is no normalization layer, so the forward pass of one image never
//! depends on anything but that image and the parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::Reader;
use crate::error::{Error, FormatError, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Scalar, Tensor};

const STEM1: ConvSpec = ConvSpec::new(1, 1, 1);
const STEM2: ConvSpec = ConvSpec::new(2, 1, 1);
const ASPP: [(&str, ConvSpec); 3] = [
    ("aspp_d1", ConvSpec::new(1, 1, 1)),
    ("aspp_d2", ConvSpec::new(1, 2, 2)),
    ("aspp_d4", ConvSpec::new(1, 4, 4)),
];
const HEAD: ConvSpec = ConvSpec::new(1, 1, 0);
const UPSAMPLE: usize = 2;

/// Which slot of the pipeline a model fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TeacherRl,
    TeacherSl,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::TeacherRl => "teacher_RL",
            Role::TeacherSl => "teacher_SL",
            Role::Student => "student",
        }
    }
}

/// `(name, shape)` of every parameter tensor, in storage order.
pub fn architecture(num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let layers: [(&str, usize, usize, usize); 6] = [
        ("stem1", 16, 3, 3),
        ("stem2", 32, 16, 3),
        ("aspp_d1", 32, 32, 3),
        ("aspp_d2", 32, 32, 3),
        ("aspp_d4", 32, 32, 3),
        ("head", num_classes, 32, 1),
    ];
    layers
        .iter()
        .flat_map(|&(name, c_out, c_in, k)| {
            [
                (format!("{name}.weight"), vec![c_out, c_in, k, k]),
                (format!("{name}.bias"), vec![c_out]),
            ]
        })
        .collect()
}

/// Total scalar parameter count for `num_classes` output classes.
pub fn parameter_count(num_classes: usize) -> usize {
    architecture(num_classes)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub role: Role,
    num_classes: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(seed: u64, num_classes: usize, role: Role) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = architecture(num_classes)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
                    Tensor::new(shape, data).unwrap()
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .unzip();
        Ok(ModelParams {
            role,
            num_classes,
            names,
            tensors,
        })
    }

    /// Builds a model from tensors in [`architecture`] order, checking shapes.
    pub fn from_tensors(role: Role, num_classes: usize, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let arch = architecture(num_classes);
        if tensors.len() != arch.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                arch.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in arch.iter().zip(&tensors) {
            if t.shape() != &shape[..] {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(ModelParams {
            role,
            num_classes,
            names: arch.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            role: self.role,
            num_classes: self.num_classes,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    fn tensor(&self, layer: &str, part: &str) -> &Tensor<T> {
        self.get(&format!("{layer}.{part}")).expect("fixed architecture")
    }
}

fn check_input<T: Scalar>(image: &Tensor<T>) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "network input must be 3×H×W with even H, W ≥ 2, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Per-pixel logits `C×H×W` without recording anything.
pub fn forward<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(image)?;
    let conv = |x: &Tensor<T>, layer: &str, spec| ops::conv2d(x, params.tensor(layer, "weight"), params.tensor(layer, "bias"), spec);
    let x = ops::relu(&conv(image, "stem1", STEM1)?);
    let x = ops::relu(&conv(&x, "stem2", STEM2)?);
    let mut context: Option<Tensor<T>> = None;
    for (layer, spec) in ASPP {
        let branch = conv(&x, layer, spec)?;
        context = Some(match context {
            None => branch,
            Some(mut acc) => {
                acc.axpy(T::one(), &branch);
                acc
            }
        });
    }
    let x = ops::relu(&context.expect("three branches"));
    let logits = conv(&x, "head", HEAD)?;
    ops::bilinear_upsample(&logits, UPSAMPLE)
}

/// Tape slots of a model's parameters, registered once and shared by every
/// forward pass recorded in the same step.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl ParamVars {
    fn layer(&self, name: &str) -> (Var, Var) {
        let weight = format!("{name}.weight");
        let i = self.names.iter().position(|n| *n == weight).expect("fixed architecture");
        (self.vars[i], self.vars[i + 1])
    }
}

/// Registers every parameter on `tape` under its architecture name.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ParamVars {
    let vars = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| tape.param(n.clone(), t.clone()))
        .collect();
    ParamVars {
        vars,
        names: params.names.clone(),
    }
}

/// Records one forward pass using already registered parameters.
pub fn forward_with<T: Scalar>(tape: &mut Tape<T>, params: &ParamVars, image: Var) -> Result<Var> {
    check_input(tape.value(image))?;
    let (w, b) = params.layer("stem1");
    let x = tape.conv2d(image, w, b, STEM1)?;
    let x = tape.relu(x);
    let (w, b) = params.layer("stem2");
    let x = tape.conv2d(x, w, b, STEM2)?;
    let x = tape.relu(x);
    let mut context = None;
    for (name, spec) in ASPP {
        let (w, b) = params.layer(name);
        let branch = tape.conv2d(x, w, b, spec)?;
        context = Some(match context {
            None => branch,
            Some(acc) => tape.add(acc, branch)?,
        });
    }
    let x = tape.relu(context.expect("three branches"));
    let (w, b) = params.layer("head");
    let logits = tape.conv2d(x, w, b, HEAD)?;
    tape.bilinear_upsample(logits, UPSAMPLE)
}

/// Registers `params` and records a forward pass; returns the logits slot.
pub fn forward_on_tape<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, image: Var) -> Result<Var> {
    check_input(tape.value(image))?;
    let vars = register_params(tape, params);
    forward_with(tape, &vars, image)
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"DMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters in the `DMCK` layout.
pub fn encode_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * parameter_count(params.num_classes));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a `DMCK` checkpoint and verifies it against the fixed architecture.
/// The class count is taken from the head layer.
pub fn decode_checkpoint(bytes: &[u8], role: Role) -> Result<ModelParams<f32>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::InvalidField("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| FormatError::DimensionOverflow(format!("{name}: {shape:?}")))?;
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, shape, data));
    }
    r.finish()?;

    let num_classes = named
        .iter()
        .find(|(n, _, _)| n == "head.bias")
        .and_then(|(_, s, _)| s.first().copied())
        .ok_or_else(|| FormatError::Architecture("missing head.bias".into()))?;
    let arch = architecture(num_classes);
    if named.len() != arch.len() {
        return Err(FormatError::Architecture(format!(
            "expected {} tensors, found {}",
            arch.len(),
            named.len()
        )));
    }
    let mut tensors = Vec::with_capacity(arch.len());
    for ((want_name, want_shape), (name, shape, data)) in arch.iter().zip(named) {
        if &name != want_name || &shape != want_shape {
            return Err(FormatError::Architecture(format!(
                "expected {want_name} {want_shape:?}, found {name} {shape:?}"
            )));
        }
        tensors.push(Tensor::new(shape, data).map_err(|e| FormatError::Architecture(e.to_string()))?);
    }
    ModelParams::from_tensors(role, num_classes, tensors).map_err(|e| FormatError::Architecture(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, role: Role) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path)?;
    Ok(decode_checkpoint(&bytes, role)?)
}
