//! Finite-difference instances for every primitive op and the full network,
//! in 64-bit mode. Shared by the gradient test and the acceptance target.

use dualmix::autodiff::{Tape, Var};
use dualmix::gradcheck::{check, sign_pattern, CheckResult};
use dualmix::ops::{self, ConvSpec};
use dualmix::segnet::{self, ModelParams, Role};
use dualmix::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-7;
const MAX_COORDS: usize = 48;

pub struct Instance {
    pub name: String,
    pub result: CheckResult,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64_slice(shape, &data).unwrap()
}

/// Values with `|x| ∈ [0.05, 1)` so nothing sits on a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn distribution(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let logits = rand_tensor(rng, &[c, h, w], -2.0, 2.0);
    ops::softmax_channel(&logits).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<u8> {
    let mut l: Vec<u8> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { 255 } else { rng.gen_range(0..c as u8) })
        .collect();
    l[0] = 0;
    l
}

fn coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        (0..MAX_COORDS).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Checks `build(inputs)` w.r.t. every input tensor.
fn op_instance<B>(name: String, inputs: Vec<Tensor<f64>>, build: B, rng: &mut ChaCha8Rng) -> Instance
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let value = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().enumerate().map(|(i, x)| tape.param(format!("p{i}"), x.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, x)| tape.param(format!("p{i}"), x.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut result = CheckResult::default();
    for k in 0..inputs.len() {
        let analytic = grads.get(&format!("p{k}")).unwrap().data().to_vec();
        let x = inputs[k].data().to_vec();
        let cs = coords(rng, x.len());
        let f = |probe: &[f64]| {
            let mut xs = inputs.clone();
            xs[k].data_mut().copy_from_slice(probe);
            (value(&xs), 0)
        };
        result = result.merge(check(f, &x, &analytic, &cs, STEP, FLOOR));
    }
    Instance { name, result }
}

fn conv_instances(rng: &mut ChaCha8Rng, out: &mut Vec<Instance>) {
    let specs = [
        ("3x3", 3, ConvSpec::new(1, 1, 1)),
        ("3x3 stride 2", 3, ConvSpec::new(2, 1, 1)),
        ("3x3 dilation 2", 3, ConvSpec::new(1, 2, 2)),
        ("3x3 dilation 4", 3, ConvSpec::new(1, 4, 4)),
        ("1x1", 1, ConvSpec::new(1, 1, 0)),
    ];
    for (label, k, spec) in specs {
        let x = rand_tensor(rng, &[2, 7, 6], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, k, k], -0.5, 0.5);
        let b = rand_tensor(rng, &[3], -0.5, 0.5);
        let probe = ops::conv2d(&x, &w, &b, spec).unwrap();
        let (c, h, wd) = probe.chw().unwrap();
        let target = distribution(rng, c, h, wd);
        out.push(op_instance(
            format!("conv2d {label}"),
            vec![x, w, b],
            move |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], spec)?;
                tape.kl_divergence(&target, y)
            },
            rng,
        ));
    }
}

fn elementwise_instances(rng: &mut ChaCha8Rng, out: &mut Vec<Instance>) {
    for i in 0..3 {
        let x = away_from_zero(rng, &[3, 4, 5]);
        let target = distribution(rng, 3, 4, 5);
        out.push(op_instance(
            format!("relu #{i}"),
            vec![x],
            move |tape, v| {
                let y = tape.relu(v[0]);
                tape.kl_divergence(&target, y)
            },
            rng,
        ));
    }
    for i in 0..2 {
        let a = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
        let target = distribution(rng, 2, 3, 3);
        out.push(op_instance(
            format!("add #{i}"),
            vec![a, b],
            move |tape, v| {
                let y = tape.add(v[0], v[1])?;
                tape.kl_divergence(&target, y)
            },
            rng,
        ));
    }
    for i in 0..2 {
        let a = rand_tensor(rng, &[3, 2, 4], -1.0, 1.0);
        let factor = rng.gen_range(-2.0..2.0);
        let target = distribution(rng, 3, 2, 4);
        out.push(op_instance(
            format!("scale #{i}"),
            vec![a],
            move |tape, v| {
                let y = tape.scale(v[0], factor);
                tape.kl_divergence(&target, y)
            },
            rng,
        ));
    }
    for i in 0..2 {
        let a = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
        let target = distribution(rng, 2, 3, 3);
        out.push(op_instance(
            format!("sum #{i}"),
            vec![a],
            move |tape, v| {
                let kl = tape.kl_divergence(&target, v[0])?;
                let s = tape.sum(v[0]);
                let s = tape.scale(s, 0.1);
                tape.add(kl, s)
            },
            rng,
        ));
    }
}

fn upsample_and_loss_instances(rng: &mut ChaCha8Rng, out: &mut Vec<Instance>) {
    for (i, (h, w, f)) in [(3, 4, 2), (1, 1, 2), (5, 2, 4)].into_iter().enumerate() {
        let x = rand_tensor(rng, &[2, h, w], -2.0, 2.0);
        let target = distribution(rng, 2, h * f, w * f);
        out.push(op_instance(
            format!("bilinear_upsample #{i} ({h}x{w}, x{f})"),
            vec![x],
            move |tape, v| {
                let y = tape.bilinear_upsample(v[0], f)?;
                tape.kl_divergence(&target, y)
            },
            rng,
        ));
    }
    for i in 0..3 {
        let c = 2 + i;
        let x = rand_tensor(rng, &[c, 3, 4], -3.0, 3.0);
        let l = labels(rng, c, 12);
        out.push(op_instance(
            format!("cross_entropy #{i} (C={c})"),
            vec![x],
            move |tape, v| tape.cross_entropy(v[0], &l),
            rng,
        ));
    }
    for i in 0..3 {
        let x = rand_tensor(rng, &[4, 3, 3], -3.0, 3.0);
        let target = distribution(rng, 4, 3, 3);
        out.push(op_instance(
            format!("kl_divergence #{i}"),
            vec![x],
            move |tape, v| tape.kl_divergence(&target, v[0]),
            rng,
        ));
    }
}

/// Network forward built from the raw ops, recording every ReLU input's sign.
fn reference_forward(p: &ModelParams<f64>, image: &Tensor<f64>, signs: &mut Vec<f64>) -> Tensor<f64> {
    let conv = |x: &Tensor<f64>, layer: &str, spec| {
        let w = p.get(&format!("{layer}.weight")).unwrap();
        let b = p.get(&format!("{layer}.bias")).unwrap();
        ops::conv2d(x, w, b, spec).unwrap()
    };
    let mut relu = |t: Tensor<f64>| {
        signs.extend_from_slice(t.data());
        ops::relu(&t)
    };
    let x = relu(conv(image, "stem1", ConvSpec::new(1, 1, 1)));
    let x = relu(conv(&x, "stem2", ConvSpec::new(2, 1, 1)));
    let mut ctx = conv(&x, "aspp_d1", ConvSpec::new(1, 1, 1));
    ctx.axpy(1.0, &conv(&x, "aspp_d2", ConvSpec::new(1, 2, 2)));
    ctx.axpy(1.0, &conv(&x, "aspp_d4", ConvSpec::new(1, 4, 4)));
    let x = relu(ctx);
    ops::bilinear_upsample(&conv(&x, "head", ConvSpec::new(1, 1, 0)), 2).unwrap()
}

#[derive(Clone, Copy)]
enum NetLoss {
    Ce,
    StudentKd,
    SampleSum,
}

fn net_instance(rng: &mut ChaCha8Rng, kind: NetLoss, i: usize) -> Instance {
    let c = 5;
    let (h, w) = (8, 6);
    let mut params = ModelParams::<f64>::init(rng.gen(), c, Role::Student).unwrap();
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            *t = rand_tensor(rng, t.shape(), -0.1, 0.1);
        }
    }
    let x1 = rand_tensor(rng, &[3, h, w], 0.0, 1.0);
    let x2 = rand_tensor(rng, &[3, h, w], 0.0, 1.0);
    let l1 = labels(rng, c, h * w);
    let l2 = labels(rng, c, h * w);
    let target = distribution(rng, c, h, w);

    let build = |tape: &mut Tape<f64>, p: &ModelParams<f64>| -> Var {
        let vars = segnet::register_params(tape, p);
        let a = tape.constant(x1.clone());
        let la = segnet::forward_with(tape, &vars, a).unwrap();
        let b = tape.constant(x2.clone());
        let lb = segnet::forward_with(tape, &vars, b).unwrap();
        match kind {
            NetLoss::Ce => tape.cross_entropy(la, &l1).unwrap(),
            NetLoss::StudentKd => {
                let kl = tape.kl_divergence(&target, la).unwrap();
                let kl = tape.scale(kl, 0.5);
                let ce = tape.cross_entropy(lb, &l2).unwrap();
                tape.add(kl, ce).unwrap()
            }
            NetLoss::SampleSum => {
                let ca = tape.cross_entropy(la, &l1).unwrap();
                let cb = tape.cross_entropy(lb, &l2).unwrap();
                tape.add(ca, cb).unwrap()
            }
        }
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, &params);
    let grads = tape.backward(loss).unwrap();

    let mut result = CheckResult::default();
    for k in 0..params.tensors().len() {
        let name = params.names()[k].clone();
        let analytic = grads.get(&name).unwrap().data().to_vec();
        let x = params.tensors()[k].data().to_vec();
        let n = if x.len() <= 8 { x.len() } else { 8 };
        let cs: Vec<usize> = (0..n).map(|j| if x.len() <= 8 { j } else { rng.gen_range(0..x.len()) }).collect();
        let f = |probe: &[f64]| {
            let mut p = params.clone();
            p.tensors_mut()[k].data_mut().copy_from_slice(probe);
            let mut tape = Tape::new();
            let loss = build(&mut tape, &p);
            let mut signs = Vec::new();
            reference_forward(&p, &x1, &mut signs);
            reference_forward(&p, &x2, &mut signs);
            (tape.value(loss).item(), sign_pattern(&signs))
        };
        result = result.merge(check(f, &x, &analytic, &cs, STEP, FLOOR));
    }
    let label = match kind {
        NetLoss::Ce => "CE",
        NetLoss::StudentKd => "0.5·KL + CE",
        NetLoss::SampleSum => "CE + CE",
    };
    Instance {
        name: format!("network #{i} ({label})"),
        result,
    }
}

/// Every instance of the suite, seeded.
pub fn run_suite(seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    conv_instances(&mut rng, &mut out);
    elementwise_instances(&mut rng, &mut out);
    upsample_and_loss_instances(&mut rng, &mut out);
    for (i, kind) in [NetLoss::Ce, NetLoss::StudentKd, NetLoss::SampleSum].into_iter().enumerate() {
        out.push(net_instance(&mut rng, kind, i));
    }
    out
}

/// The tape forward must agree with the op-by-op reference.
pub fn reference_matches(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ModelParams::<f64>::init(seed, 5, Role::TeacherRl).unwrap();
    let x = rand_tensor(&mut rng, &[3, 8, 6], 0.0, 1.0);
    let a = segnet::forward(&p, &x).unwrap();
    let b = reference_forward(&p, &x, &mut Vec::new());
    a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}
