//! Shared test machinery: finite-difference gradient checks and brute-force
//! metric oracles.
#![allow(dead_code)]

use binopt::autograd::{BnStats, Tape, Var, WeightGradMode};
use binopt::binary::{BinarizeConfig, ForwardCtx};
use binopt::model::{ArchConfig, Network};
use binopt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-r, r]` kept at least `gap` away from the STE kinks at ±1.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-r..r);
            if (v.abs() - 1.0).abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps roundoff on near-zero
/// gradients from reading as relative error.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Builds `Σ f(inputs) ⊙ R` for a fixed random `R` and returns the scalar var.
fn weighted_loss(
    tape: &mut Tape,
    vars: &[Var],
    f: &dyn Fn(&mut Tape, &[Var]) -> binopt::Result<Var>,
    weights_seed: u64,
) -> Var {
    let out = f(tape, vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(weights_seed);
    let w = rand_tensor(&mut r, &shape, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod).unwrap()
}

/// Maximum relative error between reverse-mode gradients and central
/// differences over every element of every input.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> binopt::Result<Var>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = weighted_loss(&mut tape, &vars, f, seed ^ 0x5eed);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    let eval = |ins: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let l = weighted_loss(&mut t, &vs, f, seed ^ 0x5eed);
        t.value(l).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// A named op under test with input shapes.
pub struct OpCase {
    pub name: &'static str,
    pub elementwise: bool,
    pub inputs: Vec<Tensor>,
    pub f: Box<dyn Fn(&mut Tape, &[Var]) -> binopt::Result<Var>>,
}

/// Every differentiable tape op, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize], scale: f64| rand_tensor(&mut r, shape, scale);
    let labels = vec![0usize, 2, 1, 2];
    let bias_seed = seed;
    vec![
        OpCase {
            name: "add",
            elementwise: true,
            inputs: vec![t(&[3, 4], 2.0), t(&[3, 4], 2.0)],
            f: Box::new(|tp, v| tp.add(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            elementwise: true,
            inputs: vec![t(&[3, 4], 2.0), t(&[3, 4], 2.0)],
            f: Box::new(|tp, v| tp.mul(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            elementwise: true,
            inputs: vec![t(&[5], 2.0)],
            f: Box::new(|tp, v| tp.scale(v[0], -1.7)),
        },
        OpCase {
            name: "sum",
            elementwise: true,
            inputs: vec![t(&[2, 3], 2.0)],
            f: Box::new(|tp, v| tp.sum(v[0])),
        },
        OpCase {
            name: "reshape",
            elementwise: true,
            inputs: vec![t(&[2, 6], 2.0)],
            f: Box::new(|tp, v| tp.reshape(v[0], &[3, 4])),
        },
        OpCase {
            name: "clip",
            elementwise: true,
            inputs: vec![t(&[4, 5], 2.0)],
            f: Box::new(|tp, v| tp.clip(v[0])),
        },
        OpCase {
            name: "matmul",
            elementwise: false,
            inputs: vec![t(&[3, 4], 1.0), t(&[4, 2], 1.0)],
            f: Box::new(|tp, v| tp.matmul(v[0], v[1])),
        },
        OpCase {
            name: "add_row_bias",
            elementwise: false,
            inputs: vec![t(&[3, 4], 1.0), t(&[4], 1.0)],
            f: Box::new(|tp, v| tp.add_row_bias(v[0], v[1])),
        },
        OpCase {
            name: "conv2d_pad1",
            elementwise: false,
            inputs: vec![t(&[2, 2, 4, 4], 1.0), t(&[3, 2, 3, 3], 1.0)],
            f: Box::new(|tp, v| tp.conv2d(v[0], v[1], 1, 1)),
        },
        OpCase {
            name: "conv2d_stride2",
            elementwise: false,
            inputs: vec![t(&[2, 2, 5, 5], 1.0), t(&[2, 2, 3, 3], 1.0)],
            f: Box::new(|tp, v| tp.conv2d(v[0], v[1], 2, 0)),
        },
        OpCase {
            name: "batchnorm_train",
            elementwise: false,
            inputs: vec![t(&[4, 3, 2, 2], 2.0), t(&[3], 1.5), t(&[3], 1.0)],
            f: Box::new(|tp, v| {
                let mut s = BnStats::new(3);
                tp.batchnorm(v[0], v[1], v[2], 1e-5, true, &mut s)
            }),
        },
        OpCase {
            name: "batchnorm_eval",
            elementwise: false,
            inputs: vec![t(&[4, 3, 2, 2], 2.0), t(&[3], 1.5), t(&[3], 1.0)],
            f: Box::new(|tp, v| {
                let mut s = BnStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                    momentum: 0.1,
                };
                tp.batchnorm(v[0], v[1], v[2], 1e-5, false, &mut s)
            }),
        },
        OpCase {
            name: "softmax_cross_entropy",
            elementwise: false,
            inputs: vec![t(&[4, 3], 3.0)],
            f: Box::new(move |tp, v| tp.softmax_cross_entropy(v[0], &labels)),
        },
        OpCase {
            name: "clip_weights_scaled",
            elementwise: false,
            inputs: vec![t(&[3, 2, 2, 2], 1.5)],
            f: Box::new(move |tp, v| {
                let scales: Vec<f64> = (0..3).map(|i| 0.3 + 0.1 * (i as f64 + bias_seed as f64)).collect();
                tp.clip_weights(v[0], WeightGradMode::SteScaled, Some(&scales))
            }),
        },
        OpCase {
            name: "clip_weights_plain",
            elementwise: false,
            inputs: vec![t(&[3, 2, 2, 2], 1.5)],
            f: Box::new(|tp, v| tp.clip_weights(v[0], WeightGradMode::StePlain, None)),
        },
        OpCase {
            name: "avg_pool2d",
            elementwise: false,
            inputs: vec![t(&[2, 3, 4, 4], 2.0)],
            f: Box::new(|tp, v| tp.avg_pool2d(v[0], 2)),
        },
        OpCase {
            name: "global_avg_pool",
            elementwise: false,
            inputs: vec![t(&[2, 3, 3, 3], 2.0)],
            f: Box::new(|tp, v| tp.global_avg_pool(v[0])),
        },
    ]
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        in_channels: 2,
        height: 4,
        width: 4,
        num_classes: 3,
        channels: 3,
        blocks: 2,
        latent_init_bound: None,
    }
}

/// Max relative FD error of every parameter of the surrogate network
/// (sign → clip, binary weights → frozen scale · clip).
pub fn surrogate_network_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut net = Network::new(small_arch(), BinarizeConfig::BINARY, &mut r).unwrap();
    let x = rand_tensor(&mut r, &[4, 2, 4, 4], 1.5);
    let labels = vec![0usize, 1, 2, 1];
    let scales = net.frozen_scales();
    let loss_of = |net: &mut Network| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let ctx = ForwardCtx {
            training: true,
            surrogate: Some(scales.as_slice()),
        };
        let out = net.forward(&mut tape, &x, &ctx).unwrap();
        let l = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        (tape, out.params, l)
    };
    let (mut tape, params, loss) = loss_of(&mut net);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    let mut worst: f64 = 0.0;
    let n_params = net.params().len();
    for i in 0..n_params {
        let n = net.params()[i].numel();
        for j in 0..n {
            let orig = net.params()[i].data()[j];
            net.params_mut()[i].data_mut()[j] = orig + FD_STEP;
            let (t, _, l) = loss_of(&mut net);
            let up = t.value(l).item().unwrap();
            net.params_mut()[i].data_mut()[j] = orig - FD_STEP;
            let (t, _, l) = loss_of(&mut net);
            let down = t.value(l).item().unwrap();
            net.params_mut()[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[i][j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

// ---- brute-force metric oracles -------------------------------------------

pub fn oracle_cam(w: &Tensor) -> Vec<f64> {
    let f = w.shape()[0];
    let per: usize = w.shape()[1..].iter().product();
    let mut out = Vec::new();
    for c in 0..f {
        let mut s = 0.0;
        for k in 0..per {
            let v = w.data()[c * per + k];
            s += if v < 0.0 { -v } else { v };
        }
        out.push(s / per as f64);
    }
    out
}

pub fn oracle_sdam(cam: &[f64]) -> f64 {
    let n = cam.len() as f64;
    let mut mean = 0.0;
    for c in cam {
        mean += c;
    }
    mean /= n;
    let mut ss = 0.0;
    for c in cam {
        ss += (c - mean) * (c - mean);
    }
    (ss / n).sqrt()
}

fn sgn(v: f64) -> i32 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

pub fn oracle_flips(a: &Tensor, b: &Tensor) -> usize {
    let mut n = 0;
    for i in 0..a.numel() {
        if sgn(a.data()[i]) != sgn(b.data()[i]) {
            n += 1;
        }
    }
    n
}

pub fn oracle_saturation(a: &Tensor) -> f64 {
    let mut n = 0;
    for &v in a.data() {
        if v > 1.0 || v < -1.0 {
            n += 1;
        }
    }
    n as f64 / a.numel() as f64
}

/// Histogram by scanning explicit edges `lo + k·(hi − lo)/bins`.
pub fn oracle_histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let mut b = 0;
        for k in 1..bins {
            if v >= lo + k as f64 * width {
                b = k;
            }
        }
        counts[b] += 1;
    }
    counts
}

/// Random 4-D weight tensor with occasional exact zeros, ±0 and bin-edge values.
pub fn metric_tensor(r: &mut ChaCha8Rng) -> Tensor {
    let shape = [r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match r.gen_range(0..10) {
            0 => 0.0,
            1 => -0.0,
            2 => -2.0 + 0.05 * r.gen_range(0..=80) as f64,
            3 => if r.gen() { 1.0 } else { -1.0 },
            _ => r.gen_range(-2.5..2.5),
        })
        .collect();
    Tensor::new(&shape, data).unwrap()
}

/// One row of the gradient suite: what was checked, its worst error and bound.
pub struct GradResult {
    pub name: String,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn ok(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Every op plus the surrogate network over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<GradResult> {
    let mut out = Vec::new();
    for seed in seeds {
        for case in op_cases(seed) {
            out.push(GradResult {
                name: case.name.to_string(),
                seed,
                error: grad_check(&case.inputs, &*case.f, seed),
                tolerance: if case.elementwise { 1e-6 } else { 1e-4 },
            });
        }
        out.push(GradResult {
            name: "surrogate_network".into(),
            seed,
            error: surrogate_network_check(seed),
            tolerance: 1e-4,
        });
    }
    out
}

/// Worst disagreement of each diagnostic with its brute-force oracle over
/// `cases` random tensor pairs. Counting metrics must report exactly 0.
pub fn metric_oracle_suite(cases: usize, seed: u64) -> Vec<(&'static str, f64, f64)> {
    use binopt::diagnostics as d;
    let mut r = rng(seed);
    let mut worst = [0.0f64; 7];
    for _ in 0..cases {
        let before = metric_tensor(&mut r);
        let after_data: Vec<f64> = before
            .data()
            .iter()
            .map(|&v| match r.gen_range(0..4) {
                0 => -v,
                1 => v + r.gen_range(-0.5..0.5),
                2 => 0.0,
                _ => v,
            })
            .collect();
        let after = Tensor::new(before.shape(), after_data).unwrap();
        let n = before.numel() as f64;

        let cam = d::cam(&before);
        let cam_ref = oracle_cam(&before);
        let cam_err = cam.iter().zip(&cam_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst[0] = worst[0].max(cam_err);

        worst[1] = worst[1].max((d::sdam(&cam).unwrap() - oracle_sdam(&cam_ref)).abs());

        let flips = oracle_flips(&before, &after) as f64;
        let ff = d::ff_ratio(&[&before], &[&after]).unwrap();
        worst[2] = worst[2].max((ff - flips / n).abs());

        let snap = d::InitSnapshot::capture(&[&before]);
        let c2i = d::c2i_ratio(&snap, &[&after]).unwrap();
        worst[3] = worst[3].max((c2i - (1.0 - flips / n)).abs());

        worst[4] = worst[4].max((d::saturation_ratio(&after) - oracle_saturation(&after)).abs());

        let deltas = d::weight_deltas(&[&before], &[&after]).unwrap();
        let mut manual = before.clone();
        for (m, (a, b)) in manual.data_mut().iter_mut().zip(after.data().iter().zip(before.data())) {
            *m = a - b;
        }
        let ucam = &d::update_cam(&deltas)[0];
        let ucam_ref = oracle_cam(&manual);
        let ucam_err = ucam.iter().zip(&ucam_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst[5] = worst[5].max(ucam_err);

        let hist = d::weight_histogram(&[&before, &after]);
        let mut all = before.data().to_vec();
        all.extend_from_slice(after.data());
        let (lo, hi) = d::HIST_RANGE;
        let expect = oracle_histogram(&all, lo, hi, d::HIST_BINS);
        let mismatched = hist.counts.iter().zip(&expect).filter(|(a, b)| a != b).count();
        worst[6] = worst[6].max(mismatched as f64);
    }
    vec![
        ("cam", worst[0], 1e-12),
        ("sdam", worst[1], 1e-12),
        ("ff_ratio", worst[2], 0.0),
        ("c2i_ratio", worst[3], 0.0),
        ("saturation_ratio", worst[4], 0.0),
        ("update_cam", worst[5], 1e-12),
        ("weight_histogram", worst[6], 0.0),
    ]
}

// ---- optimizer analytics ----------------------------------------------------

use binopt::optim::{OptimizerConfig, OptimizerKind, OptimizerState};

/// Applies `grads` in order and returns the per-step updates `w_{t-1} − w_t`.
pub fn updates(config: OptimizerConfig, w0: &[f64], grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut state = OptimizerState::new(config, w0.len());
    let mut w = Tensor::from_vec(w0.to_vec());
    grads
        .iter()
        .map(|g| {
            let before = w.data().to_vec();
            state.step(&mut w, &Tensor::from_vec(g.clone())).unwrap();
            before.iter().zip(w.data()).map(|(b, a)| b - a).collect()
        })
        .collect()
}

/// Named analytic optimizer checks with a human-readable worst case.
pub fn optimizer_suite() -> Vec<(&'static str, bool, String)> {
    let mut out = Vec::new();
    let adam = OptimizerConfig::comparison_defaults(OptimizerKind::Adam);

    let gs: Vec<f64> = (-12..=12).map(|k| if k == 0 { 0.0 } else { (k as f64).signum() * 10f64.powf(k as f64 / 4.0) }).collect();
    let first = &updates(adam, &vec![0.3; gs.len()], &[gs.clone()])[0];
    let err = first
        .iter()
        .zip(&gs)
        .map(|(u, g)| (u.abs() - adam.lr * g.abs() / (g.abs() + adam.eps)).abs())
        .fold(0.0, f64::max);
    out.push(("adam_first_step", err <= 1e-12, format!("max abs err {err:.2e}")));

    let steps = 50;
    let displacement = |g: f64| -> f64 {
        updates(adam, &[0.0], &vec![vec![g]; steps]).iter().map(|u| u[0]).sum()
    };
    let reference = displacement(1.0);
    let rel = (-3..=3)
        .map(|e| ((displacement(10f64.powi(e)) - reference) / reference).abs())
        .fold(0.0, f64::max);
    out.push(("adam_scale_invariance", rel < 1e-3, format!("max rel diff {rel:.2e}")));

    let sgd = OptimizerConfig::comparison_defaults(OptimizerKind::Sgd);
    let sgd = OptimizerConfig { momentum: 0.0, ..sgd };
    let w0 = [0.5, -1.25, 3.0];
    let g = vec![0.7, -0.01, 42.0];
    let mut state = OptimizerState::new(sgd, 3);
    let mut w = Tensor::from_vec(w0.to_vec());
    state.step(&mut w, &Tensor::from_vec(g.clone())).unwrap();
    let exact = w.data().iter().zip(&w0).zip(&g).all(|((a, b), gi)| *a == b - sgd.lr * gi);
    out.push(("sgd_plain_step", exact, format!("w = {:?}", w.data())));

    let ams = OptimizerConfig::comparison_defaults(OptimizerKind::Amsgrad);
    let mut r = rng(3);
    let stream: Vec<Vec<f64>> = (0..400)
        .map(|t| (0..8).map(|i| r.gen_range(-1.0..1.0) * if (t / 50 + i) % 2 == 0 { 5.0 } else { 0.05 }).collect())
        .collect();
    let a = updates(adam, &[0.0; 8], &stream);
    let m = updates(ams, &[0.0; 8], &stream);
    let violations = a
        .iter()
        .flatten()
        .zip(m.iter().flatten())
        .filter(|(x, y)| y.abs() > x.abs() * (1.0 + 1e-12))
        .count();
    out.push(("amsgrad_bounded_by_adam", violations == 0, format!("{violations} violations")));

    let ada = OptimizerConfig::comparison_defaults(OptimizerKind::Adagrad);
    let u = updates(ada, &[0.0], &vec![vec![1.0]; 200]);
    let err = u
        .iter()
        .enumerate()
        .map(|(i, u)| ((u[0] - ada.lr / ((i + 1) as f64).sqrt()) / u[0]).abs())
        .fold(0.0, f64::max);
    out.push(("adagrad_lr_over_sqrt_t", err < 1e-9, format!("max rel err {err:.2e}")));
    out
}

// ---- pipeline fixtures --------------------------------------------------------

use binopt::config::TrainingConfig;

/// A seconds-scale training config; `extra` is merged over the defaults.
pub fn tiny_config(extra: serde_json::Value) -> TrainingConfig {
    let mut base = serde_json::json!({
        "dataset": {"type": "synthetic", "kind": "blobs", "n": 16, "noise": 0.2, "seed": 1, "classes": 3, "image_size": 4},
        "arch": {"channels": 4, "blocks": 2},
        "iterations": 24,
        "batch_size": 8,
        "phases": {"type": "one_step", "weight_decay": 1e-5},
        "seed": 3,
        "log_interval": 5
    });
    merge(&mut base, extra);
    TrainingConfig::from_json(&base.to_string()).unwrap()
}

pub fn merge(base: &mut serde_json::Value, extra: serde_json::Value) {
    match (base, extra) {
        (serde_json::Value::Object(b), serde_json::Value::Object(e)) => {
            for (k, v) in e {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, e) => *b = e,
    }
}
