//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops append
//! nodes in execution order, so the node list is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the gradient is routed through `scale · sign(w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGradMode {
    /// `∂w_b/∂w_r = scale_f · 1[|w_r| ≤ 1]`
    #[default]
    SteScaled,
    /// `∂w_b/∂w_r = 1[|w_r| ≤ 1]`
    StePlain,
}

/// Running statistics for one batchnorm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SignSte(Var),
    Clip(Var),
    ScaledWeights {
        w: Var,
        scale: Vec<f64>,
        mode: WeightGradMode,
    },
    AvgPool2d(Var, usize),
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn inside_unit(v: f64) -> bool {
    v.abs() <= 1.0
}

/// Geometry of a 4-D activation tensor.
#[derive(Debug, Clone, Copy)]
struct Nchw {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn nchw(t: &Tensor, what: &str) -> Result<Nchw> {
    match *t.shape() {
        [n, c, h, w] => Ok(Nchw { n, c, h, w }),
        _ => Err(Error::Dimension(format!(
            "{what} expects a 4-D N×C×H×W tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient of `v`, or zeros when `v` received none.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    /// Drops every gradient buffer so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.backward_done = false;
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn out(&self, shape: &[usize], data: Vec<f64>, inputs: &[Var]) -> Result<Tensor> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(Tensor::new(shape, data)?.with_requires_grad(rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = self.out(self.value(a).shape(), data, &[a, b])?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = self.out(self.value(a).shape(), data, &[a, b])?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = self.out(self.value(a).shape(), data, &[a])?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let t = self.out(&[1], vec![s], &[a])?;
        Ok(self.push(t, Op::Sum(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let t = self.out(shape, data, &[a])?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, k2, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul expects 2-D operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {sa:?} · {sb:?}"
            )));
        }
        let mut data = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let t = self.out(&[m, n], data, &[a, b])?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `x[N×K] + b[K]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        let k = match (sx, sb) {
            (&[_, k], &[kb]) if k == kb => k,
            _ => {
                return Err(Error::Dimension(format!(
                    "row bias expects N×K and K, got {sx:?} and {sb:?}"
                )))
            }
        };
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % k])
            .collect();
        let t = self.out(sx, data, &[x, b])?;
        Ok(self.push(t, Op::AddRowBias(x, b)))
    }

    /// Zero-padded cross-correlation of `x[N×C×H×W]` with `w[F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = nchw(self.value(x), "conv2d input")?;
        let (f, kc, kh, kw) = match *self.value(w).shape() {
            [f, c, kh, kw] => (f, c, kh, kw),
            ref s => {
                return Err(Error::Dimension(format!(
                    "conv2d kernel must be F×C×kh×kw, got {s:?}"
                )))
            }
        };
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be ≥ 1".into()));
        }
        if kc != xs.c {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {:?}, kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if kh > xs.h + 2 * pad || kw > xs.w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{} (pad {pad})",
                xs.h + 2 * pad,
                xs.w + 2 * pad
            )));
        }
        let oh = (xs.h + 2 * pad - kh) / stride + 1;
        let ow = (xs.w + 2 * pad - kw) / stride + 1;
        let ckk = xs.c * kh * kw;
        let hw = oh * ow;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut cols = vec![0.0; xs.n * ckk * hw];
        let mut out = vec![0.0; xs.n * f * hw];
        for n in 0..xs.n {
            let col = &mut cols[n * ckk * hw..(n + 1) * ckk * hw];
            im2col(
                &xd[n * xs.c * xs.h * xs.w..(n + 1) * xs.c * xs.h * xs.w],
                xs,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                col,
            );
            gemm_acc(wd, col, &mut out[n * f * hw..(n + 1) * f * hw], f, ckk, hw);
        }
        let t = self.out(&[xs.n, f, oh, ow], out, &[x, w])?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Per-channel batch normalization over every axis except axis 1.
    ///
    /// In training mode batch statistics are used and `stats` is updated with
    /// momentum `stats.momentum` (unbiased variance); otherwise `stats` is used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        training: bool,
        stats: &mut BnStats,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "batchnorm needs at least N×C, got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if c == 0 {
            return Err(Error::Dimension("batchnorm over zero channels".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("batchnorm eps must be > 0, got {eps}")));
        }
        let inner: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(Error::Dimension(format!(
                    "batchnorm {name} has {} entries for {c} channels",
                    self.value(v).numel()
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm running stats sized {} for {c} channels",
                stats.mean.len()
            )));
        }
        let count = (n * inner) as f64;
        let xd = self.value(x).data();
        let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    for i in 0..inner {
                        s += xd[idx(b, ch, i)];
                    }
                }
                let mu = s / count;
                let mut ss = 0.0;
                for b in 0..n {
                    for i in 0..inner {
                        let d = xd[idx(b, ch, i)] - mu;
                        ss += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / count;
            }
            let m = stats.momentum;
            for ch in 0..c {
                let unbiased = if count > 1.0 {
                    var[ch] * count / (count - 1.0)
                } else {
                    var[ch]
                };
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * unbiased;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let k = idx(b, ch, i);
                    let h = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + bt[ch];
                }
            }
        }
        let t = self.out(&shape, out, &[x, gamma, beta])?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => {
                return Err(Error::Dimension(format!(
                    "cross-entropy logits must be N×K, got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} rows of logits",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Index(format!(
                "label {l} at row {i} out of range for {k} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let t = self.out(&[1], vec![loss / n as f64], &[logits])?;
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `sign(x)` forward, clip-derivative backward.
    pub fn sign_ste(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| sign(v)).collect();
        let t = self.out(self.value(x).shape(), data, &[x])?;
        Ok(self.push(t, Op::SignSte(x)))
    }

    /// `clip(−1, x, 1)`.
    pub fn clip(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.clamp(-1.0, 1.0))
            .collect();
        let t = self.out(self.value(x).shape(), data, &[x])?;
        Ok(self.push(t, Op::Clip(x)))
    }

    /// Channel-scaled sign binarization `scale_f · sign(w)` with STE backward.
    ///
    /// `scale` overrides the per-output-channel absolute mean when given.
    pub fn binarize_weights(
        &mut self,
        w: Var,
        mode: WeightGradMode,
        scale: Option<&[f64]>,
    ) -> Result<Var> {
        self.scaled_weights(w, mode, scale, sign)
    }

    /// Surrogate of [`Tape::binarize_weights`]: `scale_f · clip(w)` under
    /// `SteScaled`, plain `clip(w)` under `StePlain`.
    pub fn clip_weights(
        &mut self,
        w: Var,
        mode: WeightGradMode,
        scale: Option<&[f64]>,
    ) -> Result<Var> {
        match mode {
            WeightGradMode::SteScaled => {
                self.scaled_weights(w, mode, scale, |v| v.clamp(-1.0, 1.0))
            }
            WeightGradMode::StePlain => {
                let f = self.value(w).rows().0;
                let ones = vec![1.0; f];
                self.scaled_weights(w, mode, Some(&ones), |v| v.clamp(-1.0, 1.0))
            }
        }
    }

    fn scaled_weights(
        &mut self,
        w: Var,
        mode: WeightGradMode,
        scale: Option<&[f64]>,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let wt = self.value(w);
        let (rows, per) = wt.rows();
        let scale = match scale {
            Some(s) if s.len() == rows => s.to_vec(),
            Some(s) => {
                return Err(Error::Dimension(format!(
                    "{} scales for {rows} output channels",
                    s.len()
                )))
            }
            None => channel_abs_mean(wt.data(), rows, per),
        };
        let data = wt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| scale[i / per] * f(v))
            .collect();
        let t = self.out(wt.shape(), data, &[w])?;
        Ok(self.push(t, Op::ScaledWeights { w, scale, mode }))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = nchw(self.value(x), "avg_pool2d")?;
        if k == 0 || s.h % k != 0 || s.w % k != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2d window {k} does not tile {}×{}",
                s.h, s.w
            )));
        }
        let (oh, ow) = (s.h / k, s.w / k);
        let xd = self.value(x).data();
        let mut out = vec![0.0; s.n * s.c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for nc in 0..s.n * s.c {
            let plane = &xd[nc * s.h * s.w..(nc + 1) * s.h * s.w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += plane[(i * k + di) * s.w + j * k + dj];
                        }
                    }
                    out[(nc * oh + i) * ow + j] = acc * norm;
                }
            }
        }
        let t = self.out(&[s.n, s.c, oh, ow], out, &[x])?;
        Ok(self.push(t, Op::AvgPool2d(x, k)))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = nchw(self.value(x), "global_avg_pool")?;
        let hw = s.h * s.w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = self.out(&[s.n, s.c], out, &[x])?;
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n])?;
            }
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(vec![1.0])?;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let g = self.nodes[i].value.take_grad().expect("grad initialised");
            self.backprop_node(i, &g);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.rg(v) {
            return;
        }
        let node = &mut self.nodes[v.0];
        let mut g = node.value.take_grad().expect("grad initialised");
        f(&mut g, &node.value);
        node.value.set_grad(g).expect("grad length preserved");
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops are moved out while their inputs are updated, then put back.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |ga, _| add_into(ga, g));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.accumulate(*a, |ga, _| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gi * y;
                    }
                });
                self.accumulate(*b, |gb, _| {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(*a, |ga, _| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(*a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Reshape(a) => self.accumulate(*a, |ga, _| add_into(ga, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.accumulate(*a, |ga, _| gemm_a_bt_acc(g, &bv, ga, m, k, n));
                self.accumulate(*b, |gb, _| gemm_at_b_acc(&av, g, gb, m, k, n));
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(*x, |gx, _| add_into(gx, g));
                self.accumulate(*b, |gb, _| {
                    let k = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % k] += gi;
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let xs = nchw(self.value(*x), "conv2d").expect("recorded shape");
                let ws = self.value(*w).shape().to_vec();
                let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                let out_shape = self.nodes[i].value.shape().to_vec();
                let hw = out_shape[2] * out_shape[3];
                let ckk = xs.c * kh * kw;
                let wv = self.value(*w).data().to_vec();
                self.accumulate(*w, |gw, _| {
                    for n in 0..xs.n {
                        gemm_a_bt_acc(
                            &g[n * f * hw..(n + 1) * f * hw],
                            &cols[n * ckk * hw..(n + 1) * ckk * hw],
                            gw,
                            f,
                            ckk,
                            hw,
                        );
                    }
                });
                let (stride, pad) = (*stride, *pad);
                self.accumulate(*x, |gx, _| {
                    let mut gcol = vec![0.0; ckk * hw];
                    let plane = xs.c * xs.h * xs.w;
                    for n in 0..xs.n {
                        gcol.iter_mut().for_each(|v| *v = 0.0);
                        gemm_at_b_acc(&wv, &g[n * f * hw..(n + 1) * f * hw], &mut gcol, f, ckk, hw);
                        col2im_acc(
                            &gcol,
                            xs,
                            kh,
                            kw,
                            stride,
                            pad,
                            out_shape[2],
                            out_shape[3],
                            &mut gx[n * plane..(n + 1) * plane],
                        );
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for j in 0..inner {
                            let k = idx(b, ch, j);
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                let gam = self.value(*gamma).data().to_vec();
                let count = (n * inner) as f64;
                let training = *training;
                self.accumulate(*x, |gx, _| {
                    for b in 0..n {
                        for ch in 0..c {
                            let s = gam[ch] * inv_std[ch];
                            for j in 0..inner {
                                let k = idx(b, ch, j);
                                gx[k] += if training {
                                    s * (g[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                                } else {
                                    s * g[k]
                                };
                            }
                        }
                    }
                });
                self.accumulate(*gamma, |gg, _| add_into(gg, &sum_gx));
                self.accumulate(*beta, |gb, _| add_into(gb, &sum_g));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                self.accumulate(*logits, |gl, _| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::SignSte(a) | Op::Clip(a) => {
                self.accumulate(*a, |ga, input| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(input.data()) {
                        if inside_unit(*v) {
                            *x += gi;
                        }
                    }
                });
            }
            Op::ScaledWeights { w, scale, mode } => {
                let mode = *mode;
                self.accumulate(*w, |gw, input| {
                    let per = input.numel() / scale.len();
                    for (k, ((x, gi), v)) in gw.iter_mut().zip(g).zip(input.data()).enumerate() {
                        if inside_unit(*v) {
                            *x += match mode {
                                WeightGradMode::SteScaled => gi * scale[k / per],
                                WeightGradMode::StePlain => *gi,
                            };
                        }
                    }
                });
            }
            Op::AvgPool2d(x, k) => {
                let k = *k;
                let s = nchw(self.value(*x), "avg_pool2d").expect("recorded shape");
                let (oh, ow) = (s.h / k, s.w / k);
                let norm = 1.0 / (k * k) as f64;
                self.accumulate(*x, |gx, _| {
                    for nc in 0..s.n * s.c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gi = g[(nc * oh + i) * ow + j] * norm;
                                for di in 0..k {
                                    for dj in 0..k {
                                        gx[nc * s.h * s.w + (i * k + di) * s.w + j * k + dj] += gi;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = nchw(self.value(*x), "global_avg_pool").expect("recorded shape");
                let hw = s.h * s.w;
                self.accumulate(*x, |gx, _| {
                    for (plane, gi) in gx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|v| *v += gi / hw as f64);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-row mean of absolute values for a `rows × per` buffer.
pub(crate) fn channel_abs_mean(data: &[f64], rows: usize, per: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| data[r * per..(r + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    s: Nchw,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let hw = oh * ow;
    for c in 0..s.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * ow + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < s.h
                            && (jj as usize) < s.w
                        {
                            x[(c * s.h + ii as usize) * s.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    s: Nchw,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let hw = oh * ow;
    for c in 0..s.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= s.h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= s.w {
                            continue;
                        }
                        gx[(c * s.h + ii as usize) * s.w + jj as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}
