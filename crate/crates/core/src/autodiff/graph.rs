use super::gemm::{gemm, MatRef};
use super::{AutodiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2-D window op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// How `batch_norm2d` obtains its normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Per-channel statistics over batch and spatial dims.
    Train,
    /// Stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed in training mode. `var` is the
/// unbiased estimate, which is what running statistics track.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running batchnorm statistics with exponential momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &ChannelStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: f64 },
    Pow { input: Var, exponent: f64 },
    Clamp { input: Var, lo: f64, hi: f64 },
    Relu(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Gather { input: Var, indices: Vec<usize> },
    Conv2d { input: Var, weight: Var, window: Window },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations recorded in topological order.
///
/// Nodes can only reference earlier nodes, so the tape is acyclic by
/// construction and reverse index order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn conv_out(len: usize, kernel: usize, window: Window) -> Option<usize> {
    let padded = len + 2 * window.pad;
    (padded >= kernel && window.stride > 0).then(|| (padded - kernel) / window.stride + 1)
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    window: Window,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one batch item into a `patch x positions` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        let (s, pad) = (self.window.stride as isize, self.window.pad as isize);
        for c in 0..self.in_ch {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.oh {
                        let y = oy as isize * s - pad + i as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let xx = ox as isize * s - pad + j as isize;
                            *d = if xx < 0 || xx >= self.w as isize {
                                0.0
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        let (s, pad) = (self.window.stride as isize, self.window.pad as isize);
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.oh {
                        let y = oy as isize * s - pad + i as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, v) in src.iter().enumerate() {
                            let xx = ox as isize * s - pad + j as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<(), AutodiffError> {
        if self.shape(v).len() != rank {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: self.shape(v).to_vec(),
                expected: match rank {
                    1 => "rank 1",
                    2 => "rank 2",
                    4 => "rank 4",
                    _ => "different rank",
                },
            });
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                left: sx,
                right: sb,
            });
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(sx[1])
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine { input: x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(x, Op::Pow { input: x, exponent }, |v| v.powf(exponent))
    }

    /// Clamps into `[lo, hi]`; clamped elements pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { input: x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Row-wise softmax of a `[batch, classes]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.expect_rank("softmax", x, 2)?;
        let shape = self.shape(x).to_vec();
        let mut data = self.value(x).data().to_vec();
        if shape[1] > 0 {
            for row in data.chunks_mut(shape[1]) {
                softmax_in_place(row);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Picks `x[i, indices[i]]` from a `[batch, classes]` matrix.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        self.expect_rank("gather", x, 2)?;
        let shape = self.shape(x).to_vec();
        if indices.len() != shape[0] || indices.iter().any(|&i| i >= shape[1]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                left: shape,
                right: vec![indices.len()],
            });
        }
        let xs = self.value(x).data();
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| xs[r * shape[1] + c])
            .collect();
        let rg = self.needs(&[x]);
        let op = Op::Gather {
            input: x,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![indices.len()], data)?, op, rg))
    }

    /// Cross-correlation of `[b, c, h, w]` with `[o, c, kh, kw]`, zero padded.
    pub fn conv2d(&mut self, x: Var, weight: Var, window: Window) -> Result<Var, AutodiffError> {
        let geom = self.conv_geom(x, weight, window)?;
        let (patch, p) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; patch * p];
        let mut out = vec![0.0; geom.batch * geom.out_ch * p];
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let item = geom.in_ch * geom.h * geom.w;
        for b in 0..geom.batch {
            geom.im2col(&xs[b * item..(b + 1) * item], &mut cols);
            gemm(
                1.0,
                MatRef::row_major(ws, geom.out_ch, patch),
                MatRef::row_major(&cols, patch, p),
                0.0,
                &mut out[b * geom.out_ch * p..(b + 1) * geom.out_ch * p],
            );
        }
        let shape = vec![geom.batch, geom.out_ch, geom.oh, geom.ow];
        let rg = self.needs(&[x, weight]);
        let op = Op::Conv2d {
            input: x,
            weight,
            window,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    fn conv_geom(&self, x: Var, weight: Var, window: Window) -> Result<ConvGeom, AutodiffError> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv2d",
            left: sx.to_vec(),
            right: sw.to_vec(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch());
        }
        let oh = conv_out(sx[2], sw[2], window).ok_or_else(mismatch)?;
        let ow = conv_out(sx[3], sw[3], window).ok_or_else(mismatch)?;
        Ok(ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            h: sx[2],
            w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh,
            ow,
            window,
        })
    }

    /// Per-channel normalization of `[b, c, h, w]` followed by `gamma * xhat + beta`.
    ///
    /// In [`BatchNormMode::Train`] the returned statistics should be folded into
    /// the layer's [`RunningStats`].
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<ChannelStats>), AutodiffError> {
        self.expect_rank("batch_norm2d", x, 4)?;
        let shape = self.shape(x).to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "batch_norm2d",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let n = b * hw;
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = || (0..b).flat_map(|i| &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
                    let m = vals().sum::<f64>() / n as f64;
                    let v = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
                    .collect();
                let stats = ChannelStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "batch_norm2d",
                        left: shape,
                        right: vec![mean.len(), var.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..b {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for k in off..off + hw {
                    let h = (xs[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + bt[ch];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let op = Op::BatchNorm2d {
            input: x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: stats.is_some(),
        };
        Ok((self.push(Tensor::new(shape, out)?, op, rg), stats))
    }

    /// Max over `kernel x kernel` windows; padding never wins.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, window: Window) -> Result<Var, AutodiffError> {
        self.expect_rank("max_pool2d", x, 4)?;
        let shape = self.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let bad = || AutodiffError::InvalidShape {
            op: "max_pool2d",
            shape: shape.clone(),
            expected: "spatial dims at least the kernel size",
        };
        if kernel == 0 || window.pad >= kernel {
            return Err(bad());
        }
        let oh = conv_out(h, kernel, window).ok_or_else(bad)?;
        let ow = conv_out(w, kernel, window).ok_or_else(bad)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for i in 0..kernel {
                        let y = (oy * window.stride + i) as isize - window.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kernel {
                            let xx = (ox * window.stride + j) as isize - window.pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let k = base + y as usize * w + xx as usize;
                            if best_at == usize::MAX || xs[k] > best {
                                best = xs[k];
                                best_at = k;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let rg = self.needs(&[x]);
        let op = Op::MaxPool2d { input: x, argmax };
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, op, rg))
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.expect_rank("global_avg_pool", x, 4)?;
        let shape = self.shape(x).to_vec();
        let hw = shape[2] * shape[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw.max(1))
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![shape[0], shape[1]], data)?,
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |d| {
                    let dc = MatRef::row_major(g, m, n);
                    gemm(1.0, dc, MatRef::row_major(val(*b), k, n).t(), 1.0, d);
                });
                acc(*b, &mut |d| {
                    let dc = MatRef::row_major(g, m, n);
                    gemm(1.0, MatRef::row_major(val(*a), m, k).t(), dc, 1.0, d);
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                });
            }
            Op::Affine { input, scale } => acc(*input, &mut |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += g * scale;
                }
            }),
            Op::Pow { input, exponent } => acc(*input, &mut |d| {
                if *exponent == 0.0 {
                    return;
                }
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*input)) {
                    *d += g * exponent * x.powf(exponent - 1.0);
                }
            }),
            Op::Clamp { input, lo, hi } => acc(*input, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*input)) {
                    if x >= lo && x <= hi {
                        *d += g;
                    }
                }
            }),
            Op::Relu(input) => acc(*input, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*input)) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Log(input) => acc(*input, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*input)) {
                    *d += g / x;
                }
            }),
            Op::Softmax(input) => {
                let cols = self.shape(*input)[1];
                let y = node.value.data();
                acc(*input, &mut |d| {
                    for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::Sum(input) => acc(*input, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(input) => acc(*input, &mut |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }),
            Op::Gather { input, indices } => {
                let cols = self.shape(*input)[1];
                acc(*input, &mut |d| {
                    for (r, (&c, g)) in indices.iter().zip(g).enumerate() {
                        d[r * cols + c] += g;
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                window,
            } => {
                let geom = self.conv_geom(*input, *weight, *window).expect("validated in forward");
                let (patch, p) = (geom.patch(), geom.positions());
                let item = geom.in_ch * geom.h * geom.w;
                let out_item = geom.out_ch * p;
                let (xs, ws) = (val(*input), val(*weight));
                let mut cols = vec![0.0; patch * p];
                if self.nodes[weight.0].requires_grad {
                    acc(*weight, &mut |d| {
                        for b in 0..geom.batch {
                            geom.im2col(&xs[b * item..(b + 1) * item], &mut cols);
                            let dout = MatRef::row_major(&g[b * out_item..(b + 1) * out_item], geom.out_ch, p);
                            gemm(1.0, dout, MatRef::row_major(&cols, patch, p).t(), 1.0, d);
                        }
                    });
                }
                acc(*input, &mut |d| {
                    for b in 0..geom.batch {
                        let dout = MatRef::row_major(&g[b * out_item..(b + 1) * out_item], geom.out_ch, p);
                        gemm(1.0, MatRef::row_major(ws, geom.out_ch, patch).t(), dout, 0.0, &mut cols);
                        geom.col2im(&cols, &mut d[b * item..(b + 1) * item]);
                    }
                });
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*input);
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let n = (b * hw) as f64;
                let gam = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..b {
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        for k in off..off + hw {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_dy_xhat));
                acc(*beta, &mut |d| add_into(d, &sum_dy));
                acc(*input, &mut |d| {
                    for i in 0..b {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + hw {
                                d[k] += if *train {
                                    scale * (g[k] - sum_dy[ch] / n - xhat[k] * sum_dy_xhat[ch] / n)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { input, argmax } => acc(*input, &mut |d| {
                for (&k, g) in argmax.iter().zip(g) {
                    d[k] += g;
                }
            }),
            Op::GlobalAvgPool(input) => {
                let shape = self.shape(*input);
                let hw = shape[2] * shape[3];
                acc(*input, &mut |d| {
                    for (plane, g) in d.chunks_mut(hw.max(1)).zip(g) {
                        let s = g / hw as f64;
                        plane.iter_mut().for_each(|d| *d += s);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
