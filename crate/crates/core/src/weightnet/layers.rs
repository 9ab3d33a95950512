//! Dense layers, feature normalization and rectifiers with explicit backward passes.

use rand::Rng;

use super::tensor::{gemm, Mat};
use crate::error::{Error, Result};

/// Callback over named tensors: name, `[rows, cols]`, data.
pub type Visitor<'a> = dyn FnMut(&str, [usize; 2], &[f64]) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, [usize; 2], &mut [f64]) + 'a;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization uses batch statistics (and records them) or the running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Mat::from_vec(input, output, weight),
            bias,
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Mat::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = Mat::zeros(x.rows, self.output_dim());
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(1.0, x, false, &self.weight, false, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` if asked.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear, need_dx: bool) -> Option<Mat> {
        gemm(1.0, x, true, dy, false, 1.0, &mut grad.weight);
        for r in 0..dy.rows {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = Mat::zeros(x.rows, x.cols);
            gemm(1.0, dy, false, &self.weight, true, 0.0, &mut dx);
            dx
        })
    }
}

/// Per-channel normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn zeros(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![0.0; channels],
        }
    }

    pub fn forward(&self, x: &Mat, mode: Mode) -> (Mat, Option<BatchNormCache>) {
        let c = x.cols;
        match mode {
            Mode::Eval => {
                let mut y = x.clone();
                let scale: Vec<f64> = (0..c)
                    .map(|j| self.gamma[j] / (self.running_var[j] + BN_EPS).sqrt())
                    .collect();
                for r in 0..y.rows {
                    for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - self.running_mean[j]) * scale[j] + self.beta[j];
                    }
                }
                (y, None)
            }
            Mode::Train => {
                let n = x.rows as f64;
                let mut mean = vec![0.0; c];
                for r in 0..x.rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; c];
                for r in 0..x.rows {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = x.clone();
                let mut y = Mat::zeros(x.rows, c);
                for r in 0..x.rows {
                    let xr = xhat.row_mut(r);
                    for j in 0..c {
                        xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    }
                    let xr = &xhat.data[r * c..(r + 1) * c];
                    for (j, yj) in y.row_mut(r).iter_mut().enumerate() {
                        *yj = self.gamma[j] * xr[j] + self.beta[j];
                    }
                }
                (
                    y,
                    Some(BatchNormCache {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                    }),
                )
            }
        }
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Mat, grad: &mut BatchNorm) -> Mat {
        let c = dy.cols;
        let n = dy.rows as f64;
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for r in 0..dy.rows {
            let d = dy.row(r);
            let xh = cache.xhat.row(r);
            for j in 0..c {
                grad.gamma[j] += d[j] * xh[j];
                grad.beta[j] += d[j];
                let dxh = d[j] * self.gamma[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * xh[j];
            }
        }
        let mut dx = Mat::zeros(dy.rows, c);
        for r in 0..dy.rows {
            let d = dy.row(r);
            let xh = cache.xhat.row(r);
            let out = dx.row_mut(r);
            for j in 0..c {
                let dxh = d[j] * self.gamma[j];
                out[j] = cache.inv_std[j] / n * (n * dxh - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
            }
        }
        dx
    }

    pub fn update_running(&mut self, cache: &BatchNormCache, rows: usize) {
        let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
        for j in 0..self.gamma.len() {
            self.running_mean[j] =
                (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * cache.batch_mean[j];
            self.running_var[j] =
                (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * cache.batch_var[j] * unbias;
        }
    }
}

/// Linear map, optional normalization, optional rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Mat,
    norm: Option<BatchNormCache>,
    output: Mat,
    rectified: bool,
}

impl BlockCache {
    pub fn norm_cache(&self) -> Option<&BatchNormCache> {
        self.norm.as_ref()
    }

    /// Appends which rectifier units were active.
    pub fn push_mask(&self, out: &mut Vec<bool>) {
        if self.rectified {
            out.extend(self.output.data.iter().map(|v| *v > 0.0));
        }
    }
}

impl Block {
    pub fn forward(&self, x: &Mat, mode: Mode, record: bool) -> Result<(Mat, Option<BlockCache>)> {
        let mut y = self.linear.forward(x);
        let mut norm_cache = None;
        if let Some(bn) = &self.norm {
            let (out, cache) = bn.forward(&y, mode);
            y = out;
            norm_cache = cache;
        }
        // checked before the rectifier, which would turn NaN into 0
        if !y.is_finite() {
            return Err(Error::NumericalFault {
                layer: self.name.clone(),
                detail: "non-finite activation".into(),
            });
        }
        if self.relu {
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let cache = record.then(|| BlockCache {
            input: x.clone(),
            norm: norm_cache,
            output: y.clone(),
            rectified: self.relu,
        });
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Mat, grad: &mut Block, need_dx: bool) -> Option<Mat> {
        let mut d = dy.clone();
        if self.relu {
            for (g, o) in d.data.iter_mut().zip(&cache.output.data) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        if let (Some(bn), Some(bc)) = (&self.norm, &cache.norm) {
            let gbn = grad.norm.as_mut().expect("gradient block mirrors parameters");
            d = bn.backward(bc, &d, gbn);
        }
        self.linear.backward(&cache.input, &d, &mut grad.linear, need_dx)
    }
}

/// Stack of blocks applied row-wise (shared across points).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub blocks: Vec<Block>,
}

impl Mlp {
    /// Hidden layers get normalization (if enabled) and a rectifier; the last
    /// layer gets them only when `activate_last`.
    pub fn new<R: Rng>(
        name: &str,
        widths: &[usize],
        norm: bool,
        activate_last: bool,
        rng: &mut R,
    ) -> Self {
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let last = i + 2 == widths.len();
                let act = !last || activate_last;
                Block {
                    name: format!("{name}.{i}"),
                    linear: Linear::new(w[0], w[1], rng),
                    norm: (norm && act).then(|| BatchNorm::new(w[1])),
                    relu: act,
                }
            })
            .collect();
        Mlp { blocks }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    name: b.name.clone(),
                    linear: Linear::zeros(b.linear.input_dim(), b.linear.output_dim()),
                    norm: b.norm.as_ref().map(|n| BatchNorm::zeros(n.gamma.len())),
                    relu: b.relu,
                })
                .collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.linear.output_dim())
    }

    pub fn forward(&self, x: &Mat, mode: Mode, record: bool) -> Result<(Mat, Vec<BlockCache>)> {
        let mut caches = Vec::new();
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&h, mode, record)?;
            if let Some(c) = c {
                caches.push(c);
            }
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, caches: &[BlockCache], dy: &Mat, grad: &mut Mlp, need_dx: bool) -> Option<Mat> {
        let mut d = dy.clone();
        let n = self.blocks.len();
        for i in (0..n).rev() {
            let want = need_dx || i > 0;
            d = self.blocks[i].backward(&caches[i], &d, &mut grad.blocks[i], want)?;
        }
        Some(d)
    }

    pub fn update_running(&mut self, caches: &[BlockCache]) {
        for (b, c) in self.blocks.iter_mut().zip(caches) {
            if let (Some(bn), Some(nc)) = (b.norm.as_mut(), c.norm.as_ref()) {
                bn.update_running(nc, c.input.rows);
            }
        }
    }

    pub fn visit(&self, f: &mut Visitor<'_>) {
        for b in &self.blocks {
            f(&format!("{}.weight", b.name), b.linear.weight.shape(), &b.linear.weight.data);
            f(&format!("{}.bias", b.name), [1, b.linear.bias.len()], &b.linear.bias);
            if let Some(n) = &b.norm {
                f(&format!("{}.bn.gamma", b.name), [1, n.gamma.len()], &n.gamma);
                f(&format!("{}.bn.beta", b.name), [1, n.beta.len()], &n.beta);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        for b in &mut self.blocks {
            let shape = b.linear.weight.shape();
            f(&format!("{}.weight", b.name), shape, &mut b.linear.weight.data);
            let len = b.linear.bias.len();
            f(&format!("{}.bias", b.name), [1, len], &mut b.linear.bias);
            if let Some(n) = &mut b.norm {
                let len = n.gamma.len();
                f(&format!("{}.bn.gamma", b.name), [1, len], &mut n.gamma);
                f(&format!("{}.bn.beta", b.name), [1, len], &mut n.beta);
            }
        }
    }

    pub fn visit_buffers(&self, f: &mut Visitor<'_>) {
        for b in &self.blocks {
            if let Some(n) = &b.norm {
                f(&format!("{}.bn.running_mean", b.name), [1, n.running_mean.len()], &n.running_mean);
                f(&format!("{}.bn.running_var", b.name), [1, n.running_var.len()], &n.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut VisitorMut<'_>) {
        for b in &mut self.blocks {
            if let Some(n) = &mut b.norm {
                let len = n.running_mean.len();
                f(&format!("{}.bn.running_mean", b.name), [1, len], &mut n.running_mean);
                f(&format!("{}.bn.running_var", b.name), [1, len], &mut n.running_var);
            }
        }
    }
}
