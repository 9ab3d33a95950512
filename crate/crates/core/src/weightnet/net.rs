//! The per-point weight predictor: aligned point features, a max-pooled
//! global descriptor and a shared head emitting one weight per point.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BlockCache, Mlp, Mode, Visitor, VisitorMut};
use super::tensor::{gemm, sigmoid, Mat};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Layer widths and switches. Input and output sizes are implied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetArch {
    /// Shared layers after the input transform; the last width is the local feature size.
    pub point: Vec<usize>,
    /// Shared layers before max-pooling; the last width is the global feature size.
    pub global: Vec<usize>,
    /// Hidden widths of the head; a final width-1 layer is appended.
    pub head: Vec<usize>,
    pub tnet_conv: Vec<usize>,
    pub tnet_fc: Vec<usize>,
    pub input_transform: bool,
    pub feature_transform: bool,
    pub batch_norm: bool,
    pub epsilon: f64,
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch {
            point: vec![64, 64],
            global: vec![128, 1024],
            head: vec![512, 256, 128],
            tnet_conv: vec![64, 128, 1024],
            tnet_fc: vec![512, 256],
            input_transform: true,
            feature_transform: true,
            batch_norm: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl NetArch {
    /// Reduced widths, same topology. Cheap enough for tests on one core.
    pub fn tiny() -> Self {
        NetArch {
            point: vec![8, 8],
            global: vec![16, 32],
            head: vec![16, 8, 8],
            tnet_conv: vec![8, 16, 32],
            tnet_fc: vec![16, 8],
            ..NetArch::default()
        }
    }

    /// Middle ground used for desk-scale training runs.
    pub fn small() -> Self {
        NetArch {
            point: vec![32, 32],
            global: vec![64, 128],
            head: vec![64, 32, 16],
            tnet_conv: vec![32, 64, 128],
            tnet_fc: vec![64, 32],
            ..NetArch::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("point", &self.point),
            ("global", &self.global),
            ("head", &self.head),
            ("tnet_conv", &self.tnet_conv),
            ("tnet_fc", &self.tnet_fc),
        ];
        for (name, widths) in lists {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(format!("arch.{name} needs at least one non-zero width")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("arch.epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn local_dim(&self) -> usize {
        *self.point.last().expect("validated")
    }

    pub fn global_dim(&self) -> usize {
        *self.global.last().expect("validated")
    }
}

/// Predicts a `dim × dim` alignment matrix from a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct TNet {
    pub dim: usize,
    pub conv: Mlp,
    pub fc: Mlp,
}

#[derive(Debug, Clone)]
struct TNetTrace {
    conv: Vec<BlockCache>,
    argmax: Vec<usize>,
    fc: Vec<BlockCache>,
}

impl TNet {
    fn new(name: &str, dim: usize, arch: &NetArch, rng: &mut ChaCha8Rng) -> Self {
        let mut conv_w = vec![dim];
        conv_w.extend(&arch.tnet_conv);
        let conv = Mlp::new(&format!("{name}.conv"), &conv_w, arch.batch_norm, true, rng);
        let mut fc_w = vec![*conv_w.last().unwrap()];
        fc_w.extend(&arch.tnet_fc);
        fc_w.push(dim * dim);
        let mut fc = Mlp::new(&format!("{name}.fc"), &fc_w, false, false, rng);
        let last = fc.blocks.last_mut().unwrap();
        last.linear.weight.data.iter_mut().for_each(|v| *v = 0.0);
        last.linear.bias = Mat::identity(dim).data;
        TNet { dim, conv, fc }
    }

    fn zeros_like(&self) -> Self {
        TNet {
            dim: self.dim,
            conv: self.conv.zeros_like(),
            fc: self.fc.zeros_like(),
        }
    }

    fn forward(&self, x: &Mat, offsets: &[usize], mode: Mode, record: bool) -> Result<(Vec<Mat>, Option<TNetTrace>)> {
        let (h, conv) = self.conv.forward(x, mode, record)?;
        let (pooled, argmax) = max_pool(&h, offsets);
        let (flat, fc) = self.fc.forward(&pooled, mode, record)?;
        let mats = (0..flat.rows)
            .map(|b| Mat::from_vec(self.dim, self.dim, flat.row(b).to_vec()))
            .collect();
        Ok((mats, record.then_some(TNetTrace { conv, argmax, fc })))
    }

    /// Returns the gradient with respect to the T-net input rows.
    fn backward(&self, trace: &TNetTrace, d_mats: &[Mat], rows: usize, grad: &mut TNet) -> Mat {
        let dd = self.dim * self.dim;
        let mut dflat = Mat::zeros(d_mats.len(), dd);
        for (b, m) in d_mats.iter().enumerate() {
            dflat.row_mut(b).copy_from_slice(&m.data);
        }
        let dpooled = self.fc.backward(&trace.fc, &dflat, &mut grad.fc, true).unwrap();
        let dh = unpool(&dpooled, &trace.argmax, rows);
        self.conv.backward(&trace.conv, &dh, &mut grad.conv, true).unwrap()
    }
}

/// Column-wise max over each row segment; ties go to the earliest row.
fn max_pool(x: &Mat, offsets: &[usize]) -> (Mat, Vec<usize>) {
    let segs = offsets.len() - 1;
    let mut out = Mat::zeros(segs, x.cols);
    let mut arg = vec![0usize; segs * x.cols];
    for s in 0..segs {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        out.row_mut(s).copy_from_slice(x.row(lo));
        arg[s * x.cols..(s + 1) * x.cols].iter_mut().for_each(|a| *a = lo);
        for r in lo + 1..hi {
            let row = x.row(r);
            for c in 0..x.cols {
                if row[c] > out.data[s * x.cols + c] {
                    out.data[s * x.cols + c] = row[c];
                    arg[s * x.cols + c] = r;
                }
            }
        }
    }
    (out, arg)
}

fn unpool(d: &Mat, argmax: &[usize], rows: usize) -> Mat {
    let mut out = Mat::zeros(rows, d.cols);
    for (i, &r) in argmax.iter().enumerate() {
        let c = i % d.cols;
        out.data[r * d.cols + c] += d.data[i];
    }
    out
}

/// Rows of each segment multiplied on the right by that segment's matrix.
fn apply_transforms(x: &Mat, mats: &[Mat], offsets: &[usize]) -> Mat {
    let d = mats[0].cols;
    let mut out = Mat::zeros(x.rows, d);
    for (s, m) in mats.iter().enumerate() {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        let xs = x.rows_slice(lo, hi);
        let mut ys = Mat::zeros(hi - lo, d);
        gemm(1.0, &xs, false, m, false, 0.0, &mut ys);
        out.data[lo * d..hi * d].copy_from_slice(&ys.data);
    }
    out
}

/// Backward of [`apply_transforms`]: adds into `d_mats` and returns `dL/dx`.
fn apply_transforms_backward(x: &Mat, mats: &[Mat], offsets: &[usize], dy: &Mat, d_mats: &mut [Mat]) -> Mat {
    let mut dx = Mat::zeros(x.rows, x.cols);
    for (s, m) in mats.iter().enumerate() {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        let xs = x.rows_slice(lo, hi);
        let dys = dy.rows_slice(lo, hi);
        gemm(1.0, &xs, true, &dys, false, 1.0, &mut d_mats[s]);
        let mut dxs = Mat::zeros(hi - lo, x.cols);
        gemm(1.0, &dys, false, m, true, 0.0, &mut dxs);
        dx.data[lo * x.cols..hi * x.cols].copy_from_slice(&dxs.data);
    }
    dx
}

/// Network output for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNetOutput {
    /// One weight per input point, in `(ε, 1 + ε]`.
    pub weights: Vec<f64>,
    pub input_transform: Option<Mat>,
    pub feature_transform: Option<Mat>,
    pub global_feature: Vec<f64>,
    pub local_features: Mat,
}

/// Intermediate values kept by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    offsets: Vec<usize>,
    input: Mat,
    input_tnet: Option<TNetTrace>,
    a1: Vec<Mat>,
    point: Vec<BlockCache>,
    h1: Mat,
    feature_tnet: Option<TNetTrace>,
    a2: Vec<Mat>,
    local: Mat,
    global: Vec<BlockCache>,
    argmax: Vec<usize>,
    head: Vec<BlockCache>,
    sig: Vec<f64>,
}

/// Discrete choices made by a forward pass: rectifier masks and max-pool winners.
/// Two passes with equal patterns lie on the same smooth piece of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub masks: Vec<bool>,
    pub winners: Vec<usize>,
}

impl Trace {
    pub fn pattern(&self) -> ActivationPattern {
        let mut masks = Vec::new();
        let mut winners = Vec::new();
        let mut tnet = |t: &Option<TNetTrace>, masks: &mut Vec<bool>| {
            if let Some(t) = t {
                t.conv.iter().chain(&t.fc).for_each(|c| c.push_mask(masks));
                winners.extend(&t.argmax);
            }
        };
        tnet(&self.input_tnet, &mut masks);
        self.point.iter().for_each(|c| c.push_mask(&mut masks));
        tnet(&self.feature_tnet, &mut masks);
        self.global.iter().chain(&self.head).for_each(|c| c.push_mask(&mut masks));
        winners.extend(&self.argmax);
        ActivationPattern { masks, winners }
    }
}

/// Trainable parameters. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNet {
    pub arch: NetArch,
    pub input_tnet: Option<TNet>,
    pub point: Mlp,
    pub feature_tnet: Option<TNet>,
    pub global: Mlp,
    pub head: Mlp,
}

impl WeightNet {
    pub fn init_params(arch: &NetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_tnet = arch
            .input_transform
            .then(|| TNet::new("input_tnet", 3, arch, &mut rng));
        let mut pw = vec![3];
        pw.extend(&arch.point);
        let point = Mlp::new("point", &pw, arch.batch_norm, true, &mut rng);
        let feature_tnet = arch
            .feature_transform
            .then(|| TNet::new("feature_tnet", arch.local_dim(), arch, &mut rng));
        let mut gw = vec![arch.local_dim()];
        gw.extend(&arch.global);
        let global = Mlp::new("global", &gw, arch.batch_norm, true, &mut rng);
        let mut hw = vec![arch.global_dim() + arch.local_dim()];
        hw.extend(&arch.head);
        hw.push(1);
        let head = Mlp::new("head", &hw, arch.batch_norm, false, &mut rng);
        Ok(WeightNet {
            arch: arch.clone(),
            input_tnet,
            point,
            feature_tnet,
            global,
            head,
        })
    }

    /// Same shapes, every parameter and buffer zero.
    pub fn zeros_like(&self) -> Self {
        WeightNet {
            arch: self.arch.clone(),
            input_tnet: self.input_tnet.as_ref().map(TNet::zeros_like),
            point: self.point.zeros_like(),
            feature_tnet: self.feature_tnet.as_ref().map(TNet::zeros_like),
            global: self.global.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn mlps(&self) -> Vec<&Mlp> {
        let mut v = Vec::new();
        if let Some(t) = &self.input_tnet {
            v.extend([&t.conv, &t.fc]);
        }
        v.push(&self.point);
        if let Some(t) = &self.feature_tnet {
            v.extend([&t.conv, &t.fc]);
        }
        v.extend([&self.global, &self.head]);
        v
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = Vec::new();
        if let Some(t) = &mut self.input_tnet {
            v.push(&mut t.conv);
            v.push(&mut t.fc);
        }
        v.push(&mut self.point);
        if let Some(t) = &mut self.feature_tnet {
            v.push(&mut t.conv);
            v.push(&mut t.fc);
        }
        v.push(&mut self.global);
        v.push(&mut self.head);
        v
    }

    /// Trainable tensors in canonical order.
    pub fn visit(&self, f: &mut Visitor<'_>) {
        for m in self.mlps() {
            m.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        for m in self.mlps_mut() {
            m.visit_mut(f);
        }
    }

    /// Normalization running statistics in canonical order.
    pub fn visit_buffers(&self, f: &mut Visitor<'_>) {
        for m in self.mlps() {
            m.visit_buffers(f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut VisitorMut<'_>) {
        for m in self.mlps_mut() {
            m.visit_buffers_mut(f);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, _, d| {
            d.copy_from_slice(&flat[pos..pos + d.len()]);
            pos += d.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        self.visit_buffers(&mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }

    /// Inference on a single patch with frozen statistics.
    pub fn forward(&self, points: &[Vector3<f64>]) -> Result<WeightNetOutput> {
        let (mut outs, _) = self.run(&[points], Mode::Eval, false)?;
        Ok(outs.pop().unwrap())
    }

    /// Inference on several patches at once; patches may differ in size.
    pub fn forward_eval(&self, patches: &[&[Vector3<f64>]]) -> Result<Vec<WeightNetOutput>> {
        Ok(self.run(patches, Mode::Eval, false)?.0)
    }

    /// Training-mode pass: batch statistics are computed across all points of
    /// all patches and intermediate values are kept for [`WeightNet::backward`].
    pub fn forward_train(&self, patches: &[&[Vector3<f64>]]) -> Result<(Vec<WeightNetOutput>, Trace)> {
        let (outs, trace) = self.run(patches, Mode::Train, true)?;
        Ok((outs, trace.unwrap()))
    }

    fn run(&self, patches: &[&[Vector3<f64>]], mode: Mode, record: bool) -> Result<(Vec<WeightNetOutput>, Option<Trace>)> {
        if patches.is_empty() {
            return Err(Error::InvalidInput("no patches given".into()));
        }
        let mut offsets = vec![0];
        for p in patches {
            if p.len() < 2 {
                return Err(Error::InvalidInput(format!("patch needs at least 2 points, got {}", p.len())));
            }
            offsets.push(offsets.last().unwrap() + p.len());
        }
        let rows = *offsets.last().unwrap();
        let mut input = Mat::zeros(rows, 3);
        for (r, p) in patches.iter().flat_map(|p| p.iter()).enumerate() {
            input.row_mut(r).copy_from_slice(p.as_slice());
        }
        if !input.is_finite() {
            return Err(Error::InvalidInput("non-finite point coordinates".into()));
        }

        let (a1, input_trace) = match &self.input_tnet {
            Some(t) => t.forward(&input, &offsets, mode, record)?,
            None => (Vec::new(), None),
        };
        let aligned = if a1.is_empty() { input.clone() } else { apply_transforms(&input, &a1, &offsets) };
        let (h1, point) = self.point.forward(&aligned, mode, record)?;
        let (a2, feature_trace) = match &self.feature_tnet {
            Some(t) => t.forward(&h1, &offsets, mode, record)?,
            None => (Vec::new(), None),
        };
        let local = if a2.is_empty() { h1.clone() } else { apply_transforms(&h1, &a2, &offsets) };
        if !local.is_finite() {
            return Err(Error::NumericalFault {
                layer: "feature_transform".into(),
                detail: "non-finite aligned features".into(),
            });
        }
        let (g, global) = self.global.forward(&local, mode, record)?;
        let (pooled, argmax) = max_pool(&g, &offsets);

        let gd = pooled.cols;
        let ld = local.cols;
        let mut head_in = Mat::zeros(rows, gd + ld);
        for s in 0..patches.len() {
            for r in offsets[s]..offsets[s + 1] {
                let row = head_in.row_mut(r);
                row[..gd].copy_from_slice(pooled.row(s));
                row[gd..].copy_from_slice(local.row(r));
            }
        }
        let (z, head) = self.head.forward(&head_in, mode, record)?;
        let sig: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
        let eps = self.arch.epsilon;

        let outs = (0..patches.len())
            .map(|s| {
                let (lo, hi) = (offsets[s], offsets[s + 1]);
                WeightNetOutput {
                    weights: sig[lo..hi].iter().map(|v| v + eps).collect(),
                    input_transform: a1.get(s).cloned(),
                    feature_transform: a2.get(s).cloned(),
                    global_feature: pooled.row(s).to_vec(),
                    local_features: local.rows_slice(lo, hi),
                }
            })
            .collect();
        let trace = record.then_some(Trace {
            offsets,
            input,
            input_tnet: input_trace,
            a1,
            point,
            h1,
            feature_tnet: feature_trace,
            a2,
            local,
            global,
            argmax,
            head,
            sig,
        });
        Ok((outs, trace))
    }

    /// Reverse pass. `d_weights[s][j]` is `dL/dw` for point `j` of patch `s`;
    /// `d_a1`/`d_a2` hold `dL/dA` per patch (empty when the transform is off).
    /// Returns gradients shaped like `self`.
    pub fn backward(&self, trace: &Trace, d_weights: &[Vec<f64>], d_a1: &[Mat], d_a2: &[Mat]) -> WeightNet {
        let mut grad = self.zeros_like();
        let offsets = &trace.offsets;
        let rows = *offsets.last().unwrap();
        let segs = offsets.len() - 1;

        let mut dz = Mat::zeros(rows, 1);
        for s in 0..segs {
            for (j, r) in (offsets[s]..offsets[s + 1]).enumerate() {
                let sg = trace.sig[r];
                dz.data[r] = d_weights[s][j] * sg * (1.0 - sg);
            }
        }
        let dhead_in = self.head.backward(&trace.head, &dz, &mut grad.head, true).unwrap();
        let gd = self.arch.global_dim();
        let ld = trace.local.cols;
        let mut dpooled = Mat::zeros(segs, gd);
        let mut dlocal = Mat::zeros(rows, ld);
        for s in 0..segs {
            for r in offsets[s]..offsets[s + 1] {
                let row = dhead_in.row(r);
                for (acc, v) in dpooled.row_mut(s).iter_mut().zip(&row[..gd]) {
                    *acc += v;
                }
                dlocal.row_mut(r).copy_from_slice(&row[gd..]);
            }
        }
        let dg = unpool(&dpooled, &trace.argmax, rows);
        let dl2 = self.global.backward(&trace.global, &dg, &mut grad.global, true).unwrap();
        dlocal.data.iter_mut().zip(&dl2.data).for_each(|(a, b)| *a += b);

        let dh1 = match &self.feature_tnet {
            Some(t) => {
                let mut dmats: Vec<Mat> = d_a2.to_vec();
                if dmats.is_empty() {
                    dmats = vec![Mat::zeros(t.dim, t.dim); segs];
                }
                let mut dh1 = apply_transforms_backward(&trace.h1, &trace.a2, offsets, &dlocal, &mut dmats);
                let extra = t.backward(
                    trace.feature_tnet.as_ref().unwrap(),
                    &dmats,
                    rows,
                    grad.feature_tnet.as_mut().unwrap(),
                );
                dh1.data.iter_mut().zip(&extra.data).for_each(|(a, b)| *a += b);
                dh1
            }
            None => dlocal,
        };

        let need_dx = self.input_tnet.is_some();
        let daligned = self.point.backward(&trace.point, &dh1, &mut grad.point, need_dx);
        if let (Some(t), Some(da)) = (&self.input_tnet, daligned) {
            let mut dmats: Vec<Mat> = d_a1.to_vec();
            if dmats.is_empty() {
                dmats = vec![Mat::zeros(3, 3); segs];
            }
            let _ = apply_transforms_backward(&trace.input, &trace.a1, offsets, &da, &mut dmats);
            t.backward(
                trace.input_tnet.as_ref().unwrap(),
                &dmats,
                rows,
                grad.input_tnet.as_mut().unwrap(),
            );
        }
        grad
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        if let (Some(t), Some(tr)) = (&mut self.input_tnet, &trace.input_tnet) {
            t.conv.update_running(&tr.conv);
            t.fc.update_running(&tr.fc);
        }
        self.point.update_running(&trace.point);
        if let (Some(t), Some(tr)) = (&mut self.feature_tnet, &trace.feature_tnet) {
            t.conv.update_running(&tr.conv);
            t.fc.update_running(&tr.fc);
        }
        self.global.update_running(&trace.global);
        self.head.update_running(&trace.head);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_patch(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vector3<f64>> {
        (0..k)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)))
            .collect()
    }

    fn relu(v: f64) -> f64 {
        v.max(0.0)
    }

    /// Straight-line evaluation of one eval-mode layer, one point at a time.
    fn slow_layer(block: &super::super::layers::Block, x: &[f64]) -> Vec<f64> {
        let out = block.linear.output_dim();
        (0..out)
            .map(|o| {
                let mut s = block.linear.bias[o];
                for (i, xi) in x.iter().enumerate() {
                    s += xi * block.linear.weight.get(i, o);
                }
                if let Some(bn) = &block.norm {
                    s = (s - bn.running_mean[o]) / (bn.running_var[o] + super::super::layers::BN_EPS).sqrt()
                        * bn.gamma[o]
                        + bn.beta[o];
                }
                if block.relu {
                    s = relu(s);
                }
                s
            })
            .collect()
    }

    fn slow_mlp(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        mlp.blocks.iter().fold(x.to_vec(), |h, b| slow_layer(b, &h))
    }

    fn slow_tnet(t: &TNet, pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let feats: Vec<Vec<f64>> = pts.iter().map(|p| slow_mlp(&t.conv, p)).collect();
        let pooled: Vec<f64> = (0..feats[0].len())
            .map(|c| feats.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let flat = slow_mlp(&t.fc, &pooled);
        (0..t.dim).map(|r| flat[r * t.dim..(r + 1) * t.dim].to_vec()).collect()
    }

    fn times(x: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
        (0..m[0].len()).map(|c| x.iter().zip(m).map(|(xi, row)| xi * row[c]).sum()).collect()
    }

    fn perturb_stats(net: &mut WeightNet, rng: &mut ChaCha8Rng) {
        net.visit_buffers_mut(&mut |name, _, d| {
            for v in d.iter_mut() {
                *v = if name.ends_with("running_var") {
                    rng.random_range(0.5..2.0)
                } else {
                    rng.random_range(-0.2..0.2)
                };
            }
        });
        net.visit_mut(&mut |name, _, d| {
            if name.contains(".fc.") {
                for v in d.iter_mut() {
                    *v += rng.random_range(-0.05..0.05);
                }
            }
        });
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let arch = NetArch::tiny();
        assert_eq!(WeightNet::init_params(&arch, 7).unwrap(), WeightNet::init_params(&arch, 7).unwrap());
        assert_ne!(
            WeightNet::init_params(&arch, 7).unwrap().flat_params(),
            WeightNet::init_params(&arch, 8).unwrap().flat_params()
        );
    }

    #[test]
    fn fresh_transforms_are_identity_and_weights_bounded() {
        let net = WeightNet::init_params(&NetArch::tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = net.forward(&random_patch(&mut rng, 20)).unwrap();
        assert_eq!(out.input_transform.unwrap(), Mat::identity(3));
        assert_eq!(out.feature_transform.unwrap(), Mat::identity(8));
        let eps = net.arch.epsilon;
        assert!(out.weights.iter().all(|&w| w > eps && w <= 1.0 + eps));
    }

    #[test]
    fn matches_slow_reference() {
        let mut net = WeightNet::init_params(&NetArch::tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        perturb_stats(&mut net, &mut rng);
        let patch = random_patch(&mut rng, 17);
        let out = net.forward(&patch).unwrap();

        let pts: Vec<Vec<f64>> = patch.iter().map(|p| vec![p.x, p.y, p.z]).collect();
        let a1 = slow_tnet(net.input_tnet.as_ref().unwrap(), &pts);
        let aligned: Vec<Vec<f64>> = pts.iter().map(|p| times(p, &a1)).collect();
        let h1: Vec<Vec<f64>> = aligned.iter().map(|p| slow_mlp(&net.point, p)).collect();
        let a2 = slow_tnet(net.feature_tnet.as_ref().unwrap(), &h1);
        let local: Vec<Vec<f64>> = h1.iter().map(|h| times(h, &a2)).collect();
        let g: Vec<Vec<f64>> = local.iter().map(|l| slow_mlp(&net.global, l)).collect();
        let pooled: Vec<f64> = (0..g[0].len())
            .map(|c| g.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (j, l) in local.iter().enumerate() {
            let mut input = pooled.clone();
            input.extend(l);
            let z = slow_mlp(&net.head, &input)[0];
            let w = 1.0 / (1.0 + (-z).exp()) + net.arch.epsilon;
            assert!((w - out.weights[j]).abs() < 1e-12, "point {j}: {w} vs {}", out.weights[j]);
        }
        for (a, b) in pooled.iter().zip(&out.global_feature) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_and_duplicates() {
        let mut net = WeightNet::init_params(&NetArch::tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        perturb_stats(&mut net, &mut rng);
        let mut patch = random_patch(&mut rng, 12);
        patch.push(patch[4]);
        let out = net.forward(&patch).unwrap();
        assert_eq!(out.weights[4], out.weights[12]);

        let perm: Vec<usize> = (0..patch.len()).rev().collect();
        let shuffled: Vec<_> = perm.iter().map(|&i| patch[i]).collect();
        let out2 = net.forward(&shuffled).unwrap();
        assert_eq!(out.global_feature, out2.global_feature);
        for (j, &i) in perm.iter().enumerate() {
            assert!((out2.weights[j] - out.weights[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_eval_matches_single_patch() {
        let net = WeightNet::init_params(&NetArch::tiny(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_patch(&mut rng, 10);
        let b = random_patch(&mut rng, 14);
        let both = net.forward_eval(&[&a, &b]).unwrap();
        assert_eq!(both[0], net.forward(&a).unwrap());
        assert_eq!(both[1], net.forward(&b).unwrap());
    }

    fn probe_loss(net: &WeightNet, patches: &[&[Vector3<f64>]], pw: &[Vec<f64>], p1: &[Mat], p2: &[Mat]) -> f64 {
        let (outs, _) = net.forward_train(patches).unwrap();
        let mut l = 0.0;
        for (s, o) in outs.iter().enumerate() {
            l += o.weights.iter().zip(&pw[s]).map(|(a, b)| a * b).sum::<f64>();
            let a1 = o.input_transform.as_ref().unwrap();
            let a2 = o.feature_transform.as_ref().unwrap();
            l += a1.data.iter().zip(&p1[s].data).map(|(a, b)| a * b).sum::<f64>();
            l += a2.data.iter().zip(&p2[s].data).map(|(a, b)| a * b).sum::<f64>();
        }
        l
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = WeightNet::init_params(&NetArch::tiny(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // move the transforms off identity so their gradients are exercised
        perturb_stats(&mut net, &mut rng);
        let a = random_patch(&mut rng, 9);
        let b = random_patch(&mut rng, 11);
        let patches: Vec<&[Vector3<f64>]> = vec![&a, &b];
        let pw: Vec<Vec<f64>> = [9, 11].iter().map(|&k| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rand_mat = |rng: &mut ChaCha8Rng, d: usize| Mat::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p1 = vec![rand_mat(&mut rng, 3), rand_mat(&mut rng, 3)];
        let p2 = vec![rand_mat(&mut rng, 8), rand_mat(&mut rng, 8)];

        let (_, trace) = net.forward_train(&patches).unwrap();
        let grad = net.backward(&trace, &pw, &p1, &p2).flat_params();
        let base = net.flat_params();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..base.len()).step_by(3) {
            let mut plus = net.clone();
            let mut x = base.clone();
            x[i] += h;
            plus.set_flat_params(&x);
            let mut minus = net.clone();
            x[i] -= 2.0 * h;
            minus.set_flat_params(&x);
            let fd = (probe_loss(&plus, &patches, &pw, &p1, &p2) - probe_loss(&minus, &patches, &pw, &p1, &p2)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn rejects_tiny_patches() {
        let net = WeightNet::init_params(&NetArch::tiny(), 0).unwrap();
        assert!(matches!(net.forward(&[Vector3::zeros()]), Err(Error::InvalidInput(_))));
    }
}
