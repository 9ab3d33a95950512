//! Mini-batch objective and the epoch loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use super::loss::LossTerms;
use super::pipeline::{sample_loss, FitSettings, TermScales};
use crate::error::{Error, Result};
use crate::neighborhood::{extract_patch, NeighborIndex, PointCloud};
use crate::weightnet::checkpoint::{self, Checkpoint, MomentState};
use crate::weightnet::{Mat, Trace, WeightNet};

/// A normalized patch and its ground-truth normal, both in the patch frame.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub points: Vec<Vector3<f64>>,
    pub gt_normal: Vector3<f64>,
}

/// Averages over the samples of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub terms: LossTerms,
    pub mean_weight: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub stats: BatchStats,
    pub grad: Option<WeightNet>,
    pub trace: Trace,
    /// Signs of the entries of `I − AAᵀ`, where the regularizer has its kinks.
    pub reg_signs: Vec<i8>,
}

/// Mean loss over `samples` and, if `want_grad`, its gradient for every parameter.
pub fn batch_objective(
    net: &WeightNet,
    samples: &[TrainSample],
    fit: &FitSettings,
    scales: &TermScales,
    want_grad: bool,
) -> Result<BatchResult> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let refs: Vec<&[Vector3<f64>]> = samples.iter().map(|s| s.points.as_slice()).collect();
    let (outs, trace) = net.forward_train(&refs)?;
    let per: Vec<_> = samples
        .par_iter()
        .zip(outs.par_iter())
        .map(|(s, o)| {
            sample_loss(
                &s.points,
                &o.weights,
                o.input_transform.as_ref(),
                o.feature_transform.as_ref(),
                &s.gt_normal,
                fit,
                scales,
                want_grad,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let b = samples.len() as f64;
    let mut stats = BatchStats {
        samples: samples.len(),
        ..BatchStats::default()
    };
    let mut wsum = 0.0;
    let mut wcount = 0usize;
    for ((eval, _), o) in per.iter().zip(&outs) {
        stats.terms.sin += eval.terms.sin / b;
        stats.terms.consistency += eval.terms.consistency / b;
        stats.terms.reg += eval.terms.reg / b;
        stats.terms.total += eval.terms.total / b;
        wsum += o.weights.iter().sum::<f64>();
        wcount += o.weights.len();
    }
    stats.mean_weight = wsum / wcount as f64;
    let mut reg_signs = Vec::new();
    for o in &outs {
        for a in o.input_transform.iter().chain(&o.feature_transform) {
            let aat = crate::weightnet::tensor::matmul(a, &a.transpose());
            for r in 0..a.rows {
                for c in 0..a.cols {
                    let e = if r == c { 1.0 } else { 0.0 } - aat.get(r, c);
                    reg_signs.push(e.signum() as i8);
                }
            }
        }
    }
    if !want_grad {
        return Ok(BatchResult {
            stats,
            grad: None,
            trace,
            reg_signs,
        });
    }

    let mut dws = Vec::with_capacity(per.len());
    let mut da1 = Vec::new();
    let mut da2 = Vec::new();
    for (_, g) in per {
        let g = g.expect("gradient requested");
        dws.push(g.d_weights.iter().map(|v| v / b).collect());
        let scale = |m: Mat| Mat::from_vec(m.rows, m.cols, m.data.iter().map(|v| v / b).collect());
        if let Some(m) = g.d_a1 {
            da1.push(scale(m));
        }
        if let Some(m) = g.d_a2 {
            da2.push(scale(m));
        }
    }
    let grad = net.backward(&trace, &dws, &da1, &da2);
    Ok(BatchResult {
        stats,
        grad: Some(grad),
        trace,
        reg_signs,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub sin: f64,
    pub consistency: f64,
    pub reg: f64,
    pub val_rmse_deg: f64,
    pub mean_weight: f64,
    pub skipped: usize,
}

pub const METRICS_HEADER: &str = "epoch,steps,loss,sin,consistency,reg,val_rmse_deg,mean_weight,skipped";

impl EpochMetrics {
    fn csv(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.6},{:.6},{}",
            self.epoch,
            self.steps,
            self.loss,
            self.sin,
            self.consistency,
            self.reg,
            self.val_rmse_deg,
            self.mean_weight,
            self.skipped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    config: TrainConfig,
    epoch: usize,
    best_val_rmse_deg: f64,
    val_rmse_deg: f64,
}

/// The configuration recorded in a checkpoint written by [`train`], if any.
pub fn recorded_config(ck: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value::<RunState>(ck.meta.clone()).ok().map(|s| s.config)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochMetrics>,
    pub best_val_rmse_deg: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub net: WeightNet,
}

/// Query points indexed by (shape, point).
struct Corpus<'a> {
    clouds: &'a [PointCloud],
    indexes: Vec<NeighborIndex>,
    train: Vec<Vec<usize>>,
    val: Vec<(usize, usize)>,
}

impl<'a> Corpus<'a> {
    fn new(clouds: &'a [PointCloud], cfg: &TrainConfig) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut train = Vec::new();
        let mut val_per_shape = Vec::new();
        for (s, c) in clouds.iter().enumerate() {
            c.validate()?;
            if c.gt_normals.is_none() {
                return Err(Error::InvalidInput(format!("training shape {s} has no ground-truth normals")));
            }
            if c.len() < cfg.k_neighbors {
                return Err(Error::InvalidInput(format!(
                    "training shape {s} has {} points, fewer than k = {}",
                    c.len(),
                    cfg.k_neighbors
                )));
            }
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.shuffle(&mut split_rng);
            let nval = ((c.len() as f64 * cfg.val_fraction).ceil() as usize).clamp(1, c.len() - 1);
            val_per_shape.push(idx[..nval].to_vec());
            train.push(idx[nval..].to_vec());
        }
        // round-robin over shapes so every shape is represented
        let mut val = Vec::new();
        let mut depth = 0;
        while val.len() < cfg.val_samples {
            let before = val.len();
            for (s, v) in val_per_shape.iter().enumerate() {
                if depth < v.len() && val.len() < cfg.val_samples {
                    val.push((s, v[depth]));
                }
            }
            if val.len() == before {
                break;
            }
            depth += 1;
        }
        let indexes = clouds.iter().map(|c| NeighborIndex::new(&c.positions)).collect();
        Ok(Corpus {
            clouds,
            indexes,
            train,
            val,
        })
    }

    fn sample(&self, shape: usize, q: usize, k: usize) -> Result<TrainSample> {
        let cloud = &self.clouds[shape];
        let patch = extract_patch(cloud, &self.indexes[shape], q, k)?;
        let gt = cloud.gt_normals.as_ref().expect("checked")[q];
        Ok(TrainSample {
            points: patch.local_points.clone(),
            gt_normal: patch.to_local(&gt).normalize(),
        })
    }

    /// Patches for the given queries; queries whose patch cannot be built are dropped.
    fn samples(&self, queries: &[(usize, usize)], k: usize) -> (Vec<TrainSample>, usize) {
        let built: Vec<_> = queries.par_iter().map(|&(s, q)| self.sample(s, q, k)).collect();
        let total = built.len();
        let ok: Vec<TrainSample> = built.into_iter().filter_map(|r| r.ok()).collect();
        let skipped = total - ok.len();
        (ok, skipped)
    }

    fn epoch_queries(&self, cfg: &TrainConfig, epoch: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let n = self.train.len();
        let mut q: Vec<(usize, usize)> = (0..cfg.samples_per_epoch)
            .map(|i| {
                let s = i % n;
                (s, self.train[s][rng.random_range(0..self.train[s].len())])
            })
            .collect();
        q.shuffle(&mut rng);
        q
    }
}

/// Unoriented angle RMSE in degrees of the network-weighted fit over `samples`.
pub fn validation_rmse(net: &WeightNet, samples: &[TrainSample], fit: &FitSettings, chunk: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let scales = TermScales {
        sin: 1.0,
        consistency: 0.0,
        reg: 0.0,
        log_term: true,
    };
    let mut sq = 0.0;
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&[Vector3<f64>]> = part.iter().map(|s| s.points.as_slice()).collect();
        let outs = net.forward_eval(&refs)?;
        let angles: Vec<f64> = part
            .par_iter()
            .zip(outs.par_iter())
            .map(|(s, o)| {
                let (eval, _) = sample_loss(&s.points, &o.weights, None, None, &s.gt_normal, fit, &scales, false)?;
                Ok(eval.normal.dot(&s.gt_normal).abs().min(1.0).acos().to_degrees())
            })
            .collect::<Result<Vec<_>>>()?;
        sq += angles.iter().map(|a| a * a).sum::<f64>();
    }
    Ok((sq / samples.len() as f64).sqrt())
}

fn quantize_moments(m: &mut MomentState) {
    m.m.iter_mut().for_each(|v| *v = *v as f32 as f64);
    m.v.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Trains a network on `clouds`, writing `metrics.csv`, `last.ckpt` and
/// `best.ckpt` into `out_dir`. With `resume`, continues from a `last.ckpt`.
///
/// Parameters and optimizer moments are rounded to checkpoint precision at
/// each epoch boundary, so a resumed run retraces an uninterrupted one.
pub fn train(
    cfg: &TrainConfig,
    clouds: &[PointCloud],
    out_dir: &Path,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let corpus = Corpus::new(clouds, cfg)?;
    let fit = FitSettings {
        order: cfg.order()?,
        ridge: cfg.ridge,
    };
    let scales = TermScales::objective(&cfg.loss_weights(), cfg.log_term);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let (mut net, mut adam, start_epoch, mut best) = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let state: RunState = serde_json::from_value(ck.meta.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: not a training checkpoint: {e}", p.display())))?;
            if state.config.net_arch() != cfg.net_arch() {
                return Err(Error::Config("resume checkpoint has a different architecture".into()));
            }
            let optim = ck
                .optim
                .ok_or_else(|| Error::Checkpoint(format!("{} holds no optimizer state", p.display())))?;
            (ck.net, Adam::with_state(cfg.learning_rate, optim), state.epoch + 1, state.best_val_rmse_deg)
        }
        None => {
            let mut net = WeightNet::init_params(&cfg.net_arch(), cfg.seed)?;
            checkpoint::quantize(&mut net);
            let n = net.num_params();
            (net, Adam::new(cfg.learning_rate, n), 1, f64::INFINITY)
        }
    };
    if resume.is_none() || !metrics_path.exists() {
        std::fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let (val_samples, _) = corpus.samples(&corpus.val, cfg.k_neighbors);
    let mut history = Vec::new();
    for epoch in start_epoch..=cfg.epochs {
        let queries = corpus.epoch_queries(cfg, epoch);
        let mut acc = BatchStats::default();
        let mut batches = 0usize;
        let mut skipped = 0usize;
        for chunk in queries.chunks(cfg.batch_size) {
            let (samples, bad) = corpus.samples(chunk, cfg.k_neighbors);
            skipped += bad;
            if samples.is_empty() {
                continue;
            }
            let BatchResult { stats, grad, trace, .. } = match batch_objective(&net, &samples, &fit, &scales, true) {
                Ok(r) => r,
                Err(Error::SingularFit { .. }) | Err(Error::DegeneratePatch(_)) => {
                    skipped += samples.len();
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grad = grad.expect("requested").flat_params();
            let mut params = net.flat_params();
            adam.step(&mut params, &grad)?;
            net.set_flat_params(&params);
            net.update_running_stats(&trace);
            if !net.is_finite() {
                return Err(Error::NumericalFault {
                    layer: "optimizer".into(),
                    detail: format!("non-finite parameters after step {}", adam.state.step),
                });
            }
            acc.terms.sin += stats.terms.sin;
            acc.terms.consistency += stats.terms.consistency;
            acc.terms.reg += stats.terms.reg;
            acc.terms.total += stats.terms.total;
            acc.mean_weight += stats.mean_weight;
            batches += 1;
        }
        checkpoint::quantize(&mut net);
        quantize_moments(&mut adam.state);

        let nb = batches.max(1) as f64;
        let val = validation_rmse(&net, &val_samples, &fit, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            steps: adam.state.step,
            loss: acc.terms.total / nb,
            sin: acc.terms.sin / nb,
            consistency: acc.terms.consistency / nb,
            reg: acc.terms.reg / nb,
            val_rmse_deg: val,
            mean_weight: acc.mean_weight / nb,
            skipped,
        };
        let improved = val < best || !best.is_finite();
        if improved {
            best = val;
        }
        let meta = |e: usize| {
            serde_json::to_value(RunState {
                config: cfg.clone(),
                epoch: e,
                best_val_rmse_deg: best,
                val_rmse_deg: val,
            })
            .expect("run state serializes")
        };
        let ck = Checkpoint {
            net: net.clone(),
            meta: meta(epoch),
            optim: Some(adam.state.clone()),
        };
        checkpoint::save(&last_path, &ck)?;
        if improved {
            checkpoint::save(&best_path, &ck)?;
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{}", m.csv()).map_err(|e| Error::io(&metrics_path, e))?;
        on_epoch(&m);
        history.push(m);
    }
    if !best_path.exists() {
        // nothing ran (resumed past the last epoch): keep the file contract
        let ck = checkpoint::load(&last_path)?;
        checkpoint::save(&best_path, &ck)?;
    }
    Ok(TrainSummary {
        history,
        best_val_rmse_deg: best,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        net,
    })
}

/// Compares the analytic gradient of [`batch_objective`] with central
/// differences of step `h` for every parameter. Relative error is
/// `|a − f| / max(|a|, |f|, floor)`. With `richardson`, the differences at
/// `h` and `2h` are combined to cancel the leading truncation term; going
/// up rather than down in step keeps rounding noise at the level of `h`.
///
/// A parameter whose `±h` probe changes a rectifier mask, a max-pool winner,
/// or a regularizer sign has no valid central difference at
/// that step; it is counted in `kinked` and left out of `max_rel_error`.
pub fn gradient_check(
    net: &WeightNet,
    samples: &[TrainSample],
    fit: &FitSettings,
    scales: &TermScales,
    h: f64,
    floor: f64,
    richardson: bool,
) -> Result<GradientCheck> {
    let base_run = batch_objective(net, samples, fit, scales, true)?;
    let analytic = base_run.grad.as_ref().expect("requested").flat_params();
    let base_pattern = base_run.trace.pattern();
    let base = net.flat_params();
    let probe = |params: &[f64]| -> Result<(f64, bool)> {
        let mut p = net.clone();
        p.set_flat_params(params);
        let r = batch_objective(&p, samples, fit, scales, false)?;
        let same = r.trace.pattern() == base_pattern && r.reg_signs == base_run.reg_signs;
        Ok((r.stats.terms.total, same))
    };
    let central = |i: usize, step: f64| -> Result<(f64, bool)> {
        let mut x = base.clone();
        x[i] = base[i] + step;
        let (fp, sp) = probe(&x)?;
        x[i] = base[i] - step;
        let (fm, sm) = probe(&x)?;
        Ok(((fp - fm) / (2.0 * step), sp && sm))
    };
    let results: Vec<(f64, bool)> = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let (d1, s1) = central(i, h)?;
            let (fd, smooth) = if richardson {
                // cancels the h² term of the central difference
                let (d2, s2) = central(i, 2.0 * h)?;
                ((4.0 * d1 - d2) / 3.0, s1 && s2)
            } else {
                (d1, s1)
            };
            let a = analytic[i];
            Ok(((a - fd).abs() / a.abs().max(fd.abs()).max(floor), smooth))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut names = Vec::new();
    net.visit(&mut |n, _, d| names.extend(std::iter::repeat_n(n.to_string(), d.len())));
    let mut check = GradientCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        params: base.len(),
        kinked: 0,
        max_rel_error_all: 0.0,
        max_abs_grad: analytic.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
    };
    for (i, (err, smooth)) in results.into_iter().enumerate() {
        check.max_rel_error_all = check.max_rel_error_all.max(err);
        if !smooth {
            check.kinked += 1;
        } else if err > check.max_rel_error || check.worst_param.is_empty() {
            check.max_rel_error = err;
            check.worst_param = names[i].clone();
        }
    }
    Ok(check)
}

#[derive(Debug, Clone)]
pub struct GradientCheck {
    /// Over parameters whose probes stay on one smooth piece.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params: usize,
    pub kinked: usize,
    /// Including kinked parameters.
    pub max_rel_error_all: f64,
    pub max_abs_grad: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::JetOrder;
    use crate::weightnet::NetArch;

    fn samples(seed: u64, n: usize, k: usize) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (a, b, c) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                let points = (0..k)
                    .map(|j| {
                        let x: f64 = rng.random_range(-1.0..1.0);
                        let y: f64 = rng.random_range(-1.0..1.0);
                        let mut z = 0.1 * x + a * x * x + b * x * y + c * y * y + rng.random_range(-0.02..0.02);
                        if j == k - 1 {
                            z += 0.8;
                        }
                        Vector3::new(x, y, z)
                    })
                    .collect();
                TrainSample {
                    points,
                    gt_normal: Vector3::new(-0.1, 0.0, 1.0).normalize(),
                }
            })
            .collect()
    }

    fn perturbed_tiny(seed: u64) -> WeightNet {
        let mut net = WeightNet::init_params(&NetArch::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // move the alignment outputs away from identity so every term is active
        net.visit_mut(&mut |name, _, d| {
            if name.contains(".fc.") {
                d.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
            }
        });
        net
    }

    fn fit() -> FitSettings {
        FitSettings {
            order: JetOrder::new(3).unwrap(),
            ridge: 1e-8,
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences_per_term() {
        let net = perturbed_tiny(3);
        let batch = samples(4, 3, 16);
        let cases = [
            ("sin", TermScales { sin: 1.0, consistency: 0.0, reg: 0.0, log_term: true }),
            ("consistency", TermScales { sin: 0.0, consistency: 1.0, reg: 0.0, log_term: true }),
            ("reg", TermScales { sin: 0.0, consistency: 0.0, reg: 1.0, log_term: true }),
            ("total", TermScales { sin: 1.0, consistency: 1.0, reg: 0.1, log_term: true }),
        ];
        for (name, scales) in cases {
            let r = gradient_check(&net, &batch, &fit(), &scales, 1e-4, 1e-6, true).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }
}
