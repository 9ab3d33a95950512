//! Methods × corruption categories over a set of shapes.
//!
//! Report schema (JSON):
//!
//! ```text
//! { "config":  { ...echo of the run... },
//!   "reports": [ { "method", "category", "shapes", "points", "failures",
//!                  "rmse_deg", "pgp": [[alpha_deg, fraction], ...],
//!                  "d_k1", "d_k2", "ms_per_point" }, ... ] }
//! ```
//!
//! RMSE is pooled per category over the evaluation points of every shape.
//! A point whose estimate fails counts as a 90° error. `d_k1`/`d_k2` are null
//! when the method or the data has no curvature.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::pca_fit;
use super::metrics::{align_curvatures, angle_error_unoriented, curvature_rms, default_alpha_grid, pgp, rmse};
use crate::data::{add_gaussian_noise, subsample_density, Density, NamedCloud};
use crate::error::{Error, Result};
use crate::fit::{fit_points, FitOptions, PointFit, Weighting};
use crate::jet::JetOrder;
use crate::neighborhood::{extract_patch, NeighborIndex, PointCloud};
use crate::weightnet::WeightNet;

/// A corruption regime applied to each clean shape before estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    /// Noise σ as a fraction of the bounding-box diagonal.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub density: Option<Density>,
}

impl Category {
    pub const NAMES: [&'static str; 6] = ["none", "noise_low", "noise_med", "noise_high", "gradient", "stripes"];

    pub fn by_name(name: &str) -> Result<Category> {
        let (noise, density) = match name {
            "none" => (0.0, None),
            "noise_low" => (0.00125, None),
            "noise_med" => (0.006, None),
            "noise_high" => (0.012, None),
            "gradient" => (0.0, Some(Density::DEFAULT_GRADIENT)),
            "stripes" => (0.0, Some(Density::DEFAULT_STRIPES)),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown category {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Ok(Category {
            name: name.into(),
            noise,
            density,
        })
    }

    pub fn standard() -> Vec<Category> {
        Self::NAMES.iter().map(|n| Self::by_name(n).expect("known name")).collect()
    }

    pub fn apply(&self, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
        let mut c = match &self.density {
            Some(d) => subsample_density(cloud, d, seed)?.0,
            None => cloud.clone(),
        };
        if self.noise > 0.0 {
            c = add_gaussian_noise(&c, self.noise, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Pca,
    Jet,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    pub k: usize,
    pub order: u8,
}

impl Method {
    pub fn label(&self) -> String {
        match self.kind {
            MethodKind::Pca => format!("pca_k{}", self.k),
            MethodKind::Jet => format!("jet_k{}_o{}", self.k, self.order),
            MethodKind::Network => format!("net_k{}_o{}", self.k, self.order),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub alpha_grid: Vec<f64>,
    pub ridge: f64,
    pub chunk: usize,
    /// Per-point error files go here when set.
    pub dump_dir: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 0,
            alpha_grid: default_alpha_grid(),
            ridge: crate::jet::DEFAULT_RIDGE,
            chunk: 256,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub category: String,
    pub shapes: usize,
    pub points: usize,
    pub failures: usize,
    pub rmse_deg: f64,
    pub pgp: Vec<[f64; 2]>,
    pub d_k1: Option<f64>,
    pub d_k2: Option<f64>,
    pub ms_per_point: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: serde_json::Value,
    pub reports: Vec<EvalReport>,
}

impl BenchmarkReport {
    pub fn get(&self, method: &str, category: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method && r.category == category)
    }

    /// Angle RMSE per method (rows) and category (columns), plus the row mean.
    pub fn table(&self) -> String {
        let mut methods: Vec<&str> = Vec::new();
        let mut cats: Vec<&str> = Vec::new();
        for r in &self.reports {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
            if !cats.contains(&r.category.as_str()) {
                cats.push(&r.category);
            }
        }
        let w0 = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let wc: Vec<usize> = cats.iter().map(|c| c.len().max(8)).collect();
        let mut s = String::new();
        let _ = write!(s, "{:<w0$}", "method");
        for (c, w) in cats.iter().zip(&wc) {
            let _ = write!(s, "  {c:>w$}");
        }
        let _ = writeln!(s, "  {:>8}", "average");
        for m in &methods {
            let _ = write!(s, "{m:<w0$}");
            let mut vals = Vec::new();
            for (c, w) in cats.iter().zip(&wc) {
                match self.get(m, c) {
                    Some(r) => {
                        vals.push(r.rmse_deg);
                        let _ = write!(s, "  {:>w$.2}", r.rmse_deg);
                    }
                    None => {
                        let _ = write!(s, "  {:>w$}", "-");
                    }
                }
            }
            let avg = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            let _ = writeln!(s, "  {avg:>8.2}");
        }
        let curv: Vec<&EvalReport> = self.reports.iter().filter(|r| r.d_k1.is_some()).collect();
        if !curv.is_empty() {
            let _ = writeln!(s, "\n{:<w0$}  {:>10}  {:>8}  {:>8}", "method", "category", "D_k1", "D_k2");
            for r in curv {
                let _ = writeln!(
                    s,
                    "{:<w0$}  {:>10}  {:>8.3}  {:>8.3}",
                    r.method,
                    r.category,
                    r.d_k1.unwrap_or(f64::NAN),
                    r.d_k2.unwrap_or(f64::NAN)
                );
            }
        }
        s
    }
}

fn run_method(cloud: &PointCloud, index: &NeighborIndex, queries: &[usize], method: &Method, net: Option<&WeightNet>, cfg: &BenchmarkConfig) -> Result<Vec<Result<PointFit>>> {
    let opts = FitOptions {
        k: method.k,
        order: JetOrder::new(method.order)?,
        ridge: cfg.ridge,
        chunk: cfg.chunk,
    };
    match method.kind {
        MethodKind::Pca => {
            if method.k < 3 || method.k > cloud.len() {
                return Err(Error::InvalidInput(format!("k = {} is out of range for PCA on {} points", method.k, cloud.len())));
            }
            Ok(queries.par_iter().map(|&q| extract_patch(cloud, index, q, method.k).and_then(|p| pca_fit(&p, &opts))).collect())
        }
        MethodKind::Jet => fit_points(cloud, index, queries, Weighting::Uniform, &opts),
        MethodKind::Network => {
            let net = net.ok_or_else(|| Error::InvalidInput("a network method needs a checkpoint".into()))?;
            fit_points(cloud, index, queries, Weighting::Network(net), &opts)
        }
    }
}

#[derive(Default)]
struct Pool {
    errors: Vec<f64>,
    k_est: Vec<[f64; 2]>,
    k_gt: Vec<[f64; 2]>,
    failures: usize,
    seconds: f64,
    shapes: usize,
    has_curvature: bool,
}

/// Evaluates every method on every category of every shape.
pub fn run_benchmark(shapes: &[NamedCloud], methods: &[Method], categories: &[Category], net: Option<&WeightNet>, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if shapes.is_empty() || methods.is_empty() || categories.is_empty() {
        return Err(Error::InvalidInput("benchmark needs at least one shape, method and category".into()));
    }
    let mut pools: Vec<Vec<Pool>> = methods.iter().map(|_| categories.iter().map(|_| Pool::default()).collect()).collect();
    for (si, shape) in shapes.iter().enumerate() {
        if shape.cloud.gt_normals.is_none() {
            return Err(Error::InvalidInput(format!("shape {} has no ground-truth normals", shape.name)));
        }
        for (ci, cat) in categories.iter().enumerate() {
            let seed = cfg.seed.wrapping_mul(0x0100_0000_01b3).wrapping_add((si as u64) << 8 | ci as u64);
            let cloud = cat.apply(&shape.cloud, seed)?;
            let gt_n = cloud.gt_normals.as_ref().expect("carried through augmentation");
            let queries = cloud.eval_set();
            let index = NeighborIndex::new(&cloud.positions);
            for (mi, method) in methods.iter().enumerate() {
                let start = Instant::now();
                let fits = run_method(&cloud, &index, &queries, method, net, cfg)?;
                let pool = &mut pools[mi][ci];
                pool.seconds += start.elapsed().as_secs_f64();
                pool.shapes += 1;
                let mut dump = String::new();
                for (&q, f) in queries.iter().zip(&fits) {
                    let e = match f {
                        Ok(f) => {
                            if let (Some(k), Some(gt)) = (f.curvatures, &cloud.gt_curvatures) {
                                pool.has_curvature = true;
                                pool.k_est.push(align_curvatures(&f.normal, &gt_n[q], k));
                                pool.k_gt.push(gt[q]);
                            }
                            angle_error_unoriented(&f.normal, &gt_n[q])
                        }
                        Err(_) => {
                            pool.failures += 1;
                            90.0
                        }
                    };
                    pool.errors.push(e);
                    let _ = writeln!(dump, "{q} {e:.6}");
                }
                if let Some(dir) = &cfg.dump_dir {
                    let d = dir.join(&cat.name);
                    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    let p = d.join(format!("{}.{}.err", shape.name, method.label()));
                    std::fs::write(&p, dump).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
    }
    let mut reports = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        for (ci, cat) in categories.iter().enumerate() {
            let pool = &pools[mi][ci];
            let curve = pgp(&pool.errors, &cfg.alpha_grid);
            let dk = if pool.has_curvature && !pool.k_est.is_empty() {
                Some(curvature_rms(&pool.k_est, &pool.k_gt)?)
            } else {
                None
            };
            reports.push(EvalReport {
                method: method.label(),
                category: cat.name.clone(),
                shapes: pool.shapes,
                points: pool.errors.len(),
                failures: pool.failures,
                rmse_deg: rmse(&pool.errors),
                pgp: cfg.alpha_grid.iter().zip(curve).map(|(&a, f)| [a, f]).collect(),
                d_k1: dk.map(|d| d[0]),
                d_k2: dk.map(|d| d[1]),
                ms_per_point: 1e3 * pool.seconds / pool.errors.len().max(1) as f64,
            });
        }
    }
    let config = serde_json::json!({
        "benchmark": cfg,
        "methods": methods,
        "categories": categories,
        "shapes": shapes.iter().map(|s| &s.name).collect::<Vec<_>>(),
    });
    Ok(BenchmarkReport { config, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shape, ShapeKind, ShapeSpec};

    fn planes() -> Vec<NamedCloud> {
        (0..2)
            .map(|i| NamedCloud {
                name: format!("plane{i}"),
                cloud: generate_shape(&ShapeSpec::new(ShapeKind::Plane { size: 1.0 }, 1500, i)).unwrap(),
            })
            .collect()
    }

    #[test]
    fn every_method_is_exact_on_clean_planes() {
        let methods = [
            Method { kind: MethodKind::Pca, k: 32, order: 1 },
            Method { kind: MethodKind::Jet, k: 32, order: 3 },
        ];
        let r = run_benchmark(&planes(), &methods, &[Category::by_name("none").unwrap()], None, &BenchmarkConfig::default()).unwrap();
        assert_eq!(r.reports.len(), 2);
        for rep in &r.reports {
            assert!(rep.rmse_deg < 1.0, "{rep:?}");
            assert_eq!(rep.points, 3000);
            assert_eq!(rep.failures, 0);
            for w in rep.pgp.windows(2) {
                assert!(w[0][1] <= w[1][1]);
            }
        }
        assert!(r.get("jet_k32_o3", "none").unwrap().d_k1.unwrap() < 1e-6);
        assert!(r.get("pca_k32", "none").unwrap().d_k1.is_none());
        let table = r.table();
        assert!(table.contains("jet_k32_o3") && table.contains("average"));
    }

    #[test]
    fn report_round_trips_through_json() {
        let methods = [Method { kind: MethodKind::Jet, k: 20, order: 2 }];
        let cats = [Category::by_name("noise_med").unwrap(), Category::by_name("stripes").unwrap()];
        let r = run_benchmark(&planes(), &methods, &cats, None, &BenchmarkConfig::default()).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: BenchmarkReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(r.get("jet_k20_o2", "stripes").unwrap().points < 3000);
    }

    #[test]
    fn network_method_needs_a_net() {
        let methods = [Method { kind: MethodKind::Network, k: 20, order: 2 }];
        assert!(run_benchmark(&planes(), &methods, &Category::standard()[..1], None, &BenchmarkConfig::default()).is_err());
        assert!(Category::by_name("bogus").is_err());
    }

    #[test]
    fn error_dump_is_written() {
        let d = tempfile::tempdir().unwrap();
        let cfg = BenchmarkConfig {
            dump_dir: Some(d.path().to_path_buf()),
            ..BenchmarkConfig::default()
        };
        let methods = [Method { kind: MethodKind::Pca, k: 16, order: 1 }];
        run_benchmark(&planes()[..1], &methods, &Category::standard()[..1], None, &cfg).unwrap();
        let text = std::fs::read_to_string(d.path().join("none/plane0.pca_k16.err")).unwrap();
        assert_eq!(text.lines().count(), 1500);
    }
}
