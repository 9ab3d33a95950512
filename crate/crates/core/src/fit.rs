//! Per-point estimation: neighborhood, weights, jet fit, world-frame geometry.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::jet::{build_vandermonde, fit_wls, jet_normal, make_preconditioner, principal_curvatures, JetOrder, WeightDiagonal};
use crate::neighborhood::{denormalize_curvature, denormalize_normal, extract_patch, NeighborIndex, Patch, PointCloud};
use crate::weightnet::WeightNet;

/// Where the per-neighbor weights come from.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    /// All ones: the classical unweighted jet.
    Uniform,
    Network(&'a WeightNet),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub k: usize,
    pub order: JetOrder,
    pub ridge: f64,
    /// Patches per network forward pass.
    pub chunk: usize,
}

impl FitOptions {
    pub fn new(k: usize, order: u8) -> Result<Self> {
        Ok(FitOptions {
            k,
            order: JetOrder::new(order)?,
            ridge: crate::jet::DEFAULT_RIDGE,
            chunk: 256,
        })
    }
}

/// Estimate at one query point. Directions and normal are world-frame;
/// curvature signs refer to `normal` and `|curvatures[0]| >= |curvatures[1]|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFit {
    pub query_index: usize,
    pub normal: Vector3<f64>,
    /// `None` below order 2.
    pub curvatures: Option<[f64; 2]>,
    pub directions: Option<[Vector3<f64>; 2]>,
    pub neighbor_indices: Vec<usize>,
    /// Row-aligned with `neighbor_indices`.
    pub weights: Vec<f64>,
    pub ridge_used: f64,
}

fn geometry(patch: &Patch, weights: Vec<f64>, opts: &FitOptions) -> Result<PointFit> {
    let xy = patch.xy();
    let design = build_vandermonde(&xy, opts.order)?;
    let pre = make_preconditioner(&xy, opts.order)?;
    let wls = fit_wls(&design, &WeightDiagonal::new(weights.clone())?, &patch.heights(), &pre, opts.ridge)?;
    let jet = &wls.coefficients;
    let normal = denormalize_normal(patch, &jet_normal(jet));
    let (curvatures, directions) = if opts.order.get() >= 2 {
        let c = principal_curvatures(jet)?;
        (
            Some([denormalize_curvature(patch, c.k1), denormalize_curvature(patch, c.k2)]),
            Some([denormalize_normal(patch, &c.dir1), denormalize_normal(patch, &c.dir2)]),
        )
    } else {
        (None, None)
    };
    Ok(PointFit {
        query_index: patch.query_index,
        normal,
        curvatures,
        directions,
        neighbor_indices: patch.neighbor_indices.clone(),
        weights,
        ridge_used: wls.ridge_used,
    })
}

/// Fits every point of `queries`. The result is row-aligned with `queries`;
/// a point whose patch or fit fails carries its own error.
pub fn fit_points(
    cloud: &PointCloud,
    index: &NeighborIndex,
    queries: &[usize],
    weighting: Weighting<'_>,
    opts: &FitOptions,
) -> Result<Vec<Result<PointFit>>> {
    cloud.validate()?;
    if opts.k < opts.order.num_coeffs() {
        return Err(Error::InvalidInput(format!(
            "k = {} is below the {} coefficients of an order-{} jet",
            opts.k,
            opts.order.num_coeffs(),
            opts.order.get()
        )));
    }
    if opts.k > cloud.len() {
        return Err(Error::InvalidInput(format!("k = {} exceeds the {} points of the cloud", opts.k, cloud.len())));
    }
    let mut out = Vec::with_capacity(queries.len());
    for part in queries.chunks(opts.chunk.max(1)) {
        let patches: Vec<Result<Patch>> = part.par_iter().map(|&q| extract_patch(cloud, index, q, opts.k)).collect();
        let weights: Vec<Option<Vec<f64>>> = match weighting {
            Weighting::Uniform => patches.iter().map(|p| p.as_ref().ok().map(|p| vec![1.0; p.len()])).collect(),
            Weighting::Network(net) => {
                let ok: Vec<&[Vector3<f64>]> = patches.iter().flatten().map(|p| p.local_points.as_slice()).collect();
                let mut outs = if ok.is_empty() { Vec::new() } else { net.forward_eval(&ok)? }.into_iter();
                patches.iter().map(|p| p.as_ref().ok().map(|_| outs.next().expect("one output per patch").weights)).collect()
            }
        };
        let fits: Vec<Result<PointFit>> = patches
            .into_par_iter()
            .zip(weights.into_par_iter())
            .map(|(p, w)| {
                let p = p?;
                geometry(&p, w.expect("weights for every patch"), opts)
            })
            .collect();
        out.extend(fits);
    }
    Ok(out)
}

/// Fits every point of the cloud (or its `eval_indices` when `eval_only`).
pub fn fit_cloud(cloud: &PointCloud, weighting: Weighting<'_>, opts: &FitOptions, eval_only: bool) -> Result<Vec<Result<PointFit>>> {
    let index = NeighborIndex::new(&cloud.positions);
    let queries: Vec<usize> = if eval_only { cloud.eval_set() } else { (0..cloud.len()).collect() };
    fit_points(cloud, &index, &queries, weighting, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shape, ShapeKind, ShapeSpec};
    use crate::weightnet::NetArch;
    use nalgebra::{Rotation3, Unit};

    #[test]
    fn tilted_plane_is_recovered_everywhere() {
        let c = generate_shape(&ShapeSpec::new(ShapeKind::Plane { size: 1.0 }, 400, 3)).unwrap();
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(1.0, 2.0, 0.5)), 0.7);
        let c = c.transformed(&rot, &Vector3::new(3.0, -1.0, 2.0));
        let n = c.gt_normals.as_ref().unwrap()[0];
        let fits = fit_cloud(&c, Weighting::Uniform, &FitOptions::new(30, 3).unwrap(), false).unwrap();
        for f in fits {
            let f = f.unwrap();
            assert!(f.normal.dot(&n).abs() > 1.0 - 1e-12);
            let k = f.curvatures.unwrap();
            assert!(k[0].abs() < 1e-6 && k[1].abs() < 1e-6);
            assert_eq!(f.weights.len(), 30);
            assert_eq!(f.neighbor_indices[0], f.query_index);
        }
    }

    #[test]
    fn sphere_curvature_is_scale_aware() {
        for r in [0.5, 2.0] {
            let c = generate_shape(&ShapeSpec::new(ShapeKind::Sphere { radius: r }, 4000, 1)).unwrap();
            let fits = fit_points(&c, &NeighborIndex::new(&c.positions), &[0, 10, 20], Weighting::Uniform, &FitOptions::new(64, 2).unwrap()).unwrap();
            for f in fits {
                let f = f.unwrap();
                let k = f.curvatures.unwrap();
                // sign depends on the arbitrary local orientation; magnitudes do not
                assert!((k[0].abs() * r - 1.0).abs() < 0.02, "{k:?}");
                assert!((k[1].abs() * r - 1.0).abs() < 0.02, "{k:?}");
                assert!(k[0] * k[1] > 0.0);
                let d = f.directions.unwrap();
                assert!(d[0].dot(&f.normal).abs() < 1e-9 && d[1].dot(&f.normal).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn network_weights_are_batched_consistently() {
        let c = generate_shape(&ShapeSpec::new(ShapeKind::Torus { major: 1.0, minor: 0.3 }, 600, 2)).unwrap();
        let net = WeightNet::init_params(&NetArch::tiny(), 4).unwrap();
        let mut opts = FitOptions::new(20, 2).unwrap();
        let a = fit_cloud(&c, Weighting::Network(&net), &opts, false).unwrap();
        opts.chunk = 7;
        let b = fit_cloud(&c, Weighting::Network(&net), &opts, false).unwrap();
        for (a, b) in a.iter().zip(&b) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.normal, b.normal);
        }
    }

    #[test]
    fn order_one_has_no_curvature_and_bad_k_is_rejected() {
        let c = generate_shape(&ShapeSpec::new(ShapeKind::Sphere { radius: 1.0 }, 200, 0)).unwrap();
        let f = fit_cloud(&c, Weighting::Uniform, &FitOptions::new(10, 1).unwrap(), false).unwrap();
        assert!(f[0].as_ref().unwrap().curvatures.is_none());
        assert!(fit_cloud(&c, Weighting::Uniform, &FitOptions::new(5, 2).unwrap(), false).is_err());
        assert!(fit_cloud(&c, Weighting::Uniform, &FitOptions::new(201, 2).unwrap(), false).is_err());
    }
}
