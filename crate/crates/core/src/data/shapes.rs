//! Sampled analytic surfaces with exact normals and principal curvatures.
//!
//! Normals point outward (or along +z for height fields). With that
//! orientation a convex surface has positive curvature, so a sphere of radius
//! `r` has `k1 = k2 = 1/r` and the graph `z = (x² + y²)/2` has `k = −1` at its
//! apex. Curvatures are stored as `[max, min]`.

use std::f64::consts::TAU;

use nalgebra::{Matrix2, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeKind {
    /// Square of side `size` in the xy-plane.
    Plane { size: f64 },
    Sphere { radius: f64 },
    /// Axis along z.
    Cylinder { radius: f64, height: f64 },
    /// `z = a x² + b y²` over `[−extent, extent]²`.
    Paraboloid { a: f64, b: f64, extent: f64 },
    /// `z = a x² − b y²` over `[−extent, extent]²`.
    Saddle { a: f64, b: f64, extent: f64 },
    /// Ring radius `major`, tube radius `minor`, axis along z.
    Torus { major: f64, minor: f64 },
    /// Two unit squares meeting at a sharp edge; see [`generate_corner`].
    Corner { angle_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub shape: ShapeKind,
    pub sample_count: usize,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(shape: ShapeKind, sample_count: usize, seed: u64) -> Self {
        ShapeSpec {
            shape,
            sample_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InvalidInput("sample_count must be positive".into()));
        }
        let require = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
            }
        };
        match self.shape {
            ShapeKind::Plane { size } => require("size", size),
            ShapeKind::Sphere { radius } => require("radius", radius),
            ShapeKind::Cylinder { radius, height } => require("radius", radius).and(require("height", height)),
            ShapeKind::Paraboloid { a, b, extent } | ShapeKind::Saddle { a, b, extent } => {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::InvalidInput("coefficients must be finite".into()));
                }
                require("extent", extent)
            }
            ShapeKind::Torus { major, minor } => {
                require("major", major)?;
                require("minor", minor)?;
                if minor >= major {
                    return Err(Error::InvalidInput(format!(
                        "torus needs minor < major, got {minor} >= {major}"
                    )));
                }
                Ok(())
            }
            ShapeKind::Corner { angle_deg } => {
                if !(angle_deg > 0.0 && angle_deg < 180.0) {
                    return Err(Error::InvalidInput(format!("corner angle must lie in (0, 180), got {angle_deg}")));
                }
                if self.sample_count < 2 {
                    return Err(Error::InvalidInput("corner needs at least 2 samples".into()));
                }
                Ok(())
            }
        }
    }
}

/// Principal curvatures of the graph `z = f(x, y)` with normal `(−fx, −fy, 1)/W`,
/// as eigenvalues of `−I⁻¹ II`. Returned as `[max, min]`.
pub fn graph_curvatures(fx: f64, fy: f64, fxx: f64, fxy: f64, fyy: f64) -> [f64; 2] {
    let w = (1.0 + fx * fx + fy * fy).sqrt();
    let first = Matrix2::new(1.0 + fx * fx, fx * fy, fx * fy, 1.0 + fy * fy);
    let second = Matrix2::new(fxx, fxy, fxy, fyy) / w;
    let s = -first.try_inverse().expect("first fundamental form is positive definite") * second;
    let half_tr = 0.5 * s.trace();
    let disc = (half_tr * half_tr - s.determinant()).max(0.0).sqrt();
    [half_tr + disc, half_tr - disc]
}

fn gaussian_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

pub fn generate_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.sample_count;
    let mut pos = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    let mut curv = Vec::with_capacity(n);
    match spec.shape {
        ShapeKind::Plane { size } => {
            for _ in 0..n {
                pos.push(Vector3::new(
                    rng.random_range(-0.5..0.5) * size,
                    rng.random_range(-0.5..0.5) * size,
                    0.0,
                ));
                nrm.push(Vector3::z());
                curv.push([0.0, 0.0]);
            }
        }
        ShapeKind::Sphere { radius } => {
            for _ in 0..n {
                let u = gaussian_unit(&mut rng);
                pos.push(u * radius);
                nrm.push(u);
                curv.push([1.0 / radius, 1.0 / radius]);
            }
        }
        ShapeKind::Cylinder { radius, height } => {
            for _ in 0..n {
                let t: f64 = rng.random_range(0.0..TAU);
                let z = rng.random_range(-0.5..0.5) * height;
                let u = Vector3::new(t.cos(), t.sin(), 0.0);
                pos.push(u * radius + Vector3::new(0.0, 0.0, z));
                nrm.push(u);
                curv.push([1.0 / radius, 0.0]);
            }
        }
        ShapeKind::Paraboloid { a, b, extent } | ShapeKind::Saddle { a, b, extent } => {
            let b = if matches!(spec.shape, ShapeKind::Saddle { .. }) { -b } else { b };
            for _ in 0..n {
                let x = rng.random_range(-extent..extent);
                let y = rng.random_range(-extent..extent);
                let (fx, fy) = (2.0 * a * x, 2.0 * b * y);
                pos.push(Vector3::new(x, y, a * x * x + b * y * y));
                nrm.push(Vector3::new(-fx, -fy, 1.0).normalize());
                curv.push(graph_curvatures(fx, fy, 2.0 * a, 0.0, 2.0 * b));
            }
        }
        ShapeKind::Corner { angle_deg } => return generate_corner(n, angle_deg, spec.seed),
        ShapeKind::Torus { major, minor } => {
            while pos.len() < n {
                let u = rng.random_range(0.0..TAU);
                let v: f64 = rng.random_range(0.0..TAU);
                // area element ∝ (R + r cos v)
                let accept = (major + minor * v.cos()) / (major + minor);
                if rng.random::<f64>() >= accept {
                    continue;
                }
                let ring = major + minor * v.cos();
                pos.push(Vector3::new(ring * u.cos(), ring * u.sin(), minor * v.sin()));
                nrm.push(Vector3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin()));
                let k_tube = 1.0 / minor;
                let k_ring = v.cos() / ring;
                curv.push([k_tube.max(k_ring), k_tube.min(k_ring)]);
            }
        }
    }
    Ok(PointCloud {
        positions: pos,
        gt_normals: Some(nrm),
        gt_curvatures: Some(curv),
        eval_indices: None,
    })
}

/// Two unit squares sharing an edge along the y-axis, opening at `angle_deg`.
/// Curvatures are zero on both faces.
pub fn generate_corner(sample_count: usize, angle_deg: f64, seed: u64) -> Result<PointCloud> {
    ShapeSpec::new(ShapeKind::Corner { angle_deg }, sample_count, seed).validate()?;
    let half = sample_count / 2;
    let face = |count: usize, seed: u64| {
        generate_shape(&ShapeSpec::new(ShapeKind::Plane { size: 1.0 }, count, seed))
            .map(|c| c.transformed(&Rotation3::identity(), &Vector3::new(0.5, 0.0, 0.0)))
    };
    let a = face(half, seed)?;
    let b = face(sample_count - half, seed.wrapping_add(1))?;
    // rotate the second face about the shared edge (the y-axis)
    let turn = Rotation3::from_axis_angle(&Vector3::y_axis(), -angle_deg.to_radians());
    let b = b.transformed(&turn, &Vector3::zeros());
    Ok(PointCloud::concat(&[a, b]))
}

/// Copies of surface points pushed off the surface along their normals by
/// `offset ± 50%`. Returns the augmented cloud and the outlier rows. Outliers
/// inherit the normal of their source point and are left out of the
/// evaluation set.
pub fn inject_outliers(cloud: &PointCloud, fraction: f64, offset: f64, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    cloud.validate()?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("outlier fraction must lie in [0, 1), got {fraction}")));
    }
    let normals = cloud
        .gt_normals
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("outlier injection needs ground-truth normals".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (cloud.len() as f64 * fraction).round() as usize;
    let mut extra = PointCloud {
        positions: Vec::with_capacity(count),
        gt_normals: Some(Vec::with_capacity(count)),
        gt_curvatures: cloud.gt_curvatures.as_ref().map(|_| Vec::with_capacity(count)),
        eval_indices: Some(Vec::new()),
    };
    for _ in 0..count {
        let src = rng.random_range(0..cloud.len());
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let d = offset * rng.random_range(0.5..1.5) * sign;
        extra.positions.push(cloud.positions[src] + normals[src] * d);
        extra.gt_normals.as_mut().unwrap().push(normals[src]);
        if let (Some(dst), Some(c)) = (extra.gt_curvatures.as_mut(), &cloud.gt_curvatures) {
            dst.push(c[src]);
        }
    }
    let base = PointCloud {
        eval_indices: Some(cloud.eval_set()),
        ..cloud.clone()
    };
    let n = cloud.len();
    Ok((PointCloud::concat(&[base, extra]), (n..n + count).collect()))
}

/// Random rotation, uniform over axes and angles.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Unit::new_normalize(gaussian_unit(rng));
    Rotation3::from_axis_angle(&axis, rng.random_range(0.0..TAU))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeKind) -> ShapeSpec {
        ShapeSpec::new(shape, 2000, 1)
    }

    #[test]
    fn sphere_curvature_and_normals() {
        let c = generate_shape(&spec(ShapeKind::Sphere { radius: 2.0 })).unwrap();
        for ((p, n), k) in c.positions.iter().zip(c.gt_normals.unwrap()).zip(c.gt_curvatures.unwrap()) {
            assert!((p.norm() - 2.0).abs() < 1e-12);
            assert!((n - p / 2.0).norm() < 1e-12);
            assert_eq!(k, [0.5, 0.5]);
        }
    }

    #[test]
    fn plane_is_flat() {
        let c = generate_shape(&spec(ShapeKind::Plane { size: 3.0 })).unwrap();
        assert!(c.gt_normals.unwrap().iter().all(|n| *n == Vector3::z()));
        assert!(c.gt_curvatures.unwrap().iter().all(|k| *k == [0.0, 0.0]));
    }

    #[test]
    fn torus_outer_equator() {
        // standard torus curvatures: 1/r across the tube, cos v/(R + r cos v) around the ring
        let (big, small) = (2.0, 0.5);
        let c = generate_shape(&ShapeSpec::new(ShapeKind::Torus { major: big, minor: small }, 20000, 3)).unwrap();
        let k = c.gt_curvatures.unwrap();
        let (i, _) = c
            .positions
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (Vector3::new(p.x, p.y, 0.0).norm() - 2.5).abs() + p.z.abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((k[i][0] - 2.0).abs() < 1e-9);
        assert!((k[i][1] - 0.4).abs() < 2e-3);
        for (p, n) in c.positions.iter().zip(c.gt_normals.unwrap()) {
            let ring = Vector3::new(p.x, p.y, 0.0).normalize() * big;
            assert!(((p - ring).norm() - small).abs() < 1e-12);
            assert!((n - (p - ring) / small).norm() < 1e-9);
        }
    }

    #[test]
    fn paraboloid_matches_height_function_convention() {
        assert_eq!(graph_curvatures(0.0, 0.0, 1.0, 0.0, 1.0), [-1.0, -1.0]);
        let [k1, k2] = graph_curvatures(0.0, 0.0, 2.0, 0.0, -1.0);
        assert_eq!((k1, k2), (1.0, -2.0));
        let c = generate_shape(&spec(ShapeKind::Saddle { a: 0.5, b: 0.5, extent: 1.0 })).unwrap();
        for (p, n) in c.positions.iter().zip(c.gt_normals.unwrap()) {
            assert!((p.z - 0.5 * (p.x * p.x - p.y * p.y)).abs() < 1e-12);
            assert!(n.cross(&Vector3::new(-p.x, p.y, 1.0)).norm() < 1e-12 && n.z > 0.0);
        }
    }

    #[test]
    fn cylinder_curvatures() {
        let c = generate_shape(&spec(ShapeKind::Cylinder { radius: 0.25, height: 1.0 })).unwrap();
        assert!(c.gt_curvatures.unwrap().iter().all(|k| *k == [4.0, 0.0]));
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let s = spec(ShapeKind::Torus { major: 1.0, minor: 0.3 });
        assert_eq!(generate_shape(&s).unwrap(), generate_shape(&s).unwrap());
        assert!(generate_shape(&spec(ShapeKind::Sphere { radius: -1.0 })).is_err());
        assert!(generate_shape(&spec(ShapeKind::Torus { major: 1.0, minor: 1.0 })).is_err());
        assert!(generate_shape(&ShapeSpec::new(ShapeKind::Plane { size: 1.0 }, 0, 0)).is_err());
    }

    #[test]
    fn corner_faces_meet_at_angle() {
        let c = generate_corner(1000, 90.0, 0).unwrap();
        let n = c.gt_normals.as_ref().unwrap();
        assert!((n[0].dot(&n[999])).abs() < 1e-12);
        // every point lies on one of the two faces
        for (p, nv) in c.positions.iter().zip(n) {
            assert!(p.dot(nv).abs() < 1e-12);
        }
    }

    #[test]
    fn outliers_leave_the_surface() {
        let c = generate_shape(&spec(ShapeKind::Plane { size: 1.0 })).unwrap();
        let (out, idx) = inject_outliers(&c, 0.1, 0.05, 9).unwrap();
        assert_eq!(idx.len(), 200);
        assert_eq!(out.len(), 2200);
        assert!(idx.iter().all(|&i| out.positions[i].z.abs() >= 0.025));
        assert_eq!(out.eval_set().len(), 2000);
    }
}
