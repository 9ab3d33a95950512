//! Point clouds, k-nearest-neighbor patches and the local fitting frame.
//!
//! A [`Patch`] is built in three steps: translate so the query sits at the
//! origin, divide by the largest neighbor distance so the patch fits the unit
//! sphere, then rotate into the PCA frame whose last axis is the direction of
//! least variance. Jets are fitted as height functions over the first two
//! axes of that frame.

mod kdtree;

pub use kdtree::{NeighborIndex, BRUTE_FORCE_LIMIT};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub gt_normals: Option<Vec<Vector3<f64>>>,
    /// `[k1, k2]` per point, maximum curvature first.
    pub gt_curvatures: Option<Vec<[f64; 2]>>,
    pub eval_indices: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            ..Default::default()
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = self.positions.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite position at row {i}")));
        }
        if let Some(normals) = &self.gt_normals {
            if normals.len() != n {
                return Err(Error::Format(format!(
                    "{} normals for {n} positions",
                    normals.len()
                )));
            }
            if let Some(i) = normals.iter().position(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidInput(format!("normal at row {i} is not unit length")));
            }
        }
        if let Some(curv) = &self.gt_curvatures {
            if curv.len() != n {
                return Err(Error::Format(format!("{} curvatures for {n} positions", curv.len())));
            }
        }
        if let Some(idx) = &self.eval_indices {
            if let Some(bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidInput(format!(
                    "evaluation index {bad} out of range for {n} points"
                )));
            }
        }
        Ok(())
    }

    /// Indices used for evaluation: the explicit subset if present, else every point.
    pub fn eval_set(&self) -> Vec<usize> {
        self.eval_indices
            .clone()
            .unwrap_or_else(|| (0..self.len()).collect())
    }

    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Rows `keep` (in that order) with ground truth carried along; evaluation
    /// indices are remapped and those that did not survive are dropped.
    pub fn select(&self, keep: &[usize]) -> PointCloud {
        let mut remap = vec![usize::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        PointCloud {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            gt_normals: self
                .gt_normals
                .as_ref()
                .map(|n| keep.iter().map(|&i| n[i]).collect()),
            gt_curvatures: self
                .gt_curvatures
                .as_ref()
                .map(|c| keep.iter().map(|&i| c[i]).collect()),
            eval_indices: self.eval_indices.as_ref().map(|idx| {
                idx.iter()
                    .filter_map(|&i| (remap[i] != usize::MAX).then_some(remap[i]))
                    .collect()
            }),
        }
    }

    /// Apply `p ↦ R p + t`; normals rotate, curvatures are unchanged.
    pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| rotation * p + translation).collect(),
            gt_normals: self
                .gt_normals
                .as_ref()
                .map(|n| n.iter().map(|v| rotation * v).collect()),
            gt_curvatures: self.gt_curvatures.clone(),
            eval_indices: self.eval_indices.clone(),
        }
    }

    /// Uniform scaling; curvatures are divided by `s`.
    pub fn scaled(&self, s: f64) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| p * s).collect(),
            gt_normals: self.gt_normals.clone(),
            gt_curvatures: self
                .gt_curvatures
                .as_ref()
                .map(|c| c.iter().map(|k| [k[0] / s, k[1] / s]).collect()),
            eval_indices: self.eval_indices.clone(),
        }
    }

    /// Concatenate clouds. Ground truth survives only if every part has it.
    pub fn concat(parts: &[PointCloud]) -> PointCloud {
        let mut out = PointCloud::default();
        let all_normals = parts.iter().all(|p| p.gt_normals.is_some());
        let all_curv = parts.iter().all(|p| p.gt_curvatures.is_some());
        let any_eval = parts.iter().any(|p| p.eval_indices.is_some());
        let mut normals = Vec::new();
        let mut curv = Vec::new();
        let mut eval = Vec::new();
        for part in parts {
            let offset = out.positions.len();
            out.positions.extend_from_slice(&part.positions);
            if let Some(n) = &part.gt_normals {
                normals.extend_from_slice(n);
            }
            if let Some(c) = &part.gt_curvatures {
                curv.extend_from_slice(c);
            }
            if any_eval {
                eval.extend(part.eval_set().into_iter().map(|i| i + offset));
            }
        }
        out.gt_normals = all_normals.then_some(normals);
        out.gt_curvatures = all_curv.then_some(curv);
        out.eval_indices = any_eval.then_some(eval);
        out
    }
}

/// Brute-force-or-tree k-NN on a cloud; builds a fresh index per call.
///
/// Use [`NeighborIndex`] directly when querying the same cloud repeatedly.
pub fn knn(cloud: &PointCloud, query_index: usize, k: usize) -> Result<Vec<usize>> {
    check_knn_args(cloud.len(), query_index, k)?;
    Ok(NeighborIndex::new(&cloud.positions).knn(query_index, k))
}

pub(crate) fn check_knn_args(n: usize, query_index: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }
    if query_index >= n {
        return Err(Error::InvalidInput(format!(
            "query index {query_index} out of range for {n} points"
        )));
    }
    Ok(())
}

/// A neighborhood in normalized local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Rotated into the fitting basis; the query point is the origin.
    pub local_points: Vec<Vector3<f64>>,
    /// Parent-cloud index of each local point, row-aligned with `local_points`.
    pub neighbor_indices: Vec<usize>,
    pub query_index: usize,
    /// World length of one local unit.
    pub scale: f64,
    /// Columns are the fitting axes in world coordinates, least variance last.
    pub basis: Matrix3<f64>,
    pub query_world: Vector3<f64>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.local_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_points.is_empty()
    }

    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.local_points.iter().map(|p| [p.x, p.y]).collect()
    }

    pub fn heights(&self) -> Vec<f64> {
        self.local_points.iter().map(|p| p.z).collect()
    }

    /// World-frame direction to local frame.
    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.basis.transpose() * v
    }
}

/// Translate, scale to the unit sphere and rotate into the PCA frame.
pub fn normalize_patch(
    cloud: &PointCloud,
    neighbor_indices: &[usize],
    query_index: usize,
) -> Result<Patch> {
    normalize_patch_oriented(cloud, neighbor_indices, query_index, None)
}

/// As [`normalize_patch`], flipping the last axis to agree with `hint` when given.
pub fn normalize_patch_oriented(
    cloud: &PointCloud,
    neighbor_indices: &[usize],
    query_index: usize,
    hint: Option<&Vector3<f64>>,
) -> Result<Patch> {
    if query_index >= cloud.len() {
        return Err(Error::InvalidInput(format!(
            "query index {query_index} out of range for {} points",
            cloud.len()
        )));
    }
    if let Some(bad) = neighbor_indices.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::InvalidInput(format!("neighbor index {bad} out of range")));
    }
    let query = cloud.positions[query_index];
    let centered: Vec<Vector3<f64>> = neighbor_indices
        .iter()
        .map(|&i| cloud.positions[i] - query)
        .collect();
    let scale = centered.iter().fold(0.0f64, |m, p| m.max(p.norm()));
    if scale <= 0.0 {
        return Err(Error::DegeneratePatch(format!(
            "all neighbors of point {query_index} coincide with it"
        )));
    }
    let scaled: Vec<Vector3<f64>> = centered.iter().map(|p| p / scale).collect();
    let basis = pca_basis(&scaled, hint).ok_or_else(|| {
        Error::DegeneratePatch(format!("neighbors of point {query_index} are collinear"))
    })?;
    let bt = basis.transpose();
    Ok(Patch {
        local_points: scaled.iter().map(|p| bt * p).collect(),
        neighbor_indices: neighbor_indices.to_vec(),
        query_index,
        scale,
        basis,
        query_world: query,
    })
}

fn covariance(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov / n
}

/// Eigenvectors of the covariance sorted by descending eigenvalue, with
/// eigenvalues. Returns `None` when the two largest do not span a plane.
pub(crate) fn pca_axes(points: &[Vector3<f64>]) -> Option<(Matrix3<f64>, [f64; 3])> {
    if points.len() < 3 {
        return None;
    }
    let eig = covariance(points).symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = [
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    ];
    if vals[0].is_nan() || vals[0] <= 0.0 || vals[1] <= 1e-12 * vals[0] {
        return None;
    }
    let axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    Some((axes, vals))
}

fn pca_basis(points: &[Vector3<f64>], hint: Option<&Vector3<f64>>) -> Option<Matrix3<f64>> {
    let (mut basis, _) = pca_axes(points)?;
    if basis.determinant() < 0.0 {
        basis.set_column(2, &(-basis.column(2)));
    }
    if let Some(h) = hint {
        if basis.column(2).dot(h) < 0.0 {
            // flipping two axes keeps the frame right-handed
            basis.set_column(2, &(-basis.column(2)));
            basis.set_column(1, &(-basis.column(1)));
        }
    }
    Some(basis)
}

/// Local unit normal back to world coordinates.
pub fn denormalize_normal(patch: &Patch, local_normal: &Vector3<f64>) -> Vector3<f64> {
    (patch.basis * local_normal).normalize()
}

/// Local curvature (per local unit) to world curvature (per world unit).
pub fn denormalize_curvature(patch: &Patch, k: f64) -> f64 {
    k / patch.scale
}

/// k-NN followed by normalization.
pub fn extract_patch(
    cloud: &PointCloud,
    index: &NeighborIndex,
    query_index: usize,
    k: usize,
) -> Result<Patch> {
    check_knn_args(cloud.len(), query_index, k)?;
    let nbrs = index.knn(query_index, k);
    normalize_patch(cloud, &nbrs, query_index)
}
