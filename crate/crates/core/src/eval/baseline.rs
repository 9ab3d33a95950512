//! Classical normal estimators used as references.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fit::{FitOptions, PointFit};
use crate::jet::{build_vandermonde, jet_normal, make_preconditioner, solve_ls, JetOrder};
use crate::neighborhood::{denormalize_normal, pca_axes, Patch};

/// Neighborhood sizes of the small, medium and large jet scales.
pub const JET_SCALES: [usize; 3] = [18, 122, 450];

/// Direction of least variance of `points` about their centroid.
pub fn pca_normal(points: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    let (axes, _) = pca_axes(points).ok_or_else(|| Error::DegeneratePatch("points do not span a plane".into()))?;
    Ok(axes.column(2).into_owned())
}

/// Unweighted jet normal of a patch, in world coordinates.
pub fn jet_normal_unweighted(patch: &Patch, order: JetOrder, ridge: f64) -> Result<Vector3<f64>> {
    let xy = patch.xy();
    let design = build_vandermonde(&xy, order)?;
    let pre = make_preconditioner(&xy, order)?;
    let jet = solve_ls(&design, &patch.heights(), &pre, ridge)?;
    Ok(denormalize_normal(patch, &jet_normal(&jet)))
}

/// PCA estimate packaged like a fit, so benchmarks can treat methods alike.
pub(crate) fn pca_fit(patch: &Patch, _opts: &FitOptions) -> Result<PointFit> {
    let normal = pca_normal(&patch.local_points).map(|n| denormalize_normal(patch, &n))?;
    Ok(PointFit {
        query_index: patch.query_index,
        normal,
        curvatures: None,
        directions: None,
        neighbor_indices: patch.neighbor_indices.clone(),
        weights: vec![1.0; patch.len()],
        ridge_used: 0.0,
    })
}
