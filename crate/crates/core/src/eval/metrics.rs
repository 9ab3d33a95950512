//! Error metrics and weight-based point removal.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::neighborhood::PointCloud;

/// Angle in degrees between two directions, ignoring orientation.
///
/// Equal to `acos(|a·b|)` for unit inputs; the `atan2` form stays accurate
/// near 0° where `acos` loses half the digits.
pub fn angle_error_unoriented(n_est: &Vector3<f64>, n_gt: &Vector3<f64>) -> f64 {
    n_est.cross(n_gt).norm().atan2(n_est.dot(n_gt).abs()).to_degrees()
}

/// Root mean square; NaN for an empty slice.
pub fn rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Integer degrees 0..=30.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=30).map(f64::from).collect()
}

/// Fraction of errors strictly below each threshold; NaN entries for an empty slice.
pub fn pgp(errors: &[f64], alpha_grid: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![f64::NAN; alpha_grid.len()];
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    alpha_grid
        .iter()
        .map(|&a| sorted.partition_point(|&e| e < a) as f64 / sorted.len() as f64)
        .collect()
}

/// `|k_est − k_gt| / max(|k_gt|, 1)`.
pub fn curvature_error(k_est: f64, k_gt: f64) -> f64 {
    ((k_est - k_gt) / k_gt.abs().max(1.0)).abs()
}

/// Puts an estimated curvature pair into the ground-truth convention: signs
/// flipped when the estimated normal opposes the ground-truth one, then
/// ordered as signed `(max, min)`.
pub fn align_curvatures(n_est: &Vector3<f64>, n_gt: &Vector3<f64>, k: [f64; 2]) -> [f64; 2] {
    let (a, b) = if n_est.dot(n_gt) < 0.0 { (-k[0], -k[1]) } else { (k[0], k[1]) };
    if a >= b {
        [a, b]
    } else {
        [b, a]
    }
}

/// RMS of [`curvature_error`] per component over aligned pairs.
pub fn curvature_rms(est: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<[f64; 2]> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{} estimates for {} ground-truth rows", est.len(), gt.len())));
    }
    let mut out = [0.0; 2];
    for (j, o) in out.iter_mut().enumerate() {
        let d: Vec<f64> = est.iter().zip(gt).map(|(e, g)| curvature_error(e[j], g[j])).collect();
        *o = rmse(&d);
    }
    Ok(out)
}

/// For each of `n_points`, the sum of the weights it received across all
/// neighborhoods. Each neighborhood is `(neighbor_indices, weights)`.
pub fn aggregate_weights<'a, I>(n_points: usize, neighborhoods: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (&'a [usize], &'a [f64])>,
{
    let mut sum = vec![0.0; n_points];
    for (idx, w) in neighborhoods {
        if idx.len() != w.len() {
            return Err(Error::InvalidInput(format!("{} weights for {} neighbors", w.len(), idx.len())));
        }
        for (&i, &wi) in idx.iter().zip(w) {
            let slot = sum
                .get_mut(i)
                .ok_or_else(|| Error::InvalidInput(format!("neighbor index {i} out of range for {n_points} points")))?;
            *slot += wi;
        }
    }
    Ok(sum)
}

/// Threshold `μ − σ` (population standard deviation) of the summed weights.
/// Constant input yields a threshold equal to that constant.
pub fn denoise_threshold(summed: &[f64]) -> f64 {
    let n = summed.len() as f64;
    let first = summed[0];
    if summed.iter().all(|&s| s == first) {
        // mean and deviation of a constant may round away from it
        return first;
    }
    let mean = summed.iter().sum::<f64>() / n;
    let var = summed.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    mean - var.sqrt()
}

/// Relative slack on the threshold comparison. With two points the threshold
/// is exactly the smaller value, and rounding must not decide its fate.
pub const DENOISE_SLACK: f64 = 1e-12;

/// Keeps points whose summed weight is at least `μ − σ`. Returns the filtered
/// cloud and the kept row indices.
pub fn denoise(cloud: &PointCloud, summed: &[f64]) -> Result<(PointCloud, Vec<usize>)> {
    if summed.len() != cloud.len() {
        return Err(Error::InvalidInput(format!("{} summed weights for {} points", summed.len(), cloud.len())));
    }
    if cloud.is_empty() {
        return Err(Error::InvalidInput("point cloud is empty".into()));
    }
    if summed.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("summed weights must be finite".into()));
    }
    let scale = summed.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let t = denoise_threshold(summed) - DENOISE_SLACK * scale;
    let keep: Vec<usize> = (0..summed.len()).filter(|&i| summed[i] >= t).collect();
    Ok((cloud.select(&keep), keep))
}
