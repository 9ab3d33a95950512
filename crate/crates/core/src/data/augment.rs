//! Point perturbation and density-varying subsampling.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::PointCloud;

/// Zero-mean Gaussian noise per coordinate with `σ = sigma_frac_bbox × bbox diagonal`.
/// Ground truth is left untouched.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma_frac_bbox: f64, seed: u64) -> Result<PointCloud> {
    cloud.validate()?;
    if !(sigma_frac_bbox >= 0.0 && sigma_frac_bbox.is_finite()) {
        return Err(Error::InvalidInput(format!("noise level must be >= 0, got {sigma_frac_bbox}")));
    }
    if sigma_frac_bbox == 0.0 {
        return Ok(cloud.clone());
    }
    let sigma = sigma_frac_bbox * cloud.bbox_diagonal();
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for p in &mut out.positions {
        *p += Vector3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Density {
    /// Keep-probability rising linearly from `p_min` to `p_max` along the
    /// longest bounding-box axis.
    Gradient { p_min: f64, p_max: f64 },
    /// Along `axis` (longest bounding-box axis when `None`), the axis extent is
    /// cut into `bands` equal periods and the first `drop_fraction` of each
    /// period is removed.
    Stripes { bands: usize, drop_fraction: f64, axis: Option<usize> },
}

impl Density {
    pub const DEFAULT_GRADIENT: Density = Density::Gradient { p_min: 0.3, p_max: 1.0 };
    pub const DEFAULT_STRIPES: Density = Density::Stripes {
        bands: 8,
        drop_fraction: 0.3,
        axis: None,
    };

    fn validate(&self) -> Result<()> {
        match *self {
            Density::Gradient { p_min, p_max } => {
                for p in [p_min, p_max] {
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(Error::InvalidInput(format!("keep probability must lie in (0, 1], got {p}")));
                    }
                }
            }
            Density::Stripes { bands, drop_fraction, axis } => {
                if bands == 0 {
                    return Err(Error::InvalidInput("stripes need at least one band".into()));
                }
                if !(0.0..=1.0).contains(&drop_fraction) {
                    return Err(Error::InvalidInput(format!("drop fraction must lie in [0, 1], got {drop_fraction}")));
                }
                if axis.is_some_and(|a| a > 2) {
                    return Err(Error::InvalidInput("stripe axis must be 0, 1 or 2".into()));
                }
            }
        }
        Ok(())
    }
}

/// Subsamples `cloud` and returns the survivors with the kept row indices.
pub fn subsample_density(cloud: &PointCloud, density: &Density, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    cloud.validate()?;
    density.validate()?;
    let (lo, hi) = cloud.bounding_box();
    let extent = hi - lo;
    let longest = extent.imax();
    let t = |p: &Vector3<f64>, axis: usize| {
        if extent[axis] > 0.0 {
            (p[axis] - lo[axis]) / extent[axis]
        } else {
            0.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<usize> = match *density {
        Density::Gradient { p_min, p_max } => cloud
            .positions
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let prob = p_min + (p_max - p_min) * t(p, longest);
                // one draw per point keeps the stream aligned with row order
                let u: f64 = rng.random();
                (u < prob).then_some(i)
            })
            .collect(),
        Density::Stripes { bands, drop_fraction, axis } => {
            let axis = axis.unwrap_or(longest);
            cloud
                .positions
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let phase = (t(p, axis) * bands as f64).fract();
                    // the far end of the axis belongs to the last period's start
                    let phase = if t(p, axis) >= 1.0 { 0.0 } else { phase };
                    (phase >= drop_fraction).then_some(i)
                })
                .collect()
        }
    };
    if keep.is_empty() {
        return Err(Error::InvalidInput("subsampling removed every point".into()));
    }
    Ok((cloud.select(&keep), keep))
}
