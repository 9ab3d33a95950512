//! Named synthetic corpora: shape, optional pose, corruption, outliers.
//!
//! JSON form:
//!
//! ```json
//! { "shapes": [
//!     { "name": "ball", "shape": { "kind": "sphere", "radius": 1.0, "sample_count": 5000, "seed": 1 },
//!       "noise": 0.006, "rotate": true },
//!     { "name": "edge", "shape": { "kind": "corner", "angle_deg": 90.0, "sample_count": 4000, "seed": 2 },
//!       "outliers": { "fraction": 0.05, "offset": 0.05 }, "density": { "kind": "gradient", "p_min": 0.3, "p_max": 1.0 } }
//! ] }
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{add_gaussian_noise, subsample_density, Density};
use super::pcpnet::{save_pcpnet, SaveWhat};
use super::shapes::{generate_shape, inject_outliers, random_rotation, ShapeSpec};
use crate::error::{Error, Result};
use crate::neighborhood::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outliers {
    pub fraction: f64,
    /// Mean displacement as a fraction of the bounding-box diagonal.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub name: String,
    pub shape: ShapeSpec,
    /// Gaussian σ as a fraction of the bounding-box diagonal.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub density: Option<Density>,
    #[serde(default)]
    pub outliers: Option<Outliers>,
    /// Apply a random rigid rotation drawn from the shape seed.
    #[serde(default)]
    pub rotate: bool,
}

impl CorpusEntry {
    pub fn clean(name: impl Into<String>, shape: ShapeSpec) -> Self {
        CorpusEntry {
            name: name.into(),
            shape,
            noise: 0.0,
            density: None,
            outliers: None,
            rotate: false,
        }
    }

    /// Generation, pose, density, outliers, then noise, each with its own seed stream.
    pub fn build(&self) -> Result<PointCloud> {
        let mut c = generate_shape(&self.shape)?;
        let seed = self.shape.seed;
        if self.rotate {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            c = c.transformed(&random_rotation(&mut rng), &Vector3::zeros());
        }
        if let Some(d) = &self.density {
            c = subsample_density(&c, d, seed ^ 0x5eed_0002)?.0;
        }
        if let Some(o) = &self.outliers {
            let offset = o.offset * c.bbox_diagonal();
            c = inject_outliers(&c, o.fraction, offset, seed ^ 0x5eed_0003)?.0;
        }
        if self.noise > 0.0 {
            c = add_gaussian_noise(&c, self.noise, seed ^ 0x5eed_0004)?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub shapes: Vec<CorpusEntry>,
}

impl CorpusSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: CorpusSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("corpus lists no shapes".into()));
        }
        let mut names: Vec<&str> = self.shapes.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("shape name {:?} appears twice", w[0])));
        }
        for s in &self.shapes {
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("shape name {:?} is not a plain file name", s.name)));
            }
            s.shape.validate()?;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Vec<NamedCloud>> {
        self.shapes
            .iter()
            .map(|e| {
                Ok(NamedCloud {
                    name: e.name.clone(),
                    cloud: e.build()?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCloud {
    pub name: String,
    pub cloud: PointCloud,
}

/// Writes each cloud as `<dir>/<name>.*` and a `list.txt` manifest; returns the manifest path.
pub fn write_corpus(dir: &Path, clouds: &[NamedCloud]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut list = String::new();
    for c in clouds {
        save_pcpnet(&c.cloud, &dir.join(&c.name), SaveWhat::ALL)?;
        list.push_str(&c.name);
        list.push('\n');
    }
    let manifest = dir.join("list.txt");
    std::fs::write(&manifest, list).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
