//! Dataset files, synthetic shapes and perturbations.

pub mod augment;
pub mod corpus;
pub mod pcpnet;
pub mod shapes;

pub use augment::{add_gaussian_noise, subsample_density, Density};
pub use corpus::{write_corpus, CorpusEntry, CorpusSpec, NamedCloud, Outliers};
pub use pcpnet::{load_pcpnet, read_manifest, save_pcpnet, sibling, SaveWhat};
pub use shapes::{generate_corner, generate_shape, inject_outliers, random_rotation, ShapeKind, ShapeSpec};
