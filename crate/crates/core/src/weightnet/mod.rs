//! Point-set network mapping a normalized patch to one weight per point.

pub mod checkpoint;
pub mod layers;
pub mod net;
pub mod tensor;

pub use layers::{Mode, Visitor, VisitorMut};
pub use net::{ActivationPattern, NetArch, Trace, WeightNet, WeightNetOutput, DEFAULT_EPSILON};
pub use tensor::Mat;
