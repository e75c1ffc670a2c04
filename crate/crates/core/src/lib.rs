pub mod ablation;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod phantom;
pub mod stats;
pub mod training;
pub mod volume;

pub use dataio::{FractionRecord, OrderedPair, Organ, PairMode};
pub use error::{Error, Result};
pub use volume::{BoundingBox, Dims, Mask, VolumeGrid};
