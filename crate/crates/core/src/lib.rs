//! Gray-scale fakeness maps for locating manipulated regions in face images.

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod imaging;
pub mod locator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod rng;
pub mod robustness;
pub mod texturegen;
pub mod training;

pub use error::{Error, Result};
pub use imaging::{BinaryMap, FakenessMap, Image};
pub use locator::{ArchConfig, AttentionMap, LocatorNetwork};
pub use texturegen::{Family, Label, SamplePair};
