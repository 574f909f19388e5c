pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod stats;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DualModelF32 = nn::DualModel<f32>;
pub type DualModelF64 = nn::DualModel<f64>;
pub type VolumeF32 = volume::Volume<f32>;
pub type VolumeF64 = volume::Volume<f64>;
pub type ProbMapF32 = volume::ProbMap<f32>;
pub type ProbMapF64 = volume::ProbMap<f64>;
pub type DatasetF32 = trainer::Dataset<f32>;
pub type DatasetF64 = trainer::Dataset<f64>;
