//! Single-image radiance fields trained with geometry-guided multi-view
//! synthesis and a pose-conditioned depth discriminator.

pub mod camera;
pub mod config;
pub mod dual;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision of trained models and checkpoints.
pub type Real = f32;
pub type Model = model::GNerf<Real>;
pub type ModelTrainer = train::Trainer<Real>;
pub type TrainingData = train::TrainData<Real>;
/// The oracle and its ground truth run in double precision.
pub type OracleSetup = oracle::SynthesisSetup<f64>;
pub type Pose = camera::CameraPose<f64>;
pub type RgbImage = image::Image<f64>;
