//! Single-image textured mesh reconstruction.
//!
//! A generator maps one image to a deformation of a template sphere and a UV
//! texture. Training runs in three stages: novel-view perceptual, silhouette
//! and smoothness losses; an added same-view perceptual term masked by the
//! predicted silhouette; and a UV-space conditional GAN whose real samples are
//! partial textures projected from other views through the predicted mesh.

pub mod autograd;
pub mod datagen;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod mesh;
pub mod nn;
pub mod renderer;
pub mod tensor;
pub mod train;
pub mod uv_project;

pub use autograd::{Graph, Var};
pub use datagen::{CorruptionSpec, DatasetConfig, MultiViewSample, SceneSpec, ViewSpec};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport, GeneratorPredictor, OraclePredictor, Predictor};
pub use generator::{Generator, GeneratorConfig, Prediction};
pub use losses::{FeatureExtractor, LossWeights};
pub use mesh::{DeformationMap, DeformedMesh, TemplateMesh};
pub use renderer::{Camera, RenderOutput};
pub use tensor::Tensor;
pub use train::{Curriculum, StageSchedule, TrainConfig, Trainer};
pub use uv_project::{PartialTexture, UvRaster};
