//! Stage two: turn a coarse object into a mesh and refine its geometry and
//! texture with score distillation.

pub mod error;
pub mod hashgrid;
pub mod marching;
mod mc_tables;
pub mod mesh;
pub mod pipeline;
pub mod raster;
pub mod score;
pub mod sdf;
pub mod sds;

pub use error::{RefineError, Result};
pub use hashgrid::{BoundTexture, HashGridConfig, HashGridTexture};
pub use mesh::Mesh;
pub use pipeline::{refine_pipeline, triplane_to_mesh, AnalyticPriors, Priors, RefineConfig, RefineOutput, RefineReport};
pub use score::{Codec, IdentityCodec, PoolCodec, ScoreMode, ScoreModel, ViewAnalyticPrior};
pub use sdf::SdfGrid;
pub use sds::{render_refined, Prompts, RefineState, SdsConfig, Weighting};
pub use trigen_stage1::diffusion::AnalyticGaussianScore;
