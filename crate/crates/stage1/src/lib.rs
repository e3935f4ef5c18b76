//! Stage one of the text-to-3D pipeline: tri-plane fields and their volume
//! renderer, a procedural dataset, tri-plane fitting, the tri-plane VAE and
//! conditional latent diffusion.

pub mod camera;
pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod image;
pub mod render;
pub mod synthdata;
pub mod triplane;
pub mod vae;

pub use camera::{Camera, Ray};
pub use error::{Error, Result};
pub use image::Image;
pub use triplane::{SharedDecoder, TriPlane};
