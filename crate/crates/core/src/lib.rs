//! Piecewise multi-view photometric reconstruction.
//!
//! A coarse mesh built from sparse tracked points partitions every view into triangular
//! patches. Each patch is registered onto a fronto-parallel template, solved as a small
//! photometric stereo problem with missing data, integrated into a height field, and the
//! resulting surface patches are stitched back onto the mesh and refined into one surface.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the `*64` aliases below name
//! the `f64` instantiations used by the command-line tool.

pub mod align;
pub mod decompose;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod linalg;
pub mod photometric;
pub mod pipeline;
pub mod refine;
pub mod register;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

pub type CoarseMesh64 = geometry::CoarseMesh<f64>;
pub type FacetFrame64 = geometry::FacetFrame<f64>;
pub type Barycentric64 = geometry::Barycentric<f64>;
pub type ImageFrame64 = image::ImageFrame<f64>;
pub type PatchStack64 = register::PatchStack<f64>;
pub type TemplateRaster64 = register::TemplateRaster<f64>;
pub type PhotometricFactors64 = photometric::PhotometricFactors<f64>;
pub type HeightField64 = photometric::HeightField<f64>;
