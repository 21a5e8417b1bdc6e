//! Reshading pipeline: insert an object fragment from a source image into a
//! target scene and regenerate only its shading so the paste looks coherent.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`imaging`] — deterministic field algebra: masked compositing, the
//!   albedo/shading image-formation model, Lambertian rendering, placement.
//! - [`synth`] — procedural training corpora: Mondrian albedo mosaics,
//!   gradient-noise shading fields, and localized shading distortions.
//! - [`nn`] — a small deterministic CPU tensor/backprop stack shared by all
//!   trained models.
//! - [`decomposition`] — the albedo/shading separation network.
//! - [`features`] — the illumination-robust feature extractor used by the
//!   perceptual consistency loss.
//! - [`normals`] — surface-normal estimation backends and analytic test scenes.
//! - [`discriminator`] — the normal/shading agreement discriminator with a
//!   global score and a per-pixel realness map.
//! - [`dip`] — the per-job reshading optimizer itself.
//! - [`pipeline`] — configuration, artifact validation, manifests, reports,
//!   and the end-to-end demo.

pub mod decomposition;
pub mod dip;
pub mod discriminator;
pub mod error;
pub mod features;
pub mod field_bridge;
pub mod imaging;
pub mod nn;
pub mod normals;
pub mod pipeline;
pub mod pngio;
pub mod synth;

pub use error::Error;
pub use imaging::{
    cut_and_paste_2d, cut_and_paste_3d, extract_object, form_image, lambertian_shading,
    place_field_2d, place_field_3d, place_mask, recover_albedo, AlbedoField, Image, LightSpec,
    Mask, NormalField, Placement, ShadingField,
};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
