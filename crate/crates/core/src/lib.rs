//! Polarization-guided refinement of monocular surface normals.
//!
//! A frozen normal estimator (the *backbone*) predicts a normal map from an
//! intensity image. Single-shot linear polarization measurements then steer
//! that prediction at test time: a learnable image offset is fed through the
//! backbone, a learnable normal offset is added to its output, and a learnable
//! specular radiance map splits the observed intensity into diffuse and
//! specular parts. A closed-form Fresnel model turns normals and radiances into
//! Stokes vectors, and the masked L1 distance to the measured Stokes vectors is
//! minimized with Adam while the backbone stays untouched.
//!
//! Module map:
//!
//! - [`polarimetry`]: Stokes vectors from polarizer captures, DoLP/AoLP, validity masks.
//! - [`camera`]: orthographic and field-of-view perspective viewing rays.
//! - [`fresnel`]: the differentiable normal-to-Stokes renderer and its vector-Jacobian product.
//! - [`backbone`]: the frozen-estimator abstraction, toy estimators and the bridge client.
//! - [`guidance`]: loss, Adam and the staged refinement loop.
//! - [`synth`]: synthetic polarimetric scenes, normal corruptions and sensor noise.
//! - [`metrics`]: angular error statistics.
//! - [`analysis`]: Jacobian sensitivity maps and parameter sweeps.
//! - [`decomposition`]: diffuse/specular decomposition and appearance edits.

pub mod analysis;
pub mod backbone;
pub mod camera;
pub mod decomposition;
mod error;
pub mod fresnel;
pub mod grid;
pub mod guidance;
pub mod metrics;
pub mod polarimetry;
pub mod reduce;
pub mod synth;

pub use crate::error::{Error, Result};
pub use crate::grid::{Image, Mask, NormalMap, Shape, VectorField};
