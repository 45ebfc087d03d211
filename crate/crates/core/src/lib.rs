//! Fixed-topology triangle mesh reconstruction from multi-view images.
//!
//! A template mesh induces a density field through point-to-mesh distances.
//! Volume rendering that field together with a tri-plane appearance model
//! gives images whose error can be pushed back onto vertex positions, so the
//! mesh is fitted to the photographs while its connectivity never changes.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`]: triangle meshes, closest-point queries and their derivatives,
//!   pseudo-normals and Laplacian deltas.
//! * [`spatial`]: an octree over triangles for nearest-triangle queries and
//!   empty-space skipping along rays.
//! * [`render`]: cameras, ray sampling, the distance-to-opacity mapping,
//!   compositing and the per-ray backward pass.
//! * [`appearance`]: tri-plane features, positional encoding and the MLP
//!   colour decoder.
//! * [`params`]: the parameter/gradient stores, Adam and finite-difference
//!   gradient checking.
//! * [`losses`]: the training objectives.
//! * [`trainer`]: the progressive three-stage optimisation driver.
//! * [`io`]: scene files, checkpoints, synthetic fixtures and evaluation.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too, and small
// fixed-size channel loops read better indexed
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod appearance;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod objective;
pub mod params;
pub mod render;
pub mod spatial;
pub mod trainer;

pub use appearance::{MlpDecoder, PositionalEncoding, TriPlanes};
pub use error::{Error, Result};
pub use geometry::{Aabb, Ray, Vec3};
pub use io::scene::{SceneBundle, View};
pub use losses::{LandmarkSet, LossWeights};
pub use mesh::{ClosestPointResult, Region, TriangleMesh};
pub use params::{AdamState, GradStore, LearningRates, ParamGroup, ParamStore};
pub use render::{Camera, DensityMapping, PixelRender, RenderSettings, SamplePoint};
pub use spatial::{Octree, OctreeParams};
pub use trainer::{Stage, TrainConfig, TrainLog, Trainer};
