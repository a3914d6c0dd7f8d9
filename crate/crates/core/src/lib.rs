//! Neural light-transport fields at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`envmap`] holds the equirectangular lighting grid, its quadrature, the
//!   rotation operator, confidence-weighted merging and the relighting dot
//!   product.
//! * [`scene`] provides analytic sphere scenes, pinhole cameras, rays,
//!   intersections, silhouettes and the ground-truth density.
//! * [`transport`] bakes ground-truth transport vectors, renders reference
//!   images through an independent code path and inverts images for lighting.
//! * [`volrender`] marches rays through a density/radiance field, with
//!   visual-hull pruning and exact reverse-mode gradients.
//! * [`nelf`] is the trainable field: hand-crafted per-view features, the
//!   geometry/density/transport/blending networks, a batched reverse-mode tape
//!   and Adam.
//! * [`pipeline`] generates datasets, defines the losses and metrics, and
//!   runs training, evaluation and ablations.

pub mod envmap;
pub mod error;
pub mod nelf;
pub mod pfm;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod transport;
pub mod volrender;

pub use envmap::{ConfidenceMap, EnvironmentMap, RotationOp, TransportVector};
pub use error::{NelfError, Result};
pub use raster::{RgbImage, ScalarImage};
pub use scene::{AnalyticScene, Camera, Mask, Ray, Sphere};
pub use volrender::{MarchConfig, RenderOutput};

/// 3-vector used for points and directions (meters / unit vectors).
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix used for rotations.
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Deterministic 64-bit mixer (SplitMix64 finaliser) used to derive
/// independent seeds from a base seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rounds a value to the nearest 32-bit float and widens it back.
#[inline]
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
