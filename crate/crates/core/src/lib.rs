//! End-to-end 6DoF object pose estimation from bounding-box corner heatmaps.
//!
//! The pipeline: recover an object's 3D bounding box from masked multiview
//! point clouds ([`geom`]), encode reference box projections as per-corner
//! heatmaps ([`heatmap`]), predict the query view's heatmap with a small
//! reference-conditioned transformer ([`nn`]), and solve for the pose with
//! DLT + Levenberg-Marquardt PnP ([`pnp`]). Training, synthetic scene
//! generation, metrics and the on-disk formats live in [`train`], [`eval`]
//! and [`io`]; the `boxpose` binary wires them into a CLI ([`cli`]).

pub mod cli;
pub mod eval;
pub mod gen;
pub mod geom;
pub mod heatmap;
pub mod image;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pnp;
pub mod train;
