//! Query-driven trajectory simplification.
//!
//! The crate selects which points of a trajectory database to retain under a
//! global storage budget so that downstream spatio-temporal queries (range,
//! k-nearest-neighbour, similarity, clustering) return nearly the same
//! answers on the simplified data as on the original. Importance scores come
//! from a graph-attention model over point and segment embeddings, amplified
//! during training by a conditional denoising diffusion model; classical
//! error-driven simplifiers and a query-accuracy evaluation harness round
//! out the toolkit.

pub mod baselines;
pub mod cli;
pub mod ckpt;
pub mod diffusion;
pub mod dist;
pub mod encoder;
pub mod error;
pub mod geo;
pub mod importance;
pub mod mutual;
pub mod pipeline;
pub mod query;
pub mod sampling;
pub mod synth;
pub mod traj;
pub mod workload;

pub use error::{Error, ErrorCategory, Result};
pub use geo::Projection;
pub use traj::{Point, SimplifiedDatabase, TrajId, Trajectory, TrajectoryDatabase};
