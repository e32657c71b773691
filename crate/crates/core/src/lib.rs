//! Self-supervised 6D pose refinement from render-to-real optical flow.
//!
//! A mesh is rendered at several poses around an initial estimate, a flow
//! predictor matches each render against the real image, and a multi-view
//! consistency check turns the flow fields into 2D-3D correspondences and
//! pseudo flow labels. A mean-teacher learner refines the predictor on those
//! labels, and a RANSAC PnP solver turns the final correspondences into a pose.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod image_io;
pub mod learner;
pub mod mesh;
pub mod metrics;
pub mod photometric;
pub mod pnp;

pub use consistency::{build_consistency, ConsistencyConfig, ConsistencyError, ConsistencyResult};
pub use flow::{FlowError, FlowField};
pub use geometry::{CameraIntrinsics, GeometryError, Pose};
pub use grid::Grid;
pub use harness::{ExperimentConfig, HarnessError};
pub use learner::{FlowPredictor, LearnerError, PredictorWeights, TrainConfig, TrainingView};
pub use mesh::{
    make_procedural_mesh, rasterize, subdivide_textured, MeshError, MeshKind, RenderError,
    RenderOutput, TriangleMesh,
};
pub use metrics::{MetricsError, PoseErrorReport};
pub use pnp::{solve_pnp, PnPConfig, PnPSolution, PnpError};

use thiserror::Error;

/// Any error the library can produce.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}
