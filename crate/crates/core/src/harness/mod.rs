//! Synthetic scenes with a photometric domain gap, end-to-end experiments and
//! the four-variant loss ablation.

mod config;
mod experiment;
mod export;
mod scene;

pub use config::{load_config, parse_config, ExperimentConfig, SceneSection};
pub use experiment::{
    ablation_suite, ablation_variants, generate_scene_at, generate_scenes, load_meshes, prepare,
    run_experiment, train_and_evaluate, write_ablation_csv, write_artifacts, ExperimentOutcome,
    ExperimentSummary, Phase, PreparedSuite, SceneEvaluation,
};
pub use export::{
    coord_map_image, pose_path, reevaluate, summarize_stored, write_poses, write_render_debug,
    write_scene, write_stored_evaluations, StoredEvaluation,
};
pub use scene::{
    generate_scene, sample_truth_pose, Background, DomainGapConfig, SceneBundle, SceneLayout,
};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Render(#[from] crate::mesh::RenderError),
    #[error(transparent)]
    Learner(#[from] crate::learner::LearnerError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True for problems with the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Parse { .. } | HarnessError::Config(_))
    }
}
