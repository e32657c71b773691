use super::export::{create, io_err, write_poses};
use super::{generate_scene, ExperimentConfig, HarnessError, SceneBundle, SceneSection};
use crate::geometry::{rotation_error_deg, translation_error, Pose};
use crate::learner::{
    initialize_weights, run_training, teacher_targets, write_trace_csv, FlowPredictor,
    PoseSnapshot, PredictorWeights, SnapshotHook, TrainState, TrainingTrace, TrainingView,
};
use crate::mesh::{make_procedural_mesh, read_obj, subdivide_textured, MeshKind, TriangleMesh};
use crate::metrics::{
    add, evaluate_scene, summarize, PoseErrorReport, ReportSummary, DEFAULT_DIAMETER_FRACTION,
};
use crate::pnp::pose_from_scene;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// Which pose a row of the evaluation describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// The perturbed starting pose itself.
    Init,
    /// Pose recovered from the initial weights before any training.
    Pretrained,
    /// Pose recovered from the trained teacher.
    Refined,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Pretrained => "pretrained",
            Phase::Refined => "refined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneEvaluation {
    pub scene_id: u32,
    pub phase: Phase,
    /// The pose that was scored.
    pub pose: Pose,
    pub report: PoseErrorReport,
    /// False when pose recovery failed and the initial pose stood in.
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub variant: String,
    pub add_01d_accuracy: f64,
    pub mean_rot_err_deg: f64,
    pub mean_trans_err_m: f64,
    pub init: ReportSummary,
    pub pretrained: ReportSummary,
    pub refined: ReportSummary,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub trace: TrainingTrace,
    pub evaluations: Vec<SceneEvaluation>,
    /// Indexed by scene id.
    pub truth_poses: Vec<Pose>,
}

/// Scenes, their learner-facing views, the shared starting weights and the
/// evaluations that do not depend on training.
#[derive(Debug, Clone)]
pub struct PreparedSuite {
    pub scenes: Vec<SceneBundle>,
    pub views: Vec<TrainingView>,
    pub init_weights: PredictorWeights,
    pub initial: Vec<SceneEvaluation>,
    pub pretrained: Vec<SceneEvaluation>,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The meshes scenes cycle through, textured by subdivision when configured.
pub fn load_meshes(section: &SceneSection) -> Result<Vec<Arc<TriangleMesh>>, HarnessError> {
    let base: Vec<TriangleMesh> = match &section.mesh_file {
        Some(path) => vec![read_obj(path)?],
        None => section
            .meshes
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let kind: MeshKind = name.parse()?;
                make_procedural_mesh(
                    kind,
                    section.mesh_size,
                    mix_seed(section.seed, 1000 + i as u64),
                )
            })
            .collect::<Result<_, _>>()?,
    };
    base.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let m = if section.texture_edge > 0.0 {
                subdivide_textured(
                    &m,
                    section.texture_edge,
                    mix_seed(section.seed, 2000 + i as u64),
                )?
            } else {
                m
            };
            Ok(Arc::new(m))
        })
        .collect()
}

fn scene_at(
    cfg: &ExperimentConfig,
    meshes: &[Arc<TriangleMesh>],
    index: usize,
) -> Result<SceneBundle, HarnessError> {
    let mesh = Arc::clone(&meshes[index % meshes.len()]);
    generate_scene(
        mesh,
        &cfg.scene.layout,
        &cfg.gap,
        index as u32,
        mix_seed(cfg.scene.seed, index as u64),
    )
}

pub fn generate_scenes(cfg: &ExperimentConfig) -> Result<Vec<SceneBundle>, HarnessError> {
    cfg.validate()?;
    let meshes = load_meshes(&cfg.scene)?;
    (0..cfg.scene.count)
        .into_par_iter()
        .map(|i| scene_at(cfg, &meshes, i))
        .collect()
}

/// Scene `index` of the suite [`generate_scenes`] would build.
pub fn generate_scene_at(
    cfg: &ExperimentConfig,
    index: usize,
) -> Result<SceneBundle, HarnessError> {
    cfg.validate()?;
    if index >= cfg.scene.count {
        return Err(HarnessError::Config(format!(
            "scene {index} is out of range for a suite of {}",
            cfg.scene.count
        )));
    }
    scene_at(cfg, &load_meshes(&cfg.scene)?, index)
}

/// Evaluates `estimate`, falling back to the scene's initial pose when there is
/// no estimate or it cannot be scored.
fn score(
    scene: &SceneBundle,
    estimate: Option<Pose>,
    phase: Phase,
) -> Result<SceneEvaluation, HarnessError> {
    let k = &scene.intrinsics;
    if let Some(pose) = estimate {
        if let Ok(report) = evaluate_scene(
            &pose,
            &scene.truth_pose,
            &scene.mesh,
            k,
            DEFAULT_DIAMETER_FRACTION,
        ) {
            return Ok(SceneEvaluation {
                scene_id: scene.scene_id,
                phase,
                pose,
                report,
                recovered: true,
            });
        }
    }
    let report = evaluate_scene(
        &scene.initial_pose,
        &scene.truth_pose,
        &scene.mesh,
        k,
        DEFAULT_DIAMETER_FRACTION,
    )?;
    Ok(SceneEvaluation {
        scene_id: scene.scene_id,
        phase,
        pose: scene.initial_pose,
        report,
        recovered: phase == Phase::Init,
    })
}

fn evaluate_predictor(
    teacher: &dyn FlowPredictor,
    scenes: &[SceneBundle],
    views: &[TrainingView],
    cfg: &ExperimentConfig,
    phase: Phase,
) -> Result<Vec<SceneEvaluation>, HarnessError> {
    scenes
        .par_iter()
        .zip(views)
        .map(|(scene, view)| {
            let targets = teacher_targets(teacher, view, &cfg.train)?;
            let pose = pose_from_scene(
                &view.renders,
                &targets.flows,
                &targets.consistency,
                &view.intrinsics,
                &cfg.pnp,
            )
            .ok()
            .map(|s| s.pose);
            score(scene, pose, phase)
        })
        .collect()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedSuite, HarnessError> {
    let scenes = generate_scenes(cfg)?;
    let views: Vec<TrainingView> = scenes.iter().map(SceneBundle::training_view).collect();
    let init_weights = initialize_weights(&views, &cfg.init)?;
    let initial = scenes
        .iter()
        .map(|s| score(s, Some(s.initial_pose), Phase::Init))
        .collect::<Result<Vec<_>, _>>()?;
    let pretrained = evaluate_predictor(&init_weights, &scenes, &views, cfg, Phase::Pretrained)?;
    Ok(PreparedSuite {
        scenes,
        views,
        init_weights,
        initial,
        pretrained,
    })
}

fn reports(evals: &[SceneEvaluation]) -> Vec<PoseErrorReport> {
    evals.iter().map(|e| e.report).collect()
}

/// Trains from the suite's starting weights with `cfg.train` and evaluates the
/// final teacher.
pub fn train_and_evaluate(
    suite: &PreparedSuite,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome, HarnessError> {
    cfg.validate()?;
    let mut state = TrainState::new(suite.init_weights.clone());
    let evaluate = |scene_id: u32, pose: &Pose| {
        let s = &suite.scenes[scene_id as usize];
        PoseSnapshot {
            add_error_m: add(pose, &s.truth_pose, &s.mesh),
            rot_err_deg: rotation_error_deg(pose, &s.truth_pose),
            trans_err_m: translation_error(pose, &s.truth_pose),
        }
    };
    let hook = SnapshotHook {
        every: cfg.snapshot_every,
        pnp: cfg.pnp,
        evaluate: &evaluate,
    };
    let trace = run_training(&suite.views, &cfg.train, &mut state, Some(&hook))?;
    let teacher = state
        .teacher_weights()
        .expect("experiments train with an EMA teacher");
    let refined = evaluate_predictor(teacher, &suite.scenes, &suite.views, cfg, Phase::Refined)?;

    let refined_summary = summarize(&reports(&refined));
    let summary = ExperimentSummary {
        variant: cfg.variant.clone(),
        add_01d_accuracy: refined_summary.add_01d_accuracy,
        mean_rot_err_deg: refined_summary.mean_rot_err_deg,
        mean_trans_err_m: refined_summary.mean_trans_err_m,
        init: summarize(&reports(&suite.initial)),
        pretrained: summarize(&reports(&suite.pretrained)),
        refined: refined_summary,
    };
    let mut evaluations = suite.initial.clone();
    evaluations.extend(suite.pretrained.iter().copied());
    evaluations.extend(refined);
    Ok(ExperimentOutcome {
        summary,
        trace,
        evaluations,
        truth_poses: suite.scenes.iter().map(|s| s.truth_pose).collect(),
    })
}

/// Writes `training.csv`, `evaluation.csv`, `summary.json` and the `poses`
/// directory into `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_trace_csv(&outcome.trace, create(&dir.join("training.csv"))?)?;

    let path = dir.join("evaluation.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["scene_id", "phase"];
    header.extend(PoseErrorReport::CSV_HEADER);
    header.push("recovered");
    w.write_record(&header)?;
    for e in &outcome.evaluations {
        let mut row = vec![e.scene_id.to_string(), e.phase.as_str().to_string()];
        row.extend(e.report.csv_fields());
        row.push((e.recovered as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("summary.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &outcome.summary)?;
    writeln!(f).and_then(|_| f.flush()).map_err(io_err(&path))?;
    write_poses(outcome, dir)
}

/// Generates the scenes, trains, evaluates and, given `out_dir`, writes the
/// artifacts.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome, HarnessError> {
    let suite = prepare(cfg)?;
    let outcome = train_and_evaluate(&suite, cfg)?;
    if let Some(dir) = out_dir {
        write_artifacts(&outcome, dir)?;
    }
    Ok(outcome)
}

/// The four loss configurations: neither, photometric only, flow only, both.
/// All of them keep the EMA teacher.
pub fn ablation_variants(base: &ExperimentConfig) -> [ExperimentConfig; 4] {
    let photo = if base.train.photo_weight > 0.0 {
        base.train.photo_weight
    } else {
        0.5
    };
    let variant = |name: &str, flow: bool, photo_weight: f64| {
        let mut c = base.clone();
        c.variant = name.to_string();
        c.train.use_flow_loss = flow;
        c.train.photo_weight = photo_weight;
        c
    };
    [
        variant("neither", false, 0.0),
        variant("photo_only", false, photo),
        variant("flow_only", true, 0.0),
        variant("both", true, photo),
    ]
}

pub fn write_ablation_csv<W: Write>(
    summaries: &[ExperimentSummary],
    out: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "add_01d_accuracy",
        "mean_rot_err_deg",
        "mean_trans_err_m",
    ])?;
    for s in summaries {
        w.write_record([
            s.variant.clone(),
            s.add_01d_accuracy.to_string(),
            s.mean_rot_err_deg.to_string(),
            s.mean_trans_err_m.to_string(),
        ])?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: "ablation.csv".into(),
        source,
    })?;
    Ok(())
}

/// Runs all four variants on one shared scene suite. With `out_dir`, each
/// variant's artifacts go to its own subdirectory next to `ablation.csv` and
/// `ablation.json`.
pub fn ablation_suite(
    base: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentSummary>, HarnessError> {
    let suite = prepare(base)?;
    let mut summaries = Vec::with_capacity(4);
    for cfg in ablation_variants(base) {
        let outcome = train_and_evaluate(&suite, &cfg)?;
        log::info!(
            "{}: ADD-0.1d {:.3}, rotation {:.3} deg",
            cfg.variant,
            outcome.summary.add_01d_accuracy,
            outcome.summary.mean_rot_err_deg
        );
        if let Some(dir) = out_dir {
            write_artifacts(&outcome, &dir.join(&cfg.variant))?;
        }
        summaries.push(outcome.summary);
    }
    if let Some(dir) = out_dir {
        write_ablation_csv(&summaries, create(&dir.join("ablation.csv"))?)?;
        let path = dir.join("ablation.json");
        let mut f = create(&path)?;
        serde_json::to_writer_pretty(&mut f, &summaries)?;
        writeln!(f).and_then(|_| f.flush()).map_err(io_err(&path))?;
    }
    Ok(summaries)
}
