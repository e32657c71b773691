use super::{
    ema_update, flow_loss_grad, smoothness_term, FlowPredictor, LearnerError, PairKey,
    PredictorWeights, TrainingView,
};
use crate::consistency::{
    build_consistency, ConsistencyConfig, ConsistencyResult, SigmaNormalization,
};
use crate::flow::FlowField;
use crate::geometry::Pose;
use crate::grid::Grid;
use crate::photometric::{
    photometric_objective, to_gray, CensusConfig, CharbonnierConfig, PhotometricInputs,
};
use crate::pnp::{pose_from_scene, PnPConfig};
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;

/// Per-pixel norm of the flow loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowNorm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub n_views: usize,
    pub m_real: usize,
    /// Label selection threshold, pixels.
    pub tau: f64,
    pub alpha_ema: f64,
    pub photo_weight: f64,
    pub use_flow_loss: bool,
    pub flow_norm: FlowNorm,
    /// Step size per pixel parameter; the gradient is rescaled by the
    /// foreground pixel count so the step does not depend on object size.
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Amplitude of the uniform brightness jitter of the student's image.
    pub augmentation: f64,
    /// Visibility tolerance of the consistency check as a fraction of the
    /// mesh diameter.
    pub visibility_fraction: f64,
    pub census: CensusConfig,
    pub charbonnier: CharbonnierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_views: 4,
            m_real: 3,
            tau: 1.0,
            alpha_ema: 0.999,
            photo_weight: 0.5,
            use_flow_loss: true,
            flow_norm: FlowNorm::L1,
            learning_rate: 0.05,
            iterations: 300,
            seed: 0,
            augmentation: 0.05,
            visibility_fraction: 0.02,
            census: CensusConfig::default(),
            charbonnier: CharbonnierConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |m: &str| Err(LearnerError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha_ema) {
            return fail("alpha_ema must lie in [0, 1]");
        }
        if self.n_views < 2 {
            return fail("n_views must be at least 2");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.photo_weight >= 0.0) {
            return fail("learning_rate and photo_weight must be non-negative");
        }
        if !(self.augmentation >= 0.0) {
            return fail("augmentation must be non-negative");
        }
        Ok(())
    }

    pub fn consistency_config(&self, diameter: f64) -> ConsistencyConfig {
        ConsistencyConfig {
            tau: self.tau,
            visibility_tolerance: self.visibility_fraction * diameter,
            normalization: SigmaNormalization::Population,
        }
    }
}

/// Source of pseudo labels.
#[derive(Clone)]
pub enum Teacher {
    /// Moving average of the student.
    Ema(PredictorWeights),
    /// Fixed external predictor, e.g. an oracle in tests.
    Frozen(Arc<dyn FlowPredictor>),
}

impl std::fmt::Debug for Teacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Teacher::Ema(w) => f.debug_tuple("Ema").field(&w.grids.len()).finish(),
            Teacher::Frozen(_) => f.write_str("Frozen"),
        }
    }
}

impl Teacher {
    fn predictor(&self) -> &dyn FlowPredictor {
        match self {
            Teacher::Ema(w) => w,
            Teacher::Frozen(p) => p.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub teacher: Teacher,
    pub student: PredictorWeights,
}

impl TrainState {
    /// Teacher and student start from the same weights.
    pub fn new(init: PredictorWeights) -> Self {
        Self {
            teacher: Teacher::Ema(init.clone()),
            student: init,
        }
    }

    pub fn with_frozen_teacher(teacher: Arc<dyn FlowPredictor>, student: PredictorWeights) -> Self {
        Self {
            teacher: Teacher::Frozen(teacher),
            student,
        }
    }

    pub fn teacher_weights(&self) -> Option<&PredictorWeights> {
        match &self.teacher {
            Teacher::Ema(w) => Some(w),
            Teacher::Frozen(_) => None,
        }
    }
}

/// Losses are measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_flow: f64,
    pub loss_photo: f64,
    pub loss_total: f64,
    /// Selected pixels over foreground pixels, across views.
    pub valid_fraction: f64,
    /// Median of the finite σ values; NaN when there are none.
    pub median_sigma: f64,
}

/// Everything the teacher contributes to one step.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    pub flows: Vec<FlowField>,
    pub consistency: ConsistencyResult,
    /// Flows from render 0 onto each neighbor image.
    pub neighbor_flows: Vec<FlowField>,
}

pub fn teacher_targets(
    teacher: &dyn FlowPredictor,
    view: &TrainingView,
    cfg: &TrainConfig,
) -> Result<TeacherTargets, LearnerError> {
    check_view(view, cfg)?;
    let flows = (0..cfg.n_views)
        .into_par_iter()
        .map(|i| {
            teacher.predict_flow(
                &view.renders[i],
                &view.real_image,
                PairKey::view(view.scene_id, i),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let consistency = build_consistency(
        &view.renders,
        &flows,
        &cfg.consistency_config(view.mesh.diameter),
    )?;
    let neighbor_flows = (0..cfg.m_real)
        .into_par_iter()
        .map(|k| {
            teacher.predict_flow(
                &view.renders[0],
                &view.neighbor_images[k],
                PairKey::neighbor(view.scene_id, k),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TeacherTargets {
        flows,
        consistency,
        neighbor_flows,
    })
}

fn check_view(view: &TrainingView, cfg: &TrainConfig) -> Result<(), LearnerError> {
    let mismatch = |message: String| {
        Err(LearnerError::SceneMismatch {
            scene: view.scene_id,
            message,
        })
    };
    if view.renders.len() != cfg.n_views {
        return mismatch(format!(
            "{} renders, expected {}",
            view.renders.len(),
            cfg.n_views
        ));
    }
    if view.neighbor_images.len() != cfg.m_real {
        return mismatch(format!(
            "{} neighbor images, expected {}",
            view.neighbor_images.len(),
            cfg.m_real
        ));
    }
    let dims = view.real_image.dims();
    if view.renders.iter().any(|r| r.mask.dims() != dims)
        || view.neighbor_images.iter().any(|n| n.dims() != dims)
    {
        return mismatch("image sizes differ".to_string());
    }
    Ok(())
}

/// Student objective at fixed teacher targets.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss_flow: f64,
    pub loss_photo: f64,
    pub loss_smooth: f64,
    pub total: f64,
    /// Gradient of `total` with respect to each view's student flow grid.
    pub grads: Vec<Grid<Vector2<f64>>>,
}

/// `L_flow + smoothness + photo_weight · L_photo`. The smoothness penalty
/// regularizes the flow term, so both are dropped when `cfg.use_flow_loss` is
/// off. The photometric loss is always measured.
pub fn student_objective(
    student: &PredictorWeights,
    view: &TrainingView,
    targets: &TeacherTargets,
    cfg: &TrainConfig,
) -> Result<Objective, LearnerError> {
    check_view(view, cfg)?;
    let student_flows = (0..cfg.n_views)
        .map(|i| student.flow_for(&view.renders[i], PairKey::view(view.scene_id, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let (loss_flow, mut grads) = flow_loss_grad(
        &targets.flows,
        &student_flows,
        &targets.consistency.valid_masks,
        cfg.flow_norm,
    )?;
    if !cfg.use_flow_loss {
        grads
            .iter_mut()
            .for_each(|g| g.as_mut_slice().fill(Vector2::zeros()));
    }

    let mut loss_photo = 0.0;
    if cfg.m_real > 0 {
        let anchor = to_gray(&view.real_image);
        let neighbors: Vec<_> = view.neighbor_images.iter().map(to_gray).collect();
        let eval = photometric_objective(
            &PhotometricInputs {
                anchor_image: &anchor,
                neighbor_images: &neighbors,
                neighbor_flows: &targets.neighbor_flows,
                label_mask: &targets.consistency.valid_masks[0],
                census: cfg.census,
                charbonnier: cfg.charbonnier,
            },
            &student_flows[0],
        );
        loss_photo = eval.loss;
        if cfg.photo_weight > 0.0 {
            for (g, p) in grads[0].as_mut_slice().iter_mut().zip(eval.grad.iter()) {
                *g += p * cfg.photo_weight;
            }
        }
    }

    let foreground: usize = view.renders.iter().map(|r| r.foreground_count()).sum();
    let mut loss_smooth = 0.0;
    for (i, g) in grads.iter_mut().enumerate().filter(|_| cfg.use_flow_loss) {
        let grid = student.grid(PairKey::view(view.scene_id, i))?;
        loss_smooth += smoothness_term(
            grid,
            &view.renders[i].mask,
            student.smoothness,
            student.smoothness_order,
            foreground as f64,
            Some(g),
        );
    }

    let flow_part = if cfg.use_flow_loss { loss_flow } else { 0.0 };
    Ok(Objective {
        loss_flow,
        loss_photo,
        loss_smooth,
        total: flow_part + cfg.photo_weight * loss_photo + loss_smooth,
        grads,
    })
}

struct StepOutcome {
    report: StepReport,
    targets: TeacherTargets,
}

fn step_inner(
    state: &mut TrainState,
    view: &TrainingView,
    cfg: &TrainConfig,
) -> Result<StepOutcome, LearnerError> {
    cfg.validate()?;
    let targets = teacher_targets(state.teacher.predictor(), view, cfg)?;
    let objective = student_objective(&state.student, view, &targets, cfg)?;

    let foreground: usize = view.renders.iter().map(|r| r.foreground_count()).sum();
    let step = cfg.learning_rate * foreground as f64;
    for (i, g) in objective.grads.iter().enumerate() {
        let mask = &view.renders[i].mask;
        let grid = state.student.grid_mut(PairKey::view(view.scene_id, i))?;
        for ((w, d), &m) in grid
            .as_mut_slice()
            .iter_mut()
            .zip(g.iter())
            .zip(mask.iter())
        {
            if m {
                *w -= d * step;
            }
        }
    }
    if let Teacher::Ema(teacher) = &mut state.teacher {
        ema_update(teacher, &state.student, cfg.alpha_ema)?;
    }

    let report = StepReport {
        loss_flow: objective.loss_flow,
        loss_photo: objective.loss_photo,
        loss_total: objective.total,
        valid_fraction: if foreground > 0 {
            targets.consistency.valid_count() as f64 / foreground as f64
        } else {
            0.0
        },
        median_sigma: targets.consistency.median_sigma().unwrap_or(f64::NAN),
    };
    Ok(StepOutcome { report, targets })
}

/// One teacher-labelled gradient step on `view` followed by the EMA update.
pub fn train_step(
    state: &mut TrainState,
    view: &TrainingView,
    cfg: &TrainConfig,
) -> Result<StepReport, LearnerError> {
    Ok(step_inner(state, view, cfg)?.report)
}

/// Pose errors of a snapshot, supplied by the caller who owns the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSnapshot {
    pub add_error_m: f64,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
}

/// Periodic pose recovery from the teacher's labels during training.
pub struct SnapshotHook<'a> {
    /// Snapshot every this many iterations; 0 disables snapshots.
    pub every: usize,
    pub pnp: PnPConfig,
    pub evaluate: &'a (dyn Fn(u32, &Pose) -> PoseSnapshot + Sync),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub scene_id: u32,
    pub report: StepReport,
    pub snapshot: Option<PoseSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

/// Visits `views` cyclically, reshuffled each epoch under `cfg.seed`, for
/// `cfg.iterations` steps.
pub fn run_training(
    views: &[TrainingView],
    cfg: &TrainConfig,
    state: &mut TrainState,
    hook: Option<&SnapshotHook<'_>>,
) -> Result<TrainingTrace, LearnerError> {
    if views.is_empty() {
        return Err(LearnerError::NoScenes);
    }
    cfg.validate()?;
    let mut trace = TrainingTrace::default();
    let mut order: Vec<usize> = Vec::new();
    for iteration in 0..cfg.iterations {
        let slot = iteration % views.len();
        if slot == 0 {
            let epoch = (iteration / views.len()) as u64;
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
        }
        let view = &views[order[slot]];
        let outcome = step_inner(state, view, cfg)?;
        let snapshot = match hook {
            Some(h) if h.every > 0 && iteration % h.every == 0 => pose_from_scene(
                &view.renders,
                &outcome.targets.flows,
                &outcome.targets.consistency,
                &view.intrinsics,
                &h.pnp,
            )
            .ok()
            .map(|sol| (h.evaluate)(view.scene_id, &sol.pose)),
            _ => None,
        };
        log::debug!(
            "iteration {iteration} scene {} loss {:.4} valid {:.3}",
            view.scene_id,
            outcome.report.loss_total,
            outcome.report.valid_fraction
        );
        trace.rows.push(TraceRow {
            iteration,
            scene_id: view.scene_id,
            report: outcome.report,
            snapshot,
        });
    }
    Ok(trace)
}

pub const TRACE_HEADER: [&str; 10] = [
    "iteration",
    "scene_id",
    "loss_flow",
    "loss_photo",
    "loss_total",
    "valid_fraction",
    "median_sigma",
    "add_error_m",
    "rot_err_deg",
    "trans_err_m",
];

pub fn write_trace_csv<W: Write>(trace: &TrainingTrace, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for row in &trace.rows {
        let r = &row.report;
        let snap = |f: fn(&PoseSnapshot) -> f64| {
            row.snapshot
                .as_ref()
                .map(|s| f(s).to_string())
                .unwrap_or_default()
        };
        w.write_record([
            row.iteration.to_string(),
            row.scene_id.to_string(),
            r.loss_flow.to_string(),
            r.loss_photo.to_string(),
            r.loss_total.to_string(),
            r.valid_fraction.to_string(),
            r.median_sigma.to_string(),
            snap(|s| s.add_error_m),
            snap(|s| s.rot_err_deg),
            snap(|s| s.trans_err_m),
        ])?;
    }
    w.flush()?;
    Ok(())
}
