//! Teacher-student training of dense per-pair flow fields.
//!
//! Each image pair owns a flow parameter grid. The teacher labels the clean
//! pairs, multi-view consistency keeps the trustworthy labels, and the student
//! descends the masked flow loss plus the photometric and smoothness terms.
//! The teacher follows the student through an exponential moving average.

mod init;
mod train;

pub use init::{initialize_weights, match_flow, InitConfig, InitMethod, MatchConfig};
pub use train::{
    run_training, student_objective, teacher_targets, train_step, write_trace_csv, FlowNorm,
    Objective, PoseSnapshot, SnapshotHook, StepReport, Teacher, TeacherTargets, TraceRow,
    TrainConfig, TrainState, TrainingTrace, TRACE_HEADER,
};

use crate::flow::FlowField;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::grid::Grid;
use crate::mesh::{gt_flow, RenderError, RenderOutput, TriangleMesh};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("unknown image pair {0}")]
    UnknownPair(PairKey),
    #[error("teacher and student weights differ in structure")]
    StructureMismatch,
    #[error("flow lists have mismatched lengths or shapes")]
    ShapeMismatch,
    #[error("scene {scene} does not match the configuration: {message}")]
    SceneMismatch { scene: u32, message: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training scenes")]
    NoScenes,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Consistency(#[from] crate::consistency::ConsistencyError),
}

/// Which image pair of a scene a flow grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairSlot {
    /// Rendered view `i` against the anchor real image.
    View(u16),
    /// Render 0 against neighboring real image `k`.
    Neighbor(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairKey {
    pub scene: u32,
    pub slot: PairSlot,
}

impl PairKey {
    pub fn view(scene: u32, i: usize) -> Self {
        Self {
            scene,
            slot: PairSlot::View(i as u16),
        }
    }

    pub fn neighbor(scene: u32, k: usize) -> Self {
        Self {
            scene,
            slot: PairSlot::Neighbor(k as u16),
        }
    }
}

impl std::fmt::Display for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.slot {
            PairSlot::View(i) => write!(f, "scene {} view {}", self.scene, i),
            PairSlot::Neighbor(k) => write!(f, "scene {} neighbor {}", self.scene, k),
        }
    }
}

/// What the learner may see of a scene. Truth poses are deliberately absent.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub scene_id: u32,
    pub mesh: Arc<TriangleMesh>,
    pub intrinsics: CameraIntrinsics,
    pub initial_pose: Pose,
    /// `renders[0]` sits exactly at `initial_pose`.
    pub renders: Vec<RenderOutput>,
    pub real_image: Grid<Vector3<f64>>,
    /// Brightness-jittered copy of `real_image` handed to the student.
    pub augmented_image: Grid<Vector3<f64>>,
    pub neighbor_images: Vec<Grid<Vector3<f64>>>,
    /// Initial pose estimates of the neighbor images.
    pub neighbor_initial_poses: Vec<Pose>,
}

/// Something that maps an image pair to a flow field.
pub trait FlowPredictor: Send + Sync {
    fn predict_flow(
        &self,
        render: &RenderOutput,
        image: &Grid<Vector3<f64>>,
        key: PairKey,
    ) -> Result<FlowField, LearnerError>;
}

/// Finite difference penalized by the smoothness term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SmoothnessOrder {
    /// `f[q] − f[q']` over adjacent pixels; favors constant fields.
    #[default]
    First,
    /// `f[q−1] − 2f[q] + f[q+1]` along rows and columns; leaves affine fields
    /// unpenalized.
    Second,
}

/// One flow vector per pixel of an image pair.
pub type FlowGrid = Grid<Vector2<f64>>;

/// Trainable predictor: one dense flow grid per image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    pub grids: BTreeMap<PairKey, Grid<Vector2<f64>>>,
    /// Weight of the smoothness penalty.
    pub smoothness: f64,
    pub smoothness_order: SmoothnessOrder,
}

impl Default for PredictorWeights {
    fn default() -> Self {
        Self {
            grids: BTreeMap::new(),
            smoothness: 0.05,
            smoothness_order: SmoothnessOrder::First,
        }
    }
}

impl PredictorWeights {
    pub fn grid(&self, key: PairKey) -> Result<&Grid<Vector2<f64>>, LearnerError> {
        self.grids.get(&key).ok_or(LearnerError::UnknownPair(key))
    }

    pub fn grid_mut(&mut self, key: PairKey) -> Result<&mut Grid<Vector2<f64>>, LearnerError> {
        self.grids
            .get_mut(&key)
            .ok_or(LearnerError::UnknownPair(key))
    }

    pub fn same_structure(&self, other: &PredictorWeights) -> bool {
        self.grids.len() == other.grids.len()
            && self
                .grids
                .iter()
                .zip(&other.grids)
                .all(|((ka, a), (kb, b))| ka == kb && a.dims() == b.dims())
    }

    /// Largest absolute parameter difference.
    pub fn max_abs_diff(&self, other: &PredictorWeights) -> Result<f64, LearnerError> {
        if !self.same_structure(other) {
            return Err(LearnerError::StructureMismatch);
        }
        Ok(self
            .grids
            .values()
            .zip(other.grids.values())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(u, v)| (u - v).amax()))
            .fold(0.0, f64::max))
    }

    /// The stored grid of `key` masked to `render`'s foreground.
    pub fn flow_for(&self, render: &RenderOutput, key: PairKey) -> Result<FlowField, LearnerError> {
        let grid = self.grid(key)?;
        if !grid.same_dims(&render.mask) {
            return Err(LearnerError::ShapeMismatch);
        }
        let vectors = Grid::from_fn(grid.width(), grid.height(), |x, y| {
            if render.mask[(x, y)] {
                grid[(x, y)]
            } else {
                Vector2::zeros()
            }
        });
        Ok(FlowField {
            vectors,
            valid: render.mask.clone(),
        })
    }
}

impl FlowPredictor for PredictorWeights {
    fn predict_flow(
        &self,
        render: &RenderOutput,
        _image: &Grid<Vector3<f64>>,
        key: PairKey,
    ) -> Result<FlowField, LearnerError> {
        self.flow_for(render, key)
    }
}

/// Corruption applied by [`OracleFlowPredictor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleNoise {
    /// Per-pixel isotropic Gaussian noise, pixels.
    pub pixel_std: f64,
    /// Per-pair constant Gaussian offset, pixels.
    pub pair_offset_std: f64,
    /// Fraction of valid pixels replaced by outliers.
    pub outlier_fraction: f64,
    /// Outlier displacement magnitude in a uniformly random direction, pixels.
    pub outlier_offset: f64,
    pub seed: u64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            pixel_std: 0.0,
            pair_offset_std: 0.0,
            outlier_fraction: 0.0,
            outlier_offset: 10.0,
            seed: 0,
        }
    }
}

/// Where the real image of a pair was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTarget {
    pub pose: Pose,
    pub depth: Grid<f64>,
}

/// Ground-truth flow with seeded corruption. Owns truth poses, so it is a
/// testing and analysis tool and never part of the learner's inputs.
#[derive(Debug, Clone)]
pub struct OracleFlowPredictor {
    pub targets: BTreeMap<PairKey, OracleTarget>,
    pub noise: OracleNoise,
}

/// Outcome of corrupting one flow field.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub flow: FlowField,
    pub outliers: Grid<bool>,
}

impl OracleFlowPredictor {
    pub fn new(noise: OracleNoise) -> Self {
        Self {
            targets: BTreeMap::new(),
            noise,
        }
    }

    /// Registers the pair `key` whose real image was rendered at `pose` with
    /// the given depth map.
    pub fn insert(&mut self, key: PairKey, pose: Pose, depth: Grid<f64>) {
        self.targets.insert(key, OracleTarget { pose, depth });
    }

    fn pair_seed(&self, key: PairKey) -> u64 {
        let slot = match key.slot {
            PairSlot::View(i) => i as u64,
            PairSlot::Neighbor(k) => (1 << 16) | k as u64,
        };
        self.noise.seed ^ ((key.scene as u64) << 32 | slot).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// Oracle flow with the configured corruption and the outlier pattern.
    pub fn predict_with_outliers(
        &self,
        render: &RenderOutput,
        key: PairKey,
    ) -> Result<Corruption, LearnerError> {
        let target = self
            .targets
            .get(&key)
            .ok_or(LearnerError::UnknownPair(key))?;
        let clean = gt_flow(render, &target.pose, &target.depth, &render.intrinsics)?;
        Ok(corrupt_flow(&clean, &self.noise, self.pair_seed(key)))
    }
}

impl FlowPredictor for OracleFlowPredictor {
    fn predict_flow(
        &self,
        render: &RenderOutput,
        _image: &Grid<Vector3<f64>>,
        key: PairKey,
    ) -> Result<FlowField, LearnerError> {
        Ok(self.predict_with_outliers(render, key)?.flow)
    }
}

/// Applies seeded noise and outliers to the valid pixels of `clean`, visited
/// in row-major order. Zero noise returns `clean` unchanged.
pub fn corrupt_flow(clean: &FlowField, noise: &OracleNoise, seed: u64) -> Corruption {
    let mut flow = clean.clone();
    let mut outliers = Grid::filled(clean.vectors.width(), clean.vectors.height(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = if noise.pair_offset_std > 0.0 {
        let n = Normal::new(0.0, noise.pair_offset_std).expect("finite std");
        Vector2::new(n.sample(&mut rng), n.sample(&mut rng))
    } else {
        Vector2::zeros()
    };
    let pixel =
        (noise.pixel_std > 0.0).then(|| Normal::new(0.0, noise.pixel_std).expect("finite std"));
    for (i, v) in clean.valid.as_slice().iter().enumerate() {
        if !v {
            continue;
        }
        let f = &mut flow.vectors.as_mut_slice()[i];
        *f += offset;
        if let Some(n) = &pixel {
            *f += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
        }
        if noise.outlier_fraction > 0.0 && rng.random::<f64>() < noise.outlier_fraction {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            *f += Vector2::new(a.cos(), a.sin()) * noise.outlier_offset;
            outliers.as_mut_slice()[i] = true;
        }
    }
    Corruption { flow, outliers }
}

/// Masked flow loss `Σ_i Σ_{q∈V_i} ‖f_t − f_s‖ / Σ_i |V_i|`, zero with no
/// valid pixels.
pub fn flow_loss(
    teacher: &[FlowField],
    student: &[FlowField],
    masks: &[Grid<bool>],
    norm: FlowNorm,
) -> Result<f64, LearnerError> {
    Ok(flow_loss_grad(teacher, student, masks, norm)?.0)
}

/// Flow loss and its gradient with respect to each student flow. The L1
/// subgradient is 0 at zero difference; so is the L2 one.
pub fn flow_loss_grad(
    teacher: &[FlowField],
    student: &[FlowField],
    masks: &[Grid<bool>],
    norm: FlowNorm,
) -> Result<(f64, Vec<FlowGrid>), LearnerError> {
    if teacher.len() != student.len() || teacher.len() != masks.len() {
        return Err(LearnerError::ShapeMismatch);
    }
    for ((t, s), m) in teacher.iter().zip(student).zip(masks) {
        if t.dims() != s.dims() || t.dims() != m.dims() {
            return Err(LearnerError::ShapeMismatch);
        }
    }
    let count: usize = masks.iter().map(Grid::count_true).sum();
    let mut grads: Vec<_> = student
        .iter()
        .map(|s| Grid::filled(s.vectors.width(), s.vectors.height(), Vector2::zeros()))
        .collect();
    if count == 0 {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (((t, s), m), g) in teacher.iter().zip(student).zip(masks).zip(&mut grads) {
        for (i, &sel) in m.as_slice().iter().enumerate() {
            if !sel {
                continue;
            }
            let d = s.vectors.as_slice()[i] - t.vectors.as_slice()[i];
            let (value, grad) = match norm {
                FlowNorm::L1 => (d.x.abs() + d.y.abs(), Vector2::new(sign0(d.x), sign0(d.y))),
                FlowNorm::L2 => {
                    let n = d.norm();
                    (n, if n > 0.0 { d / n } else { Vector2::zeros() })
                }
            };
            total += value;
            g.as_mut_slice()[i] = grad * inv;
        }
    }
    Ok((total * inv, grads))
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `teacher ← α·teacher + (1−α)·student` on every parameter.
pub fn ema_update(
    teacher: &mut PredictorWeights,
    student: &PredictorWeights,
    alpha: f64,
) -> Result<(), LearnerError> {
    if !teacher.same_structure(student) {
        return Err(LearnerError::StructureMismatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LearnerError::InvalidConfig(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    let beta = 1.0 - alpha;
    for (t, s) in teacher.grids.values_mut().zip(student.grids.values()) {
        for (a, b) in t.as_mut_slice().iter_mut().zip(s.iter()) {
            *a = *a * alpha + *b * beta;
        }
    }
    Ok(())
}

/// Smoothness energy `coef · Σ ‖Δf‖²` divided by `norm`, where `Δf` runs over
/// the finite differences of `order` whose pixels all lie in `mask`. The
/// gradient is accumulated into `grad`.
pub fn smoothness_term(
    field: &Grid<Vector2<f64>>,
    mask: &Grid<bool>,
    coef: f64,
    order: SmoothnessOrder,
    norm: f64,
    grad: Option<&mut Grid<Vector2<f64>>>,
) -> f64 {
    if coef == 0.0 || norm <= 0.0 {
        return 0.0;
    }
    let (w, h) = field.dims();
    let scale = coef / norm;
    let mut energy = 0.0;
    let mut grad = grad;
    for y in 0..h {
        for x in 0..w {
            if !mask[(x, y)] {
                continue;
            }
            match order {
                SmoothnessOrder::First => {
                    for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                        if nx >= w || ny >= h || !mask[(nx, ny)] {
                            continue;
                        }
                        let d = field[(x, y)] - field[(nx, ny)];
                        energy += d.norm_squared();
                        if let Some(g) = grad.as_deref_mut() {
                            g[(x, y)] += d * (2.0 * scale);
                            g[(nx, ny)] -= d * (2.0 * scale);
                        }
                    }
                }
                SmoothnessOrder::Second => {
                    for (dx, dy) in [(1, 0), (0, 1)] {
                        let (nx, ny) = (x + dx, y + dy);
                        let (fx, fy) = (x + 2 * dx, y + 2 * dy);
                        if fx >= w || fy >= h || !mask[(nx, ny)] || !mask[(fx, fy)] {
                            continue;
                        }
                        let d = field[(x, y)] - field[(nx, ny)] * 2.0 + field[(fx, fy)];
                        energy += d.norm_squared();
                        if let Some(g) = grad.as_deref_mut() {
                            g[(x, y)] += d * (2.0 * scale);
                            g[(nx, ny)] -= d * (4.0 * scale);
                            g[(fx, fy)] += d * (2.0 * scale);
                        }
                    }
                }
            }
        }
    }
    energy * scale
}

/// Random positions of `count` foreground pixels, for gradient checks.
pub fn sample_foreground<R: Rng>(
    mask: &Grid<bool>,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let fg: Vec<_> = mask
        .enumerate()
        .filter(|(_, _, &m)| m)
        .map(|(x, y, _)| (x, y))
        .collect();
    if fg.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| fg[rng.random_range(0..fg.len())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(vals: &[(f64, f64)], valid: &[bool]) -> FlowField {
        FlowField {
            vectors: Grid::from_vec(
                vals.len(),
                1,
                vals.iter().map(|&(a, b)| Vector2::new(a, b)).collect(),
            ),
            valid: Grid::from_vec(valid.len(), 1, valid.to_vec()),
        }
    }

    fn weights(value: f64) -> PredictorWeights {
        let mut w = PredictorWeights::default();
        w.grids.insert(
            PairKey::view(0, 0),
            Grid::filled(3, 2, Vector2::new(value, -value)),
        );
        w.grids.insert(
            PairKey::neighbor(0, 0),
            Grid::filled(3, 2, Vector2::new(value, 2.0 * value)),
        );
        w
    }

    #[test]
    fn flow_loss_examples() {
        let t = field(&[(1.0, 2.0), (5.0, 5.0)], &[true, true]);
        let s = field(&[(0.0, 0.0), (0.0, 0.0)], &[true, true]);
        let one = Grid::from_vec(2, 1, vec![true, false]);
        assert_eq!(
            flow_loss(
                std::slice::from_ref(&t),
                std::slice::from_ref(&s),
                std::slice::from_ref(&one),
                FlowNorm::L1
            )
            .unwrap(),
            3.0
        );
        assert_eq!(
            flow_loss(
                std::slice::from_ref(&s),
                std::slice::from_ref(&t),
                &[one],
                FlowNorm::L1
            )
            .unwrap(),
            3.0
        );
        let none = Grid::from_vec(2, 1, vec![false, false]);
        assert_eq!(
            flow_loss(std::slice::from_ref(&t), &[s], &[none], FlowNorm::L1).unwrap(),
            0.0
        );
        let all = Grid::from_vec(2, 1, vec![true, true]);
        assert_eq!(
            flow_loss(
                std::slice::from_ref(&t),
                std::slice::from_ref(&t),
                std::slice::from_ref(&all),
                FlowNorm::L1
            )
            .unwrap(),
            0.0
        );
        assert!(flow_loss(std::slice::from_ref(&t), &[], &[all], FlowNorm::L1).is_err());
    }

    #[test]
    fn flow_grad_ties_are_zero() {
        let t = field(&[(1.0, 2.0)], &[true]);
        let s = field(&[(1.0, 0.0)], &[true]);
        let m = Grid::from_vec(1, 1, vec![true]);
        let (_, g) = flow_loss_grad(&[t], &[s], &[m], FlowNorm::L1).unwrap();
        assert_eq!(g[0][(0, 0)], Vector2::new(0.0, -1.0));
    }

    #[test]
    fn ema_examples() {
        let mut t = weights(1.0);
        ema_update(&mut t, &weights(0.0), 0.999).unwrap();
        assert_eq!(t.grids[&PairKey::view(0, 0)][(0, 0)].x, 0.999);
        let mut same = weights(0.3);
        ema_update(&mut same, &weights(0.3), 0.7).unwrap();
        assert_eq!(same, weights(0.3));
        let mut t = weights(1.0);
        ema_update(&mut t, &weights(0.25), 0.0).unwrap();
        assert_eq!(t, weights(0.25));
        let mut other = PredictorWeights::default();
        assert!(matches!(
            ema_update(&mut other, &weights(0.0), 0.5),
            Err(LearnerError::StructureMismatch)
        ));
        assert!(ema_update(&mut weights(0.0), &weights(1.0), 1.5).is_err());
    }

    #[test]
    fn smoothness_of_constant_field_is_zero() {
        let f = Grid::filled(4, 4, Vector2::new(1.0, 2.0));
        let m = Grid::filled(4, 4, true);
        let mut g = Grid::filled(4, 4, Vector2::zeros());
        assert_eq!(
            smoothness_term(&f, &m, 0.05, SmoothnessOrder::First, 16.0, Some(&mut g)),
            0.0
        );
        assert!(g.iter().all(|v| *v == Vector2::zeros()));
    }

    #[test]
    fn smoothness_counts_masked_pairs_only() {
        let f = Grid::from_vec(
            3,
            1,
            vec![
                Vector2::new(0.0, 0.0),
                Vector2::new(1.0, 0.0),
                Vector2::new(3.0, 0.0),
            ],
        );
        let m = Grid::from_vec(3, 1, vec![true, true, false]);
        assert_eq!(
            smoothness_term(&f, &m, 1.0, SmoothnessOrder::First, 1.0, None),
            1.0
        );
    }

    #[test]
    fn oracle_corruption_pattern() {
        let clean = FlowField {
            vectors: Grid::filled(40, 40, Vector2::new(1.0, -1.0)),
            valid: Grid::from_fn(40, 40, |x, _| x < 30),
        };
        let noise = OracleNoise {
            outlier_fraction: 0.3,
            outlier_offset: 10.0,
            seed: 11,
            ..Default::default()
        };
        let a = corrupt_flow(&clean, &noise, 5);
        let b = corrupt_flow(&clean, &noise, 5);
        assert_eq!(a, b);
        let n = a.outliers.count_true();
        assert!((n as f64 / 1200.0 - 0.3).abs() < 0.05, "{n}");
        for (i, (f, c)) in a.flow.vectors.iter().zip(clean.vectors.iter()).enumerate() {
            let d = (f - c).norm();
            if a.outliers.as_slice()[i] {
                assert!((d - 10.0).abs() < 1e-9);
                assert!(clean.valid.as_slice()[i]);
            } else {
                assert_eq!(d, 0.0);
            }
        }
        assert_eq!(corrupt_flow(&clean, &OracleNoise::default(), 5).flow, clean);
    }
}
