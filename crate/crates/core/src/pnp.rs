//! Flow-driven 3D-to-2D correspondences and robust pose recovery.
//!
//! Hypotheses come from four-point minimal samples: three points fix up to
//! four candidate poses through Grunert's quartic, the fourth selects among
//! them. The best-supported hypothesis is refined over its inliers with
//! Levenberg-Marquardt on the squared reprojection error.

use crate::consistency::ConsistencyResult;
use crate::flow::FlowField;
use crate::geometry::{nearest_rotation, rotation_from_axis_angle, CameraIntrinsics, Pose};
use crate::grid::Grid;
use crate::mesh::RenderOutput;
use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("shape mismatch between render, flow and mask")]
    ShapeMismatch,
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("no hypothesis reached {needed} inliers (best had {best})")]
    NoConsensus { needed: usize, best: usize },
    #[error("invalid PnP configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point3: Vector3<f64>,
    pub point2: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
    /// Foreground pixels of the source render(s).
    pub total_foreground: usize,
    pub valid_count: usize,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: CorrespondenceSet) {
        self.total_foreground += other.total_foreground;
        self.valid_count += other.valid_count;
        self.entries.extend(other.entries);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnPConfig {
    pub ransac_iterations: usize,
    /// Reprojection error bound for inliers, pixels.
    pub inlier_threshold: f64,
    pub min_correspondences: usize,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for PnPConfig {
    fn default() -> Self {
        Self {
            ransac_iterations: 256,
            inlier_threshold: 2.0,
            min_correspondences: 6,
            refine_iterations: 20,
            seed: 0,
        }
    }
}

impl PnPConfig {
    fn validate(&self) -> Result<(), PnpError> {
        if !(self.inlier_threshold > 0.0) {
            return Err(PnpError::InvalidConfig("inlier_threshold must be positive"));
        }
        if self.min_correspondences < 4 {
            return Err(PnpError::InvalidConfig(
                "min_correspondences must be at least 4",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnPSolution {
    pub pose: Pose,
    pub inlier_fraction: f64,
    pub inliers: usize,
}

/// One correspondence per masked pixel: the rendered surface point and the
/// pixel displaced by its flow. Pixels outside the render foreground or the
/// flow's valid set are skipped.
pub fn build_correspondences(
    render: &RenderOutput,
    flow: &FlowField,
    mask: &Grid<bool>,
) -> Result<CorrespondenceSet, PnpError> {
    if !render.mask.same_dims(mask) || flow.dims() != mask.dims() {
        return Err(PnpError::ShapeMismatch);
    }
    let entries: Vec<Correspondence> = mask
        .enumerate()
        .filter(|&(x, y, &m)| m && render.mask[(x, y)] && flow.valid[(x, y)])
        .map(|(x, y, _)| Correspondence {
            point3: render.coord_map[(x, y)],
            point2: Vector2::new(x as f64, y as f64) + flow.vectors[(x, y)],
        })
        .collect();
    if entries.is_empty() {
        return Err(PnpError::EmptyMask);
    }
    Ok(CorrespondenceSet {
        valid_count: entries.len(),
        total_foreground: render.foreground_count(),
        entries,
    })
}

#[inline]
fn reprojection_error_sq(pose: &Pose, k: &CameraIntrinsics, c: &Correspondence) -> f64 {
    let x = pose.transform_point(&c.point3);
    if x.z <= 1e-9 {
        return f64::INFINITY;
    }
    (k.project_camera(&x) - c.point2).norm_squared()
}

/// Real roots of `c[0] + c[1] x + … + c[4] x⁴`.
fn quartic_real_roots(c: [f64; 5]) -> Vec<f64> {
    let lead = c[4];
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || lead.abs() < 1e-12 * scale {
        return Vec::new();
    }
    let mut companion = Matrix4::zeros();
    for i in 0..3 {
        companion[(i + 1, i)] = 1.0;
    }
    for i in 0..4 {
        companion[(i, 3)] = -c[i] / lead;
    }
    let eval = |x: f64| (((c[4] * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0];
    let deriv = |x: f64| ((4.0 * c[4] * x + 3.0 * c[3]) * x + 2.0 * c[2]) * x + c[1];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-4 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let d = deriv(x);
                if d.abs() < 1e-300 {
                    break;
                }
                let step = eval(x) / d;
                x -= step;
                if step.abs() < 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Rigid transform mapping `src` onto `dst` in the least-squares sense.
fn absolute_orientation(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = nearest_rotation(&h);
    Pose::new(r, cd - r * cs)
}

/// Grunert's three-point solution; returns every geometrically consistent
/// pose.
pub fn p3p(points3: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let j = bearings.map(|b| b.normalize());
    let a2 = (points3[1] - points3[2]).norm_squared();
    let b2 = (points3[0] - points3[2]).norm_squared();
    let c2 = (points3[0] - points3[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a;
    let a3 = 4.0
        * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2 / b2 * cos_a * cos_a * cos_b);
    let a2c = 2.0
        * (amc * amc - 1.0
            + 2.0 * amc * amc * cos_b * cos_b
            + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g);
    let a1 = 4.0
        * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g;

    let mut poses = Vec::new();
    for v in quartic_real_roots([a0, a1, a2c, a3, a4]) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / denom;
        if u <= 0.0 {
            continue;
        }
        let q = 1.0 + v * v - 2.0 * v * cos_b;
        if q <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let s = [s1, u * s1, v * s1];
        let cam = [j[0] * s[0], j[1] * s[1], j[2] * s[2]];
        // Reject spurious roots by checking all three side lengths.
        let ok = [(1, 2, a2), (0, 2, b2), (0, 1, c2)]
            .iter()
            .all(|&(i, k, d2)| ((cam[i] - cam[k]).norm_squared() - d2).abs() <= 1e-6 * d2);
        if ok {
            poses.push(absolute_orientation(points3, &cam));
        }
    }
    poses
}

/// Pose hypothesis from four correspondences, or `None` if degenerate.
fn minimal_hypothesis(sample: &[Correspondence; 4], k: &CameraIntrinsics) -> Option<Pose> {
    let pts = [sample[0].point3, sample[1].point3, sample[2].point3];
    let rays = [
        k.unproject(&sample[0].point2),
        k.unproject(&sample[1].point2),
        k.unproject(&sample[2].point2),
    ];
    p3p(&pts, &rays)
        .into_iter()
        .map(|p| (reprojection_error_sq(&p, k, &sample[3]), p))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
}

fn count_inliers(
    pose: &Pose,
    k: &CameraIntrinsics,
    entries: &[Correspondence],
    thr_sq: f64,
) -> usize {
    entries
        .iter()
        .filter(|c| reprojection_error_sq(pose, k, c) <= thr_sq)
        .count()
}

fn total_cost(pose: &Pose, k: &CameraIntrinsics, entries: &[Correspondence]) -> f64 {
    entries
        .iter()
        .map(|c| reprojection_error_sq(pose, k, c))
        .sum()
}

/// Levenberg-Marquardt on `Σ ‖π(R p + t) − u‖²`. The cost never increases
/// between accepted iterates. Returns the refined pose and the cost history of
/// accepted iterates (starting with the initial cost).
pub fn refine_pose_lm(
    initial: &Pose,
    k: &CameraIntrinsics,
    entries: &[Correspondence],
    iterations: usize,
) -> (Pose, Vec<f64>) {
    let mut pose = *initial;
    let mut cost = total_cost(&pose, k, entries);
    let mut history = vec![cost];
    if !cost.is_finite() || entries.len() < 3 {
        return (pose, history);
    }
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        for c in entries {
            let rp = pose.rotation * c.point3;
            let x = rp + pose.translation;
            let (iz, iz2) = (1.0 / x.z, 1.0 / (x.z * x.z));
            let r = k.project_camera(&x) - c.point2;
            let dpi = SMatrix::<f64, 2, 3>::new(
                k.fx * iz,
                0.0,
                -k.fx * x.x * iz2,
                0.0,
                k.fy * iz,
                -k.fy * x.y * iz2,
            );
            // d(exp(ω) R p)/dω = −[R p]×
            let skew = Matrix3::new(0.0, rp.z, -rp.y, -rp.z, 0.0, rp.x, rp.y, -rp.x, 0.0);
            let mut jac = SMatrix::<f64, 2, 6>::zeros();
            jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * skew));
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpi);
            h += jac.transpose() * jac;
            g += jac.transpose() * r;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let candidate = Pose::new(
                nearest_rotation(&(rotation_from_axis_angle(omega) * pose.rotation)),
                pose.translation + dt,
            );
            let new_cost = total_cost(&candidate, k, entries);
            if new_cost < cost {
                let converged = step.norm() < 1e-12 || (cost - new_cost) <= 1e-15 * cost;
                pose = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if converged {
                    return (pose, history);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (pose, history)
}

/// RANSAC over four-point minimal samples followed by LM refinement on the
/// inliers. Deterministic under `cfg.seed`; among equally supported
/// hypotheses the lowest sample index wins.
pub fn solve_pnp(
    corrs: &CorrespondenceSet,
    k: &CameraIntrinsics,
    cfg: &PnPConfig,
) -> Result<PnPSolution, PnpError> {
    cfg.validate()?;
    let entries = &corrs.entries;
    let n = entries.len();
    if n < cfg.min_correspondences {
        return Err(PnpError::TooFewCorrespondences {
            needed: cfg.min_correspondences,
            got: n,
        });
    }
    let thr_sq = cfg.inlier_threshold * cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<[usize; 4]> = (0..cfg.ransac_iterations)
        .map(|_| {
            let s = sample(&mut rng, n, 4);
            [s.index(0), s.index(1), s.index(2), s.index(3)]
        })
        .collect();
    let scored: Vec<(usize, Option<Pose>)> = samples
        .par_iter()
        .map(|idx| {
            let s = idx.map(|i| entries[i]);
            match minimal_hypothesis(&s, k) {
                Some(p) => (count_inliers(&p, k, entries, thr_sq), Some(p)),
                None => (0, None),
            }
        })
        .collect();
    let mut best: Option<(usize, Pose)> = None;
    for (count, pose) in scored {
        if let Some(p) = pose {
            if best.is_none_or(|(c, _)| count > c) {
                best = Some((count, p));
            }
        }
    }
    let best_count = best.map_or(0, |b| b.0);
    let Some((_, mut pose)) = best.filter(|(c, _)| *c >= cfg.min_correspondences) else {
        return Err(PnpError::NoConsensus {
            needed: cfg.min_correspondences,
            best: best_count,
        });
    };
    let mut inliers = Vec::new();
    for _ in 0..2 {
        inliers = entries
            .iter()
            .copied()
            .filter(|c| reprojection_error_sq(&pose, k, c) <= thr_sq)
            .collect();
        if inliers.len() < 3 {
            break;
        }
        pose = refine_pose_lm(&pose, k, &inliers, cfg.refine_iterations).0;
    }
    let inlier_count = count_inliers(&pose, k, entries, thr_sq);
    if inlier_count < cfg.min_correspondences {
        return Err(PnpError::NoConsensus {
            needed: cfg.min_correspondences,
            best: inlier_count.max(inliers.len()),
        });
    }
    Ok(PnPSolution {
        pose,
        inlier_fraction: inlier_count as f64 / n as f64,
        inliers: inlier_count,
    })
}

/// Pools label-masked correspondences over all views and solves once. Views
/// without selected pixels are skipped.
pub fn pose_from_scene(
    renders: &[RenderOutput],
    flows: &[FlowField],
    consistency: &ConsistencyResult,
    k: &CameraIntrinsics,
    cfg: &PnPConfig,
) -> Result<PnPSolution, PnpError> {
    if renders.len() != flows.len() || renders.len() != consistency.valid_masks.len() {
        return Err(PnpError::ShapeMismatch);
    }
    let mut pooled = CorrespondenceSet::default();
    for ((render, flow), mask) in renders.iter().zip(flows).zip(&consistency.valid_masks) {
        match build_correspondences(render, flow, mask) {
            Ok(set) => pooled.extend(set),
            Err(PnpError::EmptyMask) => continue,
            Err(e) => return Err(e),
        }
    }
    solve_pnp(&pooled, k, cfg)
}
