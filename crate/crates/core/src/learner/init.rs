//! Starting weights for both predictors.
//!
//! The geometric prior is the flow each pair would have if the initial pose
//! estimates were exact. Block matching refines that prior against the
//! actual real images with a local block search, which plays the role of a
//! flow network pretrained on synthetic data: roughly right, biased, noisy.

use super::{
    corrupt_flow, FlowGrid, LearnerError, OracleNoise, PairKey, PairSlot, PredictorWeights,
    SmoothnessOrder, TrainingView,
};
use crate::flow::FlowField;
use crate::flow::{bilinear_with_gradient, in_bounds};
use crate::geometry::Pose;
use crate::grid::Grid;
use crate::mesh::{gt_flow, rasterize, RenderOutput};
use crate::photometric::to_gray;
use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Half-width of the integer search window around the prior, pixels.
    pub search_radius: usize,
    /// Half-width of the correlation window, pixels.
    pub window_radius: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            search_radius: 10,
            window_radius: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMethod {
    GeometricPrior,
    BlockMatching(MatchConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub method: InitMethod,
    /// Std of isotropic Gaussian noise added to every foreground flow, pixels.
    pub noise_std: f64,
    pub seed: u64,
    pub smoothness: f64,
    pub smoothness_order: SmoothnessOrder,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            method: InitMethod::BlockMatching(MatchConfig::default()),
            noise_std: 0.0,
            seed: 0,
            smoothness: 0.05,
            smoothness_order: SmoothnessOrder::First,
        }
    }
}

/// Weights holding one grid per image pair of every view: `n` render-to-real
/// pairs and `m` render-0-to-neighbor pairs per scene.
pub fn initialize_weights(
    views: &[TrainingView],
    cfg: &InitConfig,
) -> Result<PredictorWeights, LearnerError> {
    if !(cfg.noise_std >= 0.0) {
        return Err(LearnerError::InvalidConfig(format!(
            "init noise must be non-negative, got {}",
            cfg.noise_std
        )));
    }
    let per_view = views
        .par_iter()
        .map(|v| view_grids(v, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut weights = PredictorWeights {
        smoothness: cfg.smoothness,
        smoothness_order: cfg.smoothness_order,
        ..Default::default()
    };
    for (key, grid) in per_view.into_iter().flatten() {
        weights.grids.insert(key, grid);
    }
    Ok(weights)
}

fn pair_seed(seed: u64, key: PairKey) -> u64 {
    let slot = match key.slot {
        PairSlot::View(i) => i as u64,
        PairSlot::Neighbor(k) => 0x1_0000 + k as u64,
    };
    let mut z = seed ^ ((key.scene as u64) << 32 | slot).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 29)
}

fn view_grids(
    view: &TrainingView,
    cfg: &InitConfig,
) -> Result<Vec<(PairKey, FlowGrid)>, LearnerError> {
    let (w, h) = view.real_image.dims();
    let anchor = view
        .renders
        .first()
        .ok_or_else(|| LearnerError::SceneMismatch {
            scene: view.scene_id,
            message: "no renders".to_string(),
        })?;
    // Key, source render, target pose, target depth, target image.
    type Pair<'a> = (
        PairKey,
        &'a RenderOutput,
        Pose,
        Grid<f64>,
        &'a Grid<Vector3<f64>>,
    );
    let mut pairs: Vec<Pair> = Vec::new();
    for (i, r) in view.renders.iter().enumerate() {
        pairs.push((
            PairKey::view(view.scene_id, i),
            r,
            view.initial_pose,
            anchor.depth.clone(),
            &view.real_image,
        ));
    }
    for (k, (img, pose)) in view
        .neighbor_images
        .iter()
        .zip(&view.neighbor_initial_poses)
        .enumerate()
    {
        let target = rasterize(&view.mesh, pose, &view.intrinsics, w, h)?;
        pairs.push((
            PairKey::neighbor(view.scene_id, k),
            anchor,
            *pose,
            target.depth,
            img,
        ));
    }
    pairs
        .into_par_iter()
        .map(|(key, render, pose, depth, image)| {
            let prior = prior_flow(render, &pose, &depth)?;
            let grid = match &cfg.method {
                InitMethod::GeometricPrior => prior,
                InitMethod::BlockMatching(m) => match_flow(render, &prior, &to_gray(image), m),
            };
            if cfg.noise_std == 0.0 {
                return Ok((key, grid));
            }
            let noise = OracleNoise {
                pixel_std: cfg.noise_std,
                pair_offset_std: 0.0,
                outlier_fraction: 0.0,
                ..Default::default()
            };
            let clean = FlowField {
                vectors: grid,
                valid: render.mask.clone(),
            };
            Ok((
                key,
                corrupt_flow(&clean, &noise, pair_seed(cfg.seed, key))
                    .flow
                    .vectors,
            ))
        })
        .collect()
}

/// Geometric flow toward a view at `pose`; foreground pixels without a valid
/// flow take the mean of the valid ones.
fn prior_flow(
    render: &RenderOutput,
    pose: &Pose,
    depth: &Grid<f64>,
) -> Result<Grid<Vector2<f64>>, LearnerError> {
    let flow = gt_flow(render, pose, depth, &render.intrinsics)?;
    let n = flow.valid_count();
    let mean = if n > 0 {
        flow.vectors
            .iter()
            .zip(flow.valid.iter())
            .filter(|(_, &v)| v)
            .map(|(f, _)| *f)
            .sum::<Vector2<f64>>()
            / n as f64
    } else {
        Vector2::zeros()
    };
    Ok(Grid::from_fn(
        flow.vectors.width(),
        flow.vectors.height(),
        |x, y| {
            if flow.valid[(x, y)] {
                flow.vectors[(x, y)]
            } else if render.mask[(x, y)] {
                mean
            } else {
                Vector2::zeros()
            }
        },
    ))
}

/// Integer block search around `prior` scored by zero-mean normalized
/// cross-correlation, with parabolic sub-pixel refinement. Only window
/// entries that fall on the rendered object count, so the unknown real
/// background does not bias the match.
pub fn match_flow(
    render: &RenderOutput,
    prior: &Grid<Vector2<f64>>,
    image_gray: &Grid<f64>,
    cfg: &MatchConfig,
) -> Grid<Vector2<f64>> {
    let (w, h) = image_gray.dims();
    let gray = render.gray();
    let a = cfg.window_radius as isize;
    let r = cfg.search_radius as isize;
    let side = (2 * r + 1) as usize;
    let rows: Vec<Vec<Vector2<f64>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut costs = vec![f64::INFINITY; side * side];
            let mut offsets = Vec::new();
            let mut template = Vec::new();
            (0..w)
                .map(|x| {
                    if !render.mask[(x, y)] {
                        return prior[(x, y)];
                    }
                    offsets.clear();
                    template.clear();
                    for dy in -a..=a {
                        for dx in -a..=a {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                                continue;
                            }
                            if render.mask[(nx as usize, ny as usize)] {
                                offsets.push((dx, dy));
                                template.push(gray[(nx as usize, ny as usize)]);
                            }
                        }
                    }
                    let raw_template = template.clone();
                    let Some(template) = standardize(&template) else {
                        return prior[(x, y)];
                    };
                    let base = prior[(x, y)].map(f64::round);
                    let (bx, by) = (x as isize + base.x as isize, y as isize + base.y as isize);
                    costs.fill(f64::INFINITY);
                    let mut best: Option<(usize, usize)> = None;
                    let mut patch = Vec::with_capacity(offsets.len());
                    for j in 0..side {
                        let ty = by + j as isize - r;
                        for i in 0..side {
                            let tx = bx + i as isize - r;
                            if tx - a < 0
                                || ty - a < 0
                                || tx + a >= w as isize
                                || ty + a >= h as isize
                            {
                                continue;
                            }
                            patch.clear();
                            patch.extend(offsets.iter().map(|&(dx, dy)| {
                                image_gray[((tx + dx) as usize, (ty + dy) as usize)]
                            }));
                            let c = match standardize(&patch) {
                                Some(p) => 1.0 - dot(&template, &p),
                                None => 2.0,
                            };
                            costs[j * side + i] = c;
                            if best.is_none_or(|(bi, bj)| c < costs[bj * side + bi]) {
                                best = Some((i, j));
                            }
                        }
                    }
                    let Some((i, j)) = best else {
                        return prior[(x, y)];
                    };
                    let at = |i: usize, j: usize| costs[j * side + i];
                    let sub_x = if i > 0 && i + 1 < side {
                        parabola(at(i - 1, j), at(i, j), at(i + 1, j))
                    } else {
                        0.0
                    };
                    let sub_y = if j > 0 && j + 1 < side {
                        parabola(at(i, j - 1), at(i, j), at(i, j + 1))
                    } else {
                        0.0
                    };
                    let coarse = base
                        + Vector2::new(i as f64 - r as f64 + sub_x, j as f64 - r as f64 + sub_y);
                    let pixel = Vector2::new(x as f64, y as f64);
                    match refine_translation(&offsets, &raw_template, image_gray, pixel + coarse) {
                        Some(loc) => loc - pixel,
                        None => coarse,
                    }
                })
                .collect()
        })
        .collect();
    Grid::from_vec(w, h, rows.concat())
}

/// Gauss-Newton refinement of the window position under a gain and bias
/// model `template ≈ gain · image + bias`. Gives up when the system is
/// degenerate or the estimate leaves the unit neighborhood of `start`.
fn refine_translation(
    offsets: &[(isize, isize)],
    template: &[f64],
    image: &Grid<f64>,
    start: Vector2<f64>,
) -> Option<Vector2<f64>> {
    let (w, h) = image.dims();
    let mut loc = start;
    let mut gain = 1.0;
    let mut bias = 0.0;
    for _ in 0..8 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (&(dx, dy), &t) in offsets.iter().zip(template) {
            let p = loc + Vector2::new(dx as f64, dy as f64);
            if !in_bounds(w, h, &p) {
                return None;
            }
            let (v, g) = bilinear_with_gradient(image, &p);
            let jac = Vector4::new(gain * g.x, gain * g.y, v, 1.0);
            let res = gain * v + bias - t;
            jtj += jac * jac.transpose();
            jtr += jac * res;
        }
        let delta = jtj.lu().solve(&-jtr)?;
        loc += Vector2::new(delta[0], delta[1]);
        gain += delta[2];
        bias += delta[3];
        if !(gain > 0.0) || (loc - start).norm() > 1.0 {
            return None;
        }
        if delta[0].abs().max(delta[1].abs()) < 1e-4 {
            break;
        }
    }
    Some(loc)
}

/// Zero-mean, unit-norm copy of `values`; `None` for a flat patch.
fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let norm = values
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        .sqrt();
    if !(norm > 1e-9) {
        return None;
    }
    Some(values.iter().map(|v| (v - mean) / norm).collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Vertex offset of the parabola through three equally spaced costs, within
/// half a sample.
fn parabola(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if !(denom > 0.0) || !left.is_finite() || !right.is_finite() {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabola_vertex() {
        // y = (x − 0.25)² sampled at −1, 0, 1.
        let f = |x: f64| (x - 0.25) * (x - 0.25);
        assert!((parabola(f(-1.0), f(0.0), f(1.0)) - 0.25).abs() < 1e-12);
        assert_eq!(parabola(1.0, 1.0, 1.0), 0.0);
        assert_eq!(parabola(f64::INFINITY, 0.0, 1.0), 0.0);
    }
}
