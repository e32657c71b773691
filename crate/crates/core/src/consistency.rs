//! Multi-view flow consistency: the per-pixel endpoint deviation σ across the
//! synthetic views and the thresholded label masks derived from it.
//!
//! Every rendered view `i` pairs with the same real image. A surface point
//! `p` seen in several views should land on one location of the real image,
//! `u_i + f_i(u_i)`, whichever view its flow was predicted from. The spread of
//! those endpoints is σ; pixels with σ below `tau` become pseudo labels.

use crate::flow::{bilinear_unchecked, in_bounds, FlowField};
use crate::geometry::CameraIntrinsics;
use crate::grid::Grid;
use crate::mesh::RenderOutput;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConsistencyError {
    #[error("{renders} renders but {flows} flows")]
    LengthMismatch { renders: usize, flows: usize },
    #[error("view {0} has a different resolution from view 0")]
    Resolution(usize),
    #[error("need at least 2 {what}, got {got}")]
    TooFew { what: &'static str, got: usize },
    #[error("tau must be positive, got {0}")]
    InvalidTau(f64),
    #[error("no pixels were selected; precision is undefined")]
    NothingSelected,
}

/// How the endpoint spread is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaNormalization {
    /// `1/k`, the default.
    #[default]
    Population,
    /// `1/(k−1)`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyConfig {
    /// Selection threshold in pixels.
    pub tau: f64,
    /// Max object-space distance between a point and the surface seen at its
    /// projection for the point to count as visible, meters.
    pub visibility_tolerance: f64,
    pub normalization: SigmaNormalization,
}

impl ConsistencyConfig {
    /// Threshold `tau` with the visibility tolerance set to 2% of the diameter.
    pub fn for_diameter(tau: f64, diameter: f64) -> Self {
        Self {
            tau,
            visibility_tolerance: 0.02 * diameter,
            normalization: SigmaNormalization::Population,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyResult {
    /// σ per view and pixel; `+∞` where fewer than two endpoints exist.
    pub sigma_maps: Vec<Grid<f64>>,
    pub valid_masks: Vec<Grid<bool>>,
    pub view_count: usize,
    pub tau: f64,
}

impl ConsistencyResult {
    pub fn valid_count(&self) -> usize {
        self.valid_masks.iter().map(Grid::count_true).sum()
    }

    /// Finite σ values across all views, row-major view by view.
    pub fn finite_sigmas(&self) -> Vec<f64> {
        self.sigma_maps
            .iter()
            .flat_map(|m| m.iter().copied().filter(|s| s.is_finite()))
            .collect()
    }

    pub fn median_sigma(&self) -> Option<f64> {
        median(self.finite_sigmas())
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn check_views(renders: &[RenderOutput], flows: &[FlowField]) -> Result<(), ConsistencyError> {
    if renders.len() != flows.len() {
        return Err(ConsistencyError::LengthMismatch {
            renders: renders.len(),
            flows: flows.len(),
        });
    }
    if let Some(first) = renders.first() {
        let dims = first.mask.dims();
        for (i, (r, f)) in renders.iter().zip(flows).enumerate() {
            if r.mask.dims() != dims || f.dims() != dims {
                return Err(ConsistencyError::Resolution(i));
            }
        }
    }
    Ok(())
}

/// Endpoint of `p` through one view, if the point is visible there and the
/// flow at its projection is valid.
fn endpoint_in_view(
    p: &Vector3<f64>,
    render: &RenderOutput,
    flow: &FlowField,
    k: &CameraIntrinsics,
    visibility_tolerance: f64,
) -> Option<Vector2<f64>> {
    let xc = render.pose.transform_point(p);
    if xc.z <= 0.0 {
        return None;
    }
    let u = k.project_camera(&xc);
    let (w, h) = render.mask.dims();
    if !in_bounds(w, h, &u) {
        return None;
    }
    let (lx, ly) = (u.x.round() as usize, u.y.round() as usize);
    if !render.mask[(lx, ly)] || !flow.valid[(lx, ly)] {
        return None;
    }
    if (render.coord_map[(lx, ly)] - p).norm() > visibility_tolerance {
        return None;
    }
    // Bilinear when the whole stencil is valid, otherwise the landing pixel.
    let x0 = u.x.floor() as usize;
    let y0 = u.y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let stencil_valid = flow.valid[(x0, y0)]
        && flow.valid[(x1, y0)]
        && flow.valid[(x0, y1)]
        && flow.valid[(x1, y1)];
    let f = if stencil_valid {
        bilinear_unchecked(&flow.vectors, &u)
    } else {
        flow.vectors[(lx, ly)]
    };
    Some(u + f)
}

/// Endpoints of object point `p` through each view; `None` where the point is
/// hidden, off-image, background, or lacks a valid flow.
pub fn endpoints_for_point(
    p: &Vector3<f64>,
    renders: &[RenderOutput],
    flows: &[FlowField],
    visibility_tolerance: f64,
) -> Result<Vec<Option<Vector2<f64>>>, ConsistencyError> {
    check_views(renders, flows)?;
    Ok(renders
        .iter()
        .zip(flows)
        .map(|(r, f)| endpoint_in_view(p, r, f, &r.intrinsics, visibility_tolerance))
        .collect())
}

/// Pooled endpoint deviation `sqrt((1/k) Σ ‖u_i − ū‖²)`.
pub fn sigma(endpoints: &[Vector2<f64>]) -> Result<f64, ConsistencyError> {
    sigma_with(endpoints, SigmaNormalization::Population)
}

pub fn sigma_with(
    endpoints: &[Vector2<f64>],
    norm: SigmaNormalization,
) -> Result<f64, ConsistencyError> {
    let k = endpoints.len();
    if k < 2 {
        return Err(ConsistencyError::TooFew {
            what: "endpoints",
            got: k,
        });
    }
    let mean = endpoints.iter().sum::<Vector2<f64>>() / k as f64;
    let ss: f64 = endpoints.iter().map(|u| (u - mean).norm_squared()).sum();
    let denom = match norm {
        SigmaNormalization::Population => k as f64,
        SigmaNormalization::Sample => (k - 1) as f64,
    };
    Ok((ss / denom).sqrt())
}

/// σ maps and label masks for `n ≥ 2` views. Flow `i` maps render `i` onto
/// the shared real image.
pub fn build_consistency(
    renders: &[RenderOutput],
    flows: &[FlowField],
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyResult, ConsistencyError> {
    check_views(renders, flows)?;
    if renders.len() < 2 {
        return Err(ConsistencyError::TooFew {
            what: "views",
            got: renders.len(),
        });
    }
    if !(cfg.tau > 0.0) {
        return Err(ConsistencyError::InvalidTau(cfg.tau));
    }
    let (w, h) = renders[0].mask.dims();
    let per_view: Vec<(Grid<f64>, Grid<bool>)> = renders
        .par_iter()
        .enumerate()
        .map(|(view, render)| {
            let own = &flows[view];
            let rows: Vec<Vec<(f64, bool)>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    let mut endpoints = Vec::with_capacity(renders.len());
                    (0..w)
                        .map(|x| {
                            if !render.mask[(x, y)] || !own.valid[(x, y)] {
                                return (f64::INFINITY, false);
                            }
                            let p = render.coord_map[(x, y)];
                            endpoints.clear();
                            // The pixel's own view contributes its exact center.
                            endpoints.push(Vector2::new(x as f64, y as f64) + own.vectors[(x, y)]);
                            endpoints.extend(
                                renders
                                    .iter()
                                    .zip(flows)
                                    .enumerate()
                                    .filter(|&(j, _)| j != view)
                                    .filter_map(|(_, (r, f))| {
                                        endpoint_in_view(
                                            &p,
                                            r,
                                            f,
                                            &r.intrinsics,
                                            cfg.visibility_tolerance,
                                        )
                                    }),
                            );
                            match sigma_with(&endpoints, cfg.normalization) {
                                Ok(s) => (s, s < cfg.tau),
                                Err(_) => (f64::INFINITY, false),
                            }
                        })
                        .collect()
                })
                .collect();
            let flat: Vec<(f64, bool)> = rows.into_iter().flatten().collect();
            (
                Grid::from_vec(w, h, flat.iter().map(|v| v.0).collect()),
                Grid::from_vec(w, h, flat.iter().map(|v| v.1).collect()),
            )
        })
        .collect();
    let (sigma_maps, valid_masks) = per_view.into_iter().unzip();
    Ok(ConsistencyResult {
        sigma_maps,
        valid_masks,
        view_count: renders.len(),
        tau: cfg.tau,
    })
}

/// Precision and recall of the selected labels against reference flows.
///
/// A selected pixel is correct when the reference is valid there and the
/// endpoint error is at most `epe_limit`. Recall counts the reference-valid
/// pixels whose flow is within `epe_limit` of the reference.
pub fn label_precision(
    consistency: &ConsistencyResult,
    flows: &[FlowField],
    oracle_flows: &[FlowField],
    epe_limit: f64,
) -> Result<(f64, f64), ConsistencyError> {
    if flows.len() != consistency.valid_masks.len() || oracle_flows.len() != flows.len() {
        return Err(ConsistencyError::LengthMismatch {
            renders: consistency.valid_masks.len(),
            flows: flows.len().min(oracle_flows.len()),
        });
    }
    let (mut selected, mut correct, mut good, mut good_selected) = (0usize, 0usize, 0usize, 0usize);
    for ((mask, f), o) in consistency.valid_masks.iter().zip(flows).zip(oracle_flows) {
        for i in 0..mask.len() {
            let is_good = o.valid.as_slice()[i]
                && f.valid.as_slice()[i]
                && (f.vectors.as_slice()[i] - o.vectors.as_slice()[i]).norm() <= epe_limit;
            let sel = mask.as_slice()[i];
            selected += sel as usize;
            correct += (sel && is_good) as usize;
            good += is_good as usize;
            good_selected += (sel && is_good) as usize;
        }
    }
    if selected == 0 {
        return Err(ConsistencyError::NothingSelected);
    }
    let recall = if good == 0 {
        0.0
    } else {
        good_selected as f64 / good as f64
    };
    Ok((correct as f64 / selected as f64, recall))
}

/// 16-bit PGM of a σ map in units of 1/1000 px, saturating at 65535 (also
/// used for undefined σ).
pub fn write_sigma_pgm<W: Write>(sigma_map: &Grid<f64>, out: W) -> std::io::Result<()> {
    crate::image_io::write_pgm16(sigma_map, 1000.0, out)
}
