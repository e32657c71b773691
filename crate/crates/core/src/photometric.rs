//! Soft census descriptors, the generalized Charbonnier penalty and the
//! flow-guided photometric loss between real views, with its analytic
//! gradient with respect to the anchor flow.
//!
//! The anchor real image is warped onto the rendered grid by the student
//! flow; each neighboring real image is warped by its (fixed) teacher flow.
//! Census signatures of the warped images are compared per pixel with the
//! mean absolute difference and penalized by `ρ(x) = (x² + ε²)^q`.

use crate::flow::{bilinear_with_gradient, in_bounds, warp_image, FlowField};
use crate::grid::Grid;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensusConfig {
    /// Window half-width; the window is `(2r+1)²`.
    pub window_radius: usize,
    /// Added to `d²` under the root of the soft sign `d / sqrt(softness + d²)`.
    pub softness: f64,
}

impl Default for CensusConfig {
    fn default() -> Self {
        Self {
            window_radius: 3,
            softness: 1e-4,
        }
    }
}

impl CensusConfig {
    pub fn descriptor_len(&self) -> usize {
        let s = 2 * self.window_radius + 1;
        s * s - 1
    }

    pub(crate) fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.window_radius as isize;
        let mut v = Vec::with_capacity(self.descriptor_len());
        for dy in -r..=r {
            for dx in -r..=r {
                if dx != 0 || dy != 0 {
                    v.push((dx, dy));
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharbonnierConfig {
    pub epsilon: f64,
    pub exponent_q: f64,
}

impl Default for CharbonnierConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            exponent_q: 0.45,
        }
    }
}

/// `(x² + ε²)^q`.
#[inline]
pub fn charbonnier(x: f64, cfg: &CharbonnierConfig) -> f64 {
    (x * x + cfg.epsilon * cfg.epsilon).powf(cfg.exponent_q)
}

#[inline]
pub fn charbonnier_derivative(x: f64, cfg: &CharbonnierConfig) -> f64 {
    2.0 * cfg.exponent_q * x * (x * x + cfg.epsilon * cfg.epsilon).powf(cfg.exponent_q - 1.0)
}

#[inline]
fn soft_sign(d: f64, softness: f64) -> f64 {
    d / (softness + d * d).sqrt()
}

#[inline]
fn soft_sign_derivative(d: f64, softness: f64) -> f64 {
    softness / (softness + d * d).powf(1.5)
}

/// Per-pixel descriptors stored contiguously, `dims` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusMap {
    pub width: usize,
    pub height: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl CensusMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dims;
        &self.data[i..i + self.dims]
    }

    pub fn filled(width: usize, height: usize, dims: usize, value: f64) -> Self {
        Self {
            width,
            height,
            dims,
            data: vec![value; width * height * dims],
        }
    }
}

pub fn to_gray(image: &Grid<Vector3<f64>>) -> Grid<f64> {
    image.map(|c| 0.299 * c.x + 0.587 * c.y + 0.114 * c.z)
}

#[inline]
fn clamp_index(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

/// Soft ternary census signature with edge-clamped windows.
pub fn census_descriptor(image: &Grid<f64>, cfg: &CensusConfig) -> CensusMap {
    census_impl(image, None, cfg)
}

/// Census of a warped image: neighbors outside `valid` contribute 0.
pub fn census_descriptor_masked(
    image: &Grid<f64>,
    valid: &Grid<bool>,
    cfg: &CensusConfig,
) -> CensusMap {
    census_impl(image, Some(valid), cfg)
}

fn census_impl(image: &Grid<f64>, valid: Option<&Grid<bool>>, cfg: &CensusConfig) -> CensusMap {
    let (w, h) = image.dims();
    let offsets = cfg.offsets();
    let dims = offsets.len();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * dims);
            for x in 0..w {
                let center = image[(x, y)];
                for &(dx, dy) in &offsets {
                    let nx = clamp_index(x as isize + dx, w);
                    let ny = clamp_index(y as isize + dy, h);
                    let usable = valid.is_none_or(|m| m[(nx, ny)]);
                    row.push(if usable {
                        soft_sign(image[(nx, ny)] - center, cfg.softness)
                    } else {
                        0.0
                    });
                }
            }
            row
        })
        .collect();
    CensusMap {
        width: w,
        height: h,
        dims,
        data: rows.concat(),
    }
}

#[inline]
fn census_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean Charbonnier-penalized census distance between the anchor and each
/// other map over `valid` pixels, normalized by `valid count × others`.
/// Zero when nothing is valid or there are no other maps.
pub fn photometric_loss(
    anchor_warped: &CensusMap,
    others_warped: &[CensusMap],
    valid: &Grid<bool>,
    cfg: &CharbonnierConfig,
) -> f64 {
    let count = valid.count_true();
    if count == 0 || others_warped.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for other in others_warped {
        for (x, y, &v) in valid.enumerate() {
            if v {
                total += charbonnier(census_distance(other.at(x, y), anchor_warped.at(x, y)), cfg);
            }
        }
    }
    total / (count as f64 * others_warped.len() as f64)
}

/// Inputs of the flow-guided photometric objective that stay fixed while the
/// anchor flow is optimized.
#[derive(Debug, Clone, Copy)]
pub struct PhotometricInputs<'a> {
    /// Grayscale anchor real image.
    pub anchor_image: &'a Grid<f64>,
    /// Grayscale neighboring real images.
    pub neighbor_images: &'a [Grid<f64>],
    /// Flows from the anchor render onto each neighbor image.
    pub neighbor_flows: &'a [FlowField],
    /// Label mask of the anchor view.
    pub label_mask: &'a Grid<bool>,
    pub census: CensusConfig,
    pub charbonnier: CharbonnierConfig,
}

#[derive(Debug, Clone)]
pub struct PhotometricEval {
    pub loss: f64,
    /// `∂loss/∂flow` per pixel of the anchor flow; zero wherever that flow is
    /// invalid or warps out of bounds.
    pub grad: Grid<Vector2<f64>>,
    /// Pixels entering the loss.
    pub valid_count: usize,
}

/// Loss and gradient with respect to `anchor_flow`.
pub fn photometric_objective(
    inputs: &PhotometricInputs<'_>,
    anchor_flow: &FlowField,
) -> PhotometricEval {
    let (w, h) = anchor_flow.dims();
    let ccfg = inputs.census;
    let zero_grad = || Grid::filled(w, h, Vector2::zeros());
    if inputs.neighbor_images.is_empty() {
        return PhotometricEval {
            loss: 0.0,
            grad: zero_grad(),
            valid_count: 0,
        };
    }

    // Warp the anchor image, keeping the image gradient at each location.
    let (iw, ih) = inputs.anchor_image.dims();
    let mut warped = Grid::filled(w, h, 0.0);
    let mut warped_valid = Grid::filled(w, h, false);
    let mut image_grad = Grid::filled(w, h, Vector2::zeros());
    for (x, y, &v) in anchor_flow.valid.enumerate() {
        if !v {
            continue;
        }
        let loc = Vector2::new(x as f64, y as f64) + anchor_flow.vectors[(x, y)];
        if in_bounds(iw, ih, &loc) {
            let (val, g) = bilinear_with_gradient(inputs.anchor_image, &loc);
            warped[(x, y)] = val;
            image_grad[(x, y)] = g;
            warped_valid[(x, y)] = true;
        }
    }

    let mut mask = inputs.label_mask.and(&warped_valid);
    let mut neighbor_census = Vec::with_capacity(inputs.neighbor_images.len());
    for (img, flow) in inputs.neighbor_images.iter().zip(inputs.neighbor_flows) {
        let (nw, nv) = warp_image(img, &flow.target_locations(), &flow.valid);
        mask = mask.and(&nv);
        neighbor_census.push(census_descriptor_masked(&nw, &nv, &ccfg));
    }
    let anchor_census = census_descriptor_masked(&warped, &warped_valid, &ccfg);
    let count = mask.count_true();
    if count == 0 {
        return PhotometricEval {
            loss: 0.0,
            grad: zero_grad(),
            valid_count: 0,
        };
    }
    let loss = photometric_loss(&anchor_census, &neighbor_census, &mask, &inputs.charbonnier);

    // Back-propagate to warped anchor intensities, then to the flow.
    let scale = 1.0 / (count as f64 * neighbor_census.len() as f64);
    let dims = anchor_census.dims;
    let inv_dims = 1.0 / dims as f64;
    let offsets = ccfg.offsets();
    let mut d_warped = Grid::filled(w, h, 0.0);
    let mut g_census = vec![0.0; dims];
    for (x, y, &m) in mask.enumerate() {
        if !m {
            continue;
        }
        let ca = anchor_census.at(x, y);
        g_census.iter_mut().for_each(|g| *g = 0.0);
        for other in &neighbor_census {
            let co = other.at(x, y);
            let dist = census_distance(co, ca);
            let drho = charbonnier_derivative(dist, &inputs.charbonnier) * inv_dims * scale;
            for j in 0..dims {
                let diff = ca[j] - co[j];
                if diff != 0.0 {
                    g_census[j] += drho * diff.signum();
                }
            }
        }
        let center = warped[(x, y)];
        for (j, &(dx, dy)) in offsets.iter().enumerate() {
            let nx = clamp_index(x as isize + dx, w);
            let ny = clamp_index(y as isize + dy, h);
            if (nx, ny) == (x, y) || !warped_valid[(nx, ny)] || g_census[j] == 0.0 {
                continue;
            }
            let g = g_census[j] * soft_sign_derivative(warped[(nx, ny)] - center, ccfg.softness);
            d_warped[(nx, ny)] += g;
            d_warped[(x, y)] -= g;
        }
    }
    let grad = Grid::from_fn(w, h, |x, y| {
        if warped_valid[(x, y)] {
            image_grad[(x, y)] * d_warped[(x, y)]
        } else {
            Vector2::zeros()
        }
    });
    PhotometricEval {
        loss,
        grad,
        valid_count: count,
    }
}

/// Gradient of the photometric objective with respect to the anchor flow.
pub fn photometric_loss_grad(
    inputs: &PhotometricInputs<'_>,
    anchor_flow: &FlowField,
) -> Grid<Vector2<f64>> {
    photometric_objective(inputs, anchor_flow).grad
}
