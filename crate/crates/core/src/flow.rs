//! Dense flow fields, bilinear sampling and backward image warping.

use crate::grid::Grid;
use nalgebra::Vector2;
use std::io::{Read, Write};
use std::ops::{Add, Mul};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("sample location ({x:.3}, {y:.3}) outside [0, {max_x}] x [0, {max_y}]")]
    OutOfBounds {
        x: f64,
        y: f64,
        max_x: usize,
        max_y: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("bad flow file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-pixel displacement in pixels plus a validity channel. Vectors at
/// invalid pixels carry no meaning (they are zero when produced here).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            vectors: Grid::filled(width, height, Vector2::zeros()),
            valid: Grid::filled(width, height, false),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.valid.dims()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count_true()
    }

    /// `pixel + flow` for every pixel.
    pub fn target_locations(&self) -> Grid<Vector2<f64>> {
        Grid::from_fn(self.valid.width(), self.valid.height(), |x, y| {
            endpoint(&Vector2::new(x as f64, y as f64), &self.vectors[(x, y)])
        })
    }
}

/// Where a pixel lands after applying its flow vector. No bounds checking.
#[inline]
pub fn endpoint(pixel: &Vector2<f64>, flow_vec: &Vector2<f64>) -> Vector2<f64> {
    pixel + flow_vec
}

#[inline]
pub fn in_bounds(width: usize, height: usize, loc: &Vector2<f64>) -> bool {
    loc.x >= 0.0 && loc.y >= 0.0 && loc.x <= (width - 1) as f64 && loc.y <= (height - 1) as f64
}

/// Corner indices and weights of the bilinear stencil. The upper corner is
/// clamped so locations on the last row/column stay exact.
#[inline]
fn stencil(
    width: usize,
    height: usize,
    loc: &Vector2<f64>,
) -> (usize, usize, usize, usize, f64, f64) {
    let x0 = (loc.x.floor() as usize).min(width - 1);
    let y0 = (loc.y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    (x0, y0, x1, y1, loc.x - x0 as f64, loc.y - y0 as f64)
}

/// Bilinear interpolation without bounds checking beyond index clamping.
#[inline]
pub(crate) fn bilinear_unchecked<T>(map: &Grid<T>, loc: &Vector2<f64>) -> T
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    let (x0, y0, x1, y1, ax, ay) = stencil(map.width(), map.height(), loc);
    let top = map[(x0, y0)] * (1.0 - ax) + map[(x1, y0)] * ax;
    let bottom = map[(x0, y1)] * (1.0 - ax) + map[(x1, y1)] * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Bilinear sample of `map` at a sub-pixel location inside `[0, W−1]×[0, H−1]`.
pub fn sample_bilinear<T>(map: &Grid<T>, loc: &Vector2<f64>) -> Result<T, FlowError>
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    if !in_bounds(map.width(), map.height(), loc) {
        return Err(FlowError::OutOfBounds {
            x: loc.x,
            y: loc.y,
            max_x: map.width().saturating_sub(1),
            max_y: map.height().saturating_sub(1),
        });
    }
    Ok(bilinear_unchecked(map, loc))
}

/// Value and spatial gradient `(∂/∂x, ∂/∂y)` of the bilinear interpolant of a
/// scalar map. On cell boundaries the gradient of the cell at `floor(loc)` is
/// used.
#[inline]
pub(crate) fn bilinear_with_gradient(map: &Grid<f64>, loc: &Vector2<f64>) -> (f64, Vector2<f64>) {
    let (x0, y0, x1, y1, ax, ay) = stencil(map.width(), map.height(), loc);
    let (v00, v10, v01, v11) = (map[(x0, y0)], map[(x1, y0)], map[(x0, y1)], map[(x1, y1)]);
    let top = v00 * (1.0 - ax) + v10 * ax;
    let bottom = v01 * (1.0 - ax) + v11 * ax;
    let value = top * (1.0 - ay) + bottom * ay;
    let dx = (v10 - v00) * (1.0 - ay) + (v11 - v01) * ay;
    let dy = bottom - top;
    (value, Vector2::new(dx, dy))
}

/// Backward warp: `warped[q] = image(target_locations[q])` wherever `valid[q]`
/// holds and the location is in bounds. Everything else is zero and invalid.
pub fn warp_image<T>(
    image: &Grid<T>,
    target_locations: &Grid<Vector2<f64>>,
    valid: &Grid<bool>,
) -> (Grid<T>, Grid<bool>)
where
    T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
{
    let (w, h) = target_locations.dims();
    let (iw, ih) = image.dims();
    let mut warped = Grid::filled(w, h, T::default());
    let mut warped_valid = Grid::filled(w, h, false);
    for (i, loc) in target_locations.iter().enumerate() {
        if valid.as_slice()[i] && in_bounds(iw, ih, loc) {
            warped.as_mut_slice()[i] = bilinear_unchecked(image, loc);
            warped_valid.as_mut_slice()[i] = true;
        }
    }
    (warped, warped_valid)
}

const MAGIC: &[u8; 4] = b"PFC1";

/// Writes the debug flow format: `PFC1`, width and height as u32 LE, row-major
/// f32 LE `(du, dv)` pairs, then the validity bitmap packed LSB-first.
pub fn write_flow<W: Write>(flow: &FlowField, mut out: W) -> Result<(), FlowError> {
    let (w, h) = flow.dims();
    out.write_all(MAGIC)?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    for v in flow.vectors.iter() {
        out.write_all(&(v.x as f32).to_le_bytes())?;
        out.write_all(&(v.y as f32).to_le_bytes())?;
    }
    let mut bits = vec![0u8; (w * h).div_ceil(8)];
    for (i, &b) in flow.valid.iter().enumerate() {
        if b {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.write_all(&bits)?;
    Ok(())
}

pub fn read_flow<R: Read>(mut input: R) -> Result<FlowField, FlowError> {
    let mut header = [0u8; 12];
    input.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(FlowError::Format("missing PFC1 magic".into()));
    }
    let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = vec![0u8; w * h * 8];
    input.read_exact(&mut body)?;
    let vectors = body
        .chunks_exact(8)
        .map(|c| {
            Vector2::new(
                f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
            )
        })
        .collect();
    let mut bits = vec![0u8; (w * h).div_ceil(8)];
    input.read_exact(&mut bits)?;
    let valid = (0..w * h)
        .map(|i| bits[i / 8] & (1 << (i % 8)) != 0)
        .collect();
    Ok(FlowField {
        vectors: Grid::from_vec(w, h, vectors),
        valid: Grid::from_vec(w, h, valid),
    })
}
