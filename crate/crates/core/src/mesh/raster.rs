use super::{RenderError, TriangleMesh};
use crate::flow::FlowField;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::grid::Grid;
use nalgebra::{Vector2, Vector3};

const NEAR_PLANE: f64 = 1e-4;
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;
/// Depth slack for the occlusion test in [`gt_flow`], meters.
pub const OCCLUSION_TOLERANCE: f64 = 1e-4;

/// Per-pixel output of [`rasterize`]. Background pixels have zero color and
/// depth and a NaN coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Grid<Vector3<f64>>,
    pub depth: Grid<f64>,
    pub coord_map: Grid<Vector3<f64>>,
    pub mask: Grid<bool>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.count_true()
    }

    /// Luma image (0.299, 0.587, 0.114).
    pub fn gray(&self) -> Grid<f64> {
        crate::photometric::to_gray(&self.color)
    }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Z-buffered rasterization with perspective-correct interpolation of vertex
/// colors and object coordinates, shaded by a headlight diffuse term.
///
/// Triangles with a vertex closer than the near plane are dropped.
pub fn rasterize(
    mesh: &TriangleMesh,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Result<RenderOutput, RenderError> {
    if width == 0 || height == 0 {
        return Err(RenderError::InvalidSize { width, height });
    }
    let cam: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| pose.transform_point(v))
        .collect();
    let max_depth = cam.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    if max_depth <= 0.0 {
        return Err(RenderError::EmptyRender(max_depth));
    }

    let mut color = Grid::filled(width, height, Vector3::zeros());
    let mut depth = Grid::filled(width, height, 0.0);
    let mut coord_map = Grid::filled(width, height, Vector3::repeat(f64::NAN));
    let mut mask = Grid::filled(width, height, false);

    for tri in &mesh.triangles {
        let x = tri.map(|i| cam[i]);
        if x.iter().any(|p| p.z < NEAR_PLANE) {
            continue;
        }
        let s = x.map(|p| k.project_camera(&p));
        let area = edge(&s[0], &s[1], &s[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let normal = (x[1] - x[0]).cross(&(x[2] - x[0])).normalize();
        let min_x = s
            .iter()
            .map(|p| p.x)
            .fold(f64::INFINITY, f64::min)
            .ceil()
            .max(0.0);
        let max_x = s
            .iter()
            .map(|p| p.x)
            .fold(f64::NEG_INFINITY, f64::max)
            .floor();
        let min_y = s
            .iter()
            .map(|p| p.y)
            .fold(f64::INFINITY, f64::min)
            .ceil()
            .max(0.0);
        let max_y = s
            .iter()
            .map(|p| p.y)
            .fold(f64::NEG_INFINITY, f64::max)
            .floor();
        if max_x < 0.0 || max_y < 0.0 || min_x > (width - 1) as f64 || min_y > (height - 1) as f64 {
            continue;
        }
        let max_x = max_x.min((width - 1) as f64) as usize;
        let max_y = max_y.min((height - 1) as f64) as usize;
        let inv_area = 1.0 / area;
        for py in min_y as usize..=max_y {
            for px in min_x as usize..=max_x {
                let p = Vector2::new(px as f64, py as f64);
                let b = [
                    edge(&s[1], &s[2], &p) * inv_area,
                    edge(&s[2], &s[0], &p) * inv_area,
                    edge(&s[0], &s[1], &p) * inv_area,
                ];
                if b.iter().any(|&w| w < -1e-9) {
                    continue;
                }
                let inv_z = b[0] / x[0].z + b[1] / x[1].z + b[2] / x[2].z;
                let z = 1.0 / inv_z;
                let idx = depth.index_of(px, py);
                let zbuf = depth.as_slice()[idx];
                if zbuf > 0.0 && z >= zbuf {
                    continue;
                }
                let w = [b[0] / x[0].z * z, b[1] / x[1].z * z, b[2] / x[2].z * z];
                let point_cam = x[0] * w[0] + x[1] * w[1] + x[2] * w[2];
                let shade = AMBIENT + DIFFUSE * normal.dot(&point_cam.normalize()).abs();
                let c = mesh.vertex_colors[tri[0]] * w[0]
                    + mesh.vertex_colors[tri[1]] * w[1]
                    + mesh.vertex_colors[tri[2]] * w[2];
                depth.as_mut_slice()[idx] = z;
                color.as_mut_slice()[idx] = c * shade;
                coord_map.as_mut_slice()[idx] = mesh.vertices[tri[0]] * w[0]
                    + mesh.vertices[tri[1]] * w[1]
                    + mesh.vertices[tri[2]] * w[2];
                mask.as_mut_slice()[idx] = true;
            }
        }
    }

    Ok(RenderOutput {
        color,
        depth,
        coord_map,
        mask,
        pose: *pose,
        intrinsics: *k,
    })
}

/// Largest foreground depth among the (up to four) pixels surrounding a
/// sub-pixel location, or `None` when none of them is foreground.
fn surrounding_depth(depth: &Grid<f64>, u: &Vector2<f64>) -> Option<f64> {
    let x0 = u.x.floor() as isize;
    let y0 = u.y.floor() as isize;
    let mut best: Option<f64> = None;
    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        if let Some(&d) = depth.get_checked(x0 + dx, y0 + dy) {
            if d > 0.0 {
                best = Some(best.map_or(d, |b: f64| b.max(d)));
            }
        }
    }
    best
}

/// Geometric flow from `source` to a view of the same mesh under `target_pose`.
///
/// A pixel is valid when its surface point projects inside the target image
/// and is not hidden behind the target's z-buffer (the farthest of the four
/// surrounding target depths, plus [`OCCLUSION_TOLERANCE`]).
pub fn gt_flow(
    source: &RenderOutput,
    target_pose: &Pose,
    target_depth: &Grid<f64>,
    k: &CameraIntrinsics,
) -> Result<FlowField, RenderError> {
    if !source.mask.same_dims(target_depth) {
        return Err(RenderError::ResolutionMismatch {
            source_dims: source.mask.dims(),
            target_dims: target_depth.dims(),
        });
    }
    let (w, h) = source.mask.dims();
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    let mut vectors = Grid::filled(w, h, Vector2::zeros());
    let mut valid = Grid::filled(w, h, false);
    for (x, y, &fg) in source.mask.enumerate() {
        if !fg {
            continue;
        }
        let p = source.coord_map[(x, y)];
        let xc = target_pose.transform_point(&p);
        if xc.z <= 0.0 {
            continue;
        }
        let u = k.project_camera(&xc);
        if !(u.x >= 0.0 && u.y >= 0.0 && u.x <= wmax && u.y <= hmax) {
            continue;
        }
        let Some(d) = surrounding_depth(target_depth, &u) else {
            continue;
        };
        if xc.z <= d + OCCLUSION_TOLERANCE {
            vectors[(x, y)] = u - Vector2::new(x as f64, y as f64);
            valid[(x, y)] = true;
        }
    }
    Ok(FlowField { vectors, valid })
}
