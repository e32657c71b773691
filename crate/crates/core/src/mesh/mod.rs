//! Triangle meshes, procedural test objects, software rasterization and the
//! geometric ground-truth flow between two poses.

mod obj;
mod raster;

pub use obj::{parse_obj, read_obj, write_obj, ObjError};
pub use raster::{gt_flow, rasterize, RenderOutput};

use crate::geometry::Pose;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: usize,
        count: usize,
    },
    #[error("triangle {0} is degenerate (area <= 1e-12 m^2)")]
    DegenerateTriangle(usize),
    #[error("vertex color count {colors} does not match vertex count {vertices}")]
    ColorCount { colors: usize, vertices: usize },
    #[error("mesh has no triangles")]
    Empty,
    #[error("mesh size must be positive, got {0}")]
    InvalidSize(f64),
    #[error("unknown mesh kind `{0}` (expected colored_cube, icosphere or l_block)")]
    UnknownKind(String),
    #[error(transparent)]
    Obj(#[from] ObjError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("object is entirely behind the camera (max vertex depth {0:.6} m)")]
    EmptyRender(f64),
    #[error("render size must be positive, got {width}x{height}")]
    InvalidSize { width: usize, height: usize },
    #[error("resolution mismatch: source {source_dims:?} vs target {target_dims:?}")]
    ResolutionMismatch {
        source_dims: (usize, usize),
        target_dims: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    /// Linear RGB per vertex, in `[0, 1]`.
    pub vertex_colors: Vec<Vector3<f64>>,
    /// Maximum pairwise vertex distance.
    pub diameter: f64,
    /// Discrete symmetry group of the textured object; always holds the identity.
    pub symmetry_transforms: Vec<Pose>,
}

impl TriangleMesh {
    /// Validates topology and computes the diameter. The identity is added to
    /// the symmetry set if missing.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[usize; 3]>,
        vertex_colors: Vec<Vector3<f64>>,
        mut symmetry_transforms: Vec<Pose>,
    ) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        if vertex_colors.len() != vertices.len() {
            return Err(MeshError::ColorCount {
                colors: vertex_colors.len(),
                vertices: vertices.len(),
            });
        }
        for (ti, tri) in triangles.iter().enumerate() {
            for &index in tri {
                if index >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        triangle: ti,
                        index,
                        count: vertices.len(),
                    });
                }
            }
            let [a, b, c] = tri.map(|i| vertices[i]);
            if 0.5 * (b - a).cross(&(c - a)).norm() <= 1e-12 {
                return Err(MeshError::DegenerateTriangle(ti));
            }
        }
        if !symmetry_transforms.iter().any(|s| *s == Pose::identity()) {
            symmetry_transforms.insert(0, Pose::identity());
        }
        let diameter = max_pairwise_distance(&vertices);
        Ok(Self {
            vertices,
            triangles,
            vertex_colors,
            diameter,
            symmetry_transforms,
        })
    }

    pub fn has_nontrivial_symmetry(&self) -> bool {
        self.symmetry_transforms.len() > 1
    }

    pub fn recompute_diameter(&self) -> f64 {
        max_pairwise_distance(&self.vertices)
    }

    /// Number of unique undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }
}

fn max_pairwise_distance(v: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            best = best.max((v[i] - v[j]).norm_squared());
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    ColoredCube,
    /// Cube whose colors are invariant under quarter turns about +z; carries
    /// the 4-element rotation group as its symmetry set.
    SymmetricCube,
    Icosphere {
        subdivisions: u32,
    },
    LBlock,
}

impl FromStr for MeshKind {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "colored_cube" => Ok(MeshKind::ColoredCube),
            "symmetric_cube" => Ok(MeshKind::SymmetricCube),
            "icosphere" => Ok(MeshKind::Icosphere { subdivisions: 2 }),
            "l_block" => Ok(MeshKind::LBlock),
            other => Err(MeshError::UnknownKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for MeshKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeshKind::ColoredCube => write!(f, "colored_cube"),
            MeshKind::SymmetricCube => write!(f, "symmetric_cube"),
            MeshKind::Icosphere { .. } => write!(f, "icosphere"),
            MeshKind::LBlock => write!(f, "l_block"),
        }
    }
}

/// Builds a watertight, vertex-colored test object of overall size `size`
/// (cube edge, sphere diameter, or long-arm length of the L block).
pub fn make_procedural_mesh(
    kind: MeshKind,
    size: f64,
    seed: u64,
) -> Result<TriangleMesh, MeshError> {
    if !(size > 0.0) {
        return Err(MeshError::InvalidSize(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        MeshKind::ColoredCube => {
            let (v, t) = cube_geometry(size);
            let colors = (0..v.len()).map(|_| random_color(&mut rng)).collect();
            TriangleMesh::new(v, t, colors, vec![])
        }
        MeshKind::SymmetricCube => {
            let (v, t) = cube_geometry(size);
            let top = random_color(&mut rng);
            let bottom = random_color(&mut rng);
            let colors = v
                .iter()
                .map(|p| if p.z > 0.0 { top } else { bottom })
                .collect();
            let syms = (0..4).map(|i| Pose::rot_z_deg(90.0 * i as f64)).collect();
            TriangleMesh::new(v, t, colors, syms)
        }
        MeshKind::Icosphere { subdivisions } => {
            let (v, t) = icosphere_geometry(size * 0.5, subdivisions);
            let colors = (0..v.len()).map(|_| random_color(&mut rng)).collect();
            TriangleMesh::new(v, t, colors, vec![])
        }
        MeshKind::LBlock => {
            let (v, t) = l_block_geometry(size);
            let colors = (0..v.len()).map(|_| random_color(&mut rng)).collect();
            TriangleMesh::new(v, t, colors, vec![])
        }
    }
}

/// Splits every triangle into four at its edge midpoints until no edge is
/// longer than `max_edge`, giving each new vertex a random color. The result
/// stays watertight; the symmetry set collapses to the identity because the
/// new colors break it.
pub fn subdivide_textured(
    mesh: &TriangleMesh,
    max_edge: f64,
    seed: u64,
) -> Result<TriangleMesh, MeshError> {
    if !(max_edge > 0.0) {
        return Err(MeshError::InvalidSize(max_edge));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertices = mesh.vertices.clone();
    let mut colors = mesh.vertex_colors.clone();
    let mut triangles = mesh.triangles.clone();
    let longest = |v: &[Vector3<f64>], t: &[[usize; 3]]| {
        t.iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (v[a] - v[b]).norm())
            .fold(0.0, f64::max)
    };
    while longest(&vertices, &triangles) > max_edge {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for t in &triangles {
            let mut mid = [0usize; 3];
            for (slot, (a, b)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                .into_iter()
                .enumerate()
            {
                let key = (a.min(b), a.max(b));
                mid[slot] = *midpoints.entry(key).or_insert_with(|| {
                    vertices.push((vertices[a] + vertices[b]) * 0.5);
                    colors.push(random_color(&mut rng));
                    vertices.len() - 1
                });
            }
            next.push([t[0], mid[0], mid[2]]);
            next.push([mid[0], t[1], mid[1]]);
            next.push([mid[2], mid[1], t[2]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        triangles = next;
    }
    TriangleMesh::new(vertices, triangles, colors, vec![])
}

fn random_color<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
    )
}

fn cube_geometry(size: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let h = size * 0.5;
    let mut v = Vec::with_capacity(8);
    for i in 0..8 {
        v.push(Vector3::new(
            if i & 1 == 0 { -h } else { h },
            if i & 2 == 0 { -h } else { h },
            if i & 4 == 0 { -h } else { h },
        ));
    }
    // Outward-facing, counter-clockwise when viewed from outside.
    let t = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (v, t)
}

fn icosphere_geometry(radius: f64, subdivisions: u32) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut t: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(t.len() * 4);
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        for &[a, b, c] in &t {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        t = next;
    }
    for p in &mut v {
        *p *= radius;
    }
    (v, t)
}

/// Extruded L profile with arms of unequal length (no proper symmetry).
fn l_block_geometry(size: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let s = size / 3.0;
    let profile = [
        (0.0, 0.0),
        (3.0, 0.0),
        (3.0, 1.0),
        (1.0, 1.0),
        (1.0, 2.0),
        (0.0, 2.0),
    ];
    // Center the bounding box on the origin.
    let (cx, cy, depth) = (1.5, 1.0, 1.0);
    let mut v = Vec::with_capacity(12);
    for &z in &[-0.5 * depth, 0.5 * depth] {
        for &(x, y) in &profile {
            v.push(Vector3::new((x - cx) * s, (y - cy) * s, z * s));
        }
    }
    let caps = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]];
    let mut t = Vec::with_capacity(20);
    for c in caps {
        t.push([c[0], c[2], c[1]]);
        t.push([c[0] + 6, c[1] + 6, c[2] + 6]);
    }
    for i in 0..6 {
        let j = (i + 1) % 6;
        t.push([i, j, j + 6]);
        t.push([i, j + 6, i + 6]);
    }
    (v, t)
}
