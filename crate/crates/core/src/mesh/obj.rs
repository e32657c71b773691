//! Minimal OBJ subset: `v x y z [r g b]` and `f i j k` (1-based) lines.
//! Blank lines and `#` comments are skipped; any other statement is an error.

use super::{MeshError, TriangleMesh};
use nalgebra::Vector3;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ObjError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ObjError {
    ObjError {
        line,
        message: message.into(),
    }
}

fn parse_floats(line: usize, fields: &[&str]) -> Result<Vec<f64>, ObjError> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("invalid number `{f}`")))
        })
        .collect()
}

/// Parses OBJ text. Vertices without colors default to mid grey.
pub fn parse_obj(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match fields[0] {
            "v" => {
                let nums = parse_floats(line, &fields[1..])?;
                match nums.len() {
                    3 => colors.push(Vector3::new(0.5, 0.5, 0.5)),
                    6 => {
                        let c = Vector3::new(nums[3], nums[4], nums[5]);
                        if c.iter().any(|x| !(0.0..=1.0).contains(x)) {
                            return Err(err(line, "vertex color outside [0, 1]").into());
                        }
                        colors.push(c);
                    }
                    n => {
                        return Err(err(line, format!("vertex needs 3 or 6 values, got {n}")).into())
                    }
                }
                vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
            }
            "f" => {
                if fields.len() != 4 {
                    return Err(err(line, "only triangular faces `f i j k` are supported").into());
                }
                let mut tri = [0usize; 3];
                for (slot, f) in tri.iter_mut().zip(&fields[1..]) {
                    let i: usize = f
                        .parse()
                        .map_err(|_| err(line, format!("invalid vertex index `{f}`")))?;
                    if i == 0 || i > vertices.len() {
                        return Err(err(line, format!("vertex index {i} out of range")).into());
                    }
                    *slot = i - 1;
                }
                triangles.push(tri);
            }
            other => return Err(err(line, format!("unsupported statement `{other}`")).into()),
        }
    }
    TriangleMesh::new(vertices, triangles, colors, vec![])
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

pub fn write_obj<W: Write>(mesh: &TriangleMesh, mut out: W) -> std::io::Result<()> {
    for (v, c) in mesh.vertices.iter().zip(&mesh.vertex_colors) {
        writeln!(
            out,
            "v {:e} {:e} {:e} {:e} {:e} {:e}",
            v.x, v.y, v.z, c.x, c.y, c.z
        )?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_procedural_mesh, MeshKind};

    #[test]
    fn parses_colored_and_plain_vertices() {
        let m = parse_obj("# tri\nv 0 0 0 1 0 0\nv 1 0 0\nv 0 1 0 0 0 1\n\nf 1 2 3\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.vertex_colors[1], Vector3::new(0.5, 0.5, 0.5));
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_obj("v 0 0 0\nvn 0 0 1\n").unwrap_err();
        assert!(e.to_string().starts_with("line 2:"), "{e}");
        let e = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3 1\n").unwrap_err();
        assert!(e.to_string().starts_with("line 4:"), "{e}");
        let e = parse_obj("v 0 0 0\nf 1 2 3\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_obj("v 0 zero 0\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }

    #[test]
    fn round_trips_procedural_mesh() {
        let m = make_procedural_mesh(MeshKind::LBlock, 0.1, 5).unwrap();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let back = parse_obj(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.vertex_colors, m.vertex_colors);
        assert_eq!(back.triangles, m.triangles);
    }
}
