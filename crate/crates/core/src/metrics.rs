//! Pose error metrics over mesh vertices: ADD, ADD-S, MSSD and MSPD, plus the
//! per-scene report and its aggregates.

use crate::geometry::{
    rotation_error_deg, translation_error, CameraIntrinsics, GeometryError, Pose,
};
use crate::mesh::TriangleMesh;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mesh has no symmetry transforms")]
    NoSymmetries,
    #[error("vertex behind the camera: {0}")]
    BehindCamera(#[from] GeometryError),
}

/// Default ADD threshold as a fraction of the mesh diameter.
pub const DEFAULT_DIAMETER_FRACTION: f64 = 0.1;

fn transformed(pose: &Pose, mesh: &TriangleMesh) -> Vec<Vector3<f64>> {
    mesh.vertices
        .iter()
        .map(|v| pose.transform_point(v))
        .collect()
}

/// Mean distance between corresponding vertices under the two poses.
pub fn add(estimate: &Pose, truth: &Pose, mesh: &TriangleMesh) -> f64 {
    let sum: f64 = mesh
        .vertices
        .iter()
        .map(|v| (estimate.transform_point(v) - truth.transform_point(v)).norm())
        .sum();
    sum / mesh.vertices.len() as f64
}

/// Mean closest-vertex distance from the estimate-transformed vertices to the
/// truth-transformed vertices.
pub fn add_s(estimate: &Pose, truth: &Pose, mesh: &TriangleMesh) -> f64 {
    let est = transformed(estimate, mesh);
    let gt = transformed(truth, mesh);
    let sum: f64 = est
        .iter()
        .map(|e| {
            gt.iter()
                .map(|g| (e - g).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / est.len() as f64
}

/// Maximum vertex distance minimized over the symmetry set, with each
/// symmetry applied on the estimate side.
pub fn mssd(estimate: &Pose, truth: &Pose, mesh: &TriangleMesh) -> Result<f64, MetricsError> {
    if mesh.symmetry_transforms.is_empty() {
        return Err(MetricsError::NoSymmetries);
    }
    let gt = transformed(truth, mesh);
    Ok(mesh
        .symmetry_transforms
        .iter()
        .map(|s| {
            let e = estimate.compose(s);
            mesh.vertices
                .iter()
                .zip(&gt)
                .map(|(v, g)| (e.transform_point(v) - g).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min))
}

/// Like [`mssd`] but measured between projections, in pixels.
pub fn mspd(
    estimate: &Pose,
    truth: &Pose,
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
) -> Result<f64, MetricsError> {
    if mesh.symmetry_transforms.is_empty() {
        return Err(MetricsError::NoSymmetries);
    }
    let project =
        |pose: &Pose, v: &Vector3<f64>| crate::geometry::project(v, pose, k).map(|(u, _)| u);
    let gt = mesh
        .vertices
        .iter()
        .map(|v| project(truth, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = f64::INFINITY;
    for s in &mesh.symmetry_transforms {
        let e = estimate.compose(s);
        let mut worst: f64 = 0.0;
        for (v, g) in mesh.vertices.iter().zip(&gt) {
            worst = worst.max((project(&e, v)? - g).norm());
        }
        best = best.min(worst);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub add_m: f64,
    pub adds_m: f64,
    pub add_correct_01d: bool,
    pub mssd_m: f64,
    pub mspd_px: f64,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
}

impl PoseErrorReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "add_m",
        "adds_m",
        "add_correct_01d",
        "mssd_m",
        "mspd_px",
        "rot_err_deg",
        "trans_err_m",
    ];

    pub fn csv_fields(&self) -> [String; 7] {
        [
            format!("{:e}", self.add_m),
            format!("{:e}", self.adds_m),
            (self.add_correct_01d as u8).to_string(),
            format!("{:e}", self.mssd_m),
            format!("{:e}", self.mspd_px),
            format!("{:e}", self.rot_err_deg),
            format!("{:e}", self.trans_err_m),
        ]
    }
}

/// Full report; correctness uses ADD-S for meshes with a nontrivial symmetry
/// and ADD otherwise, against `diameter_fraction · diameter`.
pub fn evaluate_scene(
    estimate: &Pose,
    truth: &Pose,
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    diameter_fraction: f64,
) -> Result<PoseErrorReport, MetricsError> {
    let add_m = add(estimate, truth, mesh);
    // Clamp so rounding cannot break adds ≤ add.
    let adds_m = add_s(estimate, truth, mesh).min(add_m);
    let scored = if mesh.has_nontrivial_symmetry() {
        adds_m
    } else {
        add_m
    };
    Ok(PoseErrorReport {
        add_m,
        adds_m,
        add_correct_01d: scored < diameter_fraction * mesh.diameter,
        mssd_m: mssd(estimate, truth, mesh)?,
        mspd_px: mspd(estimate, truth, mesh, k)?,
        rot_err_deg: rotation_error_deg(estimate, truth),
        trans_err_m: translation_error(estimate, truth),
    })
}

/// Aggregates over a set of reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub count: usize,
    pub add_01d_accuracy: f64,
    pub mean_rot_err_deg: f64,
    pub mean_trans_err_m: f64,
}

pub fn summarize(reports: &[PoseErrorReport]) -> ReportSummary {
    let n = reports.len();
    if n == 0 {
        return ReportSummary {
            count: 0,
            add_01d_accuracy: 0.0,
            mean_rot_err_deg: 0.0,
            mean_trans_err_m: 0.0,
        };
    }
    let nf = n as f64;
    ReportSummary {
        count: n,
        add_01d_accuracy: reports.iter().filter(|r| r.add_correct_01d).count() as f64 / nf,
        mean_rot_err_deg: reports.iter().map(|r| r.rot_err_deg).sum::<f64>() / nf,
        mean_trans_err_m: reports.iter().map(|r| r.trans_err_m).sum::<f64>() / nf,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_procedural_mesh, MeshKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(160.0, 160.0, 64.0, 64.0).unwrap()
    }

    fn l_block() -> TriangleMesh {
        make_procedural_mesh(MeshKind::LBlock, 0.1, 1).unwrap()
    }

    fn truth() -> Pose {
        Pose::from_axis_angle(Vector3::new(0.3, 0.2, -0.1), Vector3::new(0.0, 0.0, 0.5))
    }

    #[test]
    fn identical_poses_score_zero() {
        let m = l_block();
        let r = evaluate_scene(&truth(), &truth(), &m, &k(), 0.1).unwrap();
        assert_eq!(r.add_m, 0.0);
        assert_eq!(r.adds_m, 0.0);
        assert_eq!(r.mssd_m, 0.0);
        assert_eq!(r.mspd_px, 0.0);
        assert!(r.add_correct_01d);
    }

    #[test]
    fn pure_shift() {
        let m = l_block();
        let shifted = Pose::new(
            truth().rotation,
            truth().translation + Vector3::new(0.01, 0.0, 0.0),
        );
        assert_abs_diff_eq!(add(&shifted, &truth(), &m), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(mssd(&shifted, &truth(), &m).unwrap(), 0.01, epsilon = 1e-15);
        // Closest vertex: 160 · 0.01 / Z, largest for the nearest vertex.
        let zmin = m
            .vertices
            .iter()
            .map(|v| truth().transform_point(v).z)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(
            mspd(&shifted, &truth(), &m, &k()).unwrap(),
            160.0 * 0.01 / zmin,
            epsilon = 1e-9
        );
    }

    #[test]
    fn asymmetric_half_turn_is_wrong() {
        let m = l_block();
        let flipped = truth().compose(&Pose::rot_z_deg(180.0));
        assert!(add(&flipped, &truth(), &m) > 0.0);
        assert!(mssd(&flipped, &truth(), &m).unwrap() > 0.0);
    }

    #[test]
    fn symmetric_cube_quarter_turn() {
        let m = make_procedural_mesh(MeshKind::SymmetricCube, 0.1, 0).unwrap();
        let est = truth().compose(&Pose::rot_z_deg(90.0));
        assert!(add_s(&est, &truth(), &m) <= 0.02 * m.diameter);
        assert!(add(&est, &truth(), &m) > 0.3 * m.diameter);
        assert!(mssd(&est, &truth(), &m).unwrap() < 1e-9);
        assert!(mspd(&est, &truth(), &m, &k()).unwrap() < 1e-9);
        assert!(
            evaluate_scene(&est, &truth(), &m, &k(), 0.1)
                .unwrap()
                .add_correct_01d
        );
    }

    #[test]
    fn threshold_semantics() {
        let m = l_block();
        let d = m.diameter;
        let near = Pose::new(
            truth().rotation,
            truth().translation + Vector3::new(0.09 * d, 0.0, 0.0),
        );
        let far = Pose::new(
            truth().rotation,
            truth().translation + Vector3::new(0.11 * d, 0.0, 0.0),
        );
        assert!(
            evaluate_scene(&near, &truth(), &m, &k(), 0.1)
                .unwrap()
                .add_correct_01d
        );
        assert!(
            !evaluate_scene(&far, &truth(), &m, &k(), 0.1)
                .unwrap()
                .add_correct_01d
        );
    }

    #[test]
    fn mspd_behind_camera() {
        let m = l_block();
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            mspd(&behind, &truth(), &m, &k()),
            Err(MetricsError::BehindCamera(_))
        ));
    }

    #[test]
    fn summary_aggregates() {
        let r = |ok, rot| PoseErrorReport {
            add_m: 0.0,
            adds_m: 0.0,
            add_correct_01d: ok,
            mssd_m: 0.0,
            mspd_px: 0.0,
            rot_err_deg: rot,
            trans_err_m: 0.01,
        };
        let s = summarize(&[r(true, 1.0), r(false, 3.0)]);
        assert_eq!(s.add_01d_accuracy, 0.5);
        assert_eq!(s.mean_rot_err_deg, 2.0);
        assert_eq!(summarize(&[]).count, 0);
    }

    proptest! {
        #[test]
        fn frame_change_invariance(
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
            c in prop::array::uniform3(-0.5f64..0.5),
            t in prop::array::uniform3(-0.05f64..0.05),
        ) {
            let m = l_block();
            let est = Pose::from_axis_angle(Vector3::from(a) * 0.2, Vector3::new(t[0], t[1], 0.5 + t[2]));
            let gt = Pose::from_axis_angle(Vector3::from(b) * 0.2, Vector3::new(0.0, 0.0, 0.5));
            let frame = Pose::from_axis_angle(Vector3::from(c), Vector3::from(t));
            let (e2, g2) = (frame.compose(&est), frame.compose(&gt));
            prop_assert!((add(&est, &gt, &m) - add(&e2, &g2, &m)).abs() < 1e-9);
            prop_assert!((add_s(&est, &gt, &m) - add_s(&e2, &g2, &m)).abs() < 1e-9);
            prop_assert!((mssd(&est, &gt, &m).unwrap() - mssd(&e2, &g2, &m).unwrap()).abs() < 1e-9);
            prop_assert!(add_s(&est, &gt, &m) <= add(&est, &gt, &m) + 1e-12);
        }
    }
}
