//! File output for scenes, poses and debug maps, and re-scoring of stored
//! poses.

use super::{ExperimentConfig, ExperimentOutcome, HarnessError, Phase, SceneBundle};
use crate::consistency::write_sigma_pgm;
use crate::geometry::Pose;
use crate::grid::Grid;
use crate::image_io::{write_depth_pgm, write_ppm};
use crate::learner::{initialize_weights, teacher_targets};
use crate::mesh::write_obj;
use crate::metrics::{
    evaluate_scene, summarize, PoseErrorReport, ReportSummary, DEFAULT_DIAMETER_FRACTION,
};
use nalgebra::Vector3;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_pose(path: &Path, pose: &Pose) -> Result<(), HarnessError> {
    write_with(path, |w| w.write_all(pose.to_text().as_bytes()))
}

fn read_pose(path: &Path) -> Result<Pose, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Pose::from_text(&text)
        .map_err(|e| io_err(path)(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Location of a stored pose inside an experiment directory.
pub fn pose_path(dir: &Path, scene_id: u32, label: &str) -> PathBuf {
    dir.join("poses")
        .join(format!("scene_{scene_id:03}_{label}.pose"))
}

/// Writes the truth pose and the scored pose of every phase under `dir/poses`.
pub fn write_poses(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), HarnessError> {
    ensure_dir(&dir.join("poses"))?;
    for (id, truth) in outcome.truth_poses.iter().enumerate() {
        write_pose(&pose_path(dir, id as u32, "truth"), truth)?;
    }
    for e in &outcome.evaluations {
        write_pose(&pose_path(dir, e.scene_id, e.phase.as_str()), &e.pose)?;
    }
    Ok(())
}

/// Writes one scene as a directory of images, depth maps, an OBJ mesh and pose
/// files.
pub fn write_scene(scene: &SceneBundle, dir: &Path) -> Result<(), HarnessError> {
    ensure_dir(dir)?;
    write_with(&dir.join("mesh.obj"), |w| write_obj(&scene.mesh, w))?;
    write_pose(&dir.join("truth.pose"), &scene.truth_pose)?;
    write_pose(&dir.join("initial.pose"), &scene.initial_pose)?;
    let k = &scene.intrinsics;
    write_with(&dir.join("intrinsics.txt"), |w| {
        writeln!(w, "{:.16e} {:.16e} {:.16e} {:.16e}", k.fx, k.fy, k.cx, k.cy)
    })?;
    write_with(&dir.join("real.ppm"), |w| write_ppm(&scene.real_image, w))?;
    write_with(&dir.join("real_depth.pgm"), |w| {
        write_depth_pgm(&scene.real_depth, w)
    })?;
    write_with(&dir.join("augmented.ppm"), |w| {
        write_ppm(&scene.augmented_image, w)
    })?;
    for (i, r) in scene.renders.iter().enumerate() {
        write_with(&dir.join(format!("render_{i}.ppm")), |w| {
            write_ppm(&r.color, w)
        })?;
        write_with(&dir.join(format!("render_{i}_depth.pgm")), |w| {
            write_depth_pgm(&r.depth, w)
        })?;
        write_pose(&dir.join(format!("render_{i}.pose")), &r.pose)?;
    }
    for (k, image) in scene.neighbor_real_images.iter().enumerate() {
        write_with(&dir.join(format!("neighbor_{k}.ppm")), |w| {
            write_ppm(image, w)
        })?;
        write_pose(
            &dir.join(format!("neighbor_{k}_truth.pose")),
            &scene.neighbor_truth_poses[k],
        )?;
        write_pose(
            &dir.join(format!("neighbor_{k}_initial.pose")),
            &scene.neighbor_initial_poses[k],
        )?;
    }
    Ok(())
}

/// Object coordinates mapped into the unit cube of their bounding box; the
/// background is black.
pub fn coord_map_image(coords: &Grid<Vector3<f64>>) -> Grid<Vector3<f64>> {
    let finite = coords.iter().filter(|c| c.iter().all(|v| v.is_finite()));
    let (lo, hi) = finite.fold(
        (
            Vector3::repeat(f64::INFINITY),
            Vector3::repeat(f64::NEG_INFINITY),
        ),
        |(lo, hi), c| (lo.inf(c), hi.sup(c)),
    );
    let span = (hi - lo).map(|s| if s > 0.0 { s } else { 1.0 });
    coords.map(|c| {
        if c.iter().all(|v| v.is_finite()) {
            (c - lo).component_div(&span)
        } else {
            Vector3::zeros()
        }
    })
}

/// Dumps color, depth, object-coordinate and σ maps of every render of one
/// scene, with σ taken from the starting weights of `cfg`.
pub fn write_render_debug(
    scene: &SceneBundle,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(), HarnessError> {
    ensure_dir(dir)?;
    let view = scene.training_view();
    let weights = initialize_weights(std::slice::from_ref(&view), &cfg.init)?;
    let targets = teacher_targets(&weights, &view, &cfg.train)?;
    write_with(&dir.join("real.ppm"), |w| write_ppm(&scene.real_image, w))?;
    for (i, r) in scene.renders.iter().enumerate() {
        write_with(&dir.join(format!("render_{i}_color.ppm")), |w| {
            write_ppm(&r.color, w)
        })?;
        write_with(&dir.join(format!("render_{i}_depth.pgm")), |w| {
            write_depth_pgm(&r.depth, w)
        })?;
        let coords = coord_map_image(&r.coord_map);
        write_with(&dir.join(format!("render_{i}_coord.ppm")), |w| {
            write_ppm(&coords, w)
        })?;
        let sigma = &targets.consistency.sigma_maps[i];
        write_with(&dir.join(format!("render_{i}_sigma.pgm")), |w| {
            write_sigma_pgm(sigma, w)
        })?;
    }
    Ok(())
}

/// A stored pose scored again against the stored truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredEvaluation {
    pub scene_id: u32,
    pub phase: Phase,
    pub report: PoseErrorReport,
}

/// Scores the poses written by [`write_poses`] again. Meshes and intrinsics
/// come from `cfg`, which must be the configuration of the run.
pub fn reevaluate(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<StoredEvaluation>, HarnessError> {
    cfg.validate()?;
    let meshes = super::load_meshes(&cfg.scene)?;
    let k = cfg.scene.layout.intrinsics;
    let mut out = Vec::new();
    for phase in [Phase::Init, Phase::Pretrained, Phase::Refined] {
        for id in 0..cfg.scene.count as u32 {
            let truth = read_pose(&pose_path(dir, id, "truth"))?;
            let estimate = read_pose(&pose_path(dir, id, phase.as_str()))?;
            let mesh = &meshes[id as usize % meshes.len()];
            let report = evaluate_scene(&estimate, &truth, mesh, &k, DEFAULT_DIAMETER_FRACTION)?;
            out.push(StoredEvaluation {
                scene_id: id,
                phase,
                report,
            });
        }
    }
    Ok(out)
}

/// Aggregate over the rows of one phase.
pub fn summarize_stored(rows: &[StoredEvaluation], phase: Phase) -> ReportSummary {
    let reports: Vec<PoseErrorReport> = rows
        .iter()
        .filter(|r| r.phase == phase)
        .map(|r| r.report)
        .collect();
    summarize(&reports)
}

pub fn write_stored_evaluations<W: Write>(
    rows: &[StoredEvaluation],
    out: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["scene_id", "phase"];
    header.extend(PoseErrorReport::CSV_HEADER);
    w.write_record(&header)?;
    for e in rows {
        let mut row = vec![e.scene_id.to_string(), e.phase.as_str().to_string()];
        row.extend(e.report.csv_fields());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(Path::new("evaluation")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_axis_angle;

    #[test]
    fn coord_image_spans_unit_cube() {
        let mut g = Grid::filled(3, 1, Vector3::repeat(f64::NAN));
        g[(1, 0)] = Vector3::new(-0.05, 0.0, 0.1);
        g[(2, 0)] = Vector3::new(0.05, 0.2, 0.1);
        let img = coord_map_image(&g);
        assert_eq!(img[(0, 0)], Vector3::zeros());
        assert_eq!(img[(1, 0)], Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(img[(2, 0)], Vector3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn pose_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pose::new(
            rotation_from_axis_angle(Vector3::new(0.1, 0.2, -0.3)),
            Vector3::new(0.0, 0.01, 0.5),
        );
        let path = dir.path().join("a.pose");
        write_pose(&path, &p).unwrap();
        assert_eq!(read_pose(&path).unwrap(), p);
    }
}
