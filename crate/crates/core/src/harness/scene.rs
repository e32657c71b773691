use super::HarnessError;
use crate::geometry::{
    perturb_pose, rotation_from_axis_angle, sample_poses_around, CameraIntrinsics, Pose,
    PoseSamplingConfig,
};
use crate::grid::Grid;
use crate::learner::{OracleFlowPredictor, OracleNoise, PairKey, TrainingView};
use crate::mesh::{rasterize, RenderOutput, TriangleMesh};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Black,
    Gradient,
    ClutterTriangles,
}

impl FromStr for Background {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "black" => Ok(Background::Black),
            "gradient" => Ok(Background::Gradient),
            "clutter_triangles" | "clutter" => Ok(Background::ClutterTriangles),
            other => Err(format!("unknown background `{other}`")),
        }
    }
}

impl std::fmt::Display for Background {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Background::Black => "black",
            Background::Gradient => "gradient",
            Background::ClutterTriangles => "clutter_triangles",
        })
    }
}

/// Photometric difference between renders and the "real" images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainGapConfig {
    pub brightness_shift: f64,
    /// Per-channel exponent applied to rendered colors.
    pub gamma: f64,
    pub noise_std: f64,
    pub background: Background,
}

impl Default for DomainGapConfig {
    fn default() -> Self {
        Self {
            brightness_shift: 0.05,
            gamma: 1.3,
            noise_std: 0.01,
            background: Background::ClutterTriangles,
        }
    }
}

impl DomainGapConfig {
    /// No gap at all: real images equal renders.
    pub fn none() -> Self {
        Self {
            brightness_shift: 0.0,
            gamma: 1.0,
            noise_std: 0.0,
            background: Background::Black,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.gamma > 0.0) || !(self.noise_std >= 0.0) || !self.brightness_shift.is_finite() {
            return Err(HarnessError::Config(
                "gap needs gamma > 0, noise_std >= 0 and a finite brightness_shift".into(),
            ));
        }
        Ok(())
    }
}

/// Everything about how a scene is laid out, besides the mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLayout {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    /// Nominal camera-to-object distance, meters.
    pub distance: f64,
    /// Half-width of the uniform lateral jitter of the object, meters.
    pub lateral_jitter: f64,
    /// Half-width of the uniform depth jitter of the object, meters.
    pub depth_jitter: f64,
    /// Error of the initial pose estimates.
    pub init_perturbation: PoseSamplingConfig,
    /// Spread of the rendered views around the initial pose.
    pub render_spread: PoseSamplingConfig,
    /// Max rotation of a neighbor's truth pose from the anchor's, degrees.
    pub neighbor_rotation_deg: f64,
    /// Max translation of a neighbor from the anchor, fraction of diameter.
    pub neighbor_translation: f64,
    pub n_views: usize,
    pub m_real: usize,
    /// Brightness jitter amplitude of the student's copy of the real image.
    pub augmentation: f64,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            intrinsics: CameraIntrinsics {
                fx: 160.0,
                fy: 160.0,
                cx: 63.5,
                cy: 63.5,
            },
            distance: 0.5,
            lateral_jitter: 0.02,
            depth_jitter: 0.03,
            init_perturbation: PoseSamplingConfig {
                rotation_sigma_deg: 10.0,
                translation_sigma: 0.05,
                seed: 0,
            },
            render_spread: PoseSamplingConfig {
                rotation_sigma_deg: 4.0,
                translation_sigma: 0.02,
                seed: 0,
            },
            neighbor_rotation_deg: 10.0,
            neighbor_translation: 0.05,
            n_views: 4,
            m_real: 3,
            augmentation: 0.05,
        }
    }
}

/// A synthetic scene including its ground truth.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub scene_id: u32,
    pub seed: u64,
    pub mesh: Arc<TriangleMesh>,
    pub intrinsics: CameraIntrinsics,
    pub truth_pose: Pose,
    pub initial_pose: Pose,
    pub real_image: Grid<Vector3<f64>>,
    pub real_depth: Grid<f64>,
    pub augmented_image: Grid<Vector3<f64>>,
    pub neighbor_truth_poses: Vec<Pose>,
    pub neighbor_initial_poses: Vec<Pose>,
    pub neighbor_real_images: Vec<Grid<Vector3<f64>>>,
    pub neighbor_depths: Vec<Grid<f64>>,
    /// `renders[0]` is at `initial_pose`; the rest are sampled around it.
    pub renders: Vec<RenderOutput>,
}

impl SceneBundle {
    /// The learner's view of this scene, without any truth.
    pub fn training_view(&self) -> TrainingView {
        TrainingView {
            scene_id: self.scene_id,
            mesh: Arc::clone(&self.mesh),
            intrinsics: self.intrinsics,
            initial_pose: self.initial_pose,
            renders: self.renders.clone(),
            real_image: self.real_image.clone(),
            augmented_image: self.augmented_image.clone(),
            neighbor_images: self.neighbor_real_images.clone(),
            neighbor_initial_poses: self.neighbor_initial_poses.clone(),
        }
    }

    /// Registers this scene's pairs with a ground-truth flow predictor.
    pub fn register_oracle(&self, oracle: &mut OracleFlowPredictor) {
        for i in 0..self.renders.len() {
            oracle.insert(
                PairKey::view(self.scene_id, i),
                self.truth_pose,
                self.real_depth.clone(),
            );
        }
        for (k, (pose, depth)) in self
            .neighbor_truth_poses
            .iter()
            .zip(&self.neighbor_depths)
            .enumerate()
        {
            oracle.insert(PairKey::neighbor(self.scene_id, k), *pose, depth.clone());
        }
    }

    pub fn oracle(&self, noise: OracleNoise) -> OracleFlowPredictor {
        let mut o = OracleFlowPredictor::new(noise);
        self.register_oracle(&mut o);
        o
    }
}

/// Rotation drawn uniformly from SO(3).
fn uniform_rotation<R: Rng>(rng: &mut R) -> nalgebra::Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Random object pose in front of the camera.
pub fn sample_truth_pose<R: Rng>(layout: &SceneLayout, rng: &mut R) -> Pose {
    let r = uniform_rotation(rng);
    let j = |rng: &mut R, a: f64| {
        if a > 0.0 {
            rng.random_range(-a..a)
        } else {
            0.0
        }
    };
    let t = Vector3::new(
        j(rng, layout.lateral_jitter),
        j(rng, layout.lateral_jitter),
        layout.distance + j(rng, layout.depth_jitter),
    );
    Pose::new(r, t)
}

/// Pose within `max_rot_deg` and `max_trans` (meters) of `anchor`.
fn sample_neighbor<R: Rng>(anchor: &Pose, max_rot_deg: f64, max_trans: f64, rng: &mut R) -> Pose {
    let angle = max_rot_deg.to_radians() * rng.random::<f64>();
    let axis = unit_vector(rng);
    let shift = unit_vector(rng) * (max_trans * rng.random::<f64>());
    Pose::new(
        rotation_from_axis_angle(axis * angle) * anchor.rotation,
        anchor.translation + shift,
    )
}

fn background_image<R: Rng>(
    kind: Background,
    w: usize,
    h: usize,
    rng: &mut R,
) -> Grid<Vector3<f64>> {
    match kind {
        Background::Black => Grid::filled(w, h, Vector3::zeros()),
        Background::Gradient => {
            let a = Vector3::from_fn(|_, _| rng.random_range(0.1..0.6));
            let b = Vector3::from_fn(|_, _| rng.random_range(0.1..0.6));
            Grid::from_fn(w, h, |x, y| {
                let s = (x + y) as f64 / (w + h).max(2) as f64;
                a * (1.0 - s) + b * s
            })
        }
        Background::ClutterTriangles => {
            let mut img = background_image(Background::Gradient, w, h, rng);
            for _ in 0..16 {
                let color = Vector3::from_fn(|_, _| rng.random_range(0.05..0.95));
                let v: [Vector2<f64>; 3] = std::array::from_fn(|_| {
                    Vector2::new(
                        rng.random_range(-10.0..w as f64 + 10.0),
                        rng.random_range(-10.0..h as f64 + 10.0),
                    )
                });
                fill_triangle(&mut img, &v, color);
            }
            img
        }
    }
}

fn fill_triangle(img: &mut Grid<Vector3<f64>>, v: &[Vector2<f64>; 3], color: Vector3<f64>) {
    let edge = |a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>| {
        (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
    };
    let area = edge(&v[0], &v[1], &v[2]);
    if area.abs() < 1e-9 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = Vector2::new(x as f64, y as f64);
            let w = [
                edge(&v[1], &v[2], &p),
                edge(&v[2], &v[0], &p),
                edge(&v[0], &v[1], &p),
            ];
            if w.iter().all(|e| e * area.signum() >= 0.0) {
                img[(x, y)] = color;
            }
        }
    }
}

/// Real image of a render: object over the background, then gamma,
/// brightness and sensor noise.
fn apply_gap<R: Rng>(
    render: &RenderOutput,
    gap: &DomainGapConfig,
    rng: &mut R,
) -> Grid<Vector3<f64>> {
    let (w, h) = render.mask.dims();
    let background = background_image(gap.background, w, h, rng);
    let noise = (gap.noise_std > 0.0).then(|| Normal::new(0.0, gap.noise_std).expect("finite std"));
    Grid::from_fn(w, h, |x, y| {
        let base = if render.mask[(x, y)] {
            render.color[(x, y)]
        } else {
            background[(x, y)]
        };
        base.map(|c| {
            let mut v = if gap.gamma == 1.0 {
                c
            } else {
                c.powf(gap.gamma)
            };
            if gap.brightness_shift != 0.0 {
                v += gap.brightness_shift;
            }
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            v.clamp(0.0, 1.0)
        })
    })
}

/// Builds one scene from `seed`: truth pose, perturbed initial pose, the gapped
/// real image, neighbors near the truth with their own perturbed estimates,
/// and the renders around the initial pose.
pub fn generate_scene(
    mesh: Arc<TriangleMesh>,
    layout: &SceneLayout,
    gap: &DomainGapConfig,
    scene_id: u32,
    seed: u64,
) -> Result<SceneBundle, HarnessError> {
    gap.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = layout.intrinsics;
    let (w, h) = (layout.width, layout.height);
    let d = mesh.diameter;

    let truth_pose = sample_truth_pose(layout, &mut rng);
    let initial_pose = perturb_pose(&truth_pose, &layout.init_perturbation, d, &mut rng);

    let truth_render = rasterize(&mesh, &truth_pose, &k, w, h)?;
    let real_image = apply_gap(&truth_render, gap, &mut rng);
    let jitter = if layout.augmentation > 0.0 {
        rng.random_range(-layout.augmentation..layout.augmentation)
    } else {
        0.0
    };
    let augmented_image = real_image.map(|c| c.map(|v| (v + jitter).clamp(0.0, 1.0)));

    let mut neighbor_truth_poses = Vec::with_capacity(layout.m_real);
    let mut neighbor_initial_poses = Vec::with_capacity(layout.m_real);
    let mut neighbor_real_images = Vec::with_capacity(layout.m_real);
    let mut neighbor_depths = Vec::with_capacity(layout.m_real);
    for _ in 0..layout.m_real {
        let pose = sample_neighbor(
            &truth_pose,
            layout.neighbor_rotation_deg,
            layout.neighbor_translation * d,
            &mut rng,
        );
        let estimate = perturb_pose(&pose, &layout.init_perturbation, d, &mut rng);
        let render = rasterize(&mesh, &pose, &k, w, h)?;
        neighbor_real_images.push(apply_gap(&render, gap, &mut rng));
        neighbor_depths.push(render.depth);
        neighbor_truth_poses.push(pose);
        neighbor_initial_poses.push(estimate);
    }

    let spread = PoseSamplingConfig {
        seed: rng.random(),
        ..layout.render_spread
    };
    let mut render_poses = vec![initial_pose];
    render_poses.extend(sample_poses_around(
        &initial_pose,
        layout.n_views.saturating_sub(1),
        &spread,
        d,
    ));
    let renders = render_poses
        .iter()
        .map(|p| rasterize(&mesh, p, &k, w, h))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(SceneBundle {
        scene_id,
        seed,
        mesh,
        intrinsics: k,
        truth_pose,
        initial_pose,
        real_image,
        real_depth: truth_render.depth,
        augmented_image,
        neighbor_truth_poses,
        neighbor_initial_poses,
        neighbor_real_images,
        neighbor_depths,
        renders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_deg, translation_error};
    use crate::mesh::{make_procedural_mesh, MeshKind};

    fn mesh() -> Arc<TriangleMesh> {
        Arc::new(make_procedural_mesh(MeshKind::Icosphere { subdivisions: 2 }, 0.1, 3).unwrap())
    }

    #[test]
    fn no_gap_no_perturbation_reproduces_render() {
        let layout = SceneLayout {
            init_perturbation: PoseSamplingConfig {
                rotation_sigma_deg: 0.0,
                translation_sigma: 0.0,
                seed: 0,
            },
            augmentation: 0.0,
            ..Default::default()
        };
        let s = generate_scene(mesh(), &layout, &DomainGapConfig::none(), 0, 9).unwrap();
        assert_eq!(s.initial_pose, s.truth_pose);
        assert_eq!(s.real_image, s.renders[0].color);
        assert_eq!(s.augmented_image, s.real_image);
    }

    #[test]
    fn same_seed_same_scene() {
        let layout = SceneLayout::default();
        let gap = DomainGapConfig::default();
        let a = generate_scene(mesh(), &layout, &gap, 1, 42).unwrap();
        let b = generate_scene(mesh(), &layout, &gap, 1, 42).unwrap();
        assert_eq!(a.real_image, b.real_image);
        for (ra, rb) in a.renders.iter().zip(&b.renders) {
            assert_eq!(ra.color, rb.color);
            assert_eq!(ra.depth, rb.depth);
            assert_eq!(ra.pose, rb.pose);
        }
        assert_eq!(a.neighbor_real_images, b.neighbor_real_images);
        assert_eq!(a.initial_pose, b.initial_pose);
        let c = generate_scene(mesh(), &layout, &gap, 1, 43).unwrap();
        assert_ne!(a.truth_pose, c.truth_pose);
    }

    #[test]
    fn neighbors_stay_in_their_neighborhood() {
        let layout = SceneLayout::default();
        let m = mesh();
        for seed in 0..10 {
            let s =
                generate_scene(m.clone(), &layout, &DomainGapConfig::default(), 0, seed).unwrap();
            assert_eq!(s.neighbor_real_images.len(), layout.m_real);
            assert_eq!(s.renders.len(), layout.n_views);
            assert_eq!(s.renders[0].pose, s.initial_pose);
            for p in &s.neighbor_truth_poses {
                assert!(
                    rotation_error_deg(p, &s.truth_pose) <= layout.neighbor_rotation_deg + 1e-9
                );
                assert!(
                    translation_error(p, &s.truth_pose)
                        <= layout.neighbor_translation * m.diameter + 1e-12
                );
            }
        }
    }

    #[test]
    fn init_rotation_error_follows_maxwell_mean() {
        // Per-axis σ = 10° gives a mean angle of 2σ·sqrt(2/π) ≈ 15.96°.
        let layout = SceneLayout {
            init_perturbation: PoseSamplingConfig {
                rotation_sigma_deg: 10.0,
                translation_sigma: 0.0,
                seed: 0,
            },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1000;
        let mean = (0..n)
            .map(|_| {
                let t = sample_truth_pose(&layout, &mut rng);
                let p = perturb_pose(&t, &layout.init_perturbation, 0.1, &mut rng);
                rotation_error_deg(&p, &t)
            })
            .sum::<f64>()
            / n as f64;
        let expected = 2.0 * 10.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 0.6, "{mean} vs {expected}");
    }

    #[test]
    fn gap_validation() {
        let bad = DomainGapConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            "clutter_triangles".parse::<Background>(),
            Ok(Background::ClutterTriangles)
        );
        assert!("fog".parse::<Background>().is_err());
    }
}
