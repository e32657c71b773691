use super::{Background, DomainGapConfig, HarnessError, SceneLayout};
use crate::geometry::CameraIntrinsics;
use crate::learner::{FlowNorm, InitConfig, InitMethod, MatchConfig, SmoothnessOrder, TrainConfig};
use crate::pnp::PnPConfig;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Scene-generation settings beyond the per-scene layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSection {
    pub count: usize,
    /// Procedural mesh kinds, assigned to scenes round-robin.
    pub meshes: Vec<String>,
    /// OBJ file used for every scene instead of procedural meshes.
    pub mesh_file: Option<PathBuf>,
    pub mesh_size: f64,
    /// Max edge after texture subdivision, meters; 0 keeps meshes as built.
    pub texture_edge: f64,
    pub seed: u64,
    pub layout: SceneLayout,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            count: 20,
            meshes: vec!["colored_cube".into(), "icosphere".into(), "l_block".into()],
            mesh_file: None,
            mesh_size: 0.1,
            texture_edge: 0.02,
            seed: 0,
            layout: SceneLayout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Label of the run in summaries.
    pub variant: String,
    pub scene: SceneSection,
    pub train: TrainConfig,
    /// Starting weights, including their smoothness penalty.
    pub init: InitConfig,
    /// Pose snapshot period in iterations; 0 disables.
    pub snapshot_every: usize,
    pub pnp: PnPConfig,
    pub gap: DomainGapConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: "both".into(),
            scene: SceneSection::default(),
            train: TrainConfig {
                alpha_ema: 0.99,
                photo_weight: 0.1,
                ..TrainConfig::default()
            },
            init: InitConfig {
                noise_std: 1.0,
                smoothness: 1.4,
                ..InitConfig::default()
            },
            snapshot_every: 20,
            pnp: PnPConfig {
                inlier_threshold: 1.0,
                ..PnPConfig::default()
            },
            gap: DomainGapConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Routes one seed to every random source.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.seed = seed;
        self.pnp.seed = seed;
        self.init.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.scene.count == 0 {
            return bad("scene count must be positive");
        }
        if self.scene.mesh_file.is_none() && self.scene.meshes.is_empty() {
            return bad("no meshes configured");
        }
        if !(self.scene.mesh_size > 0.0) || !(self.scene.texture_edge >= 0.0) {
            return bad("mesh_size must be positive and texture_edge non-negative");
        }
        let l = &self.scene.layout;
        if l.width == 0 || l.height == 0 || !(l.distance > 0.0) {
            return bad("image size and distance must be positive");
        }
        if self.pnp.min_correspondences < 4 || !(self.pnp.inlier_threshold > 0.0) {
            return bad("pnp needs min_correspondences >= 4 and inlier_threshold > 0");
        }
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.gap.validate()
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| HarnessError::Parse {
        line,
        message: format!("cannot parse `{value}` for `{key}`"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::Parse {
            line,
            message: format!("expected a boolean for `{key}`, got `{value}`"),
        }),
    }
}

/// Parses `key = value` lines grouped under `[scene]`, `[train]`, `[pnp]` and
/// `[gap]`. Blank lines and `#` comments are ignored; unknown sections and keys
/// are errors. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    let mut match_cfg = MatchConfig::default();
    let mut use_matching = true;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
            let name = name.trim();
            if !["scene", "train", "pnp", "gap"].contains(&name) {
                return Err(HarnessError::Parse {
                    line,
                    message: format!("unknown section [{name}]"),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(HarnessError::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = section.as_deref() else {
            return Err(HarnessError::Parse {
                line,
                message: format!("`{key}` appears before any section"),
            });
        };
        let s = &mut cfg.scene;
        let l = &mut s.layout;
        let t = &mut cfg.train;
        let p = &mut cfg.pnp;
        let g = &mut cfg.gap;
        match (sec, key) {
            ("scene", "count") => s.count = parse_value(line, key, value)?,
            ("scene", "meshes") => {
                s.meshes = value
                    .split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect()
            }
            ("scene", "mesh_file") => s.mesh_file = Some(PathBuf::from(value)),
            ("scene", "mesh_size") => s.mesh_size = parse_value(line, key, value)?,
            ("scene", "texture_edge") => s.texture_edge = parse_value(line, key, value)?,
            ("scene", "seed") => s.seed = parse_value(line, key, value)?,
            ("scene", "width") => l.width = parse_value(line, key, value)?,
            ("scene", "height") => l.height = parse_value(line, key, value)?,
            ("scene", "focal") => {
                let f: f64 = parse_value(line, key, value)?;
                l.intrinsics.fx = f;
                l.intrinsics.fy = f;
            }
            ("scene", "distance") => l.distance = parse_value(line, key, value)?,
            ("scene", "lateral_jitter") => l.lateral_jitter = parse_value(line, key, value)?,
            ("scene", "depth_jitter") => l.depth_jitter = parse_value(line, key, value)?,
            ("scene", "init_rotation_sigma_deg") => {
                l.init_perturbation.rotation_sigma_deg = parse_value(line, key, value)?
            }
            ("scene", "init_translation_sigma") => {
                l.init_perturbation.translation_sigma = parse_value(line, key, value)?
            }
            ("scene", "render_rotation_sigma_deg") => {
                l.render_spread.rotation_sigma_deg = parse_value(line, key, value)?
            }
            ("scene", "render_translation_sigma") => {
                l.render_spread.translation_sigma = parse_value(line, key, value)?
            }
            ("scene", "neighbor_rotation_deg") => {
                l.neighbor_rotation_deg = parse_value(line, key, value)?
            }
            ("scene", "neighbor_translation") => {
                l.neighbor_translation = parse_value(line, key, value)?
            }
            ("train", "variant") => cfg.variant = value.to_string(),
            ("train", "iterations") => t.iterations = parse_value(line, key, value)?,
            ("train", "learning_rate") => t.learning_rate = parse_value(line, key, value)?,
            ("train", "alpha_ema") => t.alpha_ema = parse_value(line, key, value)?,
            ("train", "photo_weight") => t.photo_weight = parse_value(line, key, value)?,
            ("train", "use_flow_loss") => t.use_flow_loss = parse_bool(line, key, value)?,
            ("train", "flow_norm") => {
                t.flow_norm = match value {
                    "l1" | "L1" => FlowNorm::L1,
                    "l2" | "L2" => FlowNorm::L2,
                    _ => {
                        return Err(HarnessError::Parse {
                            line,
                            message: format!("flow_norm must be l1 or l2, got `{value}`"),
                        })
                    }
                }
            }
            ("train", "tau") => t.tau = parse_value(line, key, value)?,
            ("train", "n_views") => t.n_views = parse_value(line, key, value)?,
            ("train", "m_real") => t.m_real = parse_value(line, key, value)?,
            ("train", "augmentation") => t.augmentation = parse_value(line, key, value)?,
            ("train", "visibility_fraction") => {
                t.visibility_fraction = parse_value(line, key, value)?
            }
            ("train", "smoothness") => cfg.init.smoothness = parse_value(line, key, value)?,
            ("train", "smoothness_order") => {
                cfg.init.smoothness_order = match value {
                    "1" => SmoothnessOrder::First,
                    "2" => SmoothnessOrder::Second,
                    _ => {
                        return Err(HarnessError::Parse {
                            line,
                            message: format!("smoothness_order must be 1 or 2, got `{value}`"),
                        })
                    }
                }
            }
            ("train", "snapshot_every") => cfg.snapshot_every = parse_value(line, key, value)?,
            ("train", "init") => {
                use_matching = match value {
                    "matching" => true,
                    "prior" => false,
                    _ => {
                        return Err(HarnessError::Parse {
                            line,
                            message: format!("init must be matching or prior, got `{value}`"),
                        })
                    }
                }
            }
            ("train", "match_radius") => match_cfg.search_radius = parse_value(line, key, value)?,
            ("train", "init_noise") => cfg.init.noise_std = parse_value(line, key, value)?,
            ("train", "match_window") => match_cfg.window_radius = parse_value(line, key, value)?,
            ("pnp", "ransac_iterations") => p.ransac_iterations = parse_value(line, key, value)?,
            ("pnp", "inlier_threshold") => p.inlier_threshold = parse_value(line, key, value)?,
            ("pnp", "min_correspondences") => {
                p.min_correspondences = parse_value(line, key, value)?
            }
            ("pnp", "refine_iterations") => p.refine_iterations = parse_value(line, key, value)?,
            ("gap", "brightness_shift") => g.brightness_shift = parse_value(line, key, value)?,
            ("gap", "gamma") => g.gamma = parse_value(line, key, value)?,
            ("gap", "noise_std") => g.noise_std = parse_value(line, key, value)?,
            ("gap", "background") => {
                g.background = value
                    .parse::<Background>()
                    .map_err(|message| HarnessError::Parse { line, message })?
            }
            _ => {
                return Err(HarnessError::Parse {
                    line,
                    message: format!("unknown key `{key}` in [{sec}]"),
                })
            }
        }
    }
    cfg.init.method = if use_matching {
        InitMethod::BlockMatching(match_cfg)
    } else {
        InitMethod::GeometricPrior
    };
    let l = &mut cfg.scene.layout;
    l.intrinsics = CameraIntrinsics::new(
        l.intrinsics.fx,
        l.intrinsics.fy,
        (l.width as f64 - 1.0) / 2.0,
        (l.height as f64 - 1.0) / 2.0,
    )
    .map_err(|e| HarnessError::Config(e.to_string()))?;
    l.n_views = cfg.train.n_views;
    l.m_real = cfg.train.m_real;
    l.augmentation = cfg.train.augmentation;
    let seed = cfg.scene.seed;
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn sections_and_keys() {
        let cfg = parse_config(
            "# comment\n[scene]\ncount = 3\nmeshes = l_block, icosphere\nseed = 7\n\n[train]\niterations = 12 # inline\nuse_flow_loss = false\nflow_norm = l2\ninit = prior\n[pnp]\nmin_correspondences = 8\n[gap]\nbackground = black\ngamma = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.scene.count, 3);
        assert_eq!(cfg.scene.meshes, vec!["l_block", "icosphere"]);
        assert_eq!(cfg.train.iterations, 12);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.pnp.seed, 7);
        assert!(!cfg.train.use_flow_loss);
        assert_eq!(cfg.train.flow_norm, FlowNorm::L2);
        assert_eq!(cfg.init.method, InitMethod::GeometricPrior);
        assert_eq!(cfg.pnp.min_correspondences, 8);
        assert_eq!(cfg.gap.background, Background::Black);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = |t: &str| match parse_config(t) {
            Err(HarnessError::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("[scene]\ncount = 2\nbogus = 1\n"), 3);
        assert_eq!(err("[scene]\n\ncount = many\n"), 3);
        assert_eq!(err("[weird]\n"), 1);
        assert_eq!(err("count = 1\n"), 1);
        assert_eq!(err("[train]\nno equals sign\n"), 2);
        assert!(matches!(
            parse_config("[scene]\ncount = 0\n"),
            Err(HarnessError::Config(_))
        ));
    }
}
