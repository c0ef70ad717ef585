//! Scene definition files.
//!
//! A scene file is a list of `key = value` lines; `#` starts a comment.
//! Ranges are written as two numbers (`camera_radius = 11 16`) or one for a
//! fixed value. `classes = K` selects the first K class presets and
//! `class.N = <12 numbers>` overrides the super-shape of class N.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scene::{Range, SceneConfig, SceneError, SuperShapeParams, class_preset};

pub const DEFAULT_FRAMES_PER_SCENE: usize = 4;

const BUILTIN: [(&str, &str); 2] = [
    ("cube", include_str!("../scenes/cube.cfg")),
    ("complex", include_str!("../scenes/complex.cfg")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown scene `{0}` (built-in scenes: cube, complex)")]
    UnknownScene(String),
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Invalid(#[from] SceneError),
    #[error("reading {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub name: String,
    pub config: SceneConfig,
    /// Frames rendered from one sampled scene, each with a fresh camera.
    pub frames_per_scene: usize,
}

pub fn builtin_scene_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

/// Resolves a scene by name: an explicit path (containing `/` or ending in
/// `.cfg`), then `scenes/NAME.cfg` under the working directory, then the
/// built-in definitions.
pub fn load_scene(name: &str) -> Result<SceneFile, ConfigError> {
    if name.contains('/') || name.ends_with(".cfg") {
        return load_scene_file(Path::new(name));
    }
    let local = Path::new("scenes").join(format!("{name}.cfg"));
    if local.is_file() {
        return load_scene_file(&local);
    }
    match BUILTIN.iter().find(|(n, _)| *n == name) {
        Some((n, text)) => parse_scene(n, text),
        None => Err(ConfigError::UnknownScene(name.to_string())),
    }
}

pub fn load_scene_file(path: &Path) -> Result<SceneFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|err| {
        if err.kind() == std::io::ErrorKind::NotFound {
            ConfigError::UnknownScene(path.display().to_string())
        } else {
            ConfigError::Io {
                path: path.to_path_buf(),
                err,
            }
        }
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_scene(&name, &text)
}

pub fn parse_scene(name: &str, text: &str) -> Result<SceneFile, ConfigError> {
    let mut entries: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let err = |msg: String| ConfigError::Parse {
            source_name: name.to_string(),
            line: line_no,
            msg,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let key = key.trim().to_string();
        let nums = value
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if nums.is_empty() {
            return Err(err(format!("`{key}` has no value")));
        }
        if entries.insert(key.clone(), (line_no, nums)).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }

    let mut cfg = SceneConfig::default();
    let mut frames_per_scene = DEFAULT_FRAMES_PER_SCENE;
    let err_at = |line: usize, msg: String| ConfigError::Parse {
        source_name: name.to_string(),
        line,
        msg,
    };

    if let Some((line, v)) = entries.remove("classes") {
        let k = as_count(&v, line, "classes", &err_at)?;
        if k == 0 {
            return Err(err_at(line, "classes must be at least 1".into()));
        }
        cfg = SceneConfig {
            class_shapes: (0..k).map(class_preset).collect(),
            class_probs: vec![1.0 / k as f64; k],
            ..cfg
        };
    }

    for (key, (line, v)) in entries {
        let range = || -> Result<Range, ConfigError> {
            match v.as_slice() {
                [x] => Ok(Range::new(*x, *x)),
                [lo, hi] => Ok(Range::new(*lo, *hi)),
                _ => Err(err_at(line, format!("`{key}` expects one or two numbers"))),
            }
        };
        let scalar = || -> Result<f64, ConfigError> {
            match v.as_slice() {
                [x] => Ok(*x),
                _ => Err(err_at(line, format!("`{key}` expects one number"))),
            }
        };
        match key.as_str() {
            "class_probs" => {
                if v.len() != cfg.num_classes() {
                    return Err(err_at(
                        line,
                        format!("class_probs has {} values for {} classes", v.len(), cfg.num_classes()),
                    ));
                }
                cfg.class_probs = v.clone();
            }
            "objects_per_scene" => cfg.objects_per_scene = as_count(&v, line, &key, &err_at)?,
            "occluder_prob" => cfg.occluder_prob = scalar()?,
            "occluder_m" => cfg.occluder_m = range()?,
            "occluder_ab" => cfg.occluder_ab = range()?,
            "occluder_n" => cfg.occluder_n = range()?,
            "occluder_scale" => cfg.occluder_scale = range()?,
            "object_scale" => cfg.object_scale = scalar()?,
            "placement_radius" => cfg.placement_radius = scalar()?,
            "drop_height" => cfg.drop_height = range()?,
            "hue" => cfg.hue = range()?,
            "saturation" => cfg.saturation = range()?,
            "value" => cfg.value = range()?,
            "camera_radius" => cfg.camera_radius = range()?,
            "width" => {
                let w = as_count(&v, line, &key, &err_at)? as u32;
                cfg.intrinsics.width = w;
                cfg.intrinsics.cx = w as f64 / 2.0;
            }
            "height" => {
                let h = as_count(&v, line, &key, &err_at)? as u32;
                cfg.intrinsics.height = h;
                cfg.intrinsics.cy = h as f64 / 2.0;
            }
            "focal" => cfg.intrinsics.focal = scalar()?,
            "mesh_res" => {
                let r = as_count(&v, line, &key, &err_at)?;
                if r < 4 {
                    return Err(err_at(line, "mesh_res must be at least 4".into()));
                }
                cfg.mesh_res = r;
            }
            "frames_per_scene" => {
                frames_per_scene = as_count(&v, line, &key, &err_at)?;
                if frames_per_scene == 0 {
                    return Err(err_at(line, "frames_per_scene must be at least 1".into()));
                }
            }
            k if k.starts_with("class.") => {
                let idx: usize = k["class.".len()..]
                    .parse()
                    .map_err(|_| err_at(line, format!("bad class index in `{k}`")))?;
                if idx >= cfg.num_classes() {
                    return Err(err_at(line, format!("class {idx} out of range")));
                }
                let arr: [f64; 12] = v
                    .as_slice()
                    .try_into()
                    .map_err(|_| err_at(line, format!("`{k}` expects 12 numbers")))?;
                cfg.class_shapes[idx] = SuperShapeParams::from_array(arr);
            }
            other => return Err(err_at(line, format!("unknown key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(SceneFile {
        name: name.to_string(),
        config: cfg,
        frames_per_scene,
    })
}

fn as_count(
    v: &[f64],
    line: usize,
    key: &str,
    err_at: &dyn Fn(usize, String) -> ConfigError,
) -> Result<usize, ConfigError> {
    match v {
        [x] if x.fract() == 0.0 && *x >= 0.0 && *x <= u32::MAX as f64 => Ok(*x as usize),
        _ => Err(err_at(line, format!("`{key}` expects a non-negative integer"))),
    }
}
