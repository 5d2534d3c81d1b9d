//! Keyframe, world and trajectory input files.
//!
//! Keyframes and worlds are TOML:
//!
//! ```toml
//! version = 1
//! [[keys]]
//! frame = 16
//! x = 1.5
//! z = 0.2
//! ```
//!
//! ```toml
//! version = 1
//! c_safe = 0.1
//! [[obstacles]]
//! type = "circle"
//! center = [2.0, 0.0]
//! radius = 0.5
//! ```
//!
//! Trajectories are CSV with at least the columns `rot`, `x` and `z`, one row
//! per frame (the output of `generate` qualifies).

use std::path::Path;

use gmd_core::goals::{Keyframe, KeyframeSet, Obstacle, SdfMap};
use gmd_core::Tensor;
use serde::Deserialize;

use crate::error::{io_err, CliError, CliResult};

pub const VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyFile {
    version: u32,
    keys: Vec<Keyframe>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub map: SdfMap,
    pub c_safe: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    version: u32,
    #[serde(default = "default_c_safe")]
    c_safe: f64,
    obstacles: Vec<Obstacle>,
}

fn default_c_safe() -> f64 {
    0.1
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn check_version(path: &Path, v: u32) -> CliResult<()> {
    if v != VERSION {
        return Err(CliError::usage(format!("{}: unsupported version {v} (expected {VERSION})", path.display())));
    }
    Ok(())
}

pub fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_keyframes(path: &Path) -> CliResult<KeyframeSet> {
    let f: KeyFile = parse_toml(path, &read(path)?)?;
    check_version(path, f.version)?;
    KeyframeSet::new(f.keys).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_world(path: &Path) -> CliResult<World> {
    let f: WorldFile = parse_toml(path, &read(path)?)?;
    check_version(path, f.version)?;
    if !(f.c_safe > 0.0) {
        return Err(CliError::usage(format!("{}: c_safe must be positive", path.display())));
    }
    let map = SdfMap::new(f.obstacles).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(World { map, c_safe: f.c_safe })
}

/// Raw `[rot, x, z]` trajectory from CSV.
pub fn load_trajectory(path: &Path) -> CliResult<Tensor<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::usage(format!("{}: missing column {name}", path.display())))
    };
    let idx = [col("rot")?, col("x")?, col("z")?];
    let mut rows: [Vec<f64>; 3] = Default::default();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        for (r, &i) in rows.iter_mut().zip(&idx) {
            let v: f64 = rec
                .get(i)
                .and_then(|s| s.trim().parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::usage(format!("{}: bad number on data row {}", path.display(), line + 1)))?;
            r.push(v);
        }
    }
    let m = rows[0].len();
    if m == 0 {
        return Err(CliError::usage(format!("{}: trajectory has no frames", path.display())));
    }
    Ok(Tensor::new(vec![3, m], rows.concat())?)
}
