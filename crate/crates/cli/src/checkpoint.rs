//! `GMDC` checkpoint container.
//!
//! Layout: magic `GMDC`, `u32` version, `u64` header length, a JSON header,
//! then every tensor named in the header as little-endian `f32` in header
//! order. Tensor names are prefixed `params/`, `ema/`, `adam_m/` and `adam_v/`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use gmd_core::data::NormStats;
use gmd_core::engine::{TrainConfig, TrainState};
use gmd_core::projection::{EmphasisProjector, ProjectorDescriptor};
use gmd_core::{Denoiser, DenoiserConfig, DenoiserParams, NoiseSchedule, ScheduleDescriptor, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_parent, io_err, CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"GMDC";
pub const VERSION: u32 = 1;
const NAMESPACES: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Trajectory,
    Motion,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Trajectory => "trajectory",
            ModelKind::Motion => "motion",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub schedule: ScheduleDescriptor,
    /// Motion checkpoints only.
    pub projector: Option<ProjectorDescriptor>,
    pub stats: NormStats,
    pub train: TrainConfig,
    pub state: TrainState<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    denoiser: DenoiserConfig,
    schedule: ScheduleDescriptor,
    projector: Option<ProjectorDescriptor>,
    stats: NormStats,
    train: TrainConfig,
    step: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    fn groups(&self) -> [&DenoiserParams<f32>; 4] {
        [&self.state.net.params, &self.state.ema, &self.state.adam_m, &self.state.adam_v]
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut tensors = Vec::new();
        for (ns, group) in NAMESPACES.iter().zip(self.groups()) {
            for (name, t) in &group.tensors {
                tensors.push(TensorEntry { name: format!("{ns}/{name}"), shape: t.shape().to_vec() });
            }
        }
        let header = Header {
            kind: self.kind,
            denoiser: self.state.net.cfg.clone(),
            schedule: self.schedule.clone(),
            projector: self.projector.clone(),
            stats: self.stats.clone(),
            train: self.train.clone(),
            step: self.state.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| CliError::usage(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in self.groups() {
            for t in group.tensors.values() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let bad = |m: &str| CliError::usage(format!("not a valid checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing GMDC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CliError::usage(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CliError::usage(format!("checkpoint header: {e}")))?;
        let mut data = &body[hlen..];
        let declared: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if declared != data.len() {
            return Err(bad(&format!("header declares {declared} tensor bytes, file holds {}", data.len())));
        }
        let mut groups: BTreeMap<&str, DenoiserParams<f32>> =
            NAMESPACES.iter().map(|&ns| (ns, DenoiserParams { tensors: BTreeMap::new() })).collect();
        for e in &header.tensors {
            let (ns, name) = e.name.split_once('/').ok_or_else(|| bad(&format!("tensor name {}", e.name)))?;
            let group = groups.get_mut(ns).ok_or_else(|| bad(&format!("unknown namespace {ns}")))?;
            let n: usize = e.shape.iter().product();
            let (chunk, rest) = data.split_at(n * 4);
            data = rest;
            let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            group.tensors.insert(name.to_string(), Tensor::new(e.shape.clone(), values)?);
        }
        let mut take = |ns: &str| groups.remove(ns).expect("namespace present");
        let params = take("params");
        let (ema, adam_m, adam_v) = (take("ema"), take("adam_m"), take("adam_v"));
        for p in [&params, &ema, &adam_m, &adam_v] {
            p.check_shapes(&header.denoiser)?;
        }
        if (header.kind == ModelKind::Motion) != header.projector.is_some() {
            return Err(bad("projector must be present exactly for motion checkpoints"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            schedule: header.schedule,
            projector: header.projector,
            stats: header.stats,
            train: header.train,
            state: TrainState {
                net: Denoiser::from_params(header.denoiser, params)?,
                ema,
                adam_m,
                adam_v,
                step: header.step,
            },
        })
    }

    /// Writes through a temporary file so an interrupted save leaves the old
    /// checkpoint intact.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes()?;
        ensure_parent(path)?;
        let tmp = path.with_extension("gmdc.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn load_kind(path: &Path, kind: ModelKind) -> CliResult<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(CliError::usage(format!("{} holds a {} model, expected {kind}", path.display(), c.kind)));
        }
        Ok(c)
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(NoiseSchedule::from_descriptor(&self.schedule)?)
    }

    pub fn projector(&self) -> CliResult<Option<EmphasisProjector>> {
        Ok(match &self.projector {
            Some(d) => Some(EmphasisProjector::from_descriptor(d)?),
            None => None,
        })
    }
}
