//! Checkpoint directory format.
//!
//! A checkpoint is a directory of three files:
//! - `manifest.json` — config, step/token counters, RNG state, mask state,
//!   growth history, dtype, format version.
//! - `tensors.bin` — one record per parameter in canonical order.
//! - `optimizer.bin` — first/second moment records per parameter.
//!
//! Records are `name length (u64 LE), name bytes, dtype byte (4|8),
//! tensor blob` where the blob is the raw layout from `Tensor::to_bytes`
//! (rank and extents as u64 LE, then row-major little-endian IEEE-754
//! values). Every file is written to a temp path and renamed into place,
//! and the manifest lands last, so an interrupted save never yields a
//! directory that parses as a checkpoint. Save -> load -> save is
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flmgrow_core::checkpoint::Checkpoint;
use flmgrow_core::growth::{GrowthPlan, MaskState};
use flmgrow_core::model::{ModelConfig, ParamRef};
use flmgrow_core::optim::OptimizerState;
use flmgrow_core::real::Real;
use flmgrow_core::tensor::Tensor;

use crate::error::{AppError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Element type of a stored checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = AppError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(AppError::Validation(format!(
                "dtype must be f32 or f64, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngParts {
    seed: u64,
    state: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: Dtype,
    config: ModelConfig,
    step: u64,
    consumed_tokens: u64,
    optimizer_step: u64,
    rng: RngParts,
    mask_state: Option<MaskState>,
    growth_history: Vec<GrowthPlan>,
}

/// Checkpoint of either supported dtype.
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyCheckpoint::F32(_) => Dtype::F32,
            AnyCheckpoint::F64(_) => Dtype::F64,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            AnyCheckpoint::F32(c) => c.step,
            AnyCheckpoint::F64(c) => c.step,
        }
    }
}

/// Runs `$body` with `$c` bound to the typed checkpoint.
#[macro_export]
macro_rules! with_checkpoint {
    ($any:expr, |$c:ident| $body:expr) => {
        match $any {
            $crate::ckptio::AnyCheckpoint::F32($c) => $body,
            $crate::ckptio::AnyCheckpoint::F64($c) => $body,
        }
    };
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn push_record<R: Real>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<R>) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(R::BYTE_WIDTH as u8);
    out.extend_from_slice(&tensor.to_bytes());
}

fn read_record<R: Real>(bytes: &[u8], offset: &mut usize) -> Result<(String, Tensor<R>)> {
    let err = || AppError::Validation("truncated tensor store".into());
    if bytes.len() < *offset + 8 {
        return Err(err());
    }
    let name_len = u64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap()) as usize;
    *offset += 8;
    if bytes.len() < *offset + name_len + 1 {
        return Err(err());
    }
    let name = String::from_utf8(bytes[*offset..*offset + name_len].to_vec())
        .map_err(|e| AppError::Validation(format!("bad record name: {e}")))?;
    *offset += name_len;
    let width = bytes[*offset];
    *offset += 1;
    if width as usize != R::BYTE_WIDTH {
        return Err(AppError::Validation(format!(
            "record {name} stored with {width}-byte values, expected {}",
            R::BYTE_WIDTH
        )));
    }
    let (tensor, used) = Tensor::<R>::from_bytes(&bytes[*offset..])
        .map_err(|e| AppError::Validation(format!("record {name}: {e}")))?;
    *offset += used;
    Ok((name, tensor))
}

fn dtype_of<R: Real>() -> Dtype {
    match R::BYTE_WIDTH {
        4 => Dtype::F32,
        _ => Dtype::F64,
    }
}

/// Serializes a checkpoint into `dir` (created if needed).
pub fn save<R: Real>(ckpt: &Checkpoint<R>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let refs = ParamRef::enumerate(ckpt.config.layer_num);

    let mut tensors = Vec::new();
    tensors.extend_from_slice(&(refs.len() as u64).to_le_bytes());
    for r in &refs {
        push_record(&mut tensors, &r.path(), ckpt.params.get(*r));
    }
    write_atomic(&dir.join("tensors.bin"), &tensors)?;

    let mut moments = Vec::new();
    moments.extend_from_slice(&((refs.len() * 2) as u64).to_le_bytes());
    for (i, r) in refs.iter().enumerate() {
        push_record(&mut moments, &format!("m.{}", r.path()), &ckpt.opt.m[i]);
        push_record(&mut moments, &format!("v.{}", r.path()), &ckpt.opt.v[i]);
    }
    write_atomic(&dir.join("optimizer.bin"), &moments)?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: dtype_of::<R>(),
        config: ckpt.config.clone(),
        step: ckpt.step,
        consumed_tokens: ckpt.consumed_tokens,
        optimizer_step: ckpt.opt.step,
        rng: RngParts {
            seed: ckpt.rng.seed(),
            state: ckpt.rng.state(),
        },
        mask_state: ckpt.mask_state.clone(),
        growth_history: ckpt.growth_history.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(())
}

fn load_typed<R: Real>(dir: &Path, manifest: &Manifest) -> Result<Checkpoint<R>> {
    let refs = ParamRef::enumerate(manifest.config.layer_num);

    let bytes = fs::read(dir.join("tensors.bin"))?;
    if bytes.len() < 8 {
        return Err(AppError::Validation("tensor store too short".into()));
    }
    let count = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if count != refs.len() {
        return Err(AppError::Validation(format!(
            "tensor store holds {count} records, config wants {}",
            refs.len()
        )));
    }
    let mut offset = 8;
    let mut params = flmgrow_core::model::zero_params::<R>(&manifest.config);
    for r in &refs {
        let (name, tensor) = read_record::<R>(&bytes, &mut offset)?;
        if name != r.path() {
            return Err(AppError::Validation(format!(
                "tensor store out of order: found {name}, expected {}",
                r.path()
            )));
        }
        if tensor.shape() != r.shape(&manifest.config).as_slice() {
            return Err(AppError::Validation(format!(
                "tensor {name} has shape {:?}, config wants {:?}",
                tensor.shape(),
                r.shape(&manifest.config)
            )));
        }
        *params.get_mut(*r) = tensor;
    }

    let bytes = fs::read(dir.join("optimizer.bin"))?;
    if bytes.len() < 8 {
        return Err(AppError::Validation("optimizer store too short".into()));
    }
    let mut offset = 8;
    let mut opt = OptimizerState::<R>::zeros(&manifest.config);
    opt.step = manifest.optimizer_step;
    for (i, r) in refs.iter().enumerate() {
        let (name, m) = read_record::<R>(&bytes, &mut offset)?;
        if name != format!("m.{}", r.path()) {
            return Err(AppError::Validation(format!("optimizer store out of order at {name}")));
        }
        let (name, v) = read_record::<R>(&bytes, &mut offset)?;
        if name != format!("v.{}", r.path()) {
            return Err(AppError::Validation(format!("optimizer store out of order at {name}")));
        }
        opt.m[i] = m;
        opt.v[i] = v;
    }

    let ckpt = Checkpoint {
        config: manifest.config.clone(),
        params,
        opt,
        mask_state: manifest.mask_state.clone(),
        step: manifest.step,
        consumed_tokens: manifest.consumed_tokens,
        rng: flmgrow_core::Rng::from_parts(manifest.rng.seed, manifest.rng.state),
        growth_history: manifest.growth_history.clone(),
    };
    let stored = ckpt.params.scalar_count();
    let expected = manifest.config.count_params();
    if stored != expected {
        return Err(AppError::Validation(format!(
            "checkpoint stores {stored} scalars, config counts {expected}"
        )));
    }
    Ok(ckpt)
}

/// Loads a checkpoint directory, dispatching on the manifest dtype.
pub fn load(dir: &Path) -> Result<AnyCheckpoint> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(AppError::Validation(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    manifest.config.validate().map_err(AppError::from)?;
    match manifest.dtype {
        Dtype::F32 => Ok(AnyCheckpoint::F32(load_typed::<f32>(dir, &manifest)?)),
        Dtype::F64 => Ok(AnyCheckpoint::F64(load_typed::<f64>(dir, &manifest)?)),
    }
}

/// Byte-level equality of two checkpoint directories.
pub fn dirs_identical(a: &Path, b: &Path) -> Result<bool> {
    for file in ["manifest.json", "tensors.bin", "optimizer.bin"] {
        if fs::read(a.join(file))? != fs::read(b.join(file))? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Save location helper: `<out>/checkpoint`.
pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}
