//! Checkpoints: a JSON manifest plus `weights.bin` (every parameter as
//! little-endian `f32`, row-major, in layer order) and an optional
//! `optimizer.bin` holding the Adam moments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layers::{ArchSpec, Layer, Network};
use crate::report::write_atomic;
use crate::spectral::SpectralState;
use crate::tensor::Tensor;
use crate::training::Adam;

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format {found} is incompatible with supported major version {expected}")]
    Version { found: String, expected: u32 },

    #[error("{file} holds {got} bytes, manifest declares {expected}")]
    LengthMismatch {
        file: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{file} checksum does not match the manifest")]
    Checksum { file: &'static str },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("cannot access {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    pub kind: String,
    pub param_shapes: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_override: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralMeta {
    pub sigma: f32,
    pub u: Vec<f32>,
    pub iterations: u64,
    pub seed: u64,
    pub rayleigh_gap: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub arch: ArchSpec,
    pub seed: u64,
    /// Optimizer steps taken when the checkpoint was written.
    pub train_step: u64,
    pub param_count: usize,
    pub weights_sha256: String,
    pub layers: Vec<LayerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
    /// Configuration the run was started with, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub net: Network<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn pack<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> Vec<u8> {
    tensors
        .into_iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn unpack_into<'a>(bytes: &[u8], tensors: impl IntoIterator<Item = &'a mut Tensor<f32>>) {
    let mut words = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for t in tensors {
        for v in t.data_mut() {
            *v = words.next().expect("length checked against manifest");
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn layer_meta(layer: &Layer<f32>) -> LayerMeta {
    let (spectral, step_override) = match layer {
        Layer::Cpl(c) => (
            Some(SpectralMeta {
                sigma: c.spectral.sigma,
                u: c.spectral.u.data().to_vec(),
                iterations: c.spectral.iterations,
                seed: c.spectral.seed,
                rayleigh_gap: c.spectral.rayleigh_gap,
            }),
            c.step_override,
        ),
        _ => (None, None),
    };
    LayerMeta {
        kind: layer.kind().to_string(),
        param_shapes: layer.params().iter().map(|p| p.shape().to_vec()).collect(),
        spectral,
        step_override,
    }
}

/// Writes `dir/weights.bin`, `dir/optimizer.bin` (when given) and finally `dir/manifest.json`.
pub fn save_checkpoint(
    dir: &Path,
    net: &Network<f32>,
    optimizer: Option<&Adam<f32>>,
    seed: u64,
    config: serde_json::Value,
) -> Result<Manifest, CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let weights = pack(net.params());
    let weights_path = dir.join(WEIGHTS_FILE);
    write_atomic(&weights_path, &weights).map_err(io_err(&weights_path))?;
    let optimizer_meta = match optimizer {
        Some(opt) => {
            let blob = pack(opt.m.iter().chain(&opt.v));
            let p = dir.join(OPTIMIZER_FILE);
            write_atomic(&p, &blob).map_err(io_err(&p))?;
            Some(OptimizerMeta {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                step: opt.step,
                sha256: sha256_hex(&blob),
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format_version: format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        arch: ArchSpec::of(net),
        seed,
        train_step: optimizer.map_or(0, |o| o.step),
        param_count: net.param_count(),
        weights_sha256: sha256_hex(&weights),
        layers: net.layers().iter().map(layer_meta).collect(),
        optimizer: optimizer_meta,
        config,
    };
    let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    text.push(b'\n');
    let p = dir.join(MANIFEST_FILE);
    write_atomic(&p, &text).map_err(io_err(&p))?;
    Ok(manifest)
}

fn check_version(v: &str) -> Result<(), CheckpointError> {
    let major = v.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(CheckpointError::Version {
            found: v.to_string(),
            expected: FORMAT_MAJOR,
        });
    }
    Ok(())
}

fn read_blob(dir: &Path, file: &'static str, expected: usize, sha: &str) -> Result<Vec<u8>, CheckpointError> {
    let p = dir.join(file);
    let bytes = std::fs::read(&p).map_err(io_err(&p))?;
    if bytes.len() != expected {
        return Err(CheckpointError::LengthMismatch {
            file,
            expected,
            got: bytes.len(),
        });
    }
    if sha256_hex(&bytes) != sha {
        return Err(CheckpointError::Checksum { file });
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let mp = dir.join(MANIFEST_FILE);
    let text = std::fs::read(&mp).map_err(io_err(&mp))?;
    let value: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    check_version(version)?;
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut net: Network<f32> = manifest
        .arch
        .build(manifest.seed)
        .map_err(|e| CheckpointError::Manifest(format!("architecture: {e}")))?;
    if net.param_count() != manifest.param_count || net.layers().len() != manifest.layers.len() {
        return Err(CheckpointError::Manifest(format!(
            "architecture has {} parameters in {} layers, manifest declares {} in {}",
            net.param_count(),
            net.layers().len(),
            manifest.param_count,
            manifest.layers.len()
        )));
    }
    let weights = read_blob(dir, WEIGHTS_FILE, manifest.param_count * 4, &manifest.weights_sha256)?;
    unpack_into(&weights, net.params_mut());

    for (layer, meta) in net.layers_mut().iter_mut().zip(&manifest.layers) {
        if layer.kind() != meta.kind {
            return Err(CheckpointError::Manifest(format!(
                "layer kind {} where manifest declares {}",
                layer.kind(),
                meta.kind
            )));
        }
        if let (Layer::Cpl(c), Some(s)) = (layer, &meta.spectral) {
            let shape = c.shape().to_vec();
            let u =
                Tensor::new(shape, s.u.clone()).map_err(|e| CheckpointError::Manifest(format!("spectral u: {e}")))?;
            c.spectral = SpectralState {
                u,
                sigma: s.sigma,
                iterations: s.iterations,
                seed: s.seed,
                rayleigh_gap: s.rayleigh_gap,
            };
            c.step_override = meta.step_override;
        }
    }

    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let blob = read_blob(dir, OPTIMIZER_FILE, manifest.param_count * 8, &o.sha256)?;
            let mut opt = Adam::new(&net);
            opt.beta1 = o.beta1;
            opt.beta2 = o.beta2;
            opt.eps = o.eps;
            opt.step = o.step;
            unpack_into(&blob, opt.m.iter_mut().chain(opt.v.iter_mut()));
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        net,
        optimizer,
    })
}
