//! On-disk parameter formats: single-file checkpoints (one JSON header line
//! followed by a raw little-endian f64 payload) and the model bundle
//! directory (manifest + normalizer stats + parameters).

use crate::data_model::Modality;
use crate::encoders::MetadataEncoderSpec;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelSpec};
use crate::nn::{PTensor, Trainable};
use crate::preprocess::NormalizerStats;
use crate::training::{Classifier, PretrainModel};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub modality: Option<Modality>,
    pub embed_dim: usize,
    pub stats_fingerprint: String,
    /// Tensor names and shapes, in payload order.
    pub tensors: Vec<(String, Vec<usize>)>,
}

fn write_checkpoint(
    path: &Path,
    mut header: CheckpointHeader,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<()> {
    header.tensors =
        tensors.iter().map(|(n, v)| (n.clone(), v.shape().to_vec())).collect();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let json = serde_json::to_string(&header).map_err(|e| Error::Serde(e.to_string()))?;
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    for (_, value) in tensors {
        for &x in value.iter() {
            out.write_f64::<LittleEndian>(x)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, ArrayD<f64>)>)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let expected: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut cursor = &payload[..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let mut values = vec![0.0f64; n];
        cursor.read_f64_into::<LittleEndian>(&mut values)?;
        let arr = ArrayD::from_shape_vec(shape.clone(), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push((name.clone(), arr));
    }
    Ok((header, tensors))
}

fn collect_params(visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut PTensor))) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    visit(&mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

/// Overwrite a model's parameters from (name, value) pairs. Every model
/// parameter must be covered with a matching shape.
fn restore_params(
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut PTensor)),
    tensors: Vec<(String, ArrayD<f64>)>,
) -> Result<()> {
    let mut by_name: HashMap<String, ArrayD<f64>> = tensors.into_iter().collect();
    let mut problem: Option<String> = None;
    visit(&mut |name, p| {
        if problem.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some(value) if value.shape() == p.value.shape() => p.value = value,
            Some(value) => {
                problem = Some(format!(
                    "tensor `{name}`: shape {:?} on disk vs {:?} in model",
                    value.shape(),
                    p.value.shape()
                ))
            }
            None => problem = Some(format!("tensor `{name}` missing from checkpoint")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    Ok(())
}

/// Save a pretrained stream (encoder + temporary head) as one file.
pub fn save_stream(path: &Path, model: &mut PretrainModel) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: "stream".into(),
        modality: Some(model.encoder.modality()),
        embed_dim: model.encoder.output_dim(),
        stats_fingerprint: model.stats.fingerprint.clone(),
        tensors: Vec::new(),
    };
    let tensors = collect_params(&mut |f| model.visit_all(f));
    write_checkpoint(path, header, &tensors)
}

/// Reload a pretrained stream. The stats must carry the fingerprint the
/// checkpoint was trained under.
pub fn load_stream(
    path: &Path,
    meta_spec: MetadataEncoderSpec,
    stats: NormalizerStats,
) -> Result<PretrainModel> {
    let (header, tensors) = read_checkpoint(path)?;
    if header.kind != "stream" {
        return Err(Error::Checkpoint(format!("expected a stream checkpoint, got `{}`", header.kind)));
    }
    let modality = header
        .modality
        .ok_or_else(|| Error::Checkpoint("stream checkpoint lacks a modality".into()))?;
    if stats.fingerprint != header.stats_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: header.stats_fingerprint,
            actual: stats.fingerprint,
        });
    }
    let mut model = PretrainModel::new(modality, header.embed_dim, meta_spec, stats, 0);
    restore_params(&mut |f| model.visit_all(f), tensors)?;
    Ok(model)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.toml";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub spec: ModelSpec,
    pub meta_spec: MetadataEncoderSpec,
    pub stats_fingerprint: String,
    pub params_file: String,
    pub stats_file: String,
}

/// Save a full fusion model as a directory bundle.
pub fn save_bundle(dir: &Path, model: &mut FusionModel, meta_spec: &MetadataEncoderSpec) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = BundleManifest {
        version: CHECKPOINT_VERSION,
        spec: model.spec(),
        meta_spec: meta_spec.clone(),
        stats_fingerprint: model.stats.fingerprint.clone(),
        params_file: PARAMS_FILE.into(),
        stats_file: STATS_FILE.into(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    model.stats.save(&dir.join(STATS_FILE))?;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: "fusion".into(),
        modality: None,
        embed_dim: model.config.embed_dim,
        stats_fingerprint: model.stats.fingerprint.clone(),
        tensors: Vec::new(),
    };
    let tensors = collect_params(&mut |f| model.visit_params("", f));
    write_checkpoint(&dir.join(PARAMS_FILE), header, &tensors)
}

/// Reload a model bundle, reconstructing the architecture from the
/// manifest and the weights from the payload.
pub fn load_bundle(dir: &Path) -> Result<FusionModel> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: BundleManifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported bundle version {}", manifest.version)));
    }
    let stats = NormalizerStats::load(&dir.join(&manifest.stats_file))?;
    if stats.fingerprint != manifest.stats_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: manifest.stats_fingerprint,
            actual: stats.fingerprint,
        });
    }
    let mut model = FusionModel::assemble(
        manifest.spec.mask,
        manifest.spec.fusion.clone(),
        manifest.meta_spec,
        stats,
        0,
    )?;
    let (header, tensors) = read_checkpoint(&dir.join(&manifest.params_file))?;
    if header.kind != "fusion" {
        return Err(Error::Checkpoint(format!("expected a fusion checkpoint, got `{}`", header.kind)));
    }
    restore_params(&mut |f| model.visit_params("", f), tensors)?;
    Ok(model)
}
