//! Relevance map files: a raw `f32` grid plus a JSON descriptor.
//!
//! Sidecar layout: `H` and `W` as little-endian `u32`, then `H * W`
//! little-endian `f32` pixel values in row-major order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{RelevanceMap, RelevanceSource, RulePreset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDescriptor {
    pub target_au: ActionUnit,
    pub preset: RulePreset,
    pub output_relevance: f32,
    pub relevance_source: RelevanceSource,
    pub source_image: Option<String>,
    pub height: usize,
    pub width: usize,
    /// Sum of all pixel relevance.
    pub total_relevance: f64,
}

pub fn write_relevance_sidecar(map: &RelevanceMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + 4 * map.pixel_values.len());
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.pixel_values.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a sidecar back as an `H x W` tensor.
pub fn read_relevance_sidecar(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Parse(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::Parse(format!(
            "{}: header says {h}x{w} but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn write_relevance_map(
    map: &RelevanceMap,
    preset: &RulePreset,
    source_image: Option<&str>,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<RelevanceDescriptor> {
    let dir = dir.as_ref();
    write_relevance_sidecar(map, dir.join(format!("{stem}.bin")))?;
    let descriptor = RelevanceDescriptor {
        target_au: map.target_au,
        preset: preset.clone(),
        output_relevance: map.output_relevance,
        relevance_source: map.source,
        source_image: source_image.map(str::to_string),
        height: map.height(),
        width: map.width(),
        total_relevance: map.pixel_values.sum(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&descriptor)?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(descriptor)
}
