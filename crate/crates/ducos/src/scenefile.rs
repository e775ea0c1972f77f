//! On-disk scene datasets: one binary file per scene plus a manifest with
//! CRC32 checksums over every file.
//!
//! Scene file layout: 4-byte magic `DSC1`, little-endian u32 header length,
//! a JSON header, then the payload: ground-truth depth (f32 LE), RGB
//! (f32 LE), and the discontinuity mask (one byte per pixel).

use std::fs;
use std::path::Path;

use ducos_core::scene::Scene;
use ducos_core::{NdArray, Real};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"DSC1";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneHeader {
    seed: u64,
    h: usize,
    w: usize,
    checksum: u32,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub crc32: u32,
}

pub fn encode_scene<R: Real>(scene: &Scene<R>) -> Result<Vec<u8>> {
    let (h, w) = (scene.height(), scene.width());
    let mut payload = Vec::with_capacity(4 * 4 * h * w + h * w);
    for &v in &scene.gt_depth.data {
        payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    for &v in &scene.rgb.data {
        payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    payload.extend(scene.discontinuity_mask.iter().map(|&m| m as u8));

    let header = SceneHeader {
        seed: scene.seed,
        h,
        w,
        checksum: crc32fast::hash(&payload),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| AppError::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + hjson.len() + payload.len());
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_scene<R: Real>(bytes: &[u8]) -> Result<Scene<R>> {
    if bytes.len() < 8 || &bytes[..4] != SCENE_MAGIC {
        return Err(AppError::Data("not a scene file (bad magic)".to_string()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(AppError::Data("truncated scene header".to_string()));
    }
    let header: SceneHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| AppError::Data(format!("bad scene header: {e}")))?;
    let hw = header.h * header.w;
    let payload = &bytes[8 + hlen..];
    if payload.len() != 4 * hw + 12 * hw + hw {
        return Err(AppError::Data(format!(
            "scene payload is {} bytes, expected {}",
            payload.len(),
            17 * hw
        )));
    }
    if crc32fast::hash(payload) != header.checksum {
        return Err(AppError::Data("scene checksum mismatch".to_string()));
    }
    let floats = |off: usize, n: usize| -> Vec<R> {
        payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| R::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    };
    Ok(Scene {
        gt_depth: NdArray::new(vec![1, header.h, header.w], floats(0, hw)),
        rgb: NdArray::new(vec![3, header.h, header.w], floats(4 * hw, 3 * hw)),
        discontinuity_mask: payload[16 * hw..].iter().map(|&b| b != 0).collect(),
        seed: header.seed,
    })
}

/// Write every scene as `scene_NNNN.dsc` and a manifest with per-file CRCs.
pub fn write_dataset<R: Real>(dir: &Path, scenes: &[Scene<R>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.dsc");
        let bytes = encode_scene(scene)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            crc32: crc32fast::hash(&bytes),
        });
        fs::write(dir.join(&name), bytes)?;
    }
    let manifest = Manifest { files: entries };
    fs::write(
        dir.join(MANIFEST_NAME),
        serde_json::to_string_pretty(&manifest).map_err(|e| AppError::Data(e.to_string()))?,
    )?;
    Ok(())
}

/// Load a dataset directory, verifying every file against the manifest
/// before decoding it.
pub fn read_dataset<R: Real>(dir: &Path) -> Result<Vec<Scene<R>>> {
    let mpath = dir.join(MANIFEST_NAME);
    let mtext = fs::read_to_string(&mpath)
        .map_err(|e| AppError::Data(format!("{}: {e}", mpath.display())))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| AppError::Data(format!("{}: {e}", mpath.display())))?;
    let mut scenes = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let path = dir.join(&entry.name);
        let bytes = fs::read(&path)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        if crc32fast::hash(&bytes) != entry.crc32 {
            return Err(AppError::Data(format!(
                "{}: manifest checksum mismatch",
                entry.name
            )));
        }
        scenes.push(decode_scene(&bytes)?);
    }
    Ok(scenes)
}
