//! DPF prompt files: precomputed foundation-model prompts for one sample.
//!
//! Layout: 4-byte magic `DPF1`, little-endian u32 header length, a JSON
//! header, then the payload as little-endian f32: the four stage feature
//! maps in order, then the relative depth map. The header carries a CRC32
//! of the payload; a mismatch rejects the whole file and nothing is loaded.

use std::fs;
use std::path::Path;

use ducos_core::prompt::{PromptFlow, PromptSource, NUM_STAGES};
use ducos_core::{NdArray, Real};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const DPF_MAGIC: &[u8; 4] = b"DPF1";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DpfHeader {
    /// Patch size p.
    pub p: usize,
    /// Prompt channels per stage.
    pub c_p: usize,
    /// Target resolution the prompts were computed for.
    pub h: usize,
    pub w: usize,
    pub dtype: String,
    /// Shapes of the four stage maps, each [c_p, ceil(h/p), ceil(w/p)].
    pub stage_shapes: Vec<Vec<usize>>,
    /// CRC32 of the raw payload bytes.
    pub checksum: u32,
}

fn f32_bytes(values: impl Iterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a prompt flow to DPF bytes.
pub fn encode<R: Real>(flow: &PromptFlow<R>) -> Result<Vec<u8>> {
    let rd = &flow.relative_depth;
    if rd.shape.len() != 3 || rd.shape[0] != 1 {
        return Err(AppError::Data(format!(
            "relative depth must be [1,H,W], got {:?}",
            rd.shape
        )));
    }
    let (h, w) = (rd.shape[1], rd.shape[2]);
    flow.validate(h, w)
        .map_err(|e| AppError::Data(e.to_string()))?;

    let mut payload = Vec::new();
    for f in &flow.features {
        f32_bytes(f.data.iter().map(|v| v.to_f64() as f32), &mut payload);
    }
    f32_bytes(rd.data.iter().map(|v| v.to_f64() as f32), &mut payload);

    let header = DpfHeader {
        p: flow.patch_size,
        c_p: flow.channels(),
        h,
        w,
        dtype: "f32".to_string(),
        stage_shapes: flow.features.iter().map(|f| f.shape.clone()).collect(),
        checksum: crc32fast::hash(&payload),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| AppError::Data(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + hjson.len() + payload.len());
    out.extend_from_slice(DPF_MAGIC);
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse DPF bytes. Every structural check (magic, header, shapes, payload
/// length, checksum) happens before any array is built.
pub fn decode<R: Real>(bytes: &[u8]) -> Result<PromptFlow<R>> {
    if bytes.len() < 8 || &bytes[..4] != DPF_MAGIC {
        return Err(AppError::Data("not a DPF file (bad magic)".to_string()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(AppError::Data("truncated DPF header".to_string()));
    }
    let header: DpfHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| AppError::Data(format!("bad DPF header: {e}")))?;
    if header.dtype != "f32" {
        return Err(AppError::Data(format!(
            "unsupported DPF dtype {}",
            header.dtype
        )));
    }
    if header.p == 0 || header.h == 0 || header.w == 0 {
        return Err(AppError::Data("DPF dimensions must be positive".to_string()));
    }
    if header.stage_shapes.len() != NUM_STAGES {
        return Err(AppError::Data(format!(
            "DPF must carry {NUM_STAGES} stages, got {}",
            header.stage_shapes.len()
        )));
    }
    let fh = header.h.div_ceil(header.p);
    let fw = header.w.div_ceil(header.p);
    for (i, s) in header.stage_shapes.iter().enumerate() {
        if s.as_slice() != [header.c_p, fh, fw] {
            return Err(AppError::Data(format!(
                "DPF stage {i} shape {s:?} vs expected [{},{fh},{fw}]",
                header.c_p
            )));
        }
    }
    let stage_elems = header.c_p * fh * fw;
    let total = NUM_STAGES * stage_elems + header.h * header.w;
    let payload = &bytes[8 + hlen..];
    if payload.len() != 4 * total {
        return Err(AppError::Data(format!(
            "DPF payload is {} bytes, expected {}",
            payload.len(),
            4 * total
        )));
    }
    if crc32fast::hash(payload) != header.checksum {
        return Err(AppError::Data("DPF checksum mismatch".to_string()));
    }

    let read_f32s = |range: std::ops::Range<usize>| -> Vec<R> {
        payload[4 * range.start..4 * range.end]
            .chunks_exact(4)
            .map(|c| R::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    };
    let mut features = Vec::with_capacity(NUM_STAGES);
    for i in 0..NUM_STAGES {
        features.push(NdArray::new(
            vec![header.c_p, fh, fw],
            read_f32s(i * stage_elems..(i + 1) * stage_elems),
        ));
    }
    let rd_start = NUM_STAGES * stage_elems;
    let relative_depth = NdArray::new(
        vec![1, header.h, header.w],
        read_f32s(rd_start..total),
    );
    let flow = PromptFlow {
        features,
        relative_depth,
        patch_size: header.p,
        source: PromptSource::File,
    };
    flow.validate(header.h, header.w)
        .map_err(|e| AppError::Data(e.to_string()))?;
    Ok(flow)
}

pub fn write_file<R: Real>(path: &Path, flow: &PromptFlow<R>) -> Result<()> {
    fs::write(path, encode(flow)?)?;
    Ok(())
}

pub fn read_file<R: Real>(path: &Path) -> Result<PromptFlow<R>> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
