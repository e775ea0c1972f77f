//! Depth map files: 16-bit binary PGM with a unit-scale comment, raw
//! little-endian f32 arrays with a JSON sidecar, and 8-bit error-map PGMs
//! for quick visual inspection.

use std::fs;
use std::path::{Path, PathBuf};

use ducos_core::{NdArray, Real};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// 16-bit PGM: `P5`, a `# scale_to_meters=<v>` comment, dims, maxval 65535,
/// then big-endian u16 samples. `meters = sample * scale_to_meters`.
pub fn write_pgm16<R: Real>(path: &Path, depth: &NdArray<R>, scale_to_meters: f64) -> Result<()> {
    if depth.shape.len() != 3 || depth.shape[0] != 1 {
        return Err(AppError::Data(format!(
            "PGM depth must be [1,H,W], got {:?}",
            depth.shape
        )));
    }
    if !(scale_to_meters > 0.0 && scale_to_meters.is_finite()) {
        return Err(AppError::Data("scale_to_meters must be positive".to_string()));
    }
    let (h, w) = (depth.shape[1], depth.shape[2]);
    let mut out = Vec::with_capacity(64 + 2 * h * w);
    out.extend_from_slice(
        format!("P5\n# scale_to_meters={scale_to_meters}\n{w} {h}\n65535\n").as_bytes(),
    );
    for &v in &depth.data {
        let q = (v.to_f64() / scale_to_meters).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a 16-bit PGM written by [`write_pgm16`] (or any P5 with maxval
/// 65535). Returns the depth in meters and the scale found in the comment
/// (1.0 when absent).
pub fn read_pgm16<R: Real>(path: &Path) -> Result<(NdArray<R>, f64)> {
    let bytes = fs::read(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let mut pos = 0usize;
    let mut scale = 1.0f64;

    let mut next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let start = *pos;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let comment = String::from_utf8_lossy(&bytes[start..*pos]);
                if let Some(v) = comment.trim_start_matches('#').trim().strip_prefix("scale_to_meters=") {
                    scale = v
                        .trim()
                        .parse()
                        .map_err(|_| AppError::Data(format!("bad scale comment: {comment}")))?;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(AppError::Data("truncated PGM header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if next_token(&mut pos)? != "P5" {
        return Err(AppError::Data("not a binary PGM (want P5)".to_string()));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| AppError::Data(format!("bad PGM header token: {s}")))
    };
    let w = parse(next_token(&mut pos)?)?;
    let h = parse(next_token(&mut pos)?)?;
    let maxval = parse(next_token(&mut pos)?)?;
    if maxval != 65535 {
        return Err(AppError::Data(format!(
            "expected 16-bit PGM (maxval 65535), got {maxval}"
        )));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 2 * h * w;
    if bytes.len() < pos + need {
        return Err(AppError::Data("truncated PGM payload".to_string()));
    }
    let data: Vec<R> = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| R::from_f64(u16::from_be_bytes([c[0], c[1]]) as f64 * scale))
        .collect();
    Ok((NdArray::new(vec![1, h, w], data), scale))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Raw array: little-endian f32 values plus a `<file>.json` sidecar holding
/// the shape and dtype.
pub fn write_raw_f32<R: Real>(path: &Path, arr: &NdArray<R>) -> Result<()> {
    let mut out = Vec::with_capacity(4 * arr.numel());
    for &v in &arr.data {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    let sidecar = RawSidecar {
        shape: arr.shape.clone(),
        dtype: "f32".to_string(),
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar).map_err(|e| AppError::Data(e.to_string()))?,
    )?;
    Ok(())
}

pub fn read_raw_f32<R: Real>(path: &Path) -> Result<NdArray<R>> {
    let sc_path = sidecar_path(path);
    let sc_text = fs::read_to_string(&sc_path)
        .map_err(|e| AppError::Data(format!("{}: {e}", sc_path.display())))?;
    let sidecar: RawSidecar = serde_json::from_str(&sc_text)
        .map_err(|e| AppError::Data(format!("{}: {e}", sc_path.display())))?;
    if sidecar.dtype != "f32" {
        return Err(AppError::Data(format!(
            "unsupported raw dtype {}",
            sidecar.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(AppError::Data(format!(
            "{}: {} bytes but sidecar shape {:?} needs {}",
            path.display(),
            bytes.len(),
            sidecar.shape,
            4 * n
        )));
    }
    let data: Vec<R> = bytes
        .chunks_exact(4)
        .map(|c| R::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(NdArray::new(sidecar.shape, data))
}

/// 8-bit PGM of |prediction - ground truth|, normalized to the largest
/// error in the image.
pub fn write_error_pgm<R: Real>(path: &Path, y: &NdArray<R>, z: &NdArray<R>) -> Result<()> {
    if y.shape != z.shape || y.shape.len() != 3 || y.shape[0] != 1 {
        return Err(AppError::Data(format!(
            "error map operands must share a [1,H,W] shape: {:?} vs {:?}",
            y.shape, z.shape
        )));
    }
    let (h, w) = (y.shape[1], y.shape[2]);
    let errs: Vec<f64> = y
        .data
        .iter()
        .zip(z.data.iter())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
        .collect();
    let emax = errs.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(errs.iter().map(|&e| (e / emax * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}
