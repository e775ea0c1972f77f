//! Checkpoint files: model configuration, named parameter tensors, and the
//! dual-ascent state, restored bit for bit.
//!
//! Layout mirrors the prompt format: 4-byte magic `DCK1`, little-endian u32
//! header length, a JSON header (config, parameter names and shapes, dual
//! state, payload CRC32), then all parameter values concatenated as
//! little-endian f64.

use std::fs;
use std::path::Path;

use ducos_core::network::DuCosModel;
use ducos_core::trainer::{DualState, ScheduleMode};
use ducos_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::runconfig::{ModelSpec, ScheduleSpec};

pub const CKPT_MAGIC: &[u8; 4] = b"DCK1";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DualSpec {
    pub lambda: f64,
    pub mu: f64,
    pub eta_lambda: f64,
    pub eta_mu: f64,
    pub eta_lambda0: f64,
    pub eta_mu0: f64,
    pub t: usize,
    pub horizon: usize,
    pub schedule: ScheduleSpec,
}

impl DualSpec {
    pub fn from_state(d: &DualState) -> Self {
        DualSpec {
            lambda: d.lambda,
            mu: d.mu,
            eta_lambda: d.eta_lambda,
            eta_mu: d.eta_mu,
            eta_lambda0: d.eta_lambda0,
            eta_mu0: d.eta_mu0,
            t: d.t,
            horizon: d.horizon,
            schedule: match d.schedule {
                ScheduleMode::RecomputeFromInitial => ScheduleSpec::RecomputeFromInitial,
                ScheduleMode::LiteralCompounding => ScheduleSpec::LiteralCompounding,
            },
        }
    }

    pub fn to_state(self) -> DualState {
        DualState {
            lambda: self.lambda,
            mu: self.mu,
            eta_lambda: self.eta_lambda,
            eta_mu: self.eta_mu,
            eta_lambda0: self.eta_lambda0,
            eta_mu0: self.eta_mu0,
            t: self.t,
            horizon: self.horizon,
            schedule: match self.schedule {
                ScheduleSpec::RecomputeFromInitial => ScheduleMode::RecomputeFromInitial,
                ScheduleSpec::LiteralCompounding => ScheduleMode::LiteralCompounding,
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    dtype: String,
    model: ModelSpec,
    params: Vec<ParamDesc>,
    dual: Option<DualSpec>,
    checksum: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

pub fn encode<R: Real>(model: &DuCosModel<R>, dual: Option<&DualState>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for p in &model.params.params {
        for &v in &p.array.data {
            payload.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    let header = CkptHeader {
        dtype: "f64".to_string(),
        model: ModelSpec::from_core(&model.config),
        params: model
            .params
            .params
            .iter()
            .map(|p| ParamDesc {
                name: p.name.clone(),
                shape: p.array.shape.clone(),
            })
            .collect(),
        dual: dual.map(DualSpec::from_state),
        checksum: crc32fast::hash(&payload),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| AppError::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + hjson.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Rebuild the model (and dual state, if saved). The parameter layout
/// derived from the stored config must agree name-for-name and
/// shape-for-shape with the stored descriptors.
pub fn decode<R: Real>(bytes: &[u8]) -> Result<(DuCosModel<R>, Option<DualState>)> {
    if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
        return Err(AppError::Data(
            "not a checkpoint file (bad magic)".to_string(),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(AppError::Data("truncated checkpoint header".to_string()));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| AppError::Data(format!("bad checkpoint header: {e}")))?;
    if header.dtype != "f64" {
        return Err(AppError::Data(format!(
            "unsupported checkpoint dtype {}",
            header.dtype
        )));
    }
    let mut model: DuCosModel<R> =
        DuCosModel::new(header.model.to_core()).map_err(|e| AppError::Data(e.to_string()))?;
    if model.params.len() != header.params.len() {
        return Err(AppError::Data(format!(
            "checkpoint has {} parameters, config implies {}",
            header.params.len(),
            model.params.len()
        )));
    }
    let mut total = 0usize;
    for (p, d) in model.params.params.iter().zip(header.params.iter()) {
        if p.name != d.name || p.array.shape != d.shape {
            return Err(AppError::Data(format!(
                "checkpoint parameter mismatch: {} {:?} vs {} {:?}",
                d.name, d.shape, p.name, p.array.shape
            )));
        }
        total += p.array.numel();
    }
    let payload = &bytes[8 + hlen..];
    if payload.len() != 8 * total {
        return Err(AppError::Data(format!(
            "checkpoint payload is {} bytes, expected {}",
            payload.len(),
            8 * total
        )));
    }
    if crc32fast::hash(payload) != header.checksum {
        return Err(AppError::Data("checkpoint checksum mismatch".to_string()));
    }
    let mut off = 0usize;
    for p in model.params.params.iter_mut() {
        for v in p.array.data.iter_mut() {
            *v = R::from_f64(f64::from_le_bytes(
                payload[off..off + 8].try_into().unwrap(),
            ));
            off += 8;
        }
    }
    Ok((model, header.dual.map(DualSpec::to_state)))
}

pub fn save<R: Real>(path: &Path, model: &DuCosModel<R>, dual: Option<&DualState>) -> Result<()> {
    fs::write(path, encode(model, dual)?)?;
    Ok(())
}

pub fn load<R: Real>(path: &Path) -> Result<(DuCosModel<R>, Option<DualState>)> {
    let bytes =
        fs::read(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ducos_core::network::ModelConfig;

    fn small_model() -> DuCosModel<f64> {
        let mut m = DuCosModel::new(ModelConfig {
            channels: 4,
            res_blocks: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        m.init_params(3);
        m
    }

    fn some_dual() -> DualState {
        let mut d = DualState::new(0.01, 0.05, 0.01, 0.01, 20, ScheduleMode::RecomputeFromInitial)
            .unwrap();
        d.step_dual(0.123, 0.456);
        d.step_dual(0.01, 0.02);
        d
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small_model();
        let dual = some_dual();
        let bytes = encode(&model, Some(&dual)).unwrap();
        let (back, bdual) = decode::<f64>(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in back.params.params.iter().zip(model.params.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.array.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.array.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(bdual.unwrap(), dual);
    }

    #[test]
    fn dual_state_is_optional() {
        let model = small_model();
        let bytes = encode(&model, None).unwrap();
        let (_, dual) = decode::<f64>(&bytes).unwrap();
        assert!(dual.is_none());
    }

    #[test]
    fn corrupted_payload_rejected() {
        let model = small_model();
        let mut bytes = encode(&model, None).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x01;
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(AppError::Data(m)) if m.contains("checksum")
        ));
    }

    #[test]
    fn truncation_rejected() {
        let model = small_model();
        let bytes = encode(&model, None).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode::<f64>(&bytes[..6]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        save(&path, &model, None).unwrap();
        let (back, _) = load::<f64>(&path).unwrap();
        assert_eq!(
            back.params.params[0].array.data,
            model.params.params[0].array.data
        );
    }
}
