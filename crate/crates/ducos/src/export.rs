//! Packing raw prompt arrays into DPF files.
//!
//! The raw layout is a directory with a `meta.json` at its root:
//! `{"patch_size": p, "samples": ["sample_0000", ...]}`. Each sample
//! subdirectory holds five raw f32 arrays with sidecars: `stage0.bin`
//! through `stage3.bin` and `relative_depth.bin`. Packing is deterministic,
//! so re-running produces byte-identical outputs.

use std::fs;
use std::path::Path;

use ducos_core::prompt::{PromptFlow, PromptSource, NUM_STAGES};
use ducos_core::Real;
use serde::{Deserialize, Serialize};

use crate::depthio::{read_raw_f32, write_raw_f32};
use crate::dpf;
use crate::error::{AppError, Result};

pub const META_NAME: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawMeta {
    pub patch_size: usize,
    pub samples: Vec<String>,
}

/// Read one raw sample directory into a prompt flow.
pub fn read_raw_sample<R: Real>(dir: &Path, patch_size: usize) -> Result<PromptFlow<R>> {
    let mut features = Vec::with_capacity(NUM_STAGES);
    for s in 0..NUM_STAGES {
        features.push(read_raw_f32(&dir.join(format!("stage{s}.bin")))?);
    }
    let relative_depth = read_raw_f32(&dir.join("relative_depth.bin"))?;
    if relative_depth.shape.len() != 3 || relative_depth.shape[0] != 1 {
        return Err(AppError::Data(format!(
            "{}: relative depth must be [1,H,W], got {:?}",
            dir.display(),
            relative_depth.shape
        )));
    }
    let (h, w) = (relative_depth.shape[1], relative_depth.shape[2]);
    let flow = PromptFlow {
        features,
        relative_depth,
        patch_size,
        source: PromptSource::File,
    };
    flow.validate(h, w)
        .map_err(|e| AppError::Data(format!("{}: {e}", dir.display())))?;
    Ok(flow)
}

/// Write one prompt flow as a raw sample directory (the inverse of
/// [`read_raw_sample`]); used by tests and by oracle dumps.
pub fn write_raw_sample<R: Real>(dir: &Path, flow: &PromptFlow<R>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (s, f) in flow.features.iter().enumerate() {
        write_raw_f32(&dir.join(format!("stage{s}.bin")), f)?;
    }
    write_raw_f32(&dir.join("relative_depth.bin"), &flow.relative_depth)?;
    Ok(())
}

/// Convert every sample listed in the raw directory's meta file into
/// `<out_dir>/<sample>.dpf`. Returns the number of files written.
pub fn export_prompts(raw_dir: &Path, out_dir: &Path) -> Result<usize> {
    let mpath = raw_dir.join(META_NAME);
    let mtext = fs::read_to_string(&mpath)
        .map_err(|e| AppError::Data(format!("{}: {e}", mpath.display())))?;
    let meta: RawMeta = serde_json::from_str(&mtext)
        .map_err(|e| AppError::Data(format!("{}: {e}", mpath.display())))?;
    if meta.patch_size == 0 {
        return Err(AppError::Data("meta patch_size must be positive".to_string()));
    }
    fs::create_dir_all(out_dir)?;
    for name in &meta.samples {
        let flow: PromptFlow<f32> = read_raw_sample(&raw_dir.join(name), meta.patch_size)?;
        dpf::write_file(&out_dir.join(format!("{name}.dpf")), &flow)?;
    }
    Ok(meta.samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ducos_core::prompt::synthetic_prompt_oracle;
    use ducos_core::scene::gen_scene;

    fn make_raw_dir(dir: &Path, n: usize) -> RawMeta {
        let mut samples = Vec::new();
        for i in 0..n {
            let scene = gen_scene::<f32>(i as u64 + 1, 42, 42).unwrap();
            let flow = synthetic_prompt_oracle(&scene, 100 + i as u64).unwrap();
            let name = format!("sample_{i:04}");
            write_raw_sample(&dir.join(&name), &flow).unwrap();
            samples.push(name);
        }
        let meta = RawMeta {
            patch_size: 14,
            samples,
        };
        fs::write(
            dir.join(META_NAME),
            serde_json::to_string_pretty(&meta).unwrap(),
        )
        .unwrap();
        meta
    }

    #[test]
    fn export_round_trip_preserves_values() {
        let raw = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        make_raw_dir(raw.path(), 2);
        let n = export_prompts(raw.path(), out.path()).unwrap();
        assert_eq!(n, 2);

        let scene = gen_scene::<f32>(1, 42, 42).unwrap();
        let original = synthetic_prompt_oracle(&scene, 100).unwrap();
        let back: PromptFlow<f32> =
            dpf::read_file(&out.path().join("sample_0000.dpf")).unwrap();
        assert_eq!(back.relative_depth.data, original.relative_depth.data);
        for (a, b) in back.features.iter().zip(original.features.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn export_is_idempotent() {
        let raw = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        make_raw_dir(raw.path(), 1);
        export_prompts(raw.path(), out.path()).unwrap();
        let first = fs::read(out.path().join("sample_0000.dpf")).unwrap();
        export_prompts(raw.path(), out.path()).unwrap();
        let second = fs::read(out.path().join("sample_0000.dpf")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_stage_file_rejected() {
        let raw = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        make_raw_dir(raw.path(), 1);
        fs::remove_file(raw.path().join("sample_0000").join("stage2.bin")).unwrap();
        assert!(export_prompts(raw.path(), out.path()).is_err());
    }
}
