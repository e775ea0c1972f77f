//! Evaluation harness: run a model over a grid of scales and degradation
//! regimes on freshly generated scenes and aggregate depth metrics.

use std::path::Path;

use ducos_core::image::NormCtx;
use ducos_core::metrics::{MetricsAccum, DELTA_1, DELTA_105};
use ducos_core::network::DuCosModel;
use ducos_core::scene::{degrade, gen_scene, Regime, SamplePair};
use ducos_core::{NdArray, Real, Tape};

use crate::depthio::write_error_pgm;
use crate::error::{AppError, Result};
use crate::history::EvalRow;

pub const THREADS_ENV: &str = "DUCOS_THREADS";

#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub n_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub thresholds: Vec<f64>,
}

impl EvalSpec {
    pub fn new(n_scenes: usize, height: usize, width: usize, seed: u64) -> Self {
        EvalSpec {
            n_scenes,
            height,
            width,
            seed,
            scales: vec![2.0, 4.0],
            regimes: vec![Regime::Clean, Regime::Noisy],
            thresholds: vec![DELTA_1, DELTA_105],
        }
    }
}

/// Worker-thread fan-out from the `DUCOS_THREADS` environment variable;
/// unset means 1, anything unparsable is a config error.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(AppError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

/// Run one forward pass and return the predicted depth.
pub fn predict<R: Real>(model: &DuCosModel<R>, pair: &SamplePair<R>) -> Result<NdArray<R>> {
    let mut tape: Tape<R> = Tape::new();
    let binding = model.bind(&mut tape);
    let mut norm = NormCtx::live();
    let out = model.forward(&mut tape, &binding, &pair.x, &pair.prompts, &mut norm)?;
    let y = NdArray::new(tape.shape(out.y).to_vec(), tape.values(out.y).to_vec());
    for &v in &y.data {
        if !v.is_finite() {
            return Err(AppError::Numeric(
                "non-finite prediction during evaluation".to_string(),
            ));
        }
    }
    Ok(y)
}

fn eval_cell<R: Real>(
    model: &DuCosModel<R>,
    spec: &EvalSpec,
    scale: f64,
    regime: Regime,
    threads: usize,
    error_map_dir: Option<&Path>,
) -> Result<EvalRow> {
    let n = spec.n_scenes;
    let predictions: Vec<Result<(NdArray<R>, NdArray<R>)>> = if threads <= 1 {
        (0..n)
            .map(|i| eval_one(model, spec, scale, regime, i))
            .collect()
    } else {
        std::thread::scope(|scope| {
            let workers: Vec<_> = (0..threads)
                .map(|t| {
                    scope.spawn(move || -> Vec<(usize, Result<(NdArray<R>, NdArray<R>)>)> {
                        (t..n)
                            .step_by(threads)
                            .map(|i| (i, eval_one(model, spec, scale, regime, i)))
                            .collect()
                    })
                })
                .collect();
            let mut slots: Vec<Option<Result<(NdArray<R>, NdArray<R>)>>> =
                (0..n).map(|_| None).collect();
            for worker in workers {
                for (i, r) in worker.join().expect("eval worker panicked") {
                    slots[i] = Some(r);
                }
            }
            slots.into_iter().map(|s| s.unwrap()).collect()
        })
    };

    let mut accum = MetricsAccum::new(&spec.thresholds);
    for (i, result) in predictions.into_iter().enumerate() {
        let (y, z) = result?;
        if let Some(dir) = error_map_dir {
            let name = format!("err_x{scale}_{}_{i:03}.pgm", regime.as_str());
            write_error_pgm(&dir.join(name), &y, &z)?;
        }
        accum
            .add_sample(&y, &z)
            .map_err(|e| AppError::Data(e.to_string()))?;
    }
    Ok(EvalRow {
        scale,
        regime: regime.as_str().to_string(),
        report: accum.finalize().map_err(|e| AppError::Data(e.to_string()))?,
    })
}

fn eval_one<R: Real>(
    model: &DuCosModel<R>,
    spec: &EvalSpec,
    scale: f64,
    regime: Regime,
    index: usize,
) -> Result<(NdArray<R>, NdArray<R>)> {
    let seed = spec
        .seed
        .wrapping_add(0x5eed_0000)
        .wrapping_add(index as u64);
    let scene = gen_scene::<R>(seed, spec.height, spec.width)?;
    let pair = degrade(&scene, scale, regime, seed)?;
    let y = predict(model, &pair)?;
    Ok((y, pair.z))
}

/// Evaluate over the full (scale, regime) grid; rows come back in grid
/// order. `error_map_dir`, when set, receives one 8-bit error PGM per
/// sample.
pub fn eval_run<R: Real>(
    model: &DuCosModel<R>,
    spec: &EvalSpec,
    error_map_dir: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    if spec.scales.is_empty() || spec.regimes.is_empty() {
        return Err(AppError::Config(
            "evaluation needs at least one scale and one regime".to_string(),
        ));
    }
    for &s in &spec.scales {
        if !(s > 1.0) {
            return Err(AppError::Config(format!("scale must be > 1, got {s}")));
        }
    }
    let threads = thread_count()?;
    let mut rows = Vec::with_capacity(spec.scales.len() * spec.regimes.len());
    for &scale in &spec.scales {
        for &regime in &spec.regimes {
            rows.push(eval_cell(model, spec, scale, regime, threads, error_map_dir)?);
        }
    }
    Ok(rows)
}
