//! End-to-end run orchestration shared by the CLI and the integration
//! tests: dataset synthesis, training with per-epoch checkpointing, and
//! post-run artifacts.

use std::path::{Path, PathBuf};

use ducos_core::network::DuCosModel;
use ducos_core::scene::{degrade, gen_scene, SamplePair, Scene};
use ducos_core::trainer::{train, DualState, EpochRecord};

use crate::checkpoint;
use crate::error::Result;
use crate::history::{write_history, write_metrics, EvalRow};
use crate::runconfig::RunConfig;
use crate::{eval, scenefile};

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history_csv: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Build the training set the config describes.
pub fn build_dataset(cfg: &RunConfig) -> Result<Vec<SamplePair<f64>>> {
    let mut pairs = Vec::with_capacity(cfg.data.n_scenes);
    for i in 0..cfg.data.n_scenes {
        let seed = cfg.data.seed.wrapping_add(i as u64);
        let scene: Scene<f64> = gen_scene(seed, cfg.data.height, cfg.data.width)?;
        pairs.push(degrade(&scene, cfg.data.scale, cfg.data.regime.into(), seed)?);
    }
    Ok(pairs)
}

/// Train per the config; writes the effective config, a checkpoint after
/// every epoch (latest wins), and the history CSV.
pub fn run_training(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    cfg.write_effective(&out_dir)?;

    let data = build_dataset(cfg)?;
    let train_cfg = cfg.to_train_config()?;
    let mut model: DuCosModel<f64> = DuCosModel::new(train_cfg.model)?;
    model.init_params(cfg.seed);

    let ckpt_path = out_dir.join("model.ckpt");
    let schedule = train_cfg.schedule;
    let (lambda0, mu0) = (cfg.lambda0, cfg.mu0);
    let (el0, em0) = (cfg.eta_lambda0, cfg.eta_mu0);
    let epochs = cfg.epochs;
    let mut ckpt_err: Option<crate::error::AppError> = None;
    let mut on_epoch = |epoch: usize, m: &DuCosModel<f64>, r: &EpochRecord| {
        if ckpt_err.is_some() {
            return;
        }
        let dual = DualState {
            lambda: r.lambda,
            mu: r.mu,
            eta_lambda: r.eta_lambda,
            eta_mu: r.eta_mu,
            eta_lambda0: el0,
            eta_mu0: em0,
            t: epoch + 1,
            horizon: epochs,
            schedule,
        };
        if let Err(e) = checkpoint::save(&ckpt_path, m, Some(&dual)) {
            ckpt_err = Some(e);
        }
    };
    let history = train(&mut model, &data, &train_cfg, Some(&mut on_epoch))?;
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    // keep the multiplier trail even if the loop wrote no checkpoints
    if !ckpt_path.exists() {
        let dual = DualState::new(lambda0, mu0, el0, em0, epochs.max(1), schedule)?;
        checkpoint::save(&ckpt_path, &model, Some(&dual))?;
    }

    let history_csv = out_dir.join("history.csv");
    write_history(&history_csv, &history)?;
    Ok(RunArtifacts {
        out_dir,
        checkpoint: ckpt_path,
        history_csv,
        history,
    })
}

/// Evaluate a checkpoint over the grid and write the metrics CSV (plus
/// optional error maps).
pub fn run_eval(
    ckpt: &Path,
    spec: &eval::EvalSpec,
    out_csv: &Path,
    error_map_dir: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let (model, _) = checkpoint::load::<f64>(ckpt)?;
    if let Some(dir) = error_map_dir {
        std::fs::create_dir_all(dir)?;
    }
    let rows = eval::eval_run(&model, spec, error_map_dir)?;
    write_metrics(out_csv, &rows)?;
    Ok(rows)
}

/// Generate a scene dataset directory with a checksummed manifest.
pub fn run_gen(out: &Path, n: usize, height: usize, width: usize, seed: u64) -> Result<()> {
    let scenes: Result<Vec<Scene<f32>>> = (0..n)
        .map(|i| gen_scene(seed.wrapping_add(i as u64), height, width).map_err(Into::into))
        .collect();
    scenefile::write_dataset(out, &scenes?)?;
    Ok(())
}
