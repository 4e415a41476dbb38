//! `train`, `sweep`, `eval` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pathloss_core::evaluate::{emit_report, reciprocity_gap, EvalReport, ReportBundle};
use pathloss_core::experiment::{
    pending_cells, pooled_reports, run_cell, summarize, CellKey, Datasets, ExperimentConfig, Manifest, ManifestEntry,
    RunResult,
};
use pathloss_core::nn::read_checkpoint;
use pathloss_core::profile::PathProfileTensor;
use pathloss_core::transforms::reflect;

use crate::data::load_profiles;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Directory of downlink `.rppl` profiles (all regions).
    pub downlink: PathBuf,
    /// Optional directory of backhaul profiles, evaluated by every cell.
    pub backhaul: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub data: DataPaths,
    pub experiment: ExperimentConfig,
}

pub const SWEEP_DOCS: &[(&str, &str)] = &[
    ("data.downlink", "directory of downlink profiles"),
    ("data.backhaul", "directory of backhaul profiles, or null"),
    ("experiment.regions", "region ids taking part in cross-validation"),
    ("experiment.holdouts", "regions held out in turn; [] means all"),
    (
        "experiment.train_fraction",
        "share of each training region used for training; the rest validates",
    ),
    (
        "experiment.samples_per_band_per_region",
        "cap per (region, band), redrawn per repeat; null keeps all",
    ),
    (
        "experiment.augmentation_n",
        "reflected copies per region, one sweep column each",
    ),
    ("experiment.selection_scope", "uniform-random or per-band-stratified"),
    ("experiment.repeats", "repeats per (holdout, n)"),
    (
        "experiment.base_seed",
        "root of the split, init, batch order and augmentation seeds",
    ),
    ("experiment.training.epochs", "maximum epochs"),
    ("experiment.training.batch_size", "mini-batch size"),
    ("experiment.training.learning_rate", "Adam step size"),
    (
        "experiment.training.patience",
        "epochs without validation improvement before stopping",
    ),
    ("experiment.profile.length_samples", "L; must match the profiles"),
    ("experiment.profile.transverse_samples", "W; must match the profiles"),
    (
        "experiment.profile.transverse_halfwidth",
        "recorded only; profiles carry their own",
    ),
    ("experiment.profile.h_max", "recorded only"),
    ("experiment.profile.d_max", "recorded only; also used when reflecting"),
    ("experiment.profile.f_min", "recorded only"),
    ("experiment.profile.f_max", "recorded only"),
    ("experiment.model.input_shape", "[4, L, W]"),
    (
        "experiment.model.conv_blocks",
        "list of {out_channels, kernel, stride, padding}",
    ),
    ("experiment.model.dense", "hidden dense widths"),
    (
        "experiment.model.output_range_db",
        "[low, high] dB; the output is mid + half-range * raw",
    ),
];

pub fn load_datasets(cfg: &SweepConfig) -> Result<Datasets> {
    let downlink = load_profiles(&cfg.data.downlink)?;
    let backhaul = match &cfg.data.backhaul {
        Some(dir) => load_profiles(dir)?,
        None => Vec::new(),
    };
    let [_, l, w] = cfg.experiment.model.input_shape;
    for p in downlink.iter().chain(&backhaul) {
        if p.length() != l || p.width() != w {
            bail!(
                "profile for region {} is {}x{} but the model expects {l}x{w}",
                p.link.region_id,
                p.length(),
                p.width()
            );
        }
    }
    if downlink.is_empty() {
        bail!("no profiles found under {}", cfg.data.downlink.display());
    }
    Ok(Datasets { downlink, backhaul })
}

/// Trains one cell and writes its checkpoint, history and result.
pub fn train(cfg: &SweepConfig, cell: &CellKey, out: &Path) -> Result<RunResult> {
    cfg.experiment.validate()?;
    let data = load_datasets(cfg)?;
    let result = run_cell(&data, &cfg.experiment, cell, Some(out))?;
    let dir = cell.run_dir(out);
    fs::write(dir.join("result.json"), serde_json::to_vec_pretty(&result)?)?;
    Ok(result)
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub completed: usize,
    pub failed: Vec<(CellKey, String)>,
    pub skipped: usize,
}

/// Runs the pending cells on a pool of `jobs` workers. Workers only compute;
/// this thread is the sole manifest writer.
pub fn sweep(cfg: &SweepConfig, out: &Path, resume: bool, jobs: usize) -> Result<SweepSummary> {
    cfg.experiment.validate()?;
    fs::create_dir_all(out)?;
    let manifest = Manifest::new(out.join("manifest.jsonl"));
    let cfg_path = out.join("sweep_config.json");
    if resume {
        if let Ok(text) = fs::read_to_string(&cfg_path) {
            let previous: SweepConfig = serde_json::from_str(&text).context("reading the previous sweep config")?;
            if previous.experiment != cfg.experiment {
                bail!(
                    "--resume with a different experiment config than {}",
                    cfg_path.display()
                );
            }
        }
    } else {
        manifest.reset()?;
    }
    fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?)?;

    let data = load_datasets(cfg)?;
    let total = pathloss_core::experiment::sweep_cells(&cfg.experiment).len();
    let pending = pending_cells(&cfg.experiment, &manifest, resume)?;
    log::info!("{} of {total} cells to run on {jobs} worker(s)", pending.len());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let (tx, rx) = mpsc::channel::<ManifestEntry>();
    let mut summary = SweepSummary {
        completed: 0,
        failed: Vec::new(),
        skipped: total - pending.len(),
    };
    std::thread::scope(|s| -> Result<()> {
        let data = &data;
        let exp = &cfg.experiment;
        let pending = &pending;
        s.spawn(move || {
            pool.install(|| {
                pending.par_iter().for_each_with(tx, |tx, cell| {
                    let entry = match run_cell(data, exp, cell, Some(out)) {
                        Ok(r) => ManifestEntry::Completed(Box::new(r)),
                        Err(e) => ManifestEntry::Failed {
                            cell: cell.clone(),
                            error: e.to_string(),
                        },
                    };
                    // the receiver outlives the pool
                    let _ = tx.send(entry);
                });
            });
        });
        for entry in rx {
            match &entry {
                ManifestEntry::Completed(r) => {
                    log::info!(
                        "done {}/n={}/r={}: identity {:.2} dB, reflected {:.2} dB",
                        r.cell.holdout,
                        r.cell.n,
                        r.cell.repeat,
                        r.identity.rmse,
                        r.reflected.rmse
                    );
                    summary.completed += 1;
                }
                ManifestEntry::Failed { cell, error } => {
                    log::error!("cell {}/n={}/r={} failed: {error}", cell.holdout, cell.n, cell.repeat);
                    summary.failed.push((cell.clone(), error.clone()));
                }
            }
            manifest.append(&entry)?;
        }
        Ok(())
    })?;
    Ok(summary)
}

/// Builds the summary tables and pooled curves from a sweep directory.
pub fn report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg_text = fs::read_to_string(run.join("sweep_config.json"))
        .with_context(|| format!("{} is not a sweep directory", run.display()))?;
    let cfg: SweepConfig = serde_json::from_str(&cfg_text)?;
    let done = Manifest::new(run.join("manifest.jsonl")).completed()?;
    if done.is_empty() {
        bail!("no completed cells in {}", run.display());
    }
    let results: Vec<RunResult> = done.into_values().collect();
    let n = &cfg.experiment.augmentation_n;
    let tables = summarize(&results, n)?;
    let reports = pooled_reports(&results, n)?;
    let bundle = ReportBundle::new(serde_json::to_value(&cfg)?, tables, reports);
    Ok(emit_report(&bundle, out)?)
}

/// Scores a checkpoint on a profile directory; with `reciprocity` every
/// profile is also paired with its reflection.
pub fn eval(model: &Path, profiles: &Path, reciprocity: bool) -> Result<BTreeMap<String, EvalReport>> {
    let f = fs::File::open(model).with_context(|| format!("opening {}", model.display()))?;
    let params = read_checkpoint(std::io::BufReader::new(f))?;
    let set = load_profiles(profiles)?;
    let refs: Vec<&PathProfileTensor> = set.iter().collect();
    let preds = params.predict(&refs)?;
    let meas: Vec<f64> = set.iter().map(|p| p.link.path_loss).collect();
    let mut out = BTreeMap::new();
    let mut main = EvalReport::new("profiles", &preds, &meas)?;
    if main.errors.len() >= 2 {
        main = main.clone().with_kde().unwrap_or(main);
    }
    if reciprocity {
        let reflected: Vec<PathProfileTensor> = set.iter().map(reflect).collect();
        let pairs: Vec<(&PathProfileTensor, &PathProfileTensor)> = set.iter().zip(&reflected).collect();
        main.gaps = Some(reciprocity_gap(&params, &pairs)?);
        let rrefs: Vec<&PathProfileTensor> = reflected.iter().collect();
        let rpreds = params.predict(&rrefs)?;
        let mut r = EvalReport::new("reflected", &rpreds, &meas)?;
        if r.errors.len() >= 2 {
            r = r.clone().with_kde().unwrap_or(r);
        }
        out.insert("reflected".to_string(), r);
    }
    out.insert("profiles".to_string(), main);
    Ok(out)
}
