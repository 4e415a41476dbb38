//! Geographic cross-validation, augmentation sweeps and the run manifest.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{self, EvalError, EvalReport, GapSummary, SummaryTable};
use crate::nn::{adam_step, stack_profiles, write_checkpoint, Graph, ModelConfig, ModelParams, NnError, OptimState};
use crate::profile::{Orientation, PathProfileTensor, ProfileConfig};
use crate::seed::{derive_seed, label_hash, rng_from_seed, SeedPurpose};
use crate::transforms::{reflect, select_for_augmentation, AugmentError, AugmentationPlan, SelectionScope};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("training aborted at epoch {epoch}: {source}")]
    Training { epoch: usize, source: NnError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("data leakage: {0}")]
    Leakage(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a new best validation RMSE before stopping.
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub regions: Vec<String>,
    /// Regions held out in turn; empty means every region.
    pub holdouts: Vec<String>,
    /// Share of each non-holdout region's samples used for training; the
    /// rest validates.
    pub train_fraction: f64,
    /// Per region and band, keep at most this many samples (drawn per
    /// repeat). `None` keeps everything.
    pub samples_per_band_per_region: Option<usize>,
    /// Reflected copies per training/validation region, one sweep column each.
    pub augmentation_n: Vec<usize>,
    pub selection_scope: SelectionScope,
    pub repeats: usize,
    pub base_seed: u64,
    pub training: TrainingConfig,
    pub profile: ProfileConfig,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regions: (0..6).map(|k| format!("region{k}")).collect(),
            holdouts: Vec::new(),
            train_fraction: 0.8,
            samples_per_band_per_region: None,
            augmentation_n: vec![0, 80, 500],
            selection_scope: SelectionScope::UniformRandom,
            repeats: 3,
            base_seed: 0,
            training: TrainingConfig::default(),
            profile: ProfileConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn holdout_list(&self) -> Vec<String> {
        if self.holdouts.is_empty() {
            self.regions.clone()
        } else {
            self.holdouts.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let unique: BTreeSet<&String> = self.regions.iter().collect();
        if unique.len() != self.regions.len() {
            return bad("regions must be unique".into());
        }
        if self.regions.len() < 2 {
            return bad("need at least 2 regions (one held out, one to train on)".into());
        }
        for h in &self.holdouts {
            if !self.regions.contains(h) {
                return Err(ExperimentError::UnknownRegion(h.clone()));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must be in (0, 1)".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if self.augmentation_n.is_empty() {
            return bad("augmentation_n needs at least one value".into());
        }
        if self.samples_per_band_per_region == Some(0) {
            return bad("samples_per_band_per_region must be positive".into());
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0) {
            return bad("training needs epochs > 0, batch_size > 0, learning_rate > 0".into());
        }
        self.profile
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let [_, l, w] = self.model.input_shape;
        if l != self.profile.length_samples || w != self.profile.transverse_samples {
            return bad(format!(
                "model.input_shape [4, {l}, {w}] does not match profile {}x{}",
                self.profile.length_samples, self.profile.transverse_samples
            ));
        }
        self.model.parameter_shapes()?;
        Ok(())
    }
}

/// Sample indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out `holdout` and splits every other listed region's samples into
/// train and validation with a seeded shuffle (per region, so each region
/// contributes `train_fraction` of its samples to training). Samples from
/// regions not listed are ignored.
pub fn make_folds<P: Borrow<PathProfileTensor>>(
    samples: &[P],
    regions: &[String],
    holdout: &str,
    train_fraction: f64,
    seed: u64,
) -> Result<Folds, ExperimentError> {
    if !regions.iter().any(|r| r == holdout) {
        return Err(ExperimentError::UnknownRegion(holdout.into()));
    }
    if regions.len() < 2 {
        return Err(ExperimentError::Config("no region left to train on".into()));
    }
    let mut folds = Folds {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for region in regions {
        let idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].borrow().link.region_id == *region)
            .collect();
        if region == holdout {
            folds.test = idx;
            continue;
        }
        let mut idx = idx;
        idx.shuffle(&mut rng_from_seed(derive_seed(
            seed,
            SeedPurpose::Split,
            &[label_hash(region)],
        )));
        let n_train = ((idx.len() as f64) * train_fraction).round() as usize;
        folds.val.extend_from_slice(&idx[n_train..]);
        idx.truncate(n_train);
        folds.train.extend(idx);
    }
    if folds.train.is_empty() || folds.val.is_empty() || folds.test.is_empty() {
        return Err(ExperimentError::Config(format!(
            "holdout {holdout}: fold sizes train {} val {} test {}; every partition must be non-empty",
            folds.train.len(),
            folds.val.len(),
            folds.test.len()
        )));
    }
    Ok(folds)
}

/// Keeps at most `k` samples per (region, band), chosen with a seeded
/// shuffle; returns indices in ascending order.
pub fn subsample_per_band(samples: &[PathProfileTensor], k: usize, seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups
            .entry((s.link.region_id.as_str(), s.link.band_id.as_str()))
            .or_default()
            .push(i);
    }
    let mut keep = Vec::new();
    for ((region, band), mut idx) in groups {
        let path = [label_hash(region), label_hash(band)];
        idx.shuffle(&mut rng_from_seed(derive_seed(seed, SeedPurpose::Split, &path)));
        idx.truncate(k);
        keep.extend(idx);
    }
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

fn dataset_rmse(model: &ModelParams, set: &[&PathProfileTensor]) -> Result<f64, NnError> {
    let preds = model.predict(set)?;
    let sum: f64 = preds
        .iter()
        .zip(set)
        .map(|(p, s)| {
            let d = p - s.link.path_loss;
            d * d
        })
        .sum();
    Ok((sum / set.len() as f64).sqrt())
}

/// Mini-batch Adam on MSE over dB targets with early stopping on
/// validation RMSE. Returns the parameters from the best validation epoch.
pub fn train_model(
    train: &[&PathProfileTensor],
    val: &[&PathProfileTensor],
    model: &ModelConfig,
    training: &TrainingConfig,
    init_seed: u64,
    order_seed: u64,
) -> Result<(ModelParams, TrainHistory), ExperimentError> {
    if train.is_empty() {
        return Err(ExperimentError::Config("empty training set".into()));
    }
    if val.is_empty() {
        return Err(ExperimentError::Config("empty validation set".into()));
    }
    if training.batch_size == 0 || training.epochs == 0 {
        return Err(ExperimentError::Config("epochs and batch_size must be positive".into()));
    }
    let mut params = ModelParams::init(model, init_seed)?;
    let mut optim = OptimState::new(training.learning_rate);
    let mut best = (params.clone(), f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;
    for epoch in 0..training.epochs {
        let fail = |source| ExperimentError::Training { epoch, source };
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(
            order_seed,
            SeedPurpose::BatchOrder,
            &[epoch as u64],
        )));
        let mut loss_sum = 0f64;
        for batch in order.chunks(training.batch_size) {
            let profiles: Vec<&PathProfileTensor> = batch.iter().map(|&i| train[i]).collect();
            let targets: Vec<f32> = profiles.iter().map(|p| p.link.path_loss as f32).collect();
            let x = stack_profiles(&profiles, model).map_err(fail)?;
            let mut g = Graph::new();
            let y = params.forward_graph(&mut g, x).map_err(fail)?;
            let l = g.mse_loss(y, &targets).map_err(fail)?;
            loss_sum += f64::from(g.value(l).data()[0]) * batch.len() as f64;
            let grads = g.backward(l).map_err(fail)?;
            adam_step(&mut params, &grads, &mut optim).map_err(fail)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_rmse = dataset_rmse(&params, val).map_err(fail)?;
        if !train_loss.is_finite() || !val_rmse.is_finite() {
            return Err(fail(NnError::NonFinite("epoch loss")));
        }
        log::debug!("epoch {epoch}: train mse {train_loss:.3}, val rmse {val_rmse:.3}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_rmse,
        });
        if val_rmse < best.1 {
            best = (params.clone(), val_rmse, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= training.patience {
                break;
            }
        }
    }
    let (params, best_val_rmse, best_epoch) = best;
    Ok((
        params,
        TrainHistory {
            epochs: history,
            best_epoch,
            best_val_rmse,
        },
    ))
}

/// Downlink-style samples for every region plus an unrelated backhaul set.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub downlink: Vec<PathProfileTensor>,
    pub backhaul: Vec<PathProfileTensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub holdout: String,
    pub n: usize,
    pub repeat: usize,
}

impl CellKey {
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join("runs")
            .join(&self.holdout)
            .join(self.n.to_string())
            .join(self.repeat.to_string())
    }
}

/// Cells in sweep order: holdout, then n, then repeat.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for holdout in cfg.holdout_list() {
        for &n in &cfg.augmentation_n {
            for repeat in 0..cfg.repeats {
                cells.push(CellKey {
                    holdout: holdout.clone(),
                    n,
                    repeat,
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub subsample: u64,
    pub split: u64,
    pub init: u64,
    pub batch_order: u64,
    /// Augmentation selection; re-drawn for every repeat.
    pub augment: u64,
}

impl CellSeeds {
    /// Split, init and batch order depend on (holdout, repeat) only, so the
    /// columns of one repeat differ only in the augmentation.
    pub fn derive(base: u64, cell: &CellKey) -> Self {
        let h = label_hash(&cell.holdout);
        let r = cell.repeat as u64;
        Self {
            subsample: derive_seed(base, SeedPurpose::Split, &[0, r]),
            split: derive_seed(base, SeedPurpose::Split, &[1, h, r]),
            init: derive_seed(base, SeedPurpose::Init, &[h, r]),
            batch_order: derive_seed(base, SeedPurpose::BatchOrder, &[h, r]),
            augment: derive_seed(base, SeedPurpose::Augment, &[h, cell.n as u64, r]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub rmse: f64,
    pub mean_error: f64,
    pub sd_error: f64,
    pub errors: Vec<f64>,
}

impl From<EvalReport> for SetResult {
    fn from(r: EvalReport) -> Self {
        Self {
            rmse: r.rmse,
            mean_error: r.mean_error,
            sd_error: r.sd_error,
            errors: r.errors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: CellKey,
    pub seeds: CellSeeds,
    pub train_size: usize,
    pub val_size: usize,
    pub identity: SetResult,
    pub reflected: SetResult,
    pub backhaul: Option<SetResult>,
    /// Identity minus reflected prediction for each test link.
    pub gap: GapSummary,
    pub history: TrainHistory,
    pub augmentation_redrawn_per_repeat: bool,
    pub wall_time_s: f64,
}

impl RunResult {
    /// Everything except timing, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunResult {
        RunResult {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

fn evaluate_set(model: &ModelParams, label: &str, set: &[&PathProfileTensor]) -> Result<SetResult, ExperimentError> {
    let preds = model.predict(set)?;
    let meas: Vec<f64> = set.iter().map(|p| p.link.path_loss).collect();
    Ok(EvalReport::new(label, &preds, &meas)?.into())
}

fn augmented(
    samples: &[PathProfileTensor],
    indices: &[usize],
    n_per_region: usize,
    plan_seed: u64,
    scope: SelectionScope,
    reflected_store: &mut Vec<PathProfileTensor>,
) -> Result<Vec<usize>, ExperimentError> {
    let plan = AugmentationPlan {
        n_per_region,
        selection_seed: plan_seed,
        selection_scope: scope,
    };
    let part: Vec<&PathProfileTensor> = indices.iter().map(|&i| &samples[i]).collect();
    let picked = select_for_augmentation(&part, &plan)?;
    let start = reflected_store.len();
    reflected_store.extend(picked.iter().map(|&k| reflect(part[k])));
    Ok((start..reflected_store.len()).collect())
}

fn assert_no_leakage(
    holdout: &str,
    train: &[&PathProfileTensor],
    val: &[&PathProfileTensor],
    test: &[&PathProfileTensor],
) -> Result<(), ExperimentError> {
    if let Some(p) = train.iter().chain(val).find(|p| p.link.region_id == holdout) {
        return Err(ExperimentError::Leakage(format!(
            "training/validation sample from held-out region {}",
            p.link.region_id
        )));
    }
    if let Some(p) = test
        .iter()
        .find(|p| p.orientation != Orientation::Identity || p.link.region_id != holdout)
    {
        return Err(ExperimentError::Leakage(format!(
            "test sample from region {} with orientation {:?}",
            p.link.region_id, p.orientation
        )));
    }
    Ok(())
}

/// Trains and evaluates one sweep cell. When `root` is given the best
/// checkpoint and history are written under `runs/<holdout>/<n>/<repeat>/`.
pub fn run_cell(
    data: &Datasets,
    cfg: &ExperimentConfig,
    cell: &CellKey,
    root: Option<&Path>,
) -> Result<RunResult, ExperimentError> {
    let started = Instant::now();
    let seeds = CellSeeds::derive(cfg.base_seed, cell);
    let pool: Vec<usize> = match cfg.samples_per_band_per_region {
        Some(k) => subsample_per_band(&data.downlink, k, seeds.subsample),
        None => (0..data.downlink.len()).collect(),
    };
    let view: Vec<&PathProfileTensor> = pool.iter().map(|&i| &data.downlink[i]).collect();
    let folds = make_folds(&view, &cfg.regions, &cell.holdout, cfg.train_fraction, seeds.split)?;

    let n_train = ((cell.n as f64) * cfg.train_fraction).round() as usize;
    let n_val = cell.n - n_train.min(cell.n);
    let train_idx: Vec<usize> = folds.train.iter().map(|&k| pool[k]).collect();
    let val_idx: Vec<usize> = folds.val.iter().map(|&k| pool[k]).collect();
    let mut reflected = Vec::new();
    let train_aug = augmented(
        &data.downlink,
        &train_idx,
        n_train,
        derive_seed(seeds.augment, SeedPurpose::Augment, &[0]),
        cfg.selection_scope,
        &mut reflected,
    )?;
    let val_aug = augmented(
        &data.downlink,
        &val_idx,
        n_val,
        derive_seed(seeds.augment, SeedPurpose::Augment, &[1]),
        cfg.selection_scope,
        &mut reflected,
    )?;
    let mut train: Vec<&PathProfileTensor> = train_idx.iter().map(|&i| &data.downlink[i]).collect();
    train.extend(train_aug.iter().map(|&k| &reflected[k]));
    let mut val: Vec<&PathProfileTensor> = val_idx.iter().map(|&i| &data.downlink[i]).collect();
    val.extend(val_aug.iter().map(|&k| &reflected[k]));
    let test: Vec<&PathProfileTensor> = folds.test.iter().map(|&k| view[k]).collect();
    assert_no_leakage(&cell.holdout, &train, &val, &test)?;

    log::info!(
        "cell {}/n={}/r={}: train {} val {} test {}",
        cell.holdout,
        cell.n,
        cell.repeat,
        train.len(),
        val.len(),
        test.len()
    );
    let (model, history) = train_model(&train, &val, &cfg.model, &cfg.training, seeds.init, seeds.batch_order)?;

    let test_reflected: Vec<PathProfileTensor> = test.iter().map(|p| reflect(p)).collect();
    let test_reflected_refs: Vec<&PathProfileTensor> = test_reflected.iter().collect();
    let identity = evaluate_set(&model, "identity", &test)?;
    let reflected_result = evaluate_set(&model, "reflected", &test_reflected_refs)?;
    let backhaul = if data.backhaul.is_empty() {
        None
    } else {
        let refs: Vec<&PathProfileTensor> = data.backhaul.iter().collect();
        Some(evaluate_set(&model, "backhaul", &refs)?)
    };
    let pairs: Vec<(&PathProfileTensor, &PathProfileTensor)> =
        test.iter().copied().zip(test_reflected.iter()).collect();
    let gap = evaluate::reciprocity_gap(&model, &pairs)?;

    if let Some(root) = root {
        let dir = cell.run_dir(root);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ckpt = dir.join("model.rpnn");
        let f = fs::File::create(&ckpt).map_err(io_err(&ckpt))?;
        write_checkpoint(std::io::BufWriter::new(f), &model)?;
        let hist = dir.join("history.json");
        let json = serde_json::to_vec_pretty(&history).map_err(|e| ExperimentError::Io {
            path: hist.clone(),
            message: e.to_string(),
        })?;
        fs::write(&hist, json).map_err(io_err(&hist))?;
    }

    Ok(RunResult {
        cell: cell.clone(),
        seeds,
        train_size: train.len(),
        val_size: val.len(),
        identity,
        reflected: reflected_result,
        backhaul,
        gap,
        history,
        augmentation_redrawn_per_repeat: true,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ManifestEntry {
    Completed(Box<RunResult>),
    Failed { cell: CellKey, error: String },
}

impl ManifestEntry {
    pub fn cell(&self) -> &CellKey {
        match self {
            ManifestEntry::Completed(r) => &r.cell,
            ManifestEntry::Failed { cell, .. } => cell,
        }
    }
}

/// Append-only JSON-lines record of finished cells.
#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
}

impl Manifest {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Entries in file order; a missing file is an empty manifest. A
    /// truncated final line (interrupted write) is ignored.
    pub fn load(&self) -> Result<Vec<ManifestEntry>, ExperimentError> {
        let f = match fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path)(e)),
        };
        let lines: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io_err(&self.path))?;
        let mut out = Vec::new();
        let last = lines.len().saturating_sub(1);
        for (k, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => out.push(e),
                Err(_) if k == last => log::warn!("ignoring truncated final manifest line"),
                Err(e) => {
                    return Err(ExperimentError::Manifest {
                        path: self.path.clone(),
                        message: format!("line {}: {e}", k + 1),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn append(&self, entry: &ManifestEntry) -> Result<(), ExperimentError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut line = serde_json::to_string(entry).map_err(|e| ExperimentError::Manifest {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        self.drop_torn_tail(&mut f).map_err(io_err(&self.path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.sync_data().map_err(io_err(&self.path))
    }

    /// Cuts an unterminated final line left by an interrupted write, so the
    /// next entry starts on a line of its own.
    fn drop_torn_tail(&self, f: &mut fs::File) -> std::io::Result<()> {
        let len = f.metadata()?.len();
        if len == 0 {
            return Ok(());
        }
        let mut last = [0u8; 1];
        f.seek(SeekFrom::Start(len - 1))?;
        f.read_exact(&mut last)?;
        if last[0] == b'\n' {
            return Ok(());
        }
        let mut text = Vec::new();
        f.seek(SeekFrom::Start(0))?;
        f.read_to_end(&mut text)?;
        let keep = text.iter().rposition(|&b| b == b'\n').map_or(0, |k| k + 1);
        log::warn!("dropping {} bytes of a torn manifest line", text.len() - keep);
        f.set_len(keep as u64)
    }

    pub fn reset(&self) -> Result<(), ExperimentError> {
        match fs::remove_file(&self.path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&self.path)(e)),
        }
    }

    /// Completed runs, the latest entry per cell winning.
    pub fn completed(&self) -> Result<BTreeMap<CellKey, RunResult>, ExperimentError> {
        let mut done = BTreeMap::new();
        for e in self.load()? {
            match e {
                ManifestEntry::Completed(r) => {
                    done.insert(r.cell.clone(), *r);
                }
                ManifestEntry::Failed { cell, .. } => {
                    done.remove(&cell);
                }
            }
        }
        Ok(done)
    }
}

/// Cells still to run: all of them, or with `resume` those without a
/// completed manifest entry.
pub fn pending_cells(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    resume: bool,
) -> Result<Vec<CellKey>, ExperimentError> {
    let cells = sweep_cells(cfg);
    if !resume {
        return Ok(cells);
    }
    let done = manifest.completed()?;
    Ok(cells.into_iter().filter(|c| !done.contains_key(c)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Completed results in sweep order, including ones reused on resume.
    pub results: Vec<RunResult>,
    pub failed: Vec<(CellKey, String)>,
}

/// Runs every cell serially, appending each outcome to
/// `<root>/manifest.jsonl` as soon as it finishes. A failed cell is recorded
/// and the sweep moves on.
pub fn run_sweep(
    data: &Datasets,
    cfg: &ExperimentConfig,
    root: &Path,
    resume: bool,
) -> Result<SweepOutcome, ExperimentError> {
    cfg.validate()?;
    let manifest = Manifest::new(root.join("manifest.jsonl"));
    if !resume {
        manifest.reset()?;
    }
    let mut failed = Vec::new();
    for cell in pending_cells(cfg, &manifest, resume)? {
        let entry = match run_cell(data, cfg, &cell, Some(root)) {
            Ok(r) => ManifestEntry::Completed(Box::new(r)),
            Err(e) => {
                log::error!("cell {cell:?} failed: {e}");
                failed.push((cell.clone(), e.to_string()));
                ManifestEntry::Failed {
                    cell,
                    error: e.to_string(),
                }
            }
        };
        manifest.append(&entry)?;
    }
    let done = manifest.completed()?;
    let results = sweep_cells(cfg).iter().filter_map(|c| done.get(c).cloned()).collect();
    Ok(SweepOutcome { results, failed })
}

/// Test sets a sweep reports on.
pub const TEST_SETS: [&str; 3] = ["identity", "reflected", "backhaul"];

fn metric(r: &RunResult, set: &str) -> Option<f64> {
    match set {
        "identity" => Some(r.identity.rmse),
        "reflected" => Some(r.reflected.rmse),
        "backhaul" => r.backhaul.as_ref().map(|b| b.rmse),
        "gap_mean" => Some(r.gap.mean),
        "gap_sd" => Some(r.gap.sd),
        _ => None,
    }
}

/// Per-holdout (mean, SD across repeats) tables for each test set RMSE and
/// for the reciprocity gap mean and SD.
pub fn summarize(results: &[RunResult], n_values: &[usize]) -> Result<Vec<SummaryTable>, ExperimentError> {
    let mut tables = Vec::new();
    for set in TEST_SETS.iter().chain(&["gap_mean", "gap_sd"]) {
        let mut values: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for r in results {
            let Some(v) = metric(r, set) else { continue };
            let Some(k) = n_values.iter().position(|&n| n == r.cell.n) else {
                continue;
            };
            let row = values
                .entry(r.cell.holdout.clone())
                .or_insert_with(|| vec![Vec::new(); n_values.len()]);
            row[k].push(v);
        }
        // holdouts missing any n column cannot be tabulated
        values.retain(|_, row| row.iter().all(|c| !c.is_empty()));
        if values.is_empty() {
            continue;
        }
        tables.push(SummaryTable::build(set, n_values, &values)?);
    }
    Ok(tables)
}

/// Errors pooled over all holdouts and repeats for each (set, n), with KDE
/// curves; gap curves are named `gap_n<n>`.
pub fn pooled_reports(
    results: &[RunResult],
    n_values: &[usize],
) -> Result<BTreeMap<String, EvalReport>, ExperimentError> {
    let mut out = BTreeMap::new();
    for &n in n_values {
        let cell_runs: Vec<&RunResult> = results.iter().filter(|r| r.cell.n == n).collect();
        if cell_runs.is_empty() {
            continue;
        }
        let sets: [(&str, Vec<f64>); 4] = [
            (
                "identity",
                cell_runs
                    .iter()
                    .flat_map(|r| r.identity.errors.iter().copied())
                    .collect(),
            ),
            (
                "reflected",
                cell_runs
                    .iter()
                    .flat_map(|r| r.reflected.errors.iter().copied())
                    .collect(),
            ),
            (
                "backhaul",
                cell_runs
                    .iter()
                    .flat_map(|r| r.backhaul.iter().flat_map(|b| b.errors.iter().copied()))
                    .collect(),
            ),
            (
                "gap",
                cell_runs.iter().flat_map(|r| r.gap.gaps.iter().copied()).collect(),
            ),
        ];
        for (name, errors) in sets {
            if errors.len() < 2 {
                continue;
            }
            let label = format!("{name}_n{n}");
            let report = EvalReport::from_errors(label.clone(), errors)?;
            let report = match report.clone().with_kde() {
                Ok(r) => r,
                Err(EvalError::DegenerateBandwidth) => report,
                Err(e) => return Err(e.into()),
            };
            out.insert(label, report);
        }
    }
    Ok(out)
}
