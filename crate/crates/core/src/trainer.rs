//! Training loop and the four-cell experiment matrix
//! (dataset_1/dataset_2 x Adam/RMSProp).
//!
//! The backbone prefix up to the freeze boundary never changes during
//! training, so its activations are computed once per unique image and
//! cached; each step then runs only the trainable tail and the head.
//! With a fully frozen backbone the cache holds the pooled 1280-vector
//! per image and training reduces to head updates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::augmenter::{DatasetManifest, DatasetName, ManifestEntry, Variant};
use crate::classifier::{batch_of, load_rgb, preprocess, BackboneSpec, HeadSpec, LeafClassifier, PreprocessSpec};
use crate::corpus::{SplitAssignment, SplitManifest};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::seeding::subseed;

/// Published setup: 50 epochs, batch size 16, categorical cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub dataset: DatasetName,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

impl TrainLog {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_acc).fold(None, |acc, v| {
            Some(match acc {
                None => v,
                Some(a) => a.max(v),
            })
        })
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != TRAIN_LOG_HEADER {
                    return Err(Error::InvalidInput(format!("bad train log header {line:?}")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::InvalidInput(format!("bad train log row {line:?}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::InvalidInput(format!("bad number {s:?} in train log")))
            };
            rows.push(EpochRow {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad epoch {:?} in train log", f[0])))?,
                train_loss: parse(f[1])?,
                train_acc: parse(f[2])?,
                val_loss: parse(f[3])?,
                val_acc: parse(f[4])?,
                seconds: parse(f[5])?,
            });
        }
        Ok(TrainLog { rows })
    }
}

fn format_row(row: &EpochRow) -> String {
    // Default float formatting is the shortest string that parses back to
    // the same value, so a reread log is bit-identical to the in-memory one.
    format!(
        "{},{},{},{},{},{:.3}",
        row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc, row.seconds
    )
}

/// `dataset_1_adam`, `dataset_2_rmsprop`, ...
pub fn cell_name(dataset: DatasetName, optimizer: OptimizerKind) -> String {
    format!("{}_{}", dataset.as_str(), optimizer.as_str())
}

/// Output files for one experiment cell.
#[derive(Debug, Clone)]
pub struct CellPaths {
    /// Per-epoch CSV log, appended as training progresses.
    pub log: PathBuf,
    /// Weights at the last completed epoch (resume point).
    pub state: PathBuf,
    /// Optimizer slots at the last completed epoch.
    pub optim_state: PathBuf,
    /// Best-validation-accuracy checkpoint: the selected model.
    pub model: PathBuf,
    /// JSON sidecar with specs and seeds.
    pub sidecar: PathBuf,
}

impl CellPaths {
    pub fn new(dir: &Path, dataset: DatasetName, optimizer: OptimizerKind) -> CellPaths {
        let cell = cell_name(dataset, optimizer);
        CellPaths {
            log: dir.join(format!("{cell}_log.csv")),
            state: dir.join(format!("{cell}_state.safetensors")),
            optim_state: dir.join(format!("{cell}_optim.safetensors")),
            model: dir.join(format!("model_{cell}.safetensors")),
            sidecar: dir.join(format!("model_{cell}.json")),
        }
    }
}

/// Provenance sidecar written next to each exported model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub dataset: DatasetName,
    pub optimizer: OptimizerConfig,
    pub head: HeadSpec,
    pub backbone: BackboneSpec,
    pub preprocess: PreprocessSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

/// Cached activations at the freeze boundary, keyed by image path.
pub enum FeatureStore {
    /// Fully frozen backbone: pooled 1280-vectors.
    Pooled(BTreeMap<String, Array1<f32>>),
    /// Partially trainable backbone: boundary feature maps.
    Boundary(BTreeMap<String, Array3<f32>>),
}

impl FeatureStore {
    fn contains(&self, key: &str) -> bool {
        match self {
            FeatureStore::Pooled(m) => m.contains_key(key),
            FeatureStore::Boundary(m) => m.contains_key(key),
        }
    }
}

/// Raw-variant entries for a split partition, e.g. the shared validation set.
pub fn entries_from_split(split: &SplitManifest, partition: SplitAssignment) -> Vec<ManifestEntry> {
    split
        .records_in(partition)
        .map(|r| ManifestEntry {
            image_id: r.image_id.clone(),
            path: r.path.clone(),
            label: r.label,
            variant: Variant::Raw,
        })
        .collect()
}

/// Run every unique image through the frozen backbone prefix once.
pub fn precompute_features<'a>(
    model: &mut LeafClassifier,
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
    batch_size: usize,
) -> Result<FeatureStore> {
    let mut paths: BTreeSet<String> = BTreeSet::new();
    let mut by_key: BTreeMap<String, PathBuf> = BTreeMap::new();
    for e in entries {
        let key = e.path.to_string_lossy().into_owned();
        by_key.entry(key.clone()).or_insert_with(|| e.path.clone());
        paths.insert(key);
    }

    let fully_frozen = model.backbone.freeze_boundary() == 0;
    let mut pooled = BTreeMap::new();
    let mut boundary = BTreeMap::new();
    let keys: Vec<String> = paths.into_iter().collect();
    for chunk in keys.chunks(batch_size.max(1)) {
        let tensors: Vec<_> = chunk
            .iter()
            .map(|key| {
                let img = load_rgb(&by_key[key])?;
                Ok(preprocess(&img, &model.preprocess_spec))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = batch_of(&tensors);
        let frozen = model.backbone.forward_frozen(&batch);
        if fully_frozen {
            let pooled_batch = nn::gap_forward(&frozen);
            for (i, key) in chunk.iter().enumerate() {
                pooled.insert(key.clone(), pooled_batch.row(i).to_owned());
            }
        } else {
            for (i, key) in chunk.iter().enumerate() {
                boundary.insert(key.clone(), frozen.index_axis(Axis(0), i).to_owned());
            }
        }
    }
    Ok(if fully_frozen { FeatureStore::Pooled(pooled) } else { FeatureStore::Boundary(boundary) })
}

fn one_hot(entries: &[&ManifestEntry]) -> Array2<f32> {
    let mut y = Array2::zeros((entries.len(), crate::classifier::NUM_CLASSES));
    for (i, e) in entries.iter().enumerate() {
        y[[i, e.label.index()]] = 1.0;
    }
    y
}

fn accuracy(probs: &Array2<f32>, entries: &[&ManifestEntry]) -> usize {
    let mut correct = 0;
    for (i, e) in entries.iter().enumerate() {
        let row = probs.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap();
        correct += usize::from(argmax == e.label.index());
    }
    correct
}

struct BatchOutput {
    probs: Array2<f32>,
    loss: f32,
}

/// Forward one batch in training mode, backprop, and step the optimizer.
fn train_batch(
    model: &mut LeafClassifier,
    store: &FeatureStore,
    batch: &[&ManifestEntry],
    optimizer: &mut Optimizer,
    rng: &mut ChaCha20Rng,
) -> Result<BatchOutput> {
    let targets = one_hot(batch);
    for p in model.params_mut() {
        p.zero_grad();
    }

    let (probs, loss) = match store {
        FeatureStore::Pooled(map) => {
            let rows: Vec<_> = batch
                .iter()
                .map(|e| map[&e.path.to_string_lossy().into_owned()].view())
                .collect();
            let pooled = ndarray::stack(Axis(0), &rows).unwrap();
            let logits = model.head.forward_train(&pooled, rng);
            let probs = nn::softmax(&logits);
            let loss = nn::cross_entropy(&probs, &targets);
            let dlogits = nn::softmax_cce_grad(&probs, &targets);
            model.head.backward(&dlogits);
            (probs, loss)
        }
        FeatureStore::Boundary(map) => {
            let acts: Vec<_> = batch
                .iter()
                .map(|e| map[&e.path.to_string_lossy().into_owned()].view())
                .collect();
            let boundary = ndarray::stack(Axis(0), &acts).unwrap();
            let features = model.backbone.forward_tail(&boundary, true);
            let (_, _, fh, fw) = features.dim();
            let pooled = nn::gap_forward(&features);
            let logits = model.head.forward_train(&pooled, rng);
            let probs = nn::softmax(&logits);
            let loss = nn::cross_entropy(&probs, &targets);
            let dlogits = nn::softmax_cce_grad(&probs, &targets);
            let dpooled = model.head.backward(&dlogits);
            let dfeatures = nn::gap_backward(&dpooled, fh, fw);
            model.backbone.backward_tail(&dfeatures);
            (probs, loss)
        }
    };

    optimizer.apply(model.params_mut());
    Ok(BatchOutput { probs, loss })
}

/// Inference-mode loss and accuracy over a full entry list.
fn evaluate_entries(
    model: &mut LeafClassifier,
    store: &FeatureStore,
    entries: &[ManifestEntry],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    let refs: Vec<&ManifestEntry> = entries.iter().collect();
    for batch in refs.chunks(batch_size) {
        let targets = one_hot(batch);
        let probs = infer_probs(model, store, batch)?;
        let loss = nn::cross_entropy(&probs, &targets);
        total_loss += loss as f64 * batch.len() as f64;
        correct += accuracy(&probs, batch);
    }
    let n = entries.len() as f64;
    Ok((total_loss / n, correct as f64 / n))
}

/// Inference-mode class probabilities for entries whose features are cached.
pub fn infer_probs(model: &mut LeafClassifier, store: &FeatureStore, batch: &[&ManifestEntry]) -> Result<Array2<f32>> {
    for e in batch {
        let key = e.path.to_string_lossy().into_owned();
        if !store.contains(&key) {
            return Err(Error::InvalidInput(format!("feature store lacks {key}")));
        }
    }
    let pooled = match store {
        FeatureStore::Pooled(map) => {
            let rows: Vec<_> = batch
                .iter()
                .map(|e| map[&e.path.to_string_lossy().into_owned()].view())
                .collect();
            ndarray::stack(Axis(0), &rows).unwrap()
        }
        FeatureStore::Boundary(map) => {
            let acts: Vec<_> = batch
                .iter()
                .map(|e| map[&e.path.to_string_lossy().into_owned()].view())
                .collect();
            let boundary = ndarray::stack(Axis(0), &acts).unwrap();
            let features = model.backbone.forward_tail(&boundary, false);
            nn::gap_forward(&features)
        }
    };
    let logits = model.head.forward_infer(&pooled);
    Ok(nn::softmax(&logits))
}

/// Train one experiment cell. With `resume`, picks up after the last
/// completed epoch recorded in the cell's log.
pub fn train(
    model: &mut LeafClassifier,
    manifest: &DatasetManifest,
    val_entries: &[ManifestEntry],
    config: &TrainConfig,
    paths: &CellPaths,
    resume: bool,
    shared_store: Option<&FeatureStore>,
) -> Result<TrainLog> {
    config.validate()?;
    if manifest.is_empty() || val_entries.is_empty() {
        return Err(Error::InvalidInput("training and validation manifests must be non-empty".into()));
    }

    let owned_store;
    let store = match shared_store {
        Some(s) => s,
        None => {
            owned_store =
                precompute_features(model, manifest.entries.iter().chain(val_entries), config.batch_size)?;
            &owned_store
        }
    };

    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut log = TrainLog::default();
    let mut start_epoch = 1usize;
    let mut best_val_acc = f64::NEG_INFINITY;

    if resume && paths.log.is_file() {
        log = TrainLog::read_csv(&paths.log)?;
        if let Some(best) = log.best_val_acc() {
            best_val_acc = best;
        }
        start_epoch = log.rows.len() + 1;
        if !log.rows.is_empty() {
            model.load_all_weights(&paths.state)?;
            optimizer.load_state(&paths.optim_state)?;
        }
    }
    if start_epoch == 1 {
        // Fresh run: truncate the log.
        let mut f = std::fs::File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
        writeln!(f, "{TRAIN_LOG_HEADER}").map_err(|e| Error::io(&paths.log, e))?;
        log.rows.clear();
    }

    let cell = cell_name(config.dataset, config.optimizer.kind);
    let entry_refs: Vec<&ManifestEntry> = manifest.entries.iter().collect();

    for epoch in start_epoch..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..entry_refs.len()).collect();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(subseed(config.shuffle_seed, &format!("shuffle/{cell}/{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha20Rng::seed_from_u64(subseed(config.shuffle_seed, &format!("dropout/{cell}/{epoch}")));

        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, index_batch) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ManifestEntry> = index_batch.iter().map(|&i| entry_refs[i]).collect();
            let out = train_batch(model, store, &batch, &mut optimizer, &mut dropout_rng)?;
            // The loss clamps probabilities away from zero, so a diverged
            // model can report a finite loss while its outputs are NaN;
            // check both.
            if !out.loss.is_finite() || out.probs.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanLoss { epoch, batch: batch_idx });
            }
            epoch_loss += out.loss as f64 * batch.len() as f64;
            correct += accuracy(&out.probs, &batch);
        }
        let n = entry_refs.len() as f64;
        let (val_loss, val_acc) = evaluate_entries(model, store, val_entries, config.batch_size)?;

        let row = EpochRow {
            epoch,
            train_loss: epoch_loss / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };

        // Persist resume state before the log row, so a recorded epoch is
        // always resumable.
        model.save_weights(&paths.state)?;
        optimizer.save_state(&paths.optim_state)?;
        // `>=`: among epochs tied on validation accuracy, keep the most
        // recent (better-trained) weights.
        if row.val_acc >= best_val_acc {
            best_val_acc = row.val_acc;
            model.save_weights(&paths.model)?;
        }
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&paths.log)
            .map_err(|e| Error::io(&paths.log, e))?;
        writeln!(f, "{}", format_row(&row)).map_err(|e| Error::io(&paths.log, e))?;
        log.rows.push(row);
    }

    Ok(log)
}

/// The four experiment cells, in run order.
pub const MATRIX_CELLS: [(DatasetName, OptimizerKind); 4] = [
    (DatasetName::Dataset1, OptimizerKind::Adam),
    (DatasetName::Dataset1, OptimizerKind::Rmsprop),
    (DatasetName::Dataset2, OptimizerKind::Adam),
    (DatasetName::Dataset2, OptimizerKind::Rmsprop),
];

pub struct MatrixCellReport {
    pub dataset: DatasetName,
    pub optimizer: OptimizerKind,
    pub paths: CellPaths,
    pub outcome: Result<TrainLog>,
}

/// Train all four cells sequentially from identical initial weights.
/// Per-cell failures are reported and the remaining cells still run.
#[allow(clippy::too_many_arguments)]
pub fn run_matrix(
    build_model: &dyn Fn() -> Result<LeafClassifier>,
    dataset_1: &DatasetManifest,
    dataset_2: &DatasetManifest,
    val_entries: &[ManifestEntry],
    make_config: &dyn Fn(DatasetName, OptimizerKind) -> TrainConfig,
    out_dir: &Path,
    resume: bool,
    init_seed: u64,
) -> Result<Vec<MatrixCellReport>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // The frozen prefix is identical across cells (shared init seed), so
    // boundary activations are computed once for the union of images.
    let mut probe = build_model()?;
    let store = precompute_features(
        &mut probe,
        dataset_1.entries.iter().chain(&dataset_2.entries).chain(val_entries),
        16,
    )?;
    drop(probe);

    let mut reports = Vec::new();
    for (dataset, optimizer) in MATRIX_CELLS {
        let manifest = match dataset {
            DatasetName::Dataset1 => dataset_1,
            DatasetName::Dataset2 => dataset_2,
        };
        let paths = CellPaths::new(out_dir, dataset, optimizer);
        let config = make_config(dataset, optimizer);
        let outcome = build_model().and_then(|mut model| {
            let log = train(&mut model, manifest, val_entries, &config, &paths, resume, Some(&store))?;
            let sidecar = ModelSidecar {
                dataset,
                optimizer: config.optimizer,
                head: model.head_spec.clone(),
                backbone: model.backbone_spec.clone(),
                preprocess: model.preprocess_spec,
                epochs: config.epochs,
                batch_size: config.batch_size,
                init_seed,
                shuffle_seed: config.shuffle_seed,
            };
            let json = serde_json::to_string_pretty(&sidecar).expect("sidecar json");
            std::fs::write(&paths.sidecar, json).map_err(|e| Error::io(&paths.sidecar, e))?;
            Ok(log)
        });
        reports.push(MatrixCellReport { dataset, optimizer, paths, outcome });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_names_are_stable() {
        assert_eq!(cell_name(DatasetName::Dataset1, OptimizerKind::Adam), "dataset_1_adam");
        assert_eq!(cell_name(DatasetName::Dataset2, OptimizerKind::Rmsprop), "dataset_2_rmsprop");
    }

    #[test]
    fn cell_paths_follow_the_naming_convention() {
        let paths = CellPaths::new(Path::new("/out"), DatasetName::Dataset2, OptimizerKind::Adam);
        assert_eq!(paths.log, Path::new("/out/dataset_2_adam_log.csv"));
        assert_eq!(paths.state, Path::new("/out/dataset_2_adam_state.safetensors"));
        assert_eq!(paths.optim_state, Path::new("/out/dataset_2_adam_optim.safetensors"));
        assert_eq!(paths.model, Path::new("/out/model_dataset_2_adam.safetensors"));
        assert_eq!(paths.sidecar, Path::new("/out/model_dataset_2_adam.json"));
    }

    #[test]
    fn train_log_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = [
            EpochRow { epoch: 1, train_loss: 1.1, train_acc: 0.4, val_loss: 1.05, val_acc: 0.5, seconds: 2.5 },
            EpochRow { epoch: 2, train_loss: 0.9, train_acc: 0.6, val_loss: 0.95, val_acc: 0.55, seconds: 2.25 },
        ];
        let mut text = format!("{TRAIN_LOG_HEADER}\n");
        for r in &rows {
            text.push_str(&format_row(r));
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let log = TrainLog::read_csv(&path).unwrap();
        assert_eq!(log.rows.len(), 2);
        assert_eq!(log.rows[1].epoch, 2);
        assert!((log.rows[1].val_acc - 0.55).abs() < 1e-9);
        assert_eq!(log.best_val_acc(), Some(0.55));
    }

    #[test]
    fn train_log_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(TrainLog::read_csv(&path).is_err());
        std::fs::write(&path, format!("{TRAIN_LOG_HEADER}\n1,nope,0,0,0,0\n")).unwrap();
        assert!(TrainLog::read_csv(&path).is_err());
    }

    #[test]
    fn config_validation() {
        let mut config = TrainConfig {
            epochs: 5,
            batch_size: 16,
            shuffle_seed: 0,
            dataset: DatasetName::Dataset1,
            optimizer: crate::optim::default_optimizer(OptimizerKind::Adam),
        };
        assert!(config.validate().is_ok());
        config.epochs = 0;
        assert!(config.validate().is_err());
        config.epochs = 5;
        config.batch_size = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn matrix_cells_cover_the_grid_in_order() {
        assert_eq!(MATRIX_CELLS.len(), 4);
        let names: Vec<String> = MATRIX_CELLS.iter().map(|&(d, o)| cell_name(d, o)).collect();
        assert_eq!(
            names,
            ["dataset_1_adam", "dataset_1_rmsprop", "dataset_2_adam", "dataset_2_rmsprop"]
        );
    }
}
