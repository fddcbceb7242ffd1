//! `leafcls`: pipeline orchestration for the leaf-disease classification
//! experiment. Stages compose as prepare -> segment -> train/matrix ->
//! evaluate, with no state outside the work directory.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime
//! (NaN/model) error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leafcls::augmenter::{build_dataset_1, build_dataset_2, DatasetManifest, DatasetName};
use leafcls::classifier::{HeadSpec, LeafClassifier};
use leafcls::corpus::{self, Label, SplitAssignment, SplitRatios};
use leafcls::evaluator;
use leafcls::optim::OptimizerKind;
use leafcls::segmenter::{
    self, apply_mask, gate, read_manual_rejects, ForegroundMask, Segmenter, VerdictRow,
};
use leafcls::synthetic::generate_synthetic_corpus;
use leafcls::trainer::{self, CellPaths, TrainConfig, MATRIX_CELLS};
use leafcls::Error as CoreError;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "leafcls", version, about = "Leaf-disease classification pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML). Missing file = built-in defaults.
    #[arg(long, global = true, default_value = "leafcls.toml")]
    config: PathBuf,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Redo work even when outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a self-contained synthetic corpus under corpus_dir.
    Synth {
        /// Images per class.
        #[arg(long, default_value_t = 60)]
        n: usize,
    },
    /// Ingest, balance, split; write split and dataset_1 manifests.
    Prepare {
        /// Generate a synthetic corpus of this many images per class first.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Segment every training image, gate the masks, write verdicts and
    /// the dataset_2 manifest.
    Segment {
        /// Segmentation backend: salient | baseline.
        #[arg(long)]
        backend: Option<String>,
    },
    /// Train a single experiment cell.
    Train {
        /// Training dataset: 1 (raw) or 2 (raw + background removed).
        #[arg(long)]
        dataset: u8,
        /// Optimizer: adam | rmsprop.
        #[arg(long)]
        optimizer: String,
        /// Continue from the last completed epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Train all four experiment cells from identical initial weights.
    Matrix {
        /// Continue each cell from its last completed epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Score every trained cell on the held-out raw test split and write
    /// the comparison report.
    Evaluate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Map error kinds onto the documented exit codes.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    if let Some(code) = e.downcast_ref::<ExitWith>() {
        return code.0;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::InvalidInput(_))
        | Some(CoreError::BadRatios(_))
        | Some(CoreError::BadGateBounds(..)) => 1,
        Some(CoreError::NanLoss { .. }) | Some(CoreError::Model(_)) | Some(CoreError::BadCheckpoint { .. }) => 3,
        Some(_) => 2,
        None => 1,
    }
}

/// Carrier for an explicit exit code (e.g. partial evaluation).
#[derive(Debug)]
struct ExitWith(u8, String);

impl std::fmt::Display for ExitWith {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.1)
    }
}

impl std::error::Error for ExitWith {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = if cli.config.is_file() {
        PipelineConfig::load(&cli.config)?
    } else if cli.config != Path::new("leafcls.toml") {
        anyhow::bail!("config file {} not found", cli.config.display());
    } else {
        PipelineConfig::default()
    };
    if let Some(seed) = cli.seed {
        config.balance_seed = seed;
        config.split_seed = seed;
        config.init_seed = seed;
        config.shuffle_seed = seed;
        config.synth_seed = seed;
    }

    match cli.command {
        Command::Synth { n } => cmd_synth(&config, n),
        Command::Prepare { synthetic } => cmd_prepare(&config, synthetic),
        Command::Segment { backend } => {
            if let Some(b) = backend {
                config.backend = b;
            }
            cmd_segment(&config, cli.force)
        }
        Command::Train { dataset, optimizer, resume } => {
            let dataset = parse_dataset(dataset)?;
            let optimizer = OptimizerKind::parse(&optimizer)?;
            cmd_train(&config, dataset, optimizer, resume)
        }
        Command::Matrix { resume } => cmd_matrix(&config, resume),
        Command::Evaluate => cmd_evaluate(&config),
    }
}

fn parse_dataset(n: u8) -> anyhow::Result<DatasetName> {
    match n {
        1 => Ok(DatasetName::Dataset1),
        2 => Ok(DatasetName::Dataset2),
        other => anyhow::bail!("--dataset must be 1 or 2, got {other}"),
    }
}

/// Every stage output directory records how it was produced.
fn write_provenance(dir: &Path, stage: &str, config: &PipelineConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let provenance = serde_json::json!({
        "stage": stage,
        "config_digest": config.digest(),
        "seeds": {
            "balance": config.balance_seed,
            "split": config.split_seed,
            "init": config.init_seed,
            "shuffle": config.shuffle_seed,
            "synth": config.synth_seed,
        },
    });
    let path = dir.join("provenance.json");
    std::fs::write(&path, serde_json::to_string_pretty(&provenance).expect("provenance json") + "\n")?;
    Ok(())
}

fn cmd_synth(config: &PipelineConfig, n: usize) -> anyhow::Result<()> {
    let corpus = generate_synthetic_corpus(n, config.synth_seed, &config.corpus_dir)?;
    println!(
        "synthetic corpus: {} images ({} per class) under {}",
        corpus.summary.total,
        n,
        config.corpus_dir.display()
    );
    Ok(())
}

fn cmd_prepare(config: &PipelineConfig, synthetic: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = synthetic {
        let existing = config.label_table();
        if !existing.is_file() {
            generate_synthetic_corpus(n, config.synth_seed, &config.corpus_dir)?;
            println!("generated synthetic corpus ({n} per class) under {}", config.corpus_dir.display());
        } else {
            println!("corpus already present at {}; skipping generation", config.corpus_dir.display());
        }
    }

    let (summary, records) = corpus::ingest(&config.label_table(), &config.image_dir())?;
    println!(
        "ingested {} images (healthy {}, rust {}, scab {}; dropped {})",
        summary.total,
        summary.per_class_counts.healthy,
        summary.per_class_counts.rust,
        summary.per_class_counts.scab,
        summary.dropped
    );

    let balanced = corpus::balance(&records, config.balance_seed)?;
    let split = corpus::split(&balanced, SplitRatios::SIX_TWO_TWO, config.split_seed)?;
    println!("balanced to {} images; split 6:2:2:", balanced.len());
    for (label, counts) in &split.per_class_split_counts {
        println!("  {:<8} train {:>5}  val {:>5}  test {:>5}", label.as_str(), counts.train, counts.val, counts.test);
    }

    let manifests = config.manifests_dir();
    std::fs::create_dir_all(&manifests)?;
    split.write_csv(&config.split_path())?;
    let dataset_1 = build_dataset_1(&split)?;
    dataset_1.write_csv(&config.dataset_manifest_path(DatasetName::Dataset1))?;
    write_provenance(&manifests, "prepare", config)?;
    println!("wrote {} ({} train entries)", config.split_path().display(), dataset_1.len());
    Ok(())
}

fn cmd_segment(config: &PipelineConfig, force: bool) -> anyhow::Result<()> {
    let split = corpus::SplitManifest::read_csv(&config.split_path())?;
    // Open the backend before touching any outputs, so a broken model
    // leaves the work directory unchanged.
    let backend = config.backend_id()?;
    let segmenter = Segmenter::open(&backend)?;
    let manual_rejects = match &config.manual_rejects {
        Some(path) => read_manual_rejects(path)?,
        None => Default::default(),
    };
    let bounds = config.gate_bounds();

    let masks_dir = config.masks_dir();
    let segmented_dir = config.segmented_dir();
    std::fs::create_dir_all(&masks_dir)?;
    std::fs::create_dir_all(&segmented_dir)?;

    let mut rows = Vec::new();
    let mut rejected: BTreeMap<Label, usize> = BTreeMap::new();
    let mut reused = 0usize;
    let mut verdicts = BTreeMap::new();
    for record in split.records_in(SplitAssignment::Train) {
        let mask_path = masks_dir.join(segmenter::mask_file_name(&record.image_id));
        let fg_path = segmented_dir.join(segmenter::segmented_file_name(&record.image_id));
        let mask = if mask_path.is_file() && fg_path.is_file() && !force {
            reused += 1;
            ForegroundMask::read_png(&mask_path, record.image_id.clone())?
        } else {
            let image = leafcls::classifier::load_rgb(&record.path)?;
            let mask = segmenter.segment(&image, &record.image_id, config.threshold)?;
            mask.write_png(&mask_path)?;
            let fg = apply_mask(&image, &mask, [0, 0, 0])?;
            fg.save(&fg_path).map_err(|e| CoreError::image(&fg_path, e))?;
            mask
        };
        let verdict = gate(&mask, bounds, &manual_rejects)?;
        if !verdict.accepted {
            *rejected.entry(record.label).or_default() += 1;
        }
        rows.push(VerdictRow {
            image_id: record.image_id.clone(),
            fraction: mask.foreground_fraction,
            verdict: verdict.clone(),
        });
        verdicts.insert(record.image_id.clone(), verdict);
    }

    segmenter::write_verdicts_csv(&rows, &config.verdicts_path())?;
    let dataset_2 = build_dataset_2(&split, &verdicts, &segmented_dir)?;
    dataset_2.write_csv(&config.dataset_manifest_path(DatasetName::Dataset2))?;
    write_provenance(&config.work_dir, "segment", config)?;

    let total_rejected: usize = rejected.values().sum();
    println!("segmented {} training images ({} reused)", rows.len(), reused);
    println!("incorrectly segmented (rejected by gate): {total_rejected}");
    for label in Label::ALL {
        println!("  {:<8} {}", label.as_str(), rejected.get(&label).copied().unwrap_or(0));
    }
    println!("dataset_2 manifest: {} entries", dataset_2.len());
    Ok(())
}

fn build_model(config: &PipelineConfig) -> leafcls::Result<LeafClassifier> {
    LeafClassifier::build(
        &config.backbone_spec(),
        &HeadSpec::default(),
        &config.preprocess_spec(),
        config.init_seed,
    )
}

fn train_config(config: &PipelineConfig, dataset: DatasetName, optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        shuffle_seed: config.shuffle_seed,
        dataset,
        optimizer: config.optimizer_config(optimizer),
    }
}

fn load_manifest(config: &PipelineConfig, dataset: DatasetName) -> anyhow::Result<DatasetManifest> {
    let path = config.dataset_manifest_path(dataset);
    if !path.is_file() {
        let stage = match dataset {
            DatasetName::Dataset1 => "prepare",
            DatasetName::Dataset2 => "segment",
        };
        anyhow::bail!("{} not found; run `leafcls {stage}` first", path.display());
    }
    Ok(DatasetManifest::read_csv(&path)?)
}

fn cmd_train(
    config: &PipelineConfig,
    dataset: DatasetName,
    optimizer: OptimizerKind,
    resume: bool,
) -> anyhow::Result<()> {
    let split = corpus::SplitManifest::read_csv(&config.split_path())?;
    let val_entries = trainer::entries_from_split(&split, SplitAssignment::Val);
    let manifest = load_manifest(config, dataset)?;

    let models_dir = config.models_dir();
    std::fs::create_dir_all(&models_dir)?;
    let paths = CellPaths::new(&models_dir, dataset, optimizer);
    let mut model = build_model(config)?;
    let cfg = train_config(config, dataset, optimizer);
    let log = trainer::train(&mut model, &manifest, &val_entries, &cfg, &paths, resume, None)?;
    let sidecar = trainer::ModelSidecar {
        dataset,
        optimizer: cfg.optimizer,
        head: model.head_spec.clone(),
        backbone: model.backbone_spec.clone(),
        preprocess: model.preprocess_spec,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        init_seed: config.init_seed,
        shuffle_seed: cfg.shuffle_seed,
    };
    std::fs::write(&paths.sidecar, serde_json::to_string_pretty(&sidecar).expect("sidecar json"))?;
    write_provenance(&models_dir, "train", config)?;

    let cell = trainer::cell_name(dataset, optimizer);
    if let Some(last) = log.rows.last() {
        println!(
            "{cell}: epoch {} train_acc {:.4} val_acc {:.4} (best val_acc {:.4})",
            last.epoch,
            last.train_acc,
            last.val_acc,
            log.best_val_acc().unwrap_or(0.0)
        );
    }
    println!("model: {}", paths.model.display());
    Ok(())
}

fn cmd_matrix(config: &PipelineConfig, resume: bool) -> anyhow::Result<()> {
    let split = corpus::SplitManifest::read_csv(&config.split_path())?;
    let val_entries = trainer::entries_from_split(&split, SplitAssignment::Val);
    let dataset_1 = load_manifest(config, DatasetName::Dataset1)?;
    let dataset_2 = load_manifest(config, DatasetName::Dataset2)?;

    let models_dir = config.models_dir();
    let reports = trainer::run_matrix(
        &|| build_model(config),
        &dataset_1,
        &dataset_2,
        &val_entries,
        &|dataset, optimizer| train_config(config, dataset, optimizer),
        &models_dir,
        resume,
        config.init_seed,
    )?;
    write_provenance(&models_dir, "matrix", config)?;

    let mut failures = Vec::new();
    for report in &reports {
        let cell = trainer::cell_name(report.dataset, report.optimizer);
        match &report.outcome {
            Ok(log) => println!(
                "{cell}: {} epochs, best val_acc {:.4}",
                log.rows.len(),
                log.best_val_acc().unwrap_or(0.0)
            ),
            Err(e) => {
                println!("{cell}: FAILED: {e}");
                failures.push(cell);
            }
        }
    }
    if !failures.is_empty() {
        return Err(ExitWith(3, format!("{} of 4 matrix cells failed: {}", failures.len(), failures.join(", "))).into());
    }
    Ok(())
}

fn cmd_evaluate(config: &PipelineConfig) -> anyhow::Result<()> {
    let split = corpus::SplitManifest::read_csv(&config.split_path())?;
    let test_entries = trainer::entries_from_split(&split, SplitAssignment::Test);

    // The frozen prefix is identical across cells, so test features are
    // computed once.
    let mut probe = build_model(config)?;
    let store = trainer::precompute_features(&mut probe, test_entries.iter(), config.batch_size)?;
    drop(probe);

    let digest = config.digest();
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for (dataset, optimizer) in MATRIX_CELLS {
        let paths = CellPaths::new(&config.models_dir(), dataset, optimizer);
        if !paths.model.is_file() {
            missing.push(trainer::cell_name(dataset, optimizer));
            continue;
        }
        let mut model = build_model(config)?;
        model.load_all_weights(&paths.model)?;
        cells.push(evaluator::evaluate_cell(
            &mut model,
            &store,
            &test_entries,
            dataset,
            optimizer,
            config.batch_size,
            &digest,
        )?);
    }
    if cells.is_empty() {
        anyhow::bail!("no trained cells found under {}; run `leafcls matrix` first", config.models_dir().display());
    }

    let report = evaluator::build_report(cells)?;
    evaluator::write_report(&report, &config.report_dir())?;
    write_provenance(&config.report_dir(), "evaluate", config)?;

    for cell in &report.cells {
        let m = &cell.metrics;
        println!(
            "{}: accuracy {:.4} weighted P/R/F1 {:.4}/{:.4}/{:.4}",
            cell.cell, m.accuracy, m.weighted_precision, m.weighted_recall, m.weighted_f1
        );
    }
    for delta in &report.augmentation_deltas {
        println!(
            "{}: dataset_2 - dataset_1 accuracy = {:+.4}",
            delta.optimizer.as_str(),
            delta.accuracy_delta
        );
    }
    println!("report: {}", config.report_dir().join("report.json").display());

    if !missing.is_empty() {
        return Err(ExitWith(2, format!("missing checkpoints for cells: {}", missing.join(", "))).into());
    }
    Ok(())
}
