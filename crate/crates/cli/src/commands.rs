//! Subcommand implementations. Every run writes a manifest (effective
//! config plus content hashes of file inputs) beside its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use deeprobe_core::augment::{
    build_control, from_corpus_records, retrain_and_eval, AugmentedSet, ControlKind,
    RetrainReport,
};
use deeprobe_core::config::{hash_inputs, Manifest, RunConfig};
use deeprobe_core::coverage::CoverageReport;
use deeprobe_core::dataset::{load_dataset, sample_seeds, LabeledSet};
use deeprobe_core::error::{Error, Result};
use deeprobe_core::generator::{read_corpus, run_campaign, write_corpus, CampaignStats};
use deeprobe_core::model::TrainOptions;
use deeprobe_core::sweep::{self, SweepReport};
use deeprobe_core::tensor::Tensor;
use deeprobe_core::zoo::{train_ensemble, ModelEnsemble, ModelVariant};
use deeprobe_core::{seeds, weights};

use crate::render;

/// Stream labels for derived RNG seeds, so independent stages never
/// share a stream.
const STREAM_SEED_SAMPLE: u64 = 0x5e1ec7;
const STREAM_RETRAIN: u64 = 0x2e72a1;
const STREAM_CONTROL1: u64 = 0xc0_0001;
const STREAM_CONTROL2: u64 = 0xc0_0002;

fn load_data(config: &RunConfig) -> Result<(LabeledSet, LabeledSet)> {
    let format = config.dataset_format()?;
    let path = config.dataset_path()?;
    load_dataset(&path, &format)
}

fn parse_variants(config: &RunConfig) -> Result<Vec<ModelVariant>> {
    config.models.iter().map(|s| s.parse()).collect()
}

fn load_ensemble(config: &RunConfig) -> Result<ModelEnsemble> {
    let dir = config.weights.clone().ok_or_else(|| {
        Error::Config("--weights <dir> with trained models is required".into())
    })?;
    let models = config
        .models
        .iter()
        .map(|name| weights::load(&dir.join(format!("{name}.dprb"))))
        .collect::<Result<Vec<_>>>()?;
    ModelEnsemble::new(models)
}

fn input_paths(config: &RunConfig) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    if config.format != "builtin_synthetic" {
        if let Some(dataset) = &config.dataset {
            paths.push(dataset.clone());
        }
    }
    if let Some(weights) = &config.weights {
        paths.push(weights.clone());
    }
    paths
}

fn write_manifest(command: &str, config: &RunConfig) -> Result<()> {
    let inputs = hash_inputs(&input_paths(config))?;
    let manifest = Manifest::new(command, config.clone(), inputs);
    fs::create_dir_all(&config.out).map_err(|e| Error::io(config.out.display().to_string(), e))?;
    manifest.write(&config.out.join("manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn train(config: RunConfig) -> Result<()> {
    let (train_set, test_set) = load_data(&config)?;
    let variants = parse_variants(&config)?;
    if variants.len() != 3 {
        return Err(Error::usage("exactly three model variants are required"));
    }
    let (ensemble, report) = train_ensemble(
        &variants,
        &train_set.items,
        &test_set.items,
        train_set.n_classes,
        &config.train_options(),
    )?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(config.out.display().to_string(), e))?;
    for model in ensemble.models() {
        weights::save(model, &config.out.join(format!("{}.dprb", model.spec.name)))?;
    }
    write_json(&config.out.join("train_report.json"), &report)?;
    write_manifest("train", &config)?;
    print!("{}", render::train_table(&report));
    println!("weights written to {}", config.out.display());
    Ok(())
}

/// What `generate` records beside the corpus so later stages can rebuild
/// the evaluation split.
#[derive(Debug, Serialize, Deserialize)]
pub struct SeedRecord {
    pub test_indices: Vec<usize>,
}

/// Coverage summary across the ensemble.
#[derive(Debug, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub average_ratio: f64,
    pub per_model: Vec<CoverageReport>,
}

pub fn generate(
    mut config: RunConfig,
    from_manifest: Option<&Path>,
    out_override: Option<PathBuf>,
) -> Result<()> {
    if let Some(path) = from_manifest {
        let manifest = Manifest::read(path)?;
        manifest.verify_inputs()?;
        config = manifest.config;
        if let Some(out) = out_override {
            config.out = out;
        }
    }
    let (_, test_set) = load_data(&config)?;
    let ensemble = load_ensemble(&config)?;
    let image_shape = test_set
        .image_shape()
        .ok_or_else(|| Error::usage("test set is empty"))?
        .to_vec();
    if ensemble.input_shape() != image_shape.as_slice() {
        return Err(Error::usage(format!(
            "models expect input {:?} but dataset provides {:?}",
            ensemble.input_shape(),
            image_shape
        )));
    }
    let (indices, seed_pairs) = sample_seeds(
        &test_set,
        config.seeds,
        seeds::derive(config.rng_seed, STREAM_SEED_SAMPLE),
    )?;
    let gen_config = config.generation_config(&image_shape)?;
    let result = run_campaign(&ensemble, &seed_pairs, &gen_config, config.workers)?;

    fs::create_dir_all(&config.out).map_err(|e| Error::io(config.out.display().to_string(), e))?;
    write_corpus(
        &config.out.join("corpus"),
        &result.corpus,
        &gen_config.family.name(),
    )?;
    let coverage = CoverageSummary {
        average_ratio: result.coverage.average_ratio(),
        per_model: result.coverage.maps.iter().map(|m| m.report()).collect(),
    };
    write_json(&config.out.join("coverage.json"), &coverage)?;
    write_json(&config.out.join("stats.json"), &result.stats)?;
    write_json(
        &config.out.join("seeds.json"),
        &SeedRecord {
            test_indices: indices,
        },
    )?;
    write_manifest("generate", &config)?;
    print!("{}", render::stats_table(&result.stats));
    println!("corpus written to {}", config.out.join("corpus").display());
    Ok(())
}

fn sweep_prelude(config: &RunConfig) -> Result<(ModelEnsemble, Vec<(Tensor, usize)>)> {
    let (_, test_set) = load_data(config)?;
    let ensemble = load_ensemble(config)?;
    let (_, seed_pairs) = sample_seeds(
        &test_set,
        config.seeds,
        seeds::derive(config.rng_seed, STREAM_SEED_SAMPLE),
    )?;
    Ok((ensemble, seed_pairs))
}

fn write_sweep(config: &RunConfig, name: &str, report: &SweepReport) -> Result<()> {
    let dir = config.out.join("reports");
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let csv_path = dir.join(format!("{name}.csv"));
    fs::write(&csv_path, report.to_csv())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let json_path = dir.join(format!("{name}.json"));
    fs::write(&json_path, report.to_json())
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    print!("{}", render::sweep_table(report));
    println!("reports written to {}", dir.display());
    Ok(())
}

pub fn sweep_lambda(config: RunConfig) -> Result<()> {
    let (ensemble, seed_pairs) = sweep_prelude(&config)?;
    let image_shape = seed_pairs[0].0.shape().to_vec();
    let base = config.generation_config(&image_shape)?;
    let report = sweep::sweep_lambda(
        &ensemble,
        &seed_pairs,
        &base,
        &config.lambda1_grid,
        &config.lambda2_grid,
        config.reps,
    )?;
    write_sweep(&config, "sweep_lambda", &report)?;
    write_manifest("sweep-lambda", &config)
}

pub fn sweep_threshold(config: RunConfig) -> Result<()> {
    let (ensemble, seed_pairs) = sweep_prelude(&config)?;
    let image_shape = seed_pairs[0].0.shape().to_vec();
    let base = config.generation_config(&image_shape)?;
    let report = sweep::sweep_threshold(
        &ensemble,
        &seed_pairs,
        &base,
        &config.threshold_grid,
        config.workers,
    )?;
    write_sweep(&config, "sweep_threshold", &report)?;
    write_manifest("sweep-threshold", &config)
}

pub fn sweep_seeds(config: RunConfig) -> Result<()> {
    let (_, test_set) = load_data(&config)?;
    let ensemble = load_ensemble(&config)?;
    let max_count = config.seed_counts.iter().copied().max().unwrap_or(0);
    let (_, seed_pool) = sample_seeds(
        &test_set,
        max_count.min(test_set.len()),
        seeds::derive(config.rng_seed, STREAM_SEED_SAMPLE),
    )?;
    let image_shape = test_set
        .image_shape()
        .ok_or_else(|| Error::usage("test set is empty"))?
        .to_vec();
    let base = config.generation_config(&image_shape)?;
    let report = sweep::sweep_seeds(
        &ensemble,
        &seed_pool,
        &base,
        &config.seed_counts,
        config.workers,
    )?;
    write_sweep(&config, "sweep_seeds", &report)?;
    write_manifest("sweep-seeds", &config)
}

/// Corpus strategy versus controls, under identical budgets. The
/// head-to-head columns are accuracies on the corner-case set, whichever
/// data each strategy retrained on.
#[derive(Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub strategies: Vec<StrategyOutcome>,
    pub corner_case_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy: String,
    /// Accuracies on this strategy's own augmented set and the test set.
    pub report: RetrainReport,
    /// Per-model accuracy on the corner-case set after this strategy's
    /// retraining.
    pub corner_after: Vec<f64>,
}

pub fn augment_retrain(config: RunConfig, corpus_dir: Option<PathBuf>) -> Result<()> {
    let corpus_dir = corpus_dir
        .ok_or_else(|| Error::Config("--corpus <generate output dir> is required".into()))?;
    let (train_set, test_set) = load_data(&config)?;
    let ensemble = load_ensemble(&config)?;

    let records = read_corpus(&corpus_dir.join("corpus"))?;
    if records.is_empty() {
        return Err(Error::usage("the corpus is empty; nothing to retrain on"));
    }
    let augmented = from_corpus_records(&records);

    // Seeds used for generation are excluded from the evaluation split.
    let seeds_path = corpus_dir.join("seeds.json");
    let eval_test: Vec<(Tensor, usize)> = if seeds_path.exists() {
        let text = fs::read_to_string(&seeds_path)
            .map_err(|e| Error::io(seeds_path.display().to_string(), e))?;
        let record: SeedRecord = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", seeds_path.display())))?;
        test_set
            .items
            .iter()
            .enumerate()
            .filter(|(i, _)| !record.test_indices.contains(i))
            .map(|(_, pair)| pair.clone())
            .collect()
    } else {
        eprintln!("warning: {} missing; evaluating on the full test set", seeds_path.display());
        test_set.items.clone()
    };

    let opts = TrainOptions {
        epochs: config.retrain_epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        rng_seed: seeds::derive(config.rng_seed, STREAM_RETRAIN),
    };

    if !matches!(
        config.control.as_str(),
        "none" | "random_original" | "random_transform" | "both"
    ) {
        return Err(Error::Config(format!(
            "unknown control '{}' (expected none, random_original, random_transform or both)",
            config.control
        )));
    }
    let corpus_pairs = augmented.as_pairs();
    let mut strategies = Vec::new();
    strategies.push(retrain_strategy(
        "corner_cases",
        &ensemble,
        &train_set,
        &augmented,
        &eval_test,
        &corpus_pairs,
        &opts,
    )?);
    if matches!(config.control.as_str(), "random_original" | "both") {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.rng_seed, STREAM_CONTROL1));
        let control =
            build_control(&ControlKind::RandomOriginal, augmented.len(), &test_set, &mut rng)?;
        strategies.push(retrain_strategy(
            "control_random_original",
            &ensemble,
            &train_set,
            &control,
            &eval_test,
            &corpus_pairs,
            &opts,
        )?);
    }
    if matches!(config.control.as_str(), "random_transform" | "both") {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.rng_seed, STREAM_CONTROL2));
        let control = build_control(
            &ControlKind::random_transform_default(),
            augmented.len(),
            &train_set,
            &mut rng,
        )?;
        strategies.push(retrain_strategy(
            "control_random_transform",
            &ensemble,
            &train_set,
            &control,
            &eval_test,
            &corpus_pairs,
            &opts,
        )?);
    }

    let comparison = ComparisonReport {
        strategies,
        corner_case_count: corpus_pairs.len(),
    };
    fs::create_dir_all(&config.out).map_err(|e| Error::io(config.out.display().to_string(), e))?;
    write_json(&config.out.join("retrain_report.json"), &comparison)?;
    write_manifest("augment-retrain", &config)?;
    print!("{}", render::comparison_table(&comparison));
    println!("report written to {}", config.out.join("retrain_report.json").display());
    Ok(())
}

fn retrain_strategy(
    name: &str,
    ensemble: &ModelEnsemble,
    train_set: &LabeledSet,
    augmented: &AugmentedSet,
    eval_test: &[(Tensor, usize)],
    corner_pairs: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<StrategyOutcome> {
    let (report, retrained) =
        retrain_and_eval(ensemble, &train_set.items, augmented, eval_test, opts)?;
    let corner_after = retrained
        .models()
        .iter()
        .map(|m| deeprobe_core::zoo::accuracy(m, corner_pairs))
        .collect::<Result<Vec<_>>>()?;
    Ok(StrategyOutcome {
        strategy: name.into(),
        report,
        corner_after,
    })
}

pub fn report(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;

    let rendered = if value.get("cells").is_some() {
        render::sweep_table(&SweepReport::from_json(&text)?)
    } else if value.get("strategies").is_some() {
        let report: ComparisonReport = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
        render::comparison_table(&report)
    } else if value.get("per_model").is_some() && value.get("augmented_size").is_some() {
        let report: RetrainReport = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
        render::retrain_table(&report)
    } else if value.get("average_ratio").is_some() {
        let report: CoverageSummary = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
        render::coverage_table(&report)
    } else if value.get("conversion_rate").is_some() {
        let stats: CampaignStats = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
        render::stats_table(&stats)
    } else if value.get("per_model").is_some() {
        let report: deeprobe_core::zoo::AccuracyReport = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
        render::train_table(&report)
    } else if value.get("tool").is_some() {
        format!("{text}\n")
    } else {
        return Err(Error::usage(format!(
            "{}: unrecognized report file",
            path.display()
        )));
    };
    print!("{rendered}");
    Ok(())
}
