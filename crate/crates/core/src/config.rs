//! Run configuration, the flat key-value config file, and run manifests.
//!
//! Precedence: built-in defaults, then the config file, then CLI flags.
//! The manifest written beside every run's outputs records the effective
//! config plus content hashes of all file inputs, so a run can be
//! replayed exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetFormat;
use crate::error::{Error, Result};
use crate::generator::{DeviatingPolicy, GenerationConfig};
use crate::transforms::{load_overlay, ConstraintFamily, DotColor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    // Dataset
    pub dataset: Option<PathBuf>,
    pub format: String,
    pub synthetic_train: usize,
    pub synthetic_test: usize,

    // Models and training
    pub models: Vec<String>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,

    // Generation
    pub lambda1: f64,
    pub lambda2: f64,
    pub step: f64,
    pub threshold: f64,
    pub max_iters: usize,
    pub constraint: String,
    pub policy: String,
    pub coverage_model: usize,
    pub seeds: usize,
    pub workers: usize,
    pub rng_seed: u64,

    // Occlusion family knobs
    pub occl_width: usize,
    pub occl_height: usize,
    pub dots_count: usize,
    pub dots_color: String,

    // Retraining
    pub retrain_epochs: usize,
    pub control: String,

    // Sweeps
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub seed_counts: Vec<usize>,
    pub reps: usize,

    // IO
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            format: "builtin_synthetic".into(),
            synthetic_train: 2400,
            synthetic_test: 600,
            models: vec!["lenet1".into(), "lenet4".into(), "lenet5".into()],
            epochs: 8,
            learning_rate: 0.05,
            batch_size: 32,
            lambda1: 2.5,
            lambda2: 2.0,
            step: 10.0,
            threshold: 0.0,
            max_iters: 200,
            constraint: "light".into(),
            policy: "least_confident".into(),
            coverage_model: 0,
            seeds: 100,
            workers: 1,
            rng_seed: 7,
            occl_width: 8,
            occl_height: 8,
            dots_count: 10,
            dots_color: "black".into(),
            retrain_epochs: 4,
            control: "both".into(),
            lambda1_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
            lambda2_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
            threshold_grid: vec![0.001, 0.01, 0.05, 0.1, 0.5, 0.99, 1.0],
            seed_counts: vec![10, 20, 30, 100],
            reps: 10,
            out: PathBuf::from("runs/out"),
            weights: None,
        }
    }
}

impl RunConfig {
    /// Loads a flat `key = value` file; `#` starts a comment, blank lines
    /// are ignored. Unknown keys are config errors.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Sets one option by its config-file key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(|v| num(key, v.trim()))
                .collect()
        }
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "format" => self.format = value.into(),
            "synthetic_train" => self.synthetic_train = num(key, value)?,
            "synthetic_test" => self.synthetic_test = num(key, value)?,
            "models" => self.models = value.split(',').map(|s| s.trim().to_string()).collect(),
            "epochs" => self.epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "step" => self.step = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "constraint" => self.constraint = value.into(),
            "policy" => self.policy = value.into(),
            "coverage_model" => self.coverage_model = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "rng_seed" => self.rng_seed = num(key, value)?,
            "occl_width" => self.occl_width = num(key, value)?,
            "occl_height" => self.occl_height = num(key, value)?,
            "dots_count" => self.dots_count = num(key, value)?,
            "dots_color" => self.dots_color = value.into(),
            "retrain_epochs" => self.retrain_epochs = num(key, value)?,
            "control" => self.control = value.into(),
            "lambda1_grid" => self.lambda1_grid = list(key, value)?,
            "lambda2_grid" => self.lambda2_grid = list(key, value)?,
            "threshold_grid" => self.threshold_grid = list(key, value)?,
            "seed_counts" => self.seed_counts = list(key, value)?,
            "reps" => self.reps = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "weights" => self.weights = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn dataset_format(&self) -> Result<DatasetFormat> {
        match self.format.as_str() {
            "idx" => Ok(DatasetFormat::Idx),
            "image_dir_csv" => Ok(DatasetFormat::ImageDirCsv),
            "builtin_synthetic" => Ok(DatasetFormat::BuiltinSynthetic {
                train: self.synthetic_train,
                test: self.synthetic_test,
                seed: crate::seeds::derive(self.rng_seed, 0xda7a),
            }),
            other => Err(Error::Config(format!(
                "unknown dataset format '{other}' (expected idx, image_dir_csv or builtin_synthetic)"
            ))),
        }
    }

    pub fn dataset_path(&self) -> Result<PathBuf> {
        match (&self.dataset, self.format.as_str()) {
            (_, "builtin_synthetic") => Ok(self.dataset.clone().unwrap_or_default()),
            (Some(p), _) => Ok(p.clone()),
            (None, _) => Err(Error::Config("--dataset is required for this format".into())),
        }
    }

    /// Builds the constraint family, loading overlay assets relative to
    /// the current directory when `constraint` is `overlay:<path>`.
    pub fn constraint_family(&self, image_shape: &[usize]) -> Result<ConstraintFamily> {
        let dots_color = match self.dots_color.as_str() {
            "black" => DotColor::Black,
            "white" => DotColor::White,
            other => return Err(Error::Config(format!("unknown dot color '{other}'"))),
        };
        Ok(match self.constraint.as_str() {
            "light" => ConstraintFamily::Light,
            "contrast" => ConstraintFamily::Contrast,
            "affine" => ConstraintFamily::Affine,
            "blur" => ConstraintFamily::Blur,
            "occl_rect" => ConstraintFamily::OcclRect {
                width: self.occl_width,
                height: self.occl_height,
            },
            "occl_dots" => ConstraintFamily::OcclDots {
                count: self.dots_count,
                color: dots_color,
            },
            other => match other.strip_prefix("overlay:") {
                Some(mask) => ConstraintFamily::Overlay {
                    asset: load_overlay(Path::new(mask), image_shape)?,
                },
                None => {
                    return Err(Error::Config(format!(
                        "unknown constraint '{other}' (expected light, contrast, affine, blur, occl_rect, occl_dots or overlay:<mask>)"
                    )))
                }
            },
        })
    }

    pub fn generation_config(&self, image_shape: &[usize]) -> Result<GenerationConfig> {
        let policy = match self.policy.as_str() {
            "least_confident" => DeviatingPolicy::LeastConfident,
            "round_robin" => DeviatingPolicy::RoundRobin,
            other => return Err(Error::Config(format!("unknown policy '{other}'"))),
        };
        let config = GenerationConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            step: self.step,
            threshold: self.threshold,
            max_iters: self.max_iters,
            family: self.constraint_family(image_shape)?,
            policy,
            coverage_model: self.coverage_model,
            rng_seed: self.rng_seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_options(&self) -> crate::model::TrainOptions {
        crate::model::TrainOptions {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            rng_seed: self.rng_seed,
        }
    }
}

/// Content hash in git's blob style (`sha256("blob {len}\0" + bytes)`).
pub fn content_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(content_hash(&bytes))
}

/// Hashes a file, or every file under a directory (sorted paths).
pub fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for path in paths {
        if path.as_os_str().is_empty() {
            continue;
        }
        if path.is_dir() {
            let mut files = Vec::new();
            collect_files(path, &mut files)?;
            files.sort();
            for file in files {
                out.insert(file.display().to_string(), hash_file(&file)?);
            }
        } else if path.is_file() {
            out.insert(path.display().to_string(), hash_file(path)?);
        }
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Written beside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    /// Input path -> content hash, for replay verification.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: RunConfig, inputs: BTreeMap<String, String>) -> Manifest {
        Manifest {
            tool: "deeprobe".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            inputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))
    }

    /// Verifies that every recorded input still hashes to the same value.
    pub fn verify_inputs(&self) -> Result<()> {
        for (path, expected) in &self.inputs {
            let actual = hash_file(Path::new(path))?;
            if &actual != expected {
                return Err(Error::Config(format!(
                    "input {path} changed since the manifest was written"
                )));
            }
        }
        Ok(())
    }
}
