//! Corner-case generation: joint-objective gradient ascent with constraint
//! projection, divergence detection, and campaign orchestration.
//!
//! The joint objective for a seed with consensus class `c` and deviating
//! model `j` is
//!
//! ```text
//! sum_{i != j} F_i(x)[c]  -  lambda1 * F_j(x)[c]  +  lambda2 * f_n(x)
//! ```
//!
//! where `f_n` is the currently targeted uncovered neuron. Gradients flow
//! independently through each model and are summed; the raw perturbation
//! is projected onto the configured transformation family, applied, and
//! the image clamped back into [0, 1].

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{neuron_activations, neuron_objective, CoverageMap, NeuronId};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Objective};
use crate::tensor::Tensor;
use crate::transforms::{apply, constrain_gradient, ConstraintFamily, TransformSpec};
use crate::zoo::ModelEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviatingPolicy {
    /// Push the model least confident in the consensus class.
    LeastConfident,
    /// Rotate the pushed model with the seed index.
    RoundRobin,
}

/// All hyperparameters of one generation run.
#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub step: f64,
    pub threshold: f64,
    pub max_iters: usize,
    pub family: ConstraintFamily,
    pub policy: DeviatingPolicy,
    /// Ensemble member whose uncovered neurons the coverage term targets.
    pub coverage_model: usize,
    pub rng_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            lambda1: 2.5,
            lambda2: 2.0,
            step: 10.0,
            threshold: 0.0,
            max_iters: 200,
            family: ConstraintFamily::Light,
            policy: DeviatingPolicy::LeastConfident,
            coverage_model: 0,
            rng_seed: 7,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = self.lambda1.is_finite()
            && self.lambda2.is_finite()
            && self.step.is_finite()
            && self.threshold.is_finite();
        if !finite {
            return Err(Error::usage("generation config has non-finite fields"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::usage("lambda1 and lambda2 must be nonnegative"));
        }
        if self.step <= 0.0 {
            return Err(Error::usage("step must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::usage("threshold must lie in [0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(Error::usage("max_iters must be at least 1"));
        }
        if self.coverage_model >= 3 {
            return Err(Error::usage("coverage_model must index one of 3 models"));
        }
        Ok(())
    }
}

/// A registered error-inducing input.
#[derive(Debug, Clone)]
pub struct CornerCase {
    /// Final image, quantized to the 8-bit pixel grid it is stored on.
    pub image: Tensor,
    pub seed_id: usize,
    pub original_label: usize,
    /// Per-model predicted labels on `image`.
    pub labels: Vec<usize>,
    /// Per-model probability vectors on `image`.
    pub probabilities: Vec<Tensor>,
    /// Members whose label differs from the majority (all three under a
    /// three-way split).
    pub deviating: Vec<usize>,
    /// The model `j` the differential objective pushed away.
    pub pushed_model: usize,
    pub iterations: usize,
    pub trail: Vec<TransformSpec>,
    /// Joint objective value at registration.
    pub objective: f64,
}

/// Eq. (1): `sum_{i != j} F_i(x)[c] - lambda1 * F_j(x)[c]`.
pub fn obj_differential(
    prob_vectors: &[Tensor],
    class: usize,
    pushed: usize,
    lambda1: f64,
) -> Result<f64> {
    if pushed >= prob_vectors.len() {
        return Err(Error::usage(format!("model index {pushed} out of range")));
    }
    let mut value = 0.0;
    for (i, probs) in prob_vectors.iter().enumerate() {
        let p = *probs
            .data()
            .get(class)
            .ok_or_else(|| Error::usage(format!("class {class} out of range")))?;
        if i == pushed {
            value -= lambda1 * p;
        } else {
            value += p;
        }
    }
    Ok(value)
}

/// Eq. (3): the differential term plus `lambda2 * f_n(x)`.
pub fn obj_joint(obj1: f64, neuron_value: f64, lambda2: f64) -> f64 {
    obj1 + lambda2 * neuron_value
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// Minority members; all three when every label differs.
    pub deviating: Vec<usize>,
    /// The shared label, absent under a three-way split.
    pub majority: Option<usize>,
}

/// `None` iff all three labels agree.
pub fn detect_divergence(labels: &[usize]) -> Result<Option<Divergence>> {
    let [a, b, c] = match labels {
        [a, b, c] => [*a, *b, *c],
        other => {
            return Err(Error::usage(format!(
                "expected exactly three labels, got {}",
                other.len()
            )))
        }
    };
    Ok(if a == b && b == c {
        None
    } else if a == b {
        Some(Divergence {
            deviating: vec![2],
            majority: Some(a),
        })
    } else if a == c {
        Some(Divergence {
            deviating: vec![1],
            majority: Some(a),
        })
    } else if b == c {
        Some(Divergence {
            deviating: vec![0],
            majority: Some(b),
        })
    } else {
        Some(Divergence {
            deviating: vec![0, 1, 2],
            majority: None,
        })
    })
}

/// Coverage maps for every ensemble member. The reported ratio is the
/// mean across members; neuron targeting uses the configured member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCoverage {
    pub maps: Vec<CoverageMap>,
}

impl EnsembleCoverage {
    pub fn for_ensemble(ensemble: &ModelEnsemble, threshold: f64) -> Result<Self> {
        Ok(EnsembleCoverage {
            maps: ensemble
                .models()
                .iter()
                .map(|m| CoverageMap::for_model(&m.spec, threshold))
                .collect::<Result<_>>()?,
        })
    }

    fn update_from(&mut self, ensemble: &ModelEnsemble, passes: &[ForwardPass]) -> Result<usize> {
        let mut newly = 0;
        for ((map, model), pass) in self.maps.iter_mut().zip(ensemble.models()).zip(passes) {
            let values = neuron_activations(&model.spec, &pass.activations)?;
            newly += map.update(&values)?;
        }
        Ok(newly)
    }

    pub fn average_ratio(&self) -> f64 {
        if self.maps.is_empty() {
            return 0.0;
        }
        self.maps.iter().map(|m| m.ratio()).sum::<f64>() / self.maps.len() as f64
    }

    pub fn per_model_ratios(&self) -> Vec<f64> {
        self.maps.iter().map(|m| m.ratio()).collect()
    }

    pub fn merge(&mut self, other: &EnsembleCoverage) -> Result<()> {
        if other.maps.len() != self.maps.len() {
            return Err(Error::usage("coverage member count mismatch"));
        }
        for (a, b) in self.maps.iter_mut().zip(&other.maps) {
            a.merge(b)?;
        }
        Ok(())
    }
}

/// Snaps pixels to the 8-bit grid they are stored on.
pub fn quantize01(image: &Tensor) -> Tensor {
    image.map(|v| (v * 255.0).round() / 255.0)
}

fn forward_all(ensemble: &ModelEnsemble, x: &Tensor) -> Result<Vec<ForwardPass>> {
    ensemble.models().iter().map(|m| m.forward(x)).collect()
}

fn labels_of(passes: &[ForwardPass]) -> Vec<usize> {
    passes.iter().map(|p| p.output.argmax()).collect()
}

/// Runs the joint-objective ascent from one seed. Returns `None` when
/// the iteration budget runs out without a registered divergence.
///
/// The ascent operates on real-valued pixels; registration quantizes the
/// candidate to the 8-bit grid and re-checks divergence there, so every
/// stored corner case replays exactly from its image file.
pub fn generate_from_seed(
    ensemble: &ModelEnsemble,
    seed_id: usize,
    seed_image: &Tensor,
    original_label: usize,
    config: &GenerationConfig,
    coverage: &mut EnsembleCoverage,
    rng: &mut ChaCha8Rng,
) -> Result<Option<CornerCase>> {
    config.validate()?;
    let n_classes = ensemble.n_classes();
    let mut current = quantize01(seed_image);
    let mut passes = forward_all(ensemble, &current)?;
    coverage.update_from(ensemble, &passes)?;
    let labels = labels_of(&passes);

    let consensus = match detect_divergence(&labels)? {
        Some(div) => {
            // The seed itself already splits the ensemble.
            let pushed = div.deviating[0];
            let objective = obj_differential(
                &passes.iter().map(|p| p.output.clone()).collect::<Vec<_>>(),
                div.majority.unwrap_or(original_label),
                pushed,
                config.lambda1,
            )?;
            return Ok(Some(CornerCase {
                image: current,
                seed_id,
                original_label,
                labels,
                probabilities: passes.into_iter().map(|p| p.output).collect(),
                deviating: div.deviating,
                pushed_model: pushed,
                iterations: 0,
                trail: Vec::new(),
                objective,
            }));
        }
        None => labels[0],
    };

    let pushed = match config.policy {
        DeviatingPolicy::LeastConfident => {
            let mut best = 0;
            for i in 1..passes.len() {
                if passes[i].output.data()[consensus] < passes[best].output.data()[consensus] {
                    best = i;
                }
            }
            best
        }
        DeviatingPolicy::RoundRobin => seed_id % 3,
    };

    let coverage_enabled = config.lambda2 > 0.0;
    let mut target: Option<NeuronId> = if coverage_enabled {
        coverage.maps[config.coverage_model].select_uncovered(rng)
    } else {
        None
    };
    let mut trail = Vec::new();

    for iter in 1..=config.max_iters {
        // d(obj_joint)/d(image): per-model class terms plus the targeted
        // neuron's raw activation through its owning model.
        let mut grad = Tensor::zeros(current.shape());
        for (i, model) in ensemble.models().iter().enumerate() {
            let coef = if i == pushed { -config.lambda1 } else { 1.0 };
            let mut objective = Objective::class_score(n_classes, consensus, coef);
            if let (true, Some(id)) = (i == config.coverage_model, target) {
                let neuron = neuron_objective(&model.spec, id, config.lambda2)?;
                objective.wrt_activations = neuron.wrt_activations;
            }
            grad.add_scaled(&model.input_gradient_from(&current, &passes[i], &objective)?, 1.0)?;
        }

        let spec = constrain_gradient(&grad, &current, &config.family, config.step, rng)?;
        current = apply(&current, &spec)?;
        trail.push(spec);

        passes = forward_all(ensemble, &current)?;
        coverage.update_from(ensemble, &passes)?;
        if let Some(id) = target {
            if coverage.maps[config.coverage_model].is_activated(id) {
                target = coverage.maps[config.coverage_model].select_uncovered(rng);
            }
        }

        if detect_divergence(&labels_of(&passes))?.is_some() {
            // Re-check on the stored pixel grid before registering.
            let quantized = quantize01(&current);
            let qpasses = forward_all(ensemble, &quantized)?;
            let qlabels = labels_of(&qpasses);
            if let Some(div) = detect_divergence(&qlabels)? {
                let probs: Vec<Tensor> = qpasses.iter().map(|p| p.output.clone()).collect();
                let obj1 = obj_differential(&probs, consensus, pushed, config.lambda1)?;
                let neuron_value = match target {
                    Some(id) => neuron_activations(
                        &ensemble.models()[config.coverage_model].spec,
                        &qpasses[config.coverage_model].activations,
                    )?
                    .get(id)
                    .unwrap_or(0.0),
                    None => 0.0,
                };
                return Ok(Some(CornerCase {
                    image: quantized,
                    seed_id,
                    original_label,
                    labels: qlabels,
                    probabilities: probs,
                    deviating: div.deviating,
                    pushed_model: pushed,
                    iterations: iter,
                    trail,
                    objective: obj_joint(obj1, neuron_value, config.lambda2),
                }));
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignStats {
    pub seeds: usize,
    pub corner_cases: usize,
    /// `None` when there were no seeds.
    pub conversion_rate: Option<f64>,
    /// Mean coverage ratio across the three members.
    pub coverage_ratio: f64,
    pub per_model_coverage: Vec<f64>,
    /// Ascent iterations per seed; `None` when the budget ran out.
    pub per_seed_iterations: Vec<Option<usize>>,
    /// Wall-clock milliseconds to each seed's divergence, where one occurred.
    pub first_divergence_ms: Vec<Option<f64>>,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub corpus: Vec<CornerCase>,
    pub coverage: EnsembleCoverage,
    pub stats: CampaignStats,
}

/// Processes seeds over a worker pool.
///
/// Seeds are statically partitioned round-robin (seed `i` goes to worker
/// `i mod workers`); each worker accumulates coverage privately across
/// its seeds and the maps merge at the end, so a run is deterministic
/// for a fixed `(config, workers)`. The corpus is ordered by seed index
/// regardless of scheduling.
pub fn run_campaign(
    ensemble: &ModelEnsemble,
    seeds: &[(Tensor, usize)],
    config: &GenerationConfig,
    workers: usize,
) -> Result<CampaignResult> {
    config.validate()?;
    let started = std::time::Instant::now();
    let workers = workers.max(1).min(seeds.len().max(1));

    type SeedOutcome = (usize, Option<CornerCase>, Option<f64>);
    let run_worker = |worker: usize| -> Result<(EnsembleCoverage, Vec<SeedOutcome>)> {
        let mut coverage = EnsembleCoverage::for_ensemble(ensemble, config.threshold)?;
        let mut outcomes = Vec::new();
        for (index, (image, label)) in seeds.iter().enumerate() {
            if index % workers != worker {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(
                config.rng_seed,
                0x5eed_0000 + index as u64,
            ));
            let t0 = std::time::Instant::now();
            let case = generate_from_seed(
                ensemble,
                index,
                image,
                *label,
                config,
                &mut coverage,
                &mut rng,
            )?;
            let ms = case
                .as_ref()
                .map(|_| t0.elapsed().as_secs_f64() * 1e3);
            outcomes.push((index, case, ms));
        }
        Ok((coverage, outcomes))
    };

    let results: Vec<Result<(EnsembleCoverage, Vec<SeedOutcome>)>> = if workers == 1 {
        vec![run_worker(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| scope.spawn(move || run_worker(w)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("campaign worker panicked"))
                .collect()
        })
    };

    let mut coverage = EnsembleCoverage::for_ensemble(ensemble, config.threshold)?;
    let mut per_seed: Vec<(Option<CornerCase>, Option<f64>)> = Vec::new();
    per_seed.resize_with(seeds.len(), || (None, None));
    for result in results {
        let (worker_coverage, outcomes) = result?;
        coverage.merge(&worker_coverage)?;
        for (index, case, ms) in outcomes {
            per_seed[index] = (case, ms);
        }
    }

    let mut corpus = Vec::new();
    let mut per_seed_iterations = Vec::with_capacity(seeds.len());
    let mut first_divergence_ms = Vec::with_capacity(seeds.len());
    for (case, ms) in per_seed {
        per_seed_iterations.push(case.as_ref().map(|c| c.iterations));
        first_divergence_ms.push(ms);
        if let Some(case) = case {
            corpus.push(case);
        }
    }

    let stats = CampaignStats {
        seeds: seeds.len(),
        corner_cases: corpus.len(),
        conversion_rate: if seeds.is_empty() {
            None
        } else {
            Some(corpus.len() as f64 / seeds.len() as f64)
        },
        coverage_ratio: coverage.average_ratio(),
        per_model_coverage: coverage.per_model_ratios(),
        per_seed_iterations,
        first_divergence_ms,
        total_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(CampaignResult {
        corpus,
        coverage,
        stats,
    })
}

/// Wall-clock milliseconds until the first difference-inducing input,
/// scanning seeds sequentially on one worker; `None` if no seed diverges
/// within budget. This is the sweep measurand.
pub fn time_to_first_divergence(
    ensemble: &ModelEnsemble,
    seeds: &[(Tensor, usize)],
    config: &GenerationConfig,
) -> Result<Option<f64>> {
    config.validate()?;
    let started = std::time::Instant::now();
    let mut coverage = EnsembleCoverage::for_ensemble(ensemble, config.threshold)?;
    for (index, (image, label)) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(
            config.rng_seed,
            0x5eed_0000 + index as u64,
        ));
        let case = generate_from_seed(
            ensemble,
            index,
            image,
            *label,
            config,
            &mut coverage,
            &mut rng,
        )?;
        if case.is_some() {
            return Ok(Some(started.elapsed().as_secs_f64() * 1e3));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------
// Corpus directory
// ---------------------------------------------------------------------

/// One line of `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub seed_id: usize,
    pub original_label: usize,
    pub labels: Vec<usize>,
    pub deviating: Vec<usize>,
    pub iterations: usize,
    pub constraint: String,
    pub objective: f64,
    pub image_file: String,
}

/// Writes one PNG per corner case plus `corpus.jsonl`, ordered by seed.
pub fn write_corpus(dir: &Path, corpus: &[CornerCase], constraint: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut jsonl = String::new();
    for case in corpus {
        let image_file = format!("case_{:05}.png", case.seed_id);
        write_png(&dir.join(&image_file), &case.image)?;
        let record = CorpusRecord {
            seed_id: case.seed_id,
            original_label: case.original_label,
            labels: case.labels.clone(),
            deviating: case.deviating.clone(),
            iterations: case.iterations,
            constraint: constraint.to_string(),
            objective: case.objective,
            image_file,
        };
        jsonl.push_str(&serde_json::to_string(&record).expect("corpus record serializes"));
        jsonl.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    fs::write(&path, jsonl).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a corpus directory back: records paired with their images.
pub fn read_corpus(dir: &Path) -> Result<Vec<(CorpusRecord, Tensor)>> {
    let path = dir.join("corpus.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| {
            Error::CorruptRecord(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let image = read_png(&dir.join(&record.image_file))?;
        out.push((record, image));
    }
    Ok(out)
}

/// 8-bit PNG with `round(255 * pixel)` values; grayscale for C=1, RGB
/// for C=3.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match image.shape() {
        [h, w, 1] => {
            let buf: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
            let img = image::GrayImage::from_raw(*w as u32, *h as u32, buf)
                .expect("buffer sized from shape");
            img.save(path)
                .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))
        }
        [h, w, 3] => {
            let buf: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
            let img = image::RgbImage::from_raw(*w as u32, *h as u32, buf)
                .expect("buffer sized from shape");
            img.save(path)
                .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))
        }
        other => Err(Error::usage(format!(
            "PNG output expects (H, W, 1) or (H, W, 3) images, got {other:?}"
        ))),
    }
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Tensor::from_fn(&[h, w, 1], |i| {
                g.get_pixel((i % w) as u32, (i / w) as u32)[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Tensor::from_fn(&[h, w, 3], |i| {
                let c = i % 3;
                let x = (i / 3) % w;
                let y = i / (3 * w);
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
    })
}
