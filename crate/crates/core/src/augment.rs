//! Augmenting retraining: builds training sets from generated corner
//! cases, retrains the ensemble on original + augmented data, and
//! measures the robustness gain against two control strategies.
//!
//! Augmented entries always carry the originating seed's original label,
//! never a majority vote over the ensemble — the vote is exactly what a
//! corner case shows to be unreliable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::generator::CornerCase;
use crate::model::{sgd_continue, TrainOptions};
use crate::tensor::Tensor;
use crate::transforms::{apply, rotation_scale_about, TransformSpec};
use crate::zoo::{accuracy, ModelEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    CornerCase,
    SeedAlreadyDiverged,
    ControlRandomOriginal,
    ControlRandomTransform,
}

#[derive(Debug, Clone)]
pub struct AugmentedEntry {
    pub image: Tensor,
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default)]
pub struct AugmentedSet {
    pub entries: Vec<AugmentedEntry>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn as_pairs(&self) -> Vec<(Tensor, usize)> {
        self.entries
            .iter()
            .map(|e| (e.image.clone(), e.label))
            .collect()
    }
}

/// One augmented entry per corner case, labeled with the seed's original
/// label.
pub fn build_augmented(corpus: &[CornerCase]) -> AugmentedSet {
    AugmentedSet {
        entries: corpus
            .iter()
            .map(|case| AugmentedEntry {
                image: case.image.clone(),
                label: case.original_label,
                provenance: if case.iterations == 0 {
                    Provenance::SeedAlreadyDiverged
                } else {
                    Provenance::CornerCase
                },
            })
            .collect(),
    }
}

/// The same mapping for a corpus loaded back from disk.
pub fn from_corpus_records(records: &[(crate::generator::CorpusRecord, Tensor)]) -> AugmentedSet {
    AugmentedSet {
        entries: records
            .iter()
            .map(|(record, image)| AugmentedEntry {
                image: image.clone(),
                label: record.original_label,
                provenance: if record.iterations == 0 {
                    Provenance::SeedAlreadyDiverged
                } else {
                    Provenance::CornerCase
                },
            })
            .collect(),
    }
}

/// Control strategies compared against the corner-case corpus.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlKind {
    /// Unchanged images sampled (without replacement) from the test set.
    RandomOriginal,
    /// Randomly perturbed training images; uniform rotation, shift and
    /// zoom over the given ranges.
    RandomTransform {
        rotation_max_deg: f64,
        shift_max_frac: f64,
        zoom_range: (f64, f64),
    },
}

impl ControlKind {
    pub fn random_transform_default() -> ControlKind {
        ControlKind::RandomTransform {
            rotation_max_deg: 15.0,
            shift_max_frac: 0.10,
            zoom_range: (0.9, 1.1),
        }
    }
}

pub fn build_control(
    kind: &ControlKind,
    size: usize,
    dataset: &LabeledSet,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedSet> {
    let mut entries = Vec::with_capacity(size);
    match kind {
        ControlKind::RandomOriginal => {
            if size > dataset.len() {
                return Err(Error::usage(format!(
                    "control size {size} exceeds the {} available test images",
                    dataset.len()
                )));
            }
            // Partial Fisher-Yates for a uniform sample without replacement.
            let mut indices: Vec<usize> = (0..dataset.len()).collect();
            for k in 0..size {
                let j = rng.gen_range(k..indices.len());
                indices.swap(k, j);
                let (image, label) = &dataset.items[indices[k]];
                entries.push(AugmentedEntry {
                    image: image.clone(),
                    label: *label,
                    provenance: Provenance::ControlRandomOriginal,
                });
            }
        }
        ControlKind::RandomTransform {
            rotation_max_deg,
            shift_max_frac,
            zoom_range,
        } => {
            if dataset.is_empty() {
                return Err(Error::usage("control needs a nonempty source dataset"));
            }
            for _ in 0..size {
                let (image, label) = &dataset.items[rng.gen_range(0..dataset.len())];
                let shape = image.shape();
                let (h, w) = (shape[0] as f64, shape[1] as f64);
                let theta = uniform_pm(rng, rotation_max_deg.to_radians());
                let tx = uniform_pm(rng, shift_max_frac * w);
                let ty = uniform_pm(rng, shift_max_frac * h);
                let zoom = if zoom_range.0 == zoom_range.1 {
                    zoom_range.0
                } else {
                    rng.gen_range(zoom_range.0..zoom_range.1)
                };
                let matrix = rotation_scale_about(
                    (w - 1.0) / 2.0,
                    (h - 1.0) / 2.0,
                    theta,
                    zoom,
                    tx,
                    ty,
                );
                entries.push(AugmentedEntry {
                    image: apply(image, &TransformSpec::Affine { matrix })?,
                    label: *label,
                    provenance: Provenance::ControlRandomTransform,
                });
            }
        }
    }
    Ok(AugmentedSet { entries })
}

fn uniform_pm(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.gen_range(-limit..limit)
    }
}

/// Accuracy on the augmented set and the original test set, before and
/// after retraining, per model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainReport {
    pub per_model: Vec<ModelRetrain>,
    pub train_size: usize,
    pub augmented_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRetrain {
    pub name: String,
    pub augmented_before: f64,
    pub augmented_after: f64,
    pub test_before: f64,
    pub test_after: f64,
    /// `(after - before) / before`, percent; absent when before is 0.
    pub relative_improvement_pct: Option<f64>,
}

pub fn relative_improvement_pct(before: f64, after: f64) -> Option<f64> {
    (before != 0.0).then(|| (after - before) / before * 100.0)
}

/// Retrains each member from its current weights on
/// `original_train + augmented` and reports the four accuracy figures.
/// The three models retrain in parallel.
pub fn retrain_and_eval(
    ensemble: &ModelEnsemble,
    original_train: &[(Tensor, usize)],
    augmented: &AugmentedSet,
    original_test: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<(RetrainReport, ModelEnsemble)> {
    if original_train.is_empty() || original_test.is_empty() || augmented.is_empty() {
        return Err(Error::usage("retraining needs nonempty train/test/augmented sets"));
    }
    let mut combined: Vec<(Tensor, usize)> = original_train.to_vec();
    combined.extend(augmented.as_pairs());
    // Never silently drop original training data.
    assert_eq!(combined.len(), original_train.len() + augmented.len());

    let augmented_pairs = augmented.as_pairs();
    let outcomes = std::thread::scope(|scope| {
        let handles: Vec<_> = ensemble
            .models()
            .iter()
            .map(|model| {
                let combined = &combined;
                let augmented_pairs = &augmented_pairs;
                let opts = opts.clone();
                scope.spawn(move || -> Result<(ModelRetrain, crate::model::TrainedModel)> {
                    let augmented_before = accuracy(model, augmented_pairs)?;
                    let test_before = accuracy(model, original_test)?;
                    let outcome = sgd_continue(model, combined, &opts)?;
                    let augmented_after = accuracy(&outcome.model, augmented_pairs)?;
                    let test_after = accuracy(&outcome.model, original_test)?;
                    Ok((
                        ModelRetrain {
                            name: model.spec.name.clone(),
                            augmented_before,
                            augmented_after,
                            test_before,
                            test_after,
                            relative_improvement_pct: relative_improvement_pct(
                                augmented_before,
                                augmented_after,
                            ),
                        },
                        outcome.model,
                    ))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("retraining thread panicked"))
            .collect::<Vec<_>>()
    });

    let mut per_model = Vec::with_capacity(3);
    let mut models = Vec::with_capacity(3);
    for outcome in outcomes {
        let (entry, model) = outcome?;
        per_model.push(entry);
        models.push(model);
    }
    Ok((
        RetrainReport {
            per_model,
            train_size: original_train.len(),
            augmented_size: augmented.len(),
        },
        ModelEnsemble::new(models)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_case(label: usize, iterations: usize) -> CornerCase {
        CornerCase {
            image: Tensor::filled(&[4, 4, 1], 0.5),
            seed_id: 0,
            original_label: label,
            labels: vec![0, 0, 1],
            probabilities: vec![],
            deviating: vec![2],
            pushed_model: 2,
            iterations,
            trail: vec![],
            objective: 0.0,
        }
    }

    #[test]
    fn empty_corpus_gives_empty_set() {
        assert!(build_augmented(&[]).is_empty());
    }

    #[test]
    fn labels_come_from_the_seed_not_the_vote() {
        // Majority predicted 0, but the seed's original label was 7:
        // the entry must carry 7.
        let case = tiny_case(7, 3);
        let set = build_augmented(&[case]);
        assert_eq!(set.entries[0].label, 7);
        assert_eq!(set.entries[0].provenance, Provenance::CornerCase);
    }

    #[test]
    fn entry_count_matches_corpus_and_zero_iter_is_tagged() {
        let corpus = vec![tiny_case(1, 0), tiny_case(2, 5), tiny_case(3, 1)];
        let set = build_augmented(&corpus);
        assert_eq!(set.len(), 3);
        assert_eq!(set.entries[0].provenance, Provenance::SeedAlreadyDiverged);
        assert_eq!(set.entries[1].provenance, Provenance::CornerCase);
    }

    fn small_set(n: usize) -> LabeledSet {
        // First pixel encodes the index, so every image is unique.
        LabeledSet {
            items: (0..n)
                .map(|i| {
                    let mut img = Tensor::from_fn(&[4, 4, 1], |k| ((i + k) % 7) as f64 / 7.0);
                    img.data_mut()[0] = i as f64 / n as f64;
                    (img, i % 2)
                })
                .collect(),
            n_classes: 2,
        }
    }

    #[test]
    fn control_size_zero_is_empty() {
        let data = small_set(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = build_control(&ControlKind::RandomOriginal, 0, &data, &mut rng).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn control_original_entries_are_bit_identical_sources() {
        let data = small_set(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = build_control(&ControlKind::RandomOriginal, 6, &data, &mut rng).unwrap();
        assert_eq!(set.len(), 6);
        for entry in &set.entries {
            assert!(data
                .items
                .iter()
                .any(|(img, l)| img == &entry.image && *l == entry.label));
        }
        // Without replacement: all entries distinct.
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                assert!(set.entries[i].image != set.entries[j].image || i == j);
            }
        }
    }

    #[test]
    fn control_size_exceeding_pool_is_error() {
        let data = small_set(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(build_control(&ControlKind::RandomOriginal, 4, &data, &mut rng).is_err());
    }

    #[test]
    fn degenerate_transform_ranges_copy_unchanged() {
        let data = small_set(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kind = ControlKind::RandomTransform {
            rotation_max_deg: 0.0,
            shift_max_frac: 0.0,
            zoom_range: (1.0, 1.0),
        };
        let set = build_control(&kind, 8, &data, &mut rng).unwrap();
        for entry in &set.entries {
            assert!(data.items.iter().any(|(img, _)| img == &entry.image));
        }
    }

    #[test]
    fn relative_improvement_matches_hand_arithmetic() {
        // (85.5 - 23.8) / 23.8 = 259.2%.
        let pct = relative_improvement_pct(0.238, 0.855).unwrap();
        assert!((pct - 259.2).abs() < 0.05, "got {pct}");
        assert_eq!(relative_improvement_pct(0.5, 0.5), Some(0.0));
        assert_eq!(relative_improvement_pct(0.0, 0.4), None);
    }

    #[test]
    fn zero_epochs_keeps_before_equal_after() {
        use crate::zoo::{train_ensemble, ModelVariant};
        let train = crate::dataset::synthetic_signs(120, 41);
        let test = crate::dataset::synthetic_signs(40, 42);
        let opts = TrainOptions {
            epochs: 1,
            ..TrainOptions::default()
        };
        let (ensemble, _) = train_ensemble(
            &ModelVariant::ALL,
            &train.items,
            &test.items,
            train.n_classes,
            &opts,
        )
        .unwrap();
        let augmented = AugmentedSet {
            entries: test.items[..10]
                .iter()
                .map(|(img, l)| AugmentedEntry {
                    image: img.clone(),
                    label: *l,
                    provenance: Provenance::ControlRandomOriginal,
                })
                .collect(),
        };
        let zero = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let (report, _) = retrain_and_eval(
            &ensemble,
            &train.items,
            &augmented,
            &test.items,
            &zero,
        )
        .unwrap();
        for m in &report.per_model {
            assert_eq!(m.augmented_before, m.augmented_after);
            assert_eq!(m.test_before, m.test_after);
        }
        assert_eq!(report.train_size + report.augmented_size, 130);
    }
}
