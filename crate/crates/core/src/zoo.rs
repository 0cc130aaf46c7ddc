//! The three LeNet-style reference architectures and ensemble training.
//!
//! LeNet-1 is the smallest: one conv/pool stage and no hidden dense layer.
//! LeNet-4 adds a second conv/pool stage and one hidden dense layer of 84
//! units; LeNet-5 widens the first stage and uses two hidden dense layers
//! (120 and 84).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{sgd_train, ModelSpec, TrainOptions, TrainedModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Lenet1,
    Lenet4,
    Lenet5,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [
        ModelVariant::Lenet1,
        ModelVariant::Lenet4,
        ModelVariant::Lenet5,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Lenet1 => "lenet1",
            ModelVariant::Lenet4 => "lenet4",
            ModelVariant::Lenet5 => "lenet5",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet1" => Ok(ModelVariant::Lenet1),
            "lenet4" => Ok(ModelVariant::Lenet4),
            "lenet5" => Ok(ModelVariant::Lenet5),
            other => Err(Error::usage(format!(
                "unknown model variant '{other}' (expected lenet1, lenet4 or lenet5)"
            ))),
        }
    }
}

/// Builds the layer stack for a variant on a given input shape.
/// Shape incompatibilities (input too small for the conv/pool stack)
/// surface here as construction errors.
pub fn build_variant(
    variant: ModelVariant,
    input_shape: &[usize],
    n_classes: usize,
) -> Result<ModelSpec> {
    let [h, w, c] = match input_shape {
        [h, w, c] => [*h, *w, *c],
        other => {
            return Err(Error::Construction(format!(
                "expected (H, W, C) input shape, got {other:?}"
            )))
        }
    };
    if h < 8 || w < 8 {
        return Err(Error::Construction(format!(
            "input {h}x{w} too small; variants need at least 8x8"
        )));
    }
    let conv = |ic: usize, oc: usize| LayerSpec::Conv2d {
        kernel_h: 5,
        kernel_w: 5,
        in_channels: ic,
        out_channels: oc,
    };
    let layers = match variant {
        ModelVariant::Lenet1 => {
            let fh = (h - 4) / 2;
            let fw = (w - 4) / 2;
            vec![
                conv(c, 4),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: fh * fw * 4,
                    output: n_classes,
                },
                LayerSpec::Softmax,
            ]
        }
        ModelVariant::Lenet4 => {
            let (fh, fw) = two_stage_output(h, w)?;
            vec![
                conv(c, 4),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                conv(4, 16),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: fh * fw * 16,
                    output: 84,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 84,
                    output: n_classes,
                },
                LayerSpec::Softmax,
            ]
        }
        ModelVariant::Lenet5 => {
            let (fh, fw) = two_stage_output(h, w)?;
            vec![
                conv(c, 6),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                conv(6, 16),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: fh * fw * 16,
                    output: 120,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 120,
                    output: 84,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 84,
                    output: n_classes,
                },
                LayerSpec::Softmax,
            ]
        }
    };
    let spec = ModelSpec {
        name: variant.name().into(),
        input_shape: input_shape.to_vec(),
        layers,
    };
    // Re-validate through the generic shape machinery.
    spec.layer_shapes()?;
    Ok(spec)
}

fn two_stage_output(h: usize, w: usize) -> Result<(usize, usize)> {
    // conv5 -> pool2 -> conv5 -> pool2, valid padding throughout.
    let stage = |n: usize| -> Result<usize> {
        let after1 = (n - 4) / 2;
        if after1 < 5 {
            return Err(Error::Construction(format!(
                "input dim {n} too small for a second 5x5 conv"
            )));
        }
        Ok((after1 - 4) / 2)
    };
    Ok((stage(h)?, stage(w)?))
}

/// Argmax prediction; ties go to the lowest class index.
pub fn predict_label(model: &TrainedModel, x: &Tensor) -> Result<(usize, Tensor)> {
    model.predict(x)
}

/// Exactly three trained models sharing input shape and class count.
#[derive(Debug, Clone)]
pub struct ModelEnsemble {
    models: Vec<TrainedModel>,
}

impl ModelEnsemble {
    pub fn new(models: Vec<TrainedModel>) -> Result<Self> {
        if models.len() != 3 {
            return Err(Error::usage(format!(
                "ensemble needs exactly 3 models, got {}",
                models.len()
            )));
        }
        let shape = models[0].spec.input_shape.clone();
        let classes = models[0].spec.n_classes()?;
        for m in &models[1..] {
            if m.spec.input_shape != shape {
                return Err(Error::usage("ensemble members disagree on input shape"));
            }
            if m.spec.n_classes()? != classes {
                return Err(Error::usage("ensemble members disagree on class count"));
            }
        }
        Ok(ModelEnsemble { models })
    }

    pub fn models(&self) -> &[TrainedModel] {
        &self.models
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.models[0].spec.input_shape
    }

    pub fn n_classes(&self) -> usize {
        self.models[0].spec.n_classes().expect("validated at construction")
    }

    /// Labels from all members for one input.
    pub fn predict_all(&self, x: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        self.models.iter().map(|m| m.predict(x)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_model: Vec<ModelAccuracy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub name: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn accuracy(model: &TrainedModel, set: &[(Tensor, usize)]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::usage("accuracy over an empty set is undefined"));
    }
    let mut correct = 0usize;
    for (x, label) in set {
        if model.predict(x)?.0 == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains the three variants on the same data. Each model gets its own
/// derived seed, so the run is deterministic end to end; models train in
/// parallel since they share nothing mutable.
pub fn train_ensemble(
    variants: &[ModelVariant],
    train: &[(Tensor, usize)],
    test: &[(Tensor, usize)],
    n_classes: usize,
    opts: &TrainOptions,
) -> Result<(ModelEnsemble, AccuracyReport)> {
    if variants.len() != 3 {
        return Err(Error::usage("train_ensemble expects exactly 3 variants"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::usage("train and test sets must be nonempty"));
    }
    let input_shape = train[0].0.shape().to_vec();
    let specs = variants
        .iter()
        .map(|v| build_variant(*v, &input_shape, n_classes))
        .collect::<Result<Vec<_>>>()?;

    let outcomes = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let opts = TrainOptions {
                    rng_seed: crate::seeds::derive(opts.rng_seed, 0x10 + i as u64),
                    ..opts.clone()
                };
                scope.spawn(move || sgd_train(spec, train, &opts))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Vec<_>>()
    });

    let mut models = Vec::with_capacity(3);
    let mut per_model = Vec::with_capacity(3);
    for outcome in outcomes {
        let outcome = outcome?;
        let test_accuracy = accuracy(&outcome.model, test)?;
        per_model.push(ModelAccuracy {
            name: outcome.model.spec.name.clone(),
            train_accuracy: outcome.train_accuracy,
            test_accuracy,
            epoch_losses: outcome.epoch_losses,
        });
        models.push(outcome.model);
    }
    Ok((ModelEnsemble::new(models)?, AccuracyReport { per_model }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet1_layer_kinds() {
        let spec = build_variant(ModelVariant::Lenet1, &[28, 28, 1], 10).unwrap();
        let kinds: Vec<&str> = spec.layers.iter().map(|l| l.kind_name()).collect();
        assert_eq!(
            kinds,
            ["conv2d", "relu", "maxpool2d", "flatten", "dense", "softmax"]
        );
        // No hidden dense layer: exactly one dense, and it is the output.
        assert_eq!(spec.output_shape().unwrap(), vec![10]);
    }

    #[test]
    fn lenet5_structure() {
        let spec = build_variant(ModelVariant::Lenet5, &[28, 28, 1], 10).unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| l.kind_name() == "conv2d")
            .count();
        let pools = spec
            .layers
            .iter()
            .filter(|l| l.kind_name() == "maxpool2d")
            .count();
        let denses = spec
            .layers
            .iter()
            .filter(|l| l.kind_name() == "dense")
            .count();
        assert_eq!((convs, pools, denses), (2, 2, 3)); // two hidden + output
        assert_eq!(spec.output_shape().unwrap(), vec![10]);
    }

    #[test]
    fn lenet4_has_one_hidden_dense() {
        let spec = build_variant(ModelVariant::Lenet4, &[28, 28, 1], 10).unwrap();
        let denses = spec
            .layers
            .iter()
            .filter(|l| l.kind_name() == "dense")
            .count();
        assert_eq!(denses, 2); // hidden 84 + output
    }

    #[test]
    fn tiny_input_is_construction_error() {
        assert!(build_variant(ModelVariant::Lenet1, &[4, 4, 1], 10).is_err());
        // 8x8 fits lenet1 but not the two-stage variants.
        assert!(build_variant(ModelVariant::Lenet1, &[8, 8, 1], 10).is_ok());
        assert!(build_variant(ModelVariant::Lenet5, &[8, 8, 1], 10).is_err());
    }

    #[test]
    fn predict_label_is_argmax_with_low_tie() {
        let spec = ModelSpec {
            name: "t".into(),
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { input: 2, output: 3 }],
        };
        let params = crate::model::Parameters {
            layers: vec![Some(crate::layers::LayerParams {
                weights: Tensor::new(vec![3, 2], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
                bias: Tensor::new(vec![3], vec![0.2, 0.0, 0.3]).unwrap(),
            })],
        };
        let model = TrainedModel { spec, params };
        // outputs [0.2, 0.5, 0.3] -> label 1
        let x = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let (label, probs) = predict_label(&model, &x).unwrap();
        assert_eq!(label, 1);
        assert!((probs.data()[1] - 0.5).abs() < 1e-12);
        // tie [0.5, 0.5, 0.0] -> label 0
        let params = crate::model::Parameters {
            layers: vec![Some(crate::layers::LayerParams {
                weights: Tensor::zeros(&[3, 2]),
                bias: Tensor::new(vec![3], vec![0.5, 0.5, 0.0]).unwrap(),
            })],
        };
        let model = TrainedModel {
            spec: model.spec,
            params,
        };
        let (label, _) = predict_label(&model, &x).unwrap();
        assert_eq!(label, 0);
    }
}
