//! Model assembly: layer stacks, exact backpropagation, and SGD training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerParams, LayerSpec};
use crate::tensor::Tensor;

/// A layer-sequence description. Output shapes are fully determined by
/// `input_shape`, so shape errors surface at construction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Validates the stack and returns the output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for layer in &self.layers {
            current = layer.output_shape(&current)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes()?
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn n_classes(&self) -> Result<usize> {
        let out = self.output_shape()?;
        match out.as_slice() {
            [n] => Ok(*n),
            other => Err(Error::Construction(format!(
                "model output is not a class vector: {other:?}"
            ))),
        }
    }

    /// Glorot-uniform initialization: weights in [-s, s] with
    /// s = sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic per seed.
    pub fn init_params(&self, seed: u64) -> Result<Parameters> {
        self.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(match layer {
                LayerSpec::Dense { input, output } => {
                    let s = (6.0 / (input + output) as f64).sqrt();
                    let w = Tensor::from_fn(&[*output, *input], |_| rng.gen_range(-s..=s));
                    Some(LayerParams {
                        weights: w,
                        bias: Tensor::zeros(&[*output]),
                    })
                }
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_channels,
                } => {
                    let fan_in = in_channels * kernel_h * kernel_w;
                    let fan_out = out_channels * kernel_h * kernel_w;
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let w = Tensor::from_fn(
                        &[*out_channels, *in_channels, *kernel_h, *kernel_w],
                        |_| rng.gen_range(-s..=s),
                    );
                    Some(LayerParams {
                        weights: w,
                        bias: Tensor::zeros(&[*out_channels]),
                    })
                }
                _ => None,
            });
        }
        Ok(Parameters { layers })
    }
}

/// Per-layer weight/bias blocks, `None` for parameterless layers.
/// Also reused as the container for parameter gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub layers: Vec<Option<LayerParams>>,
}

impl Parameters {
    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| l.as_ref().map(LayerParams::zeros_like))
                .collect(),
        }
    }

    /// `self += scale * other`, blockwise.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::usage("parameter block count mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            match (a, b) {
                (Some(pa), Some(pb)) => {
                    pa.weights.add_scaled(&pb.weights, scale)?;
                    pa.bias.add_scaled(&pb.bias, scale)?;
                }
                (None, None) => {}
                _ => return Err(Error::usage("parameter block layout mismatch")),
            }
        }
        Ok(())
    }
}

/// A spec plus learned parameters. Immutable once trained; cheap to share
/// read-only across worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Parameters,
}

/// Output of one forward pass: final output plus every layer output in order.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    pub activations: Vec<Tensor>,
}

/// A linear functional over a model's outputs, used both to evaluate a
/// scalar objective and to seed backpropagation with its exact gradient.
///
/// `wrt_output` weights the final output elementwise; each
/// `wrt_activations` entry `(layer, g)` weights the recorded output of
/// `layers[layer]` elementwise.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    pub wrt_output: Option<Tensor>,
    pub wrt_activations: Vec<(usize, Tensor)>,
}

impl Objective {
    /// `coef * output[class]`.
    pub fn class_score(n_classes: usize, class: usize, coef: f64) -> Objective {
        let mut g = Tensor::zeros(&[n_classes]);
        g.data_mut()[class] = coef;
        Objective {
            wrt_output: Some(g),
            wrt_activations: Vec::new(),
        }
    }

    pub fn value(&self, pass: &ForwardPass) -> Result<f64> {
        let mut v = 0.0;
        if let Some(g) = &self.wrt_output {
            v += g.dot(&pass.output)?;
        }
        for (layer, g) in &self.wrt_activations {
            let act = pass
                .activations
                .get(*layer)
                .ok_or_else(|| Error::usage(format!("objective layer {layer} out of range")))?;
            v += g.dot(act)?;
        }
        Ok(v)
    }
}

impl TrainedModel {
    /// Runs the stack, recording every layer output. Pure: identical inputs
    /// produce identical outputs.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        if x.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        let mut activations = Vec::with_capacity(self.spec.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            current = layers::forward(layer, self.params.layers[i].as_ref(), &current)?;
            if !current.all_finite() {
                return Err(Error::NonFinite { layer: i });
            }
            activations.push(current.clone());
        }
        Ok(ForwardPass {
            output: current,
            activations,
        })
    }

    /// Exact gradient of a linear output functional with respect to the
    /// input, by reverse accumulation through every layer.
    pub fn input_gradient(&self, x: &Tensor, objective: &Objective) -> Result<Tensor> {
        let (grad, _) = self.backprop(x, objective, false)?;
        Ok(grad)
    }

    /// Same as [`input_gradient`](Self::input_gradient) but reuses an
    /// already-computed forward pass for `x`.
    pub fn input_gradient_from(
        &self,
        x: &Tensor,
        pass: &ForwardPass,
        objective: &Objective,
    ) -> Result<Tensor> {
        let (grad, _) = self.backprop_from(x, pass, objective, false)?;
        Ok(grad)
    }

    /// Shared backward pass. When `want_params` is set, parameter gradients
    /// are accumulated as well.
    fn backprop(
        &self,
        x: &Tensor,
        objective: &Objective,
        want_params: bool,
    ) -> Result<(Tensor, Option<Parameters>)> {
        let pass = self.forward(x)?;
        self.backprop_from(x, &pass, objective, want_params)
    }

    fn backprop_from(
        &self,
        x: &Tensor,
        pass: &ForwardPass,
        objective: &Objective,
        want_params: bool,
    ) -> Result<(Tensor, Option<Parameters>)> {
        let n = self.spec.layers.len();
        // Seed gradients at each layer output.
        let mut seeds: Vec<Option<Tensor>> = vec![None; n];
        if let Some(g) = &objective.wrt_output {
            if n == 0 {
                return Ok((g.clone(), None));
            }
            seeds[n - 1] = Some(g.clone());
        }
        for (layer, g) in &objective.wrt_activations {
            if *layer >= n {
                return Err(Error::usage(format!("objective layer {layer} out of range")));
            }
            match &mut seeds[*layer] {
                Some(s) => s.add_scaled(g, 1.0)?,
                slot => *slot = Some(g.clone()),
            }
        }

        let mut param_grads = want_params.then(|| self.params.zeros_like());
        let mut grad = seeds[n - 1]
            .take()
            .unwrap_or_else(|| Tensor::zeros(pass.activations[n - 1].shape()));
        for i in (0..n).rev() {
            let input = if i == 0 { x } else { &pass.activations[i - 1] };
            let (grad_in, layer_grads) = layers::backward(
                &self.spec.layers[i],
                self.params.layers[i].as_ref(),
                input,
                &pass.activations[i],
                &grad,
            )?;
            if !grad_in.all_finite() {
                return Err(Error::NonFinite { layer: i });
            }
            if let (Some(pg), Some(lg)) = (param_grads.as_mut(), layer_grads) {
                let block = pg.layers[i]
                    .as_mut()
                    .expect("parameterized layer has a gradient block");
                block.weights.add_scaled(&lg.weights, 1.0)?;
                block.bias.add_scaled(&lg.bias, 1.0)?;
            }
            grad = grad_in;
            if i > 0 {
                if let Some(seed) = seeds[i - 1].take() {
                    grad.add_scaled(&seed, 1.0)?;
                }
            }
        }
        Ok((grad, param_grads))
    }

    /// Mean cross-entropy over a batch plus gradients for every parameter.
    pub fn parameter_gradients(&self, batch: &[(Tensor, usize)]) -> Result<(Parameters, f64)> {
        if batch.is_empty() {
            return Err(Error::usage("parameter_gradients requires a nonempty batch"));
        }
        let n_classes = self.spec.n_classes()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = self.params.zeros_like();
        let mut loss = 0.0;
        for (image, label) in batch {
            if *label >= n_classes {
                return Err(Error::usage(format!(
                    "label {label} out of range for {n_classes} classes"
                )));
            }
            let pass = self.forward(image)?;
            let p = pass.output.data()[*label].max(1e-12);
            loss -= scale * p.ln();
            // d(-log p[label])/d(output) seeded through the softmax layer.
            let mut g = Tensor::zeros(&[n_classes]);
            g.data_mut()[*label] = -scale / p;
            let objective = Objective {
                wrt_output: Some(g),
                wrt_activations: Vec::new(),
            };
            let (_, grads) = self.backprop_from(image, &pass, &objective, true)?;
            total.add_scaled(&grads.expect("requested parameter gradients"), 1.0)?;
        }
        Ok((total, loss))
    }

    /// Predicted class (argmax, lowest index on ties) plus probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, Tensor)> {
        let pass = self.forward(x)?;
        Ok((pass.output.argmax(), pass.output))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 8,
            learning_rate: 0.05,
            batch_size: 32,
            rng_seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Plain minibatch SGD from a seeded Glorot init. Deterministic per seed:
/// two runs with the same seed produce bit-identical parameters.
pub fn sgd_train(
    spec: &ModelSpec,
    dataset: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let params = spec.init_params(crate::seeds::derive(opts.rng_seed, 0))?;
    let model = TrainedModel {
        spec: spec.clone(),
        params,
    };
    sgd_continue(&model, dataset, opts)
}

/// The same SGD loop, continuing from a model's current weights.
pub fn sgd_continue(
    start: &TrainedModel,
    dataset: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::usage("sgd_train requires a nonempty dataset"));
    }
    if opts.learning_rate <= 0.0 {
        return Err(Error::usage("learning_rate must be positive"));
    }
    let batch_size = opts.batch_size.max(1);
    let mut model = start.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(opts.rng_seed, 1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut batch = Vec::with_capacity(batch_size);
    for epoch in 0..opts.epochs {
        // Fisher-Yates from the seeded stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (grads, loss) = model.parameter_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            model.params.add_scaled(&grads, -opts.learning_rate)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        epoch_loss /= dataset.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
    }
    let mut correct = 0usize;
    for (image, label) in dataset {
        if model.predict(image)?.0 == *label {
            correct += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        train_accuracy: correct as f64 / dataset.len() as f64,
    })
}
