//! Neuron coverage: which units have been driven above threshold `t` by
//! any processed input.
//!
//! A "neuron" is a unit of a dense layer or an output channel of a conv
//! layer (valued by its spatial mean). Values are taken after the
//! immediately following ReLU when one exists, then min-max normalized
//! per layer into [0, 1]; a constant layer normalizes to all zeros. A
//! neuron activates when its normalized value is strictly greater than
//! `t` — hence coverage is exactly zero at `t = 1`. The softmax layer is
//! not counted.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::ModelSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

/// Identifies the model a map or value vector belongs to, so maps cannot
/// be fed activations from a different architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSignature {
    pub name: String,
    /// (layer index, unit count) per counted layer.
    pub units: Vec<(usize, usize)>,
}

impl ModelSignature {
    pub fn of(spec: &ModelSpec) -> ModelSignature {
        ModelSignature {
            name: spec.name.clone(),
            units: counted_layers(spec)
                .map(|(i, units, _)| (i, units))
                .collect(),
        }
    }
}

/// Counted layers of a spec: `(layer index, units, kind)`.
fn counted_layers(spec: &ModelSpec) -> impl Iterator<Item = (usize, usize, &'static str)> + '_ {
    spec.layers.iter().enumerate().filter_map(|(i, l)| match l {
        LayerSpec::Dense { output, .. } => Some((i, *output, "dense")),
        LayerSpec::Conv2d { out_channels, .. } => Some((i, *out_channels, "conv2d")),
        _ => None,
    })
}

/// Per-neuron scalar values from one forward pass, normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct NeuronValues {
    pub signature: ModelSignature,
    /// Parallel to `signature.units`.
    pub values: Vec<Vec<f64>>,
}

impl NeuronValues {
    pub fn get(&self, id: NeuronId) -> Option<f64> {
        let slot = self.signature.units.iter().position(|(l, _)| *l == id.layer)?;
        self.values[slot].get(id.unit).copied()
    }
}

/// Raw (unnormalized) neuron values: the unit's value for dense layers,
/// the channel's spatial mean for conv layers, read after the following
/// ReLU when present.
pub fn raw_neuron_values(spec: &ModelSpec, activations: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if activations.len() != spec.layers.len() {
        return Err(Error::usage("activation list does not match the model"));
    }
    let mut out = Vec::new();
    for (i, _, kind) in counted_layers(spec) {
        let source = if matches!(spec.layers.get(i + 1), Some(LayerSpec::Relu)) {
            &activations[i + 1]
        } else {
            &activations[i]
        };
        let values = match kind {
            "dense" => source.data().to_vec(),
            _ => channel_means(source),
        };
        out.push(values);
    }
    Ok(out)
}

fn channel_means(map: &Tensor) -> Vec<f64> {
    let shape = map.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut sums = vec![0.0; c];
    for (i, v) in map.data().iter().enumerate() {
        sums[i % c] += v;
    }
    let area = (h * w) as f64;
    sums.iter_mut().for_each(|s| *s /= area);
    sums
}

fn normalize(values: &mut [f64]) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        for v in values.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Linear functional selecting one neuron's raw value, for seeding
/// backpropagation: the unit itself for dense layers, the channel's
/// spatial mean for conv layers, read after the following ReLU when
/// present. The per-layer normalization applied for coverage bookkeeping
/// is piecewise in its min/max anchors and is not differentiated; the
/// raw value moves the same neuron.
pub fn neuron_objective(
    spec: &ModelSpec,
    id: NeuronId,
    coef: f64,
) -> Result<crate::model::Objective> {
    let layer = spec
        .layers
        .get(id.layer)
        .ok_or_else(|| Error::usage(format!("neuron layer {} out of range", id.layer)))?;
    let source_layer = if matches!(spec.layers.get(id.layer + 1), Some(LayerSpec::Relu)) {
        id.layer + 1
    } else {
        id.layer
    };
    let shapes = spec.layer_shapes()?;
    let shape = &shapes[source_layer];
    let grad = match layer {
        LayerSpec::Dense { output, .. } => {
            if id.unit >= *output {
                return Err(Error::usage(format!("neuron unit {} out of range", id.unit)));
            }
            let mut g = Tensor::zeros(shape);
            g.data_mut()[id.unit] = coef;
            g
        }
        LayerSpec::Conv2d { out_channels, .. } => {
            if id.unit >= *out_channels {
                return Err(Error::usage(format!("neuron unit {} out of range", id.unit)));
            }
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            let spread = coef / (h * w) as f64;
            Tensor::from_fn(shape, |i| if i % c == id.unit { spread } else { 0.0 })
        }
        other => {
            return Err(Error::usage(format!(
                "layer {} ({}) has no counted neurons",
                id.layer,
                other.kind_name()
            )))
        }
    };
    Ok(crate::model::Objective {
        wrt_output: None,
        wrt_activations: vec![(source_layer, grad)],
    })
}

/// Normalized per-neuron values for one forward pass.
pub fn neuron_activations(spec: &ModelSpec, activations: &[Tensor]) -> Result<NeuronValues> {
    let mut values = raw_neuron_values(spec, activations)?;
    for layer in &mut values {
        normalize(layer);
    }
    Ok(NeuronValues {
        signature: ModelSignature::of(spec),
        values,
    })
}

/// Monotone record of activated neurons for one model at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMap {
    signature: ModelSignature,
    threshold: f64,
    activated: Vec<Vec<bool>>,
    activated_count: usize,
    total_neurons: usize,
}

impl CoverageMap {
    pub fn for_model(spec: &ModelSpec, threshold: f64) -> Result<CoverageMap> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::usage(format!(
                "threshold must lie in [0, 1], got {threshold}"
            )));
        }
        let signature = ModelSignature::of(spec);
        let activated: Vec<Vec<bool>> = signature
            .units
            .iter()
            .map(|(_, n)| vec![false; *n])
            .collect();
        let total_neurons = signature.units.iter().map(|(_, n)| n).sum();
        Ok(CoverageMap {
            signature,
            threshold,
            activated,
            activated_count: 0,
            total_neurons,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn total_neurons(&self) -> usize {
        self.total_neurons
    }

    pub fn activated_count(&self) -> usize {
        self.activated_count
    }

    pub fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    pub fn is_activated(&self, id: NeuronId) -> bool {
        self.signature
            .units
            .iter()
            .position(|(l, _)| *l == id.layer)
            .map(|slot| self.activated[slot][id.unit])
            .unwrap_or(false)
    }

    /// Marks every neuron whose value strictly exceeds the threshold.
    /// Returns how many were newly activated. Activation never unsets.
    pub fn update(&mut self, values: &NeuronValues) -> Result<usize> {
        if values.signature != self.signature {
            return Err(Error::usage(format!(
                "neuron values for model '{}' applied to coverage map for '{}'",
                values.signature.name, self.signature.name
            )));
        }
        let mut newly = 0usize;
        for (slot, layer_values) in values.values.iter().enumerate() {
            for (unit, &v) in layer_values.iter().enumerate() {
                if v > self.threshold && !self.activated[slot][unit] {
                    self.activated[slot][unit] = true;
                    newly += 1;
                }
            }
        }
        self.activated_count += newly;
        Ok(newly)
    }

    /// Uniformly random uncovered neuron, or `None` when fully covered.
    pub fn select_uncovered(&self, rng: &mut ChaCha8Rng) -> Option<NeuronId> {
        let remaining = self.total_neurons - self.activated_count;
        if remaining == 0 {
            return None;
        }
        let target = rng.gen_range(0..remaining);
        let mut seen = 0usize;
        for (slot, layer) in self.activated.iter().enumerate() {
            for (unit, &on) in layer.iter().enumerate() {
                if !on {
                    if seen == target {
                        return Some(NeuronId {
                            layer: self.signature.units[slot].0,
                            unit,
                        });
                    }
                    seen += 1;
                }
            }
        }
        unreachable!("uncovered count tracked consistently")
    }

    pub fn ratio(&self) -> f64 {
        if self.total_neurons == 0 {
            return 0.0;
        }
        self.activated_count as f64 / self.total_neurons as f64
    }

    /// Set-union merge; commutative and associative.
    pub fn merge(&mut self, other: &CoverageMap) -> Result<()> {
        if other.signature != self.signature || other.threshold != self.threshold {
            return Err(Error::usage("cannot merge coverage maps of different models"));
        }
        let mut count = 0usize;
        for (a, b) in self.activated.iter_mut().zip(&other.activated) {
            for (x, y) in a.iter_mut().zip(b) {
                *x |= y;
                count += usize::from(*x);
            }
        }
        self.activated_count = count;
        Ok(())
    }

    pub fn report(&self) -> CoverageReport {
        CoverageReport {
            total_neurons: self.total_neurons,
            activated: self.activated_count,
            ratio: self.ratio(),
            threshold: self.threshold,
            per_layer: self
                .signature
                .units
                .iter()
                .zip(&self.activated)
                .map(|((layer, units), flags)| LayerCoverage {
                    layer: *layer,
                    units: *units,
                    activated: flags.iter().filter(|&&b| b).count(),
                })
                .collect(),
        }
    }
}

/// JSON-facing coverage summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total_neurons: usize,
    pub activated: usize,
    pub ratio: f64,
    pub threshold: f64,
    pub per_layer: Vec<LayerCoverage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCoverage {
    pub layer: usize,
    pub units: usize,
    pub activated: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_spec(widths: &[usize]) -> ModelSpec {
        // Chain of dense layers; every one is a counted layer.
        let mut layers = Vec::new();
        let mut input = 4usize;
        for w in widths {
            layers.push(LayerSpec::Dense {
                input,
                output: *w,
            });
            input = *w;
        }
        ModelSpec {
            name: "toy".into(),
            input_shape: vec![4],
            layers,
        }
    }

    fn values_for(spec: &ModelSpec, layers: Vec<Vec<f64>>) -> NeuronValues {
        NeuronValues {
            signature: ModelSignature::of(spec),
            values: layers,
        }
    }

    #[test]
    fn min_max_normalization() {
        let mut v = vec![2.0, 4.0, 6.0];
        normalize(&mut v);
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        let mut c = vec![3.0, 3.0, 3.0];
        normalize(&mut c);
        assert_eq!(c, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_channel_mean_before_normalization() {
        // One channel over 4 positions, two of them at 1 -> mean 0.5.
        let map = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(channel_means(&map), vec![0.5]);
    }

    #[test]
    fn threshold_one_never_activates() {
        let spec = toy_spec(&[3]);
        let mut map = CoverageMap::for_model(&spec, 1.0).unwrap();
        // Normalized values max out at exactly 1; strict inequality keeps
        // everything uncovered.
        let vals = values_for(&spec, vec![vec![0.0, 0.5, 1.0]]);
        assert_eq!(map.update(&vals).unwrap(), 0);
        assert_eq!(map.ratio(), 0.0);
    }

    #[test]
    fn fresh_map_has_zero_ratio() {
        let spec = toy_spec(&[3, 9]);
        let map = CoverageMap::for_model(&spec, 0.5).unwrap();
        assert_eq!(map.ratio(), 0.0);
        assert_eq!(map.total_neurons(), 12);
    }

    #[test]
    fn ratio_quarters() {
        let spec = toy_spec(&[12]);
        let mut map = CoverageMap::for_model(&spec, 0.5).unwrap();
        let mut v = vec![0.0; 12];
        v[0] = 1.0;
        v[5] = 0.9;
        v[11] = 0.7;
        map.update(&values_for(&spec, vec![v])).unwrap();
        assert_eq!(map.ratio(), 0.25);
    }

    #[test]
    fn update_sequences_match_brute_force_union() {
        // 3-neuron model, a pool of value vectors, every sequence of 3
        // updates: the incremental map must equal the set-union oracle.
        let spec = toy_spec(&[3]);
        let pool: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.4],
            vec![0.1, 0.8, 0.1],
            vec![0.6, 0.6, 0.9],
        ];
        let t = 0.5;
        for a in 0..pool.len() {
            for b in 0..pool.len() {
                for c in 0..pool.len() {
                    let seq = [&pool[a], &pool[b], &pool[c]];
                    let mut map = CoverageMap::for_model(&spec, t).unwrap();
                    for v in seq {
                        map.update(&values_for(&spec, vec![v.clone()])).unwrap();
                    }
                    // Brute-force union oracle.
                    let mut expected = [false; 3];
                    for v in seq {
                        for (i, &x) in v.iter().enumerate() {
                            if x > t {
                                expected[i] = true;
                            }
                        }
                    }
                    for (unit, want) in expected.iter().enumerate() {
                        assert_eq!(
                            map.is_activated(NeuronId { layer: 0, unit }),
                            *want,
                            "sequence ({a},{b},{c}) unit {unit}"
                        );
                    }
                    assert_eq!(
                        map.activated_count(),
                        expected.iter().filter(|&&b| b).count()
                    );
                }
            }
        }
    }

    #[test]
    fn select_uncovered_none_when_full() {
        let spec = toy_spec(&[2]);
        let mut map = CoverageMap::for_model(&spec, 0.1).unwrap();
        map.update(&values_for(&spec, vec![vec![1.0, 0.9]])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(map.select_uncovered(&mut rng), None);
    }

    #[test]
    fn select_uncovered_single_candidate() {
        let spec = toy_spec(&[3]);
        let mut map = CoverageMap::for_model(&spec, 0.5).unwrap();
        map.update(&values_for(&spec, vec![vec![1.0, 0.9, 0.0]]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            assert_eq!(
                map.select_uncovered(&mut rng),
                Some(NeuronId { layer: 0, unit: 2 })
            );
        }
    }

    #[test]
    fn select_uncovered_is_roughly_uniform() {
        let spec = toy_spec(&[4]);
        let map = CoverageMap::for_model(&spec, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let id = map.select_uncovered(&mut rng).unwrap();
            counts[id.unit] += 1;
        }
        for (unit, &c) in counts.iter().enumerate() {
            assert!(
                (2350..=2650).contains(&c),
                "unit {unit} drawn {c} times, expected 2500 +/- 150"
            );
        }
    }

    #[test]
    fn model_mismatch_is_usage_error() {
        let spec_a = toy_spec(&[3]);
        let spec_b = toy_spec(&[4]);
        let mut map = CoverageMap::for_model(&spec_a, 0.5).unwrap();
        let vals = values_for(&spec_b, vec![vec![0.0; 4]]);
        assert!(map.update(&vals).is_err());
    }

    #[test]
    fn ratio_is_monotone_in_threshold() {
        // Same recorded raw activations replayed at different thresholds.
        let spec = toy_spec(&[5]);
        let streams: Vec<Vec<f64>> = vec![
            vec![0.1, 0.9, 0.3, 0.0, 1.0],
            vec![0.7, 0.2, 0.55, 0.45, 0.05],
            vec![0.35, 0.65, 0.85, 0.15, 0.5],
        ];
        let thresholds = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
        let ratios: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                let mut map = CoverageMap::for_model(&spec, t).unwrap();
                for s in &streams {
                    map.update(&values_for(&spec, vec![s.clone()])).unwrap();
                }
                map.ratio()
            })
            .collect();
        for w in ratios.windows(2) {
            assert!(w[0] >= w[1], "coverage must not increase with t: {ratios:?}");
        }
        assert_eq!(*ratios.last().unwrap(), 0.0);
    }

    #[test]
    fn merge_equals_concatenated_processing() {
        let spec = toy_spec(&[6]);
        let t = 0.4;
        let stream_a: Vec<Vec<f64>> = vec![
            vec![0.9, 0.0, 0.3, 0.0, 0.5, 0.0],
            vec![0.0, 0.45, 0.0, 0.0, 0.0, 0.0],
        ];
        let stream_b: Vec<Vec<f64>> = vec![vec![0.0, 0.0, 0.0, 0.99, 0.0, 0.41]];

        let mut map_a = CoverageMap::for_model(&spec, t).unwrap();
        for v in &stream_a {
            map_a.update(&values_for(&spec, vec![v.clone()])).unwrap();
        }
        let mut map_b = CoverageMap::for_model(&spec, t).unwrap();
        for v in &stream_b {
            map_b.update(&values_for(&spec, vec![v.clone()])).unwrap();
        }

        let mut merged_ab = map_a.clone();
        merged_ab.merge(&map_b).unwrap();
        let mut merged_ba = map_b.clone();
        merged_ba.merge(&map_a).unwrap();

        let mut sequential = CoverageMap::for_model(&spec, t).unwrap();
        for v in stream_a.iter().chain(&stream_b) {
            sequential
                .update(&values_for(&spec, vec![v.clone()]))
                .unwrap();
        }

        assert_eq!(merged_ab, sequential);
        assert_eq!(merged_ba, sequential);
    }

    #[test]
    fn report_breaks_down_per_layer() {
        let spec = toy_spec(&[2, 3]);
        let mut map = CoverageMap::for_model(&spec, 0.5).unwrap();
        map.update(&values_for(&spec, vec![vec![1.0, 0.0], vec![0.9, 0.0, 0.8]]))
            .unwrap();
        let report = map.report();
        assert_eq!(report.total_neurons, 5);
        assert_eq!(report.activated, 3);
        assert_eq!(report.per_layer.len(), 2);
        assert_eq!(report.per_layer[0].activated, 1);
        assert_eq!(report.per_layer[1].activated, 2);
    }
}
