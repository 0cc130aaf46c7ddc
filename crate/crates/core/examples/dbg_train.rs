// temporary: desk-scale training experiment
use std::time::Instant;
use deeprobe_core::dataset::synthetic_signs;
use deeprobe_core::model::TrainOptions;
use deeprobe_core::zoo::{train_ensemble, ModelVariant};

fn main() {
    let train = synthetic_signs(2400, 1002);
    let test = synthetic_signs(600, 1003);
    let opts = TrainOptions { epochs: 8, learning_rate: 0.05, batch_size: 32, rng_seed: 7 };
    let t0 = Instant::now();
    let (_ensemble, report) = train_ensemble(
        &ModelVariant::ALL, &train.items, &test.items, train.n_classes, &opts,
    ).unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for m in &report.per_model {
        println!("{}: train {:.3} test {:.3} losses {:?}", m.name, m.train_accuracy, m.test_accuracy,
            m.epoch_losses.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
