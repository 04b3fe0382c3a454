use sal_core::data::{generate_synthetic, Dataset, Sample, Split, SyntheticSpec};
use sal_core::metrics::interpretability_score;
use sal_core::nn::BackboneConfig;
use sal_core::probe::ProbeMethod;
use sal_core::trainer::{predict_probs, train_model, TrainConfig};
use sal_core::Network32;

fn data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec { num_classes: 2, samples_per_class: 20, image_size: 16, spurious_correlation: 0.9 };
    (generate_synthetic(&spec, Split::Train, 7).unwrap(), generate_synthetic(&spec, Split::Val, 8).unwrap())
}

fn config(alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        epochs: 20,
        batch_size: 8,
        learning_rate: 0.05,
        grad_clip: 1.0,
        patience: 0,
        ssim_window: 3,
        backbone: BackboneConfig { channels: vec![6, 8], strides: vec![1, 2] },
        ..TrainConfig::default()
    }
}

fn fit(train: &Dataset, val: &Dataset, alpha: f64) -> Network32 {
    train_model::<f32>(train.samples(), val.samples(), 2, &config(alpha)).unwrap().model
}

#[test]
fn cross_entropy_fits_a_separable_training_set() {
    let (train, _) = data();
    // Validating on the training set makes the kept checkpoint the best fit.
    let cfg = TrainConfig { epochs: 60, ..config(1.0) };
    let outcome = train_model::<f32>(train.samples(), train.samples(), 2, &cfg).unwrap();
    assert_eq!(outcome.best_val_accuracy, Some(1.0));
    let first = outcome.log.first().unwrap().train.loss;
    let last = outcome.log.last().unwrap().train.loss;
    assert!(last < first, "objective went from {first} to {last}");

    let refs: Vec<&Sample> = train.samples().iter().collect();
    let probs = predict_probs(&outcome.model, &refs);
    let correct = refs
        .iter()
        .zip(probs.rows())
        .filter(|(s, p)| p[s.label] > p[1 - s.label])
        .count();
    assert_eq!(correct, train.len());
}

#[test]
fn saliency_weight_improves_training_dice() {
    let (train, val) = data();
    let guided = fit(&train, &val, 0.1);
    let plain = fit(&train, &val, 0.9);
    let guided_dice = interpretability_score(&guided, &train, ProbeMethod::Cam).unwrap().mean_dice;
    let plain_dice = interpretability_score(&plain, &train, ProbeMethod::Cam).unwrap().mean_dice;
    assert!(guided_dice > plain_dice, "alpha 0.1 Dice {guided_dice} vs alpha 0.9 Dice {plain_dice}");
}
