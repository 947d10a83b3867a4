//! The full protocol end to end at desk scale: synthesize data, train on
//! healthy anatomy, calibrate the threshold on half of the lesioned cases,
//! evaluate on the held-out half.
//! Run with `cargo run --release --example calibrate_and_evaluate`.

use uadkit::model::{Bottleneck, Dimensionality, VaeConfig};
use uadkit::phantom::{generate_dataset, PhantomSpec};
use uadkit::pipeline::{
    aggregate, calibrate_threshold, evaluate_split, prepare_case, split_half, CalibrationCase,
    InferenceMode,
};
use uadkit::train::{samples_from_volumes, train_with_samples, TrainConfig};

fn main() -> Result<(), uadkit::UadError> {
    let spec = PhantomSpec {
        shape: [32, 32, 32],
        seed: 11,
        ..PhantomSpec::default()
    };
    let healthy = generate_dataset(&spec, 8, false)?;
    let lesioned = generate_dataset(&spec, 8, true)?;

    let mut arch =
        VaeConfig::new(Dimensionality::ThreeD, Bottleneck::Dense, 32, &[1, 32, 32, 32])?;
    arch.channels = [8, 16, 16, 32];
    let mut config = TrainConfig::defaults(arch, std::path::PathBuf::new());
    config.epochs = 12;
    config.batch_size = 4;
    config.learning_rate = 1e-3;
    let samples = samples_from_volumes(&healthy, &config)?;
    println!("training 3D dense VAE on {} healthy volumes...", samples.len());
    let outcome = train_with_samples(&config, &samples)?;

    let (cal_idx, test_idx) = split_half(lesioned.len(), config.seed);
    let mut cases = Vec::new();
    for &i in &cal_idx {
        let prepared = prepare_case(&outcome.model, &lesioned[i], InferenceMode::Mean)?;
        cases.extend(CalibrationCase::from_prepared(&prepared));
    }
    let calibration = calibrate_threshold(&cases)?;
    println!(
        "calibrated threshold {} on {} cases",
        calibration.chosen(),
        cal_idx.len()
    );

    let test: Vec<_> = test_idx.iter().map(|&i| lesioned[i].clone()).collect();
    let (reports, _) =
        evaluate_split(&outcome.model, &test, calibration.chosen(), InferenceMode::Mean)?;
    println!("id              threshold dice    spe     sen     mae");
    for r in &reports {
        println!(
            "{:<15} {:<9.4} {:<7.4} {:<7} {:<7} {:<7.4}",
            r.id,
            r.threshold,
            r.dice,
            r.specificity.map_or("undef".into(), |v| format!("{v:.4}")),
            r.sensitivity.map_or("undef".into(), |v| format!("{v:.4}")),
            r.mae
        );
    }
    let agg = aggregate(&reports);
    println!(
        "aggregate over {} cases: Dice {:.3} +/- {:.3}, Spe {:.3}, Sen {:.3}, MAE {:.4}",
        agg.cases, agg.mean_dice, agg.std_dice, agg.mean_specificity, agg.mean_sensitivity, agg.mean_mae
    );
    Ok(())
}
