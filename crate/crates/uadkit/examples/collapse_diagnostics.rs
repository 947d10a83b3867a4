//! Posterior collapse in action: train the same model with a fixed KL weight
//! of 1 and with the collapse-robust loss, and compare how many latent units
//! stay active. Run with `cargo run --release --example collapse_diagnostics`.

use uadkit::model::{Bottleneck, Dimensionality, VaeConfig};
use uadkit::phantom::{generate_dataset, PhantomSpec};
use uadkit::train::{samples_from_volumes, train_with_samples, LossKind, TrainConfig};

fn main() -> Result<(), uadkit::UadError> {
    let spec = PhantomSpec {
        shape: [32, 32, 32],
        seed: 5,
        ..PhantomSpec::default()
    };
    let volumes = generate_dataset(&spec, 6, false)?;

    let mut arch =
        VaeConfig::new(Dimensionality::TwoD, Bottleneck::Dense, 16, &[1, 32, 32])?;
    arch.channels = [8, 16, 16, 32];
    let mut base = TrainConfig::defaults(arch, std::path::PathBuf::new());
    base.epochs = 24;
    base.batch_size = 16;
    base.learning_rate = 5e-4;
    base.train_slices = Some(8);
    let samples = samples_from_volumes(&volumes, &base)?;

    let mut finals = Vec::new();
    for (label, loss) in [
        ("fixed beta = 1 ", LossKind::FixedBeta(1.0)),
        ("collapse-robust", LossKind::Robust),
    ] {
        let mut config = base.clone();
        config.loss = loss;
        let outcome = train_with_samples(&config, &samples)?;
        println!("{label}: active units per epoch:");
        for d in outcome.collapse.iter().step_by(4) {
            let kl_sum: f64 = d.per_unit_kl.iter().sum();
            println!(
                "  epoch {:>2}: {:>2}/{} active, total KL {:.4}",
                d.epoch,
                d.active_units(),
                d.per_unit_kl.len(),
                kl_sum
            );
        }
        let last = outcome.collapse.last().unwrap();
        finals.push((label, last.active_units(), last.per_unit_kl.len()));
    }
    println!("final latent activity:");
    for (label, active, total) in finals {
        println!("  {label}: {active}/{total} units active");
    }
    Ok(())
}
