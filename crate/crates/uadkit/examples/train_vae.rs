//! Train a small dense-bottleneck 2D VAE on synthetic phantoms with the
//! collapse-robust loss and watch the loss components evolve.
//! Run with `cargo run --release --example train_vae`.

use uadkit::model::{Bottleneck, Dimensionality, VaeConfig};
use uadkit::phantom::{generate_dataset, PhantomSpec};
use uadkit::train::{samples_from_volumes, train_with_samples, TrainConfig};

fn main() -> Result<(), uadkit::UadError> {
    let spec = PhantomSpec {
        shape: [32, 32, 32],
        seed: 0,
        ..PhantomSpec::default()
    };
    let volumes = generate_dataset(&spec, 6, false)?;

    let mut arch =
        VaeConfig::new(Dimensionality::TwoD, Bottleneck::Dense, 16, &[1, 32, 32])?;
    arch.channels = [8, 16, 16, 32];
    let mut config = TrainConfig::defaults(arch, std::path::PathBuf::new());
    config.epochs = 4;
    config.batch_size = 16;
    config.learning_rate = 5e-4;
    config.train_slices = Some(8);

    let samples = samples_from_volumes(&volumes, &config)?;
    println!("training on {} slices", samples.len());
    let outcome = train_with_samples(&config, &samples)?;

    println!("t    beta   raw_recon  sigma    norm     kl       total");
    for r in outcome.log.iter().step_by(3) {
        let c = r.components;
        println!(
            "{:<4} {:<6.3} {:<10.5} {:<8.5} {:<8.4} {:<8.5} {:<8.4}",
            r.t, c.beta, c.raw_recon, c.sigma, c.normalized_recon, c.kl, c.total
        );
    }
    let last = outcome.collapse.last().unwrap();
    println!(
        "final epoch: {}/{} latent units active",
        last.active_units(),
        last.per_unit_kl.len()
    );
    let checkpoint = std::path::Path::new("target/example-output/train_vae.uadm");
    std::fs::create_dir_all(checkpoint.parent().unwrap()).expect("create output dir");
    outcome.model.save(checkpoint)?;
    println!("checkpoint written to {}", checkpoint.display());
    Ok(())
}
