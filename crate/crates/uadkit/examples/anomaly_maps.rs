//! Reconstruct a lesioned phantom with a model trained on healthy anatomy
//! only, and dump |X - X_hat| anomaly-map panels as PGM images.
//! Run with `cargo run --release --example anomaly_maps`.

use uadkit::model::{Bottleneck, Dimensionality, VaeConfig};
use uadkit::phantom::{generate_dataset, generate_phantom, PhantomSpec};
use uadkit::pipeline::{prepare_case, segment_map, write_panel_pgm, InferenceMode};
use uadkit::train::{samples_from_volumes, train_with_samples, TrainConfig};

fn main() -> Result<(), uadkit::UadError> {
    let out = std::path::Path::new("target/example-output/anomaly-maps");
    std::fs::create_dir_all(out).expect("create output dir");

    let spec = PhantomSpec {
        shape: [32, 32, 32],
        seed: 3,
        ..PhantomSpec::default()
    };
    let healthy = generate_dataset(&spec, 6, false)?;

    let mut arch =
        VaeConfig::new(Dimensionality::TwoD, Bottleneck::Dense, 16, &[1, 32, 32])?;
    arch.channels = [8, 16, 16, 32];
    let mut config = TrainConfig::defaults(arch, std::path::PathBuf::new());
    config.epochs = 6;
    config.batch_size = 16;
    config.learning_rate = 5e-4;
    config.train_slices = Some(8);
    let samples = samples_from_volumes(&healthy, &config)?;
    let outcome = train_with_samples(&config, &samples)?;

    let lesioned = generate_phantom(&spec, true, 0)?;
    let case = prepare_case(&outcome.model, &lesioned, InferenceMode::Mean)?;
    let seg = segment_map(&case.map, &case.volume.brain_mask, 0.1);
    for z in [12, 16, 20] {
        let path = out.join(format!("panel_z{z}.pgm"));
        write_panel_pgm(&path, &case, &seg, z)?;
        println!("wrote {}", path.display());
    }
    let lesion_mean = mean_where(&case.map.values, case.volume.lesion_mask.as_ref().unwrap());
    let healthy_mask: Vec<bool> = case
        .volume
        .brain_mask
        .iter()
        .zip(case.volume.lesion_mask.as_ref().unwrap())
        .map(|(&b, &l)| b && !l)
        .collect();
    let healthy_mean = mean_where(&case.map.values, &healthy_mask);
    println!(
        "mean anomaly score: {lesion_mean:.4} in lesions vs {healthy_mean:.4} in healthy tissue"
    );
    Ok(())
}

fn mean_where(values: &[f64], mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (v, &m) in values.iter().zip(mask) {
        if m {
            acc += v;
            n += 1;
        }
    }
    acc / n.max(1) as f64
}
