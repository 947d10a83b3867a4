//! Deterministic mini-batch training loop: seeded shuffling and epsilon
//! draws, Adam updates, per-iteration CSV logging, checkpointing and
//! posterior-collapse diagnostics. `(seed, config)` fully determines the
//! run.

use crate::config::FlatConfig;
use crate::error::{ConfigError, UadError};
use crate::loss::{self, LossComponents, LossState};
use crate::model::{Bottleneck, Dimensionality, VaeConfig, VaeModel};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{self, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Per-latent-unit KL activity below this many nats counts as collapsed.
pub const ACTIVITY_THRESHOLD: Scalar = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Moving-mean-normalized reconstruction plus cyclically annealed KL.
    Robust,
    /// Plain ELBO with a fixed KL weight (beta-VAE ablation baseline).
    FixedBeta(Scalar),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Scalar,
    pub seed: u64,
    /// KL annealing cycle length `T`, in iterations.
    pub cycle_len: usize,
    /// Moving-mean window length `L`, in iterations.
    pub window_len: usize,
    pub loss: LossKind,
    pub architecture: VaeConfig,
    pub dataset_dir: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    /// 2D models: central axial slices taken per volume (default: all).
    pub train_slices: Option<usize>,
}

impl TrainConfig {
    pub fn defaults(architecture: VaeConfig, dataset_dir: PathBuf) -> Self {
        let batch_size = match architecture.dimensionality {
            Dimensionality::ThreeD => 8,
            Dimensionality::TwoD => 32,
        };
        TrainConfig {
            epochs: 30,
            batch_size,
            learning_rate: 1e-4,
            seed: 0,
            cycle_len: loss::DEFAULT_CYCLE_LEN,
            window_len: loss::DEFAULT_WINDOW_LEN,
            loss: LossKind::Robust,
            architecture,
            dataset_dir,
            checkpoint_path: None,
            checkpoint_every: 0,
            log_path: None,
            train_slices: None,
        }
    }

    /// Parses the flat `key=value` training config; unknown keys are errors.
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self, ConfigError> {
        let invalid = |key: &str, detail: String| ConfigError::InvalidValue {
            key: key.to_string(),
            detail,
        };
        let dimensionality = match cfg.get_or("dimensionality", "3d".to_string())?.as_str() {
            "2d" | "2D" => Dimensionality::TwoD,
            "3d" | "3D" => Dimensionality::ThreeD,
            other => return Err(invalid("dimensionality", format!("expected 2d or 3d, got {other}"))),
        };
        let bottleneck = match cfg.get_or("bottleneck", "dense".to_string())?.as_str() {
            "dense" => Bottleneck::Dense,
            "spatial" => Bottleneck::Spatial,
            other => return Err(invalid("bottleneck", format!("expected dense or spatial, got {other}"))),
        };
        let latent = cfg.get_or(
            "latent",
            match bottleneck {
                Bottleneck::Dense => 128usize,
                Bottleneck::Spatial => 16,
            },
        )?;
        let default_shape = match dimensionality {
            Dimensionality::TwoD => "64x64",
            Dimensionality::ThreeD => "64x64x64",
        };
        let shape_text = cfg.get_or("input_shape", default_shape.to_string())?;
        let mut input_shape = vec![1usize];
        for part in shape_text.split('x') {
            input_shape.push(
                part.trim()
                    .parse()
                    .map_err(|e| invalid("input_shape", format!("{e}")))?,
            );
        }
        let mut architecture = VaeConfig::new(dimensionality, bottleneck, latent, &input_shape)
            .map_err(|e| invalid("input_shape", e.to_string()))?;
        if let Some(text) = cfg.raw("channels") {
            let widths: Vec<usize> = text
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| invalid("channels", format!("{e}")))?;
            if widths.len() != 4 {
                return Err(invalid("channels", format!("expected 4 widths, got {}", widths.len())));
            }
            architecture.channels = [widths[0], widths[1], widths[2], widths[3]];
        }
        architecture.leaky_slope = cfg.get_or("leaky_slope", architecture.leaky_slope)?;

        let precision = cfg.get_or("precision", "f64".to_string())?;
        if precision != "f64" {
            return Err(invalid(
                "precision",
                format!("this build computes in f64 only, got {precision}"),
            ));
        }
        let loss_kind = match cfg.get_or("loss", "robust".to_string())?.as_str() {
            "robust" => LossKind::Robust,
            "fixed" => LossKind::FixedBeta(cfg.get_or("fixed_beta", 1.0)?),
            other => return Err(invalid("loss", format!("expected robust or fixed, got {other}"))),
        };

        let dataset_dir: String = cfg.require("dataset")?;
        let config = TrainConfig {
            epochs: cfg.get_or("epochs", 30)?,
            batch_size: cfg.get_or(
                "batch_size",
                match dimensionality {
                    Dimensionality::ThreeD => 8usize,
                    Dimensionality::TwoD => 32,
                },
            )?,
            learning_rate: cfg.get_or("learning_rate", 1e-4)?,
            seed: cfg.get_or("seed", 0u64)?,
            cycle_len: cfg.get_or("cycle_len", loss::DEFAULT_CYCLE_LEN)?,
            window_len: cfg.get_or("window_len", loss::DEFAULT_WINDOW_LEN)?,
            loss: loss_kind,
            architecture,
            dataset_dir: PathBuf::from(dataset_dir),
            checkpoint_path: cfg.raw("checkpoint").map(PathBuf::from),
            checkpoint_every: cfg.get_or("checkpoint_every", 0)?,
            log_path: cfg.raw("log").map(PathBuf::from),
            train_slices: match cfg.raw("train_slices") {
                None => None,
                Some(v) => Some(v.parse().map_err(|e| invalid("train_slices", format!("{e}")))?),
            },
        };
        cfg.reject_unknown()?;
        Ok(config)
    }
}

/// One logged optimizer iteration.
#[derive(Debug, Clone, Copy)]
pub struct LogRecord {
    pub t: usize,
    pub components: LossComponents,
}

pub const LOG_HEADER: &str = "t,beta,raw_recon,sigma,normalized_recon,kl,total";

pub fn log_line(record: &LogRecord) -> String {
    let c = &record.components;
    format!(
        "{},{},{},{},{},{},{}",
        record.t, c.beta, c.raw_recon, c.sigma, c.normalized_recon, c.kl, c.total
    )
}

/// Collapse diagnostics for one epoch: closed-form KL per latent unit,
/// batch-averaged.
#[derive(Debug, Clone)]
pub struct CollapseDiagnostics {
    pub epoch: usize,
    pub per_unit_kl: Vec<Scalar>,
    /// Units with KL below [`ACTIVITY_THRESHOLD`].
    pub collapsed_units: usize,
}

impl CollapseDiagnostics {
    pub fn active_units(&self) -> usize {
        self.per_unit_kl.len() - self.collapsed_units
    }
}

/// Per-unit KL activity of `model` on a sample batch.
pub fn diagnose_collapse(model: &VaeModel, batch: &Tensor) -> Result<CollapseDiagnostics, UadError> {
    let bound = model.bind(false);
    let (mu, logvar) = model.encode(&bound, batch)?;
    let per_unit_kl = loss::kl_per_unit(&mu, &logvar);
    let collapsed_units = per_unit_kl.iter().filter(|&&k| k < ACTIVITY_THRESHOLD).count();
    Ok(CollapseDiagnostics {
        epoch: 0,
        per_unit_kl,
        collapsed_units,
    })
}

/// Concatenates `[1, ...]` samples along the batch axis.
pub fn stack_batch(samples: &[&Tensor]) -> Tensor {
    assert!(!samples.is_empty());
    let sample_shape = &samples[0].shape()[1..];
    let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
    for s in samples {
        assert_eq!(&s.shape()[1..], sample_shape, "ragged batch");
        data.extend_from_slice(s.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(sample_shape);
    Tensor::from_vec(&shape, data).expect("shape matches data")
}

/// Reads every `.uadv` volume under `dir` in filename order.
pub fn load_volumes(dir: &Path) -> Result<Vec<Volume>, UadError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| UadError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "uadv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(UadError::Usage(format!(
            "no .uadv volumes found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Volume::read(p)).collect()
}

/// Preprocesses volumes into model-shaped training samples: whole cropped
/// volumes for 3D models, central axial slices for 2D models.
pub fn samples_from_volumes(
    volumes: &[Volume],
    config: &TrainConfig,
) -> Result<Vec<Tensor>, UadError> {
    let arch = &config.architecture;
    let mut samples = Vec::new();
    match arch.dimensionality {
        Dimensionality::ThreeD => {
            let target = [arch.input_shape[1], arch.input_shape[2], arch.input_shape[3]];
            for v in volumes {
                samples.push(volume::preprocess(v, target).to_tensor_3d());
            }
        }
        Dimensionality::TwoD => {
            for v in volumes {
                let target = [v.shape[0], arch.input_shape[1], arch.input_shape[2]];
                let p = volume::preprocess(v, target);
                let count = config.train_slices.unwrap_or(p.shape[0]).min(p.shape[0]);
                for (_, _, t) in volume::extract_slices(&p, count)? {
                    samples.push(t);
                }
            }
        }
    }
    Ok(samples)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub log: Vec<LogRecord>,
    pub collapse: Vec<CollapseDiagnostics>,
}

/// Trains on the volumes found in `config.dataset_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, UadError> {
    let volumes = load_volumes(&config.dataset_dir)?;
    let samples = samples_from_volumes(&volumes, config)?;
    train_with_samples(config, &samples)
}

/// Trains on preprocessed model-shaped samples.
pub fn train_with_samples(config: &TrainConfig, samples: &[Tensor]) -> Result<TrainOutcome, UadError> {
    if samples.is_empty() {
        return Err(UadError::Usage("empty training set".into()));
    }
    let mut model = VaeModel::init(config.architecture.clone(), config.seed)?;
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig::with_lr(config.learning_rate);
    let mut state = LossState::new(config.cycle_len, config.window_len);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eps_rng.set_stream(2);

    let mut log: Vec<LogRecord> = Vec::new();
    let mut collapse = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut t = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch_refs: Vec<&Tensor> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = stack_batch(&batch_refs);
            let bound = model.bind(true);
            let (x_hat, latent) = model.forward(&bound, &x, &mut eps_rng)?;
            let total = match config.loss {
                LossKind::Robust => {
                    loss::robust_loss(&mut state, &x, &x_hat, &latent.mu, &latent.logvar)?
                }
                LossKind::FixedBeta(beta) => {
                    let raw = loss::l1_reconstruction(&x, &x_hat)?;
                    let kl = loss::kl_divergence(&latent.mu, &latent.logvar)?;
                    let total = raw.add(&kl.mul_scalar(beta))?;
                    state.last = LossComponents {
                        raw_recon: raw.item(),
                        sigma: 1.0,
                        normalized_recon: raw.item(),
                        kl: kl.item(),
                        beta,
                        total: total.item(),
                    };
                    state.schedule.t += 1;
                    total
                }
            };
            if !state.last.total.is_finite() {
                return Err(UadError::Numeric(format!(
                    "non-finite loss at iteration {t}: {:?}",
                    state.last
                )));
            }
            let grads = total.backward()?;
            let grad_refs = model.gradients(&bound, &grads);
            adam_step(&mut model.params, &grad_refs, &mut adam, &adam_cfg);
            log.push(LogRecord {
                t,
                components: state.last,
            });
            t += 1;
        }
        let diag_count = samples.len().min(config.batch_size);
        let diag_refs: Vec<&Tensor> = samples[..diag_count].iter().collect();
        let mut diag = diagnose_collapse(&model, &stack_batch(&diag_refs))?;
        diag.epoch = epoch;
        collapse.push(diag);
        if let (Some(path), true) = (
            &config.checkpoint_path,
            config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0,
        ) {
            model.save(path)?;
        }
    }
    if let Some(path) = &config.checkpoint_path {
        model.save(path)?;
    }
    if let Some(path) = &config.log_path {
        write_log(path, &log)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        collapse,
    })
}

/// Writes the per-iteration CSV training log.
pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<(), UadError> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for record in log {
        out.push_str(&log_line(record));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|source| UadError::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Bottleneck;
    use crate::phantom::{generate_dataset, PhantomSpec};
    use tempfile::tempdir;

    fn tiny_config() -> TrainConfig {
        let arch = VaeConfig {
            dimensionality: Dimensionality::TwoD,
            bottleneck: Bottleneck::Dense,
            latent: 8,
            input_shape: vec![1, 16, 16],
            channels: [4, 8, 8, 8],
            leaky_slope: 0.2,
        };
        let mut cfg = TrainConfig::defaults(arch, PathBuf::new());
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.learning_rate = 1e-3;
        cfg
    }

    fn tiny_samples(n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                let data = (0..256)
                    .map(|j| ((i * 31 + j * 7) % 11) as Scalar / 11.0)
                    .collect();
                Tensor::from_vec(&[1, 1, 16, 16], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_is_bit_identical_across_runs() {
        let cfg = tiny_config();
        let samples = tiny_samples(8);
        let a = train_with_samples(&cfg, &samples).unwrap();
        let b = train_with_samples(&cfg, &samples).unwrap();
        for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
            for (x, y) in pa.data.iter().zip(&pb.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", pa.name);
            }
        }
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(log_line(ra), log_line(rb));
        }
    }

    #[test]
    fn different_seed_changes_the_run() {
        let cfg = tiny_config();
        let mut cfg2 = tiny_config();
        cfg2.seed = 1;
        let samples = tiny_samples(8);
        let a = train_with_samples(&cfg, &samples).unwrap();
        let b = train_with_samples(&cfg2, &samples).unwrap();
        assert_ne!(
            a.model.params.get("enc.conv1.w").unwrap().data,
            b.model.params.get("enc.conv1.w").unwrap().data
        );
    }

    #[test]
    fn loss_decreases_and_log_is_complete() {
        let mut cfg = tiny_config();
        cfg.epochs = 10;
        let samples = tiny_samples(8);
        let out = train_with_samples(&cfg, &samples).unwrap();
        // 8 samples, batch 4 -> 2 iterations per epoch.
        assert_eq!(out.log.len(), 20);
        assert_eq!(out.collapse.len(), 10);
        for (i, r) in out.log.iter().enumerate() {
            assert_eq!(r.t, i);
            assert!(r.components.total.is_finite());
        }
        let first: Scalar = out.log[..4].iter().map(|r| r.components.raw_recon).sum();
        let last: Scalar = out.log[16..].iter().map(|r| r.components.raw_recon).sum();
        assert!(
            last < first,
            "raw reconstruction should improve: {first} -> {last}"
        );
        // The robust schedule ramps beta within the first cycle.
        assert_eq!(out.log[0].components.beta, 0.0);
        assert!(out.log[19].components.beta > 0.0);
    }

    #[test]
    fn collapse_diagnostics_count_inactive_units() {
        let cfg = tiny_config();
        let samples = tiny_samples(4);
        // An untrained model with zeroed heads has exactly zero KL: all units
        // are collapsed.
        let mut model = VaeModel::init(cfg.architecture.clone(), 0).unwrap();
        model.zero_heads();
        let batch = stack_batch(&samples.iter().collect::<Vec<_>>());
        let diag = diagnose_collapse(&model, &batch).unwrap();
        assert_eq!(diag.per_unit_kl.len(), 8);
        assert_eq!(diag.collapsed_units, 8);
        assert_eq!(diag.active_units(), 0);
    }

    #[test]
    fn checkpoint_and_log_files_are_written() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.checkpoint_path = Some(dir.path().join("model.uadm"));
        cfg.log_path = Some(dir.path().join("train.csv"));
        let samples = tiny_samples(4);
        train_with_samples(&cfg, &samples).unwrap();
        let model = VaeModel::load(&dir.path().join("model.uadm")).unwrap();
        assert_eq!(model.config, cfg.architecture);
        let log = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        let mut lines = log.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn empty_training_set_is_usage_error() {
        let cfg = tiny_config();
        assert!(matches!(
            train_with_samples(&cfg, &[]),
            Err(UadError::Usage(_))
        ));
    }

    #[test]
    fn train_end_to_end_from_volume_files() {
        let dir = tempdir().unwrap();
        let spec = PhantomSpec {
            shape: [16, 16, 16],
            lesion_radius: (1.5, 2.5),
            ..PhantomSpec::default()
        };
        for v in generate_dataset(&spec, 3, false).unwrap() {
            v.write(&dir.path().join(format!("{}.uadv", v.id))).unwrap();
        }
        let mut cfg = tiny_config();
        cfg.dataset_dir = dir.path().to_path_buf();
        cfg.epochs = 1;
        cfg.train_slices = Some(4);
        let out = train(&cfg).unwrap();
        // 3 volumes x 4 central slices = 12 samples, batch 4 -> 3 iterations.
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn flat_config_parsing_and_rejection() {
        let text = "dataset=/tmp/ds\ndimensionality=2d\nbottleneck=spatial\nepochs=5\nseed=3\n";
        let cfg = TrainConfig::from_flat(&FlatConfig::parse(text).unwrap()).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.architecture.dimensionality, Dimensionality::TwoD);
        assert_eq!(cfg.architecture.bottleneck, Bottleneck::Spatial);
        assert_eq!(cfg.architecture.latent, 16, "spatial default latent channels");
        assert_eq!(cfg.batch_size, 32, "2d default batch");

        let defaults = TrainConfig::from_flat(&FlatConfig::parse("dataset=/tmp/ds\n").unwrap()).unwrap();
        assert_eq!(defaults.architecture.latent, 128, "dense default latent");
        assert_eq!(defaults.architecture.input_shape, vec![1, 64, 64, 64]);
        assert_eq!(defaults.cycle_len, 50);
        assert_eq!(defaults.window_len, 10);

        // unknown key
        let bad = FlatConfig::parse("dataset=/tmp/ds\nepochz=5\n").unwrap();
        assert!(matches!(
            TrainConfig::from_flat(&bad),
            Err(ConfigError::UnknownKey(_))
        ));
        // f32 is not supported
        let f32cfg = FlatConfig::parse("dataset=/tmp/ds\nprecision=f32\n").unwrap();
        assert!(TrainConfig::from_flat(&f32cfg).is_err());
        // missing dataset
        let nodata = FlatConfig::parse("epochs=3\n").unwrap();
        assert!(matches!(
            TrainConfig::from_flat(&nodata),
            Err(ConfigError::MissingKey("dataset"))
        ));
    }

    #[test]
    fn fixed_beta_loss_is_plain_elbo() {
        let mut cfg = tiny_config();
        cfg.loss = LossKind::FixedBeta(0.5);
        cfg.epochs = 1;
        let samples = tiny_samples(4);
        let out = train_with_samples(&cfg, &samples).unwrap();
        let c = out.log[0].components;
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.sigma, 1.0);
        assert!((c.total - (c.raw_recon + 0.5 * c.kl)).abs() < 1e-12);
    }
}
