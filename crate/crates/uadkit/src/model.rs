//! The four VAE architectures: spatial or dense bottleneck, in 2D or 3D.
//!
//! Encoders are 6 layers: four stride-2 convolution blocks (kernel 4,
//! padding 1, each halving every spatial extent) followed by two heads
//! producing `mu` and `log sigma^2`. Decoders mirror them with 5 layers: one
//! head plus four stride-2 transposed-convolution blocks with a linear
//! output layer. With a spatial bottleneck the
//! heads are 1x1 convolutions and the latent keeps its spatial axes; with a
//! dense bottleneck they are fully-connected and the latent is a flat vector
//! of `latent` units. Both heads read the fourth conv block's output.

use crate::error::{FormatError, TensorError, UadError};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UADM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimensionality {
    TwoD,
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    Spatial,
    Dense,
}

/// Hyperparameters fixing one of the four architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub dimensionality: Dimensionality,
    pub bottleneck: Bottleneck,
    /// Latent size: number of flat units (dense) or latent channels
    /// (spatial).
    pub latent: usize,
    /// Sample shape without the batch axis: `[C, H, W]` or `[C, D, H, W]`.
    pub input_shape: Vec<usize>,
    pub channels: [usize; 4],
    pub leaky_slope: Scalar,
}

impl VaeConfig {
    pub fn new(
        dimensionality: Dimensionality,
        bottleneck: Bottleneck,
        latent: usize,
        input_shape: &[usize],
    ) -> Result<Self, TensorError> {
        let cfg = VaeConfig {
            dimensionality,
            bottleneck,
            latent,
            input_shape: input_shape.to_vec(),
            channels: [32, 64, 128, 256],
            leaky_slope: 0.2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let spatial_rank = match self.dimensionality {
            Dimensionality::TwoD => 2,
            Dimensionality::ThreeD => 3,
        };
        if self.input_shape.len() != spatial_rank + 1 {
            return Err(TensorError::Dimension(format!(
                "input shape {:?} does not match {spatial_rank}D-plus-channel layout",
                self.input_shape
            )));
        }
        for &e in &self.input_shape[1..] {
            if e % 16 != 0 || e == 0 {
                return Err(TensorError::Dimension(format!(
                    "spatial extent {e} must be a positive multiple of 16 (four stride-2 compressions)"
                )));
            }
        }
        if self.latent == 0 {
            return Err(TensorError::Dimension("latent size must be positive".into()));
        }
        Ok(())
    }

    pub fn spatial_rank(&self) -> usize {
        self.input_shape.len() - 1
    }

    /// Spatial extents at the bottleneck (input extents / 16).
    pub fn bottleneck_extents(&self) -> Vec<usize> {
        self.input_shape[1..].iter().map(|e| e / 16).collect()
    }

    /// Latent shape without the batch axis.
    pub fn latent_shape(&self) -> Vec<usize> {
        match self.bottleneck {
            Bottleneck::Dense => vec![self.latent],
            Bottleneck::Spatial => {
                let mut s = vec![self.latent];
                s.extend(self.bottleneck_extents());
                s
            }
        }
    }

    /// Flattened feature count after the fourth conv block.
    pub fn trunk_features(&self) -> usize {
        self.channels[3] * self.bottleneck_extents().iter().product::<usize>()
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
}

/// Ordered, name-indexed parameter set.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<Scalar>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }
}

/// Parameter tensors bound into a compute graph for one forward/backward
/// pass, in the same order as [`Parameters`].
pub struct BoundParams {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl BoundParams {
    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.by_name[name]]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Reparameterized draw from the encoded latent distribution.
pub struct LatentSample {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub epsilon: Tensor,
    pub z: Tensor,
}

/// Encoder/decoder pair with its parameter set.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub params: Parameters,
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<Scalar> {
    let std = (2.0 / fan_in as Scalar).sqrt();
    (0..n)
        .map(|_| {
            let v: Scalar = rng.sample(StandardNormal);
            v * std
        })
        .collect()
}

impl VaeModel {
    /// Builds a model with He-normal weights and zero biases from a seed.
    pub fn init(config: VaeConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::default();
        let sr = config.spatial_rank();
        let kvol = 4usize.pow(sr as u32);
        let widths = config.channels;
        let in_ch = config.input_shape[0];

        let conv_shape = |out_c: usize, in_c: usize| -> Vec<usize> {
            let mut s = vec![out_c, in_c];
            s.extend(std::iter::repeat(4).take(sr));
            s
        };
        let one_shape = |out_c: usize, in_c: usize| -> Vec<usize> {
            let mut s = vec![out_c, in_c];
            s.extend(std::iter::repeat(1).take(sr));
            s
        };

        // encoder trunk
        let mut prev = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            let fan_in = prev * kvol;
            params.push(
                &format!("enc.conv{}.w", i + 1),
                conv_shape(w, prev),
                he_normal(&mut rng, fan_in, w * prev * kvol),
            );
            params.push(&format!("enc.conv{}.b", i + 1), vec![w], vec![0.0; w]);
            prev = w;
        }
        // heads
        match config.bottleneck {
            Bottleneck::Spatial => {
                for head in ["mu", "logvar"] {
                    params.push(
                        &format!("enc.{head}.w"),
                        one_shape(config.latent, widths[3]),
                        he_normal(&mut rng, widths[3], config.latent * widths[3]),
                    );
                    params.push(
                        &format!("enc.{head}.b"),
                        vec![config.latent],
                        vec![0.0; config.latent],
                    );
                }
                params.push(
                    "dec.head.w",
                    one_shape(widths[3], config.latent),
                    he_normal(&mut rng, config.latent, widths[3] * config.latent),
                );
                params.push("dec.head.b", vec![widths[3]], vec![0.0; widths[3]]);
            }
            Bottleneck::Dense => {
                let feats = config.trunk_features();
                for head in ["mu", "logvar"] {
                    params.push(
                        &format!("enc.{head}.w"),
                        vec![config.latent, feats],
                        he_normal(&mut rng, feats, config.latent * feats),
                    );
                    params.push(
                        &format!("enc.{head}.b"),
                        vec![config.latent],
                        vec![0.0; config.latent],
                    );
                }
                params.push(
                    "dec.head.w",
                    vec![feats, config.latent],
                    he_normal(&mut rng, config.latent, feats * config.latent),
                );
                params.push("dec.head.b", vec![feats], vec![0.0; feats]);
            }
        }
        // decoder upsampling path; transposed-conv kernels are [Cin, Cout, k..]
        let mut up_in = widths[3];
        for (i, &w) in [widths[2], widths[1], widths[0], in_ch].iter().enumerate() {
            let mut shape = vec![up_in, w];
            shape.extend(std::iter::repeat(4).take(sr));
            let fan_in = up_in * kvol;
            params.push(
                &format!("dec.up{}.w", i + 1),
                shape,
                he_normal(&mut rng, fan_in, up_in * w * kvol),
            );
            params.push(&format!("dec.up{}.b", i + 1), vec![w], vec![0.0; w]);
            up_in = w;
        }
        Ok(VaeModel { config, params })
    }

    /// Zeroes the `mu`/`logvar` head parameters (test fixture: encode then
    /// yields exactly the prior).
    pub fn zero_heads(&mut self) {
        for name in ["enc.mu.w", "enc.mu.b", "enc.logvar.w", "enc.logvar.b"] {
            if let Some(p) = self.params.get_mut(name) {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Zeroes the final decoder layer, forcing a constant-0 output.
    pub fn zero_output_layer(&mut self) {
        for name in ["dec.up4.w", "dec.up4.b"] {
            if let Some(p) = self.params.get_mut(name) {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Snaps every parameter to its nearest f32-representable value, the
    /// precision used by the checkpoint format.
    pub fn quantize_f32(&mut self) {
        for p in self.params.iter_mut() {
            for v in &mut p.data {
                *v = *v as f32 as Scalar;
            }
        }
    }

    /// Creates graph leaves for every parameter.
    pub fn bind(&self, requires_grad: bool) -> BoundParams {
        let mut by_name = HashMap::new();
        let tensors = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                by_name.insert(p.name.clone(), i);
                let t = Tensor::from_vec(&p.shape, p.data.clone()).expect("validated parameter");
                if requires_grad {
                    t.requires_grad()
                } else {
                    t
                }
            })
            .collect();
        BoundParams { tensors, by_name }
    }

    /// Binds externally supplied tensors (in parameter order) as this
    /// model's parameters, preserving their autodiff graph identity.
    pub fn bind_tensors(&self, tensors: &[Tensor]) -> BoundParams {
        assert_eq!(tensors.len(), self.params.len());
        let mut by_name = HashMap::new();
        for (i, p) in self.params.iter().enumerate() {
            assert_eq!(tensors[i].shape(), p.shape.as_slice(), "{}", p.name);
            by_name.insert(p.name.clone(), i);
        }
        BoundParams {
            tensors: tensors.to_vec(),
            by_name,
        }
    }

    /// Gradient of each parameter after a backward pass, in parameter order.
    /// Parameters unreachable from the root get `None`.
    pub fn gradients<'a>(
        &self,
        bound: &BoundParams,
        grads: &'a crate::tensor::Gradients,
    ) -> Vec<Option<&'a [Scalar]>> {
        bound.tensors.iter().map(|t| grads.get(t)).collect()
    }

    fn check_batch_shape(&self, x: &Tensor) -> Result<(), TensorError> {
        if x.shape().len() != self.config.input_shape.len() + 1
            || x.shape()[1..] != *self.config.input_shape
        {
            return Err(TensorError::ShapeMismatch {
                context: "model input",
                lhs: x.shape().to_vec(),
                rhs: self.config.input_shape.clone(),
            });
        }
        Ok(())
    }

    /// Runs the encoder: four leaky-ReLU conv blocks, then the two heads.
    pub fn encode(&self, bound: &BoundParams, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        self.check_batch_shape(x)?;
        let alpha = self.config.leaky_slope;
        let mut h = x.clone();
        for i in 1..=4 {
            h = h
                .conv(
                    bound.tensor(&format!("enc.conv{i}.w")),
                    bound.tensor(&format!("enc.conv{i}.b")),
                    2,
                    1,
                )?
                .leaky_relu(alpha);
        }
        match self.config.bottleneck {
            Bottleneck::Spatial => {
                let mu = h.conv(bound.tensor("enc.mu.w"), bound.tensor("enc.mu.b"), 1, 0)?;
                let logvar =
                    h.conv(bound.tensor("enc.logvar.w"), bound.tensor("enc.logvar.b"), 1, 0)?;
                Ok((mu, logvar))
            }
            Bottleneck::Dense => {
                let batch = x.shape()[0];
                let flat = h.reshape(&[batch, self.config.trunk_features()])?;
                let mu = flat.dense(bound.tensor("enc.mu.w"), bound.tensor("enc.mu.b"))?;
                let logvar =
                    flat.dense(bound.tensor("enc.logvar.w"), bound.tensor("enc.logvar.b"))?;
                Ok((mu, logvar))
            }
        }
    }

    /// Runs the decoder: head, then four transposed-conv blocks, linear out.
    /// Hidden activations are leaky ReLU, matching the encoder, and the
    /// output layer is linear: a saturating output nonlinearity under the
    /// L1 reconstruction term leaves a vanishing-gradient constant-output
    /// attractor that stalls training on sparse volumes.
    pub fn decode(&self, bound: &BoundParams, z: &Tensor) -> Result<Tensor, TensorError> {
        let expected: Vec<usize> = self.config.latent_shape();
        if z.shape().len() != expected.len() + 1 || z.shape()[1..] != expected {
            return Err(TensorError::ShapeMismatch {
                context: "decoder latent",
                lhs: z.shape().to_vec(),
                rhs: expected,
            });
        }
        let batch = z.shape()[0];
        let alpha = self.config.leaky_slope;
        let mut h = match self.config.bottleneck {
            Bottleneck::Spatial => z
                .conv(bound.tensor("dec.head.w"), bound.tensor("dec.head.b"), 1, 0)?
                .leaky_relu(alpha),
            Bottleneck::Dense => {
                let flat = z.dense(bound.tensor("dec.head.w"), bound.tensor("dec.head.b"))?;
                let mut shape = vec![batch, self.config.channels[3]];
                shape.extend(self.config.bottleneck_extents());
                flat.leaky_relu(alpha).reshape(&shape)?
            }
        };
        for i in 1..=4 {
            h = h.conv_transpose(
                bound.tensor(&format!("dec.up{i}.w")),
                bound.tensor(&format!("dec.up{i}.b")),
                2,
                1,
            )?;
            if i < 4 {
                h = h.leaky_relu(alpha);
            }
        }
        Ok(h)
    }

    /// `z = mu + exp(0.5 * logvar) * epsilon`. Gradients flow to `mu` and
    /// `logvar`; `epsilon` is a constant draw.
    pub fn reparameterize(
        mu: &Tensor,
        logvar: &Tensor,
        epsilon: &Tensor,
    ) -> Result<LatentSample, TensorError> {
        if mu.shape() != logvar.shape() || mu.shape() != epsilon.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "reparameterize",
                lhs: mu.shape().to_vec(),
                rhs: logvar.shape().to_vec(),
            });
        }
        let sigma = logvar.mul_scalar(0.5).exp();
        let z = mu.add(&sigma.mul(epsilon)?)?;
        Ok(LatentSample {
            mu: mu.clone(),
            logvar: logvar.clone(),
            epsilon: epsilon.clone(),
            z,
        })
    }

    /// Standard-normal epsilon of the latent shape for a given batch size.
    pub fn sample_epsilon(&self, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut shape = vec![batch];
        shape.extend(self.config.latent_shape());
        let n: usize = shape.iter().product();
        let data: Vec<Scalar> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(&shape, data).expect("shape matches data")
    }

    /// Full encode, sample, decode pass.
    pub fn forward(
        &self,
        bound: &BoundParams,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, LatentSample), TensorError> {
        let (mu, logvar) = self.encode(bound, x)?;
        let epsilon = self.sample_epsilon(x.shape()[0], rng);
        let sample = Self::reparameterize(&mu, &logvar, &epsilon)?;
        let x_hat = self.decode(bound, &sample.z)?;
        Ok((x_hat, sample))
    }

    /// Deterministic reconstruction through the posterior mean (`epsilon` =
    /// 0); the default inference path.
    pub fn reconstruct_mean(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let bound = self.bind(false);
        let (mu, _) = self.encode(&bound, x)?;
        self.decode(&bound, &mu)
    }

    // ---- checkpoint I/O -------------------------------------------------

    /// Writes the `UADM` checkpoint: magic, version, config, then each
    /// parameter as (name, rank, extents, f32 little-endian payload).
    pub fn save(&self, path: &Path) -> Result<(), UadError> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.params.total_scalars() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(match self.config.dimensionality {
            Dimensionality::TwoD => 2,
            Dimensionality::ThreeD => 3,
        });
        buf.push(match self.config.bottleneck {
            Bottleneck::Spatial => 0,
            Bottleneck::Dense => 1,
        });
        buf.extend_from_slice(&(self.config.latent as u32).to_le_bytes());
        buf.push(self.config.input_shape.len() as u8);
        for &e in &self.config.input_shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &c in &self.config.channels {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.config.leaky_slope.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &e in &p.shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &p.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|source| FormatError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        file.write_all(&buf).map_err(|source| FormatError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    /// Reads a `UADM` checkpoint.
    pub fn load(path: &Path) -> Result<Self, UadError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| FormatError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut r = crate::volume::ByteReader::new(&bytes, path);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                path: path.to_path_buf(),
                expected: "UADM",
            }
            .into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            }
            .into());
        }
        let dimensionality = match r.u8()? {
            2 => Dimensionality::TwoD,
            3 => Dimensionality::ThreeD,
            other => {
                return Err(r.malformed(format!("bad dimensionality tag {other}")).into());
            }
        };
        let bottleneck = match r.u8()? {
            0 => Bottleneck::Spatial,
            1 => Bottleneck::Dense,
            other => {
                return Err(r.malformed(format!("bad bottleneck tag {other}")).into());
            }
        };
        let latent = r.u32()? as usize;
        let rank = r.u8()? as usize;
        let mut input_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input_shape.push(r.u32()? as usize);
        }
        let mut channels = [0usize; 4];
        for c in &mut channels {
            *c = r.u32()? as usize;
        }
        let leaky_slope = Scalar::from_le_bytes(
            r.take(8)?
                .try_into()
                .expect("8-byte slice"),
        );
        let config = VaeConfig {
            dimensionality,
            bottleneck,
            latent,
            input_shape,
            channels,
            leaky_slope,
        };
        config.validate()?;
        let n_params = r.u32()? as usize;
        let mut params = Parameters::default();
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| r.malformed(format!("parameter name not utf-8: {e}")))?;
            let prank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(prank);
            for _ in 0..prank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect();
            params.push(&name, shape, data);
        }
        r.expect_end()?;
        Ok(VaeModel { config, params })
    }
}
