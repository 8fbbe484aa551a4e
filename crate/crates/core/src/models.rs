//! Feature extractors with MRF heads.
//!
//! Three architectures are provided:
//!
//! * `pixel`: the normalized RGB values themselves, no network parameters.
//! * `linear`: one bank of 50 linear 11x11 filters.
//! * `predseg1`: a four-layer convolutional network whose first layer is a
//!   learnable stride-2 downsampler.
//!
//! Every head normalizes its layer's output per channel, optionally mixes in
//! Gaussian noise, and owns one set of coupling parameters.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Padding, Tape, Var, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::mrf::{CouplingParams, NeighborhoodSpec, Offset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Pixel,
    Linear,
    Predseg1,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Pixel => "pixel",
            Architecture::Linear => "linear",
            Architecture::Predseg1 => "predseg1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Apply a relu to the layer output before it feeds the next layer or head.
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Convolution stack; empty for the pixel model.
    pub layers: Vec<LayerConfig>,
    /// Neighborhood size: 4, 8, 12 or 20.
    pub neighborhood: usize,
    /// Noise level mixed into every head's normalized features during training.
    pub alpha: f64,
    pub loss: LossKind,
    /// Layers carrying an MRF head. For the pixel model, layer 0 is the image.
    pub heads: Vec<usize>,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, neighborhood: usize, alpha: f64, loss: LossKind) -> Self {
        let (layers, heads) = match architecture {
            Architecture::Pixel => (vec![], vec![0]),
            Architecture::Linear => (
                vec![LayerConfig {
                    out_channels: 50,
                    kernel: 11,
                    stride: 1,
                    relu: false,
                }],
                vec![0],
            ),
            Architecture::Predseg1 => (
                vec![
                    LayerConfig {
                        out_channels: 3,
                        kernel: 3,
                        stride: 2,
                        relu: false,
                    },
                    LayerConfig {
                        out_channels: 32,
                        kernel: 7,
                        stride: 1,
                        relu: true,
                    },
                    LayerConfig {
                        out_channels: 64,
                        kernel: 3,
                        stride: 2,
                        relu: true,
                    },
                    LayerConfig {
                        out_channels: 64,
                        kernel: 3,
                        stride: 1,
                        relu: true,
                    },
                ],
                vec![0, 1],
            ),
        };
        ModelConfig {
            architecture,
            layers,
            neighborhood,
            alpha,
            loss,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        NeighborhoodSpec::standard(self.neighborhood)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.heads.is_empty() {
            return Err(Error::InvalidArgument("at least one head is required".into()));
        }
        let mut sorted = self.heads.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.heads.len() {
            return Err(Error::InvalidArgument("duplicate head layers".into()));
        }
        match self.architecture {
            Architecture::Pixel => {
                if !self.layers.is_empty() || self.heads != [0] {
                    return Err(Error::InvalidArgument(
                        "the pixel model has no layers and a single head on the image".into(),
                    ));
                }
            }
            _ => {
                if self.layers.is_empty() {
                    return Err(Error::InvalidArgument("network without layers".into()));
                }
                if let Some(&h) = self.heads.iter().find(|&&h| h >= self.layers.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "head on layer {h}, but the network has {} layers",
                        self.layers.len()
                    )));
                }
                for (i, l) in self.layers.iter().enumerate() {
                    if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Channels of the map at `layer` (3 for the pixel model).
    pub fn channels(&self, layer: usize) -> usize {
        match self.architecture {
            Architecture::Pixel => 3,
            _ => self.layers[layer].out_channels,
        }
    }

    /// Product of strides up to and including `layer`.
    pub fn downsampling(&self, layer: usize) -> usize {
        match self.architecture {
            Architecture::Pixel => 1,
            _ => self.layers[..=layer].iter().map(|l| l.stride).product(),
        }
    }

    /// Smallest input side accepted by the forward pass.
    pub fn min_input(&self) -> usize {
        match self.architecture {
            Architecture::Pixel => 2,
            Architecture::Linear => self.layers[0].kernel.max(2),
            Architecture::Predseg1 => 16,
        }
    }

    fn deepest_head(&self) -> usize {
        self.heads.iter().copied().max().unwrap_or(0)
    }
}

/// A normalized feature map produced by one head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[k, H', W']`, per-channel normalized, plus the training noise when alpha > 0.
    pub values: Tensor,
    pub layer: usize,
    /// Input pixels per map pixel along each axis.
    pub downsampling: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Network weights together with the MRF heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub spec: NeighborhoodSpec,
    /// One `[C_out, C_in, k, k]` kernel per layer.
    pub weights: Vec<Tensor>,
    /// Coupling parameters per head, in the order of `config.heads`.
    pub heads: Vec<CouplingParams>,
}

/// Gradients for every parameter of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub weights: Vec<Tensor>,
    pub heads: Vec<CouplingParams>,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// One recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub weight_vars: Vec<Var>,
    /// Tape node of each head's (normalized, noised) feature map.
    pub head_vars: Vec<Var>,
    pub maps: Vec<FeatureMap>,
}

impl Model {
    /// Fresh model with kernels uniform in `±1/sqrt(fan_in)` and coupling
    /// parameters at `c = 1`, `p = 0.5`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let spec = NeighborhoodSpec::standard(config.neighborhood)?;
        let mut weights = Vec::with_capacity(config.layers.len());
        let mut c_in = 3;
        for l in &config.layers {
            let fan_in = c_in * l.kernel * l.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = l.out_channels * fan_in;
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            weights.push(Tensor::new(vec![l.out_channels, c_in, l.kernel, l.kernel], data)?);
            c_in = l.out_channels;
        }
        let heads = config
            .heads
            .iter()
            .map(|&h| CouplingParams::init(spec.len(), config.channels(h)))
            .collect();
        Ok(Model {
            config,
            spec,
            weights,
            heads,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            weights: self.weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            heads: self.heads.iter().map(CouplingParams::zeros_like).collect(),
        }
    }

    pub fn network_parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Records the forward pass for one `[3, H, W]` image.
    ///
    /// Layers below the deepest head are evaluated; deeper layers are skipped.
    pub fn forward<R: Rng + ?Sized>(&self, image: &Tensor, alpha: f64, rng: &mut R) -> Result<ForwardPass> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(Error::Shape(format!(
                "{} model needs inputs of at least {min}x{min}, got {h}x{w}",
                self.config.architecture.name()
            )));
        }
        let mut tape = Tape::new();
        let input = tape.constant(image.clone());
        let weight_vars: Vec<Var> = self.weights.iter().map(|k| tape.param(k.clone())).collect();

        let mut layer_out: Vec<Var> = Vec::new();
        if self.config.architecture != Architecture::Pixel {
            let mut x = input;
            for (i, l) in self.config.layers[..=self.config.deepest_head()].iter().enumerate() {
                let y = tape.conv2d(x, weight_vars[i], (l.stride, l.stride), Padding::ReflectSame)?;
                x = if l.relu { tape.relu(y) } else { y };
                layer_out.push(x);
            }
        } else {
            layer_out.push(input);
        }

        let mut head_vars = Vec::with_capacity(self.config.heads.len());
        let mut maps = Vec::with_capacity(self.config.heads.len());
        for &layer in &self.config.heads {
            let normalized = tape.normalize_per_channel(layer_out[layer], NORMALIZE_EPS)?;
            let noised = tape.inject_noise(normalized, alpha, rng)?;
            let values = tape.value(noised).clone();
            let factor = self.config.downsampling(layer);
            let (_, mh, mw) = values.dims3()?;
            if mh != h.div_ceil(factor) || mw != w.div_ceil(factor) {
                return Err(Error::Shape(format!(
                    "layer {layer} map is {mh}x{mw}, inconsistent with {h}x{w} input at factor {factor}"
                )));
            }
            head_vars.push(noised);
            maps.push(FeatureMap {
                values,
                layer,
                downsampling: factor,
            });
        }
        Ok(ForwardPass {
            tape,
            weight_vars,
            head_vars,
            maps,
        })
    }

    /// Inference without noise.
    pub fn feature_maps(&self, image: &Tensor) -> Result<Vec<FeatureMap>> {
        let mut unused = placeholder_rng();
        Ok(self.forward(image, 0.0, &mut unused)?.maps)
    }

    /// Backpropagates head feature gradients into kernel gradients.
    pub fn backward(&self, pass: &ForwardPass, head_grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if head_grads.len() != pass.head_vars.len() {
            return Err(Error::Shape(format!(
                "{} head gradients for {} heads",
                head_grads.len(),
                pass.head_vars.len()
            )));
        }
        if self.weights.is_empty() {
            return Ok(vec![]);
        }
        let seeds: Vec<(Var, &Tensor)> = pass.head_vars.iter().copied().zip(head_grads.iter()).collect();
        let grads: Gradients = pass.tape.backward(&seeds)?;
        Ok(pass
            .weight_vars
            .iter()
            .zip(&self.weights)
            .map(|(&v, w)| grads.get_or_zeros(v, w.shape()))
            .collect())
    }

    /// Writes `manifest.json` and one PSTF file per parameter into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, info: &CheckpointInfo) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        let mut put = |name: String, t: &Tensor| -> Result<()> {
            let bytes = t.to_bytes()?;
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name,
                sha256: hex_digest(&bytes),
            });
            Ok(())
        };
        for (i, w) in self.weights.iter().enumerate() {
            put(format!("layer{i}.weight.pstf"), w)?;
        }
        for (h, p) in self.heads.iter().enumerate() {
            put(format!("head{h}.log_c.pstf"), &p.log_c)?;
            put(format!("head{h}.logit_p.pstf"), &p.logit_p)?;
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            architecture: self.config.architecture,
            config: self.config.clone(),
            offsets: self.spec.offsets().to_vec(),
            info: info.clone(),
            tensors,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint directory, verifying every tensor's digest and shape.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointInfo)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                m.format_version
            )));
        }
        if m.architecture != m.config.architecture {
            return Err(Error::Checkpoint("architecture disagrees with config".into()));
        }
        m.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
        let spec = NeighborhoodSpec::standard(m.config.neighborhood)?;
        if spec.offsets() != m.offsets.as_slice() {
            return Err(Error::Checkpoint("offsets disagree with the neighborhood size".into()));
        }
        let mut template = Model::new(m.config.clone(), &mut placeholder_rng())?;
        let read = |name: String, shape: &[usize]| -> Result<Tensor> {
            let entry = m
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {name}")))?;
            let path = dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if hex_digest(&bytes) != entry.sha256 {
                return Err(Error::Checkpoint(format!("{name}: digest mismatch")));
            }
            let t = Tensor::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for i in 0..template.weights.len() {
            let shape = template.weights[i].shape().to_vec();
            template.weights[i] = read(format!("layer{i}.weight.pstf"), &shape)?;
        }
        for h in 0..template.heads.len() {
            let p = &mut template.heads[h];
            p.log_c = read(format!("head{h}.log_c.pstf"), p.log_c.shape())?;
            p.logit_p = read(format!("head{h}.logit_p.pstf"), p.logit_p.shape())?;
        }
        Ok((template, m.info))
    }
}

const CHECKPOINT_VERSION: u32 = 1;

/// Generator for code paths that draw nothing (alpha = 0) or whose draws are overwritten.
fn placeholder_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Training state recorded alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Run seed; with `step` it determines every later random draw.
    pub seed: u64,
    /// Free-form run description (the training configuration).
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    architecture: Architecture,
    config: ModelConfig,
    offsets: Vec<Offset>,
    info: CheckpointInfo,
    tensors: Vec<TensorEntry>,
}

/// Normalized pixel features of one image (the pixel model without noise).
pub fn pixel_forward(image: &Tensor) -> Result<FeatureMap> {
    let model = Model::new(
        ModelConfig::new(Architecture::Pixel, 4, 0.0, LossKind::Factor),
        &mut placeholder_rng(),
    )?;
    Ok(model.feature_maps(image)?.remove(0))
}
