//! The training loop: corpus iteration, per-step optimization, logs and checkpoints.
//!
//! A run directory contains
//!
//! * `manifest.json`: the full configuration, the corpus digest and the seed;
//! * `metrics.csv`: `step,epoch,loss` per optimizer step;
//! * `timing.csv`: wall-clock seconds per step, kept apart so that
//!   `metrics.csv` is byte-identical across runs with the same seed;
//! * `epochs.csv`: the image order used in every epoch;
//! * `checkpoints/epoch-NNNN/` after every epoch (and `step-NNNNNNNN/` when a
//!   step or time budget ends the run mid-epoch).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::{load_image, random_crop, ImageSample};
use crate::losses::{evaluate_loss, NegativeSamplingConfig};
use crate::models::{Architecture, CheckpointInfo, ForwardPass, Model, ModelConfig, ModelGrads};
use crate::optim::{sgd_step, ParamGroup, Parameter, SgdConfig, SgdState};
use crate::rng::{derive_rng, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: SgdConfig,
    /// Random negatives per repetition (position loss).
    pub negatives: usize,
    /// Negative draws accumulated per step (position loss).
    pub repetitions: usize,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub crop: usize,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: 10 negatives, 5 repetitions for the pixel model and 10
    /// otherwise, batch size 8, 256-pixel crops, 10 epochs.
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        let repetitions = if model.architecture == Architecture::Pixel { 5 } else { 10 };
        TrainConfig {
            model,
            optimizer: SgdConfig::default(),
            negatives: 10,
            repetitions,
            batch_size: 8,
            crop: 256,
            epochs: 10,
            max_steps: None,
            time_budget_secs: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.sampling().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.crop < self.model.min_input() {
            return Err(Error::InvalidArgument(format!(
                "crop {} is below the model's minimum input {}",
                self.crop,
                self.model.min_input()
            )));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::InvalidArgument("no epoch or step budget".into()));
        }
        if let Some(t) = self.time_budget_secs {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument("time budget must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn sampling(&self) -> NegativeSamplingConfig {
        NegativeSamplingConfig {
            mode: self.model.loss,
            negatives: self.negatives,
            repetitions: self.repetitions,
        }
    }
}

/// Training images, either files on disk or decoded samples.
#[derive(Clone, Debug)]
pub enum Corpus {
    Files(Vec<PathBuf>),
    Images(Vec<ImageSample>),
}

impl Corpus {
    /// Every PNG or JPEG file directly inside `dir`, sorted by name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::MissingInput(format!(
                "corpus directory {} does not exist",
                dir.display()
            )));
        }
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && is_image_path(&path) {
                files.push(path);
            }
        }
        if files.is_empty() {
            return Err(Error::MissingInput(format!(
                "no PNG or JPEG images in {}",
                dir.display()
            )));
        }
        files.sort();
        Ok(Corpus::Files(files))
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Files(f) => f.len(),
            Corpus::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, index: usize) -> Result<ImageSample> {
        match self {
            Corpus::Files(f) => load_image(&f[index]),
            Corpus::Images(i) => Ok(i[index].clone()),
        }
    }

    /// Digest over file names and sizes, or over the pixel data of in-memory samples.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        match self {
            Corpus::Files(files) => {
                for f in files {
                    let meta = fs::metadata(f).map_err(|e| Error::io(f, e))?;
                    let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    h.update((name.len() as u64).to_le_bytes());
                    h.update(name.as_bytes());
                    h.update(meta.len().to_le_bytes());
                }
            }
            Corpus::Images(images) => {
                for img in images {
                    h.update(img.pixels.to_bytes()?);
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// True for `.png`, `.jpg` and `.jpeg` (any case).
pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// A model with its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    state: SgdState,
}

impl Trainer {
    /// Fresh model initialized from the run seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), &mut derive_rng(config.seed, Purpose::Init, 0, 0))?;
        Self::from_model(model, config)
    }

    pub fn from_model(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::InvalidArgument("model does not match the training configuration".into()));
        }
        let o = &config.optimizer;
        let state = SgdState::new(o.lr, o.momentum, o.weight_decay, &group_shapes(&model));
        Ok(Trainer { model, config, state })
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    /// One optimizer step on a batch of `[3, H, W]` images. Returns the
    /// logged loss: the per-term loss summed over heads.
    pub fn step(&mut self, images: &[Tensor]) -> Result<f64> {
        let (loss, mut grads) = self.loss_and_grads(images)?;
        let mut groups = param_groups(&mut self.model, &mut grads, &self.config.optimizer);
        sgd_step(&mut groups, &mut self.state)?;
        Ok(loss)
    }

    /// Loss and gradients for a batch, without updating anything. The random
    /// draws are keyed to the current step.
    pub fn loss_and_grads(&self, images: &[Tensor]) -> Result<(f64, ModelGrads)> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.state.step;
        let seed = self.config.seed;
        let alpha = self.config.model.alpha;
        let passes: Vec<ForwardPass> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                self.model
                    .forward(img, alpha, &mut derive_rng(seed, Purpose::Noise, step, i as u64))
            })
            .collect::<Result<_>>()?;

        let mut grads = self.model.zero_grads();
        let mut per_image: Vec<Vec<Tensor>> = vec![Vec::with_capacity(self.model.heads.len()); images.len()];
        let sampling = self.config.sampling();
        let mut logged = 0.0;
        for (h, params) in self.model.heads.iter().enumerate() {
            let maps: Vec<Tensor> = passes.iter().map(|p| p.maps[h].values.clone()).collect();
            let mut rng = derive_rng(seed, Purpose::Negatives, step, h as u64);
            let out = evaluate_loss(&maps, &self.model.spec, params, &sampling, &mut rng)?;
            logged += out.per_term;
            grads.heads[h].add_assign(&out.param_grads)?;
            for (slot, g) in per_image.iter_mut().zip(out.feature_grads) {
                slot.push(g);
            }
        }
        if !logged.is_finite() {
            return Err(Error::Degenerate(format!("loss became {logged} at step {step}")));
        }

        let weight_grads: Vec<Vec<Tensor>> = passes
            .par_iter()
            .zip(&per_image)
            .map(|(pass, g)| self.model.backward(pass, g))
            .collect::<Result<_>>()?;
        for wg in &weight_grads {
            for (acc, g) in grads.weights.iter_mut().zip(wg) {
                acc.add_assign(g)?;
            }
        }
        Ok((logged, grads))
    }
}

fn group_shapes(model: &Model) -> Vec<Vec<Vec<usize>>> {
    vec![
        model.weights.iter().map(|w| w.shape().to_vec()).collect(),
        model.heads.iter().map(|p| p.log_c.shape().to_vec()).collect(),
        model.heads.iter().map(|p| p.logit_p.shape().to_vec()).collect(),
    ]
}

/// Network weights, log-precisions and prior logits as three groups. Prior
/// logits never receive weight decay.
fn param_groups<'a>(model: &'a mut Model, grads: &'a mut ModelGrads, cfg: &SgdConfig) -> Vec<ParamGroup<'a>> {
    let net = model
        .weights
        .iter_mut()
        .zip(grads.weights.iter_mut())
        .map(|(value, grad)| Parameter { value, grad })
        .collect();
    let mut precisions = Vec::new();
    let mut priors = Vec::new();
    for (p, g) in model.heads.iter_mut().zip(grads.heads.iter_mut()) {
        precisions.push(Parameter {
            value: &mut p.log_c,
            grad: &mut g.log_c,
        });
        priors.push(Parameter {
            value: &mut p.logit_p,
            grad: &mut g.logit_p,
        });
    }
    vec![
        ParamGroup {
            name: "network",
            lr_multiplier: 1.0,
            decay: true,
            params: net,
        },
        ParamGroup {
            name: "mrf-precision",
            lr_multiplier: cfg.mrf_lr_multiplier,
            decay: cfg.mrf_weight_decay,
            params: precisions,
        },
        ParamGroup {
            name: "mrf-prior",
            lr_multiplier: cfg.mrf_lr_multiplier,
            decay: false,
            params: priors,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Epochs,
    StepBudget,
    TimeBudget,
}

#[derive(Debug)]
pub struct TrainReport {
    pub model: Model,
    pub steps: u64,
    pub epochs_completed: usize,
    pub last_loss: Option<f64>,
    pub stop: StopReason,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    schema_version: u32,
    config: &'a TrainConfig,
    corpus_images: usize,
    corpus_sha256: String,
    network_parameters: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs training until the epoch, step or time budget is exhausted.
pub fn train(config: &TrainConfig, corpus: &Corpus, out_dir: impl AsRef<Path>) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::MissingInput("empty corpus".into()));
    }
    let out = out_dir.as_ref();
    let ckpt_root = out.join("checkpoints");
    fs::create_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;

    let manifest = RunManifest {
        schema_version: 1,
        config,
        corpus_images: corpus.len(),
        corpus_sha256: corpus.digest()?,
        network_parameters: 0,
    };
    let mut trainer = Trainer::new(config.clone())?;
    let manifest = RunManifest {
        network_parameters: trainer.model.network_parameter_count(),
        ..manifest
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;

    let metrics_path = out.join("metrics.csv");
    let timing_path = out.join("timing.csv");
    let epochs_path = out.join("epochs.csv");
    let mut metrics = create(&metrics_path)?;
    let mut timing = create(&timing_path)?;
    let mut epochs_log = create(&epochs_path)?;
    write_line(&mut metrics, &metrics_path, "step,epoch,loss")?;
    write_line(&mut timing, &timing_path, "step,wall_seconds")?;
    write_line(&mut epochs_log, &epochs_path, "epoch,order")?;

    let started = Instant::now();
    let run_info = serde_json::to_value(config)?;
    let info_at = |epoch: usize, step: u64| CheckpointInfo {
        epoch,
        step,
        seed: config.seed,
        run: run_info.clone(),
    };
    let mut checkpoints = Vec::new();
    let mut last_loss = None;
    let mut epochs_completed = 0;
    let epoch_limit = if config.epochs == 0 { usize::MAX } else { config.epochs };
    let crop = (config.crop, config.crop);

    let stop = 'outer: loop {
        if epochs_completed >= epoch_limit {
            break StopReason::Epochs;
        }
        let epoch = epochs_completed;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, Purpose::EpochOrder, epoch as u64, 0));
        let listed: Vec<String> = order.iter().map(|i| i.to_string()).collect();
        write_line(&mut epochs_log, &epochs_path, &format!("{epoch},{}", listed.join(" ")))?;

        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| trainer.steps_done() >= m) {
                break 'outer StopReason::StepBudget;
            }
            if config.time_budget_secs.is_some_and(|t| started.elapsed().as_secs_f64() >= t) {
                break 'outer StopReason::TimeBudget;
            }
            let step = trainer.steps_done();
            let t0 = Instant::now();
            let images: Vec<Tensor> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let img = corpus.load(idx)?;
                    let mut rng = derive_rng(config.seed, Purpose::Crop, step, slot as u64);
                    Ok(random_crop(&img, crop, &mut rng)?.pixels)
                })
                .collect::<Result<_>>()?;
            let loss = trainer.step(&images)?;
            last_loss = Some(loss);
            write_line(&mut metrics, &metrics_path, &format!("{step},{epoch},{loss}"))?;
            write_line(
                &mut timing,
                &timing_path,
                &format!("{step},{:.6}", t0.elapsed().as_secs_f64()),
            )?;
            log::debug!("step {step} epoch {epoch} loss {loss}");
        }
        epochs_completed += 1;
        let dir = ckpt_root.join(format!("epoch-{epochs_completed:04}"));
        trainer
            .model
            .save_checkpoint(&dir, &info_at(epochs_completed, trainer.steps_done()))?;
        log::info!("epoch {epochs_completed} done after {} steps", trainer.steps_done());
        checkpoints.push(dir);
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    };

    if stop != StopReason::Epochs {
        let dir = ckpt_root.join(format!("step-{:08}", trainer.steps_done()));
        trainer
            .model
            .save_checkpoint(&dir, &info_at(epochs_completed, trainer.steps_done()))?;
        checkpoints.push(dir);
    }
    for (w, p) in [(&mut metrics, &metrics_path), (&mut timing, &timing_path), (&mut epochs_log, &epochs_path)] {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(TrainReport {
        steps: trainer.steps_done(),
        model: trainer.model,
        epochs_completed,
        last_loss,
        stop,
        checkpoints,
    })
}
