//! Command implementations behind the `predseg` binary. Each command is a
//! plain function so the integration and acceptance suites can drive it
//! without spawning processes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use predseg::bench::{self, GroundTruth, GroundTruthIndex, PlotSeries, PrCurve};
use predseg::image_io::{load_gray, load_image};
use predseg::losses::LossKind;
use predseg::models::{Architecture, LayerConfig, Model, ModelConfig};
use predseg::mrf::connectivity_map;
use predseg::optim::SgdConfig;
use predseg::segment::{contours, ContourMap, SegmentConfig};
use predseg::tensor::read_tensor;
use predseg::train::{is_image_path, train, Corpus, TrainConfig, TrainReport};
use predseg::{Error, Result};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Exit status for a failed command: 2 for missing inputs, 3 for unreadable
/// or inconsistent checkpoints, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput(_) => 2,
        Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

fn default_batch_size() -> usize {
    8
}

fn default_crop() -> usize {
    256
}

fn default_negatives() -> usize {
    10
}

/// The JSON document driving `predseg train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub neighborhood: usize,
    pub alpha: f64,
    pub loss: LossKind,
    /// Replaces the architecture's default convolution stack.
    #[serde(default)]
    pub layers: Option<Vec<LayerConfig>>,
    /// Replaces the architecture's default head layers.
    #[serde(default)]
    pub heads: Option<Vec<usize>>,
    #[serde(default)]
    pub optimizer: SgdConfig,
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub time_budget_secs: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    /// Defaults to 5 for the pixel model and 10 otherwise.
    #[serde(default)]
    pub repetitions: Option<usize>,
    pub seed: u64,
}

impl RunConfig {
    /// Parses and validates a config document. Relative corpus and output
    /// paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("run config: {e}")))?;
        if cfg.schema_version != RUN_CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "run config schema_version {} is not supported (expected {RUN_CONFIG_VERSION})",
                cfg.schema_version
            )));
        }
        if cfg.corpus.is_relative() {
            cfg.corpus = base.join(&cfg.corpus);
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        cfg.train_config()?.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.architecture, self.neighborhood, self.alpha, self.loss);
        if let Some(layers) = &self.layers {
            m.layers = layers.clone();
        }
        if let Some(heads) = &self.heads {
            m.heads = heads.clone();
        }
        m
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::new(self.model_config(), self.seed);
        t.optimizer = self.optimizer;
        t.negatives = self.negatives;
        if let Some(r) = self.repetitions {
            t.repetitions = r;
        }
        t.batch_size = self.batch_size;
        t.crop = self.crop;
        t.epochs = self.epochs;
        t.max_steps = self.max_steps;
        t.time_budget_secs = self.time_budget_secs;
        t.validate()?;
        Ok(t)
    }
}

/// Command-line overrides applied on top of a run config.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

/// Trains a model as described by the config file. The output directory
/// receives `config.json` (the effective run config), the core run manifest,
/// metrics and checkpoints.
pub fn cmd_train(config_path: impl AsRef<Path>, overrides: &TrainOverrides) -> Result<TrainReport> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.output {
        cfg.output = o.clone();
    }
    let train_cfg = cfg.train_config()?;
    let corpus = Corpus::from_dir(&cfg.corpus)?;
    ensure_dir(&cfg.output)?;
    let echo = cfg.output.join("config.json");
    write_text(&echo, &serde_json::to_string_pretty(&cfg)?)?;
    log::info!("training {} on {} images", cfg.architecture.name(), corpus.len());
    let report = train(&train_cfg, &corpus, &cfg.output)?;
    log::info!("stopped after {} steps ({:?})", report.steps, report.stop);
    Ok(report)
}

/// Image files named by `input`: the file itself, or every image directly
/// inside the directory, sorted.
pub fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::MissingInput(format!("{} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    if files.is_empty() {
        return Err(Error::MissingInput(format!("no images in {}", input.display())));
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_model(checkpoint: &Path) -> Result<Model> {
    if !checkpoint.join("manifest.json").is_file() {
        return Err(Error::MissingInput(format!(
            "no checkpoint manifest in {}",
            checkpoint.display()
        )));
    }
    Ok(Model::load_checkpoint(checkpoint)?.0)
}

fn selected_heads(model: &Model, head: Option<usize>) -> Result<Vec<usize>> {
    match head {
        Some(h) if h < model.heads.len() => Ok(vec![h]),
        Some(h) => Err(Error::InvalidArgument(format!(
            "head {h} requested but the checkpoint has {} heads",
            model.heads.len()
        ))),
        None => Ok((0..model.heads.len()).collect()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| io_error(dir, source))
}

/// Writes `<stem>.head<k>/` connectivity directories (one PSTF per offset plus
/// a manifest) for every input image and selected head.
pub fn cmd_connectivity(checkpoint: &Path, input: &Path, out: &Path, head: Option<usize>) -> Result<Vec<PathBuf>> {
    let model = load_model(checkpoint)?;
    let heads = selected_heads(&model, head)?;
    let images = input_images(input)?;
    ensure_dir(out)?;
    let mut written = Vec::new();
    for path in &images {
        let img = load_image(path)?;
        let maps = model.feature_maps(&img.pixels)?;
        for &h in &heads {
            let cm = connectivity_map(&maps[h].values, &model.spec, &model.heads[h])?;
            let dir = out.join(format!("{}.head{h}", stem(path)));
            cm.save(&dir)?;
            written.push(dir);
        }
    }
    Ok(written)
}

/// Writes `<stem>.head<k>.png` (16-bit) and `<stem>.head<k>.pstf` contour
/// maps at input resolution for every input image and selected head.
pub fn cmd_contours(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    head: Option<usize>,
    segment: &SegmentConfig,
) -> Result<Vec<PathBuf>> {
    let model = load_model(checkpoint)?;
    let heads = selected_heads(&model, head)?;
    let images = input_images(input)?;
    ensure_dir(out)?;
    let mut written = Vec::new();
    for path in &images {
        let img = load_image(path)?;
        let maps = model.feature_maps(&img.pixels)?;
        for &h in &heads {
            let mut c = contours(&maps[h], &model.spec, &model.heads[h], segment)?;
            if (c.height, c.width) != (img.height(), img.width()) {
                c = resize_contour(&c, img.height(), img.width());
            }
            let base = format!("{}.head{h}", stem(path));
            let png = out.join(format!("{base}.png"));
            let pstf = out.join(format!("{base}.pstf"));
            c.save_png(&png)?;
            c.save_pstf(&pstf)?;
            log::info!("{} head {h} -> {}", path.display(), png.display());
            written.push(png);
            written.push(pstf);
        }
    }
    Ok(written)
}

/// Crops or pads (by edge replication) a contour map to the image size; the
/// stride chain may round the map size down by a few pixels.
fn resize_contour(c: &ContourMap, h: usize, w: usize) -> ContourMap {
    let values = (0..h * w)
        .map(|i| {
            let y = (i / w).min(c.height - 1);
            let x = (i % w).min(c.width - 1);
            c.values[y * c.width + x]
        })
        .collect();
    ContourMap { height: h, width: w, values }
}

/// Benchmark settings for `cmd_eval`.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Which head's contour files to read; `None` also accepts files without
    /// a head suffix and otherwise uses head 0.
    pub head: Option<usize>,
    pub thresholds: usize,
    /// Matching tolerance as a fraction of the image diagonal.
    pub max_dist: f64,
    /// Curve label in the plot.
    pub label: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            head: None,
            thresholds: bench::DEFAULT_THRESHOLDS,
            max_dist: bench::DEFAULT_MAX_DIST,
            label: "predseg".into(),
        }
    }
}

pub const PR_CSV: &str = "pr.csv";
pub const BENCH_JSON: &str = "bench.json";
pub const PR_SVG: &str = "pr.svg";

/// Candidate contour files for an image id, in order of preference.
fn contour_candidates(dir: &Path, id: &str, head: Option<usize>) -> Vec<PathBuf> {
    let k = head.unwrap_or(0);
    let mut names = vec![format!("{id}.head{k}.pstf"), format!("{id}.head{k}.png")];
    if head.is_none() {
        names.push(format!("{id}.pstf"));
        names.push(format!("{id}.png"));
    }
    names.into_iter().map(|n| dir.join(n)).collect()
}

/// Image ids of every contour file in `dir`.
fn contour_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("pstf") | Some("png"))
        })
        .map(|p| {
            let s = stem(&p);
            match s.rsplit_once(".head") {
                Some((id, k)) if k.parse::<usize>().is_ok() => id.to_string(),
                _ => s,
            }
        })
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn load_contour(path: &Path) -> Result<ContourMap> {
    let t = if path.extension().and_then(|e| e.to_str()) == Some("pstf") {
        read_tensor(path)?
    } else {
        load_gray(path)?
    };
    ContourMap::from_tensor(&t)
}

/// Scores a directory of contour maps against a ground-truth directory (see
/// [`GroundTruthIndex`]) and writes the pooled PR curve, the summary JSON and
/// an SVG plot into `out`.
pub fn cmd_eval(contour_dir: &Path, gt_dir: &Path, out: &Path, opts: &EvalOptions) -> Result<bench::BenchResult> {
    if !contour_dir.is_dir() {
        return Err(Error::MissingInput(format!("{} does not exist", contour_dir.display())));
    }
    let found = contour_ids(contour_dir)?;
    if found.is_empty() {
        return Err(Error::MissingInput(format!("no contour maps in {}", contour_dir.display())));
    }
    let index = GroundTruthIndex::read(gt_dir)?;
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for entry in &index.images {
        match contour_candidates(contour_dir, &entry.id, opts.head).into_iter().find(|p| p.is_file()) {
            Some(p) => pairs.push((entry.id.clone(), p)),
            None => missing.push(entry.id.clone()),
        }
    }
    let extra: Vec<&String> = found.iter().filter(|id| !index.images.iter().any(|e| &e.id == *id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "image ids differ: no contour map for [{}]; no ground truth for [{}]",
            missing.join(", "),
            extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut maps = Vec::with_capacity(pairs.len());
    let mut truths = Vec::with_capacity(pairs.len());
    for (id, path) in &pairs {
        let gt: GroundTruth = index.load(gt_dir, id)?;
        maps.push((id.clone(), load_contour(path)?));
        truths.push(gt);
    }
    let thresholds = bench::thresholds(opts.thresholds);
    let (curve, result) = bench::evaluate(&maps, &truths, &thresholds, opts.max_dist)?;
    ensure_dir(out)?;
    write_text(&out.join(PR_CSV), &curve.to_csv())?;
    write_text(&out.join(BENCH_JSON), &serde_json::to_string_pretty(&result)?)?;
    let series = PlotSeries {
        label: opts.label.clone(),
        points: curve_points(&curve),
    };
    write_text(&out.join(PR_SVG), &bench::pr_svg(&[series]))?;
    log::info!(
        "ODS {:.4} OIS {:.4} AP {:.4} over {} images",
        result.f_ods,
        result.f_ois,
        result.ap,
        pairs.len()
    );
    Ok(result)
}

fn curve_points(curve: &PrCurve) -> Vec<(f64, f64)> {
    curve.recall().into_iter().zip(curve.precision()).collect()
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| io_error(path, source))
}

/// Plots one or more PR CSV files (as written by `cmd_eval`) into one SVG.
/// Each input is `(path, label)`.
pub fn cmd_pr_plot(inputs: &[(PathBuf, String)], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::MissingInput("no PR curves to plot".into()));
    }
    let series = inputs
        .iter()
        .map(|(path, label)| {
            if !path.is_file() {
                return Err(Error::MissingInput(format!("{} does not exist", path.display())));
            }
            bench::read_pr_csv(path, label)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_text(out, &bench::pr_svg(&series))
}
