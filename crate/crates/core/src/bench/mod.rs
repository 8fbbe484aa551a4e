//! Boundary-detection benchmark: thresholding, thinning, tolerance matching
//! against human annotations, precision/recall curves and their summaries.

mod matching;
mod thin;

pub use matching::{correspond, min_cost_max_matching, Matching};
pub use thin::thin;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::load_gray;
use crate::segment::ContourMap;

/// Matching tolerance as a fraction of the image diagonal.
pub const DEFAULT_MAX_DIST: f64 = 0.0075;
pub const DEFAULT_THRESHOLDS: usize = 33;

/// Annotator boundary maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub annotators: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn new(height: usize, width: usize, annotators: Vec<Vec<bool>>) -> Result<Self> {
        if annotators.is_empty() {
            return Err(Error::InvalidArgument("ground truth needs at least one annotator".into()));
        }
        if let Some(a) = annotators.iter().find(|a| a.len() != height * width) {
            return Err(Error::Shape(format!(
                "annotator map has {} pixels, expected {height}x{width}",
                a.len()
            )));
        }
        Ok(GroundTruth {
            height,
            width,
            annotators,
        })
    }

    /// Reads binary annotator PNGs; pixels above one half are boundary.
    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let mut size = None;
        let mut annotators = Vec::with_capacity(paths.len());
        for p in paths {
            let t = load_gray(p)?;
            let (h, w) = (t.shape()[0], t.shape()[1]);
            if *size.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Shape(format!(
                    "{} is {h}x{w}, other annotators differ",
                    p.as_ref().display()
                )));
            }
            annotators.push(t.data().iter().map(|&v| v > 0.5).collect());
        }
        let (h, w) = size.unwrap_or((0, 0));
        GroundTruth::new(h, w, annotators)
    }
}

/// One entry of a ground-truth `index.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    pub id: String,
    /// Annotator PNG paths, relative to the index file.
    pub annotators: Vec<String>,
}

/// Layout of a ground-truth directory: `index.json` lists every image id
/// with its annotator boundary PNGs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthIndex {
    pub schema_version: u32,
    pub images: Vec<GroundTruthEntry>,
}

impl GroundTruthIndex {
    pub const FILE: &'static str = "index.json";

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(Self::FILE);
        if !path.is_file() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: GroundTruthIndex = serde_json::from_str(&text)?;
        if index.schema_version != 1 {
            return Err(Error::Format(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                index.schema_version
            )));
        }
        Ok(index)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(Self::FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self, dir: impl AsRef<Path>, id: &str) -> Result<GroundTruth> {
        let entry = self
            .images
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::MissingInput(format!("no ground truth for image {id}")))?;
        let paths: Vec<_> = entry.annotators.iter().map(|a| dir.as_ref().join(a)).collect();
        GroundTruth::load(&paths)
    }
}

/// Match counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrCounts {
    pub matched_pred: usize,
    pub pred: usize,
    pub matched_gt: usize,
    pub gt: usize,
}

impl PrCounts {
    /// An empty prediction is vacuously precise.
    pub fn precision(&self) -> f64 {
        if self.pred == 0 {
            1.0
        } else {
            self.matched_pred as f64 / self.pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            0.0
        } else {
            self.matched_gt as f64 / self.gt as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

impl std::ops::Add for PrCounts {
    type Output = PrCounts;
    fn add(self, o: PrCounts) -> PrCounts {
        PrCounts {
            matched_pred: self.matched_pred + o.matched_pred,
            pred: self.pred + o.pred,
            matched_gt: self.matched_gt + o.matched_gt,
            gt: self.gt + o.gt,
        }
    }
}

/// Harmonic mean of precision and recall, zero when both are zero.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Match counts of a thresholded boundary map against every annotator.
/// `max_dist_frac` scales the image diagonal into a pixel tolerance.
pub fn match_boundaries(pred: &[bool], gt: &GroundTruth, max_dist_frac: f64) -> Result<PrCounts> {
    if pred.len() != gt.height * gt.width {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth is {}x{}",
            pred.len(),
            gt.height,
            gt.width
        )));
    }
    if !(max_dist_frac > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {max_dist_frac}")));
    }
    let (h, w) = (gt.height, gt.width);
    let max_dist = max_dist_frac * ((h * h + w * w) as f64).sqrt();
    let mut pred_any = vec![false; h * w];
    let mut counts = PrCounts {
        pred: pred.iter().filter(|&&b| b).count(),
        ..PrCounts::default()
    };
    for a in &gt.annotators {
        let (ph, gh) = correspond(pred, a, h, w, max_dist);
        pred_any.iter_mut().zip(&ph).for_each(|(acc, &m)| *acc |= m);
        counts.matched_gt += gh.iter().filter(|&&b| b).count();
        counts.gt += a.iter().filter(|&&b| b).count();
    }
    counts.matched_pred = pred_any.iter().filter(|&&b| b).count();
    Ok(counts)
}

/// `count` evenly spaced interior thresholds `k / (count + 1)`, descending.
pub fn thresholds(count: usize) -> Vec<f64> {
    (1..=count).rev().map(|k| k as f64 / (count + 1) as f64).collect()
}

/// Precision/recall counts per threshold; thresholds are stored descending so
/// recall grows along the curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub counts: Vec<PrCounts>,
}

impl PrCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.counts.iter().map(PrCounts::precision).collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        self.counts.iter().map(PrCounts::recall).collect()
    }

    pub fn f(&self) -> Vec<f64> {
        self.counts.iter().map(PrCounts::f_measure).collect()
    }

    /// Index of the best F; ties keep the highest threshold.
    pub fn best(&self) -> usize {
        let f = self.f();
        (0..f.len()).fold(0, |b, i| if f[i] > f[b] { i } else { b })
    }

    /// Sums the counts of curves sharing the same thresholds.
    pub fn pooled(curves: &[PrCurve]) -> Result<PrCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::InvalidArgument("no curves to pool".into()))?;
        if curves.iter().any(|c| c.thresholds != first.thresholds) {
            return Err(Error::InvalidArgument("curves use different thresholds".into()));
        }
        let counts = (0..first.len())
            .map(|i| curves.iter().fold(PrCounts::default(), |acc, c| acc + c.counts[i]))
            .collect();
        Ok(PrCurve {
            thresholds: first.thresholds.clone(),
            counts,
        })
    }

    /// `threshold,precision,recall,f` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f\n");
        for (t, c) in self.thresholds.iter().zip(&self.counts) {
            let _ = writeln!(out, "{},{},{},{}", t, c.precision(), c.recall(), c.f_measure());
        }
        out
    }
}

/// Binarizes `contour >= t` at each threshold, thins the result and matches
/// it against the annotators.
pub fn pr_curve(contour: &ContourMap, gt: &GroundTruth, thresholds: &[f64], max_dist_frac: f64) -> Result<PrCurve> {
    if (contour.height, contour.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "contour map is {}x{}, ground truth is {}x{}",
            contour.height, contour.width, gt.height, gt.width
        )));
    }
    if let Some(i) = contour.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "contour value {} at index {i} is outside [0, 1]",
            contour.values[i]
        )));
    }
    if thresholds.windows(2).any(|p| p[0] <= p[1]) {
        return Err(Error::InvalidArgument("thresholds must be strictly descending".into()));
    }
    let counts = thresholds
        .par_iter()
        .map(|&t| {
            let bin: Vec<bool> = contour.values.iter().map(|&v| v >= t).collect();
            match_boundaries(&thin(&bin, contour.height, contour.width), gt, max_dist_frac)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrCurve {
        thresholds: thresholds.to_vec(),
        counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl OperatingPoint {
    fn at(curve: &PrCurve, i: usize) -> Self {
        let c = curve.counts[i];
        OperatingPoint {
            threshold: curve.thresholds[i],
            precision: c.precision(),
            recall: c.recall(),
            f: c.f_measure(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBest {
    pub id: String,
    #[serde(flatten)]
    pub point: OperatingPoint,
}

/// Dataset summary of a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// F at the best threshold shared by all images.
    #[serde(rename = "F_ODS")]
    pub f_ods: f64,
    /// F of the counts pooled at each image's own best threshold.
    #[serde(rename = "F_OIS")]
    pub f_ois: f64,
    /// Area under the pooled precision/recall curve.
    #[serde(rename = "AP")]
    pub ap: f64,
    pub ods: OperatingPoint,
    pub ois_precision: f64,
    pub ois_recall: f64,
    pub images: usize,
    pub per_image: Vec<ImageBest>,
    pub curve: Vec<OperatingPoint>,
}

/// Trapezoid area under a precision/recall curve ordered by increasing
/// recall, starting from recall zero at the first precision.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let p = curve.precision();
    let r = curve.recall();
    if p.is_empty() {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = vec![(0.0, p[0])];
    pts.extend(r.iter().copied().zip(p.iter().copied()));
    pts.windows(2).map(|s| (s[1].0 - s[0].0) * (s[0].1 + s[1].1) / 2.0).sum()
}

/// ODS, OIS and average precision over per-image curves.
pub fn summarize(curves: &[(String, PrCurve)]) -> Result<BenchResult> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one image".into()));
    }
    let all: Vec<PrCurve> = curves.iter().map(|(_, c)| c.clone()).collect();
    let pooled = PrCurve::pooled(&all)?;
    let ods = OperatingPoint::at(&pooled, pooled.best());
    let mut ois_counts = PrCounts::default();
    let per_image = curves
        .iter()
        .map(|(id, c)| {
            let b = c.best();
            ois_counts = ois_counts + c.counts[b];
            ImageBest {
                id: id.clone(),
                point: OperatingPoint::at(c, b),
            }
        })
        .collect();
    Ok(BenchResult {
        f_ods: ods.f,
        f_ois: ois_counts.f_measure(),
        ap: average_precision(&pooled),
        ods,
        ois_precision: ois_counts.precision(),
        ois_recall: ois_counts.recall(),
        images: curves.len(),
        per_image,
        curve: (0..pooled.len()).map(|i| OperatingPoint::at(&pooled, i)).collect(),
    })
}

/// Evaluates every `(id, contour)` against the matching ground truth.
pub fn evaluate(
    contours: &[(String, ContourMap)],
    truths: &[GroundTruth],
    thresholds: &[f64],
    max_dist_frac: f64,
) -> Result<(PrCurve, BenchResult)> {
    if contours.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} contour maps but {} ground truths",
            contours.len(),
            truths.len()
        )));
    }
    let curves = contours
        .par_iter()
        .zip(truths)
        .map(|((id, c), gt)| Ok((id.clone(), pr_curve(c, gt, thresholds, max_dist_frac)?)))
        .collect::<Result<Vec<_>>>()?;
    let result = summarize(&curves)?;
    let all: Vec<PrCurve> = curves.into_iter().map(|(_, c)| c).collect();
    Ok((PrCurve::pooled(&all)?, result))
}

/// A labelled `(recall, precision)` polyline.
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads a `threshold,precision,recall,f` CSV back into a plot series.
pub fn read_pr_csv(path: impl AsRef<Path>, label: impl Into<String>) -> Result<PlotSeries> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("threshold,precision,recall,f") {
        return Err(Error::Format(format!("{}: missing PR header", path.display())));
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 2)))?;
        if cols.len() != 4 {
            return Err(Error::Format(format!("{} line {}: expected 4 columns", path.display(), n + 2)));
        }
        points.push((cols[2], cols[1]));
    }
    Ok(PlotSeries {
        label: label.into(),
        points,
    })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Precision (y) against recall (x) on the unit square, with iso-F guides.
pub fn pr_svg(series: &[PlotSeries]) -> String {
    let (size, margin) = (400.0, 50.0);
    let px = |r: f64| margin + r * size;
    let py = |p: f64| margin + (1.0 - p) * size;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" font-family="sans-serif" font-size="12">"#,
        size + 2.0 * margin
    );
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{size}" height="{size}" fill="white" stroke="black"/>"#,
        m = margin
    );
    for f in [0.2, 0.4, 0.6, 0.8] {
        // p = f r / (2 r - f) for r in (f / 2, 1]
        let pts: Vec<String> = (0..=50)
            .map(|k| {
                let r = f / 2.0 + (1.0 - f / 2.0) * (k as f64 / 50.0);
                let p = (f * r / (2.0 * r - f)).min(1.0);
                format!("{:.2},{:.2}", px(r), py(p))
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#bbbbbb" stroke-dasharray="4 3"/>"##,
            pts.join(" ")
        );
    }
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, px(v), py(0.0) + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, px(0.0) - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Recall</text>"#, px(0.5), py(0.0) + 38.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">Precision</text>"#,
        py(0.5),
        py(0.5)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(r, p)| format!("{:.2},{:.2}", px(r), py(p)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            px(0.05),
            py(0.05) - 16.0 * (series.len() - 1 - i) as f64,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
