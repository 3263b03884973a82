//! Binarization, confusion counts and the precision / recall / F-measure /
//! PWC report.
//!
//! Counts are summed over all frames of a video before metrics are computed.
//! A category's metrics are the mean over its videos and the overall metrics
//! are the mean over categories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::{discover_videos, load_sequence, FrameSequence, LabelMap, GT_MOVING, GT_OUTSIDE_ROI, GT_SHADOW, GT_STATIC, GT_UNKNOWN};
use crate::error::{Error, Result};
use crate::model::Mcrcnn;
use crate::tensor::Tensor;

/// 1 where `prob ≥ threshold`, else 0. The comparison happens in `f32`, the
/// precision of the map, so a stored 0.7 passes a 0.7 threshold.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let t = threshold as f32;
    Ok(prob.map(|p| if p >= t { 1.0 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Compares a binary `[1, 1, H, W]` mask with ground-truth codes. Codes 85
/// and 170 are skipped; 0 and 50 are background; 255 is foreground.
pub fn accumulate_confusion(mask: &Tensor, labels: &LabelMap) -> Result<ConfusionCounts> {
    let s = mask.shape();
    if s.n != 1 || s.c != 1 || s.h != labels.height() as usize || s.w != labels.width() as usize {
        return Err(Error::InvalidArgument(format!(
            "mask {s} does not match {}x{} ground truth",
            labels.width(),
            labels.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&m, &code)) in mask.data().iter().zip(labels.codes()).enumerate() {
        let predicted = m != 0.0;
        match code {
            GT_MOVING if predicted => c.tp += 1,
            GT_MOVING => c.fn_ += 1,
            GT_STATIC | GT_SHADOW if predicted => c.fp += 1,
            GT_STATIC | GT_SHADOW => c.tn += 1,
            GT_OUTSIDE_ROI | GT_UNKNOWN => {}
            _ => {
                return Err(Error::UnknownLabel {
                    path: Default::default(),
                    code,
                    x: (i % s.w) as u32,
                    y: (i / s.w) as u32,
                })
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
    /// Percentage of wrong classifications, in `[0, 100]`.
    pub pwc: f64,
}

/// Harmonic mean `2PR / (P + R)`, 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let d = precision + recall;
    if d == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / d
    }
}

/// If there is nothing to find and nothing was found (`TP + FP + FN = 0`)
/// precision, recall and F-measure are 1. Any other zero denominator gives 0,
/// and PWC is 0 when no pixel was included.
pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    if c.tp + c.fp + c.fn_ == 0 {
        return Metrics {
            precision: 1.0,
            recall: 1.0,
            fmeasure: 1.0,
            pwc: 0.0,
        };
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Metrics {
        precision,
        recall,
        fmeasure: f_measure(precision, recall),
        pwc: 100.0 * ratio(c.fn_ + c.fp, c.total()),
    }
}

/// Decision threshold per category, with a default for the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryThresholds {
    pub default: f64,
    pub overrides: BTreeMap<String, f64>,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        let overrides = [
            ("badWeather", 0.8),
            ("dynamicBackground", 0.9),
            ("intermittentObjectMotion", 0.6),
            ("nightVideos", 0.9),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        CategoryThresholds { default: 0.7, overrides }
    }
}

fn normalize_name(s: &str) -> String {
    s.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

impl CategoryThresholds {
    /// Matching ignores case and punctuation, so `bad_weather` and
    /// `badWeather` are the same category.
    pub fn for_category(&self, category: &str) -> f64 {
        let key = normalize_name(category);
        self.overrides
            .iter()
            .find(|(k, _)| normalize_name(k) == key)
            .map(|(_, &v)| v)
            .unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, &t) in std::iter::once(("default", &self.default)).chain(self.overrides.iter().map(|(k, v)| (k.as_str(), v))) {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold for {name} must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

/// Counts of one video at one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoCounts {
    pub category: String,
    pub video: String,
    pub frames: usize,
    pub counts: ConfusionCounts,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoMetrics {
    pub counts: VideoCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub videos: usize,
    pub frames: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub videos: Vec<VideoMetrics>,
    pub categories: Vec<CategoryMetrics>,
    pub overall: Metrics,
}

fn mean_metrics<'a>(ms: impl Iterator<Item = &'a Metrics>) -> Metrics {
    let mut n = 0.0;
    let mut acc = [0.0; 4];
    for m in ms {
        n += 1.0;
        for (a, v) in acc.iter_mut().zip([m.precision, m.recall, m.fmeasure, m.pwc]) {
            *a += v;
        }
    }
    Metrics {
        precision: acc[0] / n,
        recall: acc[1] / n,
        fmeasure: acc[2] / n,
        pwc: acc[3] / n,
    }
}

/// Per-video metrics, per-category means and the overall mean. Categories
/// and videos are reported in sorted order, so the result does not depend on
/// input order.
pub fn aggregate_report(entries: &[VideoCounts]) -> Result<MetricsReport> {
    if entries.iter().all(|e| e.frames == 0) {
        return Err(Error::InvalidArgument("evaluation report needs at least one evaluated frame".into()));
    }
    let mut sorted: Vec<&VideoCounts> = entries.iter().filter(|e| e.frames > 0).collect();
    sorted.sort_by(|a, b| (&a.category, &a.video).cmp(&(&b.category, &b.video)));
    let videos: Vec<VideoMetrics> = sorted
        .into_iter()
        .map(|v| VideoMetrics {
            metrics: compute_metrics(&v.counts),
            counts: v.clone(),
        })
        .collect();

    let mut by_cat: BTreeMap<&str, Vec<&VideoMetrics>> = BTreeMap::new();
    for v in &videos {
        by_cat.entry(v.counts.category.as_str()).or_default().push(v);
    }
    let categories: Vec<CategoryMetrics> = by_cat
        .into_iter()
        .map(|(cat, vs)| CategoryMetrics {
            category: cat.to_string(),
            videos: vs.len(),
            frames: vs.iter().map(|v| v.counts.frames).sum(),
            counts: vs.iter().fold(ConfusionCounts::default(), |a, v| a + v.counts.counts),
            metrics: mean_metrics(vs.iter().map(|v| &v.metrics)),
        })
        .collect();
    let overall = mean_metrics(categories.iter().map(|c| &c.metrics));
    Ok(MetricsReport {
        videos,
        categories,
        overall,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    category: &'a str,
    video: &'a str,
    frames: usize,
    #[serde(rename = "TP")]
    tp: u64,
    #[serde(rename = "TN")]
    tn: u64,
    #[serde(rename = "FP")]
    fp: u64,
    #[serde(rename = "FN")]
    fn_: u64,
    precision: f64,
    recall: f64,
    fmeasure: f64,
    pwc: f64,
    threshold: String,
}

impl MetricsReport {
    /// One row per video, then one `<category>,*` mean row per category and
    /// a final `*,*` overall row. Count columns of summary rows hold sums.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row = |category, video, frames, c: &ConfusionCounts, m: &Metrics, threshold| CsvRow {
            category,
            video,
            frames,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            precision: m.precision,
            recall: m.recall,
            fmeasure: m.fmeasure,
            pwc: m.pwc,
            threshold,
        };
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        for v in &self.videos {
            let c = &v.counts;
            w.serialize(row(&c.category, &c.video, c.frames, &c.counts, &v.metrics, c.threshold.to_string()))
                .map_err(csv_err)?;
        }
        for c in &self.categories {
            let t = self.category_threshold(&c.category);
            w.serialize(row(&c.category, "*", c.frames, &c.counts, &c.metrics, t)).map_err(csv_err)?;
        }
        let total = self.categories.iter().fold(ConfusionCounts::default(), |a, c| a + c.counts);
        let frames = self.categories.iter().map(|c| c.frames).sum();
        w.serialize(row("*", "*", frames, &total, &self.overall, String::new()))
            .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    fn category_threshold(&self, category: &str) -> String {
        let mut ts: Vec<f64> = self
            .videos
            .iter()
            .filter(|v| v.counts.category == category)
            .map(|v| v.counts.threshold)
            .collect();
        ts.dedup();
        match ts[..] {
            [t] => t.to_string(),
            _ => "mixed".to_string(),
        }
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# metrics from confusion counts summed over each video's frames");
        let _ = writeln!(s, "# category = mean over videos; overall = mean over categories");
        let line = |s: &mut String, name: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{name:<40} P={:.4} R={:.4} F={:.4} PWC={:.4}",
                m.precision, m.recall, m.fmeasure, m.pwc
            );
        };
        for c in &self.categories {
            line(&mut s, &format!("[{}]", c.category), &c.metrics);
            for v in self.videos.iter().filter(|v| v.counts.category == c.category) {
                line(
                    &mut s,
                    &format!("  {} ({} frames, t={})", v.counts.video, v.counts.frames, v.counts.threshold),
                    &v.metrics,
                );
            }
        }
        line(&mut s, "overall", &self.overall);
        s
    }
}

/// Runs the model on frames `indices` of `seq` and counts against its
/// ground truth.
pub fn evaluate_sequence(model: &Mcrcnn, seq: &FrameSequence, indices: &[usize], threshold: f64) -> Result<VideoCounts> {
    let mut counts = ConfusionCounts::default();
    for &i in indices {
        if i >= seq.len() {
            return Err(Error::InvalidArgument(format!("frame index {i} out of range for {} frames", seq.len())));
        }
        let labels = seq.require_labels(i)?;
        let prob = model.predict(&seq.frame_tensor(i))?.probability;
        counts += accumulate_confusion(&binarize(&prob, threshold)?, labels)?;
    }
    Ok(VideoCounts {
        category: seq.category.clone(),
        video: seq.video.clone(),
        frames: indices.len(),
        counts,
        threshold,
    })
}

fn single_map(t: &Tensor, what: &str) -> Result<(u32, u32)> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::InvalidArgument(format!("{what} must be [1, 1, H, W], got {s}")));
    }
    Ok((s.w as u32, s.h as u32))
}

/// 8-bit grayscale rendering of a probability map, `round(255·p)`.
pub fn probability_image(prob: &Tensor) -> Result<GrayImage> {
    let (w, h) = single_map(prob, "probability map")?;
    let px = prob.data().iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
    Ok(GrayImage::from_raw(w, h, px).expect("sized from shape"))
}

/// A binary mask as 0/255 grayscale.
pub fn mask_image(mask: &Tensor) -> Result<GrayImage> {
    let (w, h) = single_map(mask, "mask")?;
    let px = mask.data().iter().map(|&m| if m > 0.5 { 255 } else { 0 }).collect();
    Ok(GrayImage::from_raw(w, h, px).expect("sized from shape"))
}

/// Which frames of each video are evaluated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameSelection {
    /// Frames with ground truth inside the temporal ROI.
    Evaluable,
    /// The same explicit indices in every video.
    Indices(Vec<usize>),
}

/// Evaluates every video under `root` (a single video directory or a
/// `category/video` tree). Each video uses its category's threshold unless
/// `threshold` overrides it.
pub fn evaluate_dataset(
    model: &Mcrcnn,
    root: &Path,
    thresholds: &CategoryThresholds,
    threshold: Option<f64>,
    selection: &FrameSelection,
) -> Result<Vec<VideoCounts>> {
    let mut out = Vec::new();
    for dir in discover_videos(root)? {
        let seq = load_sequence(&dir)?;
        if !seq.has_ground_truth() {
            return Err(Error::Data(format!("{}: no groundtruth directory to evaluate against", dir.display())));
        }
        let indices = match selection {
            FrameSelection::Evaluable => seq.evaluable_indices(),
            FrameSelection::Indices(ix) => ix.clone(),
        };
        let t = threshold.unwrap_or_else(|| thresholds.for_category(&seq.category));
        let counts = evaluate_sequence(model, &seq, &indices, t)?;
        log::info!(
            "{}/{}: {} frames at threshold {t}: {:?}",
            counts.category,
            counts.video,
            counts.frames,
            counts.counts
        );
        out.push(counts);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(codes: &[u8]) -> LabelMap {
        LabelMap::new(codes.len() as u32, 1, codes.to_vec(), Path::new("t")).unwrap()
    }

    fn mask(bits: &[u8]) -> Tensor {
        Tensor::new([1, 1, 1, bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn binarize_edges() {
        let p = Tensor::new([1, 1, 1, 3], vec![0.2, 0.7, 0.9]).unwrap();
        assert_eq!(binarize(&p, 0.7).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize(&p, 0.0).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(binarize(&p, 1.5).is_err());
        assert!(binarize(&p, -0.1).is_err());
    }

    #[test]
    fn counting_rules() {
        let c = accumulate_confusion(&mask(&[1, 0, 1, 0, 1, 0, 1, 1]), &labels(&[255, 255, 0, 0, 50, 50, 85, 170])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fn_: 1, fp: 2, tn: 2 });
        let all_out = accumulate_confusion(&mask(&[1, 0]), &labels(&[85, 85])).unwrap();
        assert_eq!(all_out, ConfusionCounts::default());
        assert!(accumulate_confusion(&mask(&[1]), &labels(&[0, 0])).is_err());
    }

    #[test]
    fn trivial_metrics() {
        let m = compute_metrics(&ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
        assert_eq!((m.precision, m.recall, m.fmeasure, m.pwc), (1.0, 1.0, 1.0, 0.0));
        let nothing = compute_metrics(&ConfusionCounts { tn: 5, ..Default::default() });
        assert_eq!((nothing.fmeasure, nothing.pwc), (1.0, 0.0));
        let missed = compute_metrics(&ConfusionCounts { fn_: 2, tn: 2, ..Default::default() });
        assert_eq!((missed.precision, missed.recall, missed.fmeasure, missed.pwc), (0.0, 0.0, 0.0, 50.0));
        assert_eq!(compute_metrics(&ConfusionCounts::default()).pwc, 0.0);
    }

    #[test]
    fn default_thresholds() {
        let t = CategoryThresholds::default();
        assert_eq!(t.for_category("badWeather"), 0.8);
        assert_eq!(t.for_category("dynamic_background"), 0.9);
        assert_eq!(t.for_category("IntermittentObjectMotion"), 0.6);
        assert_eq!(t.for_category("nightVideos"), 0.9);
        assert_eq!(t.for_category("baseline"), 0.7);
        t.validate().unwrap();
    }

    fn vc(cat: &str, video: &str, c: ConfusionCounts) -> VideoCounts {
        VideoCounts {
            category: cat.into(),
            video: video.into(),
            frames: 1,
            counts: c,
            threshold: 0.7,
        }
    }

    #[test]
    fn nested_means() {
        // F = 0.9 (tp 9, fp 1, fn 1) and F = 1.0.
        let a = ConfusionCounts { tp: 9, fp: 1, fn_: 1, tn: 89 };
        let b = ConfusionCounts { tp: 3, tn: 7, ..Default::default() };
        let r = aggregate_report(&[vc("c", "v2", b), vc("c", "v1", a)]).unwrap();
        assert!((r.categories[0].metrics.fmeasure - 0.95).abs() < 1e-12);
        assert_eq!(r.videos[0].counts.video, "v1");
        assert_eq!(r.overall, r.categories[0].metrics);
        assert!(aggregate_report(&[]).is_err());

        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "category,video,frames,TP,TN,FP,FN,precision,recall,fmeasure,pwc,threshold"
        );
        assert_eq!(csv.lines().count(), 1 + 2 + 1 + 1);
        assert!(r.to_text().contains("summed"));
    }
}
