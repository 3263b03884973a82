//! Frame sequences in CDnet layout, background estimation, training patches,
//! splitting and synthetic data.
//!
//! A video directory looks like
//!
//! ```text
//! <video>/input/in000001.png      (or .jpg)
//! <video>/groundtruth/gt000001.png
//! <video>/temporalROI.txt         "first last", 1-based frame numbers
//! ```
//!
//! Ground-truth codes: 0 static, 50 shadow, 85 outside the region of
//! interest, 170 unknown, 255 moving. Shadow counts as background; 85 and
//! 170 are excluded from losses and metrics.

mod background;
mod patches;
mod split;
mod synth;

pub use background::{load_background, median_background, save_background};
pub use patches::{extract_training_patches, Augmentation, PatchBatch};
pub use split::{parse_split, split_train_val, write_split, Split};
pub use synth::{synth_sequence, MotionPath, ObjectKind, SynthOutput, SynthSpec};

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GT_STATIC: u8 = 0;
pub const GT_SHADOW: u8 = 50;
pub const GT_OUTSIDE_ROI: u8 = 85;
pub const GT_UNKNOWN: u8 = 170;
pub const GT_MOVING: u8 = 255;

pub fn is_valid_label(code: u8) -> bool {
    matches!(code, GT_STATIC | GT_SHADOW | GT_OUTSIDE_ROI | GT_UNKNOWN | GT_MOVING)
}

/// A decoded ground-truth mask whose codes have been validated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    codes: Vec<u8>,
}

impl LabelMap {
    /// `source` only labels diagnostics.
    pub fn new(width: u32, height: u32, codes: Vec<u8>, source: &Path) -> Result<Self> {
        if codes.len() != (width as usize) * (height as usize) {
            return Err(Error::Data(format!(
                "{}: {} label codes for a {width}x{height} mask",
                source.display(),
                codes.len()
            )));
        }
        if let Some(i) = codes.iter().position(|&c| !is_valid_label(c)) {
            return Err(Error::UnknownLabel {
                path: source.to_path_buf(),
                code: codes[i],
                x: (i % width as usize) as u32,
                y: (i / width as usize) as u32,
            });
        }
        Ok(LabelMap { width, height, codes })
    }

    pub fn from_image(img: GrayImage, source: &Path) -> Result<Self> {
        let (w, h) = img.dimensions();
        LabelMap::new(w, h, img.into_raw(), source)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Foreground target (1 for code 255, else 0) as `[1, 1, H, W]`.
    pub fn target(&self) -> Tensor {
        self.to_tensor(|c| if c == GT_MOVING { 1.0 } else { 0.0 })
    }

    /// 1 where the pixel takes part in losses and metrics, else 0.
    pub fn include_mask(&self) -> Tensor {
        self.to_tensor(|c| if c == GT_OUTSIDE_ROI || c == GT_UNKNOWN { 0.0 } else { 1.0 })
    }

    fn to_tensor(&self, f: impl Fn(u8) -> f32) -> Tensor {
        let data = self.codes.iter().map(|&c| f(c)).collect();
        Tensor::new([1, 1, self.height as usize, self.width as usize], data).expect("dimensions checked")
    }
}

/// `[1, 3, H, W]` tensor with values `x / 255`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f32 / 255.0)
}

/// Stacks frames into one `[N, 3, H, W]` batch.
pub fn images_to_tensor(imgs: &[&RgbImage]) -> Result<Tensor> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero frames".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(imgs.len() * 3 * (w * h) as usize);
    for img in imgs {
        if img.dimensions() != (w, h) {
            return Err(Error::InvalidArgument(format!(
                "cannot stack {:?} frame with {:?} frames",
                img.dimensions(),
                (w, h)
            )));
        }
        data.extend(image_to_tensor(img).into_data());
    }
    Tensor::new([imgs.len(), 3, h as usize, w as usize], data)
}

#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub category: String,
    pub video: String,
    pub root: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    /// Frame number parsed from each file name (`in000042.png` → 42), or
    /// the 1-based position when the name has no digits.
    pub frame_numbers: Vec<u32>,
    frames: Vec<RgbImage>,
    ground_truth: Option<Vec<LabelMap>>,
    /// Inclusive `[first, last]` frame numbers that are evaluated.
    pub roi: Option<(u32, u32)>,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn frame_number(p: &Path, position: usize) -> u32 {
    let digits: String = p
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("")
        .chars()
        .filter(char::is_ascii_digit)
        .collect();
    digits.parse().unwrap_or(position as u32 + 1)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::UnreadableImage {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_roi(path: &Path) -> Result<(u32, u32)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let nums: Vec<u32> = text
        .split_whitespace()
        .map(|t| t.parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data(format!("{}: expected two frame numbers", path.display())))?;
    match nums[..] {
        [a, b] if a <= b => Ok((a, b)),
        _ => Err(Error::Data(format!(
            "{}: expected two ascending frame numbers, got {:?}",
            path.display(),
            nums
        ))),
    }
}

/// Loads a video directory. Frames are sorted by file name; ground truth is
/// optional (inference-only sequences have none).
pub fn load_sequence(root: &Path) -> Result<FrameSequence> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let input_dir = root.join("input");
    if !input_dir.is_dir() {
        return Err(Error::MissingDirectory(input_dir));
    }
    let frame_paths = list_images(&input_dir)?;
    if frame_paths.is_empty() {
        return Err(Error::Data(format!("{}: no png/jpg frames", input_dir.display())));
    }
    let frames: Vec<RgbImage> = frame_paths
        .par_iter()
        .map(|p| decode(p).map(|img| img.to_rgb8()))
        .collect::<Result<_>>()?;
    let dims = frames[0].dimensions();
    for (p, f) in frame_paths.iter().zip(&frames) {
        if f.dimensions() != dims {
            return Err(Error::ResolutionMismatch {
                path: p.clone(),
                expected: dims,
                found: f.dimensions(),
            });
        }
    }

    let gt_dir = root.join("groundtruth");
    let ground_truth = if gt_dir.is_dir() {
        let gt_paths: Vec<PathBuf> = list_images(&gt_dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        if gt_paths.len() != frame_paths.len() {
            return Err(Error::Data(format!(
                "{}: {} ground-truth masks for {} frames",
                gt_dir.display(),
                gt_paths.len(),
                frame_paths.len()
            )));
        }
        let maps: Vec<LabelMap> = gt_paths
            .par_iter()
            .map(|p| {
                let img = decode(p)?.to_luma8();
                if img.dimensions() != dims {
                    return Err(Error::ResolutionMismatch {
                        path: p.clone(),
                        expected: dims,
                        found: img.dimensions(),
                    });
                }
                LabelMap::from_image(img, p)
            })
            .collect::<Result<_>>()?;
        Some(maps)
    } else {
        None
    };

    let roi_path = root.join("temporalROI.txt");
    let roi = if roi_path.is_file() { Some(parse_roi(&roi_path)?) } else { None };

    let name = |p: Option<&Path>| {
        p.and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let canonical = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
    Ok(FrameSequence {
        video: name(Some(&canonical)),
        category: name(canonical.parent()),
        root: root.to_path_buf(),
        frame_numbers: frame_paths.iter().enumerate().map(|(i, p)| frame_number(p, i)).collect(),
        frame_paths,
        frames,
        ground_truth,
        roi,
    })
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)`.
    pub fn resolution(&self) -> (u32, u32) {
        self.frames[0].dimensions()
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &RgbImage {
        &self.frames[i]
    }

    /// Frame `i` as a `[1, 3, H, W]` tensor in `[0, 1]`.
    pub fn frame_tensor(&self, i: usize) -> Tensor {
        image_to_tensor(&self.frames[i])
    }

    pub fn has_ground_truth(&self) -> bool {
        self.ground_truth.is_some()
    }

    pub fn labels(&self, i: usize) -> Option<&LabelMap> {
        self.ground_truth.as_ref().map(|g| &g[i])
    }

    /// Like [`labels`](Self::labels) but an error when masks are absent.
    pub fn require_labels(&self, i: usize) -> Result<&LabelMap> {
        self.labels(i)
            .ok_or_else(|| Error::Data(format!("{}: no groundtruth directory", self.root.display())))
    }

    pub fn in_roi(&self, i: usize) -> bool {
        match self.roi {
            Some((a, b)) => (a..=b).contains(&self.frame_numbers[i]),
            None => true,
        }
    }

    /// Indices of frames with ground truth inside the temporal ROI.
    pub fn evaluable_indices(&self) -> Vec<usize> {
        if !self.has_ground_truth() {
            return Vec::new();
        }
        (0..self.len()).filter(|&i| self.in_roi(i)).collect()
    }

    /// Builds an in-memory sequence; mostly useful for tests.
    pub fn from_frames(video: &str, frames: Vec<RgbImage>, ground_truth: Option<Vec<LabelMap>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Data("sequence needs at least one frame".into()));
        }
        let dims = frames[0].dimensions();
        if let Some(f) = frames.iter().find(|f| f.dimensions() != dims) {
            return Err(Error::ResolutionMismatch {
                path: PathBuf::from(video),
                expected: dims,
                found: f.dimensions(),
            });
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != frames.len() {
                return Err(Error::Data(format!("{} masks for {} frames", gt.len(), frames.len())));
            }
            if let Some(m) = gt.iter().find(|m| (m.width, m.height) != dims) {
                return Err(Error::ResolutionMismatch {
                    path: PathBuf::from(video),
                    expected: dims,
                    found: (m.width, m.height),
                });
            }
        }
        Ok(FrameSequence {
            category: String::new(),
            video: video.to_string(),
            root: PathBuf::from(video),
            frame_paths: (1..=frames.len()).map(|i| PathBuf::from(format!("in{i:06}.png"))).collect(),
            frame_numbers: (1..=frames.len() as u32).collect(),
            frames,
            ground_truth,
            roi: None,
        })
    }
}

/// Video directories under `root`: `root` itself if it has an `input`
/// directory, otherwise `root/<category>/<video>` (or `root/<video>`)
/// entries that do, in sorted order.
pub fn discover_videos(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    if root.join("input").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let subdirs = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut out = Vec::new();
    for a in subdirs(root)? {
        if a.join("input").is_dir() {
            out.push(a);
            continue;
        }
        out.extend(subdirs(&a)?.into_iter().filter(|b| b.join("input").is_dir()));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no video directories with an input/ folder", root.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn write_video(root: &Path, n: usize, size: (u32, u32)) {
        fs::create_dir_all(root.join("input")).unwrap();
        for i in 1..=n {
            RgbImage::from_pixel(size.0, size.1, Rgb([10, 20, 30]))
                .save(root.join(format!("input/in{i:06}.png")))
                .unwrap();
        }
    }

    #[test]
    fn loads_identical_frames_without_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("cat/vid");
        write_video(&v, 20, (64, 64));
        let s = load_sequence(&v).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.resolution(), (64, 64));
        assert!(!s.has_ground_truth());
        assert_eq!((s.category.as_str(), s.video.as_str()), ("cat", "vid"));
        assert_eq!(s.frame_numbers[19], 20);
        let t = s.frame_tensor(3);
        assert_eq!(t.get(0, 1, 5, 5), 20.0 / 255.0);
        assert!(s.evaluable_indices().is_empty());
    }

    #[test]
    fn distinct_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence(&dir.path().join("nope")), Err(Error::MissingDirectory(_))));

        let v = dir.path().join("mismatch");
        write_video(&v, 2, (8, 8));
        RgbImage::new(9, 8).save(v.join("input/in000003.png")).unwrap();
        assert!(matches!(load_sequence(&v), Err(Error::ResolutionMismatch { .. })));

        let v = dir.path().join("broken");
        write_video(&v, 1, (8, 8));
        fs::write(v.join("input/in000002.png"), b"not a png").unwrap();
        assert!(matches!(load_sequence(&v), Err(Error::UnreadableImage { .. })));
    }

    #[test]
    fn ground_truth_codes_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("v");
        write_video(&v, 1, (4, 4));
        fs::create_dir_all(v.join("groundtruth")).unwrap();
        let mut gt = GrayImage::from_pixel(4, 4, Luma([0]));
        gt.put_pixel(2, 1, Luma([100]));
        gt.save(v.join("groundtruth/gt000001.png")).unwrap();
        match load_sequence(&v) {
            Err(Error::UnknownLabel { code: 100, x: 2, y: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn roi_limits_evaluable_frames() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("v");
        write_video(&v, 5, (4, 4));
        fs::create_dir_all(v.join("groundtruth")).unwrap();
        for i in 1..=5 {
            GrayImage::new(4, 4).save(v.join(format!("groundtruth/gt{i:06}.png"))).unwrap();
        }
        fs::write(v.join("temporalROI.txt"), "2 4\n").unwrap();
        let s = load_sequence(&v).unwrap();
        assert_eq!(s.roi, Some((2, 4)));
        assert_eq!(s.evaluable_indices(), vec![1, 2, 3]);
    }

    #[test]
    fn label_tensors() {
        let m = LabelMap::new(5, 1, vec![0, 50, 85, 170, 255], Path::new("x")).unwrap();
        assert_eq!(m.target().data(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.include_mask().data(), &[1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn discovers_category_tree() {
        let dir = tempfile::tempdir().unwrap();
        write_video(&dir.path().join("b/v2"), 1, (4, 4));
        write_video(&dir.path().join("a/v1"), 1, (4, 4));
        fs::create_dir_all(dir.path().join("a/notes")).unwrap();
        let found = discover_videos(dir.path()).unwrap();
        assert_eq!(found, vec![dir.path().join("a/v1"), dir.path().join("b/v2")]);
        assert_eq!(discover_videos(&dir.path().join("a/v1")).unwrap().len(), 1);
    }
}
