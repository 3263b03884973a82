use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{GT_MOVING, GT_SHADOW, GT_STATIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Square,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionPath {
    /// Back and forth along the x axis.
    Horizontal,
    /// Bouncing off all four borders.
    Diagonal,
    /// One full loop around the frame centre over the sequence.
    Circular,
}

/// Parameters of a generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub object: ObjectKind,
    /// Side length (square) or diameter (disc) in pixels.
    pub object_size: u32,
    pub object_color: [u8; 3],
    pub motion: MotionPath,
    /// Pixels per frame along x; the diagonal path moves 0.6× as fast in y.
    pub speed: f64,
    /// Standard deviation of per-frame Gaussian noise, in `[0, 1]` units.
    pub noise: f64,
    /// Casts a darker offset copy of the object labelled as shadow.
    pub shadow: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 64,
            height: 64,
            frames: 20,
            object: ObjectKind::Square,
            object_size: 16,
            object_color: [230, 30, 30],
            motion: MotionPath::Diagonal,
            speed: 5.0,
            noise: 0.0,
            shadow: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return fail("synth.width, synth.height and synth.frames must be >= 1".into());
        }
        if self.object_size == 0 || self.object_size > self.width.min(self.height) {
            return fail(format!(
                "synth.object_size must lie in [1, {}], got {}",
                self.width.min(self.height),
                self.object_size
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("synth.noise must be >= 0, got {}", self.noise));
        }
        if !self.speed.is_finite() {
            return fail("synth.speed must be finite".into());
        }
        Ok(())
    }
}

/// What the generator drew, for checking against the written files.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub background: RgbImage,
    /// Pixels labelled moving in each frame.
    pub object_pixels: Vec<usize>,
    /// Top-left corner of the object's bounding box in each frame.
    pub positions: Vec<(u32, u32)>,
}

fn ping_pong(p: f64, range: u32) -> u32 {
    if range == 0 {
        return 0;
    }
    let period = 2.0 * range as f64;
    let q = p.rem_euclid(period);
    (if q <= range as f64 { q } else { period - q }).round() as u32
}

fn texture(spec: &SynthSpec, rng: &mut Rng) -> RgbImage {
    // Sum of a few random plane waves per channel, kept in [60, 180] so no
    // channel can be confused with a saturated object colour.
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            let angle = rng.uniform() * 2.0 * PI;
            let freq = 0.05 + 0.4 * rng.uniform();
            [freq * angle.cos(), freq * angle.sin(), rng.uniform() * 2.0 * PI, 0.3 + 0.7 * rng.uniform()]
        })
        .collect();
    RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v: f64 = waves[c * 3..c * 3 + 3]
                .iter()
                .map(|[fx, fy, ph, a]| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                / 2.0;
            *p = (120.0 + 60.0 * v.clamp(-1.0, 1.0)).round() as u8;
        }
        Rgb(px)
    })
}

fn covers(kind: ObjectKind, size: u32, dx: i64, dy: i64) -> bool {
    let s = size as i64;
    if dx < 0 || dy < 0 || dx >= s || dy >= s {
        return false;
    }
    match kind {
        ObjectKind::Square => true,
        ObjectKind::Disc => {
            let r = size as f64 / 2.0;
            let (cx, cy) = (dx as f64 + 0.5 - r, dy as f64 + 0.5 - r);
            cx * cx + cy * cy <= r * r
        }
    }
}

/// Writes a CDnet-layout video directory at `out`: `input/in%06d.png`,
/// `groundtruth/gt%06d.png` and `temporalROI.txt` covering every frame.
pub fn synth_sequence(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let background = texture(spec, &mut rng);
    let (fw, fh) = (spec.width - spec.object_size, spec.height - spec.object_size);
    let (x0, y0) = (rng.below(fw as usize + 1) as f64, rng.below(fh as usize + 1) as f64);

    for d in ["input", "groundtruth"] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }

    let mut output = SynthOutput {
        background: background.clone(),
        object_pixels: Vec::with_capacity(spec.frames),
        positions: Vec::with_capacity(spec.frames),
    };
    let shadow_offset = (spec.object_size / 4).max(1) as i64;
    for t in 0..spec.frames {
        let tf = t as f64;
        let (ox, oy) = match spec.motion {
            MotionPath::Horizontal => (ping_pong(x0 + spec.speed * tf, fw), y0 as u32),
            MotionPath::Diagonal => (
                ping_pong(x0 + spec.speed * tf, fw),
                ping_pong(y0 + 0.6 * spec.speed * tf, fh),
            ),
            MotionPath::Circular => {
                let a = 2.0 * PI * tf / spec.frames as f64;
                let (cx, cy) = (fw as f64 / 2.0, fh as f64 / 2.0);
                (
                    (cx + cx * a.cos()).round().clamp(0.0, fw as f64) as u32,
                    (cy + cy * a.sin()).round().clamp(0.0, fh as f64) as u32,
                )
            }
        };
        let mut frame = background.clone();
        let mut gt = GrayImage::from_pixel(spec.width, spec.height, Luma([GT_STATIC]));
        let mut area = 0;
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (dx, dy) = (x as i64 - ox as i64, y as i64 - oy as i64);
                if covers(spec.object, spec.object_size, dx, dy) {
                    frame.put_pixel(x, y, Rgb(spec.object_color));
                    gt.put_pixel(x, y, Luma([GT_MOVING]));
                    area += 1;
                } else if spec.shadow && covers(spec.object, spec.object_size, dx - shadow_offset, dy - shadow_offset) {
                    let p = frame.get_pixel_mut(x, y);
                    for v in p.0.iter_mut() {
                        *v = (*v as f64 * 0.55).round() as u8;
                    }
                    gt.put_pixel(x, y, Luma([GT_SHADOW]));
                }
            }
        }
        if spec.noise > 0.0 {
            for v in frame.iter_mut() {
                *v = (*v as f64 + rng.normal() * spec.noise * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let n = t + 1;
        let fp = out.join(format!("input/in{n:06}.png"));
        frame.save(&fp).map_err(|source| Error::ImageWrite { path: fp, source })?;
        let gp = out.join(format!("groundtruth/gt{n:06}.png"));
        gt.save(&gp).map_err(|source| Error::ImageWrite { path: gp, source })?;
        output.object_pixels.push(area);
        output.positions.push((ox, oy));
    }
    let roi = out.join("temporalROI.txt");
    fs::write(&roi, format!("1 {}\n", spec.frames)).map_err(|e| Error::io(&roi, e))?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{image_to_tensor, load_sequence, median_background};

    #[test]
    fn reloads_bit_identically_with_exact_masks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            frames: 6,
            noise: 0.02,
            shadow: true,
            ..SynthSpec::default()
        };
        let out = synth_sequence(&spec, dir.path()).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.len(), 6);
        assert_eq!(seq.roi, Some((1, 6)));
        for i in 0..6 {
            let codes = seq.labels(i).unwrap().codes();
            assert_eq!(codes.iter().filter(|&&c| c == GT_MOVING).count(), out.object_pixels[i]);
            assert_eq!(out.object_pixels[i], 256);
            assert!(codes.contains(&GT_SHADOW));
        }
        let again = tempfile::tempdir().unwrap();
        synth_sequence(&spec, again.path()).unwrap();
        let seq2 = load_sequence(again.path()).unwrap();
        for i in 0..6 {
            assert_eq!(seq.frame(i), seq2.frame(i));
        }
    }

    #[test]
    fn noiseless_median_recovers_texture() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_sequence(&SynthSpec::default(), dir.path()).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        let bg = median_background(seq.frames()).unwrap();
        assert!(bg.bitwise_eq(&image_to_tensor(&out.background)));
    }

    #[test]
    fn object_stays_inside_and_disc_area_is_round() {
        let dir = tempfile::tempdir().unwrap();
        for motion in [MotionPath::Horizontal, MotionPath::Diagonal, MotionPath::Circular] {
            let spec = SynthSpec {
                motion,
                object: ObjectKind::Disc,
                speed: 13.0,
                ..SynthSpec::default()
            };
            let out = synth_sequence(&spec, dir.path()).unwrap();
            for (&(x, y), &a) in out.positions.iter().zip(&out.object_pixels) {
                assert!(x + 16 <= 64 && y + 16 <= 64);
                assert!((a as f64 - PI * 64.0).abs() < 20.0, "{a}");
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            object_size: 65,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_sequence(&spec, dir.path()), Err(Error::Config(_))));
    }
}
