use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel, per-channel median of `frames` as a `[1, 3, H, W]` tensor in
/// `[0, 1]`. An even count averages the two middle order statistics.
pub fn median_background(frames: &[RgbImage]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("median background needs at least one frame".into()))?;
    let (w, h) = first.dimensions();
    if let Some(f) = frames.iter().find(|f| f.dimensions() != (w, h)) {
        return Err(Error::InvalidArgument(format!(
            "median background: {:?} frame among {:?} frames",
            f.dimensions(),
            (w, h)
        )));
    }
    let (w, h, m) = (w as usize, h as usize, frames.len());
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    out.par_chunks_mut(w).enumerate().for_each_init(
        || vec![0u8; m],
        |buf, (row, dst)| {
            let (c, y) = (row / h, row % h);
            for (x, d) in dst.iter_mut().enumerate() {
                let idx = (y * w + x) * 3 + c;
                for (b, f) in buf.iter_mut().zip(frames) {
                    *b = f.as_raw()[idx];
                }
                let (_, &mut hi, _) = buf.select_nth_unstable(m / 2);
                let value = if m % 2 == 1 {
                    hi as f64
                } else {
                    let lo = *buf[..m / 2].iter().max().expect("m >= 2");
                    (lo as f64 + hi as f64) / 2.0
                };
                *d = (value / 255.0) as f32;
            }
        },
    );
    Tensor::new([1, 3, h, w], out)
}

/// Writes a `[1, 3, H, W]` background as a 16-bit RGB PNG
/// (`round(v · 65535)`).
pub fn save_background(path: &Path, bg: &Tensor) -> Result<()> {
    let s = bg.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::InvalidArgument(format!("background must be [1, 3, H, W], got {s}")));
    }
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let q = |c| (bg.get(0, c, y as usize, x as usize).clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        Rgb([q(0), q(1), q(2)])
    });
    img.save(path).map_err(|source| Error::ImageWrite {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a background written by [`save_background`]. 8-bit images are
/// accepted too and scaled by 1/255.
pub fn load_background(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::UnreadableImage {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        (raw[(y * w + x) * 3 + c] as f64 / 65535.0) as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_frames(n: usize, w: u32, h: u32, seed: u64) -> Vec<RgbImage> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| RgbImage::from_fn(w, h, |_, _| Rgb([rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8])))
            .collect()
    }

    #[test]
    fn identical_frames_give_the_frame() {
        let f = random_frames(1, 7, 5, 3).pop().unwrap();
        let bg = median_background(&vec![f.clone(); 4]).unwrap();
        assert!(bg.bitwise_eq(&crate::data::image_to_tensor(&f)));
    }

    #[test]
    fn outlier_of_three_is_rejected() {
        let a = RgbImage::from_pixel(3, 3, Rgb([40, 50, 60]));
        let outlier = RgbImage::from_pixel(3, 3, Rgb([255, 0, 255]));
        let bg = median_background(&[a.clone(), outlier, a.clone()]).unwrap();
        assert!(bg.bitwise_eq(&crate::data::image_to_tensor(&a)));
    }

    #[test]
    fn even_count_averages_middle_pair() {
        let vals = [10u8, 200, 30, 20];
        let frames: Vec<_> = vals.iter().map(|&v| RgbImage::from_pixel(1, 1, Rgb([v, v, v]))).collect();
        let bg = median_background(&frames).unwrap();
        assert_eq!(bg.data()[0], (25.0f64 / 255.0) as f32);
    }

    #[test]
    fn empty_interval_is_rejected() {
        assert!(median_background(&[]).is_err());
    }

    #[test]
    fn png16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bg.png");
        let bg = median_background(&random_frames(5, 6, 4, 1)).unwrap();
        save_background(&p, &bg).unwrap();
        let back = load_background(&p).unwrap();
        assert_eq!(back.shape(), bg.shape());
        for (a, b) in bg.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
