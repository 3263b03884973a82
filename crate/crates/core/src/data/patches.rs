use image::RgbImage;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Rotations are counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augmentation {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::Identity,
        Augmentation::Rot90,
        Augmentation::Rot180,
        Augmentation::Rot270,
        Augmentation::FlipH,
        Augmentation::FlipV,
    ];

    pub fn inverse(self) -> Self {
        match self {
            Augmentation::Rot90 => Augmentation::Rot270,
            Augmentation::Rot270 => Augmentation::Rot90,
            a => a,
        }
    }

    /// Source pixel of output `(y, x)` in a `size × size` patch.
    fn source(self, y: usize, x: usize, size: usize) -> (usize, usize) {
        let l = size - 1;
        match self {
            Augmentation::Identity => (y, x),
            Augmentation::Rot90 => (x, l - y),
            Augmentation::Rot180 => (l - y, l - x),
            Augmentation::Rot270 => (l - x, y),
            Augmentation::FlipH => (y, l - x),
            Augmentation::FlipV => (l - y, x),
        }
    }

    /// Applies the transform to every plane of a tensor with square planes.
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.h != s.w {
            return Err(Error::InvalidArgument(format!("augmentation needs square planes, got {s}")));
        }
        Ok(Tensor::from_fn(s, |[n, c, y, x]| {
            let (sy, sx) = self.source(y, x, s.w);
            t.get(n, c, sy, sx)
        }))
    }
}

/// Training patches: input cut from frames, target cut from the background
/// at the same position, both with the same augmentation.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub input: Tensor,
    pub target: Tensor,
    pub augmentations: Vec<Augmentation>,
    pub sources: Vec<usize>,
    /// Top-left `(y, x)` of each patch before augmentation.
    pub positions: Vec<(usize, usize)>,
}

/// Draws `batch_size` patches from frames `pool` (indices into `frames`).
///
/// Per patch the generator is consumed in a fixed order: frame, row,
/// column, augmentation.
pub fn extract_training_patches(
    frames: &[RgbImage],
    pool: &[usize],
    background: &Tensor,
    batch_size: usize,
    patch: usize,
    rng: &mut Rng,
) -> Result<PatchBatch> {
    if pool.is_empty() || batch_size == 0 || patch == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch extraction needs frames, batch and patch size >= 1 (pool {}, batch {batch_size}, patch {patch})",
            pool.len()
        )));
    }
    let bs = background.shape();
    let (h, w) = (bs.h, bs.w);
    if bs.n != 1 || bs.c != 3 {
        return Err(Error::InvalidArgument(format!("background must be [1, 3, H, W], got {bs}")));
    }
    if h < patch || w < patch {
        return Err(Error::InvalidArgument(format!(
            "frame {w}x{h} is smaller than the {patch}x{patch} patch"
        )));
    }
    for &i in pool {
        let f = frames
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("frame index {i} out of range")))?;
        if f.dimensions() != (w as u32, h as u32) {
            return Err(Error::InvalidArgument(format!(
                "frame {i} is {:?}, background is {w}x{h}",
                f.dimensions()
            )));
        }
    }

    let per = 3 * patch * patch;
    let mut input = vec![0f32; batch_size * per];
    let mut target = vec![0f32; batch_size * per];
    let mut augmentations = Vec::with_capacity(batch_size);
    let mut sources = Vec::with_capacity(batch_size);
    let mut positions = Vec::with_capacity(batch_size);
    let bg = background.data();
    for b in 0..batch_size {
        let src = pool[rng.below(pool.len())];
        let y0 = rng.below(h - patch + 1);
        let x0 = rng.below(w - patch + 1);
        let aug = Augmentation::ALL[rng.below(Augmentation::ALL.len())];
        let raw = frames[src].as_raw();
        for c in 0..3 {
            for y in 0..patch {
                for x in 0..patch {
                    let (sy, sx) = aug.source(y, x, patch);
                    let (py, px) = (y0 + sy, x0 + sx);
                    let o = b * per + (c * patch + y) * patch + x;
                    input[o] = raw[(py * w + px) * 3 + c] as f32 / 255.0;
                    target[o] = bg[(c * h + py) * w + px];
                }
            }
        }
        augmentations.push(aug);
        sources.push(src);
        positions.push((y0, x0));
    }
    Ok(PatchBatch {
        input: Tensor::new([batch_size, 3, patch, patch], input)?,
        target: Tensor::new([batch_size, 3, patch, patch], target)?,
        augmentations,
        sources,
        positions,
    })
}
