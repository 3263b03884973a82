use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

use super::Mode;

/// Sum over offsets `lo..=hi` along rows and columns (zero outside).
fn box_sum(src: &[f64], h: usize, w: usize, lo: isize, hi: isize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in lo..=hi {
                let sx = x as isize + d;
                if sx >= 0 && (sx as usize) < w {
                    s += src[y * w + sx as usize];
                }
            }
            rows[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in lo..=hi {
                let sy = y as isize + d;
                if sy >= 0 && (sy as usize) < h {
                    s += rows[sy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn pool_offsets(window: usize) -> (isize, isize) {
    let before = ((window - 1) / 2) as isize;
    (-before, window as isize - 1 - before)
}

fn box_filter<T: Scalar>(input: &Tensor<T>, lo: isize, hi: isize, scale: f64) -> Tensor<T> {
    let s = input.shape();
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let src: Vec<f64> = input.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let sums = box_sum(&src, s.h, s.w, lo, hi);
            for (o, v) in out.plane_mut(n, c).iter_mut().zip(sums) {
                *o = T::from_f64_lossy(v * scale);
            }
        }
    }
    out
}

/// Stride-1 average pooling with same-size zero padding.
///
/// The window covers offsets `−⌊(k−1)/2⌋ ..= k−1−⌊(k−1)/2⌋` (for `k = 4`:
/// one row/column before, two after). Padding taps count as zeros and the
/// divisor is always `k²`.
pub fn avg_pool_same<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if window == 0 {
        return Err(Error::InvalidArgument("avg_pool_same: window must be >= 1".into()));
    }
    let (lo, hi) = pool_offsets(window);
    Ok(box_filter(input, lo, hi, 1.0 / (window * window) as f64))
}

pub fn avg_pool_same_backward<T: Scalar>(grad_out: &Tensor<T>, window: usize) -> Tensor<T> {
    let (lo, hi) = pool_offsets(window);
    box_filter(grad_out, -hi, -lo, 1.0 / (window * window) as f64)
}

/// Depth-wise concatenation, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Ok(Tensor::from_parts(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data))
}

/// Inverse of [`concat_channels`]: the first `at` channels and the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = t.shape();
    if at == 0 || at >= s.c {
        return Err(Error::InvalidArgument(format!(
            "split_channels: split point {at} outside 1..{} for {s}",
            s.c
        )));
    }
    let p = s.plane();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for n in 0..s.n {
        let sample = t.sample(n);
        a.extend_from_slice(&sample[..at * p]);
        b.extend_from_slice(&sample[at * p..]);
    }
    Ok((
        Tensor::from_parts(Shape::new(s.n, at, s.h, s.w), a),
        Tensor::from_parts(Shape::new(s.n, s.c - at, s.h, s.w), b),
    ))
}

/// Spatial dropout returning the per-plane multipliers it applied.
///
/// In train mode each `(n, c)` plane is zeroed with probability `rate` and
/// survivors are scaled by `1/(1 − rate)`. Infer mode is the identity.
pub fn spatial_dropout_with_mask<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "spatial_dropout: rate must lie in [0, 1), got {rate}"
        )));
    }
    let s = input.shape();
    let planes = s.n * s.c;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), vec![T::one(); planes]));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..planes)
        .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
        .collect();
    Ok((scale_planes(input, &mask), mask))
}

pub fn spatial_dropout<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    spatial_dropout_with_mask(input, rate, mode, rng).map(|(t, _)| t)
}

pub(crate) fn scale_planes<T: Scalar>(input: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let s = input.shape();
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let m = mask[n * s.c + c];
            for v in out.plane_mut(n, c) {
                *v = *v * m;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_preserves_shape_and_constant_interior() {
        let x = Tensor::<f32>::full([1, 1, 7, 5], 1.0);
        assert_eq!(avg_pool_same(&x, 4).unwrap().shape(), x.shape());
        let big = Tensor::<f32>::full([1, 1, 12, 12], 1.0);
        let y = avg_pool_same(&big, 4).unwrap();
        for yy in 1..10 {
            for xx in 1..10 {
                assert_eq!(y.get(0, 0, yy, xx), 1.0);
            }
        }
        // Corner sees 3x3 real taps of 16.
        assert!((y.get(0, 0, 0, 0) - 9.0 / 16.0).abs() < 1e-7);
    }

    #[test]
    fn concat_orders_and_splits_back() {
        let a = Tensor::<f32>::from_fn([2, 3, 2, 2], |[n, c, y, x]| (n * 100 + c * 10 + y * 2 + x) as f32);
        let b = Tensor::<f32>::from_fn([2, 1, 2, 2], |[n, _, y, x]| -((n * 4 + y * 2 + x) as f32) - 1.0);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), Shape::new(2, 4, 2, 2));
        assert_eq!(ab.plane(1, 3), b.plane(1, 0));
        let (a2, b2) = split_channels(&ab, 3).unwrap();
        assert!(a2.bitwise_eq(&a) && b2.bitwise_eq(&b));
        assert!(concat_channels(&a, &Tensor::zeros([2, 1, 2, 3])).is_err());
        assert!(concat_channels(&a, &Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_bad_rate() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::from_fn([2, 3, 4, 4], |[n, c, y, x]| (n + c + y + x) as f32);
        for mode in [Mode::Train, Mode::Infer] {
            assert!(spatial_dropout(&x, 0.0, mode, &mut rng).unwrap().bitwise_eq(&x));
        }
        assert!(spatial_dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap().bitwise_eq(&x));
        assert!(spatial_dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(spatial_dropout(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_zeroes_whole_planes() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f32>::full([4, 8, 3, 3], 1.0);
        let y = spatial_dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        for n in 0..4 {
            for c in 0..8 {
                let p = y.plane(n, c);
                assert!(p.iter().all(|&v| v == 0.0) || p.iter().all(|&v| v == 2.0));
            }
        }
    }
}
