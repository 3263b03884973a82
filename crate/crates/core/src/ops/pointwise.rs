use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    // Branch keeps exp() from overflowing for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| v.max(T::zero())),
        Activation::Sigmoid => input.map(sigmoid),
        Activation::Linear => input.clone(),
    }
}

/// Upstream gradient times the activation's derivative, evaluated from the
/// forward input `x` and output `y`.
pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let mut g = grad_out.clone();
    match kind {
        Activation::Relu => {
            for (d, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                if xv <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (d, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                *d = *d * yv * (T::one() - yv);
            }
        }
        Activation::Linear => {}
    }
    g
}

/// Location of the extrema used by a min-max normalization.
#[derive(Clone, Copy, Debug)]
pub struct MinMaxCache {
    pub min_index: usize,
    pub max_index: usize,
    pub min: f64,
    pub max: f64,
}

impl MinMaxCache {
    pub fn is_constant(&self) -> bool {
        !(self.max > self.min)
    }
}

/// `(x − min) / (max − min)` over the whole tensor. A constant tensor maps
/// to all zeros.
pub fn minmax_normalize_with_cache<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, MinMaxCache) {
    let d = input.data();
    let (mut lo, mut hi) = (0usize, 0usize);
    for (i, &v) in d.iter().enumerate() {
        if v < d[lo] {
            lo = i;
        }
        if v > d[hi] {
            hi = i;
        }
    }
    let cache = MinMaxCache {
        min_index: lo,
        max_index: hi,
        min: d[lo].as_f64(),
        max: d[hi].as_f64(),
    };
    if cache.is_constant() {
        return (Tensor::zeros(input.shape()), cache);
    }
    let range = cache.max - cache.min;
    let out = input.map(|v| {
        let r = (v.as_f64() - cache.min) / range;
        T::from_f64_lossy(r.clamp(0.0, 1.0))
    });
    (out, cache)
}

pub fn minmax_normalize<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    minmax_normalize_with_cache(input).0
}

pub fn minmax_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    cache: &MinMaxCache,
) -> Tensor<T> {
    if cache.is_constant() {
        return Tensor::zeros(input.shape());
    }
    let r = cache.max - cache.min;
    // ∂y_i/∂x_j = δ_ij/r + δ_j,argmin·(−1/r + u_i/r) − δ_j,argmax·u_i/r,
    // with u_i = (x_i − min)/r.
    let (mut s_g, mut s_gu) = (0.0f64, 0.0f64);
    for (&g, &x) in grad_out.data().iter().zip(input.data()) {
        let g = g.as_f64();
        s_g += g;
        s_gu += g * (x.as_f64() - cache.min) / r;
    }
    let mut dx: Vec<f64> = grad_out.data().iter().map(|g| g.as_f64() / r).collect();
    dx[cache.min_index] += (-s_g + s_gu) / r;
    dx[cache.max_index] -= s_gu / r;
    Tensor::from_parts(
        input.shape(),
        dx.into_iter().map(T::from_f64_lossy).collect(),
    )
}
