//! Batch and instance normalization.
//!
//! Statistics are reduced in double precision. Both ops share one backward
//! kernel: they differ only in which elements form a normalization group
//! (all `N·H·W` values of a channel vs. the `H·W` values of one sample's
//! channel).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Mode;

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// False until the first train-mode update.
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (momentum * *r as f64 + (1.0 - momentum) * b) as f32;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (momentum * *r as f64 + (1.0 - momentum) * b) as f32;
        }
        self.initialized = true;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Grouping {
    /// One group per channel spanning the whole batch.
    PerChannel,
    /// One group per (sample, channel) plane.
    PerInstance,
}

/// Per-group statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub(crate) grouping: Grouping,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Statistics came from the batch itself (and so depend on the input).
    pub(crate) batch_stats: bool,
}

fn check_affine<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    let c = x.shape().c;
    for p in [gamma, beta] {
        if p.len() != c {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape(),
                right: p.shape(),
            });
        }
    }
    Ok(())
}

#[inline]
fn group_of(grouping: Grouping, n: usize, c: usize, channels: usize) -> usize {
    match grouping {
        Grouping::PerChannel => c,
        Grouping::PerInstance => n * channels + c,
    }
}

fn group_stats<T: Scalar>(x: &Tensor<T>, grouping: Grouping) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let groups = match grouping {
        Grouping::PerChannel => s.c,
        Grouping::PerInstance => s.n * s.c,
    };
    let mut sum = vec![0.0f64; groups];
    let mut count = vec![0usize; groups];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = group_of(grouping, n, c, s.c);
            sum[g] += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
            count[g] += s.plane();
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
    let mut sq = vec![0.0f64; groups];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = group_of(grouping, n, c, s.c);
            let m = mean[g];
            sq[g] += x
                .plane(n, c)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    let var = sq.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
    (mean, var)
}

fn apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    cache: &NormCache,
) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = group_of(cache.grouping, n, c, s.c);
            let (m, is) = (cache.mean[g], cache.inv_std[g]);
            let (ga, be) = (gamma.data()[c].as_f64(), beta.data()[c].as_f64());
            for v in out.plane_mut(n, c) {
                *v = T::from_f64_lossy(ga * (v.as_f64() - m) * is + be);
            }
        }
    }
    out
}

fn stats_cache(grouping: Grouping, mean: Vec<f64>, var: Vec<f64>, eps: f64, batch: bool) -> NormCache {
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    NormCache {
        grouping,
        mean,
        var,
        inv_std,
        batch_stats: batch,
    }
}

/// Train-mode batch norm: normalizes by the batch's own per-channel
/// statistics. The running statistics are not touched here.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache)> {
    check_affine("batch_norm", x, gamma, beta)?;
    let (mean, var) = group_stats(x, Grouping::PerChannel);
    let cache = stats_cache(Grouping::PerChannel, mean, var, eps, true);
    Ok((apply(x, gamma, beta, &cache), cache))
}

/// Infer-mode batch norm: normalizes by the running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats,
    eps: f64,
) -> Result<(Tensor<T>, NormCache)> {
    check_affine("batch_norm", x, gamma, beta)?;
    if running.channels() != x.shape().c {
        return Err(Error::InvalidArgument(format!(
            "batch_norm: running statistics have {} channels, input has {}",
            running.channels(),
            x.shape().c
        )));
    }
    let mean = running.mean.iter().map(|&v| v as f64).collect();
    let var = running.var.iter().map(|&v| v as f64).collect();
    let cache = stats_cache(Grouping::PerChannel, mean, var, eps, false);
    Ok((apply(x, gamma, beta, &cache), cache))
}

/// Batch norm with mode dispatch and running-statistics bookkeeping.
///
/// Train mode normalizes by batch statistics and blends them into
/// `running`; infer mode reads `running` only and fails if it has never been
/// updated.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (y, cache) = batch_norm_train(x, gamma, beta, eps)?;
            running.update(&cache.mean, &cache.var, momentum);
            Ok(y)
        }
        Mode::Infer => {
            if !running.initialized {
                return Err(Error::UninitializedRunningStats("batch_norm".into()));
            }
            Ok(batch_norm_infer(x, gamma, beta, running, eps)?.0)
        }
    }
}

/// Instance norm: statistics per sample and channel over `H·W`.
pub fn instance_norm_with_cache<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache)> {
    check_affine("instance_norm", x, gamma, beta)?;
    if x.shape().plane() == 1 {
        return Err(Error::InvalidArgument(
            "instance_norm: H·W == 1 leaves a single value per instance".into(),
        ));
    }
    let (mean, var) = group_stats(x, Grouping::PerInstance);
    let cache = stats_cache(Grouping::PerInstance, mean, var, eps, true);
    Ok((apply(x, gamma, beta, &cache), cache))
}

pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    instance_norm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

pub struct NormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward pass shared by both normalizations.
pub fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    cache: &NormCache,
) -> Result<NormGrads<T>> {
    grad_out.expect_shape(x.shape(), "norm_backward")?;
    let s = x.shape();
    let groups = cache.mean.len();
    let group_size = match cache.grouping {
        Grouping::PerChannel => s.n * s.plane(),
        Grouping::PerInstance => s.plane(),
    } as f64;

    // Per-group sums of dy and dy·xhat.
    let mut sum_dy = vec![0.0f64; groups];
    let mut sum_dy_xhat = vec![0.0f64; groups];
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = group_of(cache.grouping, n, c, s.c);
            let (m, is) = (cache.mean[g], cache.inv_std[g]);
            let (mut a, mut b) = (0.0, 0.0);
            for (&xv, &dy) in x.plane(n, c).iter().zip(grad_out.plane(n, c)) {
                let dy = dy.as_f64();
                a += dy;
                b += dy * (xv.as_f64() - m) * is;
            }
            sum_dy[g] += a;
            sum_dy_xhat[g] += b;
            dbeta[c] += a;
            dgamma[c] += b;
        }
    }

    let mut dx = grad_out.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = group_of(cache.grouping, n, c, s.c);
            let (m, is) = (cache.mean[g], cache.inv_std[g]);
            let ga = gamma.data()[c].as_f64();
            let xp = x.plane(n, c);
            let dp = dx.plane_mut(n, c);
            if cache.batch_stats {
                let k = ga * is / group_size;
                for (d, &xv) in dp.iter_mut().zip(xp) {
                    let xhat = (xv.as_f64() - m) * is;
                    let v = k * (group_size * d.as_f64() - sum_dy[g] - xhat * sum_dy_xhat[g]);
                    *d = T::from_f64_lossy(v);
                }
            } else {
                for d in dp.iter_mut() {
                    *d = T::from_f64_lossy(d.as_f64() * ga * is);
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| {
        Tensor::from_parts(
            gamma.shape(),
            v.into_iter().map(T::from_f64_lossy).collect(),
        )
    };
    Ok(NormGrads {
        input: dx,
        gamma: to_t(dgamma),
        beta: to_t(dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Shape;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| (3.0 * rng.normal() + 1.5) as f32)
    }

    fn affine(c: usize, g: f32, b: f32) -> (Tensor<f32>, Tensor<f32>) {
        (
            Tensor::full(Shape::channels(c), g),
            Tensor::full(Shape::channels(c), b),
        )
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = random([4, 3, 6, 5], 1);
        let (g, b) = affine(3, 1.0, 0.0);
        let mut rs = RunningStats::new(3);
        let y = batch_norm(&x, &g, &b, &mut rs, Mode::Train, 0.9, 1e-5).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.plane(n, c).iter().map(|&v| v as f64).collect::<Vec<_>>())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
        assert!(rs.initialized);
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let x = random([2, 2, 4, 4], 2);
        let (g, b) = affine(2, 1.0, 0.0);
        let mut rs = RunningStats::new(2);
        let (_, cache) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        batch_norm(&x, &g, &b, &mut rs, Mode::Train, 0.9, 1e-5).unwrap();
        for c in 0..2 {
            assert!((rs.mean[c] as f64 - 0.1 * cache.mean[c]).abs() < 1e-6);
            assert!((rs.var[c] as f64 - (0.9 + 0.1 * cache.var[c])).abs() < 1e-5);
        }
    }

    #[test]
    fn infer_mode_is_affine_in_running_stats() {
        let x = random([1, 2, 3, 3], 3);
        let (g, b) = affine(2, 2.0, 3.0);
        let mut rs = RunningStats::new(2);
        rs.initialized = true;
        let y = batch_norm(&x, &g, &b, &mut rs, Mode::Infer, 0.9, 1e-5).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, &xv) in y.data().iter().zip(x.data()) {
            let expect = 2.0 * xv as f64 * scale + 3.0;
            assert!((*a as f64 - expect).abs() < 1e-5);
        }
        assert_eq!(rs, {
            let mut r = RunningStats::new(2);
            r.initialized = true;
            r
        });
    }

    #[test]
    fn infer_before_training_is_rejected() {
        let x = random([1, 2, 3, 3], 4);
        let (g, b) = affine(2, 1.0, 0.0);
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            batch_norm(&x, &g, &b, &mut rs, Mode::Infer, 0.9, 1e-5),
            Err(Error::UninitializedRunningStats(_))
        ));
    }

    #[test]
    fn instance_norm_edge_cases() {
        let (g, b) = affine(2, 1.0, 0.0);
        let constant = Tensor::<f32>::full([2, 2, 4, 4], 5.0);
        let y = instance_norm(&constant, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (g0, b7) = affine(2, 0.0, 7.0);
        let y = instance_norm(&random([2, 2, 4, 4], 5), &g0, &b7, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));

        assert!(instance_norm(&Tensor::<f32>::zeros([3, 2, 1, 1]), &g, &b, 1e-5).is_err());
        let (g3, b3) = affine(3, 1.0, 0.0);
        assert!(instance_norm(&constant, &g3, &b3, 1e-5).is_err());
    }

    #[test]
    fn single_sample_instance_norm_matches_batch_norm() {
        let x = random([1, 3, 5, 4], 6);
        let (g, b) = affine(3, 1.3, -0.2);
        let a = instance_norm(&x, &g, &b, 1e-5).unwrap();
        let (bn, _) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        assert!(a.bitwise_eq(&bn));
    }
}
