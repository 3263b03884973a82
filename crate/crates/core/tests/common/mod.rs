#![allow(dead_code)]

use mcrcnn::gradcheck::{finite_diff_gradcheck, model_gradcheck, NamedReport, DEFAULT_STEP, INERT_TOLERANCE};
use mcrcnn::loss::Reduction;
use mcrcnn::ops::{Activation, RunningStats};
use mcrcnn::{Graph, Mode, NodeId, Result, Rng, Shape, Tensor};

pub const GRAD_SHAPES: [[usize; 4]; 3] = [[1, 2, 5, 6], [2, 3, 4, 4], [3, 1, 7, 5]];
pub const GRAD_SEEDS: [u64; 3] = [0, 1, 2];

pub fn normal(shape: [usize; 4], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values at least 0.1 away from zero, so ReLU has no kink within a step.
pub fn away_from_zero(shape: [usize; 4], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v.signum() * (0.1 + v.abs())
    })
}

type Case = (String, f64);

fn check<F>(out: &mut Vec<Case>, name: String, f: F, point: &Tensor<f64>) -> Result<()>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let r = finite_diff_gradcheck(f, point, DEFAULT_STEP)?;
    out.push((name, r.max_rel_err));
    Ok(())
}

/// Random projection of `y` to a scalar, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let w = g.input(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Relative error of every differentiable op, per input, for one shape and
/// seed.
pub fn op_cases(shape: [usize; 4], seed: u64) -> Result<Vec<Case>> {
    let mut rng = Rng::new(seed);
    let s = Shape::from(shape);
    let [n, c, h, w] = shape;
    let tag = |op: &str| format!("{op} {s} seed {seed}");
    let mut out = Vec::new();

    let x = normal(shape, &mut rng);
    let same = normal(shape, &mut rng);

    for dilation in [1, 2] {
        let cout = 2;
        let wt = normal([cout, c, 3, 3], &mut rng);
        let b = normal([cout, 1, 1, 1], &mut rng);
        let proj = normal([n, cout, h, w], &mut rng);
        let conv = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, which: usize| {
            let (x, wt, b, proj) = (x.clone(), wt.clone(), b.clone(), proj.clone());
            move |g: &mut Graph<f64>, leaf: NodeId| {
                let xi = if which == 0 { leaf } else { g.input(x.clone()) };
                let wi = if which == 1 { leaf } else { g.input(wt.clone()) };
                let bi = if which == 2 { leaf } else { g.input(b.clone()) };
                let y = g.conv2d(xi, wi, bi, dilation)?;
                project(g, y, &proj)
            }
        };
        check(&mut out, tag(&format!("conv2d d{dilation} input")), conv(&x, &wt, &b, 0), &x)?;
        check(&mut out, tag(&format!("conv2d d{dilation} weight")), conv(&x, &wt, &b, 1), &wt)?;
        check(&mut out, tag(&format!("conv2d d{dilation} bias")), conv(&x, &wt, &b, 2), &b)?;
    }

    let xr = away_from_zero(shape, &mut rng);
    for (name, kind, point) in [("relu", Activation::Relu, &xr), ("sigmoid", Activation::Sigmoid, &x)] {
        check(
            &mut out,
            tag(name),
            |g, leaf| {
                let y = g.activation(leaf, kind);
                project(g, y, &same)
            },
            point,
        )?;
    }

    let gamma = Tensor::from_fn([1, c, 1, 1], |_| 0.5 + rng.uniform());
    let beta = normal([1, c, 1, 1], &mut rng);
    let eps = 1e-5;
    let norm = |batch: bool, which: usize| {
        let (x, gamma, beta, same) = (x.clone(), gamma.clone(), beta.clone(), same.clone());
        move |g: &mut Graph<f64>, leaf: NodeId| {
            let xi = if which == 0 { leaf } else { g.input(x.clone()) };
            let gi = if which == 1 { leaf } else { g.input(gamma.clone()) };
            let bi = if which == 2 { leaf } else { g.input(beta.clone()) };
            let y = if batch {
                let mut running = RunningStats::new(c);
                g.batch_norm(xi, gi, bi, &mut running, Mode::Train, 0.99, eps)?
            } else {
                g.instance_norm(xi, gi, bi, eps)?
            };
            project(g, y, &same)
        }
    };
    for (batch, name) in [(true, "batch_norm"), (false, "instance_norm")] {
        check(&mut out, tag(&format!("{name} input")), norm(batch, 0), &x)?;
        check(&mut out, tag(&format!("{name} gamma")), norm(batch, 1), &gamma)?;
        check(&mut out, tag(&format!("{name} beta")), norm(batch, 2), &beta)?;
    }

    let drop_seed = rng.next_u64();
    check(
        &mut out,
        tag("spatial_dropout"),
        |g, leaf| {
            let y = g.spatial_dropout(leaf, 0.25, Mode::Train, &mut Rng::new(drop_seed))?;
            project(g, y, &same)
        },
        &x,
    )?;
    for window in [3, 4] {
        check(
            &mut out,
            tag(&format!("avg_pool_same w{window}")),
            |g, leaf| {
                let y = g.avg_pool_same(leaf, window)?;
                project(g, y, &same)
            },
            &x,
        )?;
    }

    let other = normal([n, 2, h, w], &mut rng);
    let proj_cat = normal([n, c + 2, h, w], &mut rng);
    check(
        &mut out,
        tag("concat_channels"),
        |g, leaf| {
            let o = g.input(other.clone());
            let y = g.concat_channels(leaf, o)?;
            project(g, y, &proj_cat)
        },
        &x,
    )?;
    check(
        &mut out,
        tag("minmax_normalize"),
        |g, leaf| {
            let y = g.minmax_normalize(leaf);
            project(g, y, &same)
        },
        &x,
    )?;

    let z = normal(shape, &mut rng);
    for name in ["add", "sub", "mul"] {
        check(
            &mut out,
            tag(name),
            |g, leaf| {
                let zi = g.input(z.clone());
                let y = match name {
                    "add" => g.add(leaf, zi)?,
                    "sub" => g.sub(zi, leaf)?,
                    _ => g.mul(leaf, zi)?,
                };
                project(g, y, &same)
            },
            &x,
        )?;
    }

    let s_target = normal(shape, &mut rng);
    check(
        &mut out,
        tag("background_loss"),
        |g, leaf| {
            let t = g.input(s_target.clone());
            g.background_loss(leaf, t)
        },
        &x,
    )?;

    let pred = Tensor::from_fn([n, 1, h, w], |_| 0.05 + 0.9 * rng.uniform());
    let target = Tensor::from_fn([n, 1, h, w], |_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 });
    let include = Tensor::from_fn([n, 1, h, w], |_| if rng.uniform() < 0.2 { 0.0 } else { 1.0 });
    for reduction in [Reduction::Sum, Reduction::Mean] {
        check(
            &mut out,
            tag(&format!("segmentation_loss {reduction:?}")),
            |g, leaf| g.segmentation_loss(leaf, target.clone(), Some(include.clone()), reduction),
            &pred,
        )?;
    }
    Ok(out)
}

/// Every op over every shape and seed, followed by the composed model loss
/// for each seed.
pub fn gradient_suite() -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for seed in GRAD_SEEDS {
        for shape in GRAD_SHAPES {
            out.extend(op_cases(shape, seed)?);
        }
        let reports = model_gradcheck(seed, 6)?;
        assert!(NamedReport::max_inert(&reports) < INERT_TOLERANCE);
        for r in reports.into_iter().filter(|r| !r.inert) {
            out.push((format!("model {} seed {seed}", r.name), r.report.max_rel_err));
        }
    }
    Ok(out)
}

/// Direct seven-loop same-padded dilated convolution.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let s = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h as isize, ws.w as isize);
    let (ph, pw) = (dilation as isize * (kh - 1) / 2, dilation as isize * (kw - 1) / 2);
    let d = dilation as isize;
    Tensor::from_fn([s.n, ws.n, s.h, s.w], |[n, co, y, xx]| {
        let mut acc = b.data()[co];
        for ci in 0..s.c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = y as isize + ky * d - ph;
                    let ix = xx as isize + kx * d - pw;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += w.get(co, ci, ky as usize, kx as usize) * x.get(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

pub struct ConvCase {
    pub dilation: usize,
    pub x: Tensor<f64>,
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

pub const ORACLE_DILATIONS: [usize; 5] = [1, 4, 8, 16, 32];

/// `count` random cases cycling through the oracle dilations.
pub fn conv_cases(count: usize, seed: u64) -> Vec<ConvCase> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let dilation = ORACLE_DILATIONS[i % ORACLE_DILATIONS.len()];
            let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(4));
            let k = [1, 3, 3, 5][rng.below(4)];
            let (h, w) = (6 + rng.below(40), 6 + rng.below(40));
            ConvCase {
                dilation,
                x: normal([n, cin, h, w], &mut rng),
                w: normal([cout, cin, k, k], &mut rng),
                b: normal([cout, 1, 1, 1], &mut rng),
            }
        })
        .collect()
}

/// Largest element-wise relative error, `|a − r| / max(1e-8, |a| + |r|)`.
pub fn max_elementwise_rel(a: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(r.data())
        .map(|(a, r)| (a - r).abs() / (a.abs() + r.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Largest absolute error relative to the largest reference magnitude.
pub fn max_scaled_err(a: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let scale = r.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    a.data().iter().zip(r.data()).map(|(a, r)| (a - r).abs()).fold(0.0, f64::max) / scale
}

/// Per-pixel sort, middle element (mean of the middle pair for even counts),
/// scaled to `[0, 1]`.
pub fn median_oracle(frames: &[image::RgbImage]) -> Tensor {
    let (w, h) = frames[0].dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        let mut v: Vec<u8> = frames.iter().map(|f| f.get_pixel(x as u32, y as u32).0[c]).collect();
        v.sort_unstable();
        let m = v.len() / 2;
        let med = if v.len() % 2 == 1 {
            v[m] as f64
        } else {
            (v[m - 1] as f64 + v[m] as f64) / 2.0
        };
        (med / 255.0) as f32
    })
}

pub fn random_frames(count: usize, w: u32, h: u32, rng: &mut Rng) -> Vec<image::RgbImage> {
    (0..count)
        .map(|_| image::RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8])))
        .collect()
}

/// Scalar-loop confusion counts: 255 is foreground, 0 and 50 background,
/// everything else skipped.
pub fn confusion_oracle(mask: &[u8], codes: &[u8]) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (&m, &g) in mask.iter().zip(codes) {
        let truth = match g {
            255 => true,
            0 | 50 => false,
            _ => continue,
        };
        let idx = match (m == 1, truth) {
            (true, true) => 0,
            (false, false) => 1,
            (true, false) => 2,
            (false, true) => 3,
        };
        c[idx] += 1;
    }
    c
}
