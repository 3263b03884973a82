//! Stride-1, same-padded, dilated 2-D convolution via im2col + GEMM.
//!
//! Samples are processed independently (and in parallel when the rayon pool
//! has more than one thread). Cross-sample reductions for the weight and bias
//! gradients are summed in sample order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    dilation: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Geometry> {
    if dilation < 1 {
        return Err(Error::InvalidArgument(format!(
            "conv2d_same: dilation must be >= 1, got {dilation}"
        )));
    }
    let (is, ws) = (input.shape(), weight.shape());
    if is.c != ws.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same (input channels vs weight Cin)",
            left: is,
            right: ws,
        });
    }
    if ws.h % 2 == 0 || ws.w % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d_same: kernel must have odd extent, weight shape {ws}"
        )));
    }
    if bias.len() != ws.n {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same (bias length vs weight Cout)",
            left: bias.shape(),
            right: ws,
        });
    }
    Ok(Geometry {
        n: is.n,
        cin: is.c,
        cout: ws.n,
        kh: ws.h,
        kw: ws.w,
        h: is.h,
        w: is.w,
        dilation,
    })
}

/// Valid destination range `[lo, hi)` for a shift of `off` along an axis of
/// length `len` (source index = destination index + off).
#[inline]
fn shifted_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).clamp(0, len as isize) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (cy, cx) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let d = g.dilation as isize;
    for ci in 0..g.cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let dy = d * (ky as isize - cy);
            let (ylo, yhi) = shifted_range(h, dy);
            for kx in 0..g.kw {
                let dx = d * (kx as isize - cx);
                let (xlo, xhi) = shifted_range(w, dx);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst[..ylo * w].fill(T::zero());
                dst[yhi * w..].fill(T::zero());
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if xhi > xlo {
                        let s0 = (sy * w) as isize + xlo as isize + dx;
                        let s0 = s0 as usize;
                        drow[xlo..xhi].copy_from_slice(&src[s0..s0 + (xhi - xlo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column rows back into image planes.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (cy, cx) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let d = g.dilation as isize;
    x.fill(T::zero());
    for ci in 0..g.cin {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let dy = d * (ky as isize - cy);
            let (ylo, yhi) = shifted_range(h, dy);
            for kx in 0..g.kw {
                let dx = d * (kx as isize - cx);
                let (xlo, xhi) = shifted_range(w, dx);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let s0 = ((sy * w) as isize + xlo as isize + dx) as usize;
                    let srow = &src[y * w + xlo..y * w + xhi];
                    for (o, &v) in dst[s0..s0 + (xhi - xlo)].iter_mut().zip(srow) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// Same-padded dilated convolution.
///
/// `weight` is `[Cout, Cin, Kh, Kw]` with odd `Kh`, `Kw`; `bias` holds `Cout`
/// values in any shape. Zero padding of `dilation·(K−1)/2` per side keeps
/// the output at `[N, Cout, H, W]`.
pub fn conv2d_same<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, dilation)?;
    let (hw, rows) = (g.hw(), g.rows());
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let wdata = weight.data();
    let bdata = bias.data();
    out.par_chunks_mut(g.cout * hw)
        .zip(input.data().par_chunks(g.cin * hw))
        .for_each_init(
            || {
                if g.pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); rows * hw]
                }
            },
            |cols, (o, x)| {
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.fill(bdata[co]);
                }
                let b: &[T] = if g.pointwise() {
                    x
                } else {
                    im2col(x, &g, cols);
                    cols
                };
                // SAFETY: weight is [cout, rows], b is [rows, hw], o is [cout, hw],
                // all row-major and fully in bounds.
                unsafe {
                    T::gemm(
                        g.cout,
                        rows,
                        hw,
                        T::one(),
                        wdata.as_ptr(),
                        rows as isize,
                        1,
                        b.as_ptr(),
                        hw as isize,
                        1,
                        T::one(),
                        o.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            },
        );
    Ok(Tensor::from_parts(Shape::new(g.n, g.cout, g.h, g.w), out))
}

#[derive(Debug)]
pub struct ConvGrads<T: Scalar> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d_same`] given the upstream gradient `grad_out`.
pub fn conv2d_same_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    dilation: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let ws = weight.shape();
    let zero_bias = Tensor::<T>::zeros(Shape::channels(ws.n));
    let g = geometry(input, weight, &zero_bias, dilation)?;
    let os = Shape::new(g.n, g.cout, g.h, g.w);
    grad_out.expect_shape(os, "conv2d_same_backward")?;
    let (hw, rows) = (g.hw(), g.rows());
    let wdata = weight.data();

    // Per-sample weight partials are reduced afterwards in sample order.
    let per_sample = |x: &[T], dout: &[T], dx: Option<&mut [T]>, cols: &mut Vec<T>| -> Vec<T> {
        let b: &[T] = if g.pointwise() {
            x
        } else {
            cols.resize(rows * hw, T::zero());
            im2col(x, &g, cols);
            cols
        };
        let mut dw = vec![T::zero(); g.cout * rows];
        // SAFETY: dout [cout, hw] times b^T [hw, rows] into dw [cout, rows].
        unsafe {
            T::gemm(
                g.cout,
                hw,
                rows,
                T::one(),
                dout.as_ptr(),
                hw as isize,
                1,
                b.as_ptr(),
                1,
                hw as isize,
                T::zero(),
                dw.as_mut_ptr(),
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx {
            let mut dcols = vec![T::zero(); rows * hw];
            // SAFETY: weight^T [rows, cout] times dout [cout, hw] into dcols [rows, hw].
            unsafe {
                T::gemm(
                    rows,
                    g.cout,
                    hw,
                    T::one(),
                    wdata.as_ptr(),
                    1,
                    rows as isize,
                    dout.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            if g.pointwise() {
                dx.copy_from_slice(&dcols);
            } else {
                col2im(&dcols, &g, dx);
            }
        }
        dw
    };

    let xs = input.data().par_chunks(g.cin * hw);
    let ds = grad_out.data().par_chunks(g.cout * hw);
    let (partials, dx): (Vec<Vec<T>>, Option<Tensor<T>>) = if need_input {
        let mut dx = vec![T::zero(); input.len()];
        let partials = dx
            .par_chunks_mut(g.cin * hw)
            .zip(xs.zip(ds))
            .map_init(Vec::new, |cols, (dxs, (x, d))| per_sample(x, d, Some(dxs), cols))
            .collect();
        (partials, Some(Tensor::from_parts(input.shape(), dx)))
    } else {
        let partials = xs
            .zip(ds)
            .map_init(Vec::new, |cols, (x, d)| per_sample(x, d, None, cols))
            .collect();
        (partials, None)
    };

    let mut dw = vec![T::zero(); g.cout * rows];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for (co, acc) in db.iter_mut().enumerate() {
        let mut s = 0.0f64;
        for n in 0..g.n {
            s += grad_out.plane(n, co).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        *acc = T::from_f64_lossy(s);
    }
    Ok(ConvGrads {
        input: dx,
        weight: Tensor::from_parts(ws, dw),
        bias: Tensor::from_parts(Shape::channels(g.cout), db),
    })
}
