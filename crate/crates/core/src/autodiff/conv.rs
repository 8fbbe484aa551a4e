//! Direct 2-d cross-correlation kernels with analytic backward passes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Reflect padding (edge pixel not repeated) so that stride 1 preserves size.
    ReflectSame,
}

/// Precomputed source index for every (output position, kernel tap) pair along one axis.
#[derive(Debug)]
struct AxisMap {
    out_len: usize,
    taps: usize,
    src: Vec<usize>,
}

impl AxisMap {
    fn new(in_len: usize, taps: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (before, out_len) = match padding {
            Padding::Valid => {
                if taps > in_len {
                    return Err(Error::Shape(format!(
                        "kernel extent {taps} exceeds input extent {in_len}"
                    )));
                }
                (0, (in_len - taps) / stride + 1)
            }
            Padding::ReflectSame => {
                let before = (taps - 1) / 2;
                let after = taps - 1 - before;
                if before.max(after) >= in_len {
                    return Err(Error::Shape(format!(
                        "reflect padding of {} needs an input extent above {}, got {in_len}",
                        before.max(after),
                        before.max(after)
                    )));
                }
                (before, (in_len - 1) / stride + 1)
            }
        };
        let last = (in_len - 1) as isize;
        let mut src = Vec::with_capacity(out_len * taps);
        for o in 0..out_len {
            for t in 0..taps {
                let mut p = (o * stride + t) as isize - before as isize;
                if p < 0 {
                    p = -p;
                } else if p > last {
                    p = 2 * last - p;
                }
                src.push(p as usize);
            }
        }
        Ok(AxisMap { out_len, taps, src })
    }

    #[inline]
    fn at(&self, o: usize, t: usize) -> usize {
        self.src[o * self.taps + t]
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    rows: AxisMap,
    cols: AxisMap,
}

fn geometry(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Geometry> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, kc, kh, kw) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return Err(Error::Shape(format!("kernel must be 4-d, got {s:?}"))),
    };
    if kc != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::Shape("empty kernel".into()));
    }
    Ok(Geometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        rows: AxisMap::new(h, kh, stride.0, padding)?,
        cols: AxisMap::new(w, kw, stride.1, padding)?,
    })
}

/// Output spatial size of a convolution without running it.
pub fn conv2d_output_size(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<(usize, usize)> {
    let rows = AxisMap::new(h, kernel.0, stride.0, padding)?;
    let cols = AxisMap::new(w, kernel.1, stride.1, padding)?;
    Ok((rows.out_len, cols.out_len))
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let g = geometry(input, kernel, stride, padding)?;
    let (oh, ow) = (g.rows.out_len, g.cols.out_len);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.c_out * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wgt = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let row = &xin[g.rows.at(oy, ky) * g.w..];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d += wgt * row[g.cols.at(ox, kx)];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.c_out, oh, ow], out)
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = geometry(input, kernel, stride, padding)?;
    let (oh, ow) = (g.rows.out_len, g.cols.out_len);
    if grad_out.shape() != [g.c_out, oh, ow] {
        return Err(Error::Shape(format!(
            "output gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.c_out, oh, ow]
        )));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    let grad_kernel = if need_kernel {
        let per_out = g.c_in * g.kh * g.kw;
        let mut dk = vec![0.0; g.c_out * per_out];
        dk.par_chunks_mut(per_out).enumerate().for_each(|(co, dst)| {
            let gplane = &go[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..g.c_in {
                let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let row = &xin[g.rows.at(oy, ky) * g.w..];
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for (ox, gv) in grow.iter().enumerate() {
                                acc += gv * row[g.cols.at(ox, kx)];
                            }
                        }
                        dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        });
        Some(Tensor::new(kernel.shape().to_vec(), dk)?)
    } else {
        None
    };

    let grad_input = if need_input {
        let mut dx = vec![0.0; g.c_in * g.h * g.w];
        dx.par_chunks_mut(g.h * g.w).enumerate().for_each(|(ci, dst)| {
            for co in 0..g.c_out {
                let gplane = &go[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wgt = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let base = g.rows.at(oy, ky) * g.w;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for (ox, gv) in grow.iter().enumerate() {
                                dst[base + g.cols.at(ox, kx)] += wgt * gv;
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok((grad_input, grad_kernel))
}
