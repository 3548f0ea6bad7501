//! 2-D convolution with stride, dilation and channel groups.
//!
//! The kernel loops are reordered so that the innermost loop is a strided
//! multiply-add over one output row; each kernel tap visits only the output
//! positions whose input sample lies inside the image, which implements
//! zero padding without materializing it.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `⌊dilation·(k−1)/2⌋` zeros on each side.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    (input + 2 * pad).checked_sub(span).map(|r| r / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], opts: Conv2dOptions) -> Result<Self> {
        let &[n, cin, h, w] = input else {
            return Err(Error::InvalidShape(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let &[cout, cin_g, k, k2] = kernel else {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be rank 4, got {kernel:?}"
            )));
        };
        if opts.groups == 0 || cin % opts.groups != 0 || cout % opts.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide input channels {cin} and output channels {cout}",
                opts.groups
            )));
        }
        if k != k2 || cin_g * opts.groups != cin {
            return Err(Error::InvalidShape(format!(
                "kernel {kernel:?} incompatible with {cin} input channels and {} groups",
                opts.groups
            )));
        }
        if !(1..=2).contains(&opts.stride) || !(1..=2).contains(&opts.dilation) {
            return Err(Error::InvalidArgument(format!(
                "stride {} / dilation {} outside {{1, 2}}",
                opts.stride, opts.dilation
            )));
        }
        let pad = match opts.padding {
            Padding::Same => opts.dilation * (k - 1) / 2,
            Padding::Explicit(p) => p,
        };
        let oh = output_extent(h, k, opts.stride, opts.dilation, pad);
        let ow = output_extent(w, k, opts.stride, opts.dilation, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::InvalidShape(format!(
                "kernel {k} larger than padded input {h}x{w}"
            )));
        };
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride: opts.stride,
            dilation: opts.dilation,
            pad,
            groups: opts.groups,
            oh,
            ow,
        })
    }

    /// For kernel tap `t`, the input offset and the range of output indices
    /// whose input sample is in bounds.
    fn tap_range(&self, t: usize, extent: usize, out_extent: usize) -> (isize, usize, usize) {
        let offset = (t * self.dilation) as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
        let last_valid = extent as isize - 1 - offset;
        let hi = if last_valid < 0 {
            0
        } else {
            (last_valid / s + 1).min(out_extent as isize)
        };
        (offset, lo as usize, (hi.max(lo)) as usize)
    }

    fn taps(&self) -> Vec<(isize, usize, usize)> {
        (0..self.k).map(|t| self.tap_range(t, self.h, self.oh)).collect()
    }

    fn taps_x(&self) -> Vec<(isize, usize, usize)> {
        (0..self.k).map(|t| self.tap_range(t, self.w, self.ow)).collect()
    }
}

/// Visits every (input index, output index, weight index) triple in a fixed
/// order, in row segments. `f(in_base, out_base, w_idx, ox_lo, ox_hi, dx)`.
fn for_each_segment(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let ty = g.taps();
    let tx = g.taps_x();
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    for b in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let out_plane = (b * g.cout + oc) * g.oh * g.ow;
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let in_plane = (b * g.cin + ic) * g.h * g.w;
                for (ky, &(dy, oy_lo, oy_hi)) in ty.iter().enumerate() {
                    for (kx, &(dx, ox_lo, ox_hi)) in tx.iter().enumerate() {
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let widx = ((oc * cin_g + icl) * g.k + ky) * g.k + kx;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * g.stride) as isize + dy;
                            let in_row = in_plane + iy as usize * g.w;
                            let out_row = out_plane + oy * g.ow;
                            f(in_row, out_row, widx, ox_lo, ox_hi, dx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias[i % g.cout]);
        }
    }
    let s = g.stride;
    for_each_segment(g, |in_row, out_row, widx, lo, hi, dx| {
        let wv = w[widx];
        let out_seg = &mut out[out_row + lo..out_row + hi];
        let start = ((lo * s) as isize + dx) as usize + in_row;
        if s == 1 {
            for (o, &xv) in out_seg.iter_mut().zip(&x[start..start + (hi - lo)]) {
                *o += wv * xv;
            }
        } else {
            for (j, o) in out_seg.iter_mut().enumerate() {
                *o += wv * x[start + j * s];
            }
        }
    });
    out
}

pub(crate) fn conv_backward_input<T: Real>(g: &Geometry, w: &[T], gout: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    let s = g.stride;
    for_each_segment(g, |in_row, out_row, widx, lo, hi, dx| {
        let wv = w[widx];
        let start = ((lo * s) as isize + dx) as usize + in_row;
        for (j, &go) in gout[out_row + lo..out_row + hi].iter().enumerate() {
            gx[start + j * s] += wv * go;
        }
    });
    gx
}

pub(crate) fn conv_backward_weight<T: Real>(g: &Geometry, x: &[T], gout: &[T], len: usize) -> Vec<T> {
    let mut gw = vec![T::zero(); len];
    let s = g.stride;
    for_each_segment(g, |in_row, out_row, widx, lo, hi, dx| {
        let start = ((lo * s) as isize + dx) as usize + in_row;
        let mut acc = T::zero();
        for (j, &go) in gout[out_row + lo..out_row + hi].iter().enumerate() {
            acc += go * x[start + j * s];
        }
        gw[widx] += acc;
    });
    gw
}

impl<T: Real> Tape<T> {
    /// Convolution of an NCHW input with a `(C_out, C_in/groups, k, k)` kernel.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(kernel));
        let geom = Geometry::new(xv.dims(), wv.dims(), opts)?;
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            if b.dims() != [geom.cout] {
                return Err(Error::InvalidShape(format!(
                    "conv2d bias {:?}, expected [{}]",
                    b.dims(),
                    geom.cout
                )));
            }
        }
        let out = conv_forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::from_vec([geom.n, geom.cout, geom.oh, geom.ow], out)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        self.push(
            "conv2d",
            out,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let (xv, wv) = (inputs[0], inputs[1]);
                let gx = needs[0]
                    .then(|| Tensor::from_shape(xv.shape().clone(), conv_backward_input(&geom, wv.data(), g.data())));
                let gw = needs[1].then(|| {
                    Tensor::from_shape(
                        wv.shape().clone(),
                        conv_backward_weight(&geom, xv.data(), g.data(), wv.numel()),
                    )
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let plane = geom.oh * geom.ow;
                        let mut gb = vec![T::zero(); geom.cout];
                        for (i, chunk) in g.data().chunks(plane).enumerate() {
                            gb[i % geom.cout] += chunk.iter().copied().sum::<T>();
                        }
                        Tensor::from_vec([geom.cout], gb).expect("shape")
                    }));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, opts: Conv2dOptions) -> Tensor<f64> {
        let tape = Tape::new();
        let (x, w) = (tape.constant(x), tape.constant(w));
        let y = tape.conv2d(x, w, None, opts).unwrap();
        (*tape.value(y)).clone()
    }

    #[test]
    fn ones_full_map() {
        let y = run(
            Tensor::ones([1, 1, 3, 3]).unwrap(),
            Tensor::ones([1, 1, 3, 3]).unwrap(),
            Conv2dOptions::default(),
        );
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_vec([1, 1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 7.0, -1.5]).unwrap();
        let y = run(x.clone(), Tensor::ones([1, 1, 1, 1]).unwrap(), Conv2dOptions::default());
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_bad_groups() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros([4, 1, 3, 3]).unwrap());
        let err = tape.conv2d(x, w, None, Conv2dOptions::default().groups(2)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros([4, 2, 3, 3]).unwrap());
        let err = tape.conv2d(x, w, None, Conv2dOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        for (k, d) in [(1, 1), (3, 1), (5, 1), (3, 2), (5, 2)] {
            let y = run(
                Tensor::zeros([1, 1, 16, 16]).unwrap(),
                Tensor::zeros([1, 1, k, k]).unwrap(),
                Conv2dOptions::default().stride(2).dilation(d),
            );
            assert_eq!(y.dims(), &[1, 1, 8, 8], "k={k} d={d}");
        }
    }
}
