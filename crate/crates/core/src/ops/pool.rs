use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::output_extent;
use crate::tensor::{Real, Tensor};

struct Window {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn new(dims: &[usize], k: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = dims else {
            return Err(Error::InvalidShape(format!("pooling input must be NCHW, got {dims:?}")));
        };
        if k % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!("pool window {k} stride {stride}")));
        }
        let pad = (k - 1) / 2;
        let oh = output_extent(h, k, stride, 1, pad).expect("same padding always fits");
        let ow = output_extent(w, k, stride, 1, pad).expect("same padding always fits");
        Ok(Window {
            n,
            c,
            h,
            w,
            oh,
            ow,
            k,
            stride,
            pad,
        })
    }

    /// In-bounds input indices covered by output position (oy, ox) of a plane.
    fn cells(&self, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        (0..self.k as isize).flat_map(move |dy| {
            (0..self.k as isize).filter_map(move |dx| {
                let (y, x) = (y0 + dy, x0 + dx);
                (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
                    .then(|| y as usize * self.w + x as usize)
            })
        })
    }
}

impl<T: Real> Tape<T> {
    /// `k×k` max pooling with same padding. Padded cells never win; the
    /// gradient goes to the first maximal cell in row-major scan order.
    pub fn max_pool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let win = Window::new(xv.dims(), k, stride)?;
        let (plane_in, plane_out) = (win.h * win.w, win.oh * win.ow);
        let mut out = Vec::with_capacity(win.n * win.c * plane_out);
        let mut argmax = Vec::with_capacity(out.capacity());
        for p in 0..win.n * win.c {
            let src = &xv.data()[p * plane_in..(p + 1) * plane_in];
            for oy in 0..win.oh {
                for ox in 0..win.ow {
                    let mut best: Option<usize> = None;
                    for i in win.cells(oy, ox) {
                        if best.is_none_or(|b| src[i] > src[b]) {
                            best = Some(i);
                        }
                    }
                    let b = best.expect("window holds at least its centre");
                    out.push(src[b]);
                    argmax.push(p * plane_in + b);
                }
            }
        }
        let out = Tensor::from_vec([win.n, win.c, win.oh, win.ow], out)?;
        let in_shape = xv.shape().clone();
        self.push(
            "max_pool2d",
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut d = vec![T::zero(); in_shape.numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                vec![Some(Tensor::from_shape(in_shape.clone(), d))]
            }),
        )
    }

    /// `k×k` average pooling with same padding; padded cells are excluded
    /// from the divisor.
    pub fn avg_pool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let win = Window::new(xv.dims(), k, stride)?;
        let (plane_in, plane_out) = (win.h * win.w, win.oh * win.ow);
        let mut counts = Vec::with_capacity(plane_out);
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                counts.push(win.cells(oy, ox).count());
            }
        }
        let mut out = Vec::with_capacity(win.n * win.c * plane_out);
        for p in 0..win.n * win.c {
            let src = &xv.data()[p * plane_in..(p + 1) * plane_in];
            for oy in 0..win.oh {
                for ox in 0..win.ow {
                    let s: T = win.cells(oy, ox).map(|i| src[i]).sum();
                    out.push(s / T::lit(counts[oy * win.ow + ox] as f64));
                }
            }
        }
        let out = Tensor::from_vec([win.n, win.c, win.oh, win.ow], out)?;
        let in_shape = xv.shape().clone();
        self.push(
            "avg_pool2d",
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut d = vec![T::zero(); in_shape.numel()];
                for p in 0..win.n * win.c {
                    for oy in 0..win.oh {
                        for ox in 0..win.ow {
                            let o = oy * win.ow + ox;
                            let share = g.data()[p * plane_out + o] / T::lit(counts[o] as f64);
                            for i in win.cells(oy, ox) {
                                d[p * plane_in + i] += share;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_shape(in_shape.clone(), d))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_small_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.max_pool2d(x, 3, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn avg_pool_keeps_constants() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2, 3, 5, 5], 0.7).unwrap());
        for stride in [1, 2] {
            let y = tape.avg_pool2d(x, 3, stride).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([1, 1, 1, 3], 1.0).unwrap());
        let y = tape.max_pool2d(x, 3, 2).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 1, 2]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // Output 0 covers columns 0..=1, output 1 covers columns 1..=2.
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 0.0]);
    }
}
