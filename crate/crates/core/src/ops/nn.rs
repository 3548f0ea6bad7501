use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Numerically stable softmax of one contiguous slice into `out`.
pub(crate) fn softmax_slice<T: Real>(xs: &[T], out: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<T: Real> Tape<T> {
    /// `x · Wᵀ + b` with `x: (N, F)`, `W: (K, F)`, `b: (K)`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let (n, f) = match xv.dims() {
            &[n, f] => (n, f),
            d => return Err(Error::InvalidShape(format!("linear input must be (N, F), got {d:?}"))),
        };
        let k = match wv.dims() {
            &[k, wf] if wf == f => k,
            d => {
                return Err(Error::InvalidShape(format!(
                    "linear weight {d:?} does not match {f} input features"
                )))
            }
        };
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            if b.dims() != [k] {
                return Err(Error::InvalidShape(format!(
                    "linear bias {:?}, expected [{k}]",
                    b.dims()
                )));
            }
        }
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &xv.data()[i * f..(i + 1) * f];
            for j in 0..k {
                let wrow = &wv.data()[j * f..(j + 1) * f];
                let mut acc: T = row.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                if let Some(b) = &bv {
                    acc += b.data()[j];
                }
                out[i * k + j] = acc;
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            "linear",
            Tensor::from_vec([n, k], out)?,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let (xv, wv) = (inputs[0], inputs[1]);
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut d = vec![T::zero(); n * f];
                    for i in 0..n {
                        for j in 0..k {
                            let gij = gd[i * k + j];
                            for (o, &wv) in d[i * f..(i + 1) * f].iter_mut().zip(&wv.data()[j * f..(j + 1) * f]) {
                                *o += gij * wv;
                            }
                        }
                    }
                    Tensor::from_shape(xv.shape().clone(), d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * f];
                    for i in 0..n {
                        for j in 0..k {
                            let gij = gd[i * k + j];
                            for (o, &xv) in d[j * f..(j + 1) * f].iter_mut().zip(&xv.data()[i * f..(i + 1) * f]) {
                                *o += gij * xv;
                            }
                        }
                    }
                    Tensor::from_shape(wv.shape().clone(), d)
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut d = vec![T::zero(); k];
                        for i in 0..n {
                            for j in 0..k {
                                d[j] += gd[i * k + j];
                            }
                        }
                        Tensor::from_shape(Shape::new([k]).expect("k > 0"), d)
                    }));
                }
                grads
            }),
        )
    }

    /// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape().nchw()?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let in_shape = xv.shape().clone();
        self.push(
            "global_avg_pool",
            Tensor::from_vec([n, c], out)?,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut d = Vec::with_capacity(in_shape.numel());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, plane));
                }
                vec![Some(Tensor::from_shape(in_shape.clone(), d))]
            }),
        )
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let values: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let (n, _, h, w) = values[0].shape().nchw()?;
        let mut channels = Vec::with_capacity(xs.len());
        for v in &values {
            let (vn, vc, vh, vw) = v.shape().nchw()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::InvalidShape(format!(
                    "concat: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&channels) {
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        self.push(
            "concat_channels",
            Tensor::from_vec([n, total, h, w], out)?,
            xs,
            Box::new(move |g, _, _, needs| {
                let mut start = 0;
                channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let grad = needs[i].then(|| g.slice_channels(start, start + c).expect("in range"));
                        start += c;
                        grad
                    })
                    .collect()
            }),
        )
    }

    /// Channels `start..end` of an NCHW tensor.
    pub fn slice_channels(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.slice_channels(start, end)?;
        let (n, c, h, w) = xv.shape().nchw()?;
        self.push(
            "slice_channels",
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let plane = h * w;
                let width = end - start;
                let mut d = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = b * c * plane + start * plane;
                    d[dst..dst + width * plane].copy_from_slice(&g.data()[b * width * plane..(b + 1) * width * plane]);
                }
                vec![Some(Tensor::from_vec([n, c, h, w], d).expect("shape"))]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let dims = xv.dims();
        if axis >= dims.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for shape {dims:?}"
            )));
        }
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut out = vec![T::zero(); xv.numel()];
        let mut buf_in = vec![T::zero(); len];
        let mut buf_out = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                for k in 0..len {
                    buf_in[k] = xv.data()[idx(k)];
                }
                softmax_slice(&buf_in, &mut buf_out);
                for k in 0..len {
                    out[idx(k)] = buf_out[k];
                }
            }
        }
        self.push(
            "softmax",
            Tensor::from_shape(xv.shape().clone(), out),
            &[x],
            Box::new(move |g, _, y, _| {
                // dx_k = y_k (g_k - Σ_j g_j y_j)
                let mut d = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_shape(y.shape().clone(), d))]
            }),
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = match lv.dims() {
            &[n, k] => (n, k),
            d => return Err(Error::InvalidShape(format!("logits must be (N, K), got {d:?}"))),
        };
        if labels.is_empty() {
            return Err(Error::InvalidArgument("cross_entropy on an empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[labels[i]];
            softmax_slice(row, &mut probs[i * k..(i + 1) * k]);
        }
        let inv_n = T::one() / T::lit(n as f64);
        let labels = labels.to_vec();
        let shape = lv.shape().clone();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss * inv_n),
            &[logits],
            Box::new(move |g, _, _, _| {
                let scale = g.data()[0] * inv_n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                vec![Some(Tensor::from_shape(shape.clone(), d))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([7], 0.3).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_decreases_as_correct_logit_grows() {
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let tape = Tape::<f64>::new();
            let z = step as f64;
            let l = tape.constant(Tensor::from_vec([1, 3], vec![z, 0.0, 0.0]).unwrap());
            let ce = tape.value(tape.cross_entropy(l, &[0]).unwrap()).data()[0];
            assert!(ce < last);
            last = ce;
        }
    }

    #[test]
    fn cross_entropy_validates_labels() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros([2, 3]).unwrap());
        assert!(matches!(tape.cross_entropy(l, &[0, 3]), Err(Error::InvalidArgument(_))));
        assert!(matches!(tape.cross_entropy(l, &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec([2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec([2, 2, 2, 2], (100..116).map(f64::from).collect()).unwrap();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.concat_channels(&[va, vb]).unwrap();
        assert_eq!(tape.value(c).dims(), &[2, 3, 2, 2]);
        let sa = tape.slice_channels(c, 0, 1).unwrap();
        let sb = tape.slice_channels(c, 1, 3).unwrap();
        assert_eq!(*tape.value(sa), a);
        assert_eq!(*tape.value(sb), b);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_vec([2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec([2], vec![0.5, 0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5]);
    }
}
