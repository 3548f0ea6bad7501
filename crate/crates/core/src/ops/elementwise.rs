use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of equally shaped inputs.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(Error::InvalidArgument("add_n of zero tensors".into()));
        };
        let mut out = (*self.value(first)).clone();
        for &x in rest {
            let v = self.value(x);
            same_shape("add", &out, &v)?;
            out.add_assign(&v)?;
        }
        let n = xs.len();
        self.push(
            "add",
            out,
            xs,
            Box::new(move |g, _, _, needs| (0..n).map(|i| needs[i].then(|| g.clone())).collect()),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_shape(va.shape().clone(), data);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|g, inputs, _, needs| {
                let (x, y) = (inputs[0], inputs[1]);
                let prod = |t: &Tensor<T>| {
                    let d = g.data().iter().zip(t.data()).map(|(&a, &b)| a * b).collect();
                    Tensor::from_shape(g.shape().clone(), d)
                };
                vec![needs[0].then(|| prod(y)), needs[1].then(|| prod(x))]
            }),
        )
    }

    /// Multiplies by a constant.
    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(
            "scale",
            out,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(
            "relu",
            out,
            &[x],
            Box::new(|g, inputs, _, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_shape(g.shape().clone(), d))]
            }),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            out,
            &[x],
            Box::new(|g, inputs, _, _| {
                let gv = g.data()[0];
                vec![Some(inputs[0].map(|_| gv))]
            }),
        )
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `Σ_i weights[row, i] · xs[i]`.
    ///
    /// `weights` is either a vector of length `xs.len()` (then `row` must be
    /// 0) or a matrix whose rows have that length. Summation runs in index
    /// order.
    pub fn weighted_sum(&self, xs: &[Var], weights: Var, row: usize) -> Result<Var> {
        let w = self.value(weights);
        let m = xs.len();
        let width = *w.dims().last().unwrap_or(&0);
        let rows = w.numel() / width.max(1);
        if m == 0 || width != m || row >= rows {
            return Err(Error::InvalidArgument(format!(
                "weighted_sum: {m} inputs, weights {:?}, row {row}",
                w.shape()
            )));
        }
        let coeffs: Vec<T> = w.data()[row * m..(row + 1) * m].to_vec();
        let first = self.value(xs[0]);
        let mut out = first.zeros_like();
        for (i, &x) in xs.iter().enumerate() {
            let v = self.value(x);
            same_shape("weighted_sum", &out, &v)?;
            let c = coeffs[i];
            for (o, &xv) in out.data_mut().iter_mut().zip(v.data()) {
                *o += c * xv;
            }
        }
        let mut parents = xs.to_vec();
        parents.push(weights);
        let wshape = w.shape().clone();
        self.push(
            "weighted_sum",
            out,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let mut grads: Vec<Option<Tensor<T>>> =
                    (0..m).map(|i| needs[i].then(|| g.map(|v| v * coeffs[i]))).collect();
                let wgrad = needs[m].then(|| {
                    let mut gw = vec![T::zero(); wshape.numel()];
                    for i in 0..m {
                        gw[row * m + i] = g.data().iter().zip(inputs[i].data()).map(|(&a, &b)| a * b).sum();
                    }
                    Tensor::from_shape(wshape.clone(), gw)
                });
                grads.push(wgrad);
                grads
            }),
        )
    }
}
