use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch moments produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when a channel has a single sample).
    pub var: Vec<T>,
}

/// Optional `(gamma, beta)` scale and shift.
pub type Affine = Option<(Var, Var)>;

impl<T: Real> Tape<T> {
    fn check_affine(&self, affine: Affine, c: usize) -> Result<()> {
        if let Some((gamma, beta)) = affine {
            for v in [gamma, beta] {
                if self.value(v).dims() != [c] {
                    return Err(Error::InvalidShape(format!(
                        "batch_norm affine {:?}, expected [{c}]",
                        self.value(v).dims()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(&self, x: Var, affine: Affine) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape().nchw()?;
        self.check_affine(affine, c)?;
        let plane = h * w;
        let m = n * plane;
        let eps = T::lit(BN_EPS);
        let inv_m = T::one() / T::lit(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xv.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v *= inv_m);
        for b in 0..n {
            for ch in 0..c {
                let s = &xv.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let (gamma, beta) = match affine {
            Some((g, b)) => (Some(self.value(g)), Some(self.value(b))),
            None => (None, None),
        };
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (gm, bt) = match (&gamma, &beta) {
                    (Some(g), Some(bb)) => (g.data()[ch], bb.data()[ch]),
                    _ => (T::one(), T::zero()),
                };
                for i in base..base + plane {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * gm + bt;
                }
            }
        }
        let unbiased = if m > 1 {
            let f = T::lit(m as f64 / (m - 1) as f64);
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats { mean, var: unbiased };

        let mut parents = vec![x];
        if let Some((g, b)) = affine {
            parents.extend([g, b]);
        }
        let shape = xv.shape().clone();
        let var_out = self.push(
            "batch_norm",
            Tensor::from_shape(shape.clone(), out),
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let gamma = inputs.get(1).map(|t| t.data());
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut d = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gm = gamma.map_or(T::one(), |g| g[ch]);
                            let k = gm * inv_std[ch] * inv_m;
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                d[i] = k * (T::lit(m as f64) * gd[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    Tensor::from_shape(shape.clone(), d)
                });
                let mut grads = vec![gx];
                if inputs.len() == 3 {
                    grads.push(needs[1].then(|| Tensor::from_vec([c], sum_dy_xhat.clone()).expect("c > 0")));
                    grads.push(needs[2].then(|| Tensor::from_vec([c], sum_dy.clone()).expect("c > 0")));
                }
                grads
            }),
        )?;
        Ok((var_out, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&self, x: Var, affine: Affine, mean: &[T], var: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape().nchw()?;
        self.check_affine(affine, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::InvalidShape(format!(
                "running statistics of length {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let plane = h * w;
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gamma, beta) = match affine {
            Some((g, b)) => (Some(self.value(g).data().to_vec()), Some(self.value(b).data().to_vec())),
            None => (None, None),
        };
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let gm = gamma.as_ref().map_or(T::one(), |g| g[ch]);
                let bt = beta.as_ref().map_or(T::zero(), |b| b[ch]);
                for i in base..base + plane {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * gm + bt;
                }
            }
        }
        let mut parents = vec![x];
        if let Some((g, b)) = affine {
            parents.extend([g, b]);
        }
        let shape = xv.shape().clone();
        self.push(
            "batch_norm",
            Tensor::from_shape(shape.clone(), out),
            &parents,
            Box::new(move |g, _, _, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut d = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma.as_ref().map_or(T::one(), |g| g[ch]) * inv_std[ch];
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                d[i] = gd[i] * k;
                            }
                        }
                    }
                    Tensor::from_shape(shape.clone(), d)
                });
                let mut grads = vec![gx];
                if needs.len() == 3 {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                dg[ch] += gd[i] * xhat[i];
                                db[ch] += gd[i];
                            }
                        }
                    }
                    grads.push(needs[1].then(|| Tensor::from_vec([c], dg).expect("c > 0")));
                    grads.push(needs[2].then(|| Tensor::from_vec([c], db).expect("c > 0")));
                }
                grads
            }),
        )
    }
}
