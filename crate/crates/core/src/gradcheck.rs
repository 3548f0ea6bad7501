//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Frame, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per tensor; all of them when the tensor is smaller.
    pub coords_per_tensor: usize,
    /// Lower bound of the error denominator, so that gradients which are
    /// zero up to round-off compare as equal.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            coords_per_tensor: 6,
            abs_floor: 1e-6,
        }
    }
}

/// Relative error of one tensor: `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the
/// sampled coordinates.
#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn coords(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares analytic gradients of a scalar `loss` with central differences,
/// for every parameter of `store` and every tensor in `inputs`. `loss`
/// receives a frame over `store` and one leaf per input.
pub fn check_gradients<R, F>(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    loss: F,
    options: &GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    R: Rng,
    F: Fn(&Frame<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let frame = Frame::new(&tape, store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = loss(&frame, &vars)?;
        tape.value(l).item()
    };

    let tape = Tape::new();
    let frame = Frame::new(&tape, store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&frame, &vars)?;
    let bound = frame.finish().vars;
    tape.backward(l)?;
    let grad_of = |v: Var, like: &Tensor<f64>| tape.grad(v).unwrap_or_else(|| like.zeros_like());

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let value = store.value(&name)?.clone();
        let var = *bound
            .get(&name)
            .ok_or_else(|| Error::Invariant(format!("{name} not bound")))?;
        let analytic_full = grad_of(var, &value);
        let coords = pick(value.numel(), options.coords_per_tensor, rng);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &i in &coords {
            let orig = value.data()[i];
            let slot = |s: &mut ParamStore<f64>, v: f64| s.get_mut(&name).expect("present").value.data_mut()[i] = v;
            slot(store, orig + options.eps);
            let plus = eval(store, inputs)?;
            slot(store, orig - options.eps);
            let minus = eval(store, inputs)?;
            slot(store, orig);
            analytic.push(analytic_full.data()[i]);
            numeric.push((plus - minus) / (2.0 * options.eps));
        }
        report.tensors.push(TensorReport {
            name,
            coords: coords.len(),
            rel_error: rel_error(&analytic, &numeric, options.abs_floor),
        });
    }
    for k in 0..inputs.len() {
        let analytic_full = grad_of(vars[k], &inputs[k]);
        let coords = pick(inputs[k].numel(), options.coords_per_tensor, rng);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &i in &coords {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + options.eps;
            let plus = eval(store, inputs)?;
            inputs[k].data_mut()[i] = orig - options.eps;
            let minus = eval(store, inputs)?;
            inputs[k].data_mut()[i] = orig;
            analytic.push(analytic_full.data()[i]);
            numeric.push((plus - minus) / (2.0 * options.eps));
        }
        report.tensors.push(TensorReport {
            name: format!("input{k}"),
            coords: coords.len(),
            rel_error: rel_error(&analytic, &numeric, options.abs_floor),
        });
    }
    Ok(report)
}

fn pick<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

/// `Σ x ⊙ r` for a fixed random `r`, so that every output element matters.
pub fn random_projection(frame: &Frame<'_, f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let tape = frame.tape();
    let r = tape.constant(weights.clone());
    let prod = tape.mul(x, r)?;
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn quadratic_matches() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_vec([3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let mut inputs = vec![Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap()];
        let report = check_gradients(
            &mut store,
            &mut inputs,
            |frame, vars| {
                let t = frame.tape();
                let w = frame.param("w")?;
                let p = t.mul(w, vars[0])?;
                let q = t.mul(p, p)?;
                t.sum(q)
            },
            &GradCheckOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(report.tensors.len(), 2);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }
}
