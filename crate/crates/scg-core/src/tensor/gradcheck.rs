//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Result, ScgError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with the given step. `f` must be
/// deterministic; it is evaluated twice up front and a mismatch is a
/// contract error (unseeded noise inside `f`).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let base1 = eval(x)?;
    let base2 = eval(x)?;
    if base1 != base2 {
        return Err(ScgError::Contract(format!(
            "grad_check requires a deterministic function: {base1} vs {base2}"
        )));
    }

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).is_scalar() {
        return Err(ScgError::Contract("grad_check function must return a scalar".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check for multi-tensor functions (e.g. network
/// parameters), probing a random sample of elements per tensor instead of
/// every element. `eval` recomputes the scalar loss from candidate values;
/// `analytic` holds the already-computed gradients in matching order.
pub fn grad_check_sampled(
    eval: impl Fn(&[Tensor]) -> Result<f64>,
    analytic: &[Tensor],
    xs: &[Tensor],
    step: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    if analytic.len() != xs.len() {
        return Err(ScgError::Contract(format!(
            "grad_check_sampled: {} gradients for {} tensors",
            analytic.len(),
            xs.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut probe: Vec<Tensor> = xs.to_vec();
    let mut worst: f64 = 0.0;
    for ti in 0..xs.len() {
        let n = xs[ti].numel();
        let picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[ti].data()[i], numeric));
        }
    }
    Ok(worst)
}
