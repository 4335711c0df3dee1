//! Central finite-difference validation of tape gradients.

use crate::matrix::Matrix;
use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A differentiable scalar function of a parameter list. With `want_grads`
/// the implementation must return the tape gradient for every parameter;
/// otherwise it may skip gradient work.
pub type LossFn<'a> = dyn Fn(&[Matrix], bool) -> Result<(f64, Option<Vec<Matrix>>)> + 'a;

/// Compares tape gradients against central finite differences on a sampled
/// subset of parameter entries and returns the maximum relative error.
///
/// The denominator for each entry is max(|fd|, |tensor grad|_inf, floor):
/// normalizing against the parameter tensor's own gradient scale keeps f32
/// finite-difference noise on near-zero entries from masquerading as error,
/// while a wrong backward formula still shows up at O(1).
pub fn grad_check(
    params: &[Matrix],
    f: &LossFn,
    eps: f32,
    max_samples_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (_, grads) = f(params, true)?;
    let grads = grads.ok_or_else(|| Error::invalid("grad_check", "loss fn returned no grads"))?;
    if grads.len() != params.len() {
        return Err(Error::invalid(
            "grad_check",
            format!("{} grads for {} params", grads.len(), params.len()),
        ));
    }

    let floor = 1e-4f64;
    let mut worst = 0.0f64;
    let mut scratch: Vec<Matrix> = params.to_vec();

    for (pi, p) in params.iter().enumerate() {
        let total = p.data().len();
        let n = if max_samples_per_param == 0 {
            total
        } else {
            total.min(max_samples_per_param)
        };
        let gscale = grads[pi]
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        for s in 0..n {
            let idx = if n == total {
                s
            } else {
                rng.gen_range(0..total)
            };
            let orig = scratch[pi].data()[idx];

            scratch[pi].data_mut()[idx] = orig + eps;
            let (lp, _) = f(&scratch, false)?;
            scratch[pi].data_mut()[idx] = orig - eps;
            let (lm, _) = f(&scratch, false)?;
            scratch[pi].data_mut()[idx] = orig;

            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let fd = (lp - lm) / (2.0 * eps as f64);
            let tg = grads[pi].data()[idx] as f64;
            let rel = (tg - fd).abs() / fd.abs().max(gscale).max(floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Convenience wrapper with the default sampling budget used by the tests.
pub fn grad_check_sampled(
    params: &[Matrix],
    f: &LossFn,
    eps: f32,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::seeded(seed, rng::Stream::GradCheck);
    grad_check(params, f, eps, 16, &mut rng)
}
