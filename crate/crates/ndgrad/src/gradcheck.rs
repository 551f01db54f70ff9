//! Central-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{ParamStore, Scalar, Tape, Tensor, Var};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the backward gradient of scalar `f` at `x` against central differences.
///
/// Returns the largest `|a − n| / max(1, |a|, |n|)` over all elements of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, input)?;
    let grads = tape.backward(loss)?;
    let zeros = vec![T::zero(); x.len()];
    let analytic = grads.get(input).unwrap_or(&zeros).to_vec();

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] but over the parameters of `store`.
///
/// `f` must build its loss from `store` via [`Tape::param`]. When
/// `max_coords_per_param` is set, a seeded random subset of each
/// parameter's coordinates is probed.
pub fn grad_check_params<T, F>(
    store: &mut ParamStore<T>,
    f: F,
    eps: f64,
    max_coords_per_param: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let analytic: Vec<Vec<T>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.value.len())).collect();
    let mut worst = 0.0f64;
    for (id, len) in ids {
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let original = store.value(id).data()[i];
            let mut eval = |delta: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = original + T::lit(delta);
                let mut tape = Tape::new();
                let out = f(&mut tape, store)?;
                Ok(tape.value(out).item().as_f64())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            store.get_mut(id).value.data_mut()[i] = original;
            worst = worst.max(relative_error(analytic[id.index()][i].as_f64(), numeric));
        }
    }
    Ok(worst)
}
