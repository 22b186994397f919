//! Central finite-difference gradient checks.

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    let val = out.item();
    if !val.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(val)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    let analytic = tape.backward(out)?.wrt(v);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Same measure for a loss built from a parameter store. At most
/// `max_coords` evenly spaced coordinates of each listed parameter are probed.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    h: f64,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(bound.get(id))).collect();
    drop(bound);

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::no_grad();
        let bound = store.bind(&tape);
        let v = f(&tape, &bound)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (&id, a) in ids.iter().zip(&analytic) {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let ai = a.data()[i];
            worst = worst.max((ai - fd).abs() / ai.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|_, x| x.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn matmul_gradient_matches_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.constant(b.clone());
        let out = av.matmul(bv).unwrap().sum().unwrap();
        let g = tape.backward(out).unwrap().wrt(av);
        for i in 0..3 {
            for j in 0..4 {
                let expect: f64 = b.row(j).iter().sum();
                assert!((g.get2(i, j) - expect).abs() < 1e-12);
            }
        }
        let err = grad_check(
            move |t, x| x.matmul(t.constant(b.clone()))?.sum(),
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5);
    }
}
