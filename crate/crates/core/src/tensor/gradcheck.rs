use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences. Returns `max |analytic − numeric| / max(1, |analytic|)`
/// over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Param(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(vec![0.3, -2.0, 5.0]);
        let err = grad_check(|_, v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn hadamard_square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = x.mul(x).unwrap().sum();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[2.0, 4.0]);
        let err = grad_check(|_, v| v.mul(v).map(|y| y.sum()), &Tensor::from_vec(vec![1.0, 2.0]), 1e-5)
            .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn rejects_vector_output_and_bad_step() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(grad_check(|_, v| Ok(v), &x, 1e-5), Err(Error::Contract(_))));
        assert!(matches!(grad_check(|_, v| Ok(v.sum()), &x, 1.0), Err(Error::Param(_))));
    }
}
