use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape's gradients and central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, over every element of every
/// input. The relative error of one element is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::contract(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let inputs: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut probe = inputs.clone();
    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for (ei, &a) in grad.iter().enumerate() {
            let x0 = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = x0 + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = x0 - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        // Dyadic inputs and step keep every difference exact.
        let x = Tensor::new(vec![3], vec![0.25, -1.5, 4.0]).unwrap();
        let err = check_gradients(|tape, v| Ok(tape.sum(v[0])), &[x], 1.0 / 1024.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = check_gradients(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(check_gradients(|t, v| Ok(t.sum(v[0])), std::slice::from_ref(&x), 0.0).is_err());
        assert!(check_gradients(|t, v| Ok(t.sum(v[0])), &[x], 0.1).is_err());
    }
}
