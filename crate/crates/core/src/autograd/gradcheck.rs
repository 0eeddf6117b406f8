//! Central finite-difference oracle for checking analytic gradients.

use super::{AutogradError, Result, Tape, TapeOptions, Tensor, Var};

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every coordinate
/// of `x`, for a scalar function built on a tape.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        epsilon,
    )
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(AutogradError::BadEpsilon(epsilon));
    }

    // non-finite intermediates surface as a non-finite objective below
    let mut tape = Tape::with_options(TapeOptions {
        record: true,
        strict: false,
    });
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).item().is_finite() {
        return Err(AutogradError::NonFiniteObjective);
    }
    let analytic: Vec<Vec<f64>> = if tape.has_lineage(root) {
        tape.backward(root)?;
        vars.iter()
            .zip(xs)
            .map(|(&v, x)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; x.numel()])
            })
            .collect()
    } else {
        // f does not depend on its inputs at all
        xs.iter().map(|x| vec![0.0; x.numel()]).collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::with_options(TapeOptions {
            record: false,
            strict: false,
        });
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutogradError::NonFiniteObjective)
        }
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic[which][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
