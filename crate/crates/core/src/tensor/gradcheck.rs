use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

const PROBE_SEED: u64 = 0x5eed_f00d;

/// Builds the differentiable computation under test from parameter leaves.
pub trait Objective: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> Objective for F {}

fn probe_weights(shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(PROBE_SEED);
    let mut w = Tensor::zeros(shape.to_vec());
    for v in w.data_mut() {
        *v = rng.uniform(0.5, 1.5);
    }
    w
}

/// Reduces `f`'s output to a scalar with fixed pseudo-random weights in
/// `[0.5, 1.5)`, so every output entry contributes a generic amount.
fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let w = probe_weights(tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate(f: &impl Objective, params: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let y = tape.value(out).clone();
    if !y.is_finite() {
        return Err(Error::NonFinite("objective output is not finite".into()));
    }
    Ok(y)
}

/// Tape gradients of the probed objective.
pub fn analytic_gradients(f: &impl Objective, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = probe(&mut tape, out)?;
    tape.backward(s)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect())
}

/// Central differences of the probed objective with step [`FD_STEP`].
pub fn numeric_gradients(f: &impl Objective, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape().to_vec());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + FD_STEP;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig - FD_STEP;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig;
            // difference each output before weighting, so outputs that do not
            // depend on this entry cancel exactly instead of adding round-off
            let w = probe_weights(plus.shape());
            let diff: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(w.data())
                .map(|((a, b), w)| w * (a - b))
                .sum();
            g.data_mut()[i] = diff / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Max over entries of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::dims(
            "compare_gradients",
            &[analytic.len()],
            &[numeric.len()],
        ));
    }
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::dims("compare_gradients", a.shape(), n.shape()));
        }
        for (&x, &y) in a.data().iter().zip(n.data()) {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite(format!("gradient entry {x} vs {y}")));
            }
            worst = worst.max((x - y).abs() / (y.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// Worst relative disagreement between tape gradients and central finite
/// differences over every entry of `params`.
///
/// Non-scalar outputs of `f` are reduced with fixed random weights before
/// differentiating.
pub fn finite_diff_check(f: impl Objective, params: &[Tensor]) -> Result<f64> {
    let analytic = analytic_gradients(&f, params)?;
    let numeric = numeric_gradients(&f, params)?;
    compare_gradients(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: [usize; 2], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn linear_map_is_exact() {
        let a = rand([3, 4], 1);
        let x = rand([4, 2], 2);
        let err =
            finite_diff_check(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]), &[a, x]).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn softmax_composite() {
        let a = rand([3, 5], 3);
        let b = rand([5, 4], 4);
        let err = finite_diff_check(
            |t: &mut Tape, v: &[Var]| {
                let s = t.matmul(v[0], v[1])?;
                let mask: std::rc::Rc<[bool]> = (0..12).map(|i| i % 4 != 3).collect();
                let y = t.softmax(s, Some(mask))?;
                let z = t.sigmoid(y);
                t.mul(z, y)
            },
            &[a, b],
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let a = rand([2, 3], 5);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.mul(v[0], v[0])?;
            Ok(t.sigmoid(s))
        };
        let mut analytic = analytic_gradients(&f, std::slice::from_ref(&a)).unwrap();
        let numeric = numeric_gradients(&f, &[a]).unwrap();
        assert!(compare_gradients(&analytic, &numeric).unwrap() <= 1e-4);
        analytic[0].data_mut()[2] += 0.1;
        assert!(compare_gradients(&analytic, &numeric).unwrap() > 1e-2);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let a = Tensor::filled([1, 1], f64::NAN);
        let res = finite_diff_check(|t: &mut Tape, v: &[Var]| Ok(t.scale(v[0], 2.0)), &[a]);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
