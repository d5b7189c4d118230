//! Finite-difference verification of tape gradients.
//!
//! Central differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h` per coordinate,
//! compared against the tape gradient with relative error
//! `|g_tape - g_fd| / max(1, |g_fd|)`. Every gradient registered on the tape
//! is expected to pass at error < 1e-4 on random points.

use super::{GradTape, Tensor, Var};
use crate::error::{Error, Result};

impl Tensor {
    /// Copy with one coordinate shifted by `delta`.
    pub(crate) fn nudged(&self, idx: usize, delta: f64) -> Tensor {
        let mut data = self.data().to_vec();
        data[idx] += delta;
        Tensor::new(self.shape(), data).expect("same shape")
    }
}

/// Max relative error between the tape gradient of `f` and central
/// differences, over every coordinate of every input tensor.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&GradTape, &[Var]) -> Result<Var>,
{
    if !(h > 1e-7 && h < 1e-3) {
        return Err(Error::Contract(format!(
            "step size {h} outside (1e-7, 1e-3)"
        )));
    }

    let tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).data().len() != 1 {
        return Err(Error::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    let grads = tape.backward(out)?;

    let eval = |xs: Vec<Tensor>| -> Result<f64> {
        let tape = GradTape::new();
        let vars: Vec<Var> = xs.into_iter().map(|t| tape.input(t)).collect();
        let out = f(&tape, &vars)?;
        tape.value(out).item()
    };

    let mut max_err = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[ti]);
        for ci in 0..t.data().len() {
            let mut plus = inputs.to_vec();
            plus[ti] = t.nudged(ci, h);
            let mut minus = inputs.to_vec();
            minus[ti] = t.nudged(ci, -h);
            let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
            let err = (g.data()[ci] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&GradTape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::NORM_EPS;

    fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.gauss_vec(n)).unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact_quadratic() {
        let mut rng = SplitMix64::new(42);
        let x = random_tensor(&[7], &mut rng);
        let err = grad_check(|t, v| Ok(t.sum_squares(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn constant_function_checks_to_zero() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = grad_check(
            |t, _v| {
                let c = t.input(Tensor::scalar(3.5));
                Ok(t.scale(c, 2.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-8).is_err());
    }

    #[test]
    fn rejects_non_scalar_output() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let res = grad_check(|t, v| Ok(t.tanh(v)), &x, 1e-5);
        assert!(res.is_err());
    }

    #[test]
    fn matmul_gradient_random_case() {
        let mut rng = SplitMix64::new(7);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);
        let err = grad_check_multi(
            |t, vars| {
                let c = t.matmul(vars[0], vars[1])?;
                Ok(t.sum(c))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn registered_ops_pass_at_random_points() {
        // every op with a registered gradient, 10 seeded points each
        for seed in 0..10u64 {
            let mut rng = SplitMix64::new(1000 + seed);
            let x = random_tensor(&[4, 3], &mut rng);
            let y = random_tensor(&[4, 3], &mut rng);
            let bias = random_tensor(&[3], &mut rng);
            let anchors = random_tensor(&[5, 6], &mut rng);

            let err = grad_check(|t, v| Ok(t.sum(t.tanh(v))), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "tanh err {err}");

            let err = grad_check_multi(
                |t, vars| {
                    let z = t.add_bias(vars[0], vars[1])?;
                    Ok(t.sum_squares(z))
                },
                &[x.clone(), bias],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "add_bias err {err}");

            let err = grad_check_multi(
                |t, vars| {
                    let z = t.concat_cols(vars[0], vars[1])?;
                    let d = t.cosine_dist_to_const(z, &anchors, NORM_EPS)?;
                    Ok(t.sum_squares(d))
                },
                &[x.clone(), y.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "cosine_dist err {err}");

            let err = grad_check(
                |t, v| {
                    let p = t.pairwise_cosine(v, NORM_EPS)?;
                    Ok(t.sum_squares(p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "pairwise err {err}");

            let targets = {
                let mut m = vec![0.0; 4 * 3];
                for i in 0..4 {
                    m[i * 3 + i % 3] = 1.0;
                }
                Tensor::new(&[4, 3], m).unwrap()
            };
            let err = grad_check(|t, v| t.softmax_cross_entropy(v, &targets), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "xent err {err}");

            let err = grad_check_multi(
                |t, vars| t.row_cosine_mean(vars[0], vars[1], NORM_EPS),
                &[x.clone(), y.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "row cosine err {err}");
        }
    }
}
