//! Central-difference gradient checking.

use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compare analytic gradients against central differences of `scalar_fn`.
///
/// For every coordinate of every parameter the function is evaluated at
/// `±epsilon` and the relative error
/// `|analytic − central| / max(|analytic|, |central|, 1e-8)` is recorded;
/// the maximum over all coordinates is returned. Non-finite losses abort.
pub fn grad_check<T: Scalar>(
    mut scalar_fn: impl FnMut(&[Tensor<T>]) -> Result<T, NnError>,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    assert_eq!(
        params.len(),
        analytic.len(),
        "one analytic gradient per parameter"
    );
    let eps = T::from_f64(epsilon);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(
            grad.shape(),
            params[pi].shape(),
            "gradient shape must match parameter shape"
        );
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = scalar_fn(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = scalar_fn(&work)?;
            work[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NnError::NonFinite { op: "grad_check" });
            }
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * epsilon);
            let a = grad.data()[ei].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    #[test]
    fn quadratic_gradient_checks_below_1e6() {
        let w = Tensor::<f64>::new(vec![1, 4], vec![0.7, -1.3, 2.1, 0.05]).unwrap();
        let f = |ps: &[Tensor<f64>]| -> Result<f64, NnError> {
            Ok(ps[0].data().iter().map(|v| v * v).sum())
        };
        let analytic =
            Tensor::<f64>::new(vec![1, 4], w.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let report = grad_check(f, &[w], &[analytic], 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let w = Tensor::<f64>::new(vec![1, 3], vec![0.4, 1.0, -0.6]).unwrap();
        let f = |ps: &[Tensor<f64>]| -> Result<f64, NnError> {
            Ok(ps[0].data().iter().map(|v| v * v).sum())
        };
        let mut grads: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
        grads[1] += 1.0; // deliberate corruption of one weight's gradient
        let analytic = Tensor::<f64>::new(vec![1, 3], grads).unwrap();
        let report = grad_check(f, &[w], &[analytic], 1e-4).unwrap();
        assert!(report.max_rel_err > 1e-1, "rel err {}", report.max_rel_err);
        assert_eq!(report.worst, (0, 1));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let w = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let analytic = Tensor::<f64>::zeros(vec![1]);
        let f = |_: &[Tensor<f64>]| -> Result<f64, NnError> { Ok(f64::NAN) };
        assert!(grad_check(f, &[w], &[analytic], 1e-3).is_err());
    }

    /// Every differentiable tape op stays below 1e-4 relative error in f64.
    #[test]
    fn tape_ops_gradient_suite() {
        type BuildFn = fn(&mut Tape<f64>, crate::nn::tape::VarId) -> crate::nn::tape::VarId;
        let cases: Vec<(&str, Vec<usize>, Vec<f64>, BuildFn)> = vec![
            (
                "sigmoid",
                vec![2, 3],
                vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1],
                |t, x| {
                    let s = t.sigmoid(x);
                    t.sum_all(s)
                },
            ),
            (
                "softmax",
                vec![2, 3],
                vec![0.5, 1.5, -0.7, 0.0, 0.2, -0.2],
                |t, x| {
                    // Mix rows via s @ sᵀ so the off-diagonal Jacobian of the
                    // softmax is exercised, not just the row sums.
                    let s = t.softmax_rows(x).unwrap();
                    let tr = t.transpose(s).unwrap();
                    let mixed = t.matmul(s, tr).unwrap();
                    t.sum_all(mixed)
                },
            ),
            (
                "layer_norm",
                vec![2, 4],
                vec![0.9, -0.3, 0.5, 1.1, -0.8, 0.25, 0.0, 0.6],
                |t, x| {
                    let gain =
                        t.param(Tensor::new(vec![1, 4], vec![1.1, 0.9, 1.0, 1.05]).unwrap());
                    let bias =
                        t.param(Tensor::new(vec![1, 4], vec![0.0, 0.1, -0.1, 0.05]).unwrap());
                    let y = t.layer_norm(x, gain, bias).unwrap();
                    let s = t.sigmoid(y);
                    t.sum_all(s)
                },
            ),
            (
                "matmul_transpose_scale",
                vec![2, 3],
                vec![0.4, -0.9, 0.3, 1.2, 0.7, -0.5],
                |t, x| {
                    let xt = t.transpose(x).unwrap();
                    let sq = t.matmul(x, xt).unwrap();
                    let sc = t.scale(sq, 0.37);
                    t.sum_all(sc)
                },
            ),
            (
                "gather_concat_slice",
                vec![3, 4],
                vec![
                    0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8, 0.9, -1.0, 1.1, -1.2,
                ],
                |t, x| {
                    let g = t.gather_rows(x, &[2, 0, 2]).unwrap();
                    let s1 = t.slice_cols(g, 0, 2).unwrap();
                    let s2 = t.slice_cols(g, 2, 2).unwrap();
                    let c = t.concat_cols(&[s2, s1]).unwrap();
                    let r = t.concat_rows(&[c, c]).unwrap();
                    let sig = t.sigmoid(r);
                    t.sum_all(sig)
                },
            ),
            (
                "sum_rows_broadcast",
                vec![2, 3],
                vec![0.2, -0.1, 0.5, 0.3, 0.9, -0.4],
                |t, x| {
                    let row =
                        t.param(Tensor::new(vec![1, 3], vec![0.05, -0.2, 0.4]).unwrap());
                    let y = t.add_row_broadcast(x, row).unwrap();
                    let s = t.sum_rows(y).unwrap();
                    let sig = t.sigmoid(s);
                    t.sum_all(sig)
                },
            ),
            (
                "gather_log_weighted",
                vec![2, 3],
                vec![0.2, 0.5, 0.3, 0.25, 0.25, 0.5],
                |t, x| {
                    let sm = t.softmax_rows(x).unwrap();
                    let lg = t.gather_log(sm, &[(0, 1), (1, 2)], 1e-12).unwrap();
                    let s = t.sum_all(lg);
                    let s2 = t.sum_all(x);
                    t.weighted_sum(&[(2.0, s), (-0.5, s2)]).unwrap()
                },
            ),
        ];
        for (name, shape, vals, build) in cases {
            let init = Tensor::<f64>::new(shape, vals).unwrap();
            let run = |ps: &[Tensor<f64>]| -> Result<f64, NnError> {
                let mut tape = Tape::new();
                let x = tape.param(ps[0].clone());
                let loss = build(&mut tape, x);
                Ok(tape.value(loss).item())
            };
            let mut tape = Tape::new();
            let x = tape.param(init.clone());
            let loss = build(&mut tape, x);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(x).unwrap().clone();
            let report = grad_check(run, &[init], &[analytic], 1e-5).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{name}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }
}
