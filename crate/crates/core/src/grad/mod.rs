//! Minimal reverse-mode automatic differentiation.
//!
//! Values are dense `f64` tensors of rank at most 2. A [`Tape`] records each
//! operation as it is evaluated and [`Tape::backward`] sweeps it in reverse.
//! Binary operations broadcast size-1 rows/columns; nothing fancier.

mod tape;
mod tensor;

pub use tape::{log_sigmoid, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensors of rank > 2 are not supported (shape {0:?})")]
    UnsupportedRank(Vec<usize>),
    #[error("index {index} out of range in {op} (len {len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { shape: Vec<usize>, axis: usize },
    #[error("{op} over an empty tensor")]
    EmptyReduction { op: &'static str },
    #[error("expected a single-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Absolute slack in the denominator of the finite-difference relative error.
pub const FD_ABS_EPS: f64 = 1e-8;

/// Records `params` as leaves, runs `loss_fn`, and returns the loss value and
/// one gradient per parameter. Generic over the caller's error type so loss
/// functions from other layers can report their own failures.
pub fn value_and_grad<F, E>(loss_fn: F, params: &[Tensor]) -> std::result::Result<(f64, Vec<Tensor>), E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<GradError>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let out = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    Ok((value, out))
}

fn eval_loss<F, E>(loss_fn: &F, params: &[Tensor]) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<GradError>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(GradError::NonFinite { op: "loss" }.into())
    }
}

/// Largest relative disagreement between the tape gradient and a central
/// difference with the given step, over every scalar parameter entry:
/// `|ad - fd| / (|fd| + FD_ABS_EPS)`.
pub fn finite_difference_check<F, E>(
    loss_fn: F,
    params: &[Tensor],
    step: f64,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<GradError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(GradError::InvalidStep(step).into());
    }
    let (_, grads) = value_and_grad(&loss_fn, params)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in grads.iter().enumerate() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + step;
            let up = eval_loss(&loss_fn, &probe)?;
            probe[p].data_mut()[i] = orig - step;
            let down = eval_loss(&loss_fn, &probe)?;
            probe[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = (grad.data()[i] - fd).abs() / (fd.abs() + FD_ABS_EPS);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0).unwrap();
        let y = tape.log_sigmoid(x).unwrap();
        assert!((tape.value(y).item().unwrap() + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_antisymmetric() {
        for x in [-30.0, -2.5, 0.0, 1e-3, 4.0, 700.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_of_summed_sigmoid_at_origin() {
        let (_, g) = value_and_grad(
            |t, p| {
                let s = t.sigmoid(p[0])?;
                t.sum(s)
            },
            &[Tensor::vector(vec![0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[0.25, 0.25]);
    }

    #[test]
    fn log_sigmoid_does_not_overflow() {
        for x in [-1e4, -700.0, -1.0, 0.0, 1.0, 700.0, 1e4] {
            let v = log_sigmoid(x);
            assert!(v.is_finite(), "log_sigmoid({x}) = {v}");
        }
        assert!((log_sigmoid(-1e4) + 1e4).abs() < 1e-9);
        assert_eq!(log_sigmoid(1e4), 0.0);
        let (_, g) = value_and_grad(
            |t, p| {
                let s = t.log_sigmoid(p[0])?;
                t.sum(s)
            },
            &[Tensor::vector(vec![-1e4, 1e4])],
        )
        .unwrap();
        assert!((g[0].data()[0] - 1.0).abs() < 1e-12 && g[0].data()[1].abs() < 1e-12);
    }

    #[test]
    fn quadratic_loss_gradient_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.7, 2.2, 0.0]);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.square(v[0])?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let (_, g) = value_and_grad(
            |t, v| {
                let z = t.scale(v[0], 0.0)?;
                let s = t.sum(z)?;
                t.shift(s, 3.0)
            },
            &[p.clone()],
        )
        .unwrap();
        assert!(g[0].data().iter().all(|&x| x == 0.0));
        let err = finite_difference_check(
            |t, v| {
                let z = t.scale(v[0], 0.0)?;
                let s = t.sum(z)?;
                t.shift(s, 3.0)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    type Prim = fn(&mut Tape, Var, Var) -> Result<Var>;

    fn broadcast_probe_shape(name: &str, a: &[usize; 2], b: &[usize; 2]) -> Vec<usize> {
        if name == "matmul" {
            vec![a[0], b[1]]
        } else {
            vec![a[0].max(b[0]), a[1].max(b[1])]
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let unary: Vec<(&str, fn(&mut Tape, Var) -> Result<Var>, f64)> = vec![
            ("neg", Tape::neg, -3.0),
            ("exp", Tape::exp, -3.0),
            ("ln", Tape::ln, 0.1),
            ("tanh", Tape::tanh, -3.0),
            ("sigmoid", Tape::sigmoid, -3.0),
            ("log_sigmoid", Tape::log_sigmoid, -3.0),
            ("softplus", Tape::softplus, -3.0),
            ("silu", Tape::silu, -3.0),
            ("square", Tape::square, -3.0),
            ("log_softmax", Tape::log_softmax, -3.0),
        ];
        for (name, f, lo) in unary {
            for _ in 0..5 {
                let x = random(&mut rng, &[3, 4], lo, 3.0);
                let w = random(&mut rng, &[3, 4], -1.0, 1.0);
                let err = finite_difference_check(
                    |t, p| {
                        let y = f(t, p[0])?;
                        let c = t.leaf(w.clone())?;
                        let yw = t.mul(y, c)?;
                        t.sum(yw)
                    },
                    &[x],
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{name}: {err}");
            }
        }

        let binary: Vec<(&str, Prim, [usize; 2], [usize; 2])> = vec![
            ("add", Tape::add, [3, 4], [1, 4]),
            ("sub", Tape::sub, [3, 4], [3, 1]),
            ("mul", Tape::mul, [3, 4], [3, 4]),
            ("div", Tape::div, [3, 4], [1, 1]),
            ("matmul", Tape::matmul, [3, 4], [4, 2]),
        ];
        for (name, f, sa, sb) in binary {
            for _ in 0..5 {
                let a = random(&mut rng, &sa, -3.0, 3.0);
                let b = if name == "div" {
                    random(&mut rng, &sb, 0.5, 3.0)
                } else {
                    random(&mut rng, &sb, -3.0, 3.0)
                };
                let shape = broadcast_probe_shape(name, &sa, &sb);
                let w = random(&mut rng, &shape, 0.5, 1.5);
                let err = finite_difference_check(
                    |t, p| {
                        let y = f(t, p[0], p[1])?;
                        let c = t.leaf(w.clone())?;
                        let yw = t.mul(y, c)?;
                        t.sum(yw)
                    },
                    &[a, b],
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{name}: {err}");
            }
        }
    }

    #[test]
    fn reductions_and_gathers_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[4, 3], -3.0, 3.0);
        let err = finite_difference_check(
            |t, p| {
                let rows = t.sum_axis(p[0], 1)?;
                let cols = t.sum_axis(p[0], 0)?;
                let r2 = t.square(rows)?;
                let c2 = t.tanh(cols)?;
                let g = t.gather_rows(p[0], &[0, 2, 1, 1])?;
                let g2 = t.exp(g)?;
                let a = t.sum(r2)?;
                let b = t.sum(c2)?;
                let c = t.mean(g2)?;
                let ab = t.add(a, b)?;
                let flat = t.reshape(p[0], &[12])?;
                let sq = t.take(flat, &[0, 0, 11])?;
                let d = t.sum(sq)?;
                let abc = t.add(ab, c)?;
                t.mul(abc, d)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            GradError::ShapeMismatch {
                op: "add",
                left: vec![2, 3],
                right: vec![3, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 2]"));
        assert!(matches!(
            tape.matmul(a, a),
            Err(GradError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0])).unwrap();
        assert_eq!(tape.ln(x).unwrap_err(), GradError::NonFinite { op: "ln" });
        let big = tape.scalar(1e3).unwrap();
        assert_eq!(tape.exp(big).unwrap_err(), GradError::NonFinite { op: "exp" });
        assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let w = random(&mut rng, &[5, 4], -1.0, 1.0);
            let x = random(&mut rng, &[6, 5], -1.0, 1.0);
            value_and_grad(
                |t, p| {
                    let xv = t.leaf(x.clone())?;
                    let h = t.matmul(xv, p[0])?;
                    let h = t.tanh(h)?;
                    let l = t.log_softmax(h)?;
                    t.mean(l)
                },
                &[w],
            )
            .unwrap()
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(GradError::NonScalarOutput(_))));
    }

    #[test]
    fn invalid_step_rejected() {
        let r = finite_difference_check(|t, p| t.sum(p[0]), &[Tensor::scalar(1.0)], 0.0);
        assert_eq!(r.unwrap_err(), GradError::InvalidStep(0.0));
    }
}
