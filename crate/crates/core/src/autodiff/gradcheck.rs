//! Central finite differences against the reverse-mode gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Five-point central difference `f'(x)` from `f(x±h)` and `f(x±2h)`;
/// truncation error is `O(h⁴)`.
pub fn five_point(f_p2: f64, f_p1: f64, f_m1: f64, f_m2: f64, h: f64) -> f64 {
    (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * h)
}

/// Compares the tape gradient of the scalar built by `f` with five-point
/// central differences of step `h`, element by element over every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarLoss {
                shape: tape.value(out).shape().to_vec(),
            })
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for e in 0..inputs[i].len() {
            let x = inputs[i].data()[e];
            let mut at = |offset: f64| {
                probe[i].data_mut()[e] = x + offset;
                eval(&probe)
            };
            let numeric = five_point(at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?, h);
            probe[i].data_mut()[e] = x;
            let err = relative_error(analytic[e], numeric, floor);
            report.checked += 1;
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

/// Every differentiable tape operation, as exercised by [`check_all_ops`].
pub const OPS: [&str; 20] = [
    "affine",
    "matmul",
    "matmul_transpose_b",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "neg",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "log_sum_exp",
    "rows",
    "select_rows",
    "element",
    "concat_rows",
];

/// Outcome of one randomized trial of one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub trial: usize,
    pub shapes: Vec<Vec<usize>>,
    pub report: GradCheckReport,
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Values in `±[0.05, 2)`, keeping clear of the relu kink.
fn away_from_zero<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let mut t = uniform_tensor(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Projects `out` to a scalar with fixed random weights so every output
/// element contributes a distinct amount to the loss.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, AutodiffError> {
    if tape.value(out).is_scalar() {
        return Ok(tape.scale(out, weights.data()[0]));
    }
    let w = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), weights.data()[..tape.value(out).len()].to_vec())?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Runs `trials` random instances of every entry of [`OPS`], each input at
/// most 16 elements, and returns one record per trial.
pub fn check_all_ops(trials: usize, seed: u64, h: f64, floor: f64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials * OPS.len());
    for trial in 0..trials {
        for op in OPS {
            let mut dim = |hi: usize| rng.random_range(1..=hi);
            let (r, c, k) = (dim(4), dim(4), dim(4));
            let inputs: Vec<Tensor> = match op {
                "affine" => vec![
                    uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0),
                    uniform_tensor(&mut rng, vec![c, k], -2.0, 2.0),
                    uniform_tensor(&mut rng, vec![k], -2.0, 2.0),
                ],
                "matmul" => vec![
                    uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0),
                    uniform_tensor(&mut rng, vec![c, k], -2.0, 2.0),
                ],
                "matmul_transpose_b" => vec![
                    uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0),
                    uniform_tensor(&mut rng, vec![k, c], -2.0, 2.0),
                ],
                "relu" => vec![away_from_zero(&mut rng, vec![r, c])],
                "log" => vec![uniform_tensor(&mut rng, vec![r, c], 0.2, 3.0)],
                "add" | "sub" | "mul" => vec![
                    uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0),
                    uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0),
                ],
                "concat_rows" => vec![
                    uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0),
                    uniform_tensor(&mut rng, vec![k, c], -2.0, 2.0),
                ],
                _ => vec![uniform_tensor(&mut rng, vec![r, c], -2.0, 2.0)],
            };
            let weights = uniform_tensor(&mut rng, vec![64], -1.5, 1.5);
            let factor = rng.random_range(-3.0..3.0);
            let start = rng.random_range(0..r);
            let len = rng.random_range(1..=r - start);
            let picks: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..r)).collect();
            let index = rng.random_range(0..r * c);

            let report = check_gradients(&inputs, h, floor, |t, v| {
                let y = match op {
                    "affine" => t.affine(v[0], v[1], v[2])?,
                    "matmul" => t.matmul(v[0], v[1])?,
                    "matmul_transpose_b" => t.matmul_transpose_b(v[0], v[1])?,
                    "tanh" => t.tanh(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    "relu" => t.relu(v[0]),
                    "exp" => t.exp(v[0]),
                    "log" => t.log(v[0])?,
                    "neg" => t.neg(v[0]),
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    "mul" => t.mul(v[0], v[1])?,
                    "scale" => t.scale(v[0], factor),
                    "sum" => t.sum(v[0]),
                    "mean" => t.mean(v[0])?,
                    "log_sum_exp" => t.log_sum_exp(v[0])?,
                    "rows" => t.rows(v[0], start, len)?,
                    "select_rows" => t.select_rows(v[0], &picks)?,
                    "element" => t.element(v[0], index)?,
                    "concat_rows" => t.concat_rows(&[v[0], v[1]])?,
                    other => unreachable!("unknown op {other}"),
                };
                project(t, y, &weights)
            })?;
            out.push(OpCheck {
                op,
                trial,
                shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
                report,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_enough() {
        let r = check_gradients(&[Tensor::vector(vec![3.0, -1.0])], 1e-5, 1e-8, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_relative_error < 1e-9);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Detaching one factor of x·x halves the tape gradient, while the
        // numeric derivative still sees x².
        let r = check_gradients(&[Tensor::vector(vec![2.0])], 1e-5, 1e-8, |t, v| {
            let detached = t.constant(t.value(v[0]).clone());
            let p = t.mul(v[0], detached)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!((r.max_relative_error - 0.5).abs() < 1e-6);
        assert_eq!(r.worst, Some((0, 0)));
    }

    #[test]
    fn every_op_is_covered() {
        let checks = check_all_ops(2, 1, 1e-6, 1e-8).unwrap();
        assert_eq!(checks.len(), 2 * OPS.len());
        for op in OPS {
            assert!(checks.iter().any(|c| c.op == op));
        }
        assert!(checks.iter().all(|c| c.shapes.iter().all(|s| s.iter().product::<usize>() <= 16)));
    }
}
