//! Central finite-difference verification of every tape op, in `f64`.
//!
//! Each draw samples small random shapes and values, reduces the op output to
//! a scalar with a fixed random weighting, and compares the tape gradient of
//! every input element against `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;

type Build = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub draws: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= MAX_REL_ERROR
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "linear",
    "add",
    "add_broadcast",
    "scale",
    "relu",
    "gelu",
    "layer_norm",
    "softmax_lastdim",
    "scaled_dot_attention",
    "reshape",
    "upsample_nearest",
    "cross_entropy",
    "mse",
    "sum",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            Case {
                inputs: vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)],
                build: Box::new(|t, x| t.matmul(x[0], x[1])),
            }
        }
        "linear" => {
            let (b, r, i, o) = (dim(rng), dim(rng), dim(rng), dim(rng));
            Case {
                inputs: vec![
                    rand_tensor(rng, &[b, r, i], -1.0, 1.0),
                    rand_tensor(rng, &[i, o], -1.0, 1.0),
                    rand_tensor(rng, &[o], -1.0, 1.0),
                ],
                build: Box::new(|t, x| t.linear(x[0], x[1], x[2])),
            }
        }
        "add" => {
            let s = [dim(rng), dim(rng)];
            Case {
                inputs: vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
                build: Box::new(|t, x| t.add(x[0], x[1])),
            }
        }
        "add_broadcast" => {
            let (a, b, c) = (dim(rng), dim(rng), dim(rng));
            Case {
                inputs: vec![rand_tensor(rng, &[a, b, c], -1.0, 1.0), rand_tensor(rng, &[b, c], -1.0, 1.0)],
                build: Box::new(|t, x| t.add_broadcast(x[0], x[1])),
            }
        }
        "scale" => {
            let factor = rng.gen_range(-2.0..2.0);
            Case {
                inputs: { let sh = [dim(rng), dim(rng)]; vec![rand_tensor(rng, &sh, -1.0, 1.0)] },
                build: Box::new(move |t, x| Ok(t.scale(x[0], factor))),
            }
        }
        "relu" => Case {
            inputs: { let sh = [dim(rng), dim(rng)]; vec![rand_away_from_zero(rng, &sh)] },
            build: Box::new(|t, x| Ok(t.relu(x[0]))),
        },
        "gelu" => Case {
            inputs: { let sh = [dim(rng), dim(rng)]; vec![rand_tensor(rng, &sh, -3.0, 3.0)] },
            build: Box::new(|t, x| Ok(t.gelu(x[0]))),
        },
        "layer_norm" => {
            let (r, d) = (dim(rng), rng.gen_range(2..=6));
            Case {
                inputs: vec![
                    rand_tensor(rng, &[r, d], -2.0, 2.0),
                    rand_tensor(rng, &[d], 0.5, 1.5),
                    rand_tensor(rng, &[d], -0.5, 0.5),
                ],
                build: Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
            }
        }
        "softmax_lastdim" => Case {
            inputs: { let sh = [dim(rng), dim(rng) + 1]; vec![rand_tensor(rng, &sh, -2.0, 2.0)] },
            build: Box::new(|t, x| Ok(t.softmax_lastdim(x[0]))),
        },
        "scaled_dot_attention" => {
            let heads = rng.gen_range(1..=3);
            let d = heads * rng.gen_range(1..=3);
            let s = [rng.gen_range(1..=2), rng.gen_range(1..=4), d];
            Case {
                inputs: (0..3).map(|_| rand_tensor(rng, &s, -1.0, 1.0)).collect(),
                build: Box::new(move |t, x| t.scaled_dot_attention(x[0], x[1], x[2], heads)),
            }
        }
        "reshape" => {
            let (a, b) = (dim(rng), dim(rng));
            Case {
                inputs: vec![rand_tensor(rng, &[a, b], -1.0, 1.0)],
                build: Box::new(move |t, x| t.reshape(x[0], vec![b, a])),
            }
        }
        "upsample_nearest" => {
            let factor = rng.gen_range(1..=3);
            let s = [rng.gen_range(1..=2), dim(rng), dim(rng), rng.gen_range(1..=3)];
            Case {
                inputs: vec![rand_tensor(rng, &s, -1.0, 1.0)],
                build: Box::new(move |t, x| t.upsample_nearest(x[0], factor)),
            }
        }
        "cross_entropy" => {
            let (r, k) = (dim(rng), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..k)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[r, k], -2.0, 2.0)],
                build: Box::new(move |t, x| t.cross_entropy(x[0], &labels)),
            }
        }
        "mse" => {
            let n = dim(rng) * dim(rng);
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[n], -1.0, 1.0)],
                build: Box::new(move |t, x| t.mse(x[0], &target)),
            }
        }
        "sum" => Case {
            inputs: { let sh = [dim(rng), dim(rng)]; vec![rand_tensor(rng, &sh, -1.0, 1.0)] },
            build: Box::new(|t, x| Ok(t.sum(x[0]))),
        },
        other => panic!("unknown op {other}"),
    }
}

/// Scalar objective: the op output itself if scalar, else `<out, weights>`.
fn objective(
    case: &Case,
    weights: &mut Option<Vec<f64>>,
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    requires_grad: bool,
) -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = (case.build)(&mut tape, &ids)?;
    let n = tape.value(out).len();
    if tape.value(out).shape().is_empty() {
        return Ok((tape, ids, out));
    }
    let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let flat = tape.reshape(out, vec![1, n])?;
    let wn = tape.leaf(Tensor::new(vec![n, 1], w.clone())?, false);
    let prod = tape.matmul(flat, wn)?;
    let loss = tape.sum(prod);
    Ok((tape, ids, loss))
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Runs `draws` random draws of one op and returns the worst relative error.
pub fn check_op(op: &'static str, draws: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let case = make_case(op, &mut rng);
        let mut weights = None;
        let (tape, ids, loss) = objective(&case, &mut weights, &mut rng, &case.inputs, true)?;
        let grads = tape.backward(loss)?;
        for (i, input) in case.inputs.iter().enumerate() {
            let analytic = grads.get(ids[i]).unwrap_or_else(|| Tensor::zeros(input.shape()));
            for j in 0..input.len() {
                let eval = |delta: f64, rng: &mut ChaCha8Rng, weights: &mut Option<Vec<f64>>| {
                    let mut perturbed = case.inputs.clone();
                    perturbed[i].data_mut()[j] += delta;
                    let (t, _, l) = objective(&case, weights, rng, &perturbed, false)?;
                    Ok::<f64, crate::error::Error>(t.value(l).data()[0])
                };
                let plus = eval(FD_STEP, &mut rng, &mut weights)?;
                let minus = eval(-FD_STEP, &mut rng, &mut weights)?;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                worst = worst.max(rel_error(analytic.data()[j], numeric));
            }
        }
    }
    Ok(OpCheck { op, draws, max_rel_error: worst })
}

/// Checks every op with the given number of draws each.
pub fn check_all(draws: usize, seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| check_op(op, draws, seed.wrapping_add(i as u64 * 7919)))
        .collect()
}
