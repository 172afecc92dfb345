//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass to build its numerical
//! estimate, so it stays independent of the backward rules it audits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on `|autodiff − fd| / max(1, |fd|)`.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.entries += other.entries;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares autodiff gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every entry of every input.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = input.data().to_vec();
            plus[j] += h;
            let mut minus = input.data().to_vec();
            minus[j] -= h;
            work[i] = Tensor::from_parts(input.shape().to_vec(), plus);
            let fp = eval(&work)?;
            work[i] = Tensor::from_parts(input.shape().to_vec(), minus);
            let fm = eval(&work)?;
            work[i] = input.clone();
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[i].data()[j];
            let err = (ad - fd).abs() / fd.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// `Σ v ⊙ w` with a constant weight, turning any tensor into a scalar with a
/// non-uniform upstream gradient.
pub fn weighted_readout(g: &Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type OpCase = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

/// Draws a value bounded away from zero so kinks (relu, max) are not straddled
/// by the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let mag = rng.random_range(lo..hi);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| away_from_zero(rng, 0.1, 1.5)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// One named elementwise/structural op together with an input generator.
pub struct OpSpec {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: fn() -> OpCase,
}

fn case(f: impl Fn(&Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    Box::new(f)
}

/// Every registered op, wrapped so its output is reduced by a random
/// weighted readout.
pub fn op_specs() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "matmul",
            inputs: |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[3, 2])],
            build: || case(|g, v| g.matmul(v[0], v[1])),
        },
        OpSpec {
            name: "transpose",
            inputs: |r| vec![rand_tensor(r, &[2, 3])],
            build: || case(|g, v| g.transpose(v[0])),
        },
        OpSpec {
            name: "add",
            inputs: |r| vec![rand_tensor(r, &[2, 2]), rand_tensor(r, &[2, 2])],
            build: || case(|g, v| g.add(v[0], v[1])),
        },
        OpSpec {
            name: "sub",
            inputs: |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])],
            build: || case(|g, v| g.sub(v[0], v[1])),
        },
        OpSpec {
            name: "mul",
            inputs: |r| vec![rand_tensor(r, &[3]), rand_tensor(r, &[3])],
            build: || case(|g, v| g.mul(v[0], v[1])),
        },
        OpSpec {
            name: "broadcast_add",
            inputs: |r| vec![rand_tensor(r, &[2, 2]), rand_tensor(r, &[2])],
            build: || case(|g, v| g.add(v[0], v[1])),
        },
        OpSpec {
            name: "broadcast_mul",
            inputs: |r| vec![rand_tensor(r, &[2, 1]), rand_tensor(r, &[1, 2])],
            build: || case(|g, v| g.mul(v[0], v[1])),
        },
        OpSpec {
            name: "broadcast_to",
            inputs: |r| vec![rand_tensor(r, &[1, 2])],
            build: || case(|g, v| g.broadcast_to(v[0], &[2, 2])),
        },
        OpSpec {
            name: "scale",
            inputs: |r| vec![rand_tensor(r, &[3])],
            build: || case(|g, v| Ok(g.scale(v[0], -1.7))),
        },
        OpSpec {
            name: "maximum",
            inputs: |r| vec![rand_tensor(r, &[3]), rand_tensor(r, &[3])],
            build: || case(|g, v| g.maximum(v[0], v[1])),
        },
        OpSpec {
            name: "relu",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| Ok(g.relu(v[0]))),
        },
        OpSpec {
            name: "tanh",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| Ok(g.tanh(v[0]))),
        },
        OpSpec {
            name: "sigmoid",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| Ok(g.sigmoid(v[0]))),
        },
        OpSpec {
            name: "exp",
            inputs: |r| vec![rand_tensor(r, &[3])],
            build: || case(|g, v| Ok(g.exp(v[0]))),
        },
        OpSpec {
            name: "log",
            inputs: |r| vec![positive_tensor(r, &[3])],
            build: || case(|g, v| g.log(v[0])),
        },
        OpSpec {
            name: "clamped_log",
            inputs: |r| vec![positive_tensor(r, &[3])],
            build: || case(|g, v| Ok(g.clamped_log(v[0], 1e-12))),
        },
        OpSpec {
            name: "sum",
            inputs: |r| vec![rand_tensor(r, &[2, 2])],
            build: || case(|g, v| Ok(g.sum(v[0]))),
        },
        OpSpec {
            name: "mean",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| Ok(g.mean(v[0]))),
        },
        OpSpec {
            name: "softmax_rows",
            inputs: |r| vec![rand_tensor(r, &[2, 2])],
            build: || case(|g, v| g.softmax(v[0], 1)),
        },
        OpSpec {
            name: "softmax_cols",
            inputs: |r| vec![rand_tensor(r, &[2, 2])],
            build: || case(|g, v| g.softmax(v[0], 0)),
        },
        OpSpec {
            name: "layer_norm",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| Ok(g.layer_norm(v[0], 1e-5))),
        },
        OpSpec {
            name: "reshape",
            inputs: |r| vec![rand_tensor(r, &[2, 2])],
            build: || case(|g, v| g.reshape(v[0], &[4])),
        },
        OpSpec {
            name: "concat",
            inputs: |r| vec![rand_tensor(r, &[1, 2]), rand_tensor(r, &[1, 2])],
            build: || case(|g, v| g.concat(&[v[0], v[1]], 1)),
        },
        OpSpec {
            name: "slice",
            inputs: |r| vec![rand_tensor(r, &[2, 2])],
            build: || case(|g, v| g.slice(v[0], 1, 1, 1)),
        },
        OpSpec {
            name: "gather",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| g.gather(v[0], vec![Some(3), None, Some(0), Some(3)], &[4])),
        },
        OpSpec {
            name: "embedding_lookup",
            inputs: |r| vec![rand_tensor(r, &[2, 2])],
            build: || case(|g, v| g.embedding(v[0], &[1, 0, 1])),
        },
        OpSpec {
            name: "masked_fill",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || case(|g, v| g.masked_fill(v[0], &[false, true, false, true], -3.0)),
        },
        OpSpec {
            name: "dropout_eval",
            inputs: |r| vec![rand_tensor(r, &[3])],
            build: || {
                case(|g, v| {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    Ok(g.dropout(v[0], 0.5, false, &mut rng))
                })
            },
        },
        OpSpec {
            name: "dropout_train",
            inputs: |r| vec![rand_tensor(r, &[4])],
            build: || {
                case(|g, v| {
                    // fixed seed so every evaluation draws the same mask
                    let mut rng = ChaCha8Rng::seed_from_u64(11);
                    Ok(g.dropout(v[0], 0.5, true, &mut rng))
                })
            },
        },
    ]
}

/// Runs `instances` random checks of every op; returns per-op aggregate reports.
pub fn run_op_suite(seed: u64, instances: usize) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spec in op_specs() {
        let mut agg = GradCheckReport::default();
        for _ in 0..instances {
            let inputs = (spec.inputs)(&mut rng);
            let op = (spec.build)();
            // shape of the op output decides the readout weights
            let probe = Graph::new();
            let pv: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let out_shape = probe.shape(op(&probe, &pv)?);
            let weights = rand_tensor(&mut rng, &out_shape);
            let report = check(
                &inputs,
                |g, v| {
                    let y = op(g, v)?;
                    weighted_readout(g, y, &weights)
                },
                STEP,
            )?;
            agg.merge(&report);
        }
        out.push((spec.name, agg));
    }
    Ok(out)
}
