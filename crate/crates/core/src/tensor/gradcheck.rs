//! Central finite-difference verification of analytic gradients.

use super::{Graph, OpKind, Result, Tensor, TensorError, Var};

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Input and flat coordinate where the worst error occurred.
    pub worst_input: usize,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates per input (evenly spread).
    pub max_coords: Option<usize>,
    /// Corrupts one backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords: None,
            fault: None,
        }
    }
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&g, &vars)?;
    let v = out.value();
    v.item().ok_or_else(|| TensorError::NonScalarLoss {
        shape: v.shape().to_vec(),
    })
}

fn probe_indices(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel => (0..m).map(|i| (i * numel) / m + (numel / m) / 2).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares backward against central differences for every input of `f`.
pub fn grad_check_inputs<F>(f: F, points: &[Tensor], options: CheckOptions) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    if let Some(kind) = options.fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var<'_>> = points.iter().map(|p| g.input(p.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
    };
    let mut probe = points.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(t) => t,
            None => {
                zeros = Tensor::zeros(points[input].shape())?;
                &zeros
            }
        };
        for idx in probe_indices(points[input].numel(), options.max_coords) {
            let orig = points[input].data()[idx];
            probe[input].data_mut()[idx] = orig + options.step;
            let plus = eval_scalar(&f, &probe)?;
            probe[input].data_mut()[idx] = orig - options.step;
            let minus = eval_scalar(&f, &probe)?;
            probe[input].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * options.step);
            let err = relative_error(analytic.data()[idx], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheck {
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    worst_input: input,
                    worst_index: idx,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input convenience returning the maximum relative error.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let report = grad_check_inputs(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        CheckOptions {
            step,
            ..CheckOptions::default()
        },
    )?;
    Ok(report.max_rel_error)
}

fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], scale: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
    .expect("positive shape")
}

/// Projects `out` onto a fixed random direction so every output element
/// contributes to the checked scalar.
fn project<'g>(g: &'g Graph, out: Var<'g>, weights: &Tensor) -> Result<Var<'g>> {
    if out.shape() == [1] {
        return Ok(out.scale(weights.data()[0]));
    }
    let w = g.constant(weights.clone().reshaped(&out.shape())?);
    Ok(out.mul(w)?.sum())
}

/// Finite-difference check of a single operation on a seeded random instance.
pub fn check_op(kind: OpKind, seed: u64, options: CheckOptions) -> Result<GradCheck> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let variant = rng.gen_range(0..4usize);
    let r = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape, 1.0);

    type Builder = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;
    let (inputs, op, out_numel): (Vec<Tensor>, Builder, usize) = match kind {
        OpKind::MatMul => {
            let (a, b, trans, numel) = match variant {
                0 => (r(&mut rng, &[2, 3, 4]), r(&mut rng, &[2, 4, 5]), false, 30),
                1 => (r(&mut rng, &[2, 3, 4]), r(&mut rng, &[2, 5, 4]), true, 30),
                2 => (r(&mut rng, &[3, 4]), r(&mut rng, &[4, 2]), false, 6),
                _ => (r(&mut rng, &[2, 3, 4]), r(&mut rng, &[2, 4]), true, 12),
            };
            let f: Builder = if trans {
                Box::new(|_, v| v[0].matmul_t(v[1]))
            } else {
                Box::new(|_, v| v[0].matmul(v[1]))
            };
            (vec![a, b], f, numel)
        }
        OpKind::Add => (
            vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])],
            Box::new(|_, v| v[0].add(v[1])),
            12,
        ),
        OpKind::Sub => (
            vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])],
            Box::new(|_, v| v[0].sub(v[1])),
            12,
        ),
        OpKind::Mul => (
            vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])],
            Box::new(|_, v| v[0].mul(v[1])),
            12,
        ),
        OpKind::AddBias => (
            vec![r(&mut rng, &[2, 3, 4]), r(&mut rng, &[4])],
            Box::new(|_, v| v[0].add_bias(v[1])),
            24,
        ),
        OpKind::Scale => {
            let factor: f64 = rng.gen_range(-2.0..2.0);
            (
                vec![r(&mut rng, &[3, 4])],
                Box::new(move |_, v| Ok(v[0].scale(factor))),
                12,
            )
        }
        OpKind::AddScalar => {
            let value: f64 = rng.gen_range(-2.0..2.0);
            (
                vec![r(&mut rng, &[3, 4])],
                Box::new(move |_, v| Ok(v[0].add_scalar(value))),
                12,
            )
        }
        OpKind::ScaleBy => (
            vec![r(&mut rng, &[3, 4]), r(&mut rng, &[1])],
            Box::new(|_, v| v[0].scale_by(v[1])),
            12,
        ),
        OpKind::Tanh => (
            vec![random_tensor(&mut rng, &[3, 4], 1.5)],
            Box::new(|_, v| Ok(v[0].tanh())),
            12,
        ),
        OpKind::Silu => (
            vec![random_tensor(&mut rng, &[3, 4], 1.5)],
            Box::new(|_, v| Ok(v[0].silu())),
            12,
        ),
        OpKind::Softmax => (
            vec![r(&mut rng, &[3, 5])],
            Box::new(|_, v| Ok(v[0].softmax())),
            15,
        ),
        OpKind::LayerNorm => {
            let gain = Tensor::from_fn(&[8], |_| 1.0 + 0.3 * rng.gen_range(-1.0..1.0))?;
            (
                vec![r(&mut rng, &[3, 8]), gain, r(&mut rng, &[8])],
                Box::new(|_, v| v[0].layer_norm(v[1], v[2], 1e-5)),
                24,
            )
        }
        OpKind::Mean => {
            let axis = variant % 3;
            let numel = [12, 8, 6][axis];
            (
                vec![r(&mut rng, &[2, 3, 4])],
                Box::new(move |_, v| v[0].mean(axis)),
                numel,
            )
        }
        OpKind::Sum => (
            vec![r(&mut rng, &[3, 4])],
            Box::new(|_, v| Ok(v[0].sum())),
            1,
        ),
        OpKind::Reshape => (
            vec![r(&mut rng, &[2, 6])],
            Box::new(|_, v| v[0].reshape(&[3, 4])),
            12,
        ),
        OpKind::Permute => (
            vec![r(&mut rng, &[2, 3, 4])],
            Box::new(|_, v| v[0].permute(&[2, 0, 1])),
            24,
        ),
        OpKind::Concat => (
            vec![r(&mut rng, &[2, 3]), r(&mut rng, &[2, 2])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            10,
        ),
        OpKind::Narrow => (
            vec![r(&mut rng, &[4, 5])],
            Box::new(|_, v| v[0].narrow(1, 1, 3)),
            12,
        ),
        OpKind::Expand => (
            vec![r(&mut rng, &[2, 3])],
            Box::new(|_, v| v[0].expand(1, 4)),
            24,
        ),
        OpKind::Embedding => (
            vec![r(&mut rng, &[6, 4])],
            Box::new(|g, v| g.embedding(v[0], &[1, 3, 3, 5])),
            16,
        ),
        OpKind::Mse => (
            vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])],
            Box::new(|_, v| v[0].mse(v[1])),
            1,
        ),
        OpKind::Rotary => {
            let positions: Vec<f64> = (0..5).map(|p| p as f64 * 3.0).collect();
            (
                vec![r(&mut rng, &[2, 5, 6])],
                Box::new(move |_, v| v[0].rotary(&positions, 10000.0)),
                60,
            )
        }
        OpKind::Leaf => {
            return Err(TensorError::InvalidShape {
                op: "gradcheck",
                shape: vec![],
                reason: "leaf has no backward rule".into(),
            })
        }
    };
    let weights = r(&mut rng, &[out_numel]);
    grad_check_inputs(
        move |g, vars| {
            let out = op(g, vars)?;
            project(g, out, &weights)
        },
        &inputs,
        options,
    )
}
