use super::gradcheck::{check_op, grad_check, grad_check_inputs, CheckOptions};
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 3]);
    let g = Graph::new();
    let out = g
        .constant(Tensor::eye(3).unwrap())
        .matmul(g.constant(a.clone()))
        .unwrap();
    assert_eq!(*out.value(), a);
}

#[test]
fn tanh_at_zero() {
    let g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = x.tanh();
    assert_eq!(y.value().item(), Some(0.0));
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::new();
    let y = g.constant(t(&[3], &[1.0, 1.0, 1.0])).softmax();
    for v in y.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn square_sum_gradient() {
    let g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let loss = x.mul(x).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn fan_out_accumulates() {
    let g = Graph::new();
    let a = g.input(t(&[3], &[0.5, -1.0, 2.0]));
    let loss = a.add(a).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let g = Graph::new();
    let a = g.input(t(&[2], &[1.0, 2.0]));
    assert_eq!(
        g.backward(a.tanh()).err(),
        Some(TensorError::NonScalarLoss { shape: vec![2] })
    );
}

#[test]
fn shape_mismatch_names_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[2, 4]).unwrap());
    let err = a.add(b).unwrap_err();
    assert_eq!(
        err.to_string(),
        "add: incompatible shapes [2, 3] and [2, 4]"
    );
    assert!(a.matmul(b).is_err());
    let bias = g.constant(Tensor::zeros(&[2]).unwrap());
    assert!(a.add_bias(bias).is_err());
}

#[test]
fn tensor_constructor_checks_length() {
    assert!(matches!(
        Tensor::new(&[2, 2], vec![1.0; 3]),
        Err(TensorError::DataLength {
            expected: 4,
            actual: 3,
            ..
        })
    ));
    assert!(Tensor::new(&[0, 2], vec![]).is_err());
}

#[test]
fn leaf_grads_match_value_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let x = g.input(random(&mut rng, &[2, 3, 4]));
    let w = g.input(random(&mut rng, &[4, 5]));
    let b = g.input(random(&mut rng, &[5]));
    let loss = x.matmul(w).unwrap().add_bias(b).unwrap().tanh().sum();
    let grads = g.backward(loss).unwrap();
    for v in [x, w, b] {
        assert_eq!(grads.get(v).unwrap().shape(), v.shape().as_slice());
    }
}

fn mlp_loss<'g>(v: &[Var<'g>]) -> Result<Var<'g>> {
    let h = v[0].matmul(v[1])?.add_bias(v[2])?.silu();
    let y = h.matmul(v[3])?.add_bias(v[4])?;
    y.mse(v[5])
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[3, 6]),
            random(&mut rng, &[6]),
            random(&mut rng, &[6, 2]),
            random(&mut rng, &[2]),
            random(&mut rng, &[4, 2]),
        ];
        let report =
            grad_check_inputs(|_, v| mlp_loss(v), &inputs, CheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn square_grad_check_is_tight() {
    let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &Tensor::scalar(3.0), 1e-3).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn layer_norm_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[8]);
    let w = random(&mut rng, &[8]);
    let err = grad_check(
        move |g, x| {
            let gain = g.constant(Tensor::full(&[8], 1.0)?);
            let bias = g.constant(Tensor::zeros(&[8])?);
            let wv = g.constant(w.clone());
            Ok(x.layer_norm(gain, bias, 1e-5)?.mul(wv)?.sum())
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_op_passes_on_100_seeds() {
    for kind in OpKind::DIFFERENTIABLE {
        for seed in 0..100 {
            let r = check_op(kind, seed, CheckOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn corrupted_rule_is_detected_for_every_op() {
    for kind in OpKind::DIFFERENTIABLE {
        let opts = CheckOptions {
            fault: Some(kind),
            ..CheckOptions::default()
        };
        let r = check_op(kind, 3, opts).unwrap();
        assert!(r.max_rel_error > 1e-3, "{kind} fault not detected: {r:?}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let x = g.input(random(&mut rng, &[2, 4, 8]));
        let w = g.input(random(&mut rng, &[8, 8]));
        let q = x
            .matmul(w)
            .unwrap()
            .rotary(&[0.0, 1.0, 2.0, 3.0], 10000.0)
            .unwrap();
        let att = q.matmul_t(x).unwrap().softmax().matmul(x).unwrap();
        let loss = att.mul(att).unwrap().mean(2).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn rotary_position_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 4]);
    let g = Graph::new();
    let y = g.constant(x.clone()).rotary(&[0.0], 10000.0).unwrap();
    assert_eq!(*y.value(), x);
    assert!(g
        .constant(random(&mut rng, &[2, 3]))
        .rotary(&[0.0, 1.0], 10000.0)
        .is_err());
}

#[test]
fn mean_of_vector_is_scalar_shaped() {
    let g = Graph::new();
    let m = g.constant(t(&[4], &[1.0, 2.0, 3.0, 6.0])).mean(0).unwrap();
    assert_eq!(m.shape(), vec![1]);
    assert_eq!(m.value().item(), Some(3.0));
}

#[test]
fn concat_narrow_and_expand_shapes() {
    let g = Graph::new();
    let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let n = c.narrow(1, 1, 2).unwrap();
    assert_eq!(*n.value(), t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let e = a.reshape(&[2]).unwrap().expand(0, 3).unwrap();
    assert_eq!(e.shape(), vec![3, 2]);
    assert_eq!(e.value().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    assert!(g.embedding(b, &[2]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let g = Graph::new();
        let y = g.constant(Tensor::new(&[3, 4], values).unwrap()).softmax();
        for row in y.value().data().chunks(4) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotary_preserves_pair_norms(values in prop::collection::vec(-5.0f64..5.0, 12), pos in 0.0f64..500.0) {
        let g = Graph::new();
        let x = Tensor::new(&[2, 6], values).unwrap();
        let y = g.constant(x.clone()).rotary(&[pos, pos + 1.0], 10000.0).unwrap();
        let y = y.value();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            prop_assert!((na - nb).abs() < 1e-12);
        }
    }
}
