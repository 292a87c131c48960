use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>) -> f64 {
    grad_check(inputs, 1e-5, f).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::eval();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    let y = t.softmax(x);
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn gelu_fixes_zero() {
    let mut t = Tape::eval();
    let x = t.constant(Tensor::zeros(&[1, 1]));
    let y = t.gelu(x);
    assert_eq!(t.value(y).item(), 0.0);
}

#[test]
fn matmul_matches_direct_summation() {
    // oracle: c[i][j] = sum_p a[i][p] * b[p][j], written out independently
    let a = [[1.0; 3]; 2];
    let b = [[1.0; 2]; 3];
    let mut expected = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for p in 0..3 {
                expected[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    assert_eq!(expected, [[3.0; 2]; 2]);

    let mut t = Tape::eval();
    let av = t.constant(Tensor::full(&[2, 3], 1.0));
    let bv = t.constant(Tensor::full(&[3, 2], 1.0));
    let c = t.matmul(av, bv).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 3.0, 3.0, 3.0]);
}

#[test]
fn matmul_shape_error_names_primitive() {
    let mut t = Tape::eval();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 2]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut t = Tape::eval();
    let mut eye = Tensor::zeros(&[1, 3, 3]);
    for c in 0..3 {
        eye.data_mut()[c * 3 + c] = 1.0;
    }
    let input = Tensor::from_fn(&[5, 3], |i| i as f64 * 0.5 - 1.0);
    let x = t.constant(input.clone());
    let k = t.constant(eye);
    let y = t.causal_conv1d(x, k, 5).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_two_tap_sum_with_zero_left_pad() {
    // oracle: y[t] = sum_s w[s] * x[t - (k-1) + s], out-of-range taps are zero
    let x = [1.0, 2.0, 3.0];
    let w = [1.0, 1.0];
    let oracle: Vec<f64> = (0..3)
        .map(|t| {
            (0..2)
                .filter_map(|s| {
                    let src = t as isize - 1 + s as isize;
                    (src >= 0).then(|| w[s] * x[src as usize])
                })
                .sum()
        })
        .collect();
    assert_eq!(oracle, vec![1.0, 3.0, 5.0]);

    let mut t = Tape::eval();
    let xv = t.constant(Tensor::new(vec![3, 1], x.to_vec()).unwrap());
    let kv = t.constant(Tensor::new(vec![2, 1, 1], w.to_vec()).unwrap());
    let y = t.causal_conv1d(xv, kv, 3).unwrap();
    assert_eq!(t.value(y).data(), oracle.as_slice());
}

#[test]
fn conv_kernel_longer_than_sequence_is_allowed() {
    let mut t = Tape::eval();
    let x = t.constant(Tensor::full(&[2, 1], 1.0));
    let k = t.constant(Tensor::full(&[5, 1, 1], 1.0));
    let y = t.causal_conv1d(x, k, 2).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn conv_rejects_empty_kernel() {
    let mut t = Tape::eval();
    let x = t.constant(Tensor::full(&[2, 1], 1.0));
    let k = t.constant(Tensor::zeros(&[0, 1, 1]));
    assert!(t.causal_conv1d(x, k, 2).is_err());
}

#[test]
fn conv_perturbation_leaves_earlier_outputs_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = rand_tensor(&mut rng, &[8, 4]);
    let kernel = rand_tensor(&mut rng, &[3, 4, 2]);
    let run = |x: &Tensor| {
        let mut t = Tape::eval();
        let xv = t.constant(x.clone());
        let kv = t.constant(kernel.clone());
        let y = t.causal_conv1d(xv, kv, 8).unwrap();
        t.value(y).clone()
    };
    let base = run(&input);
    let mut bumped = input.clone();
    for c in 0..4 {
        bumped.data_mut()[5 * 4 + c] += 10.0;
    }
    let out = run(&bumped);
    assert_eq!(&base.data()[..5 * 2], &out.data()[..5 * 2]);
    assert_ne!(&base.data()[5 * 2..6 * 2], &out.data()[5 * 2..6 * 2]);
}

#[test]
fn conv_groups_do_not_leak() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = rand_tensor(&mut rng, &[6, 2]);
    let kernel = rand_tensor(&mut rng, &[3, 2, 2]);
    let run = |x: &Tensor| {
        let mut t = Tape::eval();
        let xv = t.constant(x.clone());
        let kv = t.constant(kernel.clone());
        let y = t.causal_conv1d(xv, kv, 3).unwrap();
        t.value(y).clone()
    };
    let base = run(&input);
    let mut bumped = input.clone();
    bumped.data_mut()[2 * 2] += 5.0; // last step of the first sequence
    let out = run(&bumped);
    assert_eq!(&base.data()[6..], &out.data()[6..]);
}

#[test]
fn second_backward_accumulates_until_zero_grad() {
    let mut t = Tape::eval();
    let x = t.variable(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
    let y = t.scale(x, 3.0);
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 3.0]);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0, 6.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn constants_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = rand_tensor(&mut rng, &[3, 2]);
    let mut t = Tape::eval();
    let x = t.constant(rand_tensor(&mut rng, &[4, 3]));
    let wv = t.variable(w);
    let y = t.matmul(x, wv).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert!(t.grad(x).is_none());
    assert!(t.grad(wv).is_some());
}

#[test]
fn gradcheck_rejects_bad_epsilon_and_inputs() {
    let x = Tensor::full(&[1, 1], 1.0);
    assert!(grad_check(&[x.clone()], 1e-2, |t, v| Ok(t.sum(v[0]))).is_err());
    let nan = Tensor::full(&[1, 1], f64::NAN);
    assert!(grad_check(&[nan], 1e-5, |t, v| Ok(t.sum(v[0]))).is_err());
}

#[test]
fn gradcheck_reports_non_finite_operation() {
    let x = Tensor::full(&[1, 1], -1.0);
    let err = grad_check(&[x], 1e-5, |t, v| Ok(t.ln(v[0]))).unwrap_err();
    assert!(err.to_string().contains("ln"), "{err}");
}

#[test]
fn gradcheck_constant_input_has_zero_gradient() {
    // gradient wrt an input the output ignores is identically zero
    let a = Tensor::full(&[2, 2], 0.3);
    let b = Tensor::full(&[2, 2], 0.7);
    let err = grad_check(&[a, b], 1e-5, |t, v| Ok(t.sum(v[0]))).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn grad_linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3, 5]),
        rand_tensor(&mut rng, &[5]),
    ];
    let err = check(&inputs, |t, v| t.linear(v[0], v[1], Some(v[2])));
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn grad_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = rand_tensor(&mut rng, &[3, 4]);
    let onehot = Tensor::from_fn(&[3, 4], |i| if i % 4 == i / 4 { 1.0 } else { 0.0 });
    let err = check(&[logits], |t, v| {
        let ls = t.log_softmax(v[0]);
        let target = t.constant(onehot.clone());
        let picked = t.mul(ls, target)?;
        let s = t.sum(picked);
        Ok(t.scale(s, -1.0))
    });
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn grad_every_primitive() {
    for (name, err) in gradcheck::primitive_suite(10, 0x5eed).unwrap() {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn grad_dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for point in 0..10 {
        let x = rand_tensor(&mut rng, &[4, 4]);
        let err = GradCheck::new(1e-5)
            .train(point)
            .inputs(&[x], |t, v| {
                let d = t.dropout(v[0], 0.3)?;
                t.mul(d, d)
            })
            .unwrap();
        assert!(err < 1e-5, "{err:e}");
    }
}

#[test]
fn dropout_is_identity_in_eval() {
    let mut t = Tape::eval();
    let x = t.constant(Tensor::full(&[2, 2], 1.0));
    let y = t.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
}

#[test]
fn attention_rows_sum_to_one_and_empty_rows_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = Tape::eval();
    let q = t.constant(rand_tensor(&mut rng, &[3, 4]));
    let k = t.constant(rand_tensor(&mut rng, &[4, 4]));
    let v = t.constant(rand_tensor(&mut rng, &[4, 4]));
    let keys = Arc::new(KeySets::from_lists(&[vec![0, 1, 2, 3], vec![], vec![2]]));
    let out = t.attention(q, k, v, 2, keys).unwrap();
    for h in 0..2 {
        let w = t.attention_weights(out, 0, h).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.attention_weights(out, 2, h).unwrap(), &[1.0]);
    }
    assert!(t.value(out).row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::eval();
    let x = t.constant(Tensor::from_fn(&[20, 7], |_| rng.random_range(-30.0..30.0)));
    let y = t.softmax(x);
    for r in 0..20 {
        assert!((t.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_is_bitwise_repeatable() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::train(11);
        let x = t.variable(rand_tensor(&mut rng, &[5, 4]));
        let w = t.variable(rand_tensor(&mut rng, &[4, 4]));
        let h = t.matmul(x, w).unwrap();
        let h = t.gelu(h);
        let h = t.dropout(h, 0.2).unwrap();
        let s = t.softmax(h);
        let loss = t.sum(s);
        let loss2 = t.mul(loss, loss).unwrap();
        t.backward(loss2).unwrap();
        (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
