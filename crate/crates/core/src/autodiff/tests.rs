use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const SEEDS: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

/// Weighted sum so every output component influences the check.
fn project<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> crate::Result<Var<'g>> {
    let w = g.constant(rand_t(&y.shape(), &mut rng(seed ^ 0xabcd)));
    Ok(y.mul(&w)?.sum())
}

#[test]
fn matmul_examples() {
    let g = Graph::new();
    let id = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let v = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    assert_eq!(id.matmul(&v).unwrap().value().data(), &[3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    assert_eq!(a.matmul(&v).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_mismatch_reports_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_t(&[3, 4], &mut r);
        let b = rand_t(&[4, 2], &mut r);
        let bc = b.clone();
        let err_a = grad_check(
            move |g, x| project(g, x.matmul(&g.constant(bc.clone()))?, seed),
            &a,
            DEFAULT_EPS,
        )
        .unwrap();
        let ac = a.clone();
        let err_b = grad_check(
            move |g, x| project(g, g.constant(ac.clone()).matmul(&x)?, seed),
            &b,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err_a <= 1e-6 && err_b <= 1e-6, "seed {seed}: {err_a} {err_b}");
    }
}

#[test]
fn conv1d_examples() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
    let y = x.conv1d(&k, 1, 1).unwrap();
    assert_eq!(y.shape(), vec![4, 1]);
    assert_eq!(y.value().data(), &[-2.0, -2.0, -2.0, 3.0]);

    let mut r = rng(3);
    let x = g.constant(rand_t(&[9, 1], &mut r));
    let ident = g.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let y = x.conv1d(&ident, 1, 1).unwrap();
    assert_eq!(y.value().data(), x.value().data());
}

#[test]
fn conv1d_output_length_law() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[10, 2]));
    let k = g.constant(Tensor::zeros(&[3, 2, 5]));
    assert_eq!(x.conv1d(&k, 0, 1).unwrap().shape(), vec![6, 3]);
    assert_eq!(x.conv1d(&k, 2, 1).unwrap().shape(), vec![10, 3]);
    assert_eq!(x.conv1d(&k, 4, 2).unwrap().shape(), vec![10, 3]);
}

#[test]
fn conv1d_rejects_channel_mismatch() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[8, 2]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3]));
    assert!(x.conv1d(&k, 1, 1).is_err());
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_t(&[8, 2], &mut r);
        let k = rand_t(&[3, 2, 3], &mut r);
        let dilation = 1 + (seed as usize % 2);
        let kc = k.clone();
        let err_x = grad_check(
            move |g, x| project(g, x.conv1d(&g.constant(kc.clone()), dilation, dilation)?, seed),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        let xc = x.clone();
        let err_k = grad_check(
            move |g, k| project(g, g.constant(xc.clone()).conv1d(&k, dilation, dilation)?, seed),
            &k,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err_x <= 1e-6 && err_k <= 1e-6, "seed {seed}: {err_x} {err_k}");
    }
}

fn lstm_weights<'g>(g: &'g Graph, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> LstmWeights<'g> {
    LstmWeights {
        w_ih: g.constant(w_ih),
        w_hh: g.constant(w_hh),
        bias: g.constant(b),
    }
}

#[test]
fn lstm_zero_everything_gives_zero_state() {
    let g = Graph::new();
    let w = lstm_weights(&g, Tensor::zeros(&[3, 8]), Tensor::zeros(&[2, 8]), Tensor::zeros(&[8]));
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let h = g.constant(Tensor::zeros(&[1, 2]));
    let (h1, c1) = lstm_cell(&x, &h, &h, &w).unwrap();
    assert!(h1.value().data().iter().all(|v| *v == 0.0));
    assert!(c1.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    let hidden = 4;
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(20.0);
    let g = Graph::new();
    let w = lstm_weights(
        &g,
        Tensor::zeros(&[3, 4 * hidden]),
        Tensor::zeros(&[hidden, 4 * hidden]),
        Tensor::vector(bias),
    );
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let h = g.constant(Tensor::zeros(&[1, hidden]));
    let c_prev = Tensor::new(vec![1, hidden], vec![0.9, -0.5, 0.25, -1.0]).unwrap();
    let c = g.constant(c_prev.clone());
    let (_, c1) = lstm_cell(&x, &h, &c, &w).unwrap();
    assert!(c1.value().max_abs_diff(&c_prev) < 1e-8);
}

#[test]
fn lstm_rejects_dimension_mismatch() {
    let g = Graph::new();
    let w = lstm_weights(&g, Tensor::zeros(&[3, 8]), Tensor::zeros(&[2, 8]), Tensor::zeros(&[8]));
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let h = g.constant(Tensor::zeros(&[1, 2]));
    assert!(lstm_cell(&x, &h, &h, &w).is_err());
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let h3 = g.constant(Tensor::zeros(&[1, 3]));
    assert!(lstm_cell(&x, &h3, &h3, &w).is_err());
}

#[test]
fn lstm_gradients_over_all_weights() {
    let (input, hidden) = (3, 4);
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let w_ih = rand_t(&[input, 4 * hidden], &mut r);
        let w_hh = rand_t(&[hidden, 4 * hidden], &mut r);
        let b = rand_t(&[4 * hidden], &mut r);
        let xs = rand_t(&[3, input], &mut r);
        // Pack every weight into one flat parameter and unroll three steps.
        let flat: Vec<f64> = [w_ih.data(), w_hh.data(), b.data()].concat();
        let n = flat.len();
        let f = objective(move |g, p| {
            let p = p.reshape(&[1, n])?;
            let a = input * 4 * hidden;
            let bb = hidden * 4 * hidden;
            let w = LstmWeights {
                w_ih: p.slice(1, 0, a)?.reshape(&[input, 4 * hidden])?,
                w_hh: p.slice(1, a, bb)?.reshape(&[hidden, 4 * hidden])?,
                bias: p.slice(1, a + bb, 4 * hidden)?,
            };
            let mut h = g.constant(Tensor::zeros(&[1, hidden]));
            let mut c = h;
            let x = g.constant(xs.clone());
            let mut outs = Vec::new();
            for t in 0..3 {
                let (h1, c1) = lstm_cell(&x.slice(0, t, 1)?, &h, &c, &w)?;
                h = h1;
                c = c1;
                outs.push(h);
            }
            project(g, g.concat(&outs, 0)?, seed)
        });
        let err = grad_check(f, &Tensor::vector(flat), DEFAULT_EPS).unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
    assert!(x.softmax(0).is_err());
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_t(&[3, 5], &mut r);
        let axis = (seed % 2) as usize;
        let err = grad_check(move |g, x| project(g, x.softmax(axis)?, seed), &x, DEFAULT_EPS).unwrap();
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn batchnorm_identity_on_standardized_input() {
    // Columns with exact zero mean and unit (population) variance.
    let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = xv.batchnorm1d(&gamma, &beta, BatchNormMode::Train, None).unwrap();
    assert!(y.value().max_abs_diff(&x) < 1e-3);
    let stats = stats.unwrap();
    assert!(stats.mean.iter().all(|m| m.abs() < 1e-12));
    assert!(stats.var.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn batchnorm_constant_column_gives_beta() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[5, 2], 3.5));
    let gamma = g.constant(Tensor::full(&[2], 2.0));
    let beta = g.constant(Tensor::vector(vec![0.25, -0.75]));
    let (y, _) = x.batchnorm1d(&gamma, &beta, BatchNormMode::Train, None).unwrap();
    for row in y.value().data().chunks(2) {
        assert!((row[0] - 0.25).abs() < 1e-9 && (row[1] + 0.75).abs() < 1e-9);
    }
}

#[test]
fn batchnorm_eval_requires_statistics() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 2]));
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(x.batchnorm1d(&gamma, &beta, BatchNormMode::Eval(None), None).is_err());
    let (m, v) = ([1.0, 1.0], [4.0, 4.0]);
    let (y, stats) = x
        .batchnorm1d(&gamma, &beta, BatchNormMode::Eval(Some((&m, &v))), None)
        .unwrap();
    assert!(stats.is_none());
    let expect = -1.0 / (4.0 + BATCHNORM_EPS).sqrt();
    assert!(y.value().data().iter().all(|y| (y - expect).abs() < 1e-12));
}

#[test]
fn batchnorm_masked_rows_are_ignored() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0], vec![100.0]]).unwrap());
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let valid = [true, true, false];
    let (y, stats) = x
        .batchnorm1d(&gamma, &beta, BatchNormMode::Train, Some(&valid))
        .unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var, vec![1.0]);
    assert_eq!(y.value().data()[2], 0.0);
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_t(&[6, 3], &mut r);
        let gamma = rand_t(&[3], &mut r);
        let beta = rand_t(&[3], &mut r);
        let masked = seed % 2 == 1;
        let (gc, bc) = (gamma.clone(), beta.clone());
        let err_x = grad_check(
            move |g, x| {
                let valid = [true, true, true, true, !masked, !masked];
                let (y, _) = x.batchnorm1d(
                    &g.constant(gc.clone()),
                    &g.constant(bc.clone()),
                    BatchNormMode::Train,
                    Some(&valid),
                )?;
                project(g, y, seed)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        let (xc, bc) = (x.clone(), beta.clone());
        let err_g = grad_check(
            move |g, gm| {
                let (y, _) = g.constant(xc.clone()).batchnorm1d(
                    &gm,
                    &g.constant(bc.clone()),
                    BatchNormMode::Train,
                    None,
                )?;
                project(g, y, seed)
            },
            &gamma,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err_x <= 1e-5 && err_g <= 1e-5, "seed {seed}: {err_x} {err_g}");
    }
}

#[test]
fn grad_check_of_quadratic_is_exact() {
    let err = grad_check(|_, x| Ok(x.mul(&x)?.sum()), &Tensor::vector(vec![3.0]), DEFAULT_EPS).unwrap();
    assert!(err < 1e-9, "{err}");
    let analytic = analytic_gradient(&|_: &Graph, x: Var<'_>| Ok(x.mul(&x)?.sum()), &Tensor::vector(vec![3.0])).unwrap();
    assert_eq!(analytic, vec![6.0]);
}

#[test]
fn grad_check_flags_sign_flipped_backward() {
    let faulty_square = objective(|g, x| {
        let v = x.value();
        let y = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())?;
        let sq = g.custom(&[x], y, |inputs, _, grad| {
            // Deliberately wrong: −2x instead of 2x.
            vec![Some(inputs[0].data().iter().zip(grad).map(|(x, g)| -2.0 * x * g).collect())]
        });
        Ok(sq.sum())
    });
    let err = grad_check(faulty_square, &Tensor::vector(vec![0.7, -1.3, 2.0]), DEFAULT_EPS).unwrap();
    assert!((err - 2.0).abs() < 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_non_scalar_function() {
    let res = grad_check(|_, x| Ok(x.tanh()), &Tensor::vector(vec![1.0, 2.0]), DEFAULT_EPS);
    assert!(res.is_err());
}

#[test]
fn grad_check_on_conv_lstm_mse_composite() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let x = rand_t(&[5, 2], &mut r);
        let kernel = rand_t(&[3, 2, 3], &mut r);
        let w_ih = rand_t(&[3, 8], &mut r);
        let w_hh = rand_t(&[2, 8], &mut r);
        let b = rand_t(&[8], &mut r);
        let target = rand_t(&[5, 2], &mut r);
        let f = objective(move |g, x| {
            let conv = x.conv1d(&g.constant(kernel.clone()), 1, 1)?.relu();
            let w = lstm_weights(g, w_ih.clone(), w_hh.clone(), b.clone());
            let mut h = g.constant(Tensor::zeros(&[1, 2]));
            let mut c = h;
            let mut outs = Vec::new();
            for t in 0..5 {
                let (h1, c1) = lstm_cell(&conv.slice(0, t, 1)?, &h, &c, &w)?;
                outs.push(h1);
                h = h1;
                c = c1;
            }
            g.concat(&outs, 0)?.mse(&g.constant(target.clone()), None)
        });
        let err = grad_check(f, &x, DEFAULT_EPS).unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_primitives_pass_grad_check() {
    type Build = fn(Var<'_>) -> crate::Result<Var<'_>>;
    let ops: Vec<(&str, Build)> = vec![
        ("tanh", |x| Ok(x.tanh())),
        ("sigmoid", |x| Ok(x.sigmoid())),
        ("relu", |x| Ok(x.relu())),
        ("exp", |x| Ok(x.exp())),
        ("scale", |x| Ok(x.scale(-1.5))),
        ("transpose", |x| Ok(x.transpose())),
        ("cumsum0", |x| x.cumsum(0)),
        ("cumsum1", |x| x.cumsum(1)),
        ("slice", |x| x.slice(1, 1, 2)),
        ("gather", |x| x.gather_rows(&[2, 0, 2, 1])),
        ("add_self", |x| x.add(&x)),
        ("sub_tanh", |x| x.sub(&x.tanh())),
        ("mul_self", |x| x.mul(&x)),
        ("concat", |x| {
            let g = x.graph();
            g.concat(&[x, x.tanh()], 1)
        }),
        ("add_row", |x| {
            let row = x.slice(0, 0, 1)?;
            x.add_row(&row)
        }),
    ];
    for (name, op) in ops {
        for seed in 0..SEEDS {
            let mut r = rng(seed);
            // Keep relu inputs away from the kink.
            let x = Tensor::new(
                vec![3, 4],
                rand_t(&[12], &mut r)
                    .data()
                    .iter()
                    .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
                    .collect(),
            )
            .unwrap();
            let err = grad_check(move |g, x| project(g, op(x)?, seed), &x, DEFAULT_EPS).unwrap();
            assert!(err <= 1e-5, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn losses_pass_grad_check() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_t(&[4, 3], &mut r);
        let target = rand_t(&[4, 3], &mut r);
        let weights = Rc::new(vec![1.0, 1.0, 0.0, 1.0]);
        let t = target.clone();
        let err = grad_check(
            move |g, x| x.mse(&g.constant(t.clone()), Some(Rc::clone(&weights))),
            &a,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-6, "mse seed {seed}: {err}");

        let logits = rand_t(&[6], &mut r);
        let err = grad_check(
            |_, x| x.bce_with_logits(&[0.0, 0.0, 1.0, 0.0, 1.0, 0.0], Some(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.0]), 5.0),
            &logits,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-6, "bce seed {seed}: {err}");

        let m = rand_t(&[4, 4], &mut r);
        let err = grad_check(|_, x| x.log_abs_det(), &m, DEFAULT_EPS).unwrap();
        assert!(err <= 1e-5, "logdet seed {seed}: {err}");
    }
}

#[test]
fn bce_is_stable_for_large_logits() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![20.0, -20.0, -20.0]));
    let loss = x.bce_with_logits(&[1.0, 0.0, 0.0], None, 5.0).unwrap().item();
    assert!(loss > 0.0 && loss < 1e-8 + 2e-9, "{loss}");
    let x = g.constant(Tensor::vector(vec![1e4, -1e4]));
    let loss = x.bce_with_logits(&[0.0, 1.0], None, 1.0).unwrap().item();
    assert!((loss - 1e4).abs() < 1e-6);
}

#[test]
fn log_abs_det_of_scaled_identity() {
    let g = Graph::new();
    let mut data = vec![0.0; 64];
    for i in 0..8 {
        data[i * 9] = 2.0;
    }
    let w = g.constant(Tensor::new(vec![8, 8], data).unwrap());
    assert!((w.log_abs_det().unwrap().item() - 8.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn gradients_accumulate_over_multiple_consumers() {
    // y = f(x) + g(x) with x feeding two branches.
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_t(&[2, 3], &mut r);
        let err = grad_check(
            move |g, x| {
                let f = x.tanh().mul(&x)?;
                let h = x.sigmoid().scale(3.0);
                project(g, f.add(&h)?, seed)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn dropout_is_seeded_and_mode_gated() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[4, 8], 1.0));
    let a = x.dropout(0.5, true, &mut rng(9)).value();
    let b = x.dropout(0.5, true, &mut rng(9)).value();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    let off = x.dropout(0.5, false, &mut rng(9));
    assert_eq!(off.id(), x.id());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x.tanh()).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let g = Graph::new();
        let n = values.len();
        let y = g.constant(Tensor::vector(values)).softmax(0).unwrap().value();
        prop_assert!((y.sum() - 1.0).abs() <= 1e-6);
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        prop_assert_eq!(y.numel(), n);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let g = Graph::new();
            let mut r = rng(seed);
            let x = g.constant(rand_t(&[4, 3], &mut r));
            let k = g.constant(rand_t(&[2, 3, 3], &mut r));
            x.conv1d(&k, 1, 1).unwrap().dropout(0.3, true, &mut r).softmax(1).unwrap().value()
        };
        prop_assert_eq!(run(), run());
    }
}
