mod common;

use common::{mat_mul, softmax, to_mat};
use proptest::prelude::*;
use sloth_core::tensor::{finite_diff_grad, matmul, max_relative_error, softmax_rows, FD_STEP};
use sloth_core::{Tape, Tensor, Var};

const GRAD_TOL: f64 = 1e-4;

/// Largest relative error between tape gradients and central differences of
/// `Σ build(inputs) ⊙ R` for a fixed random `R`.
fn grad_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weigh = |tape: &mut Tape, out: Var| {
        let shape = tape.shape(out).to_vec();
        let r = tape.constant(Tensor::randn(&shape, 1.0, 99));
        let prod = tape.mul(out, r).unwrap();
        tape.sum(prod)
    };
    let loss_of = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let l = weigh(&mut tape, out);
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let l = weigh(&mut tape, out);
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut xs = inputs.to_vec();
                xs[i] = t.clone();
                loss_of(&xs)
            },
            x,
            FD_STEP,
        );
        let g = grads.get_or_zero(vars[i]);
        worst = worst.max(max_relative_error(g.data(), fd.data()));
    }
    worst
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transpose_gradients((m, k, n, seed) in dims()) {
        let a = Tensor::randn(&[m, k], 1.0, seed);
        let b = Tensor::randn(&[k, n], 1.0, seed ^ 1);
        let e = grad_error(&[a, b], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.transpose(p).unwrap()
        });
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn broadcast_add_mul_scale_gradients((m, n, _, seed) in dims()) {
        let a = Tensor::randn(&[m, n], 1.0, seed);
        let b = Tensor::randn(&[n], 1.0, seed ^ 1);
        let c = Tensor::randn(&[m, n], 1.0, seed ^ 2);
        let e = grad_error(&[a, b, c], |t, v| {
            let x = t.add(v[0], v[1]).unwrap();
            let y = t.mul(x, v[1]).unwrap();
            let z = t.mul(y, v[2]).unwrap();
            t.scale(z, -1.5)
        });
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn pointwise_nonlinearity_gradients((m, n, _, seed) in dims()) {
        let a = Tensor::randn(&[m, n], 2.0, seed);
        let e = grad_error(&[a], |t, v| {
            let g = t.gelu(v[0]);
            let s = t.sigmoid(v[0]);
            t.add(g, s).unwrap()
        });
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn softmax_gradients((m, n, _, seed) in dims()) {
        let a = Tensor::randn(&[m, n], 2.0, seed);
        let e = grad_error(&[a], |t, v| t.softmax_rows(v[0]).unwrap());
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn layer_norm_gradients((m, n, _, seed) in dims()) {
        let n = n + 1;
        let x = Tensor::randn(&[m, n], 1.0, seed);
        let g = Tensor::randn(&[n], 1.0, seed ^ 1);
        let b = Tensor::randn(&[n], 1.0, seed ^ 2);
        let e = grad_error(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn rope_gradients(rows in 1usize..4, heads in 1usize..3, half in 1usize..3, offset in 0usize..5, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, heads * half * 2], 1.0, seed);
        let e = grad_error(&[x], |t, v| t.rope(v[0], heads, offset).unwrap());
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn attention_gradients(n_q in 1usize..4, extra in 0usize..3, heads in 1usize..3, hd in 1usize..3, seed in any::<u64>()) {
        let n_k = n_q + extra;
        let dim = heads * hd;
        let q = Tensor::randn(&[n_q, dim], 1.0, seed);
        let k = Tensor::randn(&[n_k, dim], 1.0, seed ^ 1);
        let v = Tensor::randn(&[n_k, dim], 1.0, seed ^ 2);
        let e = grad_error(&[q, k, v], |t, x| t.causal_attention(x[0], x[1], x[2], heads, extra).unwrap());
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn row_plumbing_gradients((m, n, _, seed) in dims()) {
        let a = Tensor::randn(&[m, n], 1.0, seed);
        let b = Tensor::randn(&[2, n], 1.0, seed ^ 1);
        let index = vec![Some(m - 1), None, Some(0), Some(m - 1)];
        let e = grad_error(&[a, b], |t, v| {
            let g = t.gather_rows(v[0], index.clone()).unwrap();
            let c = t.concat_rows(&[g, v[1]]).unwrap();
            let s = t.slice_rows(c, 1, 5).unwrap();
            t.reshape(s, &[2, 2 * n]).unwrap()
        });
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn segment_weighted_sum_gradients((r, g, d, seed) in dims()) {
        let w = Tensor::randn(&[r, g], 1.0, seed);
        let x = Tensor::randn(&[r * g, d], 1.0, seed ^ 1);
        let e = grad_error(&[w, x], |t, v| t.segment_weighted_sum(v[0], v[1]).unwrap());
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn cross_entropy_gradients((m, n, _, seed) in dims()) {
        let n = n + 1;
        let logits = Tensor::randn(&[m, n], 2.0, seed);
        let targets: Vec<(usize, usize)> = (0..m).map(|r| (r, (r * 7 + seed as usize) % n)).collect();
        let e = grad_error(&[logits], |t, v| t.cross_entropy(v[0], targets.clone()).unwrap());
        prop_assert!(e <= GRAD_TOL, "{e}");
    }

    #[test]
    fn softmax_rows_are_normalized(m in 1usize..6, n in 1usize..9, scale in 0.1f64..500.0, seed in any::<u64>()) {
        let x = Tensor::randn(&[m, n], scale, seed);
        let y = softmax_rows(&x).unwrap();
        for r in 0..m {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
            let naive = softmax(x.row(r));
            for (a, b) in y.row(r).iter().zip(&naive) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_matches_naive_loops((m, k, n, seed) in dims()) {
        let a = Tensor::randn(&[m, k], 3.0, seed);
        let b = Tensor::randn(&[k, n], 3.0, seed ^ 5);
        let fast = to_mat(&matmul(&a, &b).unwrap());
        let slow = mat_mul(&to_mat(&a), &to_mat(&b));
        for (x, y) in fast.iter().flatten().zip(slow.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn detached_branches_receive_no_gradient() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::randn(&[2, 2], 1.0, 1));
    let c = tape.constant(Tensor::randn(&[2, 2], 1.0, 2));
    let p = tape.matmul(w, c).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(w).is_some());
    assert!(grads.get(c).is_none());
}
