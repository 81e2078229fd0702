use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// Independent reference product, deliberately in j-p-i loop order.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for j in 0..n {
        for p in 0..k {
            for i in 0..m {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = g.leaf(Tensor::matrix(2, 2, vec![3.0, -1.0, 2.5, 7.0]).unwrap());
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn matmul_scalar_case() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let b = g.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(7);
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[4, 2]);
    let expect = matmul_oracle(a.data(), b.data(), 3, 4, 2);
    let mut g = Graph::new();
    let (ia, ib) = (g.leaf(a), g.leaf(b));
    let y = g.matmul(ia, ib).unwrap();
    for (got, want) in g.value(y).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
    let b = g.leaf(Tensor::zeros(vec![4, 2]).unwrap());
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_associativity_on_random_triples() {
    let mut r = rng(11);
    for _ in 0..10 {
        let a = rand_tensor(&mut r, &[3, 4]);
        let b = rand_tensor(&mut r, &[4, 5]);
        let c = rand_tensor(&mut r, &[5, 2]);
        let mut g = Graph::new();
        let (ia, ib, ic) = (g.leaf(a), g.leaf(b), g.leaf(c));
        let ab_c = {
            let ab = g.matmul(ia, ib).unwrap();
            g.matmul(ab, ic).unwrap()
        };
        let a_bc = {
            let bc = g.matmul(ib, ic).unwrap();
            g.matmul(ia, bc).unwrap()
        };
        for (x, y) in g.value(ab_c).data().iter().zip(g.value(a_bc).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_symmetry() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.softmax(x, 0).unwrap();
    // direct exp/sum oracle
    let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
    let sum: f64 = exps.iter().sum();
    for (got, want) in g.value(y).data().iter().zip(exps.iter().map(|e| e / sum)) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_axes_of_rank2() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
    let rows = g.softmax(x, 1).unwrap();
    for r in 0..2 {
        let s: f64 = g.value(rows).row(r).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let cols = g.softmax(x, 0).unwrap();
    for c in 0..3 {
        let s: f64 = (0..2).map(|r| g.value(cols).data()[r * 3 + c]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_shift_invariance(xs in proptest::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(xs.clone()));
        let shifted = g.leaf(Tensor::vector(xs.iter().map(|v| v + c).collect()));
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(shifted, 0).unwrap();
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one(xs in proptest::collection::vec(-300.0f64..300.0, 1..10)) {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(xs));
        let s = g.softmax(a, 0).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn cosine_sim_of_vector_with_itself_is_one() {
    let mut g = Graph::new();
    let u = g.leaf(Tensor::vector(vec![0.3, -1.2, 4.0]));
    let c = g.cosine_sim(u, u).unwrap();
    assert!((g.value(c).item().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn cosine_sim_orthogonal_is_zero() {
    let mut g = Graph::new();
    let u = g.leaf(Tensor::vector(vec![1.0, 0.0]));
    let v = g.leaf(Tensor::vector(vec![0.0, 1.0]));
    let c = g.cosine_sim(u, v).unwrap();
    assert_eq!(g.value(c).item().unwrap(), 0.0);
}

#[test]
fn cosine_sim_matches_direct_formula() {
    let mut r = rng(23);
    let u = rand_tensor(&mut r, &[6]);
    let v = rand_tensor(&mut r, &[6]);
    let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    let nu: f64 = u.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let want = dot / (nu * nv);
    let mut g = Graph::new();
    let (iu, iv) = (g.leaf(u), g.leaf(v));
    let c = g.cosine_sim(iu, iv).unwrap();
    assert!((g.value(c).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn cosine_sim_zero_norm_is_degenerate() {
    let mut g = Graph::new();
    let u = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    let v = g.leaf(Tensor::vector(vec![1.0, 1.0]));
    assert!(matches!(g.cosine_sim(u, v), Err(Error::Degenerate(_))));
}

#[test]
fn cross_entropy_uniform_logits_is_ln_c() {
    for c in [2usize, 5, 17] {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::vector(vec![0.7; c]));
        let loss = g.cross_entropy(logits, c / 2).unwrap();
        assert!((g.value(loss).item().unwrap() - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_saturated_is_near_zero() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::vector(vec![0.0, 50.0, 0.0]));
    let loss = g.cross_entropy(logits, 1).unwrap();
    assert!(g.value(loss).item().unwrap() < 1e-9);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut r = rng(31);
    let logits = rand_tensor(&mut r, &[5]);
    let label = 3;
    let exps: Vec<f64> = logits.data().iter().map(|v| v.exp()).collect();
    let want = -(exps[label] / exps.iter().sum::<f64>()).ln();
    let mut g = Graph::new();
    let il = g.leaf(logits);
    let loss = g.cross_entropy(il, label).unwrap();
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(g.cross_entropy(logits, 2), Err(Error::Index(_))));
}

#[test]
fn backward_of_square() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0).with_grad());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_zeroes_unreachable_leaves() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0).with_grad());
    let orphan = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(orphan).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_softmax_cross_entropy_matches_finite_differences() {
    let mut r = rng(41);
    for _ in 0..5 {
        let logits = rand_tensor(&mut r, &[4]);
        let err = finite_diff_check(
            |g, x| {
                // scale into a "similarity over temperature" shape, then CE
                let z = g.scale(x, 1.0 / 0.7)?;
                g.cross_entropy(z, 2)
            },
            &logits,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(43);
    let a = rand_tensor(&mut r, &[2, 3]);
    let b = rand_tensor(&mut r, &[3, 2]);

    let run = |which: u8| -> Vec<f64> {
        let mut g = Graph::new();
        let mut ta = a.clone();
        ta.requires_grad = true;
        let ia = g.leaf(ta);
        let ib = g.leaf(b.clone());
        let prod = g.matmul(ia, ib).unwrap();
        let l1 = g.sum_all(prod).unwrap();
        let sq = g.mul(prod, prod).unwrap();
        let l2 = g.mean_all(sq).unwrap();
        let root = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(root).unwrap();
        g.grad(ia).unwrap().to_vec()
    };

    let (g1, g2, gsum) = (run(1), run(2), run(0));
    for i in 0..g1.len() {
        assert!((gsum[i] - (g1[i] + g2[i])).abs() < 1e-12);
    }
}

#[test]
fn finite_diff_check_linear_function() {
    // Truncation error vanishes for linear functions; a wider step keeps
    // f64 roundoff in the difference quotient well under the bound.
    let theta = Tensor::vector(vec![0.4, -1.0, 2.0]);
    let err = finite_diff_check(
        |g, x| {
            let w = g.leaf(Tensor::vector(vec![2.0, -3.0, 0.5]));
            let prod = g.mul(x, w)?;
            g.sum_all(prod)
        },
        &theta,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-10, "relative error {err}");
}

#[test]
fn finite_diff_check_quadratic_function() {
    let theta = Tensor::vector(vec![1.0, -2.0, 0.3]);
    let err = finite_diff_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            g.sum_all(sq)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

/// Every differentiable primitive passes the finite-difference oracle on
/// random small inputs.
#[test]
fn all_primitives_pass_gradient_checks() {
    for seed in 0..10u64 {
        let mut r = rng(1000 + seed);
        let m23 = rand_tensor(&mut r, &[2, 3]);
        let m23b = rand_tensor(&mut r, &[2, 3]);
        let m34 = rand_tensor(&mut r, &[3, 4]);
        let v3 = rand_tensor(&mut r, &[3]);
        let v3b = rand_tensor(&mut r, &[3]);

        let cases: Vec<(&str, f64)> = vec![
            (
                "add+mul+scale+add_scalar",
                finite_diff_check_multi(
                    |g, ids| {
                        let s = g.add(ids[0], ids[1])?;
                        let p = g.mul(s, ids[0])?;
                        let sc = g.scale(p, 0.7)?;
                        let sh = g.add_scalar(sc, 1.3)?;
                        g.mean_all(sh)
                    },
                    &[m23.clone(), m23b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "sub",
                finite_diff_check_multi(
                    |g, ids| {
                        let d = g.sub(ids[0], ids[1])?;
                        let sq = g.mul(d, d)?;
                        g.sum_all(sq)
                    },
                    &[m23.clone(), m23b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "matmul",
                finite_diff_check_multi(
                    |g, ids| {
                        let p = g.matmul(ids[0], ids[1])?;
                        let sq = g.mul(p, p)?;
                        g.sum_all(sq)
                    },
                    &[m23.clone(), m34.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "transpose+reshape",
                finite_diff_check(
                    |g, x| {
                        let t = g.transpose(x)?;
                        let flat = g.reshape(t, vec![6])?;
                        let sq = g.mul(flat, flat)?;
                        g.sum_all(sq)
                    },
                    &m23,
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "concat+slice rows",
                finite_diff_check_multi(
                    |g, ids| {
                        let cat = g.concat_rows(&[ids[0], ids[1]])?;
                        let cut = g.slice_rows(cat, 1, 3)?;
                        let sq = g.mul(cut, cut)?;
                        g.sum_all(sq)
                    },
                    &[m23.clone(), m23b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "concat+slice cols",
                finite_diff_check_multi(
                    |g, ids| {
                        let cat = g.concat_cols(&[ids[0], ids[1]])?;
                        let cut = g.slice_cols(cat, 2, 5)?;
                        let sq = g.mul(cut, cut)?;
                        g.sum_all(sq)
                    },
                    &[m23.clone(), m23b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "softmax rows",
                finite_diff_check(
                    |g, x| {
                        let s = g.softmax(x, 1)?;
                        let sq = g.mul(s, s)?;
                        g.sum_all(sq)
                    },
                    &m23,
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "softmax cols",
                finite_diff_check(
                    |g, x| {
                        let s = g.softmax(x, 0)?;
                        let sq = g.mul(s, s)?;
                        g.sum_all(sq)
                    },
                    &m23,
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "layer_norm",
                finite_diff_check_multi(
                    |g, ids| {
                        let y = g.layer_norm(ids[0], ids[1], ids[2])?;
                        let sq = g.mul(y, y)?;
                        g.sum_all(sq)
                    },
                    &[m23.clone(), v3.clone(), v3b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "gelu",
                finite_diff_check(
                    |g, x| {
                        let y = g.gelu(x)?;
                        g.sum_all(y)
                    },
                    &m23,
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "mean_rows",
                finite_diff_check(
                    |g, x| {
                        let y = g.mean_rows(x)?;
                        let sq = g.mul(y, y)?;
                        g.sum_all(sq)
                    },
                    &m23,
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "embedding",
                finite_diff_check(
                    |g, table| {
                        let e = g.embedding(table, &[1, 0, 1])?;
                        let sq = g.mul(e, e)?;
                        g.sum_all(sq)
                    },
                    &m23,
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "cosine_sim",
                finite_diff_check_multi(
                    |g, ids| g.cosine_sim(ids[0], ids[1]),
                    &[v3.clone(), v3b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
            (
                "cross_entropy",
                finite_diff_check(|g, x| g.cross_entropy(x, 1), &v3, DEFAULT_EPS).unwrap(),
            ),
            (
                "stack_scalars",
                finite_diff_check_multi(
                    |g, ids| {
                        let c0 = g.cosine_sim(ids[0], ids[1])?;
                        let s0 = g.sum_all(ids[0])?;
                        let stacked = g.stack_scalars(&[c0, s0])?;
                        let sq = g.mul(stacked, stacked)?;
                        g.sum_all(sq)
                    },
                    &[v3.clone(), v3b.clone()],
                    DEFAULT_EPS,
                )
                .unwrap(),
            ),
        ];

        for (name, err) in cases {
            assert!(err < 1e-6, "{name} failed at seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn ops_reject_non_finite_results() {
    let mut g = Graph::new();
    let big = g.leaf(Tensor::scalar(1e308));
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite { .. })));
    let ok = g.scale(big, 0.5).unwrap();
    assert!(g.value(ok).all_finite());
}
