use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::ops::{cross_entropy_masked, mse};

fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_f64(data, shape).unwrap()
}

fn p64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::param(data.to_vec(), shape).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_param(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, 1.0, &mut rng(seed)).to_param()
}

#[test]
fn elementwise_examples() {
    let a = t64(&[1., 2.], &[2]);
    let b = t64(&[3., 4.], &[2]);
    assert_eq!(a.add(&b).unwrap().to_vec(), vec![4., 6.]);
    let x = t64(&[1., 2., 3.], &[3]);
    assert_eq!(x.scale(0.0).to_vec(), vec![0., 0., 0.]);
    let y = t64(&[2.5], &[1]).log().unwrap().exp();
    assert!((y.item() - 2.5).abs() < 1e-12);
}

#[test]
fn elementwise_errors() {
    let a = t64(&[1., 2.], &[2]);
    let b = t64(&[1., 2., 3.], &[3]);
    assert!(matches!(a.add(&b), Err(Error::ShapeMismatch(_))));
    assert!(matches!(t64(&[1., 0.], &[2]).log(), Err(Error::DomainError(_))));
    assert!(matches!(t64(&[-1.], &[1]).log(), Err(Error::DomainError(_))));
}

#[test]
fn broadcast_add_bias() {
    let x = t64(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    let b = t64(&[10., 20., 30.], &[3]);
    assert_eq!(x.add(&b).unwrap().to_vec(), vec![11., 22., 33., 14., 25., 36.]);
    let col = t64(&[100., 200.], &[2, 1]);
    assert_eq!(x.add(&col).unwrap().to_vec(), vec![101., 102., 103., 204., 205., 206.]);
}

#[test]
fn matmul_examples() {
    let eye = t64(&[1., 0., 0., 1.], &[2, 2]);
    let m = t64(&[1., 2., 3., 4.], &[2, 2]);
    assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());
    let r = t64(&[1., 2.], &[1, 2]).matmul(&t64(&[3., 4.], &[2, 1])).unwrap();
    assert_eq!(r.shape(), &[1, 1]);
    assert_eq!(r.item(), 11.0);
    assert!(matches!(m.matmul(&t64(&[1., 2., 3.], &[3, 1])), Err(Error::ShapeMismatch(_))));
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng(1));
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng(2));
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), triple_loop(&a.to_vec(), &b.to_vec(), 3, 4, 2));
}

#[test]
fn batched_matmul_matches_per_batch_oracle() {
    let a = Tensor::<f64>::randn(&[2, 3, 3, 4], 1.0, &mut rng(3));
    let b = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng(4));
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 3, 5]);
    let (ad, bd, cd) = (a.to_vec(), b.to_vec(), c.to_vec());
    for batch in 0..6 {
        let want = triple_loop(&ad[batch * 12..(batch + 1) * 12], &bd[batch * 20..(batch + 1) * 20], 3, 4, 5);
        assert_eq!(&cd[batch * 15..(batch + 1) * 15], &want[..]);
    }
    // shared right operand
    let w = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng(5));
    let c = a.matmul(&w).unwrap();
    for batch in 0..6 {
        let want = triple_loop(&ad[batch * 12..(batch + 1) * 12], &w.to_vec(), 3, 4, 5);
        assert_eq!(&c.to_vec()[batch * 15..(batch + 1) * 15], &want[..]);
    }
}

#[test]
fn softmax_examples() {
    let s = t64(&[0., 0.], &[2]).softmax_rows(None).unwrap();
    assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    let mask = Mask::new(vec![true, false], &[2]).unwrap();
    let s = t64(&[5., 123.], &[2]).softmax_rows(Some(&mask)).unwrap();
    assert_eq!(s.to_vec(), vec![1.0, 0.0]);
    let s = t64(&[1., 2., 3.], &[3]).softmax_rows(None).unwrap();
    let denom: f64 = [1f64, 2., 3.].iter().map(|z| z.exp()).sum();
    for (i, v) in s.to_vec().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_all_masked_row_is_an_error() {
    let mask = Mask::new(vec![true, true, false, false], &[2, 2]).unwrap();
    let err = t64(&[1., 2., 3., 4.], &[2, 2]).softmax_rows(Some(&mask)).unwrap_err();
    assert!(matches!(err, Error::AllMaskedRow { row: 1 }));
}

#[test]
fn causal_softmax_zeroes_future() {
    let x = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng(9));
    let y = x.softmax_rows(Some(&Mask::causal(4))).unwrap();
    for h in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    assert_eq!(y.get(&[h, i, j]), 0.0);
                } else {
                    assert!(y.get(&[h, i, j]) > 0.0);
                }
            }
        }
    }
}

#[test]
fn mse_examples() {
    let x = t64(&[1., -2., 3.], &[3]);
    assert_eq!(mse(&x, &x).unwrap().item(), 0.0);
    assert_eq!(mse(&t64(&[0., 0.], &[2]), &t64(&[2., 0.], &[2])).unwrap().item(), 2.0);
    let a = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng(11));
    let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng(12));
    let mut oracle = 0.0;
    for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
        oracle += (x - y) * (x - y);
    }
    oracle /= 15.0;
    assert!((mse(&a, &b).unwrap().item() - oracle).abs() < 1e-12);
    assert!(matches!(mse(&a, &t64(&[1.], &[1])), Err(Error::ShapeMismatch(_))));
}

#[test]
fn cross_entropy_examples() {
    // peaked on the targets
    let mut logits = vec![0.0; 3 * 4];
    let targets = [1usize, 3, 0];
    for (r, &t) in targets.iter().enumerate() {
        logits[r * 4 + t] = 100.0;
    }
    let ce = cross_entropy_masked(&t64(&logits, &[3, 4]), &targets, &[true; 3]).unwrap();
    assert!(ce.item() < 1e-10);
    let uniform = cross_entropy_masked(&Tensor::<f64>::zeros(&[3, 4]), &targets, &[true, false, true]).unwrap();
    assert!((uniform.item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_per_position_oracle() {
    let x = Tensor::<f64>::randn(&[5, 7], 2.0, &mut rng(21));
    let targets = [3usize, 0, 6, 2, 2];
    let mask = [true, false, true, true, false];
    let xs = x.to_vec();
    let mut total = 0.0;
    for r in [0usize, 2, 3] {
        let row = &xs[r * 7..(r + 1) * 7];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[targets[r]].exp() / z).ln();
    }
    let got = cross_entropy_masked(&x, &targets, &mask).unwrap().item();
    assert!((got - total / 3.0).abs() < 1e-10);
}

#[test]
fn cross_entropy_errors() {
    let x = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(cross_entropy_masked(&x, &[0, 1], &[false, false]), Err(Error::EmptyMask)));
    assert!(matches!(
        cross_entropy_masked(&x, &[0, 3], &[true, true]),
        Err(Error::InvalidTokenId { id: 3, vocab: 3 })
    ));
}

#[test]
fn backward_examples() {
    let x = p64(&[2.0], &[1]);
    x.scale(3.0).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0]);

    let x = p64(&[1.0, 1.0], &[2]);
    mse(&x, &Tensor::zeros(&[2])).unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);

    let y = p64(&[1.0, 2.0], &[2]).scale(2.0);
    assert!(matches!(y.backward(), Err(Error::NonScalarRoot(_))));
}

#[test]
fn backward_accumulates_and_skips_constants() {
    let x = p64(&[1.0, 2.0], &[2]);
    let k = t64(&[3.0, 4.0], &[2]);
    let loss = || x.mul(&k).unwrap().sum();
    loss().backward().unwrap();
    loss().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0, 8.0]);
    assert!(k.grad().is_none());
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn shared_subexpression_gradient() {
    // y = sum(x*x + x) reuses x three times
    let x = p64(&[0.5, -1.5], &[2]);
    x.mul(&x).unwrap().add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -2.0]);
}

fn check(f: impl FnMut() -> Result<Tensor<f64>>, params: &[Tensor<f64>], tol: f64) {
    let report = grad_check(f, params, 1e-6, tol).unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error());
}

#[test]
fn grad_check_sum_of_squares() {
    let x = random_param(&[6], 30);
    let report = grad_check(|| Ok(x.mul(&x)?.sum()), &[x.clone()], 1e-6, 1e-8).unwrap();
    assert!(report.passed(), "{}", report.max_rel_error());
}

#[test]
fn grad_check_broadcast_elementwise() {
    let a = random_param(&[2, 3, 4], 31);
    let b = random_param(&[3, 1], 32);
    let c = random_param(&[4], 33);
    check(
        || Ok(a.mul(&b)?.sub(&c)?.add(&b)?.exp().scale(0.3).add_scalar(1.0).log()?.sum()),
        &[a.clone(), b.clone(), c.clone()],
        1e-5,
    );
}

#[test]
fn grad_check_matmul_variants() {
    let a = random_param(&[2, 3, 4], 34);
    let w = random_param(&[4, 5], 35);
    let b = random_param(&[2, 4, 3], 36);
    let q = random_param(&[3, 4], 37);
    check(
        || {
            let x = a.matmul(&w)?; // shared weight
            let y = a.matmul(&b)?; // batched
            let z = q.matmul(&b)?; // broadcast left operand
            let t = a.matmul_t(&a)?;
            Ok(x.mul(&x)?.sum().add(&y.sum())?.add(&z.mul(&z)?.mean())?.add(&t.sum())?)
        },
        &[a.clone(), w.clone(), b.clone(), q.clone()],
        1e-5,
    );
}

#[test]
fn grad_check_shape_ops() {
    let a = random_param(&[2, 3, 4], 38);
    let b = random_param(&[2, 2, 4], 39);
    let weights = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng(40));
    check(
        || {
            let cat = Tensor::concat(&[a.clone(), b.clone()], 1)?; // [2,5,4]
            let p = cat.permute(&[2, 0, 1])?.reshape(&[4, 10])?;
            let s = p.index_select(1, &[0, 3, 3, 9])?.narrow(0, 1, 2)?;
            let g = cat.permute(&[0, 2, 1])?.group_mean(2)?; // [2,2,5]
            let w = g.mul(&weights.narrow(1, 0, 2)?)?;
            Ok(s.mul(&s)?.sum().add(&w.sum())?)
        },
        &[a.clone(), b.clone()],
        1e-5,
    );
}

#[test]
fn grad_check_layer_norm_gelu_softmax() {
    let x = random_param(&[3, 4, 6], 41);
    let gain = random_param(&[6], 42);
    let bias = random_param(&[6], 43);
    let w = Tensor::<f64>::randn(&[3, 4, 6], 1.0, &mut rng(44));
    let mask = Mask::new((0..24).map(|i| i % 6 <= i / 6 + 1).collect(), &[4, 6]).unwrap();
    check(
        || {
            let h = x.layer_norm(&gain, &bias, 1e-5)?.gelu();
            let s = h.softmax_rows(Some(&mask))?;
            let l = h.log_softmax_rows()?;
            Ok(s.mul(&w)?.sum().add(&l.mul(&w)?.mean())?)
        },
        &[x.clone(), gain.clone(), bias.clone()],
        1e-5,
    );
}

#[test]
fn grad_check_losses() {
    let logits = random_param(&[4, 5], 45);
    let a = random_param(&[3, 2], 46);
    let b = random_param(&[3, 2], 47);
    check(
        || {
            let ce = cross_entropy_masked(&logits, &[1, 4, 0, 2], &[true, false, true, true])?;
            Ok(ce.add(&mse(&a, &b)?)?)
        },
        &[logits.clone(), a.clone(), b.clone()],
        1e-5,
    );
}

#[test]
fn grad_check_flags_wrong_derivative() {
    let x = random_param(&[4], 48);
    // derivative of x² reported as x
    let report = grad_check(|| Ok(x.map_with_grad(|v| v * v, |v| v).sum()), &[x.clone()], 1e-6, 1e-5).unwrap();
    assert!(!report.passed());
    assert!(report.failures().count() > 0);
}

#[test]
fn grad_check_rejects_nondeterministic_function() {
    let x = random_param(&[2], 49);
    let mut calls = 0.0;
    let err = grad_check(
        || {
            calls += 1.0;
            Ok(x.sum().add_scalar(calls))
        },
        &[x.clone()],
        1e-6,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministicFunction { .. }));
}

#[test]
fn operations_are_bitwise_deterministic() {
    let run = || {
        let a = Tensor::<f32>::randn(&[4, 8, 16], 1.0, &mut rng(50)).to_param();
        let w = Tensor::<f32>::randn(&[16, 16], 0.3, &mut rng(51)).to_param();
        let h = a.matmul(&w).unwrap().gelu().softmax_rows(None).unwrap();
        let loss = h.mul(&h).unwrap().mean();
        loss.backward().unwrap();
        (loss.item().to_bits(), w.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-30.0f64..30.0, 12),
        keep in prop::collection::vec(any::<bool>(), 12),
    ) {
        // keep the diagonal-ish first entry of every row visible
        let mask: Vec<bool> = keep.iter().enumerate().map(|(i, &k)| k || i % 4 == 0).collect();
        let mask = Mask::new(mask, &[3, 4]).unwrap();
        let y = t64(&data, &[3, 4]).softmax_rows(Some(&mask)).unwrap().to_vec();
        for r in 0..3 {
            let row = &y[r * 4..(r + 1) * 4];
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for (j, &v) in row.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&v));
                if !mask.data()[r * 4 + j] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
        let c = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap().to_vec();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap().to_vec();
        for (x, y) in left.iter().zip(&right) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn mse_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-1e3f64..1e3, 6),
        b in prop::collection::vec(-1e3f64..1e3, 6),
    ) {
        let (ta, tb) = (t64(&a, &[2, 3]), t64(&b, &[2, 3]));
        let ab = mse(&ta, &tb).unwrap().item();
        let ba = mse(&tb, &ta).unwrap().item();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab >= 0.0);
    }
}
