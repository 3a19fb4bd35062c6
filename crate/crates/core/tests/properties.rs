//! Invariants checked over generated inputs.

mod common;

use klda::baselines::{coral_penalty, mmd_penalty};
use klda::data::{make_rotated_blobs, rotate_dataset};
use klda::distributions::{mixture_log_density, BatchMixture, DiagGaussian};
use klda::gradients::{log_sum_exp, value_and_grad};
use klda::model::{bounded_softmax, nll_loss, predictive_batch, softmax};
use klda::theory::{check_pinsker, exact_kl, kl_chain_decomposition, random_scenario, tv_halving};
use klda::{Architecture, BoundConfig, DiscreteDist, KernelBank, ModelParams, ParamVector, Tensor};
use proptest::prelude::*;

fn row(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, len)
}

fn batch(rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), rows)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn log_sum_exp_shift(xs in row(1..8), c in -500.0..500.0f64) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, b) = (log_sum_exp(&xs), log_sum_exp(&shifted));
        prop_assert!((b - (a + c)).abs() <= 1e-12 * (1.0 + a.abs() + c.abs()));

        let grad = |v: &[f64]| {
            let p = ParamVector::new(vec![Tensor::row(v.to_vec())]);
            value_and_grad(&p, |t, vars| {
                let l = t.log_sum_exp(vars[0]);
                Ok(t.sum(l))
            })
            .unwrap()
            .1
            .tensor(0)
            .clone()
        };
        let (ga, gb) = (grad(&xs), grad(&shifted));
        for (x, y) in ga.data().iter().zip(gb.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn value_and_grad_is_bit_deterministic(xs in row(1..8)) {
        let p = ParamVector::new(vec![Tensor::row(xs)]);
        let run = || value_and_grad(&p, |t, v| {
            let s = t.softmax(v[0]);
            let l = t.log(s);
            Ok(t.sum(l))
        }).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn mixture_density_is_shift_equivariant(
        comps in batch(4, 3),
        lvs in batch(4, 3),
        z in prop::collection::vec(-3.0..3.0f64, 3),
        shift in prop::collection::vec(-10.0..10.0f64, 3),
    ) {
        let build = |s: &[f64]| {
            BatchMixture::new(
                comps
                    .iter()
                    .zip(&lvs)
                    .map(|(m, l)| DiagGaussian::new(m.iter().zip(s).map(|(a, b)| a + b).collect(), l.clone()).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let base = mixture_log_density(&build(&[0.0; 3]), &z).unwrap();
        let zs: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let moved = mixture_log_density(&build(&shift), &zs).unwrap();
        prop_assert!((base - moved).abs() < 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn penalties_ignore_row_order(zs in batch(6, 2), zt in batch(5, 2), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut r = common::rng(seed);
        let (mut ps, mut pt) = (zs.clone(), zt.clone());
        ps.shuffle(&mut r);
        pt.shuffle(&mut r);
        let bank = KernelBank::new(vec![0.5, 1.0, 2.0]).unwrap();
        let (a, b) = (tensor(&zs), tensor(&zt));
        let (c, d) = (tensor(&ps), tensor(&pt));
        prop_assert!((coral_penalty(&a, &b).unwrap() - coral_penalty(&c, &d).unwrap()).abs() < 1e-10);
        prop_assert!((mmd_penalty(&a, &b, &bank).unwrap() - mmd_penalty(&c, &d, &bank).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn penalties_vanish_on_identical_multisets(zs in batch(6, 3), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm = zs.clone();
        perm.shuffle(&mut common::rng(seed));
        let (a, b) = (tensor(&zs), tensor(&perm));
        let bank = KernelBank::median_heuristic(&a, &b);
        prop_assert!(coral_penalty(&a, &b).unwrap().abs() < 1e-10);
        prop_assert!(mmd_penalty(&a, &b, &bank).unwrap().abs() < 1e-10);
    }

    #[test]
    fn penalties_under_translation(
        zs in batch(6, 2),
        zt in batch(6, 2),
        v in prop::collection::vec(-4.0..4.0f64, 2),
    ) {
        let shift = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a + b).collect()).collect::<Vec<Vec<f64>>>();
        let (a, b) = (tensor(&zs), tensor(&zt));
        let bank = KernelBank::new(vec![0.5, 1.0, 2.0]).unwrap();
        // common shift of both batches leaves MMD unchanged
        let common_mmd = mmd_penalty(&tensor(&shift(&zs)), &tensor(&shift(&zt)), &bank).unwrap();
        prop_assert!((common_mmd - mmd_penalty(&a, &b, &bank).unwrap()).abs() < 1e-10);
        // shifting one batch only moves the CORAL mean term, quadratically
        let d = 2.0;
        let mean = |rows: &[Vec<f64>], k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
        let dm: Vec<f64> = (0..2).map(|k| mean(&zs, k) - mean(&zt, k)).collect();
        let before: f64 = dm.iter().map(|x| x * x).sum::<f64>() / d;
        let after: f64 = dm.iter().zip(&v).map(|(x, s)| (x - s).powi(2)).sum::<f64>() / d;
        let moved = coral_penalty(&a, &tensor(&shift(&zt))).unwrap();
        let base = coral_penalty(&a, &b).unwrap();
        prop_assert!((moved - base - (after - before)).abs() < 1e-9);
    }

    #[test]
    fn predictive_is_a_bounded_probability_vector(seed in any::<u64>(), n in 1usize..6) {
        let arch = Architecture { hidden: vec![5], ..Architecture::mlp(3, 2, 4) };
        let params = ModelParams::init(arch, seed).unwrap();
        let mut r = common::rng(seed ^ 0x5eed);
        let x = common::uniform(&mut r, n, 3, -3.0, 3.0);
        let bc = BoundConfig::with_floor(0.05, 4).unwrap();
        let p = predictive_batch(&params, &x, 16, Some(&bc), &mut r).unwrap();
        for i in 0..n {
            let row = p.row_slice(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|&q| q >= 0.05 - 1e-15 && q <= 1.0));
        }
    }

    #[test]
    fn blobs_are_rotation_equivariant(seed in any::<u64>(), angle in -360.0..360.0f64, classes in 2usize..6) {
        let base = make_rotated_blobs::<f64>(7, classes, 2.0, 0.5, 0.0, seed).unwrap();
        let direct = make_rotated_blobs::<f64>(7, classes, 2.0, 0.5, angle, seed).unwrap();
        let rotated = rotate_dataset(&base, angle).unwrap();
        prop_assert_eq!(direct.labels(), rotated.labels());
        for (a, b) in direct.inputs().data().iter().zip(rotated.inputs().data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pinsker_tv_and_gibbs_on_random_pairs(seed in any::<u64>(), n in 2usize..12) {
        let mut r = common::rng(seed);
        let p = DiscreteDist::random(&mut r, n, 0.5);
        let q = DiscreteDist::random(&mut r, n, 0.5);
        let pk = check_pinsker(&p, &q).unwrap();
        prop_assert!(pk.rhs - pk.lhs >= -1e-10);
        let (a, half) = tv_halving(&p, &q).unwrap();
        prop_assert!((a - half).abs() < 1e-12);
        prop_assert!(exact_kl(&p, &q).unwrap() >= -1e-12);
    }

    #[test]
    fn chain_decomposition_residual(seed in any::<u64>()) {
        let s = random_scenario(&mut common::rng(seed), 6, 3.0);
        let c = kl_chain_decomposition(&s).unwrap();
        prop_assert!(c.residual.abs() < 1e-10);
    }
}

/// Bounded loss and argmax preservation over 10^4 random model and input
/// draws, with weights scaled up to push the raw softmax towards one-hot.
#[test]
fn bounded_loss_never_exceeds_m() {
    use rand::Rng;
    let mut r = common::rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let classes = r.random_range(2..11);
        let arch = Architecture { hidden: vec![4], ..Architecture::mlp(3, 2, classes) };
        let mut params = ModelParams::init(arch, r.random()).unwrap();
        let scale = r.random_range(0.1..40.0);
        for t in 0..params.params().len() {
            let w = params.params().tensor(t).map(|v| v * scale);
            *params.params_mut().tensor_mut(t) = w;
        }
        let x = common::uniform(&mut r, 1, 3, -5.0, 5.0);
        let (mu, _) = params.encode_batch(&x).unwrap();
        let logits = params.logits_batch(&mu).unwrap();
        let bc = BoundConfig::with_floor(0.05, classes).unwrap();
        let p = softmax(logits.data());
        let q = bounded_softmax(&p, &bc).unwrap();
        for y in 0..classes {
            worst = worst.max(nll_loss(&q, y).unwrap());
        }
        let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (k, x)| if *x > v[b] { k } else { b });
        assert_eq!(arg(&p), arg(&q));
    }
    assert!(worst <= 3.0, "worst loss {worst}");
}
