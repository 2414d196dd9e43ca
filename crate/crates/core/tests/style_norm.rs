mod common;

use comen_core::style_norm::{weighted_domain_stats, NormMode, SdNormLayer};
use comen_core::tensor::Tensor;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn subset(z: &Tensor, rows: &[usize]) -> Tensor {
    let per = z.numel() / z.shape()[0];
    let mut shape = z.shape().to_vec();
    shape[0] = rows.len();
    let data = rows
        .iter()
        .flat_map(|&r| z.data()[r * per..(r + 1) * per].to_vec())
        .collect();
    Tensor::new(&shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn single_branch_is_batch_norm(seed in any::<u64>(), b in 2usize..8, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(&mut rng, &[b, c, 3, 3], -3.0, 3.0);
        let mut layer = SdNormLayer::new(c, 1);
        layer.gain = uniform(&mut rng, &[1, c], 0.5, 2.0);
        layer.bias = uniform(&mut rng, &[1, c], -1.0, 1.0);
        let want = batch_norm_oracle(&z, layer.gain.data(), layer.bias.data(), layer.eps);
        let got = layer.forward(&z, &Tensor::ones(&[b, 1]), NormMode::Train).unwrap();
        prop_assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn one_hot_assignments_normalize_each_subset(seed in any::<u64>(), m in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2;
        // every branch gets at least two samples
        let mut owner: Vec<usize> = (0..m).flat_map(|d| [d, d]).collect();
        owner.extend((0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..m)));
        let b = owner.len();
        let z = uniform(&mut rng, &[b, c, 2, 3], -2.0, 2.0);
        let mut layer = SdNormLayer::new(c, m);
        layer.gain = uniform(&mut rng, &[m, c], 0.5, 2.0);
        layer.bias = uniform(&mut rng, &[m, c], -1.0, 1.0);
        let got = layer.forward(&z, &one_hot(&owner, m), NormMode::Train).unwrap();
        let per = z.numel() / b;
        for d in 0..m {
            let rows: Vec<usize> = (0..b).filter(|&i| owner[i] == d).collect();
            let want = batch_norm_oracle(&subset(&z, &rows), layer.gain.row(d), layer.bias.row(d), layer.eps);
            for (j, &r) in rows.iter().enumerate() {
                prop_assert!(max_diff(&got.data()[r * per..(r + 1) * per], &want.data()[j * per..(j + 1) * per]) < 1e-10);
            }
        }
    }

    #[test]
    fn branches_are_standardized_over_their_mass(seed in any::<u64>(), b in 2usize..8, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2;
        let z = uniform(&mut rng, &[b, c, 2, 2], -2.0, 4.0);
        let p = soft_assignments(&mut rng, b, m);
        let stats = weighted_domain_stats(&z, &p).unwrap();
        for d in 0..m {
            let mass: f64 = (0..b).map(|i| p.at(&[i, d])).sum();
            for ch in 0..c {
                let (mu, var) = (stats.mean.at(&[d, ch]), stats.var.at(&[d, ch]));
                let s = (var + 1e-5).sqrt();
                let (mut m1, mut m2) = (0.0, 0.0);
                for i in 0..b {
                    for px in 0..4 {
                        let zh = (z.data()[(i * c + ch) * 4 + px] - mu) / s;
                        let w = p.at(&[i, d]) / mass / 4.0;
                        m1 += w * zh;
                        m2 += w * zh * zh;
                    }
                }
                prop_assert!(m1.abs() < 1e-8);
                prop_assert!((m2 - var / (var + 1e-5)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn running_variances_stay_nonnegative(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = SdNormLayer::new(2, 3);
        for _ in 0..steps {
            let z = uniform(&mut rng, &[4, 2, 2, 2], -1.0, 1.0);
            let p = soft_assignments(&mut rng, 4, 3);
            layer.forward(&z, &p, NormMode::Train).unwrap();
        }
        prop_assert!(layer.running_var.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn soft_assignments_approach_the_hard_result() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (b, c, m) = (6, 2, 2);
    let owner = [0, 1, 0, 1, 1, 0];
    let z = uniform(&mut rng, &[b, c, 2, 2], -2.0, 2.0);
    let mut layer = SdNormLayer::new(c, m);
    layer.gain = uniform(&mut rng, &[m, c], 0.5, 2.0);
    layer.bias = uniform(&mut rng, &[m, c], -1.0, 1.0);
    let hard = sdnorm_oracle(&z, &one_hot(&owner, m), &layer.gain, &layer.bias, layer.eps);
    let mut gaps = Vec::new();
    for confidence in [0.9, 0.99, 0.999] {
        let p = Tensor::from_fn(&[b, m], |i| {
            if owner[i / m] == i % m {
                confidence
            } else {
                1.0 - confidence
            }
        });
        let out = layer.clone().forward(&z, &p, NormMode::Train).unwrap();
        gaps.push(out.max_abs_diff(&hard));
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] < 1e-2, "{gaps:?}");
}

#[test]
fn constant_channels_map_to_the_bias_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::from_fn(&[3, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 1.5 } else { -0.5 });
    let p = soft_assignments(&mut rng, 3, 2);
    let mut layer = SdNormLayer::new(2, 2);
    layer.gain = uniform(&mut rng, &[2, 2], 0.5, 2.0);
    layer.bias = uniform(&mut rng, &[2, 2], -1.0, 1.0);
    let out = layer.forward(&z, &p, NormMode::Train).unwrap();
    for i in 0..3 {
        for ch in 0..2 {
            let want: f64 = (0..2)
                .map(|d| p.at(&[i, d]) * layer.bias.at(&[d, ch]))
                .sum();
            for px in 0..4 {
                assert!((out.data()[(i * 2 + ch) * 4 + px] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn balanced_branches_follow_standard_momentum() {
    let z = Tensor::new(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
    let mut layer = SdNormLayer::new(1, 2);
    let p = Tensor::from_fn(&[2, 2], |_| 0.5);
    layer.forward(&z, &p, NormMode::Train).unwrap();
    // batch mean 1, var 1 on both branches; step 0.1 from (0, 1)
    for d in 0..2 {
        assert!((layer.running_mean.data()[d] - 0.1).abs() < 1e-15);
        assert!((layer.running_var.data()[d] - 1.0).abs() < 1e-15);
    }
}

#[test]
fn invalid_assignment_rows_are_rejected() {
    let z = Tensor::zeros(&[2, 1, 1, 1]);
    let p = Tensor::new(&[2, 2], vec![0.7, 0.7, 0.5, 0.5]).unwrap();
    assert!(weighted_domain_stats(&z, &p).is_err());
    let short = Tensor::ones(&[3, 1]);
    assert!(SdNormLayer::new(1, 1)
        .forward(&z, &short, NormMode::Train)
        .is_err());
}
