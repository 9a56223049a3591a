mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringada_core::engine::*;

fn batch(seed: u64, rows: usize) -> Batch {
    let spec = common::spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..rows * spec.seq_len)
        .map(|_| rng.random_range(0..spec.vocab_size as u32))
        .collect();
    let labels = (0..rows).map(|_| rng.random_range(0..2)).collect();
    Batch::new(seed, tokens, labels, spec.seq_len).unwrap()
}

fn params(seed: u64) -> ModelParams {
    ModelParams::init(&common::spec(), Activation::Relu, &common::init(), seed).unwrap()
}

#[test]
fn finite_differences_agree_on_the_toy_model() {
    let (p, b) = (params(4), batch(4, 2));
    for depth in [1, 2, 4] {
        let err = finite_difference_check(&p, &b, depth, 1e-4).unwrap();
        assert!(err <= 1e-5, "depth {depth}: {err}");
    }
}

#[test]
fn gelu_adapters_pass_the_gradient_check() {
    let p = ModelParams::init(&common::spec(), Activation::Gelu, &common::init(), 9).unwrap();
    assert!(finite_difference_check(&p, &batch(9, 2), 3, 1e-4).unwrap() <= 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn early_stop_matches_masked_full_backward(seed in any::<u64>(), depth in 1usize..=4, rows in 1usize..4) {
        let (p, b) = (params(seed), batch(seed, rows));
        let (logits, cache) = full_forward(&p, &b, 4).unwrap();
        let loss = loss_and_head_grad(&p, &cache, &logits, &b.labels).unwrap();
        let fast = backward_early_stop(&cache, &loss, &p, depth).unwrap();
        let oracle = full_backward_reference(&cache, &loss, &p).unwrap().restrict(&FreezeMask::new(4, depth).unwrap());
        let gap = fast.max_abs_diff(&oracle).expect("same trainable groups");
        prop_assert!(gap <= 1e-12, "gap {gap}");
    }

    #[test]
    fn shallow_forward_caches_give_the_same_logits(seed in any::<u64>(), depth in 1usize..=4) {
        let (p, b) = (params(seed), batch(seed, 2));
        let (full, _) = full_forward(&p, &b, 4).unwrap();
        let (shallow, cache) = full_forward(&p, &b, depth).unwrap();
        prop_assert_eq!(&full, &shallow);
        let loss = loss_and_head_grad(&p, &cache, &shallow, &b.labels).unwrap();
        prop_assert!(backward_early_stop(&cache, &loss, &p, depth).is_ok());
    }

    #[test]
    fn updates_leave_frozen_groups_bit_identical(seed in any::<u64>(), depth in 1usize..=4) {
        let (mut p, b) = (params(seed), batch(seed, 2));
        let before = p.clone();
        let (logits, cache) = full_forward(&p, &b, depth).unwrap();
        let loss = loss_and_head_grad(&p, &cache, &logits, &b.labels).unwrap();
        let g = backward_early_stop(&cache, &loss, &p, depth).unwrap();
        p.apply_update(&g, 0.1, &FreezeMask::new(4, depth).unwrap()).unwrap();
        prop_assert_eq!(&p.blocks, &before.blocks);
        for l in 1..=4 - depth {
            prop_assert_eq!(p.adapter(l), before.adapter(l));
        }
        prop_assert_eq!(p.version, before.version + 1);
    }
}
