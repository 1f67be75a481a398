mod common;

use common::*;
use proptest::prelude::*;
use vidtune::denoiser::{lora_merge, Condition, Denoiser, LoraAdapter, LoraConfig, ParamSet};
use vidtune::finetune::rwr_weights;
use vidtune::latent::LatentVideo;
use vidtune::sampler::{edit_sample, sample_full, GuidanceConfig};
use vidtune::schedule::{DdimPlan, Schedule};
use vidtune::tensor::{record, Tensor};

const DIVISORS: [usize; 8] = [1, 2, 4, 5, 10, 20, 25, 50];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rwr_weights_sum_to_one(
        rewards in prop::collection::vec(-10.0f64..10.0, 1..16),
        beta in 0.01f64..5.0,
    ) {
        let w = rwr_weights(&rewards, beta).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let best = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let i = rewards.iter().position(|&r| r == best).unwrap();
        prop_assert!(w.iter().all(|&x| x <= w[i]));
    }

    #[test]
    fn denoiser_calls_match_closed_form(
        d in prop::sample::select(DIVISORS.to_vec()),
        tau in 0.001f64..=1.0,
        guided in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let sched = Schedule::linear(100, 1e-4, 2e-2).unwrap();
        let plan = DdimPlan::new(d, 100).unwrap();
        let g = if guided { GuidanceConfig::default() } else { GuidanceConfig::off() };
        let per_step = if guided { 2 } else { 1 };
        let params = tiny_params(seed);
        let model = Denoiser::new(&params, None).unwrap();
        let k = plan.noise_level_to_step(tau).unwrap().start_index;
        prop_assert_eq!(k, ((tau * d as f64 + 0.5).floor() as usize).clamp(1, d));

        let z = LatentVideo::randn(tiny_shape(), &mut rng(seed));
        let v = edit_sample(&model, &z, Condition(1), tau, &sched, &plan, &g, seed).unwrap();
        prop_assert_eq!(model.calls(), (k * per_step) as u64);
        prop_assert_eq!(v.shape(), tiny_shape());
        model.reset_calls();
        sample_full(&model, Condition(2), &sched, &plan, &g, seed).unwrap();
        prop_assert_eq!(model.calls(), (d * per_step) as u64);
    }

    #[test]
    fn leaves_behind_stop_grad_get_exact_zero(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[3, 2], &mut r);
        let b = Tensor::randn(&[2, 2], &mut r);
        let (_, tape) = record(&[("a", a, true), ("b", b, true)], |t, v| {
            let frozen = t.stop_grad(v[0])?;
            let h = t.matmul(frozen, v[1])?;
            let h = t.tanh(h)?;
            let sq = t.square(v[1])?;
            let s1 = t.sum(h)?;
            let s2 = t.sum(sq)?;
            t.add(s1, s2)
        }).unwrap();
        let g = tape.grad(&Tensor::scalar(1.0)).unwrap();
        prop_assert!(g.get("a").unwrap().data().iter().all(|&x| x == 0.0));
        prop_assert!(g.get("b").unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn merge_is_identity_while_up_is_zero(seed in any::<u64>(), rank in 1usize..6) {
        let params = tiny_params(seed);
        let lora = LoraConfig { rank, ..LoraConfig::default() };
        let adapter = LoraAdapter::init(&params.config, lora, &mut rng(seed ^ 1)).unwrap();
        let merged = lora_merge(&params, &adapter).unwrap();
        for ((n, a), (_, b)) in params.named().into_iter().zip(merged.named()) {
            prop_assert!(
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{} changed", n
            );
        }
    }
}
