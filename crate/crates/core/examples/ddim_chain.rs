//! The DDIM sub-sequence, the noise level of an edit, and what a full
//! sample costs next to a partial-chain edit of a data video.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtune::denoiser::{Condition, Denoiser, DenoiserConfig, DenoiserParams};
use vidtune::latent::LatentVideo;
use vidtune::metrics::mean_std;
use vidtune::sampler::{edit_sample, q_sample, sample_full, GuidanceConfig};
use vidtune::schedule::{DdimPlan, ScheduleConfig};

fn main() -> vidtune::Result<()> {
    let sched = ScheduleConfig::default().build()?;
    let plan = DdimPlan::new(20, sched.steps())?;
    println!("d(1..=20) = {:?}", plan.steps());
    for tau in [0.1, 0.5, 0.6, 1.0] {
        let level = plan.noise_level_to_step(tau)?;
        println!(
            "tau {tau}: corrupt to t = {} (alpha_bar {:.4}), then {} reverse steps",
            level.t_noise,
            sched.alpha_bar(level.t_noise),
            level.start_index
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = DenoiserConfig::default();
    let params = DenoiserParams::init(cfg, &mut rng)?;
    let model = Denoiser::new(&params, None)?;
    let guidance = GuidanceConfig::default();

    let video = LatentVideo::randn(cfg.video, &mut rng);
    let eps = LatentVideo::randn(cfg.video, &mut rng);
    let noisy = q_sample(&video, 551, &eps, &sched)?;
    let (_, std) = mean_std(noisy.data());
    println!(
        "q_sample at t = 551 scales the signal by {:.3}; the noisy video has std {std:.3}",
        sched.alpha_bar(551).sqrt()
    );

    model.reset_calls();
    let full = sample_full(&model, Condition(1), &sched, &plan, &guidance, 7)?;
    let full_calls = model.calls();
    model.reset_calls();
    let edited = edit_sample(&model, &video, Condition(1), 0.6, &sched, &plan, &guidance, 7)?;
    println!(
        "full sample: {full_calls} denoiser calls; edit at tau 0.6: {} calls",
        model.calls()
    );
    println!(
        "outputs finite: {} {}",
        full.tensor().is_finite(),
        edited.tensor().is_finite()
    );

    let coarse = DdimPlan::new(50, sched.steps())?;
    model.reset_calls();
    sample_full(&model, Condition(1), &sched, &coarse, &guidance, 7)?;
    println!("the same weights at D = 50: {} calls", model.calls());
    Ok(())
}
