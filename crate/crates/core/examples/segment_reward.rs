//! Scoring a video: segment sampling picks one frame per segment, the
//! attenuation weights favour the centre frame, and the reward penalizes
//! the watermark the degraded training data carries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtune::denoiser::Condition;
use vidtune::metrics::{temporal_smoothness, watermark_score};
use vidtune::reward::{segvr_sample, tar_coefficients, video_reward, Aggregation, SegPlan};
use vidtune::workbench::{degrade, gen_dataset, DatasetSpec, RewardConfig};

fn main() -> vidtune::Result<()> {
    let spec = DatasetSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = gen_dataset(&spec, &mut rng)?;
    let reward = RewardConfig::default().build(&spec)?;
    println!("{} videos over {} classes, held out {:?}", data.samples.len(), spec.classes, spec.held_out);

    let frames = spec.video.frames;
    for _ in 0..3 {
        let plan = segvr_sample(frames, 4, &mut rng)?;
        let co = tar_coefficients(&plan, 1.0)?;
        let f: Vec<String> = co.f.iter().map(|v| format!("{v:.3}")).collect();
        println!("frames {:?} -> attenuation [{}]", plan.indices, f.join(", "));
    }

    let c = Condition(2);
    let clean = spec.clean_video(c);
    let dirty = degrade(&spec, &clean, &mut rng);
    let starts = SegPlan::segment_starts(frames, 4)?;
    let flat = tar_coefficients(&starts, 0.0)?;
    let tar = tar_coefficients(&starts, 1.0)?;
    let wm = spec.watermark();
    for (name, v) in [("clean", &clean), ("degraded", &dirty)] {
        println!(
            "{name:>8}: mean reward {:.4}, attenuated {:.4}, smoothness {:.3}, watermark {:.4}",
            video_reward(&reward, v, c, &starts, &flat, Aggregation::Mean)?,
            video_reward(&reward, v, c, &starts, &tar, Aggregation::Tar)?,
            temporal_smoothness(v),
            watermark_score(v, &wm)
        );
    }
    let wrong = video_reward(&reward, &clean, Condition(5), &starts, &flat, Aggregation::Mean)?;
    println!("clean video scored against the wrong class: {wrong:.4}");
    Ok(())
}
