//! One step of each reward fine-tuning algorithm from the same adapter:
//! denoiser calls, loss, and how much of the tape the gradient reaches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtune::denoiser::{Condition, Denoiser, DenoiserConfig, DenoiserParams, LoraAdapter, LoraConfig};
use vidtune::finetune::*;
use vidtune::schedule::DdimPlan;
use vidtune::workbench::{gen_dataset, DatasetSpec, RewardConfig};

fn main() -> vidtune::Result<()> {
    let spec = DatasetSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = gen_dataset(&spec, &mut rng)?;
    let reward = RewardConfig::default().build(&spec)?;
    let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng)?;
    let adapter = LoraAdapter::init(&params.config, LoraConfig::default(), &mut rng)?;
    let model = Denoiser::new(&params, Some(&adapter))?;

    let cfg = TrainConfig::default();
    let sched = cfg.schedule.build()?;
    let plan = DdimPlan::new(cfg.ddim_steps, sched.steps())?;
    let env = StepEnv {
        cfg: &cfg,
        sched: &sched,
        plan: &plan,
        reward: &reward,
    };
    let batch: Vec<_> = data.fine_tune_split().into_iter().step_by(13).take(cfg.batch_size).collect();
    let conds: Vec<Condition> = batch.iter().map(|b| b.1).collect();

    let objectives = [
        ("edit", edit_objective(&model, &batch, &env, &mut rng)?),
        ("draft1", draft1_objective(&model, &conds, &env, &mut rng)?),
        ("ddpo", ddpo_objective(&model, &conds, &env, &mut rng)?),
    ];
    for (name, obj) in &objectives {
        let (on, off) = (obj.tape.count_marked(DDIM_STEP, true), obj.tape.count_marked(DDIM_STEP, false));
        let terms = obj.tape.count_marked(LOG_DENSITY, true);
        println!(
            "{name:>6}: {:>3} calls, loss {:+.5}, reverse steps on / off the gradient path {on} / {off}, log-density terms {terms}",
            obj.calls,
            obj.loss(),
        );
    }
    let ratio = objectives[0].1.calls as f64 / objectives[1].1.calls as f64;
    println!("edit / draft1 cost ratio {ratio} at tau {}", cfg.tau);

    let mut a = adapter.clone();
    let out = rwr_step(&params, &mut a, &conds, &env, &mut rng)?;
    let w = rwr_weights(&out.rewards, cfg.rwr_beta)?;
    let w: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
    println!("   rwr: {} calls, sample weights [{}]", out.calls, w.join(", "));
    Ok(())
}
