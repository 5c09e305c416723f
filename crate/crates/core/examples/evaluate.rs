//! Margin-free meta-testing: 600 novel-class 5-way 1-shot episodes before
//! and after a short round of training, reported with 95% intervals.

use margin_fsl::config::RunConfig;
use margin_fsl::eval::evaluate;
use margin_fsl::train::{init_params, train};

fn main() -> margin_fsl::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.episodes = 500;
    cfg.train.val_every = 0;
    let (ds, store) = cfg.load_data()?;
    let episode = cfg.eval.episode();

    let untrained = init_params(&cfg, ds.d_x())?;
    let before = evaluate(&untrained, &ds, &episode, cfg.eval.episodes, 11)?;
    let (params, _) = train(&cfg, &ds, &store)?;
    let after = evaluate(&params, &ds, &episode, cfg.eval.episodes, 11)?;

    println!("untrained: {:.2} ± {:.2}", before.mean, before.ci95);
    println!("trained:   {:.2} ± {:.2}", after.mean, after.ci95);
    print!("\n{}", after.to_table());
    Ok(())
}
