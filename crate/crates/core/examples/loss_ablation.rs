//! Trains the same baseline with each loss and compares novel-class
//! accuracy; for the class-relevant loss it also prints the learned α, β.
//!
//!     cargo run --release --example loss_ablation -- [SEED]

use margin_fsl::config::RunConfig;
use margin_fsl::eval::evaluate;
use margin_fsl::losses::LossName;
use margin_fsl::train::train;

fn main() -> margin_fsl::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    println!("{:>15}  {:>8}  {:>6}", "loss", "acc", "ci95");
    for kind in [
        LossName::Plain,
        LossName::Naive,
        LossName::ClassRelevant,
        LossName::TaskRelevant,
    ] {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        cfg.loss.kind = kind;
        cfg.train.val_every = 0;
        let (ds, store) = cfg.load_data()?;
        let (params, _) = train(&cfg, &ds, &store)?;
        let r = evaluate(
            &params,
            &ds,
            &cfg.eval.episode(),
            cfg.eval.episodes,
            seed + 1000,
        )?;
        print!(
            "{:>15}  {:>8.2}  {:>6.2}",
            cfg.loss.kind()?.name(),
            r.mean,
            r.ci95
        );
        if let Some(g) = &params.class_gen {
            print!("   alpha {:+.3}  beta {:+.3}", g.alpha(), g.beta());
        }
        println!();
    }
    Ok(())
}
