//! Generalized few-shot evaluation: queries from base and novel classes are
//! labelled over the union of both, sweeping the novel shot count.

use margin_fsl::config::{DataConfig, RunConfig};
use margin_fsl::datasets::BlobSpec;
use margin_fsl::eval::{evaluate_generalized_sweep, gfsl_table};
use margin_fsl::train::train;

fn main() -> margin_fsl::Result<()> {
    let mut cfg = RunConfig {
        data: DataConfig::Blobs(BlobSpec {
            feature_noise: 1.5,
            ..BlobSpec::default()
        }),
        ..RunConfig::default()
    };
    cfg.train.episodes = 1000;
    cfg.train.val_every = 0;
    let (ds, store) = cfg.load_data()?;
    let (params, _) = train(&cfg, &ds, &store)?;

    let reports = evaluate_generalized_sweep(
        &params,
        &ds,
        &cfg.eval.gfsl_shots,
        cfg.eval.gfsl_queries,
        cfg.seed,
    )?;
    print!("{}", gfsl_table(&reports));
    Ok(())
}
