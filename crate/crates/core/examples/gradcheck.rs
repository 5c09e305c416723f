//! Central-difference check of every gradient in the task-relevant and
//! class-relevant pipelines, including a trainable temperature.

use margin_fsl::config::RunConfig;
use margin_fsl::episodes::{sample_episode, EpisodeConfig};
use margin_fsl::losses::LossName;
use margin_fsl::train::{gradcheck, init_params};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> margin_fsl::Result<()> {
    for kind in [LossName::TaskRelevant, LossName::ClassRelevant] {
        let mut cfg = RunConfig::default();
        cfg.loss.kind = kind;
        cfg.model.widths = vec![16, 8];
        cfg.model.train_temperature = true;
        let (ds, store) = cfg.load_data()?;
        let mut params = init_params(&cfg, ds.d_x())?;
        // Move the generators off their zero start so every path carries gradient.
        if let Some(g) = &mut params.class_gen {
            g.alpha.values_mut()[0] = 0.8;
            g.beta.values_mut()[0] = 0.2;
        }
        if let Some(g) = &mut params.task_gen {
            for (i, w) in g.layers[1].weight.values_mut().iter_mut().enumerate() {
                *w = 0.05 * (i % 7) as f64 - 0.15;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let episode = sample_episode(
            &ds,
            &EpisodeConfig {
                query: 2,
                ..cfg.episode
            },
            &mut rng,
        )?;
        let report = gradcheck(
            cfg.loss.kind()?,
            &episode,
            &ds,
            &params,
            &store,
            &cfg.gradcheck,
        )?;
        println!("{kind:?}\n{}", report.to_table());
    }
    Ok(())
}
