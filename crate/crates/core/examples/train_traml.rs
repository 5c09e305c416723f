//! Trains a prototypical network with the task-relevant margin loss on
//! semantic blobs, then writes the checkpoint and training log.
//!
//!     cargo run --release --example train_traml -- [OUT_DIR]

use margin_fsl::checkpoint::Checkpoint;
use margin_fsl::config::RunConfig;
use margin_fsl::losses::LossName;
use margin_fsl::train::train;

fn main() -> margin_fsl::Result<()> {
    let mut cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    cfg.loss.kind = LossName::TaskRelevant;
    cfg.train.episodes = 1000;

    let (ds, store) = cfg.load_data()?;
    let (params, log) = train(&cfg, &ds, &store)?;

    for r in log.records.iter().filter(|r| r.val_acc.is_some()) {
        println!(
            "episode {:>5}  loss {:>8.4}  val acc {:>6.2}",
            r.episode + 1,
            r.loss,
            r.val_acc.unwrap()
        );
    }
    let (first, last) = log.loss_trend(100).unwrap();
    println!("mean loss, first 100 episodes {first:.4}, last 100 {last:.4}");

    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("margin-fsl-traml"),
    };
    std::fs::create_dir_all(&dir).expect("create output dir");
    Checkpoint::new(&cfg, &params).save(&dir.join("checkpoint.json"))?;
    std::fs::write(dir.join("train_log.csv"), log.to_csv()).expect("write log");
    println!("checkpoint and log in {}", dir.display());
    Ok(())
}
