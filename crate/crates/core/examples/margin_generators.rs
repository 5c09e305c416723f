//! Margins produced by the class-relevant (`α·sim + β`) and task-relevant
//! (network over all in-episode similarities) generators for one episode.

use margin_fsl::datasets::{generate_blobs, BlobSpec};
use margin_fsl::episodes::{sample_episode, EpisodeConfig};
use margin_fsl::semantics::{
    class_relevant_margins, competitor_order, task_relevant_margins, ClassRelevantGenerator,
    TaskRelevantGenerator,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> margin_fsl::Result<()> {
    let (ds, store) = generate_blobs(&BlobSpec::default(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let episode = sample_episode(&ds, &EpisodeConfig::default(), &mut rng)?;
    let classes = &episode.classes;
    let names: Vec<&str> = classes.iter().map(|&c| ds.class_name(c)).collect();
    println!("episode classes: {names:?}\n");

    let sims = store.similarity_matrix(classes)?;
    println!("semantic similarity");
    for y in 0..classes.len() {
        println!(
            "  {:?}",
            sims.row(y)
                .iter()
                .map(|v| format!("{v:+.2}"))
                .collect::<Vec<_>>()
        );
    }

    let cr = ClassRelevantGenerator::new(1.0, 0.5);
    let m = class_relevant_margins(&cr, &store, classes)?;
    println!("\nclass-relevant margins, alpha = 1, beta = 0.5");
    for y in 0..classes.len() {
        let row: Vec<String> = (0..classes.len())
            .map(|k| {
                if k == y {
                    "   -".into()
                } else {
                    format!("{:+.2}", m.get(y, k))
                }
            })
            .collect();
        println!("  {row:?}");
    }

    let mut tr = TaskRelevantGenerator::init(classes.len(), 8, false, &mut rng)?;
    let target = classes[0];
    println!(
        "\ntask-relevant margins for {} at init: {:?}",
        ds.class_name(target),
        task_relevant_margins(&tr, &store, classes, target)?
    );
    // Give the zero-initialized output layer some weight to see a response.
    for (i, w) in tr.layers[1].weight.values_mut().iter_mut().enumerate() {
        *w = 0.1 * ((i % 5) as f64 - 2.0);
    }
    let order: Vec<&str> = competitor_order(classes, 0)
        .into_iter()
        .map(|k| names[k])
        .collect();
    println!("competitors in input order: {order:?}");
    println!(
        "task-relevant margins after perturbing the output layer: {:.3?}",
        task_relevant_margins(&tr, &store, classes, target)?
    );
    Ok(())
}
