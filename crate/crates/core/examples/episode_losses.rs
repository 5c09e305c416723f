//! Evaluates the plain, naive, class-relevant and task-relevant losses on
//! one episode and cross-checks each against the scalar-loop oracle.

use margin_fsl::losses::{episode_loss, margined_loss, plain_loss};
use margin_fsl::oracle::{oracle_episode_loss, TinyCase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> margin_fsl::Result<()> {
    let t = plain_loss(&[0.0, -4.0], 0)?;
    println!("plain    [0, -4] -> p = {:.6}, loss = {:.6}", t.p, t.loss);
    let t = margined_loss(&[0.0, -4.0], 0, &[1.0])?;
    println!("margin 1 [0, -4] -> p = {:.6}, loss = {:.6}\n", t.p, t.loss);

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let case = TinyCase::random(&mut rng)?;
    println!(
        "{}-way {}-shot episode, {} queries",
        case.episode.way(),
        case.episode.shot,
        case.episode.query.len()
    );
    for kind in case.kinds() {
        let report = episode_loss(kind, &case.episode, &case.ds, &case.params, &case.store)?;
        let oracle = oracle_episode_loss(kind, &case.episode, &case.ds, &case.params, &case.store)?;
        let p: Vec<String> = report
            .per_query
            .iter()
            .map(|q| format!("{:.3}", q.p))
            .collect();
        println!(
            "{:>15}: total {:.6}  oracle {:.6}  p_y {:?}",
            kind.name(),
            report.total,
            oracle.total,
            p
        );
    }
    Ok(())
}
