use margin_fsl::datasets::{generate_blobs, BlobSpec, Dataset, Split};
use margin_fsl::episodes::Episode;
use margin_fsl::episodes::{sample_episode, EpisodeConfig};
use margin_fsl::losses::{episode_loss, margined_loss, plain_loss, LossConfig, LossKind, LossName};
use margin_fsl::model::{ModelConfig, ModelParams};
use margin_fsl::numeric::{Tape, Tensor};
use margin_fsl::semantics::{ClassRelevantGenerator, SemanticStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn case() -> impl Strategy<Value = (Vec<f64>, usize, Vec<f64>)> {
    (2usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            0..n,
            prop::collection::vec(-1.0f64..2.0, n - 1),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn raising_a_margin_raises_the_loss((logits, y, margins) in case(), k in 0usize..6) {
        let k = k % margins.len();
        let base = margined_loss(&logits, y, &margins).unwrap();
        let mut up = margins.clone();
        up[k] += 0.1;
        prop_assert!(margined_loss(&logits, y, &up).unwrap().loss > base.loss);
    }

    #[test]
    fn naive_margin_never_lowers_the_loss((logits, y, _) in case(), m in 0.0f64..3.0) {
        let plain = plain_loss(&logits, y).unwrap();
        let naive = margined_loss(&logits, y, &vec![m; logits.len() - 1]).unwrap();
        if m == 0.0 {
            prop_assert_eq!(naive, plain);
        } else {
            prop_assert!(naive.loss > plain.loss);
        }
    }

    #[test]
    fn uniform_margin_is_a_target_shift((logits, y, _) in case(), m in -2.0f64..2.0) {
        let a = margined_loss(&logits, y, &vec![m; logits.len() - 1]).unwrap();
        let mut shifted = logits.clone();
        shifted[y] -= m;
        let b = plain_loss(&shifted, y).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12);
        prop_assert!((a.p - b.p).abs() <= 1e-12);
    }

    #[test]
    fn common_logit_shift_is_invisible((logits, y, margins) in case(), c in -50.0f64..50.0) {
        let a = margined_loss(&logits, y, &margins).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let b = margined_loss(&shifted, y, &margins).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12);
        prop_assert!((a.p - b.p).abs() <= 1e-12);
    }

    #[test]
    fn loss_gradient_in_each_margin_is_positive((logits, y, margins) in case()) {
        let n = logits.len();
        let mut full = vec![0.0; n];
        let mut it = margins.iter();
        for (k, f) in full.iter_mut().enumerate() {
            if k != y {
                *f = *it.next().unwrap();
            }
        }
        let mut tape = Tape::new();
        let l = tape.constant(&Tensor::new(vec![1, n], logits).unwrap());
        let m = tape.param(&Tensor::new(vec![1, n], full).unwrap());
        let xent = tape.margin_xent(l, Some(m), &[y]).unwrap();
        let total = tape.sum(xent);
        tape.backward(total).unwrap();
        for (k, g) in tape.grad(m).unwrap().iter().enumerate() {
            if k != y {
                prop_assert!(*g > 0.0, "d loss / d m[{k}] = {g}");
            }
        }
    }

    #[test]
    fn class_relevant_margin_gradients(
        sims in prop::collection::vec(-1.0f64..1.0, 9),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
        target in 0usize..3,
        competitor in 0usize..3,
    ) {
        prop_assume!(target != competitor);
        let s = Tensor::new(vec![3, 3], sims.clone()).unwrap();
        let gen = ClassRelevantGenerator::new(alpha, beta);
        let mut tape = Tape::new();
        let bound = gen.bind(&mut tape, &mut Vec::new());
        let m = bound.margins(&mut tape, &s).unwrap();
        let one_hot = {
            let mut v = vec![0.0; 9];
            v[target * 3 + competitor] = 1.0;
            tape.constant_from(vec![3, 3], v).unwrap()
        };
        let picked = tape.mul(m, one_hot).unwrap();
        let root = tape.sum(picked);
        prop_assert!((tape.scalar(root) - (alpha * sims[target * 3 + competitor] + beta)).abs() < 1e-15);
        tape.backward(root).unwrap();
        prop_assert_eq!(tape.grad(bound.alpha).unwrap()[0], sims[target * 3 + competitor]);
        prop_assert_eq!(tape.grad(bound.beta).unwrap()[0], 1.0);
    }
}

fn episode_setup(seed: u64) -> (Dataset, SemanticStore, Episode) {
    let (ds, store) = generate_blobs(&BlobSpec::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = sample_episode(&ds, &EpisodeConfig::new(5, 2, 3, Split::Base), &mut rng).unwrap();
    (ds, store, ep)
}

fn params(kind: LossName, d_x: usize, seed: u64) -> ModelParams {
    let model = ModelConfig {
        widths: vec![16, 8],
        ..ModelConfig::default()
    };
    ModelParams::init(
        &model,
        &LossConfig::with_kind(kind),
        d_x,
        5,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

#[test]
fn episode_total_is_mean_of_query_terms() {
    for seed in 0..5 {
        let (ds, store, ep) = episode_setup(seed);
        let p = params(LossName::Plain, ds.d_x(), seed);
        for kind in [LossKind::Plain, LossKind::Naive { margin: 0.7 }] {
            let r = episode_loss(kind, &ep, &ds, &p, &store).unwrap();
            assert_eq!(r.per_query.len(), ep.query.len());
            let mean = r.per_query.iter().map(|q| q.loss).sum::<f64>() / r.per_query.len() as f64;
            assert!((mean - r.total).abs() < 1e-12);
            for q in &r.per_query {
                assert!((q.p - (-q.loss).exp()).abs() < 1e-15 && q.p > 0.0 && q.p <= 1.0);
            }
        }
    }
}

#[test]
fn episode_losses_order_with_margin() {
    let (ds, store, ep) = episode_setup(3);
    let p = params(LossName::Plain, ds.d_x(), 3);
    let plain = episode_loss(LossKind::Plain, &ep, &ds, &p, &store)
        .unwrap()
        .total;
    let mut last = plain;
    for m in [0.1, 0.5, 1.0, 2.0] {
        let naive = episode_loss(LossKind::Naive { margin: m }, &ep, &ds, &p, &store)
            .unwrap()
            .total;
        assert!(naive > last, "margin {m}: {naive} <= {last}");
        last = naive;
    }
}

#[test]
fn class_relevant_with_beta_only_matches_naive() {
    let (ds, store, ep) = episode_setup(4);
    let mut p = params(LossName::ClassRelevant, ds.d_x(), 4);
    p.class_gen = Some(ClassRelevantGenerator::new(0.0, 0.35));
    let cr = episode_loss(LossKind::ClassRelevant, &ep, &ds, &p, &store).unwrap();
    let naive = episode_loss(LossKind::Naive { margin: 0.35 }, &ep, &ds, &p, &store).unwrap();
    for (a, b) in cr.per_query.iter().zip(&naive.per_query) {
        assert!((a.loss - b.loss).abs() < 1e-14);
    }
}

#[test]
fn missing_generator_is_a_config_error() {
    let (ds, store, ep) = episode_setup(0);
    let p = params(LossName::Plain, ds.d_x(), 0);
    assert!(episode_loss(LossKind::ClassRelevant, &ep, &ds, &p, &store).is_err());
    assert!(episode_loss(LossKind::TaskRelevant, &ep, &ds, &p, &store).is_err());
}

#[test]
fn negative_naive_margin_is_rejected() {
    let cfg = LossConfig {
        kind: LossName::Naive,
        margin: -0.1,
        ..LossConfig::default()
    };
    assert!(cfg.kind().is_err());
    assert!(margin_fsl::config::RunConfig::from_toml_str(
        "[loss]\nkind = \"naive\"\nmargin = -1.0\n"
    )
    .and_then(|c| c.validate())
    .is_err());
}
