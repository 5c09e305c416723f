//! Episode classification losses.
//!
//! All four variants share one kernel: for a query with target `y`, the
//! competitor logits `l_k` (k ≠ y) are shifted by a margin `m_{y,k}` before the
//! softmax, and the loss is `-log p_y`. The variants only differ in where the
//! margins come from: none, a fixed constant, the class-relevant generator,
//! or the task-relevant generator.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{prototypes_on, sample_matrix, BoundParams, ModelParams};
use crate::numeric::{xent_row, Tape, Var};
use crate::semantics::SemanticStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Plain,
    Naive { margin: f64 },
    ClassRelevant,
    TaskRelevant,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Plain => "plain",
            LossKind::Naive { .. } => "naive",
            LossKind::ClassRelevant => "class_relevant",
            LossKind::TaskRelevant => "task_relevant",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    #[default]
    Plain,
    Naive,
    ClassRelevant,
    TaskRelevant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossName,
    /// Fixed margin of the naive loss.
    pub margin: f64,
    /// Hidden width of the task-relevant generator.
    pub generator_hidden: usize,
    pub generator_batch_norm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossName::Plain,
            margin: 0.5,
            generator_hidden: 8,
            generator_batch_norm: false,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossName) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn kind(&self) -> Result<LossKind> {
        Ok(match self.kind {
            LossName::Plain => LossKind::Plain,
            LossName::Naive => {
                if !self.margin.is_finite() || self.margin < 0.0 {
                    return Err(Error::Config(format!(
                        "naive margin must be a nonnegative number, got {}",
                        self.margin
                    )));
                }
                LossKind::Naive {
                    margin: self.margin,
                }
            }
            LossName::ClassRelevant => LossKind::ClassRelevant,
            LossName::TaskRelevant => LossKind::TaskRelevant,
        })
    }
}

/// Target probability and its negative log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerm {
    pub p: f64,
    pub loss: f64,
}

fn check_logits(logits: &[f64], target: usize) -> Result<()> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "loss",
            index: i,
            value: logits[i],
        });
    }
    Ok(())
}

pub fn plain_loss(logits: &[f64], target: usize) -> Result<LossTerm> {
    check_logits(logits, target)?;
    let (loss, p) = xent_row(logits, target, None);
    Ok(LossTerm { p, loss })
}

/// `margins[j]` belongs to the j-th non-target class in position order.
pub fn margined_loss(logits: &[f64], target: usize, margins: &[f64]) -> Result<LossTerm> {
    check_logits(logits, target)?;
    if margins.len() + 1 != logits.len() {
        return Err(Error::ShapeMismatch {
            op: "margined_loss",
            lhs: vec![logits.len() - 1],
            rhs: vec![margins.len()],
        });
    }
    let mut m = margins.iter();
    let row: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            if k == target {
                l
            } else {
                l + m.next().unwrap()
            }
        })
        .collect();
    let (loss, p) = xent_row(&row, target, None);
    Ok(LossTerm { p, loss })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryLoss {
    pub query: usize,
    pub p: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub per_query: Vec<QueryLoss>,
    /// Mean of the per-query terms.
    pub total: f64,
}

/// Forward graph of one episode, kept alive for the backward pass.
pub struct EpisodeGraph {
    pub tape: Tape,
    pub bound: BoundParams,
    pub logits: Var,
    pub margins: Option<Var>,
    pub per_query: Var,
    pub total: Var,
}

impl EpisodeGraph {
    pub fn report(&self) -> LossReport {
        let per_query = self
            .tape
            .value(self.per_query)
            .iter()
            .enumerate()
            .map(|(query, &loss)| QueryLoss {
                query,
                p: (-loss).exp(),
                loss,
            })
            .collect();
        LossReport {
            per_query,
            total: self.tape.scalar(self.total),
        }
    }

    pub fn loss(&self) -> f64 {
        self.tape.scalar(self.total)
    }
}

/// Builds the episode loss graph: embed support and query samples, average
/// support embeddings into prototypes, score queries with the metric, add
/// the kind's margins and average `-log p` over the query set.
pub fn episode_graph(
    kind: LossKind,
    episode: &Episode,
    ds: &Dataset,
    params: &ModelParams,
    store: &SemanticStore,
) -> Result<EpisodeGraph> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let way = episode.way();
    let n_support = episode.support.len();
    let indices: Vec<usize> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|i| i.sample)
        .collect();

    let x = sample_matrix(&mut tape, ds, &indices)?;
    let z = bound.embed.forward(&mut tape, x)?;
    let support_rows: Vec<usize> = (0..n_support).collect();
    let query_rows: Vec<usize> = (n_support..indices.len()).collect();
    let zs = tape.gather_rows(z, &support_rows)?;
    let zq = tape.gather_rows(z, &query_rows)?;
    let protos = prototypes_on(&mut tape, zs, way, episode.shot)?;
    let logits = params.metric.logits(&mut tape, bound.gamma, zq, protos)?;

    let targets = episode.query_labels();
    let margins = match kind {
        LossKind::Plain => None,
        LossKind::Naive { margin } => {
            let mut values = vec![margin; targets.len() * way];
            for (i, &y) in targets.iter().enumerate() {
                values[i * way + y] = 0.0;
            }
            Some(tape.constant_from(vec![targets.len(), way], values)?)
        }
        LossKind::ClassRelevant => {
            let gen = bound.class_gen.ok_or_else(|| {
                Error::Config("class_relevant loss needs the class-relevant generator".into())
            })?;
            let sims = store.similarity_matrix(&episode.classes)?;
            let m = gen.margins(&mut tape, &sims)?;
            Some(tape.gather_rows(m, &targets)?)
        }
        LossKind::TaskRelevant => {
            let gen = bound.task_gen.as_ref().ok_or_else(|| {
                Error::Config("task_relevant loss needs the task-relevant generator".into())
            })?;
            let sims = store.similarity_matrix(&episode.classes)?;
            let m = gen.margins(&mut tape, &sims, &episode.classes)?;
            Some(tape.gather_rows(m, &targets)?)
        }
    };

    let per_query = tape.margin_xent(logits, margins, &targets)?;
    let total = tape.mean(per_query)?;
    Ok(EpisodeGraph {
        tape,
        bound,
        logits,
        margins,
        per_query,
        total,
    })
}

pub fn episode_loss(
    kind: LossKind,
    episode: &Episode,
    ds: &Dataset,
    params: &ModelParams,
    store: &SemanticStore,
) -> Result<LossReport> {
    Ok(episode_graph(kind, episode, ds, params, store)?.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_examples() {
        let t = plain_loss(&[0.0, -4.0], 0).unwrap();
        assert!((t.p - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((t.p - 0.982014).abs() < 1e-6);
        assert!((t.loss - 0.018150).abs() < 1e-6);

        for n in 2..7 {
            let t = plain_loss(&vec![0.3; n], n - 1).unwrap();
            assert!((t.p - 1.0 / n as f64).abs() < 1e-15);
            assert!((t.loss - (n as f64).ln()).abs() < 1e-14);
        }

        let a = plain_loss(&[0.2, -1.0, 3.0], 1).unwrap();
        let b = plain_loss(&[100.2, 99.0, 103.0], 1).unwrap();
        assert!((a.p - b.p).abs() < 1e-12 && (a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn margined_examples() {
        let logits = [0.4, -1.1, 2.0, 0.0];
        for y in 0..4 {
            assert_eq!(
                margined_loss(&logits, y, &[0.0; 3]).unwrap(),
                plain_loss(&logits, y).unwrap()
            );
        }

        let t = margined_loss(&[0.0, -4.0], 0, &[1.0]).unwrap();
        assert!((t.p - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        assert!((t.p - 0.952574).abs() < 1e-6);
        assert!((t.loss - 0.048587).abs() < 1e-6);

        let (n, m) = (5usize, 0.7);
        let t = margined_loss(&[1.5; 5], 2, &[m; 4]).unwrap();
        let want = 1.0 / (1.0 + (n as f64 - 1.0) * f64::exp(m));
        assert!((t.p - want).abs() < 1e-15);
    }

    #[test]
    fn margined_rejects_wrong_length() {
        assert!(margined_loss(&[0.0, 1.0, 2.0], 0, &[0.1]).is_err());
        assert!(plain_loss(&[0.0, f64::NAN], 0).is_err());
        assert!(plain_loss(&[0.0], 3).is_err());
    }

    #[test]
    fn target_shift_identity() {
        let logits = [0.4, -1.1, 2.0, 0.0];
        let m = 0.35;
        for y in 0..4 {
            let a = margined_loss(&logits, y, &[m; 3]).unwrap();
            let mut shifted = logits;
            shifted[y] -= m;
            let b = plain_loss(&shifted, y).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let t = margined_loss(&[700.0, -700.0, 699.0], 2, &[0.5, 0.5]).unwrap();
        assert!(t.loss.is_finite() && t.p > 0.0 && t.p < 1.0);
        let t = plain_loss(&[-700.0, 700.0], 0).unwrap();
        assert!((t.loss - 1400.0).abs() < 1e-9);
    }

    #[test]
    fn naive_margin_must_be_nonnegative() {
        let cfg = LossConfig {
            kind: LossName::Naive,
            margin: -0.1,
            ..LossConfig::default()
        };
        assert!(cfg.kind().is_err());
        let cfg = LossConfig {
            margin: -0.1,
            ..LossConfig::default()
        };
        assert_eq!(cfg.kind().unwrap(), LossKind::Plain);
    }
}
