//! Margin-free meta-testing and generalized few-shot evaluation.
//!
//! The test-time classifier never looks at margins or semantic vectors: a
//! query is assigned to the class whose representation scores highest under
//! the metric module.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, Dataset, Split};
use crate::episodes::{sample_episode, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::model::{prototypes_on, sample_matrix, Metric, ModelParams};
use crate::numeric::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Shot sweep of the generalized evaluation.
    pub gfsl_shots: Vec<usize>,
    /// Held-out queries per class in the generalized evaluation.
    pub gfsl_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            way: 5,
            shot: 1,
            query: 15,
            gfsl_shots: vec![1, 2, 5, 10, 20],
            gfsl_queries: 15,
        }
    }
}

impl EvalConfig {
    /// Episode shape on the novel split.
    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig::new(self.way, self.shot, self.query, Split::Novel)
    }
}

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    /// Builds a report from per-episode accuracies given as fractions.
    /// `ci95 = 1.96·sd/√n` with the `n − 1` sample standard deviation.
    pub fn from_accuracies(accuracies: &[f64]) -> Result<Self> {
        let n = accuracies.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no episodes to report".into()));
        }
        let per_episode: Vec<f64> = accuracies.iter().map(|a| a * 100.0).collect();
        let mean = per_episode.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Ok(Self {
            mean,
            ci95,
            n_episodes: n,
            per_episode,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "n_episodes,mean,ci95\n{},{},{}\n",
            self.n_episodes, self.mean, self.ci95
        )
    }

    pub fn to_table(&self) -> String {
        format!(
            "episodes  {:>8}\naccuracy  {:>8.2}\nci95      {:>8.2}\n",
            self.n_episodes, self.mean, self.ci95
        )
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Predicted episode label of every query, by nearest prototype.
pub fn predict(params: &ModelParams, ds: &Dataset, episode: &Episode) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let embed = params.embed.bind(&mut tape, &mut vars);
    let gamma = params.metric.bind(&mut tape, &mut vars);
    let n_support = episode.support.len();
    let indices: Vec<usize> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|i| i.sample)
        .collect();
    let x = sample_matrix(&mut tape, ds, &indices)?;
    let z = embed.forward(&mut tape, x)?;
    let zs = tape.gather_rows(z, &(0..n_support).collect::<Vec<_>>())?;
    let zq = tape.gather_rows(z, &(n_support..indices.len()).collect::<Vec<_>>())?;
    let r = prototypes_on(&mut tape, zs, episode.way(), episode.shot)?;
    let logits = params.metric.logits(&mut tape, gamma, zq, r)?;
    let way = episode.way();
    Ok(tape.value(logits).chunks(way).map(argmax).collect())
}

/// Fraction of queries classified correctly.
pub fn episode_accuracy(params: &ModelParams, ds: &Dataset, episode: &Episode) -> Result<f64> {
    let pred = predict(params, ds, episode)?;
    let correct = pred
        .iter()
        .zip(&episode.query)
        .filter(|(p, q)| **p == q.label)
        .count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Episode `i` of an evaluation run draws from its own ChaCha stream, so the
/// result does not depend on how episodes are scheduled across threads.
pub fn evaluation_episode(
    ds: &Dataset,
    cfg: &EpisodeConfig,
    seed: u64,
    index: usize,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_episode(ds, cfg, &mut rng)
}

pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &EpisodeConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let accuracies = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let episode = evaluation_episode(ds, cfg, seed, i)?;
            episode_accuracy(params, ds, &episode)
        })
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_accuracies(&accuracies)
}

/// Generalized evaluation at one shot count. Accuracies in percent;
/// `novel_accuracy` is `None` when the dataset has no novel classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfslReport {
    pub shot: usize,
    pub novel_accuracy: Option<f64>,
    pub all_accuracy: f64,
    pub novel_queries: usize,
    pub all_queries: usize,
}

fn metric_scores(metric: &Metric, queries: &Tensor, reps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gamma = metric.bind(&mut tape, &mut Vec::new());
    let q = tape.constant(queries);
    let r = tape.constant(reps);
    let l = metric.logits(&mut tape, gamma, q, r)?;
    Ok(tape.to_tensor(l))
}

fn mean_rows(emb: &Tensor, rows: &[usize]) -> Vec<f64> {
    let d = emb.shape()[1];
    let mut out = vec![0.0; d];
    for &i in rows {
        for (o, v) in out.iter_mut().zip(emb.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

struct HeldOut {
    queries: Vec<usize>,
    rest: Vec<usize>,
}

fn hold_out(
    ds: &Dataset,
    classes: &[ClassId],
    queries: usize,
    min_rest: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<HeldOut>> {
    classes
        .iter()
        .map(|&class| {
            let mut members = ds.samples_of(class).to_vec();
            if members.len() < queries + min_rest {
                return Err(Error::Insufficient {
                    what: format!("class `{}` samples", ds.class_name(class)),
                    required: queries + min_rest,
                    available: members.len(),
                });
            }
            members.shuffle(rng);
            let rest = members.split_off(queries);
            Ok(HeldOut {
                queries: members,
                rest,
            })
        })
        .collect()
}

/// Runs the joint base ∪ novel evaluation for every shot in `shots`.
///
/// Each base class holds out `queries` samples and is represented by the
/// mean embedding of all its remaining samples. Each novel class holds out
/// `queries` samples and is represented by the mean of the first `n_s` of
/// its remaining samples; the held-out split is drawn once, so supports are
/// nested across the sweep.
pub fn evaluate_generalized_sweep(
    params: &ModelParams,
    ds: &Dataset,
    shots: &[usize],
    queries: usize,
    seed: u64,
) -> Result<Vec<GfslReport>> {
    if queries == 0 || shots.contains(&0) {
        return Err(Error::Config(
            "generalized evaluation needs at least one query and one shot".into(),
        ));
    }
    let max_shot = shots.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = hold_out(ds, &ds.classes_in(Split::Base), queries, 1, &mut rng)?;
    let novel = hold_out(
        ds,
        &ds.classes_in(Split::Novel),
        queries,
        max_shot,
        &mut rng,
    )?;
    if base.is_empty() && novel.is_empty() {
        return Err(Error::Data("no base or novel classes to evaluate".into()));
    }

    let all: Vec<usize> = (0..ds.samples().len()).collect();
    let emb = params.embed.embed_samples(ds, &all)?;
    let d = emb.shape()[1];

    let base_reps: Vec<Vec<f64>> = base.iter().map(|h| mean_rows(&emb, &h.rest)).collect();
    let mut query_rows = Vec::new();
    let mut query_labels = Vec::new();
    for (label, h) in base.iter().chain(&novel).enumerate() {
        for &i in &h.queries {
            query_rows.extend_from_slice(emb.row(i));
            query_labels.push(label);
        }
    }
    let n_base_queries = base.iter().map(|h| h.queries.len()).sum::<usize>();
    let q = Tensor::new(vec![query_labels.len(), d], query_rows)?;
    let n_labels = base.len() + novel.len();

    shots
        .iter()
        .map(|&shot| {
            let mut reps = Vec::with_capacity(n_labels * d);
            for r in &base_reps {
                reps.extend_from_slice(r);
            }
            for h in &novel {
                reps.extend(mean_rows(&emb, &h.rest[..shot]));
            }
            let reps = Tensor::new(vec![n_labels, d], reps)?;
            let scores = metric_scores(&params.metric, &q, &reps)?;
            let hits: Vec<bool> = scores
                .values()
                .chunks(n_labels)
                .zip(&query_labels)
                .map(|(row, &y)| argmax(row) == y)
                .collect();
            let pct = |h: &[bool]| 100.0 * h.iter().filter(|&&b| b).count() as f64 / h.len() as f64;
            let novel_hits = &hits[n_base_queries..];
            Ok(GfslReport {
                shot,
                novel_accuracy: (!novel_hits.is_empty()).then(|| pct(novel_hits)),
                all_accuracy: pct(&hits),
                novel_queries: novel_hits.len(),
                all_queries: hits.len(),
            })
        })
        .collect()
}

pub fn evaluate_generalized(
    params: &ModelParams,
    ds: &Dataset,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<GfslReport> {
    let mut out = evaluate_generalized_sweep(params, ds, &[shot], queries, seed)?;
    Ok(out.remove(0))
}

pub fn gfsl_csv(reports: &[GfslReport]) -> String {
    let mut s = String::from("shot,novel_accuracy,all_accuracy,novel_queries,all_queries\n");
    for r in reports {
        let novel = r.novel_accuracy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{novel},{},{},{}",
            r.shot, r.all_accuracy, r.novel_queries, r.all_queries
        )
        .unwrap();
    }
    s
}

pub fn gfsl_table(reports: &[GfslReport]) -> String {
    let mut s = format!("{:>5}  {:>8}  {:>8}\n", "shot", "novel", "all");
    for r in reports {
        let novel = r
            .novel_accuracy
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".into());
        writeln!(s, "{:>5}  {:>8}  {:>8.2}", r.shot, novel, r.all_accuracy).unwrap();
    }
    s
}
