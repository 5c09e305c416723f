//! Plain-loop recomputation of episode losses, sharing no code with the
//! tape: embeddings, prototypes, similarities, margins and the softmax are
//! all written out as scalar loops over the raw parameter values.

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::datasets::{generate_blobs, BlobSpec, ClassId, Dataset, Split, SplitCounts};
use crate::episodes::{sample_episode, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::losses::{episode_loss, LossConfig, LossKind};
use crate::model::{MetricKind, ModelConfig, ModelParams};
use crate::numeric::Tensor;
use crate::semantics::{ClassRelevantGenerator, SemanticStore, TaskRelevantGenerator};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleLoss {
    pub per_query: Vec<f64>,
    pub total: f64,
}

fn dense(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    let mut y = b.values().to_vec();
    for j in 0..n_out {
        for i in 0..n_in {
            y[j] += x[i] * w.values()[i * n_out + j];
        }
    }
    y
}

fn embed(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let layers = &params.embed.layers;
    let mut h = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        h = dense(&layer.weight, &layer.bias, &h);
        if l + 1 < layers.len() {
            for v in &mut h {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn logit(params: &ModelParams, z: &[f64], r: &[f64]) -> f64 {
    let gamma = params.metric.log_temperature.values()[0].exp();
    match params.metric.kind {
        MetricKind::NegSqEuclidean => {
            let mut d = 0.0;
            for i in 0..z.len() {
                d += (z[i] - r[i]) * (z[i] - r[i]);
            }
            -gamma * d
        }
        MetricKind::Cosine => gamma * cosine(z, r),
    }
}

/// Competitor positions of `y`, by ascending class id (selection by scan).
fn competitors(classes: &[ClassId], y: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..classes.len()).filter(|&k| k != y).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if classes[left[j]].0 < classes[left[best]].0 {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// `G` applied to one input row per target; batch norm, when present,
/// normalizes each column over those rows.
fn generator(gen: &TaskRelevantGenerator, rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let last = gen.layers.len() - 1;
    let mut h = rows;
    for (l, layer) in gen.layers.iter().enumerate() {
        h = h
            .iter()
            .map(|x| dense(&layer.weight, &layer.bias, x))
            .collect();
        if let Some((scale, shift)) = gen.norms.get(l) {
            let n = h.len() as f64;
            for j in 0..h[0].len() {
                let mean = h.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = h.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
                for r in h.iter_mut() {
                    let v =
                        (r[j] - mean) / (var + 1e-5).sqrt() * scale.values()[j] + shift.values()[j];
                    r[j] = v.max(0.0);
                }
            }
        } else if l < last {
            for r in h.iter_mut() {
                for v in r.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }
    h
}

/// `margins[y][k]` for every target/competitor pair of the episode.
fn margin_table(
    kind: LossKind,
    classes: &[ClassId],
    params: &ModelParams,
    store: &SemanticStore,
) -> Result<Vec<Vec<f64>>> {
    let n = classes.len();
    let vec_of = |c: ClassId| {
        store
            .vector(c)
            .ok_or_else(|| Error::MissingClass(format!("{c}")))
    };
    let mut m = vec![vec![0.0; n]; n];
    match kind {
        LossKind::Plain => {}
        LossKind::Naive { margin } => {
            for y in 0..n {
                for k in 0..n {
                    if k != y {
                        m[y][k] = margin;
                    }
                }
            }
        }
        LossKind::ClassRelevant => {
            let g = params
                .class_gen
                .as_ref()
                .ok_or_else(|| Error::Config("missing class-relevant generator".into()))?;
            for y in 0..n {
                for k in 0..n {
                    if k != y {
                        let s = cosine(vec_of(classes[y])?, vec_of(classes[k])?);
                        m[y][k] = g.alpha() * s + g.beta();
                    }
                }
            }
        }
        LossKind::TaskRelevant => {
            let g = params
                .task_gen
                .as_ref()
                .ok_or_else(|| Error::Config("missing task-relevant generator".into()))?;
            let mut rows = Vec::new();
            for y in 0..n {
                let mut row = Vec::new();
                for k in competitors(classes, y) {
                    row.push(cosine(vec_of(classes[y])?, vec_of(classes[k])?));
                }
                rows.push(row);
            }
            let out = generator(g, rows);
            for y in 0..n {
                for (j, k) in competitors(classes, y).into_iter().enumerate() {
                    m[y][k] = out[y][j];
                }
            }
        }
    }
    Ok(m)
}

/// Recomputes the episode loss of `kind` with scalar loops.
///
/// Each query term is evaluated relative to the target logit,
/// `-log p = log(1 + Σ_{k≠y} exp(l_k + m_{y,k} − l_y))`.
pub fn oracle_episode_loss(
    kind: LossKind,
    episode: &Episode,
    ds: &Dataset,
    params: &ModelParams,
    store: &SemanticStore,
) -> Result<OracleLoss> {
    let n = episode.way();
    let d_e = params.embed.d_e();
    let mut protos = vec![vec![0.0; d_e]; n];
    for s in &episode.support {
        let z = embed(params, &ds.sample(s.sample).features);
        for i in 0..d_e {
            protos[s.label][i] += z[i];
        }
    }
    for p in protos.iter_mut() {
        for v in p.iter_mut() {
            *v /= episode.shot as f64;
        }
    }
    let m = margin_table(kind, &episode.classes, params, store)?;

    let mut per_query = Vec::new();
    for q in &episode.query {
        let z = embed(params, &ds.sample(q.sample).features);
        let y = q.label;
        let ly = logit(params, &z, &protos[y]);
        let mut s = 0.0;
        for k in 0..n {
            if k != y {
                s += (logit(params, &z, &protos[k]) + m[y][k] - ly).exp();
            }
        }
        per_query.push(s.ln_1p());
    }
    let total = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(OracleLoss { per_query, total })
}

/// A small random problem with every generator populated, so all four
/// loss kinds can be evaluated on the same parameters.
#[derive(Clone, Debug)]
pub struct TinyCase {
    pub ds: Dataset,
    pub store: SemanticStore,
    pub episode: Episode,
    pub params: ModelParams,
    pub naive_margin: f64,
}

impl TinyCase {
    /// `n_t ≤ 4`, `n_s ≤ 2`, `n_q ≤ 3`, `d_e ≤ 3`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let way = rng.random_range(2..=4);
        let shot = rng.random_range(1..=2);
        let query = rng.random_range(1..=3);
        let spec = BlobSpec {
            split: SplitCounts {
                base: way + rng.random_range(0..=2),
                val: 0,
                novel: 0,
            },
            d_s: rng.random_range(2..=4),
            d_x: rng.random_range(2..=4),
            samples_per_class: shot + query + rng.random_range(0..=2),
            semantic_noise: 0.1,
            feature_noise: 0.5,
            mean_scale: 2.0,
            mixing_seed: rng.random(),
        };
        let (ds, store) = generate_blobs(&spec, rng.random())?;
        let episode = sample_episode(&ds, &EpisodeConfig::new(way, shot, query, Split::Base), rng)?;

        let model = ModelConfig {
            widths: vec![rng.random_range(2..=4), rng.random_range(1..=3)],
            metric: if rng.random_bool(0.5) {
                MetricKind::NegSqEuclidean
            } else {
                MetricKind::Cosine
            },
            temperature: rng.random_range(-1.0f64..1.0).exp(),
            train_temperature: true,
        };
        let mut params = ModelParams::init(&model, &LossConfig::default(), spec.d_x, way, rng)?;
        for layer in &mut params.embed.layers {
            for v in layer.bias.values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let cg =
            ClassRelevantGenerator::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut tg =
            TaskRelevantGenerator::init(way, rng.random_range(2..=4), rng.random_bool(0.3), rng)?;
        let last = tg.layers.last_mut().unwrap();
        for v in last.weight.values_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        for v in last.bias.values_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for (scale, shift) in &mut tg.norms {
            scale
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..1.5));
            shift
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        params.class_gen = Some(cg);
        params.task_gen = Some(tg);
        Ok(Self {
            ds,
            store,
            episode,
            params,
            naive_margin: rng.random_range(0.0..1.0),
        })
    }

    pub fn kinds(&self) -> [LossKind; 4] {
        [
            LossKind::Plain,
            LossKind::Naive {
                margin: self.naive_margin,
            },
            LossKind::ClassRelevant,
            LossKind::TaskRelevant,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSummary {
    pub episodes: usize,
    pub comparisons: usize,
    pub max_rel_err: f64,
    /// Loss kind and episode index of the largest discrepancy.
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Compares engine and oracle, per query and in total, for all four loss
/// kinds over `episodes` random tiny cases.
pub fn run_oracle(episodes: usize, seed: u64, tolerance: f64) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary {
        episodes,
        comparisons: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        tolerance,
        passed: true,
    };
    for e in 0..episodes {
        let case = TinyCase::random(&mut rng)?;
        for kind in case.kinds() {
            let engine = episode_loss(kind, &case.episode, &case.ds, &case.params, &case.store)?;
            let oracle =
                oracle_episode_loss(kind, &case.episode, &case.ds, &case.params, &case.store)?;
            let pairs = engine
                .per_query
                .iter()
                .map(|q| q.loss)
                .zip(oracle.per_query.iter().copied())
                .chain([(engine.total, oracle.total)]);
            for (a, b) in pairs {
                let err = if a.is_finite() && b.is_finite() {
                    rel_err(a, b)
                } else {
                    f64::INFINITY
                };
                summary.comparisons += 1;
                if err > summary.max_rel_err || summary.worst.is_empty() {
                    summary.max_rel_err = summary.max_rel_err.max(err);
                    summary.worst = format!("{} (episode {e})", kind.name());
                }
            }
        }
    }
    summary.passed = summary.max_rel_err <= tolerance;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::competitor_order;

    #[test]
    fn competitor_scan_matches_sort() {
        let classes = [ClassId(7), ClassId(2), ClassId(9), ClassId(4)];
        for y in 0..4 {
            assert_eq!(competitors(&classes, y), competitor_order(&classes, y));
        }
    }

    #[test]
    fn engine_agrees_on_random_cases() {
        let s = run_oracle(25, 11, 1e-10).unwrap();
        assert!(s.passed, "{s:?}");
        assert!(s.comparisons > 100);
    }
}
