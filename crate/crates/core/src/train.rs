//! Episodic meta-training, the Adam optimizer, and a central-difference
//! gradient checker.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datasets::{Dataset, Split};
use crate::episodes::{sample_episode, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{episode_graph, LossKind};
use crate::model::ModelParams;
use crate::numeric::{Tape, Tensor, Var};
use crate::semantics::SemanticStore;

/// ChaCha stream ids derived from the run seed.
const INIT_STREAM: u64 = 0;
const EPISODE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let decay = |b: f64| (0.0..1.0).contains(&b);
        if !self.learning_rate.is_finite()
            || self.learning_rate < 0.0
            || !decay(self.beta1)
            || !decay(self.beta2)
            || !self.epsilon.is_finite()
            || self.epsilon <= 0.0
        {
            return Err(Error::Config(format!(
                "adam needs learning_rate >= 0, decay rates in [0, 1) and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub adam: AdamConfig,
    /// Validate every this many episodes; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            adam: AdamConfig::default(),
            val_every: 100,
            val_episodes: 50,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.len())
            .collect();
        Self {
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `theta` at step `t` (1-based).
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &AdamConfig,
) {
    let c1 = 1.0 - hyper.beta1.powi(t as i32);
    let c2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// Applies one Adam step to every trainable tensor using its stored gradient.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    hyper: &AdamConfig,
) -> Result<()> {
    let tensors = params.named_tensors_mut();
    if tensors.len() != state.first.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, model has {}",
            state.first.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    for (((name, t), m), v) in tensors
        .into_iter()
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        if m.len() != t.len() {
            return Err(Error::InvalidArgument(format!(
                "{name}: moment buffer has {} entries, tensor has {}",
                m.len(),
                t.len()
            )));
        }
        if let Some((theta, grad)) = t.split_grad_mut() {
            adam_update(theta, grad, m, v, state.step, hyper);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub episode: usize,
    pub loss: f64,
    /// Validation accuracy in percent, when measured after this episode.
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,loss,val_acc\n");
        for r in &self.records {
            let acc = r.val_acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{acc}", r.episode, r.loss).unwrap();
        }
        s
    }

    /// Mean loss over the first and the last `window` episodes.
    pub fn loss_trend(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |r: &[TrainRecord]| r.iter().map(|r| r.loss).sum::<f64>() / r.len() as f64;
        Some((
            mean(&self.records[..window]),
            mean(&self.records[n - window..]),
        ))
    }
}

/// Fresh parameters for a run, drawn from the run seed.
pub fn init_params(cfg: &RunConfig, d_x: usize) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    ModelParams::init(&cfg.model, &cfg.loss, d_x, cfg.episode.way, &mut rng)
}

/// Runs `cfg.train.episodes` iterations of sample → loss → backward → Adam
/// step, starting from [`init_params`].
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    store: &SemanticStore,
) -> Result<(ModelParams, TrainLog)> {
    let params = init_params(cfg, ds.d_x())?;
    train_from(cfg, params, ds, store)
}

pub fn train_from(
    cfg: &RunConfig,
    mut params: ModelParams,
    ds: &Dataset,
    store: &SemanticStore,
) -> Result<(ModelParams, TrainLog)> {
    let kind = cfg.loss.kind()?;
    let hyper = cfg.train.adam;
    hyper.validate()?;
    cfg.episode.validate()?;
    let val_cfg = EpisodeConfig {
        split: Split::Val,
        ..cfg.episode
    };

    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EPISODE_STREAM);
    let mut log = TrainLog::default();
    for e in 0..cfg.train.episodes {
        let episode = sample_episode(ds, &cfg.episode, &mut rng)?;
        let mut graph = episode_graph(kind, &episode, ds, &params, store)?;
        let loss = graph.loss();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                episode: e,
                norms: params.norms_summary(),
            });
        }
        graph.tape.backward(graph.total)?;
        params.zero_grad();
        params.accumulate_grads(&graph.tape, &graph.bound);
        adam_step(&mut state, &mut params, &hyper)?;

        let val_acc = if cfg.train.val_every > 0 && (e + 1) % cfg.train.val_every == 0 {
            let seed = cfg.seed.wrapping_add(e as u64 + 1);
            Some(evaluate(&params, ds, &val_cfg, cfg.train.val_episodes, seed)?.mean)
        } else {
            None
        };
        log.records.push(TrainRecord {
            episode: e,
            loss,
            val_acc,
        });
    }
    params.zero_grad();
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Central-difference step `h`.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Queries per class of the checked episode.
    pub query: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            query: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `name[index]` of the scalar with the largest relative error.
    pub worst: String,
    pub checked: usize,
    /// Scalars whose ±h probes changed the relu activation pattern.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_table(&self) -> String {
        format!(
            "checked       {}\nskipped       {}\nmax_rel_err   {:.3e}\nmax_abs_err   {:.3e}\nworst         {}\ntolerance     {:.1e}\nresult        {}\n",
            self.checked,
            self.skipped,
            self.max_rel_err,
            self.max_abs_err,
            self.worst,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Compares tape gradients with central differences for every trainable
/// scalar in `tensors`.
///
/// `build` evaluates the scalar function at the given parameter values and
/// returns its tape, root, and the leaf handle of each tensor. Probes whose
/// relu pattern differs from the unperturbed pass straddle a kink and are
/// skipped.
pub fn check_gradients<F>(
    tensors: &[(String, Tensor)],
    cfg: &GradcheckConfig,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<(Tape, Var, Vec<Var>)>,
{
    if !cfg.step.is_finite() || cfg.step <= 0.0 {
        return Err(Error::Config(format!(
            "gradcheck step must be positive, got {}",
            cfg.step
        )));
    }
    let mut values: Vec<Tensor> = tensors.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, root, vars) = build(&values)?;
    tape.backward(root)?;
    let pattern = tape.relu_pattern();
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect();

    let probe = |values: &[Tensor]| -> Result<(f64, bool)> {
        let (tape, root, _) = build(values)?;
        Ok((tape.scalar(root), tape.relu_pattern() == pattern))
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (i, (name, _)) in tensors.iter().enumerate() {
        let Some(grad) = &analytic[i] else { continue };
        for (j, &g) in grad.iter().enumerate() {
            let x = values[i].values()[j];
            values[i].values_mut()[j] = x + cfg.step;
            let (plus, same_plus) = probe(&values)?;
            values[i].values_mut()[j] = x - cfg.step;
            let (minus, same_minus) = probe(&values)?;
            values[i].values_mut()[j] = x;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let abs = (g - numeric).abs();
            let rel = abs / g.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = format!("{name}[{j}]");
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// Gradient check of one episode loss over every trainable model tensor.
pub fn gradcheck(
    kind: LossKind,
    episode: &Episode,
    ds: &Dataset,
    params: &ModelParams,
    store: &SemanticStore,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let named: Vec<(String, Tensor)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    check_gradients(&named, cfg, |values| {
        let mut p = params.clone();
        for ((_, dst), src) in p.named_tensors_mut().into_iter().zip(values) {
            dst.values_mut().copy_from_slice(src.values());
        }
        let g = episode_graph(kind, episode, ds, &p, store)?;
        Ok((g.tape, g.total, g.bound.vars))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let hyper = AdamConfig::default();
        let mut theta = vec![0.3, -1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=5 {
            adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, t, &hyper);
        }
        assert_eq!(theta, vec![0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = AdamConfig::default();
        for g in [0.5, -3.0, 1e-2] {
            let mut theta = vec![1.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_update(&mut theta, &[g], &mut m, &mut v, 1, &hyper);
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
            let want = 1.0 - hyper.learning_rate * g / (g.abs() + hyper.epsilon);
            assert!((theta[0] - want).abs() < 1e-15);
            assert!(((1.0 - theta[0]).abs() - hyper.learning_rate).abs() < 1e-8);
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let hyper = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.8,
            beta2: 0.95,
            epsilon: 1e-6,
        };
        let grads = [0.4, -0.1, 0.25, 0.0, 1.5, -2.0, 0.3, 0.3, -0.05, 0.9];
        let mut theta = vec![0.7];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let (mut x, mut m1, mut m2) = (0.7f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_update(&mut theta, &[g], &mut m, &mut v, t as u64 + 1, &hyper);
            m1 = 0.8 * m1 + 0.2 * g;
            m2 = 0.95 * m2 + 0.05 * g * g;
            let k = t as i32 + 1;
            x -= 0.01 * (m1 / (1.0 - 0.8f64.powi(k)))
                / ((m2 / (1.0 - 0.95f64.powi(k))).sqrt() + 1e-6);
        }
        assert!((theta[0] - x).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        for bad in [
            AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
            AdamConfig {
                learning_rate: -1e-3,
                ..AdamConfig::default()
            },
            AdamConfig {
                epsilon: 0.0,
                ..AdamConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn quadratic(values: &[Tensor], detach: bool) -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let w = tape.bind(&values[0]);
        let other = if detach { tape.detach(w) } else { w };
        let sq = tape.mul(w, other)?;
        let root = tape.sum(sq);
        Ok((tape, root, vec![w]))
    }

    #[test]
    fn corrupted_adjoint_is_reported() {
        let w = Tensor::vector(vec![0.5, -1.5, 2.0]).trainable();
        let named = vec![("w".to_string(), w)];
        let cfg = GradcheckConfig::default();
        let good = check_gradients(&named, &cfg, |v| quadratic(v, false)).unwrap();
        assert!(good.passed && good.max_rel_err < 1e-9, "{good:?}");
        let bad = check_gradients(&named, &cfg, |v| quadratic(v, true)).unwrap();
        assert!(!bad.passed);
        assert!(bad.max_rel_err > 0.4, "{bad:?}");
        assert!(bad.worst.starts_with("w["));
    }
}
