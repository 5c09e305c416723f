//! Embedding network, metric module and prototype computation, plus the
//! [`ModelParams`] container that groups every trainable tensor.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::numeric::{Tape, Tensor, Var};
use crate::semantics::{ClassRelevantGenerator, TaskRelevantGenerator};

/// Fully-connected layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, out], [b]) if out == b => Ok(Self { weight, bias }),
            (w, b) => Err(Error::ShapeMismatch {
                op: "dense",
                lhs: w.to_vec(),
                rhs: b.to_vec(),
            }),
        }
    }

    /// He-normal weights, zero bias, both trainable.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::new(vec![inputs, outputs], w).unwrap().trainable(),
            bias: Tensor::zeros(vec![outputs]).trainable(),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![inputs, outputs]).trainable(),
            bias: Tensor::zeros(vec![outputs]).trainable(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> BoundDense {
        let weight = tape.bind(&self.weight);
        let bias = tape.bind(&self.bias);
        vars.extend([weight, bias]);
        BoundDense { weight, bias }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl BoundDense {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

/// MLP embedding `F`: relu between layers, none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct BoundEmbedding {
    layers: Vec<BoundDense>,
}

impl EmbeddingNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config(
                "embedding net needs at least one layer".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::ShapeMismatch {
                    op: "embedding layers",
                    lhs: w[0].weight.shape().to_vec(),
                    rhs: w[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn init<R: Rng + ?Sized>(d_x: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![d_x];
        dims.extend_from_slice(widths);
        let layers = dims
            .windows(2)
            .map(|d| Dense::init(d[0], d[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn d_x(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn d_e(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> BoundEmbedding {
        BoundEmbedding {
            layers: self.layers.iter().map(|l| l.bind(tape, vars)).collect(),
        }
    }

    /// Embeds one feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &mut Vec::new());
        let xv = tape.constant_from(vec![1, x.len()], x.to_vec())?;
        let z = bound.forward(&mut tape, xv)?;
        Ok(tape.value(z).to_vec())
    }

    /// Embeds dataset samples, one output row per index.
    pub fn embed_samples(&self, ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &mut Vec::new());
        let x = sample_matrix(&mut tape, ds, indices)?;
        let z = bound.forward(&mut tape, x)?;
        Ok(tape.to_tensor(z))
    }
}

impl BoundEmbedding {
    /// Forward pass over a batch `x` of shape `n × d_x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d_x = tape.shape(self.layers[0].weight)[0];
        if tape.shape(x).get(1) != Some(&d_x) {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![d_x],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Stacks the feature vectors of `indices` into a constant `n × d_x` node.
pub fn sample_matrix(tape: &mut Tape, ds: &Dataset, indices: &[usize]) -> Result<Var> {
    let mut values = Vec::with_capacity(indices.len() * ds.d_x());
    for &i in indices {
        values.extend_from_slice(&ds.sample(i).features);
    }
    tape.constant_from(vec![indices.len(), ds.d_x()], values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `-γ‖z − r‖²`
    #[default]
    NegSqEuclidean,
    /// `γ⟨z, r⟩ / (‖z‖‖r‖)`
    Cosine,
}

/// Metric module `D` with temperature `γ`, stored as `log γ` so it stays
/// positive when trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub kind: MetricKind,
    pub log_temperature: Tensor,
}

impl Metric {
    pub fn new(kind: MetricKind, temperature: f64, trainable: bool) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let t = Tensor::scalar(temperature.ln());
        Ok(Self {
            kind,
            log_temperature: if trainable { t.trainable() } else { t },
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.values()[0].exp()
    }

    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> Var {
        let v = tape.bind(&self.log_temperature);
        vars.push(v);
        tape.exp(v)
    }

    /// Logit matrix `D(z_q, r_k)` for query rows `z` (q × d) against
    /// prototype rows `r` (k × d).
    pub fn logits(&self, tape: &mut Tape, gamma: Var, z: Var, r: Var) -> Result<Var> {
        match self.kind {
            MetricKind::NegSqEuclidean => {
                let d = tape.sq_dist(z, r)?;
                let scaled = tape.scale(d, gamma)?;
                Ok(tape.neg(scaled))
            }
            MetricKind::Cosine => {
                let zn = tape.normalize_rows(z)?;
                let rn = tape.normalize_rows(r)?;
                let rt = tape.transpose(rn)?;
                let cos = tape.matmul(zn, rt)?;
                tape.scale(cos, gamma)
            }
        }
    }

    /// Similarity of one embedding to one class representation.
    pub fn similarity(&self, z: &[f64], r: &[f64]) -> Result<f64> {
        if z.len() != r.len() {
            return Err(Error::ShapeMismatch {
                op: "similarity",
                lhs: vec![z.len()],
                rhs: vec![r.len()],
            });
        }
        let mut tape = Tape::new();
        let gamma = self.bind(&mut tape, &mut Vec::new());
        let zv = tape.constant_from(vec![1, z.len()], z.to_vec())?;
        let rv = tape.constant_from(vec![1, r.len()], r.to_vec())?;
        let l = self.logits(&mut tape, gamma, zv, rv)?;
        Ok(tape.scalar(l))
    }
}

/// Class representations `r_1..r_{n_t}`, one row per episode class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub reps: Tensor,
}

/// Per-class mean of class-major support rows (`way·shot × d`).
pub fn prototypes_on(tape: &mut Tape, support: Var, way: usize, shot: usize) -> Result<Var> {
    let n = way * shot;
    if tape.shape(support).first() != Some(&n) {
        return Err(Error::ShapeMismatch {
            op: "prototypes",
            lhs: tape.shape(support).to_vec(),
            rhs: vec![n],
        });
    }
    let mut avg = vec![0.0; way * n];
    let w = 1.0 / shot as f64;
    for k in 0..way {
        for j in 0..shot {
            avg[k * n + k * shot + j] = w;
        }
    }
    let avg = tape.constant_from(vec![way, n], avg)?;
    tape.matmul(avg, support)
}

pub fn prototypes(net: &EmbeddingNet, ds: &Dataset, episode: &Episode) -> Result<Prototypes> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, &mut Vec::new());
    let idx: Vec<usize> = episode.support.iter().map(|s| s.sample).collect();
    let x = sample_matrix(&mut tape, ds, &idx)?;
    let z = bound.forward(&mut tape, x)?;
    let r = prototypes_on(&mut tape, z, episode.way(), episode.shot)?;
    Ok(Prototypes {
        reps: tape.to_tensor(r),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output widths of the embedding layers; the last is `d_e`.
    pub widths: Vec<usize>,
    pub metric: MetricKind,
    pub temperature: f64,
    pub train_temperature: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 64],
            metric: MetricKind::NegSqEuclidean,
            temperature: 1.0,
            train_temperature: false,
        }
    }
}

/// Every learnable tensor of a run. Generators are present only for the
/// loss kinds that use them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: EmbeddingNet,
    pub metric: Metric,
    pub class_gen: Option<ClassRelevantGenerator>,
    pub task_gen: Option<TaskRelevantGenerator>,
}

/// Tape handles for one forward pass. `vars` is aligned with
/// [`ModelParams::named_tensors`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub embed: BoundEmbedding,
    pub gamma: Var,
    pub class_gen: Option<crate::semantics::BoundClassRelevant>,
    pub task_gen: Option<crate::semantics::BoundTaskRelevant>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        model: &ModelConfig,
        loss: &LossConfig,
        d_x: usize,
        way: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = EmbeddingNet::init(d_x, &model.widths, rng)?;
        let metric = Metric::new(model.metric, model.temperature, model.train_temperature)?;
        let (class_gen, task_gen) = match loss.kind()? {
            LossKind::ClassRelevant => (Some(ClassRelevantGenerator::new(0.0, 0.0)), None),
            LossKind::TaskRelevant => (
                None,
                Some(TaskRelevantGenerator::init(
                    way,
                    loss.generator_hidden,
                    loss.generator_batch_norm,
                    rng,
                )?),
            ),
            LossKind::Plain | LossKind::Naive { .. } => (None, None),
        };
        Ok(Self {
            embed,
            metric,
            class_gen,
            task_gen,
        })
    }

    /// Stable dotted names, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.embed.layers.iter().enumerate() {
            l.tensors(&format!("embed.layer{i}"), &mut out);
        }
        out.push((
            "metric.log_temperature".into(),
            &self.metric.log_temperature,
        ));
        if let Some(g) = &self.class_gen {
            out.push(("margin.alpha".into(), &g.alpha));
            out.push(("margin.beta".into(), &g.beta));
        }
        if let Some(g) = &self.task_gen {
            for (i, l) in g.layers.iter().enumerate() {
                l.tensors(&format!("margin_gen.layer{i}"), &mut out);
            }
            for (i, (scale, shift)) in g.norms.iter().enumerate() {
                out.push((format!("margin_gen.norm{i}.scale"), scale));
                out.push((format!("margin_gen.norm{i}.shift"), shift));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.embed.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("embed.layer{i}"), &mut out);
        }
        out.push((
            "metric.log_temperature".into(),
            &mut self.metric.log_temperature,
        ));
        if let Some(g) = &mut self.class_gen {
            out.push(("margin.alpha".into(), &mut g.alpha));
            out.push(("margin.beta".into(), &mut g.beta));
        }
        if let Some(g) = &mut self.task_gen {
            for (i, l) in g.layers.iter_mut().enumerate() {
                l.tensors_mut(&format!("margin_gen.layer{i}"), &mut out);
            }
            for (i, (scale, shift)) in g.norms.iter_mut().enumerate() {
                out.push((format!("margin_gen.norm{i}.scale"), scale));
                out.push((format!("margin_gen.norm{i}.shift"), shift));
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = Vec::new();
        let embed = self.embed.bind(tape, &mut vars);
        let gamma = self.metric.bind(tape, &mut vars);
        let class_gen = self.class_gen.as_ref().map(|g| g.bind(tape, &mut vars));
        let task_gen = self.task_gen.as_ref().map(|g| g.bind(tape, &mut vars));
        BoundParams {
            vars,
            embed,
            gamma,
            class_gen,
            task_gen,
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Adds the tape's leaf gradients into each trainable tensor's slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for ((_, t), v) in self.named_tensors_mut().into_iter().zip(&bound.vars) {
            tape.accumulate_into(*v, t);
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// `name=norm` pairs, used in divergence diagnostics.
    pub fn norms_summary(&self) -> String {
        self.named_tensors()
            .iter()
            .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_embeds_to_zero() {
        let net = EmbeddingNet::new(vec![Dense::zeros(3, 4), Dense::zeros(4, 2)]).unwrap();
        assert_eq!(net.embed(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_embeds_to_input() {
        let w = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let net = EmbeddingNet::new(vec![Dense::new(w, Tensor::zeros(vec![3])).unwrap()]).unwrap();
        assert_eq!(net.embed(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
        assert!(net.embed(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn random_net_matches_manual_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = EmbeddingNet::init(3, &[5, 2], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let layer = |l: &Dense, x: &[f64], relu: bool| -> Vec<f64> {
            let (i, o) = (l.inputs(), l.outputs());
            (0..o)
                .map(|j| {
                    let mut s = l.bias.values()[j];
                    for (k, xk) in x.iter().enumerate().take(i) {
                        s += xk * l.weight.values()[k * o + j];
                    }
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h = layer(&net.layers[0], &x, true);
        let want = layer(&net.layers[1], &h, false);
        let got = net.embed(&x).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_examples() {
        let euc = Metric::new(MetricKind::NegSqEuclidean, 1.0, false).unwrap();
        let cos = Metric::new(MetricKind::Cosine, 2.5, false).unwrap();
        let z = [0.3, -1.2, 0.4];
        assert_eq!(euc.similarity(&z, &z).unwrap(), 0.0);
        assert!((cos.similarity(&z, &z).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(euc.similarity(&[0.0, 0.0], &[2.0, 0.0]).unwrap(), -4.0);
        assert!(cos.similarity(&[0.0, 0.0], &[2.0, 0.0]).is_err());
        assert!(Metric::new(MetricKind::Cosine, 0.0, false).is_err());
    }

    #[test]
    fn similarity_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = 1.7;
        let (mut d2, mut dot, mut nz, mut nr) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..6 {
            d2 += (z[i] - r[i]) * (z[i] - r[i]);
            dot += z[i] * r[i];
            nz += z[i] * z[i];
            nr += r[i] * r[i];
        }
        let euc = Metric::new(MetricKind::NegSqEuclidean, gamma, false).unwrap();
        let cos = Metric::new(MetricKind::Cosine, gamma, false).unwrap();
        assert!((euc.similarity(&z, &r).unwrap() + gamma * d2).abs() < 1e-12);
        assert!(
            (cos.similarity(&z, &r).unwrap() - gamma * dot / (nz.sqrt() * nr.sqrt())).abs() < 1e-12
        );
    }

    #[test]
    fn prototype_is_support_mean() {
        let mut tape = Tape::new();
        let s = tape
            .constant_from(vec![4, 2], vec![1.0, 3.0, 3.0, 5.0, -1.0, 0.0, 7.0, 2.0])
            .unwrap();
        let r = prototypes_on(&mut tape, s, 2, 2).unwrap();
        assert_eq!(tape.value(r), &[2.0, 4.0, 3.0, 1.0]);

        let one = tape
            .constant_from(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4])
            .unwrap();
        let r = prototypes_on(&mut tape, one, 2, 1).unwrap();
        assert_eq!(tape.value(r), &[0.1, 0.2, 0.3, 0.4]);
    }
}
