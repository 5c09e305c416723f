//! Class semantic vectors and the two margin generators.
//!
//! Both generators produce an `n_t × n_t` margin matrix indexed by episode
//! class position, with `m[y][k]` the margin added to competitor `k` when the
//! target is `y`. The diagonal is always zero.
//!
//! * class-relevant: `m[y][k] = α·cos(e_y, e_k) + β`
//! * task-relevant: row `y` is a small fully-connected network applied to the
//!   `n_t − 1` similarities `cos(e_y, e_k)`, with the competitors `k` taken in
//!   ascending class-id order.

use std::collections::BTreeMap;

use rand::Rng;

use crate::datasets::ClassId;
use crate::error::{Error, Result};
use crate::model::{BoundDense, Dense};
use crate::numeric::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticStore {
    d_s: usize,
    vectors: BTreeMap<ClassId, Vec<f64>>,
    names: BTreeMap<ClassId, String>,
}

impl SemanticStore {
    pub fn new(d_s: usize) -> Self {
        Self {
            d_s,
            vectors: BTreeMap::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: ClassId, name: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.d_s {
            return Err(Error::Data(format!(
                "semantic vector for `{name}` has dimension {}, store uses {}",
                vector.len(),
                self.d_s
            )));
        }
        if vector.iter().all(|v| *v == 0.0) {
            return Err(Error::Data(format!("semantic vector for `{name}` is zero")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "semantic vector for `{name}` is not finite"
            )));
        }
        self.vectors.insert(id, vector);
        self.names.insert(id, name.to_string());
        Ok(())
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: ClassId) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    fn require(&self, id: ClassId) -> Result<&[f64]> {
        self.vector(id).ok_or_else(|| {
            Error::MissingClass(
                self.names
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| id.to_string()),
            )
        })
    }

    /// Cosine similarity matrix over `classes`, in the given order.
    pub fn similarity_matrix(&self, classes: &[ClassId]) -> Result<Tensor> {
        let vecs = classes
            .iter()
            .map(|&c| self.require(c))
            .collect::<Result<Vec<_>>>()?;
        let n = classes.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = cosine_sim(vecs[i], vecs[j])?;
            }
        }
        Tensor::new(vec![n, n], out)
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain {
            op: "cosine_sim",
            index: usize::from(na != 0.0),
            value: 0.0,
        });
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Dense margin matrix read back from a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginMatrix {
    pub margins: Tensor,
}

impl MarginMatrix {
    pub fn way(&self) -> usize {
        self.margins.shape()[0]
    }

    pub fn get(&self, target: usize, competitor: usize) -> f64 {
        self.margins.values()[target * self.way() + competitor]
    }
}

fn off_diagonal_mask(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|i| if i / n == i % n { 0.0 } else { 1.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRelevantGenerator {
    pub alpha: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundClassRelevant {
    pub alpha: Var,
    pub beta: Var,
}

impl ClassRelevantGenerator {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha: Tensor::scalar(alpha).trainable(),
            beta: Tensor::scalar(beta).trainable(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.values()[0]
    }

    pub fn beta(&self) -> f64 {
        self.beta.values()[0]
    }

    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> BoundClassRelevant {
        let alpha = tape.bind(&self.alpha);
        let beta = tape.bind(&self.beta);
        vars.extend([alpha, beta]);
        BoundClassRelevant { alpha, beta }
    }
}

impl BoundClassRelevant {
    /// `(α·S + β) ⊙ offdiag` for a similarity matrix `S`.
    pub fn margins(&self, tape: &mut Tape, sims: &Tensor) -> Result<Var> {
        let n = sims.shape()[0];
        let s = tape.constant(sims);
        let scaled = tape.scale(s, self.alpha)?;
        let shifted = tape.add_scalar(scaled, self.beta)?;
        let mask = tape.constant_from(vec![n, n], off_diagonal_mask(n))?;
        tape.mul(shifted, mask)
    }
}

pub fn class_relevant_margins(
    gen: &ClassRelevantGenerator,
    store: &SemanticStore,
    classes: &[ClassId],
) -> Result<MarginMatrix> {
    let sims = store.similarity_matrix(classes)?;
    let mut tape = Tape::new();
    let bound = gen.bind(&mut tape, &mut Vec::new());
    let m = bound.margins(&mut tape, &sims)?;
    Ok(MarginMatrix {
        margins: tape.to_tensor(m),
    })
}

/// Network `G` mapping `n_t − 1` similarities to `n_t − 1` margins.
///
/// Default layout is `Dense → relu → Dense`. With batch norm enabled every
/// dense layer is followed by batch norm (learned scale and shift) and relu.
/// The last dense layer starts at zero so the initial margins are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRelevantGenerator {
    pub layers: Vec<Dense>,
    /// `(scale, shift)` per dense layer when batch norm is enabled.
    pub norms: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct BoundTaskRelevant {
    layers: Vec<BoundDense>,
    norms: Vec<(Var, Var)>,
}

const BN_EPS: f64 = 1e-5;

impl TaskRelevantGenerator {
    pub fn init<R: Rng + ?Sized>(
        way: usize,
        hidden: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if way < 2 || hidden == 0 {
            return Err(Error::Config(format!(
                "task-relevant generator needs way >= 2 and hidden >= 1 (got {way}, {hidden})"
            )));
        }
        let width = way - 1;
        let layers = vec![Dense::init(width, hidden, rng), Dense::zeros(hidden, width)];
        let norms = if batch_norm {
            layers
                .iter()
                .map(|l| {
                    (
                        Tensor::vector(vec![1.0; l.outputs()]).trainable(),
                        Tensor::zeros(vec![l.outputs()]).trainable(),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { layers, norms })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("generator needs layers".into()))?;
        if layers.last().unwrap().outputs() != first.inputs() {
            return Err(Error::Config(
                "generator input and output widths differ".into(),
            ));
        }
        Ok(Self {
            layers,
            norms: Vec::new(),
        })
    }

    /// Input/output width, `n_t − 1`.
    pub fn width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn batch_norm(&self) -> bool {
        !self.norms.is_empty()
    }

    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> BoundTaskRelevant {
        let layers = self.layers.iter().map(|l| l.bind(tape, vars)).collect();
        let norms = self
            .norms
            .iter()
            .map(|(s, b)| {
                let (s, b) = (tape.bind(s), tape.bind(b));
                vars.extend([s, b]);
                (s, b)
            })
            .collect();
        BoundTaskRelevant { layers, norms }
    }
}

/// Episode positions of the competitors of `target`, ascending by class id.
pub fn competitor_order(classes: &[ClassId], target: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes.len()).filter(|&k| k != target).collect();
    order.sort_by_key(|&k| classes[k]);
    order
}

impl BoundTaskRelevant {
    /// Runs `G` on a batch of similarity rows (`b × (n_t − 1)`).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if let Some(&(scale, shift)) = self.norms.get(i) {
                let n = tape.batch_norm(h, BN_EPS)?;
                let s = tape.mul_row(n, scale)?;
                h = tape.add_row(s, shift)?;
                h = tape.relu(h);
            } else if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Full margin matrix for an episode: one generator row per target class.
    pub fn margins(&self, tape: &mut Tape, sims: &Tensor, classes: &[ClassId]) -> Result<Var> {
        let n = classes.len();
        let width = tape.shape(self.layers[0].weight)[0];
        if width + 1 != n {
            return Err(Error::Config(format!(
                "task-relevant generator expects {}-way episodes, got {n}-way",
                width + 1
            )));
        }
        let mut input = Vec::with_capacity(n * width);
        let mut positions = Vec::with_capacity(n * width);
        for y in 0..n {
            for k in competitor_order(classes, y) {
                input.push(sims.values()[y * n + k]);
                positions.push(y * n + k);
            }
        }
        let x = tape.constant_from(vec![n, width], input)?;
        let out = self.forward(tape, x)?;
        tape.place(out, &positions, vec![n, n])
    }
}

/// Margins `m_{y,k}` for one target class, aligned with the competitors in
/// ascending class-id order.
pub fn task_relevant_margins(
    gen: &TaskRelevantGenerator,
    store: &SemanticStore,
    classes: &[ClassId],
    target: ClassId,
) -> Result<Vec<f64>> {
    let y = classes
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::InvalidArgument(format!("target {target} not in episode classes")))?;
    let sims = store.similarity_matrix(classes)?;
    let mut tape = Tape::new();
    let bound = gen.bind(&mut tape, &mut Vec::new());
    let m = bound.margins(&mut tape, &sims, classes)?;
    let n = classes.len();
    let row = &tape.value(m)[y * n..(y + 1) * n];
    Ok(competitor_order(classes, y)
        .into_iter()
        .map(|k| row[k])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(vectors: &[&[f64]]) -> SemanticStore {
        let mut s = SemanticStore::new(vectors[0].len());
        for (i, v) in vectors.iter().enumerate() {
            s.insert(ClassId(i), &format!("c{i}"), v.to_vec()).unwrap();
        }
        s
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let e = [0.3, -2.0, 0.7];
        assert!((cosine_sim(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        // 32 / (sqrt(14)·sqrt(77))
        let want = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.974_631_846_197_076_2).abs() < 1e-12);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn store_rejects_zero_and_wrong_dimension() {
        let mut s = SemanticStore::new(2);
        assert!(s.insert(ClassId(0), "a", vec![0.0, 0.0]).is_err());
        assert!(s.insert(ClassId(0), "a", vec![1.0]).is_err());
    }

    #[test]
    fn class_relevant_substitution() {
        // sim(c0, c1) = 0.8 by construction.
        let s = store(&[&[1.0, 0.0], &[0.8, 0.6], &[0.8, 0.6]]);
        let classes = [ClassId(0), ClassId(1), ClassId(2)];
        let m =
            class_relevant_margins(&ClassRelevantGenerator::new(1.0, 0.5), &s, &classes).unwrap();
        assert!((m.get(0, 1) - 1.3).abs() < 1e-12);
        assert!(
            (m.get(1, 2) - 1.5).abs() < 1e-12,
            "identical vectors give α+β"
        );
        assert_eq!(m.get(1, 1), 0.0);

        let m =
            class_relevant_margins(&ClassRelevantGenerator::new(0.0, 0.25), &s, &classes).unwrap();
        for y in 0..3 {
            for k in 0..3 {
                assert_eq!(m.get(y, k), if y == k { 0.0 } else { 0.25 });
            }
        }
    }

    #[test]
    fn class_relevant_missing_class_is_named() {
        let s = store(&[&[1.0, 0.0]]);
        let err = class_relevant_margins(
            &ClassRelevantGenerator::new(1.0, 0.0),
            &s,
            &[ClassId(0), ClassId(7)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("#7"), "{err}");
    }

    #[test]
    fn zero_final_layer_gives_zero_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = store(&[&[1.0, 0.2], &[0.1, 1.0], &[-0.5, 0.5], &[0.3, 0.3]]);
        let classes = [ClassId(2), ClassId(0), ClassId(3), ClassId(1)];
        for bn in [false, true] {
            let g = TaskRelevantGenerator::init(4, 8, bn, &mut rng).unwrap();
            let m = task_relevant_margins(&g, &s, &classes, ClassId(3)).unwrap();
            assert_eq!(m, vec![0.0; 3]);
        }
    }

    #[test]
    fn identity_generator_gives_relu_of_similarities() {
        let eye = |n: usize| {
            Tensor::new(
                vec![n, n],
                (0..n * n)
                    .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap()
        };
        let g = TaskRelevantGenerator::from_layers(vec![
            Dense::new(eye(2), Tensor::zeros(vec![2])).unwrap(),
            Dense::new(eye(2), Tensor::zeros(vec![2])).unwrap(),
        ])
        .unwrap();
        let s = store(&[&[1.0, 0.0], &[0.6, 0.8], &[-0.6, 0.8]]);
        let classes = [ClassId(2), ClassId(0), ClassId(1)];
        // Competitors of class 0, ascending id: class 1 (sim 0.6), class 2 (sim -0.6).
        let m = task_relevant_margins(&g, &s, &classes, ClassId(0)).unwrap();
        assert!((m[0] - 0.6).abs() < 1e-15);
        assert_eq!(m[1], 0.0);
    }

    #[test]
    fn generator_width_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = TaskRelevantGenerator::init(3, 4, false, &mut rng).unwrap();
        let s = store(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let err = task_relevant_margins(&g, &s, &[ClassId(0), ClassId(1)], ClassId(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn competitor_order_is_by_class_id() {
        let classes = [ClassId(9), ClassId(2), ClassId(5)];
        assert_eq!(competitor_order(&classes, 0), vec![1, 2]);
        assert_eq!(competitor_order(&classes, 1), vec![2, 0]);
    }
}
