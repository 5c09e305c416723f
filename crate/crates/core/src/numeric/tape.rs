//! Dynamic reverse-mode tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in reverse execution order with a per-call adjoint buffer and adds
//! the resulting leaf adjoints into persistent leaf gradients, so calling it
//! twice without [`Tape::zero_grad`] accumulates additively.

use super::{xent_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Adjoint routes to the first maximal index.
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Reduce {
        input: Var,
        kind: Reduce,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Var),
    AddScalar(Var, Var),
    SqDist(Var, Var),
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Place {
        input: Var,
        positions: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    MarginXent {
        logits: Var,
        margins: Option<Var>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    trace: Vec<usize>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Adjoint buffer of `v`, or `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Node indices visited by the most recent `backward`, in visit order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.trace
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = matches!(op, Op::Leaf).then(|| vec![0.0; value.len()]);
        let grad = if requires_grad { grad } else { None };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Sign pattern of every relu input, in execution order. Two passes with
    /// equal patterns evaluated the same linear pieces.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.nodes[a.0].value.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.constant(&t))
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Binds a tensor as a tracked leaf when it is trainable, else as a constant.
    pub fn bind(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Same value as `v`, cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Adds the leaf gradient of `v` into the tensor's gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let (Some(src), Some(dst)) = (self.grad(v), t.grad_mut()) {
            add_into(dst, src);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bj) in orow.iter_mut().zip(brow) {
                    *o += aip * bj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Exp => Ok(self.exp(args[0])),
            Elementwise::Log => self.log(args[0]),
            Elementwise::Neg => Ok(self.neg(args[0])),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(a).iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// Reduces along `axis`, or over every element when `axis` is `None`.
    /// The reduced axis is dropped; a fully reduced result has shape `[1]`.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, shape.iter().product::<usize>(), 1, vec![1]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::InvalidArgument(format!(
                        "reduce axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let mut out: Vec<usize> = shape.clone();
                out.remove(ax);
                if out.is_empty() {
                    out.push(1);
                }
                (
                    shape[..ax].iter().product(),
                    shape[ax],
                    shape[ax + 1..].iter().product(),
                    out,
                )
            }
        };
        if len == 0 {
            return Err(Error::InvalidArgument(format!(
                "reduce over empty axis of shape {shape:?}"
            )));
        }
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| av[(o * len + j) * inner + i];
                out[o * inner + i] = match kind {
                    Reduce::Sum => (0..len).map(at).sum(),
                    Reduce::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduce::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax.push(best);
                        at(best)
                    }
                };
            }
        }
        let rg = self.rg(&[a]);
        let op = Op::Reduce {
            input: a,
            kind,
            outer,
            len,
            inner,
            argmax,
        };
        Ok(self.push(out_shape, out, op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None)
            .expect("full reduction of a non-empty tensor")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, a, None)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (m, n) = dims2(self.shape(a), name)?;
        if self.value(b).len() != n {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// `a[i][j] + b[j]` for an `m × n` matrix and a length-`n` row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast(a, b, "add_row")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..m * n).map(|i| av[i] + bv[i % n]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::AddRow(a, b), rg))
    }

    /// `a[i][j] * b[j]` for an `m × n` matrix and a length-`n` row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast(a, b, "mul_row")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..m * n).map(|i| av[i] * bv[i % n]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MulRow(a, b), rg))
    }

    fn check_scalar(&self, s: Var, op: &'static str) -> Result<f64> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(s).to_vec(),
                rhs: vec![1],
            });
        }
        Ok(self.value(s)[0])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "scale")?;
        let out = self.value(a).iter().map(|x| sv * x).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg))
    }

    /// Adds the single-element tensor `s` to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "add_scalar")?;
        let out = self.value(a).iter().map(|x| x + sv).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddScalar(a, s), rg))
    }

    /// Pairwise squared euclidean distances between the rows of `z` (q × d)
    /// and the rows of `r` (k × d); result is q × k.
    pub fn sq_dist(&mut self, z: Var, r: Var) -> Result<Var> {
        let (q, d) = dims2(self.shape(z), "sq_dist")?;
        let (k, d2) = dims2(self.shape(r), "sq_dist")?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                lhs: vec![q, d],
                rhs: vec![k, d2],
            });
        }
        let (zv, rv) = (self.value(z), self.value(r));
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            for j in 0..k {
                out[i * k + j] = zv[i * d..(i + 1) * d]
                    .iter()
                    .zip(&rv[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        let rg = self.rg(&[z, r]);
        Ok(self.push(vec![q, k], out, Op::SqDist(z, r), rg))
    }

    /// Scales every row to unit euclidean norm. A zero row is a domain error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "normalize_rows")?;
        let av = self.value(a);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "normalize_rows",
                    index: i,
                    value: 0.0,
                });
            }
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], out, Op::NormalizeRows { input: a, norms }, rg))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: row {bad} out of range for {m} rows"
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[a]);
        let op = Op::GatherRows {
            input: a,
            rows: rows.to_vec(),
        };
        Ok(self.push(vec![rows.len(), n], out, op, rg))
    }

    /// Writes element `i` of `a` to flat position `positions[i]` of a zeroed
    /// tensor of `shape`. Positions must be distinct.
    pub fn place(&mut self, a: Var, positions: &[usize], shape: Vec<usize>) -> Result<Var> {
        let size: usize = shape.iter().product();
        if positions.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "place",
                lhs: self.shape(a).to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let mut out = vec![0.0; size];
        let mut seen = vec![false; size];
        for (&p, &x) in positions.iter().zip(self.value(a)) {
            if p >= size || seen[p] {
                return Err(Error::InvalidArgument(format!(
                    "place: position {p} out of range or repeated"
                )));
            }
            seen[p] = true;
            out[p] = x;
        }
        let rg = self.rg(&[a]);
        let op = Op::Place {
            input: a,
            positions: positions.to_vec(),
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Standardizes each column of an `m × n` matrix with its batch mean and
    /// biased batch variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "batch_norm")?;
        if m == 0 {
            return Err(Error::InvalidArgument("batch_norm over empty batch".into()));
        }
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(n);
        for j in 0..n {
            let mean = (0..m).map(|i| av[i * n + j]).sum::<f64>() / m as f64;
            let var = (0..m).map(|i| (av[i * n + j] - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for i in 0..m {
                out[i * n + j] = (av[i * n + j] - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], out, Op::BatchNorm { input: a, inv_std }, rg))
    }

    /// Per-row softmax cross-entropy over the margin-augmented logits
    /// `logits + margins`. Returns a length-`q` vector of `-log p` terms.
    pub fn margin_xent(
        &mut self,
        logits: Var,
        margins: Option<Var>,
        targets: &[usize],
    ) -> Result<Var> {
        let (q, n) = dims2(self.shape(logits), "margin_xent")?;
        if let Some(m) = margins {
            if self.shape(m) != [q, n] {
                return Err(Error::ShapeMismatch {
                    op: "margin_xent",
                    lhs: vec![q, n],
                    rhs: self.shape(m).to_vec(),
                });
            }
        }
        if targets.len() != q || targets.iter().any(|&t| t >= n) {
            return Err(Error::InvalidArgument(format!(
                "margin_xent: {} targets for {q} rows of width {n}",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut losses = Vec::with_capacity(q);
        let mut probs = vec![0.0; q * n];
        let mut row = vec![0.0; n];
        for i in 0..q {
            let l = &lv[i * n..(i + 1) * n];
            match margins {
                Some(m) => {
                    let mv = &self.value(m)[i * n..(i + 1) * n];
                    for ((r, a), b) in row.iter_mut().zip(l).zip(mv) {
                        *r = a + b;
                    }
                }
                None => row.copy_from_slice(l),
            }
            let (loss, _) = xent_row(&row, targets[i], Some(&mut probs[i * n..(i + 1) * n]));
            losses.push(loss);
        }
        let rg = self.rg(&[logits]) || margins.is_some_and(|m| self.rg(&[m]));
        let op = Op::MarginXent {
            logits,
            margins,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![q], losses, op, rg))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.trace.clear();
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.trace.push(i);
            if let Op::Leaf = self.nodes[i].op {
                if let Some(dst) = self.nodes[i].grad.as_mut() {
                    add_into(dst, &g);
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot(nodes, adj, *a) {
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * bv[p * n + c];
                            }
                            da[r * k + p] += s;
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    // dB = Aᵀ · dC
                    for r in 0..m {
                        for p in 0..k {
                            let arp = av[r * k + p];
                            for c in 0..n {
                                db[p * n + c] += arp * g[r * n + c];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                if let Some(da) = slot(nodes, adj, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                if let Some(da) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        da[j] += g[j] * node.value[j];
                    }
                }
            }
            Op::Log(a) => {
                let av = &nodes[a.0].value;
                if let Some(da) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        da[j] += g[j] / av[j];
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Reduce {
                input,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(da) = slot(nodes, adj, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let go = g[o * inner + i];
                            match kind {
                                Reduce::Sum | Reduce::Mean => {
                                    let w = if *kind == Reduce::Mean {
                                        go / len as f64
                                    } else {
                                        go
                                    };
                                    for j in 0..len {
                                        da[(o * len + j) * inner + i] += w;
                                    }
                                }
                                Reduce::Max => {
                                    let j = argmax[o * inner + i];
                                    da[(o * len + j) * inner + i] += go;
                                }
                            }
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = nodes[a.0].shape[1];
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for (j, x) in g.iter().enumerate() {
                        db[j % n] += x;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let n = nodes[a.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot(nodes, adj, *a) {
                    for (j, x) in g.iter().enumerate() {
                        da[j] += x * bv[j % n];
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for (j, x) in g.iter().enumerate() {
                        db[j % n] += x * av[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                let (av, sv) = (&nodes[a.0].value, nodes[s.0].value[0]);
                if let Some(da) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        da[j] += g[j] * sv;
                    }
                }
                if let Some(ds) = slot(nodes, adj, *s) {
                    ds[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::AddScalar(a, s) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(ds) = slot(nodes, adj, *s) {
                    ds[0] += g.iter().sum::<f64>();
                }
            }
            Op::SqDist(z, r) => {
                let (q, d) = (nodes[z.0].shape[0], nodes[z.0].shape[1]);
                let k = nodes[r.0].shape[0];
                let (zv, rv) = (&nodes[z.0].value, &nodes[r.0].value);
                if let Some(dz) = slot(nodes, adj, *z) {
                    for i in 0..q {
                        for j in 0..k {
                            let w = 2.0 * g[i * k + j];
                            for c in 0..d {
                                dz[i * d + c] += w * (zv[i * d + c] - rv[j * d + c]);
                            }
                        }
                    }
                }
                if let Some(dr) = slot(nodes, adj, *r) {
                    for i in 0..q {
                        for j in 0..k {
                            let w = 2.0 * g[i * k + j];
                            for c in 0..d {
                                dr[j * d + c] -= w * (zv[i * d + c] - rv[j * d + c]);
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                let n = nodes[input.0].shape[1];
                if let Some(da) = slot(nodes, adj, *input) {
                    for (i, norm) in norms.iter().enumerate() {
                        let u = &node.value[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = u.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            da[i * n + c] += (gr[c] - u[c] * dot) / norm;
                        }
                    }
                }
            }
            Op::GatherRows { input, rows } => {
                let n = nodes[input.0].shape[1];
                if let Some(da) = slot(nodes, adj, *input) {
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut da[r * n..(r + 1) * n], &g[o * n..(o + 1) * n]);
                    }
                }
            }
            Op::Place { input, positions } => {
                if let Some(da) = slot(nodes, adj, *input) {
                    for (j, &p) in positions.iter().enumerate() {
                        da[j] += g[p];
                    }
                }
            }
            Op::BatchNorm { input, inv_std } => {
                let (m, n) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                let xhat = &node.value;
                if let Some(da) = slot(nodes, adj, *input) {
                    let mf = m as f64;
                    for j in 0..n {
                        let sum_g: f64 = (0..m).map(|i| g[i * n + j]).sum();
                        let sum_gx: f64 = (0..m).map(|i| g[i * n + j] * xhat[i * n + j]).sum();
                        for i in 0..m {
                            let idx = i * n + j;
                            da[idx] += inv_std[j] / mf * (mf * g[idx] - sum_g - xhat[idx] * sum_gx);
                        }
                    }
                }
            }
            Op::MarginXent {
                logits,
                margins,
                targets,
                probs,
            } => {
                let n = nodes[logits.0].shape[1];
                let mut dz = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * n + t] -= 1.0;
                    dz[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= g[i]);
                }
                if let Some(dl) = slot(nodes, adj, *logits) {
                    add_into(dl, &dz);
                }
                if let Some(m) = margins {
                    if let Some(dm) = slot(nodes, adj, *m) {
                        add_into(dm, &dz);
                    }
                }
            }
        }
    }
}
