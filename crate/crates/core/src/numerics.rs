//! Dense 2-D array engine with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every op appends a node to a [`Tape`], so the
//! tape's node order is already a topological order and the backward pass is
//! a single reverse sweep. Arrays are immutable once recorded; re-running a
//! forward pass with mutated parameters simply builds a fresh tape.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {op} got shapes {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf value; no parents. Detached copies are also leaves.
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Adds a 1 x d row vector to every row of an n x d matrix.
    AddRow(usize, usize),
    Mean(usize),
    Sum(usize),
    /// Extracts one entry as a 1 x 1 scalar.
    Index(usize, usize, usize),
    /// Multiplies a matrix by a 1 x 1 scalar node.
    ScaleVar(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    shape: (usize, usize),
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient for `v`, or `None` if no gradient flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, filling in zeros of the given length when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn push(&mut self, shape: (usize, usize), value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.0 * shape.1);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Leaf that participates in gradients (a parameter).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push((rows, cols), data, Op::Leaf, true)
    }

    /// Leaf excluded from gradients (an input or constant).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push((rows, cols), data, Op::Leaf, false)
    }

    /// Value-identical copy with all gradient flow severed.
    pub fn detach(&mut self, a: Var) -> Var {
        let (shape, value) = (self.nodes[a.0].shape, self.nodes[a.0].value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(NumericsError::DimMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push((m, n), out, Op::Matmul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.requires(a.0);
        self.push((n, m), out, Op::Transpose(a.0), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].value;
        if av.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("softmax_rows"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let rg = self.requires(a.0);
        Ok(self.push((m, n), out, Op::SoftmaxRows(a.0), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.requires(a.0);
        self.push(shape, out, Op::Sigmoid(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.requires(a.0);
        self.push(shape, out, Op::Relu(a.0), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x.ln()).collect();
        let rg = self.requires(a.0);
        self.push(shape, out, Op::Ln(a.0), rg)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(NumericsError::DimMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(shape, out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(shape, out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(shape, out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let rg = self.requires(a.0);
        self.push(shape, out, Op::Scale(a.0, c), rg)
    }

    /// Broadcast-add a 1 x d bias row to every row of `a` (n x d).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, n) {
            return Err(NumericsError::DimMismatch {
                op: "add_row",
                lhs: (m, n),
                rhs: sb,
            });
        }
        let bv = self.nodes[bias.0].value.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + bv[idx % n])
            .collect();
        let rg = self.requires(a.0) || self.requires(bias.0);
        Ok(self.push((m, n), out, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let len = (m * n) as f64;
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.requires(a.0);
        self.push((1, 1), vec![s / len], Op::Mean(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.requires(a.0);
        self.push((1, 1), vec![s], Op::Sum(a.0), rg)
    }

    /// Entry (i, j) of `a` as a 1 x 1 node.
    pub fn index(&mut self, a: Var, i: usize, j: usize) -> Var {
        let (_, n) = self.shape(a);
        let v = self.nodes[a.0].value[i * n + j];
        let rg = self.requires(a.0);
        self.push((1, 1), vec![v], Op::Index(a.0, i, j), rg)
    }

    /// `a` scaled by a 1 x 1 scalar node, differentiable in both.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(NumericsError::DimMismatch {
                op: "scale_var",
                lhs: self.shape(a),
                rhs: ss,
            });
        }
        let c = self.nodes[s.0].value[0];
        let shape = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let rg = self.requires(a.0) || self.requires(s.0);
        Ok(self.push(shape, out, Op::ScaleVar(a.0, s.0), rg))
    }

    /// Reverse sweep from a scalar loss. Visits every node at most once in
    /// reverse topological (= reverse insertion) order.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss) != (1, 1) {
            return Err(NumericsError::NonScalarLoss(self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate_parents(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |pid: usize, contrib: Vec<f64>| {
            if !self.nodes[pid].requires_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a].shape;
                let n = self.nodes[b].shape.1;
                // dA = dC * B^T
                let bv = &self.nodes[b].value;
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                acc(a, da);
                // dB = A^T * dC
                let av = &self.nodes[a].value;
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                acc(b, db);
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a].shape;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                acc(a, da);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.shape;
                let y = &node.value;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                acc(a, da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = node
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (1.0 - y))
                    .collect();
                acc(a, da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = self.nodes[a]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                acc(a, da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = self.nodes[a]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| gi / x)
                    .collect();
                acc(a, da);
            }
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = self.nodes[b].value.iter().zip(g).map(|(&y, &gi)| gi * y).collect();
                let db: Vec<f64> = self.nodes[a].value.iter().zip(g).map(|(&x, &gi)| gi * x).collect();
                acc(a, da);
                acc(b, db);
            }
            Op::Scale(a, c) => {
                acc(a, g.iter().map(|x| x * c).collect());
            }
            Op::AddRow(a, bias) => {
                acc(a, g.to_vec());
                let n = self.nodes[bias].shape.1;
                let mut db = vec![0.0; n];
                for (idx, gi) in g.iter().enumerate() {
                    db[idx % n] += gi;
                }
                acc(bias, db);
            }
            Op::Mean(a) => {
                let (m, n) = self.nodes[a].shape;
                let c = g[0] / (m * n) as f64;
                acc(a, vec![c; m * n]);
            }
            Op::Sum(a) => {
                let (m, n) = self.nodes[a].shape;
                acc(a, vec![g[0]; m * n]);
            }
            Op::Index(a, i, j) => {
                let (_, n) = self.nodes[a].shape;
                let mut da = vec![0.0; self.nodes[a].value.len()];
                da[i * n + j] = g[0];
                acc(a, da);
            }
            Op::ScaleVar(a, s) => {
                let c = self.nodes[s].value[0];
                acc(a, g.iter().map(|x| x * c).collect());
                let ds: f64 = self.nodes[a].value.iter().zip(g).map(|(&x, &gi)| x * gi).sum();
                acc(s, vec![ds]);
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
