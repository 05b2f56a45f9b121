//! Graph-based reverse-mode differentiation with array-valued nodes.
//!
//! Expressions are built into an append-only graph and evaluated under leaf
//! bindings. The gradient pass emits ordinary graph nodes (differentiable
//! adjoints), so a gradient expression can itself be differentiated one more
//! time; depth three is rejected. Evaluation is pure — identical bindings
//! produce bit-identical results.

pub mod tensor;

pub use tensor::{Shape, Tensor};

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("leaf `{name}` (node {id}) has no binding")]
    UnboundLeaf { id: usize, name: String },
    #[error("binding for leaf `{name}` (node {id}) has shape {got:?}, expected {expected:?}")]
    BindingShape { id: usize, name: String, expected: Shape, got: Shape },
    #[error("gradient output node {id} has shape {shape:?}; only scalar outputs are differentiable")]
    NonScalarOutput { id: usize, shape: Shape },
    #[error("differentiation depth 3 requested; nested differentiation is capped at depth 2")]
    DepthExceeded,
    #[error("node {id} is not a leaf")]
    NotALeaf { id: usize },
    #[error("non-finite value produced at node {id} ({op})")]
    NonFinite { id: usize, op: String },
}

/// Reference to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf(String),
    Const(Tensor),
    // Elementwise binary; operands share a shape or one side is scalar.
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddConst(f64),
    /// Matrix(r,c) + Vector(c), added to every row.
    AddRow,
    /// Matrix product with optional transposes; also matrix × vector.
    MatMul { ta: bool, tb: bool },
    /// Vector(m) ⊗ Vector(n) -> Matrix(m,n).
    Outer,
    Sum,
    Mean,
    /// Matrix(r,c) -> Vector(c), summing down each column.
    SumRows,
    /// Matrix(r,c) -> Vector(r), summing across each row.
    SumCols,
    /// Vector(c) -> Matrix(rows,c), repeating the vector as rows.
    BroadcastRow(usize),
    /// Vector(r) -> Matrix(r,cols), repeating the vector as columns.
    BroadcastCol(usize),
    /// Matrix(r,c) -> Vector(r), extracting one column.
    Column(usize),
    /// Vector(r) -> Matrix(r,cols) with the vector in `col`, zero elsewhere.
    ScatterColumn { col: usize, cols: usize },
    /// k × Vector(r) -> Matrix(r,k).
    ConcatCols,
    Elu,
    EluDeriv,
    EluSecond,
    Relu,
    Step,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Softplus(f64),
    /// Vector(n) -> scalar, numerically stable.
    LogSumExp,
    Dot,
    /// Vector -> scalar, sqrt(Σx² + ε²).
    NormEps(f64),
}

impl Op {
    fn name(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Shape,
    /// Gradient generation: 0 for user-built nodes, 1/2 for nodes emitted by
    /// gradient passes. Ancestry at generation 2 rejects further gradients.
    gen: u8,
}

/// Values for the leaves of a graph, keyed by node id.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: HashMap<usize, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.map.insert(leaf.0, value);
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.map.get(&leaf.0)
    }
}

/// A request against [`Graph::gradient`].
pub struct GradientRequest {
    pub output: NodeId,
    pub wrt: Vec<NodeId>,
    /// When set, the returned nodes may be differentiated once more.
    pub differentiable: bool,
}

/// Append-only expression graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    emit_gen: u8,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        let gen = self.emit_gen;
        self.nodes.push(Node { op, inputs, shape, gen });
        NodeId(self.nodes.len() - 1)
    }

    // ── Node constructors ────────────────────────────────────────────

    pub fn leaf(&mut self, name: &str, shape: Shape) -> NodeId {
        self.push(Op::Leaf(name.to_string()), vec![], shape)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Const(value), vec![], shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn broadcast_shape(&self, a: NodeId, b: NodeId, what: &str) -> Shape {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            sa
        } else if sa.is_scalar() {
            sb
        } else if sb.is_scalar() {
            sa
        } else {
            panic!("{what}: incompatible shapes {sa:?} and {sb:?}");
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.broadcast_shape(a, b, "add");
        self.push(Op::Add, vec![a, b], s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.broadcast_shape(a, b, "sub");
        self.push(Op::Sub, vec![a, b], s)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.broadcast_shape(a, b, "mul");
        self.push(Op::Mul, vec![a, b], s)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.broadcast_shape(a, b, "div");
        self.push(Op::Div, vec![a, b], s)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Neg, vec![a], s)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Scale(c), vec![a], s)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::AddConst(c), vec![a], s)
    }

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let s = self.shape(m);
        match (s, self.shape(v)) {
            (Shape::Matrix(_, c), Shape::Vector(n)) if c == n => {}
            (sm, sv) => panic!("add_row: {sm:?} + {sv:?}"),
        }
        self.push(Op::AddRow, vec![m, v], s)
    }

    pub fn matmul_f(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let shape = match (self.shape(a), self.shape(b)) {
            (Shape::Matrix(ar, ac), Shape::Matrix(br, bc)) => {
                let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
                let (k2, n) = if tb { (bc, br) } else { (br, bc) };
                assert_eq!(k1, k2, "matmul: inner dims {k1} vs {k2}");
                Shape::Matrix(m, n)
            }
            (Shape::Matrix(ar, ac), Shape::Vector(n)) => {
                assert!(!tb, "matmul: tb with vector operand");
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                assert_eq!(k, n, "matvec: inner dims {k} vs {n}");
                Shape::Vector(m)
            }
            (sa, sb) => panic!("matmul: {sa:?} × {sb:?}"),
        };
        self.push(Op::MatMul { ta, tb }, vec![a, b], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_f(a, false, b, false)
    }

    /// A · Bᵀ — the dense-layer product for row-major weight matrices.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_f(a, false, b, true)
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> NodeId {
        let (m, n) = match (self.shape(u), self.shape(v)) {
            (Shape::Vector(m), Shape::Vector(n)) => (m, n),
            (su, sv) => panic!("outer: {su:?} ⊗ {sv:?}"),
        };
        self.push(Op::Outer, vec![u, v], Shape::Matrix(m, n))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a], Shape::Scalar)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        assert!(self.shape(a).len() > 0, "mean of empty tensor");
        self.push(Op::Mean, vec![a], Shape::Scalar)
    }

    pub fn sum_rows(&mut self, m: NodeId) -> NodeId {
        let c = match self.shape(m) {
            Shape::Matrix(_, c) => c,
            s => panic!("sum_rows: {s:?}"),
        };
        self.push(Op::SumRows, vec![m], Shape::Vector(c))
    }

    pub fn sum_cols(&mut self, m: NodeId) -> NodeId {
        let r = match self.shape(m) {
            Shape::Matrix(r, _) => r,
            s => panic!("sum_cols: {s:?}"),
        };
        self.push(Op::SumCols, vec![m], Shape::Vector(r))
    }

    pub fn broadcast_row(&mut self, v: NodeId, rows: usize) -> NodeId {
        let c = match self.shape(v) {
            Shape::Vector(c) => c,
            s => panic!("broadcast_row: {s:?}"),
        };
        self.push(Op::BroadcastRow(rows), vec![v], Shape::Matrix(rows, c))
    }

    pub fn broadcast_col(&mut self, v: NodeId, cols: usize) -> NodeId {
        let r = match self.shape(v) {
            Shape::Vector(r) => r,
            s => panic!("broadcast_col: {s:?}"),
        };
        self.push(Op::BroadcastCol(cols), vec![v], Shape::Matrix(r, cols))
    }

    pub fn column(&mut self, m: NodeId, col: usize) -> NodeId {
        let r = match self.shape(m) {
            Shape::Matrix(r, c) => {
                assert!(col < c, "column {col} out of {c}");
                r
            }
            s => panic!("column: {s:?}"),
        };
        self.push(Op::Column(col), vec![m], Shape::Vector(r))
    }

    pub fn scatter_column(&mut self, v: NodeId, col: usize, cols: usize) -> NodeId {
        let r = match self.shape(v) {
            Shape::Vector(r) => r,
            s => panic!("scatter_column: {s:?}"),
        };
        assert!(col < cols);
        self.push(Op::ScatterColumn { col, cols }, vec![v], Shape::Matrix(r, cols))
    }

    pub fn concat_cols(&mut self, vs: &[NodeId]) -> NodeId {
        assert!(!vs.is_empty(), "concat_cols: empty input");
        let r = match self.shape(vs[0]) {
            Shape::Vector(r) => r,
            s => panic!("concat_cols: {s:?}"),
        };
        for &v in vs {
            assert_eq!(self.shape(v), Shape::Vector(r), "concat_cols: ragged inputs");
        }
        self.push(Op::ConcatCols, vs.to_vec(), Shape::Matrix(r, vs.len()))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(op, vec![a], s)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Elu, a)
    }

    pub fn elu_deriv(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::EluDeriv, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        assert!(beta > 0.0);
        self.unary(Op::Softplus(beta), a)
    }

    pub fn logsumexp(&mut self, v: NodeId) -> NodeId {
        match self.shape(v) {
            Shape::Vector(n) if n > 0 => {}
            s => panic!("logsumexp: {s:?}"),
        }
        self.push(Op::LogSumExp, vec![v], Shape::Scalar)
    }

    pub fn dot(&mut self, u: NodeId, v: NodeId) -> NodeId {
        match (self.shape(u), self.shape(v)) {
            (Shape::Vector(m), Shape::Vector(n)) if m == n => {}
            (su, sv) => panic!("dot: {su:?} · {sv:?}"),
        }
        self.push(Op::Dot, vec![u, v], Shape::Scalar)
    }

    pub fn norm_eps(&mut self, v: NodeId, eps: f64) -> NodeId {
        match self.shape(v) {
            Shape::Vector(_) => {}
            s => panic!("norm_eps: {s:?}"),
        }
        self.push(Op::NormEps(eps), vec![v], Shape::Scalar)
    }

    // ── Composites ───────────────────────────────────────────────────

    /// Element `i` of a vector as a scalar node.
    pub fn elem(&mut self, v: NodeId, i: usize) -> NodeId {
        let n = match self.shape(v) {
            Shape::Vector(n) => n,
            s => panic!("elem: {s:?}"),
        };
        let hot = self.constant(Tensor::one_hot(n, i));
        self.dot(v, hot)
    }

    /// Cosine similarity with ε-guarded norms; 0 when either input is zero.
    pub fn cosine_sim(&mut self, u: NodeId, v: NodeId, eps: f64) -> NodeId {
        let d = self.dot(u, v);
        let nu = self.norm_eps(u, eps);
        let nv = self.norm_eps(v, eps);
        let nn = self.mul(nu, nv);
        self.div(d, nn)
    }

    /// Numerically stable pairwise log-sum-exp, usable elementwise on
    /// equally shaped nodes: lse(a, b) = a + softplus(b − a).
    pub fn lse_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(b, a);
        let sp = self.softplus(d, 1.0);
        self.add(a, sp)
    }

    // ── Evaluation ───────────────────────────────────────────────────

    fn ancestors(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = roots.iter().map(|r| r.0).collect();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            for inp in &self.nodes[id].inputs {
                stack.push(inp.0);
            }
        }
        needed
    }

    /// Evaluates `outputs` under `bindings`. Deterministic and pure.
    pub fn evaluate(
        &self,
        bindings: &Bindings,
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor>, GraphError> {
        let needed = self.ancestors(outputs);
        let mut vals: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            let value = match &node.op {
                Op::Leaf(name) => {
                    let t = bindings.get(NodeId(id)).ok_or_else(|| GraphError::UnboundLeaf {
                        id,
                        name: name.clone(),
                    })?;
                    if t.shape() != node.shape {
                        return Err(GraphError::BindingShape {
                            id,
                            name: name.clone(),
                            expected: node.shape,
                            got: t.shape(),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                op => {
                    let ins: Vec<&Tensor> =
                        node.inputs.iter().map(|i| vals[i.0].as_ref().expect("topo order")).collect();
                    eval_op(op, &ins, node.shape)
                }
            };
            vals[id] = Some(value);
        }
        Ok(outputs
            .iter()
            .map(|o| vals[o.0].clone().expect("output evaluated"))
            .collect())
    }

    // ── Differentiation ──────────────────────────────────────────────

    /// Emits gradient nodes of a scalar `output` with respect to each `wrt`
    /// node. With `differentiable` set the returned nodes support one further
    /// gradient call; depth three is rejected either way.
    pub fn gradient(&mut self, req: &GradientRequest) -> Result<Vec<NodeId>, GraphError> {
        self.gradient_of(req.output, &req.wrt, req.differentiable)
    }

    pub fn gradient_of(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        differentiable: bool,
    ) -> Result<Vec<NodeId>, GraphError> {
        if !self.shape(output).is_scalar() {
            return Err(GraphError::NonScalarOutput { id: output.0, shape: self.shape(output) });
        }
        let needed = self.ancestors(&[output]);
        let depth = (0..self.nodes.len())
            .filter(|&i| needed[i])
            .map(|i| self.nodes[i].gen)
            .max()
            .unwrap_or(0);
        if depth >= 2 {
            return Err(GraphError::DepthExceeded);
        }
        self.emit_gen = if differentiable { depth + 1 } else { 2 };

        let frontier = self.nodes.len();
        let mut adjoint: Vec<Option<NodeId>> = vec![None; frontier];
        adjoint[output.0] = Some(self.scalar(1.0));
        for id in (0..=output.0).rev() {
            if !needed[id] {
                continue;
            }
            let Some(adj) = adjoint[id] else { continue };
            for (input, contrib) in self.vjp(NodeId(id), adj) {
                debug_assert_eq!(
                    self.shape(contrib),
                    self.shape(input),
                    "vjp contribution shape for {:?}",
                    self.nodes[input.0].op.name()
                );
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }
        let result = wrt
            .iter()
            .map(|w| {
                adjoint
                    .get(w.0)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(self.shape(*w))))
            })
            .collect();
        self.emit_gen = 0;
        Ok(result)
    }

    /// Per-input adjoint contributions for one node, emitted as graph nodes.
    fn vjp(&mut self, id: NodeId, adj: NodeId) -> Vec<(NodeId, NodeId)> {
        let op = self.nodes[id.0].op.clone();
        let inputs = self.nodes[id.0].inputs.clone();
        // Reduces an adjoint contribution down to a scalar operand's shape.
        fn reduce(g: &mut Graph, contrib: NodeId, target: NodeId) -> NodeId {
            if g.shape(target).is_scalar() && !g.shape(contrib).is_scalar() {
                g.sum(contrib)
            } else {
                contrib
            }
        }
        match op {
            Op::Leaf(_) | Op::Const(_) => vec![],
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                let ca = reduce(self, adj, a);
                let cb = reduce(self, adj, b);
                vec![(a, ca), (b, cb)]
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                let ca = reduce(self, adj, a);
                let nb = self.neg(adj);
                let cb = reduce(self, nb, b);
                vec![(a, ca), (b, cb)]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = self.mul(adj, b);
                let db = self.mul(adj, a);
                let ca = reduce(self, da, a);
                let cb = reduce(self, db, b);
                vec![(a, ca), (b, cb)]
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = self.div(adj, b);
                let ca = reduce(self, da, a);
                let num = self.mul(adj, a);
                let bb = self.mul(b, b);
                let q = self.div(num, bb);
                let nq = self.neg(q);
                let cb = reduce(self, nq, b);
                vec![(a, ca), (b, cb)]
            }
            Op::Neg => {
                let c = self.neg(adj);
                vec![(inputs[0], c)]
            }
            Op::Scale(k) => {
                let c = self.scale(adj, k);
                vec![(inputs[0], c)]
            }
            Op::AddConst(_) => vec![(inputs[0], adj)],
            Op::AddRow => {
                let dv = self.sum_rows(adj);
                vec![(inputs[0], adj), (inputs[1], dv)]
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                match (self.shape(a), self.shape(b)) {
                    (Shape::Matrix(..), Shape::Matrix(..)) => {
                        let da = match (ta, tb) {
                            (false, false) => self.matmul_f(adj, false, b, true),
                            (false, true) => self.matmul_f(adj, false, b, false),
                            (true, false) => self.matmul_f(b, false, adj, true),
                            (true, true) => self.matmul_f(b, true, adj, true),
                        };
                        let db = match (ta, tb) {
                            (false, false) => self.matmul_f(a, true, adj, false),
                            (false, true) => self.matmul_f(adj, true, a, false),
                            (true, false) => self.matmul_f(a, false, adj, false),
                            (true, true) => self.matmul_f(adj, true, a, true),
                        };
                        vec![(a, da), (b, db)]
                    }
                    (Shape::Matrix(..), Shape::Vector(_)) => {
                        let (da, db) = if ta {
                            (self.outer(b, adj), self.matmul_f(a, false, adj, false))
                        } else {
                            (self.outer(adj, b), self.matmul_f(a, true, adj, false))
                        };
                        vec![(a, da), (b, db)]
                    }
                    _ => unreachable!("matmul operand shapes"),
                }
            }
            Op::Outer => {
                let (u, v) = (inputs[0], inputs[1]);
                let du = self.matmul_f(adj, false, v, false);
                let dv = self.matmul_f(adj, true, u, false);
                vec![(u, du), (v, dv)]
            }
            Op::Sum => {
                let x = inputs[0];
                let sx = self.shape(x);
                if sx.is_scalar() {
                    vec![(x, adj)]
                } else {
                    let ones = self.constant(Tensor::filled(sx, 1.0));
                    let c = self.mul(ones, adj);
                    vec![(x, c)]
                }
            }
            Op::Mean => {
                let x = inputs[0];
                let sx = self.shape(x);
                let n = sx.len() as f64;
                let scaled = self.scale(adj, 1.0 / n);
                if sx.is_scalar() {
                    vec![(x, scaled)]
                } else {
                    let ones = self.constant(Tensor::filled(sx, 1.0));
                    let c = self.mul(ones, scaled);
                    vec![(x, c)]
                }
            }
            Op::SumRows => {
                let rows = match self.shape(inputs[0]) {
                    Shape::Matrix(r, _) => r,
                    _ => unreachable!(),
                };
                let c = self.broadcast_row(adj, rows);
                vec![(inputs[0], c)]
            }
            Op::SumCols => {
                let cols = match self.shape(inputs[0]) {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!(),
                };
                let c = self.broadcast_col(adj, cols);
                vec![(inputs[0], c)]
            }
            Op::BroadcastRow(_) => {
                let c = self.sum_rows(adj);
                vec![(inputs[0], c)]
            }
            Op::BroadcastCol(_) => {
                let c = self.sum_cols(adj);
                vec![(inputs[0], c)]
            }
            Op::Column(col) => {
                let cols = match self.shape(inputs[0]) {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!(),
                };
                let c = self.scatter_column(adj, col, cols);
                vec![(inputs[0], c)]
            }
            Op::ScatterColumn { col, .. } => {
                let c = self.column(adj, col);
                vec![(inputs[0], c)]
            }
            Op::ConcatCols => inputs
                .iter()
                .enumerate()
                .map(|(i, &inp)| {
                    let c = self.column(adj, i);
                    (inp, c)
                })
                .collect(),
            Op::Elu => {
                let d = self.elu_deriv(inputs[0]);
                let c = self.mul(adj, d);
                vec![(inputs[0], c)]
            }
            Op::EluDeriv | Op::EluSecond => {
                let d = self.unary(Op::EluSecond, inputs[0]);
                let c = self.mul(adj, d);
                vec![(inputs[0], c)]
            }
            Op::Relu => {
                let d = self.unary(Op::Step, inputs[0]);
                let c = self.mul(adj, d);
                vec![(inputs[0], c)]
            }
            // Zero almost everywhere; the distributional part at the kink is
            // dropped, which is exactly the §-motivating ReLU defect.
            Op::Step => vec![],
            Op::Sin => {
                let d = self.cos(inputs[0]);
                let c = self.mul(adj, d);
                vec![(inputs[0], c)]
            }
            Op::Cos => {
                let d = self.sin(inputs[0]);
                let m = self.mul(adj, d);
                let c = self.neg(m);
                vec![(inputs[0], c)]
            }
            Op::Exp => {
                let c = self.mul(adj, id);
                vec![(inputs[0], c)]
            }
            Op::Ln => {
                let c = self.div(adj, inputs[0]);
                vec![(inputs[0], c)]
            }
            Op::Sqrt => {
                let half = self.scale(adj, 0.5);
                let c = self.div(half, id);
                vec![(inputs[0], c)]
            }
            Op::Sigmoid => {
                let ns = self.neg(id);
                let om = self.add_const(ns, 1.0);
                let ss = self.mul(id, om);
                let c = self.mul(adj, ss);
                vec![(inputs[0], c)]
            }
            Op::Softplus(beta) => {
                let bx = self.scale(inputs[0], beta);
                let s = self.sigmoid(bx);
                let c = self.mul(adj, s);
                vec![(inputs[0], c)]
            }
            Op::LogSumExp => {
                let v = inputs[0];
                let centered = self.sub(v, id);
                let softmax = self.exp(centered);
                let c = self.mul(softmax, adj);
                vec![(v, c)]
            }
            Op::Dot => {
                let (u, v) = (inputs[0], inputs[1]);
                let du = self.mul(v, adj);
                let dv = self.mul(u, adj);
                vec![(u, du), (v, dv)]
            }
            Op::NormEps(_) => {
                let x = inputs[0];
                let num = self.mul(x, adj);
                let c = self.div(num, id);
                vec![(x, c)]
            }
        }
    }

    /// Compares the analytic gradient of `output` w.r.t. leaf `wrt` against
    /// central finite differences with step `h`; returns the worst relative
    /// error over components. Components where both values are below 1e−12
    /// are skipped.
    pub fn finite_difference_check(
        &mut self,
        output: NodeId,
        wrt: NodeId,
        bindings: &Bindings,
        h: f64,
    ) -> Result<f64, GraphError> {
        assert!(h > 0.0, "finite_difference_check: h must be positive");
        if !matches!(self.nodes[wrt.0].op, Op::Leaf(_)) {
            return Err(GraphError::NotALeaf { id: wrt.0 });
        }
        let grad = self.gradient_of(output, &[wrt], false)?[0];
        let analytic = self.evaluate(bindings, &[grad])?.remove(0);
        let base = bindings.get(wrt).expect("wrt bound").clone();
        let mut worst = 0.0_f64;
        for idx in 0..base.shape().len() {
            let eval_at = |g: &Graph, delta: f64| -> Result<f64, GraphError> {
                let mut t = base.clone();
                t.data_mut()[idx] += delta;
                let mut b = bindings.clone();
                b.bind(wrt, t);
                Ok(g.evaluate(&b, &[output])?.remove(0).as_scalar())
            };
            let fp = eval_at(self, h)?;
            let fm = eval_at(self, -h)?;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.at(idx);
            if an.abs() < 1e-12 && fd.abs() < 1e-12 {
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

/// Worst relative disagreement between two same-length vectors, with the
/// denominator floored at 1e−6 of the dominant magnitude so that
/// noise-level components do not dominate the comparison.
pub fn max_scaled_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max)
}

// ── Evaluation kernels ──────────────────────────────────────────────

fn stable_softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn stable_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn eval_op(op: &Op, ins: &[&Tensor], out_shape: Shape) -> Tensor {
    match op {
        Op::Leaf(_) | Op::Const(_) => unreachable!("handled by caller"),
        Op::Add => binary_broadcast(ins[0], ins[1], out_shape, |x, y| x + y),
        Op::Sub => binary_broadcast(ins[0], ins[1], out_shape, |x, y| x - y),
        Op::Mul => binary_broadcast(ins[0], ins[1], out_shape, |x, y| x * y),
        Op::Div => binary_broadcast(ins[0], ins[1], out_shape, |x, y| x / y),
        Op::Neg => map_unary(ins[0], |x| -x),
        Op::Scale(k) => map_unary(ins[0], |x| x * k),
        Op::AddConst(c) => map_unary(ins[0], |x| x + c),
        Op::AddRow => {
            let mut out = ins[0].clone();
            let v = ins[1].data();
            let cols = v.len();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += v[i % cols];
            }
            out
        }
        Op::MatMul { ta, tb } => matmul_kernel(ins[0], *ta, ins[1], *tb, out_shape),
        Op::Outer => {
            let (u, v) = (ins[0].data(), ins[1].data());
            let mut data = Vec::with_capacity(u.len() * v.len());
            for &x in u {
                for &y in v {
                    data.push(x * y);
                }
            }
            Tensor::matrix(u.len(), v.len(), data)
        }
        Op::Sum => Tensor::scalar(ins[0].data().iter().sum()),
        Op::Mean => {
            let n = ins[0].data().len() as f64;
            Tensor::scalar(ins[0].data().iter().sum::<f64>() / n)
        }
        Op::SumRows => {
            let (r, c) = matrix_dims(ins[0]);
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += ins[0].at2(i, j);
                }
            }
            Tensor::vector(out)
        }
        Op::SumCols => {
            let (r, c) = matrix_dims(ins[0]);
            let mut out = vec![0.0; r];
            for (i, o) in out.iter_mut().enumerate() {
                for j in 0..c {
                    *o += ins[0].at2(i, j);
                }
            }
            Tensor::vector(out)
        }
        Op::BroadcastRow(rows) => {
            let v = ins[0].data();
            let mut data = Vec::with_capacity(rows * v.len());
            for _ in 0..*rows {
                data.extend_from_slice(v);
            }
            Tensor::matrix(*rows, v.len(), data)
        }
        Op::BroadcastCol(cols) => {
            let v = ins[0].data();
            let mut data = Vec::with_capacity(v.len() * cols);
            for &x in v {
                for _ in 0..*cols {
                    data.push(x);
                }
            }
            Tensor::matrix(v.len(), *cols, data)
        }
        Op::Column(col) => {
            let (r, _) = matrix_dims(ins[0]);
            Tensor::vector((0..r).map(|i| ins[0].at2(i, *col)).collect())
        }
        Op::ScatterColumn { col, cols } => {
            let v = ins[0].data();
            let mut data = vec![0.0; v.len() * cols];
            for (i, &x) in v.iter().enumerate() {
                data[i * cols + col] = x;
            }
            Tensor::matrix(v.len(), *cols, data)
        }
        Op::ConcatCols => {
            let rows = ins[0].data().len();
            let cols = ins.len();
            let mut data = vec![0.0; rows * cols];
            for (j, t) in ins.iter().enumerate() {
                for (i, &x) in t.data().iter().enumerate() {
                    data[i * cols + j] = x;
                }
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::Elu => map_unary(ins[0], |x| if x > 0.0 { x } else { x.exp_m1() }),
        Op::EluDeriv => map_unary(ins[0], |x| if x > 0.0 { 1.0 } else { x.exp() }),
        Op::EluSecond => map_unary(ins[0], |x| if x > 0.0 { 0.0 } else { x.exp() }),
        Op::Relu => map_unary(ins[0], |x| x.max(0.0)),
        Op::Step => map_unary(ins[0], |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sin => map_unary(ins[0], f64::sin),
        Op::Cos => map_unary(ins[0], f64::cos),
        Op::Exp => map_unary(ins[0], f64::exp),
        Op::Ln => map_unary(ins[0], f64::ln),
        Op::Sqrt => map_unary(ins[0], f64::sqrt),
        Op::Sigmoid => map_unary(ins[0], stable_sigmoid),
        Op::Softplus(beta) => map_unary(ins[0], |x| stable_softplus(beta * x) / beta),
        Op::LogSumExp => {
            let v = ins[0].data();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Tensor::scalar(m);
            }
            let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
            Tensor::scalar(m + s.ln())
        }
        Op::Dot => {
            Tensor::scalar(ins[0].data().iter().zip(ins[1].data()).map(|(&x, &y)| x * y).sum())
        }
        Op::NormEps(eps) => {
            let s: f64 = ins[0].data().iter().map(|&x| x * x).sum();
            Tensor::scalar((s + eps * eps).sqrt())
        }
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        Shape::Matrix(r, c) => (r, c),
        s => panic!("expected matrix, got {s:?}"),
    }
}

fn binary_broadcast(a: &Tensor, b: &Tensor, out_shape: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = Tensor::zeros(out_shape);
    match (a.shape(), b.shape()) {
        (sa, sb) if sa == sb => {
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(x, y);
            }
        }
        (Shape::Scalar, _) => {
            let x = a.as_scalar();
            for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
                *o = f(x, y);
            }
        }
        (_, Shape::Scalar) => {
            let y = b.as_scalar();
            for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = f(x, y);
            }
        }
        (sa, sb) => panic!("binary op on {sa:?} and {sb:?}"),
    }
    out
}

fn matmul_kernel(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out_shape: Shape) -> Tensor {
    match (a.shape(), b.shape()) {
        (Shape::Matrix(ar, ac), Shape::Matrix(..)) => {
            let (m, n) = match out_shape {
                Shape::Matrix(m, n) => (m, n),
                _ => unreachable!(),
            };
            let k = if ta { ar } else { ac };
            let a_at = |i: usize, p: usize| if ta { a.at2(p, i) } else { a.at2(i, p) };
            let b_at = |p: usize, j: usize| if tb { b.at2(j, p) } else { b.at2(p, j) };
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a_at(i, p) * b_at(p, j);
                    }
                    data[i * n + j] = acc;
                }
            }
            Tensor::matrix(m, n, data)
        }
        (Shape::Matrix(..), Shape::Vector(_)) => {
            let m = out_shape.len();
            let k = b.data().len();
            let a_at = |i: usize, p: usize| if ta { a.at2(p, i) } else { a.at2(i, p) };
            let mut data = vec![0.0; m];
            for (i, o) in data.iter_mut().enumerate() {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a_at(i, p) * b.at(p);
                }
                *o = acc;
            }
            Tensor::vector(data)
        }
        _ => unreachable!("matmul operand shapes"),
    }
}
