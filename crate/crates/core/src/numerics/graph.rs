//! Define-by-run reverse-mode differentiation over [`Array2`] values.
//!
//! A [`Graph`] is built fresh for every optimizer step. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward sweep simply walks it in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::array::row_log_softmax;
use crate::numerics::{Array2, ParamId, ParamSet};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Relu,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Scale(_) => "scale",
            ElementwiseOp::AddScalar(_) => "add_scalar",
            ElementwiseOp::Exp => "exp",
            ElementwiseOp::Relu => "relu",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Unary(ElementwiseOp, usize),
    Binary(ElementwiseOp, usize, usize),
    AddRowBias(usize, usize),
    LogSoftmax(usize),
    Dropout(usize, Array2),
    RepeatRows(usize, usize),
    TileRows(usize),
    Gather(usize, Vec<(usize, usize)>),
    Reshape(usize),
    Sum(usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, usize)>,
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

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op_name: &str, value: Array2, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives no parameter gradient.
    pub fn constant(&mut self, value: Array2) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice returns
    /// the same node, so its gradient is collected exactly once.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        if let Some(&(_, node)) = self.bound.iter().find(|(p, _)| *p == id) {
            return Ok(Var(node));
        }
        let v = self.push("param", params.value(id).clone(), Op::Leaf)?;
        self.bound.push((id, v.0));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a.0, b.0))
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let av = self.value(a);
        match (kind.is_binary(), b) {
            (true, Some(b)) => {
                let bv = self.value(b);
                let value = match kind {
                    ElementwiseOp::Add => av.zip_map(bv, |x, y| x + y),
                    ElementwiseOp::Sub => av.zip_map(bv, |x, y| x - y),
                    _ => av.zip_map(bv, |x, y| x * y),
                }
                .map_err(|_| {
                    Error::dim(
                        kind.name(),
                        format!("{:?} vs {:?}", av.shape(), bv.shape()),
                    )
                })?;
                self.push(kind.name(), value, Op::Binary(kind, a.0, b.0))
            }
            (false, None) => {
                let value = match kind {
                    ElementwiseOp::Scale(s) => av.map(|x| x * s),
                    ElementwiseOp::AddScalar(s) => av.map(|x| x + s),
                    ElementwiseOp::Exp => av.map(f64::exp),
                    _ => av.map(|x| if x > 0.0 { x } else { 0.0 }),
                };
                self.push(kind.name(), value, Op::Unary(kind, a.0))
            }
            (true, None) => Err(Error::Parameter(format!(
                "{} needs two operands",
                kind.name()
            ))),
            (false, Some(_)) => Err(Error::Parameter(format!(
                "{} takes one operand",
                kind.name()
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::Scale(s), a, None)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::AddScalar(s), a, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Exp, a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Relu, a, None)
    }

    /// `a + bias` with a 1xN bias broadcast over every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} for input {:?}", bv.shape(), av.shape()),
            ));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push("add_row_bias", value, Op::AddRowBias(a.0, bias.0))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(Error::NonFinite("row_log_softmax input".into()));
        }
        let value = row_log_softmax(self.value(a));
        self.push("row_log_softmax", value, Op::LogSoftmax(a.0))
    }

    /// Inverted dropout. Disabled or `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut R,
        enabled: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !enabled || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let (r, c) = self.value(a).shape();
        let mask_data = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let mask = Array2::from_vec(r, c, mask_data)?;
        let value = self.value(a).zip_map(&mask, |x, m| x * m)?;
        self.push("dropout", value, Op::Dropout(a.0, mask))
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let value = self.value(a).repeat_rows(k);
        self.push("repeat_rows", value, Op::RepeatRows(a.0, k))
    }

    pub fn tile_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let value = self.value(a).tile_rows(k);
        self.push("tile_rows", value, Op::TileRows(a.0))
    }

    /// Picks the listed `(row, col)` entries into an Nx1 column.
    pub fn gather(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in &entries {
            if r >= av.rows() || c >= av.cols() {
                return Err(Error::dim(
                    "gather",
                    format!("entry ({r}, {c}) outside {:?}", av.shape()),
                ));
            }
            data.push(av.get(r, c));
        }
        let value = Array2::from_vec(entries.len(), 1, data)?;
        self.push("gather", value, Op::Gather(a.0, entries))
    }

    /// Same data in row-major order, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = Array2::from_vec(rows, cols, self.value(a).data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Array2::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a.0))
    }

    /// Gradients of a scalar node with respect to every node of the graph.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose())?;
                    let db = self.nodes[*a].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da, &self.nodes);
                    accumulate(&mut grads, *b, db, &self.nodes);
                }
                Op::Binary(kind, a, b) => {
                    let (da, db) = match kind {
                        ElementwiseOp::Add => (g.clone(), g.clone()),
                        ElementwiseOp::Sub => (g.clone(), g.map(|x| -x)),
                        _ => (
                            g.zip_map(&self.nodes[*b].value, |x, y| x * y)?,
                            g.zip_map(&self.nodes[*a].value, |x, y| x * y)?,
                        ),
                    };
                    accumulate(&mut grads, *a, da, &self.nodes);
                    accumulate(&mut grads, *b, db, &self.nodes);
                }
                Op::Unary(kind, a) => {
                    let da = match kind {
                        ElementwiseOp::Scale(s) => g.map(|x| x * s),
                        ElementwiseOp::Exp => g.zip_map(&node.value, |x, y| x * y)?,
                        ElementwiseOp::Relu => g.zip_map(&self.nodes[*a].value, |x, y| {
                            if y > 0.0 {
                                x
                            } else {
                                0.0
                            }
                        })?,
                        _ => g,
                    };
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::AddRowBias(a, bias) => {
                    let mut db = Array2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *bias, db, &self.nodes);
                    accumulate(&mut grads, *a, g, &self.nodes);
                }
                Op::LogSoftmax(a) => {
                    let mut da = g;
                    for r in 0..da.rows() {
                        let total: f64 = da.row(r).iter().sum();
                        let out = node.value.row(r);
                        for (d, o) in da.row_mut(r).iter_mut().zip(out) {
                            *d -= o.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::Dropout(a, mask) => {
                    let da = g.zip_map(mask, |x, m| x * m)?;
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::RepeatRows(a, k) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Array2::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for (d, x) in da.row_mut(r / k).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::TileRows(a) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Array2::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for (d, x) in da.row_mut(r % src.rows()).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::Gather(a, entries) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Array2::zeros(src.rows(), src.cols());
                    for (i, &(r, c)) in entries.iter().enumerate() {
                        da.set(r, c, da.get(r, c) + g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::Reshape(a) => {
                    let src = &self.nodes[*a].value;
                    let da = Array2::from_vec(src.rows(), src.cols(), g.data().to_vec())?;
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let da = Array2::filled(r, c, g.get(0, 0));
                    accumulate(&mut grads, *a, da, &self.nodes);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs the backward sweep from `loss` and adds each bound learnable
    /// parameter's gradient into `params`. Calling it again without
    /// [`ParamSet::zero_grad`] accumulates.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for &(id, node) in &self.bound {
            if !params.get(id).learnable {
                continue;
            }
            if let Some(g) = grads.get(Var(node)) {
                params.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2>], idx: usize, g: Array2, nodes: &[Node]) {
    debug_assert_eq!(g.shape(), nodes[idx].value.shape());
    match &mut grads[idx] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2>>,
}

impl Gradients {
    /// Gradient of a leaf node, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
