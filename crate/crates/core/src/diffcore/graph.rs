use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::DiffError;

pub(crate) type NodeId = u32;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Primitive operations accepted by [`Graph::build`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// n-ary sum, at least two children.
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// Integer power with a fixed exponent.
    PowI(i32),
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Cosh,
    Sinh,
    Sqrt,
    /// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
    Softplus,
    Sigmoid,
}

impl Primitive {
    fn arity_ok(self, n: usize) -> bool {
        match self {
            Primitive::Add => n >= 2,
            Primitive::Sub | Primitive::Mul | Primitive::Div => n == 2,
            _ => n == 1,
        }
    }

    fn arity_label(self) -> &'static str {
        match self {
            Primitive::Add => "at least 2",
            Primitive::Sub | Primitive::Mul | Primitive::Div => "2",
            _ => "1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Cosh,
    Sinh,
    Sqrt,
    Softplus,
    Sigmoid,
}

impl UnaryOp {
    #[inline]
    pub(crate) fn apply(self, a: f64) -> f64 {
        match self {
            UnaryOp::Neg => -a,
            UnaryOp::Exp => a.exp(),
            UnaryOp::Log => a.ln(),
            UnaryOp::Sin => a.sin(),
            UnaryOp::Cos => a.cos(),
            UnaryOp::Tanh => a.tanh(),
            UnaryOp::Cosh => a.cosh(),
            UnaryOp::Sinh => a.sinh(),
            UnaryOp::Sqrt => a.sqrt(),
            UnaryOp::Softplus => softplus(a),
            UnaryOp::Sigmoid => sigmoid(a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum BinaryOp {
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[cfg_attr(not(test), allow(dead_code))]
    #[inline]
    pub(crate) fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn powi(a: f64, n: i32) -> f64 {
    a.powi(n)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Node {
    Input(u32),
    Param(u32),
    /// Bit pattern of the constant.
    Const(u64),
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    PowI(NodeId, i32),
    Sum(Box<[NodeId]>),
    /// Mean of `body` over the rows of a registered point batch.
    BatchMean { body: NodeId, batch: u32 },
}

impl Node {
    pub(crate) fn children(&self) -> NodeChildren<'_> {
        match self {
            Node::Input(_) | Node::Param(_) | Node::Const(_) => NodeChildren::Fixed([0, 0], 0),
            Node::Unary(_, a) | Node::PowI(a, _) => NodeChildren::Fixed([*a, 0], 1),
            Node::Binary(_, a, b) => NodeChildren::Fixed([*a, *b], 2),
            Node::Sum(cs) => NodeChildren::Slice(cs),
            Node::BatchMean { body, .. } => NodeChildren::Fixed([*body, 0], 1),
        }
    }
}

pub(crate) enum NodeChildren<'a> {
    Fixed([NodeId; 2], usize),
    Slice(&'a [NodeId]),
}

impl NodeChildren<'_> {
    pub(crate) fn as_slice(&self) -> &[NodeId] {
        match self {
            NodeChildren::Fixed(a, n) => &a[..*n],
            NodeChildren::Slice(s) => s,
        }
    }
}

/// Handle to a node of a [`Graph`].
///
/// Handles are cheap to copy. `order` counts how many input differentiations
/// produced the handle; it is capped at 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExprNode {
    pub(crate) graph: u32,
    pub(crate) id: NodeId,
    pub(crate) order: u8,
}

impl ExprNode {
    /// Input-derivative order carried by this handle.
    pub fn derivative_order(&self) -> u8 {
        self.order
    }
}

/// Rows of named point coordinates, stored row-major.
#[derive(Clone, Debug)]
pub(crate) struct Batch {
    pub(crate) columns: Vec<u32>,
    pub(crate) data: Vec<f64>,
    pub(crate) rows: usize,
}

/// Identifier of a point batch registered with [`Graph::add_batch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchId(pub(crate) u32);

/// Append-only scalar expression graph.
///
/// Structurally identical nodes are shared, so repeated construction of the
/// same subexpression (common when differentiating) costs nothing extra.
#[derive(Debug)]
pub struct Graph {
    pub(crate) id: u32,
    pub(crate) nodes: Vec<Node>,
    /// Whether the node (transitively) contains a batch mean.
    pub(crate) reduces: Vec<bool>,
    interned: HashMap<Node, NodeId>,
    pub(crate) input_names: Vec<String>,
    input_lookup: HashMap<String, u32>,
    pub(crate) param_count: usize,
    pub(crate) derivatives: HashMap<(NodeId, u32), NodeId>,
    pub(crate) batches: Vec<Batch>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            reduces: Vec::new(),
            interned: HashMap::new(),
            input_names: Vec::new(),
            input_lookup: HashMap::new(),
            param_count: 0,
            derivatives: HashMap::new(),
            batches: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of parameter slots referenced so far (highest index + 1).
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub(crate) fn input_id(&self, name: &str) -> Option<u32> {
        self.input_lookup.get(name).copied()
    }

    pub(crate) fn handle(&self, id: NodeId, order: u8) -> ExprNode {
        ExprNode { graph: self.id, id, order }
    }

    pub(crate) fn check(&self, node: ExprNode) -> Result<NodeId, DiffError> {
        if node.graph != self.id || node.id as usize >= self.nodes.len() {
            return Err(DiffError::ForeignNode);
        }
        Ok(node.id)
    }

    fn own(&self, node: ExprNode) -> NodeId {
        match self.check(node) {
            Ok(id) => id,
            Err(_) => panic!("expression node does not belong to this graph"),
        }
    }

    pub(crate) fn intern(&mut self, node: Node) -> NodeId {
        if let Some(&id) = self.interned.get(&node) {
            return id;
        }
        let id = self.nodes.len() as NodeId;
        let reduces = matches!(node, Node::BatchMean { .. })
            || node.children().as_slice().iter().any(|&c| self.reduces[c as usize]);
        self.nodes.push(node.clone());
        self.reduces.push(reduces);
        self.interned.insert(node, id);
        id
    }

    /// Named input leaf; the same name always returns the same leaf.
    pub fn input(&mut self, name: &str) -> ExprNode {
        let idx = match self.input_lookup.get(name) {
            Some(&i) => i,
            None => {
                let i = self.input_names.len() as u32;
                self.input_names.push(name.to_string());
                self.input_lookup.insert(name.to_string(), i);
                i
            }
        };
        let id = self.intern(Node::Input(idx));
        self.handle(id, 0)
    }

    /// Parameter leaf bound to `params[index]` at evaluation time.
    pub fn param(&mut self, index: usize) -> ExprNode {
        self.param_count = self.param_count.max(index + 1);
        let id = self.intern(Node::Param(index as u32));
        self.handle(id, 0)
    }

    pub fn constant(&mut self, value: f64) -> ExprNode {
        let id = self.konst(value);
        self.handle(id, 0)
    }

    /// Checked construction of a primitive application.
    pub fn build(&mut self, prim: Primitive, children: &[ExprNode]) -> Result<ExprNode, DiffError> {
        if !prim.arity_ok(children.len()) {
            return Err(DiffError::Arity {
                primitive: prim,
                expected: prim.arity_label(),
                got: children.len(),
            });
        }
        let mut ids = Vec::with_capacity(children.len());
        for &c in children {
            ids.push(self.check(c)?);
        }
        let order = children.iter().map(|c| c.order).max().unwrap_or(0);
        let id = match prim {
            Primitive::Add => self.sum_ids(ids),
            Primitive::Sub => self.sub_ids(ids[0], ids[1]),
            Primitive::Mul => self.mul_ids(ids[0], ids[1]),
            Primitive::Div => self.div_ids(ids[0], ids[1]),
            Primitive::PowI(n) => self.powi_id(ids[0], n),
            Primitive::Neg => self.unary_id(UnaryOp::Neg, ids[0]),
            Primitive::Exp => self.unary_id(UnaryOp::Exp, ids[0]),
            Primitive::Log => self.unary_id(UnaryOp::Log, ids[0]),
            Primitive::Sin => self.unary_id(UnaryOp::Sin, ids[0]),
            Primitive::Cos => self.unary_id(UnaryOp::Cos, ids[0]),
            Primitive::Tanh => self.unary_id(UnaryOp::Tanh, ids[0]),
            Primitive::Cosh => self.unary_id(UnaryOp::Cosh, ids[0]),
            Primitive::Sinh => self.unary_id(UnaryOp::Sinh, ids[0]),
            Primitive::Sqrt => self.unary_id(UnaryOp::Sqrt, ids[0]),
            Primitive::Softplus => self.unary_id(UnaryOp::Softplus, ids[0]),
            Primitive::Sigmoid => self.unary_id(UnaryOp::Sigmoid, ids[0]),
        };
        Ok(self.handle(id, order))
    }

    // Infallible helpers. They panic when handed a node from another graph,
    // which is a programming error rather than a data error.

    fn un(&mut self, op: UnaryOp, a: ExprNode) -> ExprNode {
        let id = self.unary_id(op, self.own(a));
        self.handle(id, a.order)
    }

    pub fn add(&mut self, a: ExprNode, b: ExprNode) -> ExprNode {
        self.sum(&[a, b])
    }

    /// n-ary sum; an empty slice gives the constant 0.
    pub fn sum(&mut self, terms: &[ExprNode]) -> ExprNode {
        let ids = terms.iter().map(|&t| self.own(t)).collect();
        let id = self.sum_ids(ids);
        self.handle(id, terms.iter().map(|t| t.order).max().unwrap_or(0))
    }

    pub fn sub(&mut self, a: ExprNode, b: ExprNode) -> ExprNode {
        let id = self.sub_ids(self.own(a), self.own(b));
        self.handle(id, a.order.max(b.order))
    }

    pub fn mul(&mut self, a: ExprNode, b: ExprNode) -> ExprNode {
        let id = self.mul_ids(self.own(a), self.own(b));
        self.handle(id, a.order.max(b.order))
    }

    pub fn div(&mut self, a: ExprNode, b: ExprNode) -> ExprNode {
        let id = self.div_ids(self.own(a), self.own(b));
        self.handle(id, a.order.max(b.order))
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, c: f64, a: ExprNode) -> ExprNode {
        let k = self.konst(c);
        let id = self.mul_ids(k, self.own(a));
        self.handle(id, a.order)
    }

    pub fn powi(&mut self, a: ExprNode, n: i32) -> ExprNode {
        let id = self.powi_id(self.own(a), n);
        self.handle(id, a.order)
    }

    pub fn neg(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Log, a)
    }
    pub fn sin(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Sin, a)
    }
    pub fn cos(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Cos, a)
    }
    pub fn tanh(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Tanh, a)
    }
    pub fn cosh(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Cosh, a)
    }
    pub fn sinh(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Sinh, a)
    }
    pub fn sqrt(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Sqrt, a)
    }
    pub fn softplus(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: ExprNode) -> ExprNode {
        self.un(UnaryOp::Sigmoid, a)
    }

    /// Registers a batch of points. `rows` is row-major with one value per
    /// column name per point.
    pub fn add_batch(&mut self, columns: &[&str], rows: &[f64]) -> Result<BatchId, DiffError> {
        if columns.is_empty() {
            return Err(DiffError::Batch("a batch needs at least one column".into()));
        }
        if rows.len() % columns.len() != 0 {
            return Err(DiffError::Batch(format!(
                "{} values do not divide into rows of {} columns",
                rows.len(),
                columns.len()
            )));
        }
        let mut ids = Vec::with_capacity(columns.len());
        for (i, name) in columns.iter().enumerate() {
            if columns[..i].contains(name) {
                return Err(DiffError::Batch(format!("duplicate column '{name}'")));
            }
            let leaf = self.input(name);
            match self.nodes[leaf.id as usize] {
                Node::Input(idx) => ids.push(idx),
                _ => unreachable!(),
            }
        }
        self.batches.push(Batch { rows: rows.len() / columns.len(), columns: ids, data: rows.to_vec() });
        Ok(BatchId(self.batches.len() as u32 - 1))
    }

    pub fn batch_len(&self, batch: BatchId) -> usize {
        self.batches[batch.0 as usize].rows
    }

    /// Mean of `body` over every row of `batch`, with the batch columns bound
    /// per row. An empty batch gives the constant 0.
    pub fn batch_mean(&mut self, body: ExprNode, batch: BatchId) -> Result<ExprNode, DiffError> {
        let body_id = self.check(body)?;
        let b = self.batches.get(batch.0 as usize).ok_or_else(|| DiffError::Batch("unknown batch".into()))?;
        if self.reduces[body_id as usize] {
            return Err(DiffError::NestedBatch);
        }
        if b.rows == 0 {
            return Ok(self.constant(0.0));
        }
        let id = self.intern(Node::BatchMean { body: body_id, batch: batch.0 });
        Ok(self.handle(id, body.order))
    }

    // --- simplifying constructors on raw ids ---

    pub(crate) fn konst(&mut self, v: f64) -> NodeId {
        // Normalise -0.0 so that zero detection is a single bit pattern.
        let v = if v == 0.0 { 0.0 } else { v };
        self.intern(Node::Const(v.to_bits()))
    }

    pub(crate) fn const_value(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id as usize] {
            Node::Const(bits) => Some(f64::from_bits(bits)),
            _ => None,
        }
    }

    pub(crate) fn is_zero(&self, id: NodeId) -> bool {
        self.const_value(id) == Some(0.0)
    }

    pub(crate) fn unary_id(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        if let Some(v) = self.const_value(a) {
            return self.konst(op.apply(v));
        }
        if op == UnaryOp::Neg {
            if let Node::Unary(UnaryOp::Neg, inner) = self.nodes[a as usize] {
                return inner;
            }
        }
        self.intern(Node::Unary(op, a))
    }

    pub(crate) fn sum_ids(&mut self, ids: Vec<NodeId>) -> NodeId {
        let mut terms = Vec::with_capacity(ids.len());
        let mut folded = 0.0;
        let mut has_const = false;
        for id in ids {
            if let Some(v) = self.const_value(id) {
                if v != 0.0 {
                    folded += v;
                    has_const = true;
                }
            } else {
                terms.push(id);
            }
        }
        if has_const && folded != 0.0 {
            let k = self.konst(folded);
            terms.push(k);
        }
        match terms.len() {
            0 => self.konst(0.0),
            1 => terms[0],
            _ => self.intern(Node::Sum(terms.into_boxed_slice())),
        }
    }

    pub(crate) fn sub_ids(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.konst(x - y),
            (_, Some(y)) if y == 0.0 => a,
            (Some(x), _) if x == 0.0 => self.unary_id(UnaryOp::Neg, b),
            _ => self.intern(Node::Binary(BinaryOp::Sub, a, b)),
        }
    }

    pub(crate) fn mul_ids(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.konst(x * y),
            (Some(x), _) if x == 0.0 => a,
            (_, Some(y)) if y == 0.0 => b,
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => self.unary_id(UnaryOp::Neg, b),
            (_, Some(y)) if y == -1.0 => self.unary_id(UnaryOp::Neg, a),
            _ => self.intern(Node::Binary(BinaryOp::Mul, a, b)),
        }
    }

    pub(crate) fn div_ids(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.konst(x / y),
            (Some(x), _) if x == 0.0 => a,
            (_, Some(y)) if y == 1.0 => a,
            _ => self.intern(Node::Binary(BinaryOp::Div, a, b)),
        }
    }

    pub(crate) fn powi_id(&mut self, a: NodeId, n: i32) -> NodeId {
        if let Some(v) = self.const_value(a) {
            return self.konst(powi(v, n));
        }
        match n {
            0 => self.konst(1.0),
            1 => a,
            _ => self.intern(Node::PowI(a, n)),
        }
    }
}
