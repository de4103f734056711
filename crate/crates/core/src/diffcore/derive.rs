//! Pushforward rules that turn a node into the node of its derivative with
//! respect to one named input. The result is an ordinary graph node, so it can
//! be differentiated again or swept in reverse for parameter gradients.

use super::graph::{BinaryOp, Graph, Node, NodeId, UnaryOp};
use super::{DiffError, ExprNode};

impl Graph {
    /// Derivative of `node` with respect to input `input`, `order` times.
    ///
    /// Mixed derivatives are built by nesting: `d(d(f, "t", 1)?, "x", 1)`.
    /// The total input-derivative order of any handle is capped at 2.
    pub fn d(&mut self, node: ExprNode, input: &str, order: u8) -> Result<ExprNode, DiffError> {
        let mut id = self.check(node)?;
        if !(1..=2).contains(&order) {
            return Err(DiffError::InvalidOrder(order));
        }
        if node.order + order > 2 {
            return Err(DiffError::OrderExceeded { have: node.order, requested: order });
        }
        let wrt = self.input_id(input).ok_or_else(|| DiffError::UnknownInput(input.to_string()))?;
        for _ in 0..order {
            id = self.derivative(id, wrt)?;
        }
        Ok(self.handle(id, node.order + order))
    }

    fn derivative(&mut self, root: NodeId, wrt: u32) -> Result<NodeId, DiffError> {
        if let Some(&d) = self.derivatives.get(&(root, wrt)) {
            return Ok(d);
        }
        if self.reduces[root as usize] {
            return Err(DiffError::DerivativeOfBatch);
        }
        // Children always have smaller ids, so ascending id order is topological.
        let mut pending = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if self.derivatives.contains_key(&(n, wrt)) || !seen.insert(n) {
                continue;
            }
            pending.push(n);
            stack.extend_from_slice(self.nodes[n as usize].children().as_slice());
        }
        pending.sort_unstable();
        for n in pending {
            let d = self.pushforward(n, wrt);
            self.derivatives.insert((n, wrt), d);
        }
        Ok(self.derivatives[&(root, wrt)])
    }

    fn dof(&self, n: NodeId, wrt: u32) -> NodeId {
        self.derivatives[&(n, wrt)]
    }

    fn pushforward(&mut self, n: NodeId, wrt: u32) -> NodeId {
        let node = self.nodes[n as usize].clone();
        match node {
            Node::Input(i) => self.konst(if i == wrt { 1.0 } else { 0.0 }),
            Node::Param(_) | Node::Const(_) => self.konst(0.0),
            Node::BatchMean { .. } => unreachable!("checked by caller"),
            Node::Sum(cs) => {
                let ds: Vec<NodeId> = cs.iter().map(|&c| self.dof(c, wrt)).collect();
                self.sum_ids(ds)
            }
            Node::Binary(op, a, b) => {
                let (da, db) = (self.dof(a, wrt), self.dof(b, wrt));
                match op {
                    BinaryOp::Sub => self.sub_ids(da, db),
                    BinaryOp::Mul => {
                        let l = self.mul_ids(da, b);
                        let r = self.mul_ids(a, db);
                        self.sum_ids(vec![l, r])
                    }
                    BinaryOp::Div => {
                        // (da - y * db) / b
                        let ydb = self.mul_ids(n, db);
                        let num = self.sub_ids(da, ydb);
                        self.div_ids(num, b)
                    }
                }
            }
            Node::PowI(a, k) => {
                let da = self.dof(a, wrt);
                if self.is_zero(da) {
                    return da;
                }
                let base = self.powi_id(a, k - 1);
                let c = self.konst(k as f64);
                let scaled = self.mul_ids(c, base);
                self.mul_ids(scaled, da)
            }
            Node::Unary(op, a) => {
                let da = self.dof(a, wrt);
                if self.is_zero(da) {
                    return da;
                }
                let local = match op {
                    UnaryOp::Neg => return self.unary_id(UnaryOp::Neg, da),
                    UnaryOp::Exp => n,
                    UnaryOp::Log => return self.div_ids(da, a),
                    UnaryOp::Sin => self.unary_id(UnaryOp::Cos, a),
                    UnaryOp::Cos => {
                        let s = self.unary_id(UnaryOp::Sin, a);
                        self.unary_id(UnaryOp::Neg, s)
                    }
                    UnaryOp::Tanh => {
                        let sq = self.powi_id(n, 2);
                        let one = self.konst(1.0);
                        self.sub_ids(one, sq)
                    }
                    UnaryOp::Cosh => self.unary_id(UnaryOp::Sinh, a),
                    UnaryOp::Sinh => self.unary_id(UnaryOp::Cosh, a),
                    UnaryOp::Sqrt => {
                        let two = self.konst(2.0);
                        let twice = self.mul_ids(two, n);
                        return self.div_ids(da, twice);
                    }
                    UnaryOp::Softplus => self.unary_id(UnaryOp::Sigmoid, a),
                    UnaryOp::Sigmoid => {
                        let one = self.konst(1.0);
                        let comp = self.sub_ids(one, n);
                        self.mul_ids(n, comp)
                    }
                };
                self.mul_ids(local, da)
            }
        }
    }
}
