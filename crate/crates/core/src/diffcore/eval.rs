use std::collections::{BTreeMap, HashMap};

use super::graph::{BinaryOp, Graph, Node, NodeId};
use super::tape::{Rows, Tape, TapeInputs};
use super::{DiffError, ExprNode};

/// Input values and parameter vector for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<String, f64>,
    params: &'a [f64],
}

impl<'a> Bindings<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        Bindings { values: HashMap::new(), params }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn params(&self) -> &'a [f64] {
        self.params
    }

    fn resolve(&self, names: &[String]) -> Vec<Option<f64>> {
        names.iter().map(|n| self.values.get(n).copied()).collect()
    }
}

struct BatchPlan {
    tape: Tape,
    /// Extern index of each tape output.
    externs: Vec<u32>,
    data: Vec<f64>,
    columns: usize,
    rows: usize,
}

/// Values and parameter gradient from [`Evaluator::gradient`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Compiled evaluation of a fixed set of root nodes, reusable across
/// parameter updates and input bindings.
///
/// Batch means are evaluated by per-point tapes; everything above them runs
/// on a single-point outer tape. When the roots are linear in the batch means
/// (every loss in this crate), the gradient needs one forward and one reverse
/// sweep per batch.
pub struct Evaluator {
    outer: Tape,
    batches: Vec<BatchPlan>,
    extern_count: usize,
    linear: bool,
    param_count: usize,
    input_names: Vec<String>,
}

impl Evaluator {
    pub fn new(graph: &Graph, roots: &[ExprNode]) -> Result<Evaluator, DiffError> {
        let root_ids = roots.iter().map(|&r| graph.check(r)).collect::<Result<Vec<_>, _>>()?;

        // Batch means reachable from the roots without entering their bodies.
        let mut seen = vec![false; graph.nodes.len()];
        let mut stack = root_ids.clone();
        let mut means = Vec::new();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id as usize], true) {
                continue;
            }
            match &graph.nodes[id as usize] {
                Node::BatchMean { .. } => means.push(id),
                node => stack.extend_from_slice(node.children().as_slice()),
            }
        }
        means.sort_unstable();
        let externs: HashMap<NodeId, u32> = means.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();

        let mut grouped: BTreeMap<u32, Vec<(NodeId, u32)>> = BTreeMap::new();
        for (i, &id) in means.iter().enumerate() {
            if let Node::BatchMean { body, batch } = graph.nodes[id as usize] {
                grouped.entry(batch).or_default().push((body, i as u32));
            }
        }
        let mut batches = Vec::new();
        for (batch, members) in grouped {
            let b = &graph.batches[batch as usize];
            let bodies: Vec<NodeId> = members.iter().map(|m| m.0).collect();
            let tape = Tape::compile(graph, &bodies, &b.columns, &HashMap::new())?;
            batches.push(BatchPlan {
                tape,
                externs: members.iter().map(|m| m.1).collect(),
                data: b.data.clone(),
                columns: b.columns.len(),
                rows: b.rows,
            });
        }
        let outer = Tape::compile(graph, &root_ids, &[], &externs)?;
        Ok(Evaluator {
            outer,
            batches,
            extern_count: means.len(),
            linear: linear_in_means(graph, &root_ids),
            param_count: graph.param_count,
            input_names: graph.input_names.clone(),
        })
    }

    pub fn root_count(&self) -> usize {
        self.outer.output_count()
    }

    /// Length of gradients returned by [`Evaluator::gradient`].
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    fn check_params(&self, b: &Bindings<'_>) -> Result<(), DiffError> {
        let needed = std::iter::once(&self.outer)
            .chain(self.batches.iter().map(|p| &p.tape))
            .filter_map(|t| t.max_param())
            .max()
            .map_or(0, |m| m as usize + 1);
        if b.params.len() < needed {
            return Err(DiffError::ParamLength { needed, got: b.params.len() });
        }
        Ok(())
    }

    fn batch_values(&self, globals: &[Option<f64>], params: &[f64]) -> Result<Vec<f64>, DiffError> {
        let mut ext = vec![0.0; self.extern_count];
        let inputs = TapeInputs { params, globals, externs: &[] };
        for plan in &self.batches {
            let rows = Rows { data: &plan.data, columns: plan.columns, count: plan.rows };
            let sums = plan.tape.reduce(&inputs, &rows, None, &mut [], &mut [], true)?;
            for (k, &e) in plan.externs.iter().enumerate() {
                ext[e as usize] = sums[k] / plan.rows as f64;
            }
        }
        Ok(ext)
    }

    fn run_outer(
        &self,
        globals: &[Option<f64>],
        params: &[f64],
        ext: &[f64],
        seeds: Option<&[f64]>,
        grad: &mut [f64],
        ext_adj: &mut [f64],
        check: bool,
    ) -> Result<Vec<f64>, DiffError> {
        let inputs = TapeInputs { params, globals, externs: ext };
        let rows = Rows { data: &[], columns: 0, count: 1 };
        self.outer.reduce(&inputs, &rows, seeds, grad, ext_adj, check)
    }

    /// Values of all roots.
    pub fn values(&self, b: &Bindings<'_>) -> Result<Vec<f64>, DiffError> {
        self.check_params(b)?;
        let globals = b.resolve(&self.input_names);
        let ext = self.batch_values(&globals, b.params)?;
        self.run_outer(&globals, b.params, &ext, None, &mut [], &mut [], true)
    }

    /// Values of all roots and the gradient of `Σ seeds[i] * root[i]` with
    /// respect to every parameter.
    pub fn gradient(&self, b: &Bindings<'_>, seeds: &[f64]) -> Result<Evaluation, DiffError> {
        self.check_params(b)?;
        assert_eq!(seeds.len(), self.root_count(), "one seed per root");
        let globals = b.resolve(&self.input_names);
        let params = b.params;
        let mut grad = vec![0.0; self.param_count];
        let mut ext_adj = vec![0.0; self.extern_count];

        let values = if self.linear {
            // Adjoints of the means do not depend on their values.
            let zeros = vec![0.0; self.extern_count];
            self.run_outer(&globals, params, &zeros, Some(seeds), &mut grad, &mut ext_adj, false)?;
            let mut ext = vec![0.0; self.extern_count];
            let inputs = TapeInputs { params, globals: &globals, externs: &[] };
            for plan in &self.batches {
                let n = plan.rows as f64;
                let local: Vec<f64> = plan.externs.iter().map(|&e| ext_adj[e as usize] / n).collect();
                let rows = Rows { data: &plan.data, columns: plan.columns, count: plan.rows };
                let seeded = local.iter().any(|&s| s != 0.0);
                let sums = plan.tape.reduce(&inputs, &rows, seeded.then_some(&local[..]), &mut grad, &mut [], true)?;
                for (k, &e) in plan.externs.iter().enumerate() {
                    ext[e as usize] = sums[k] / n;
                }
            }
            self.run_outer(&globals, params, &ext, None, &mut [], &mut [], true)?
        } else {
            let ext = self.batch_values(&globals, params)?;
            let values = self.run_outer(&globals, params, &ext, Some(seeds), &mut grad, &mut ext_adj, true)?;
            let inputs = TapeInputs { params, globals: &globals, externs: &[] };
            for plan in &self.batches {
                let n = plan.rows as f64;
                let local: Vec<f64> = plan.externs.iter().map(|&e| ext_adj[e as usize] / n).collect();
                if local.iter().all(|&s| s == 0.0) {
                    continue;
                }
                let rows = Rows { data: &plan.data, columns: plan.columns, count: plan.rows };
                plan.tape.reduce(&inputs, &rows, Some(&local), &mut grad, &mut [], true)?;
            }
            values
        };
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(DiffError::NonFiniteGradient { index });
        }
        Ok(Evaluation { values, grad })
    }
}

/// True when every root is an affine function of the batch means whose
/// coefficients involve neither the means nor any parameter.
fn linear_in_means(graph: &Graph, roots: &[NodeId]) -> bool {
    let mut mark = vec![false; graph.nodes.len()];
    let mut stack = roots.to_vec();
    while let Some(id) = stack.pop() {
        if std::mem::replace(&mut mark[id as usize], true) {
            continue;
        }
        if !matches!(graph.nodes[id as usize], Node::BatchMean { .. }) {
            stack.extend_from_slice(graph.nodes[id as usize].children().as_slice());
        }
    }
    // (depends on a mean, depends on a parameter)
    let mut dep: HashMap<NodeId, (bool, bool)> = HashMap::new();
    for id in (0..graph.nodes.len() as NodeId).filter(|&i| mark[i as usize]) {
        let node = &graph.nodes[id as usize];
        let of = |c: &NodeId| dep[c];
        let d = match node {
            Node::BatchMean { .. } => (true, false),
            Node::Param(_) => (false, true),
            Node::Input(_) | Node::Const(_) => (false, false),
            Node::Sum(cs) => cs.iter().map(of).fold((false, false), |a, b| (a.0 | b.0, a.1 | b.1)),
            Node::Binary(op, a, b) => {
                let (da, db) = (of(a), of(b));
                let linear = match op {
                    BinaryOp::Sub => true,
                    BinaryOp::Mul => !(da.0 && (db.0 || db.1)) && !(db.0 && (da.0 || da.1)),
                    BinaryOp::Div => !db.0 && !(da.0 && db.1),
                };
                if !linear {
                    return false;
                }
                (da.0 | db.0, da.1 | db.1)
            }
            Node::Unary(op, a) => {
                let da = of(a);
                if da.0 && *op != super::graph::UnaryOp::Neg {
                    return false;
                }
                da
            }
            Node::PowI(a, _) => {
                let da = of(a);
                if da.0 {
                    return false;
                }
                da
            }
        };
        dep.insert(id, d);
    }
    true
}

/// Per-point evaluation of a set of output nodes over rows of named columns.
pub struct PointMap {
    tape: Tape,
    columns: usize,
    input_names: Vec<String>,
}

impl PointMap {
    pub fn new(graph: &Graph, outputs: &[ExprNode], columns: &[&str]) -> Result<PointMap, DiffError> {
        let ids = outputs.iter().map(|&o| graph.check(o)).collect::<Result<Vec<_>, _>>()?;
        let cols = columns
            .iter()
            .map(|c| graph.input_id(c).ok_or_else(|| DiffError::UnknownInput(c.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let tape = Tape::compile(graph, &ids, &cols, &HashMap::new())?;
        Ok(PointMap { tape, columns: columns.len(), input_names: graph.input_names.clone() })
    }

    /// Row-major `(rows, outputs)` values for row-major `(rows, columns)` data.
    pub fn apply(&self, b: &Bindings<'_>, data: &[f64]) -> Result<Vec<f64>, DiffError> {
        if self.columns == 0 || data.len() % self.columns != 0 {
            return Err(DiffError::Batch("point data does not match the column count".into()));
        }
        let globals = b.resolve(&self.input_names);
        let inputs = TapeInputs { params: b.params, globals: &globals, externs: &[] };
        let rows = Rows { data, columns: self.columns, count: data.len() / self.columns };
        self.tape.map(&inputs, &rows)
    }
}

impl Graph {
    /// Evaluates a single node.
    pub fn eval(&self, node: ExprNode, b: &Bindings<'_>) -> Result<f64, DiffError> {
        Ok(Evaluator::new(self, &[node])?.values(b)?[0])
    }

    /// Gradient of `node` with respect to every parameter leaf.
    pub fn param_grad(&self, node: ExprNode, b: &Bindings<'_>) -> Result<Vec<f64>, DiffError> {
        Ok(Evaluator::new(self, &[node])?.gradient(b, &[1.0])?.grad)
    }

    pub fn evaluator(&self, roots: &[ExprNode]) -> Result<Evaluator, DiffError> {
        Evaluator::new(self, roots)
    }
}
