//! Straight-line instruction tapes compiled from graph nodes.
//!
//! A tape evaluates a fixed set of per-point output nodes for `LANES` points
//! at a time. Every reachable node owns one slot of `LANES` values. Products
//! that feed only a single sum are folded into that sum, so a dense layer
//! costs one instruction per neuron instead of two nodes per weight.

use std::collections::HashMap;

use super::graph::{sigmoid, softplus, BinaryOp, Graph, Node, NodeId, UnaryOp};
use super::DiffError;

pub(crate) const LANES: usize = 16;

type Lane = [f64; LANES];

#[derive(Clone, Copy, Debug)]
enum Instr {
    Unary { op: UnaryOp, a: u32, out: u32 },
    Binary { op: BinaryOp, a: u32, b: u32, out: u32 },
    PowI { a: u32, n: i32, out: u32 },
    /// `operands[start..start + singles]` are added, the following
    /// `2 * pairs` entries are multiplied pairwise and added.
    Sum { start: u32, singles: u32, pairs: u32, out: u32 },
}

/// Values a tape needs besides its point columns.
pub(crate) struct TapeInputs<'a> {
    pub params: &'a [f64],
    /// Indexed by graph input id; `None` means unbound.
    pub globals: &'a [Option<f64>],
    pub externs: &'a [f64],
}

/// Row-major point data for a tape with `columns` columns.
pub(crate) struct Rows<'a> {
    pub data: &'a [f64],
    pub columns: usize,
    pub count: usize,
}

#[derive(Debug)]
pub(crate) struct Tape {
    n_slots: usize,
    /// Slots `[0, params.len())` hold parameters; `params[s]` is the index.
    params: Vec<u32>,
    /// Slots following the parameters hold externs; entry is the extern index.
    externs: Vec<u32>,
    consts: Vec<(u32, f64)>,
    globals: Vec<(u32, u32)>,
    columns: Vec<(u32, u32)>,
    instrs: Vec<Instr>,
    operands: Vec<u32>,
    outputs: Vec<u32>,
    input_names: Vec<String>,
}

#[inline(always)]
fn get(v: &[f64], s: u32) -> Lane {
    let o = s as usize * LANES;
    v[o..o + LANES].try_into().unwrap()
}

#[inline(always)]
fn put(v: &mut [f64], s: u32, x: &Lane) {
    let o = s as usize * LANES;
    v[o..o + LANES].copy_from_slice(x);
}

#[inline(always)]
fn acc(v: &mut [f64], s: u32, x: &Lane) {
    let o = s as usize * LANES;
    for (d, a) in v[o..o + LANES].iter_mut().zip(x) {
        *d += *a;
    }
}

impl Tape {
    /// Compiles `outputs`. Inputs listed in `columns` are read per point,
    /// nodes in `externs` are treated as scalar leaves, any other input is a
    /// global binding.
    pub(crate) fn compile(
        graph: &Graph,
        outputs: &[NodeId],
        columns: &[u32],
        externs: &HashMap<NodeId, u32>,
    ) -> Result<Tape, DiffError> {
        let n = graph.nodes.len();
        let mut reachable = vec![false; n];
        let mut stack: Vec<NodeId> = outputs.to_vec();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut reachable[id as usize], true) {
                continue;
            }
            match &graph.nodes[id as usize] {
                Node::BatchMean { .. } => {
                    if !externs.contains_key(&id) {
                        return Err(DiffError::NestedBatch);
                    }
                }
                node => stack.extend_from_slice(node.children().as_slice()),
            }
        }
        let order: Vec<NodeId> = (0..n as NodeId).filter(|&i| reachable[i as usize]).collect();

        let mut uses: HashMap<NodeId, u32> = HashMap::new();
        for &id in &order {
            if matches!(graph.nodes[id as usize], Node::BatchMean { .. }) {
                continue;
            }
            for &c in graph.nodes[id as usize].children().as_slice() {
                *uses.entry(c).or_default() += 1;
            }
        }
        for &o in outputs {
            *uses.entry(o).or_default() += 1;
        }
        let mut fused = vec![false; n];
        for &id in &order {
            if let Node::Sum(cs) = &graph.nodes[id as usize] {
                for &c in cs.iter() {
                    if matches!(graph.nodes[c as usize], Node::Binary(BinaryOp::Mul, _, _)) && uses[&c] == 1 {
                        fused[c as usize] = true;
                    }
                }
            }
        }

        let mut slot: HashMap<NodeId, u32> = HashMap::with_capacity(order.len());
        let mut tape = Tape {
            n_slots: 0,
            params: Vec::new(),
            externs: Vec::new(),
            consts: Vec::new(),
            globals: Vec::new(),
            columns: Vec::new(),
            instrs: Vec::new(),
            operands: Vec::new(),
            outputs: Vec::new(),
            input_names: graph.input_names.clone(),
        };
        let mut next = 0u32;
        let mut assign = |slot: &mut HashMap<NodeId, u32>, id: NodeId| {
            slot.insert(id, next);
            next += 1;
            next - 1
        };
        for &id in &order {
            if let Node::Param(p) = graph.nodes[id as usize] {
                assign(&mut slot, id);
                tape.params.push(p);
            }
        }
        for &id in &order {
            if let Some(&e) = externs.get(&id) {
                assign(&mut slot, id);
                tape.externs.push(e);
            }
        }
        for &id in &order {
            match graph.nodes[id as usize] {
                Node::Const(bits) => {
                    let s = assign(&mut slot, id);
                    tape.consts.push((s, f64::from_bits(bits)));
                }
                Node::Input(i) => {
                    let s = assign(&mut slot, id);
                    match columns.iter().position(|&c| c == i) {
                        Some(col) => tape.columns.push((s, col as u32)),
                        None => tape.globals.push((s, i)),
                    }
                }
                _ => {}
            }
        }
        for &id in &order {
            let node = &graph.nodes[id as usize];
            if fused[id as usize]
                || matches!(node, Node::Param(_) | Node::Const(_) | Node::Input(_) | Node::BatchMean { .. })
            {
                continue;
            }
            let out = assign(&mut slot, id);
            let instr = match node {
                Node::Unary(op, a) => Instr::Unary { op: *op, a: slot[a], out },
                Node::Binary(op, a, b) => Instr::Binary { op: *op, a: slot[a], b: slot[b], out },
                Node::PowI(a, k) => Instr::PowI { a: slot[a], n: *k, out },
                Node::Sum(cs) => {
                    let start = tape.operands.len() as u32;
                    let mut singles = 0;
                    for &c in cs.iter() {
                        if !fused[c as usize] {
                            tape.operands.push(slot[&c]);
                            singles += 1;
                        }
                    }
                    let mut pairs = 0;
                    for &c in cs.iter() {
                        if fused[c as usize] {
                            if let Node::Binary(BinaryOp::Mul, a, b) = graph.nodes[c as usize] {
                                tape.operands.push(slot[&a]);
                                tape.operands.push(slot[&b]);
                                pairs += 1;
                            }
                        }
                    }
                    Instr::Sum { start, singles, pairs, out }
                }
                _ => unreachable!(),
            };
            tape.instrs.push(instr);
        }
        tape.n_slots = next as usize;
        tape.outputs = outputs.iter().map(|o| slot[o]).collect();
        Ok(tape)
    }

    pub(crate) fn output_count(&self) -> usize {
        self.outputs.len()
    }

    pub(crate) fn max_param(&self) -> Option<u32> {
        self.params.iter().copied().max()
    }

    fn prepare(&self, vals: &mut [f64], inputs: &TapeInputs<'_>) -> Result<(), DiffError> {
        for (s, &p) in self.params.iter().enumerate() {
            let v = *inputs.params.get(p as usize).ok_or(DiffError::ParamLength {
                needed: p as usize + 1,
                got: inputs.params.len(),
            })?;
            put(vals, s as u32, &[v; LANES]);
        }
        let base = self.params.len();
        for (k, &e) in self.externs.iter().enumerate() {
            put(vals, (base + k) as u32, &[inputs.externs[e as usize]; LANES]);
        }
        for &(s, v) in &self.consts {
            put(vals, s, &[v; LANES]);
        }
        for &(s, i) in &self.globals {
            let v = inputs
                .globals
                .get(i as usize)
                .copied()
                .flatten()
                .ok_or_else(|| DiffError::Unbound(self.input_names[i as usize].clone()))?;
            put(vals, s, &[v; LANES]);
        }
        Ok(())
    }

    fn load(&self, vals: &mut [f64], rows: &Rows<'_>, start: usize, count: usize) {
        for &(s, col) in &self.columns {
            let mut lane = [0.0; LANES];
            for (l, slot) in lane.iter_mut().enumerate() {
                let r = if l < count { start + l } else { start };
                *slot = rows.data[r * rows.columns + col as usize];
            }
            put(vals, s, &lane);
        }
    }

    fn check_outputs(&self, vals: &[f64], count: usize) -> Result<(), DiffError> {
        for &o in &self.outputs {
            let lane = get(vals, o);
            if lane[..count].iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite);
            }
        }
        Ok(())
    }

    /// Per-point output values, row-major (`rows.count * outputs`).
    pub(crate) fn map(&self, inputs: &TapeInputs<'_>, rows: &Rows<'_>) -> Result<Vec<f64>, DiffError> {
        let mut vals = vec![0.0; self.n_slots * LANES];
        self.prepare(&mut vals, inputs)?;
        let k = self.outputs.len();
        let mut out = vec![0.0; rows.count * k];
        let mut start = 0;
        while start < rows.count {
            let count = LANES.min(rows.count - start);
            self.load(&mut vals, rows, start, count);
            self.forward(&mut vals);
            self.check_outputs(&vals, count)?;
            for (j, &o) in self.outputs.iter().enumerate() {
                let lane = get(&vals, o);
                for l in 0..count {
                    out[(start + l) * k + j] = lane[l];
                }
            }
            start += count;
        }
        Ok(out)
    }

    /// Sums every output over all rows. With `seeds`, also runs the reverse
    /// sweep with output `j` seeded by `seeds[j]` at every row, adding
    /// parameter adjoints into `grad` and extern adjoints into `extern_adj`.
    pub(crate) fn reduce(
        &self,
        inputs: &TapeInputs<'_>,
        rows: &Rows<'_>,
        seeds: Option<&[f64]>,
        grad: &mut [f64],
        extern_adj: &mut [f64],
        check_finite: bool,
    ) -> Result<Vec<f64>, DiffError> {
        let mut vals = vec![0.0; self.n_slots * LANES];
        self.prepare(&mut vals, inputs)?;
        let mut adj = match seeds {
            Some(_) => vec![0.0; self.n_slots * LANES],
            None => Vec::new(),
        };
        let leaf_end = (self.params.len() + self.externs.len()) * LANES;
        let mut sums = vec![0.0; self.outputs.len()];
        let mut start = 0;
        while start < rows.count {
            let count = LANES.min(rows.count - start);
            self.load(&mut vals, rows, start, count);
            self.forward(&mut vals);
            if check_finite {
                self.check_outputs(&vals, count)?;
            }
            for (j, &o) in self.outputs.iter().enumerate() {
                let lane = get(&vals, o);
                for v in &lane[..count] {
                    sums[j] += *v;
                }
            }
            if let Some(seeds) = seeds {
                adj[leaf_end..].fill(0.0);
                for (j, &o) in self.outputs.iter().enumerate() {
                    let mut lane = [0.0; LANES];
                    lane[..count].fill(seeds[j]);
                    acc(&mut adj, o, &lane);
                }
                self.reverse(&vals, &mut adj);
            }
            start += count;
        }
        if seeds.is_some() {
            for (s, &p) in self.params.iter().enumerate() {
                let lane = get(&adj, s as u32);
                grad[p as usize] += lane.iter().sum::<f64>();
            }
            let base = self.params.len();
            for (k, &e) in self.externs.iter().enumerate() {
                let lane = get(&adj, (base + k) as u32);
                extern_adj[e as usize] += lane.iter().sum::<f64>();
            }
        }
        Ok(sums)
    }

    fn forward(&self, v: &mut [f64]) {
        for instr in &self.instrs {
            match *instr {
                Instr::Unary { op, a, out } => {
                    let x = get(v, a);
                    let mut r = [0.0; LANES];
                    macro_rules! each {
                        ($f:expr) => {
                            for l in 0..LANES {
                                r[l] = $f(x[l]);
                            }
                        };
                    }
                    match op {
                        UnaryOp::Neg => each!(|a: f64| -a),
                        UnaryOp::Exp => each!(f64::exp),
                        UnaryOp::Log => each!(f64::ln),
                        UnaryOp::Sin => each!(f64::sin),
                        UnaryOp::Cos => each!(f64::cos),
                        UnaryOp::Tanh => each!(f64::tanh),
                        UnaryOp::Cosh => each!(f64::cosh),
                        UnaryOp::Sinh => each!(f64::sinh),
                        UnaryOp::Sqrt => each!(f64::sqrt),
                        UnaryOp::Softplus => each!(softplus),
                        UnaryOp::Sigmoid => each!(sigmoid),
                    }
                    put(v, out, &r);
                }
                Instr::Binary { op, a, b, out } => {
                    let (x, y) = (get(v, a), get(v, b));
                    let mut r = [0.0; LANES];
                    match op {
                        BinaryOp::Sub => (0..LANES).for_each(|l| r[l] = x[l] - y[l]),
                        BinaryOp::Mul => (0..LANES).for_each(|l| r[l] = x[l] * y[l]),
                        BinaryOp::Div => (0..LANES).for_each(|l| r[l] = x[l] / y[l]),
                    }
                    put(v, out, &r);
                }
                Instr::PowI { a, n, out } => {
                    let x = get(v, a);
                    let r = match n {
                        2 => x.map(|a| a * a),
                        3 => x.map(|a| a * a * a),
                        _ => x.map(|a| a.powi(n)),
                    };
                    put(v, out, &r);
                }
                Instr::Sum { start, singles, pairs, out } => {
                    let mut r = [0.0; LANES];
                    let s = start as usize;
                    for &k in &self.operands[s..s + singles as usize] {
                        let x = get(v, k);
                        (0..LANES).for_each(|l| r[l] += x[l]);
                    }
                    let p = s + singles as usize;
                    for pair in self.operands[p..p + 2 * pairs as usize].chunks_exact(2) {
                        let (x, y) = (get(v, pair[0]), get(v, pair[1]));
                        (0..LANES).for_each(|l| r[l] += x[l] * y[l]);
                    }
                    put(v, out, &r);
                }
            }
        }
    }

    fn reverse(&self, v: &[f64], adj: &mut [f64]) {
        for instr in self.instrs.iter().rev() {
            match *instr {
                Instr::Unary { op, a, out } => {
                    let g = get(adj, out);
                    let x = get(v, a);
                    let y = get(v, out);
                    let mut r = [0.0; LANES];
                    for l in 0..LANES {
                        r[l] = g[l]
                            * match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Exp => y[l],
                                UnaryOp::Log => 1.0 / x[l],
                                UnaryOp::Sin => x[l].cos(),
                                UnaryOp::Cos => -x[l].sin(),
                                UnaryOp::Tanh => 1.0 - y[l] * y[l],
                                UnaryOp::Cosh => x[l].sinh(),
                                UnaryOp::Sinh => x[l].cosh(),
                                UnaryOp::Sqrt => 0.5 / y[l],
                                UnaryOp::Softplus => sigmoid(x[l]),
                                UnaryOp::Sigmoid => y[l] * (1.0 - y[l]),
                            };
                    }
                    acc(adj, a, &r);
                }
                Instr::Binary { op, a, b, out } => {
                    let g = get(adj, out);
                    let (x, y) = (get(v, a), get(v, b));
                    let mut ga = [0.0; LANES];
                    let mut gb = [0.0; LANES];
                    match op {
                        BinaryOp::Sub => {
                            ga = g;
                            gb = g.map(|g| -g);
                        }
                        BinaryOp::Mul => {
                            (0..LANES).for_each(|l| {
                                ga[l] = g[l] * y[l];
                                gb[l] = g[l] * x[l];
                            });
                        }
                        BinaryOp::Div => {
                            let q = get(v, out);
                            (0..LANES).for_each(|l| {
                                ga[l] = g[l] / y[l];
                                gb[l] = -g[l] * q[l] / y[l];
                            });
                        }
                    }
                    acc(adj, a, &ga);
                    acc(adj, b, &gb);
                }
                Instr::PowI { a, n, out } => {
                    let g = get(adj, out);
                    let x = get(v, a);
                    let mut r = [0.0; LANES];
                    let k = n as f64;
                    match n {
                        2 => (0..LANES).for_each(|l| r[l] = g[l] * 2.0 * x[l]),
                        _ => (0..LANES).for_each(|l| r[l] = g[l] * k * x[l].powi(n - 1)),
                    }
                    acc(adj, a, &r);
                }
                Instr::Sum { start, singles, pairs, out } => {
                    let g = get(adj, out);
                    if g.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let s = start as usize;
                    for &k in &self.operands[s..s + singles as usize] {
                        acc(adj, k, &g);
                    }
                    let p = s + singles as usize;
                    for pair in self.operands[p..p + 2 * pairs as usize].chunks_exact(2) {
                        let (x, y) = (get(v, pair[0]), get(v, pair[1]));
                        let mut gx = [0.0; LANES];
                        let mut gy = [0.0; LANES];
                        (0..LANES).for_each(|l| {
                            gx[l] = g[l] * y[l];
                            gy[l] = g[l] * x[l];
                        });
                        acc(adj, pair[0], &gx);
                        acc(adj, pair[1], &gy);
                    }
                }
            }
        }
    }
}
