use std::collections::HashMap;
use std::f64::consts::PI;

use proptest::prelude::*;

use super::graph::{powi, Node};
use super::*;

/// Straightforward recursive interpreter used as a reference for the tapes.
fn naive(g: &Graph, node: ExprNode, inputs: &HashMap<&str, f64>, params: &[f64]) -> f64 {
    fn go(g: &Graph, id: u32, vals: &[Option<f64>], params: &[f64]) -> f64 {
        match &g.nodes[id as usize] {
            Node::Input(i) => vals[*i as usize].expect("bound"),
            Node::Param(i) => params[*i as usize],
            Node::Const(bits) => f64::from_bits(*bits),
            Node::Unary(op, a) => op.apply(go(g, *a, vals, params)),
            Node::Binary(op, a, b) => op.apply(go(g, *a, vals, params), go(g, *b, vals, params)),
            Node::PowI(a, k) => powi(go(g, *a, vals, params), *k),
            Node::Sum(cs) => cs.iter().map(|&c| go(g, c, vals, params)).sum(),
            Node::BatchMean { body, batch } => {
                let b = &g.batches[*batch as usize];
                let mut acc = 0.0;
                for r in 0..b.rows {
                    let mut v = vals.to_vec();
                    for (k, &col) in b.columns.iter().enumerate() {
                        v[col as usize] = Some(b.data[r * b.columns.len() + k]);
                    }
                    acc += go(g, *body, &v, params);
                }
                acc / b.rows as f64
            }
        }
    }
    let vals: Vec<Option<f64>> = g.input_names.iter().map(|n| inputs.get(n.as_str()).copied()).collect();
    go(g, node.id, &vals, params)
}

fn at(x: f64) -> Bindings<'static> {
    Bindings::new(&[]).with("x", x)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

// --- examples -----------------------------------------------------------

#[test]
fn build_examples() {
    let mut g = Graph::new();
    let x = g.input("x");
    let t = g.build(Primitive::Tanh, &[x]).unwrap();
    assert_eq!(g.eval(t, &at(0.0)).unwrap(), 0.0);
    let s = g.sin(x);
    let xs = g.build(Primitive::Mul, &[x, s]).unwrap();
    assert!(g.eval(xs, &at(PI)).unwrap().abs() < 1e-15);
    let zero = g.constant(0.0);
    let sp = g.build(Primitive::Softplus, &[zero]).unwrap();
    assert!((g.eval(sp, &at(0.0)).unwrap() - 0.6931472).abs() < 1e-7);
}

#[test]
fn build_rejects_bad_arity_and_foreign_children() {
    let mut g = Graph::new();
    let x = g.input("x");
    assert!(matches!(g.build(Primitive::Sin, &[x, x]), Err(DiffError::Arity { got: 2, .. })));
    assert!(matches!(g.build(Primitive::Add, &[x]), Err(DiffError::Arity { got: 1, .. })));
    assert!(matches!(g.build(Primitive::Div, &[]), Err(DiffError::Arity { got: 0, .. })));
    let mut other = Graph::new();
    let y = other.input("x");
    assert_eq!(g.build(Primitive::Exp, &[y]), Err(DiffError::ForeignNode));
}

#[test]
fn build_grows_graph_by_constant_amount() {
    let mut g = Graph::new();
    let x = g.input("x");
    let mut cur = x;
    let before = g.node_count();
    for k in 0..50 {
        let c = g.constant(k as f64 + 0.5);
        cur = g.build(Primitive::Mul, &[cur, c]).unwrap();
    }
    assert!(g.node_count() - before <= 100);
}

#[test]
fn derivative_examples() {
    let mut g = Graph::new();
    let x = g.input("x");
    let t = g.tanh(x);
    let dt = g.d(t, "x", 1).unwrap();
    assert_eq!(g.eval(dt, &at(0.0)).unwrap(), 1.0);

    let x2 = g.powi(x, 2);
    let s = g.sin(x2);
    let d2 = g.d(s, "x", 2).unwrap();
    assert!((g.eval(d2, &at(0.0)).unwrap() - 2.0).abs() < 1e-15);

    let sx = g.sin(x);
    let xs = g.mul(x, sx);
    let d1 = g.d(xs, "x", 1).unwrap();
    assert!((g.eval(d1, &at(PI)).unwrap() + PI).abs() < 1e-14);
}

#[test]
fn derivative_errors() {
    let mut g = Graph::new();
    let x = g.input("x");
    let e = g.exp(x);
    assert_eq!(g.d(e, "y", 1), Err(DiffError::UnknownInput("y".into())));
    assert_eq!(g.d(e, "x", 0), Err(DiffError::InvalidOrder(0)));
    assert_eq!(g.d(e, "x", 3), Err(DiffError::InvalidOrder(3)));
    let d1 = g.d(e, "x", 1).unwrap();
    let d2 = g.d(d1, "x", 1).unwrap();
    assert_eq!(d2.derivative_order(), 2);
    assert_eq!(g.d(d2, "x", 1), Err(DiffError::OrderExceeded { have: 2, requested: 1 }));
    assert!(matches!(g.d(d1, "x", 2), Err(DiffError::OrderExceeded { .. })));
}

#[test]
fn mixed_derivative_by_nesting() {
    let mut g = Graph::new();
    let (t, x) = (g.input("t"), g.input("x"));
    let tx = g.mul(t, x);
    let f = g.sin(tx);
    let ft = g.d(f, "t", 1).unwrap();
    let ftx = g.d(ft, "x", 1).unwrap();
    // d/dx [x cos(tx)] = cos(tx) - t x sin(tx)
    let (tv, xv) = (0.3, -1.2);
    let b = Bindings::new(&[]).with("t", tv).with("x", xv);
    let want = (tv * xv).cos() - tv * xv * (tv * xv).sin();
    assert!((g.eval(ftx, &b).unwrap() - want).abs() < 1e-14);
}

#[test]
fn eval_examples() {
    let mut g = Graph::new();
    let c = g.constant(3.5);
    assert_eq!(g.eval(c, &Bindings::new(&[])).unwrap(), 3.5);

    let (t, x) = (g.input("t"), g.input("x"));
    let diff = g.sub(x, t);
    let arg = g.scale(PI, diff);
    let s = g.sin(arg);
    let u = g.scale(2.0, s);
    let b = Bindings::new(&[]).with("t", 0.25).with("x", 0.25);
    assert_eq!(g.eval(u, &b).unwrap(), 0.0);

    let sp = g.softplus(x);
    let v = g.eval(sp, &at(-100.0)).unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert!((v / 3.720075976020836e-44 - 1.0).abs() < 1e-12);
    assert!((softplus(800.0) - 800.0).abs() < 1e-12);
}

#[test]
fn eval_errors() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.input("y");
    let s = g.add(x, y);
    assert_eq!(g.eval(s, &at(1.0)), Err(DiffError::Unbound("y".into())));
    let l = g.log(x);
    assert_eq!(g.eval(l, &at(-1.0)), Err(DiffError::NonFinite));
    let one = g.constant(1.0);
    let inv = g.div(one, x);
    assert_eq!(g.eval(inv, &at(0.0)), Err(DiffError::NonFinite));
    let p = g.param(3);
    let px = g.mul(p, x);
    assert!(matches!(g.eval(px, &at(1.0)), Err(DiffError::ParamLength { needed: 4, got: 0 })));
}

#[test]
fn param_grad_examples() {
    let mut g = Graph::new();
    let p = g.param(0);
    let sq = g.powi(p, 2);
    assert_eq!(g.param_grad(sq, &Bindings::new(&[3.0])).unwrap(), vec![6.0]);

    let x = g.input("x");
    let px = g.mul(p, x);
    let th = g.tanh(px);
    let dx = g.d(th, "x", 1).unwrap();
    let grad = g.param_grad(dx, &Bindings::new(&[0.5]).with("x", 0.0)).unwrap();
    assert!((grad[0] - 1.0).abs() < 1e-15);
}

#[test]
fn param_grad_reports_offending_index() {
    let mut g = Graph::new();
    let p0 = g.param(0);
    let p1 = g.param(1);
    // d/dp1 sqrt(p1) at p1 = 0 is infinite while the value is finite.
    let r = g.sqrt(p1);
    let f = g.add(p0, r);
    assert_eq!(
        g.param_grad(f, &Bindings::new(&[1.0, 0.0])),
        Err(DiffError::NonFiniteGradient { index: 1 })
    );
}

#[test]
fn third_order_mixed_gradient() {
    // f = tanh(a x + b); d2f/dx2 = -2 a^2 y (1 - y^2), y = tanh(a x + b)
    let mut g = Graph::new();
    let x = g.input("x");
    let (a, b) = (g.param(0), g.param(1));
    let ax = g.mul(a, x);
    let z = g.add(ax, b);
    let f = g.tanh(z);
    let fxx = g.d(f, "x", 2).unwrap();
    let params = [0.7, -0.2];
    let xv = 0.9;
    let analytic = |p: &[f64]| {
        let y = (p[0] * xv + p[1]).tanh();
        -2.0 * p[0] * p[0] * y * (1.0 - y * y)
    };
    let grad = g.param_grad(fxx, &Bindings::new(&params).with("x", xv)).unwrap();
    for i in 0..2 {
        let h = 1e-5;
        let mut up = params;
        let mut dn = params;
        up[i] += h;
        dn[i] -= h;
        let fd = (analytic(&up) - analytic(&dn)) / (2.0 * h);
        assert!(close(grad[i], fd, 1e-8), "{i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn hash_consing_shares_nodes() {
    let mut g = Graph::new();
    let x = g.input("x");
    let a = g.sin(x);
    let n = g.node_count();
    let b = g.sin(x);
    assert_eq!(a, b);
    assert_eq!(g.node_count(), n);
}

// --- batches --------------------------------------------------------------

#[test]
fn batch_mean_matches_naive_and_empty_is_zero() {
    let mut g = Graph::new();
    let (t, x) = (g.input("t"), g.input("x"));
    let p = g.param(0);
    let tx = g.mul(t, x);
    let body0 = g.mul(p, tx);
    let body = g.sin(body0);
    let data: Vec<f64> = (0..37).flat_map(|i| [i as f64 * 0.01, 1.0 - i as f64 * 0.03]).collect();
    let batch = g.add_batch(&["t", "x"], &data).unwrap();
    let m = g.batch_mean(body, batch).unwrap();
    let params = [1.3];
    let want = naive(&g, m, &HashMap::new(), &params);
    let got = g.eval(m, &Bindings::new(&params)).unwrap();
    assert!((got - want).abs() < 1e-15);

    let empty = g.add_batch(&["t", "x"], &[]).unwrap();
    let z = g.batch_mean(body, empty).unwrap();
    assert_eq!(g.eval(z, &Bindings::new(&params)).unwrap(), 0.0);
    assert_eq!(g.param_grad(z, &Bindings::new(&params)).unwrap(), vec![0.0]);
}

#[test]
fn batch_errors() {
    let mut g = Graph::new();
    let x = g.input("x");
    assert!(g.add_batch(&[], &[]).is_err());
    assert!(g.add_batch(&["x", "x"], &[1.0, 2.0]).is_err());
    assert!(g.add_batch(&["x", "t"], &[1.0, 2.0, 3.0]).is_err());
    let b = g.add_batch(&["x"], &[1.0, 2.0]).unwrap();
    let m = g.batch_mean(x, b).unwrap();
    assert_eq!(g.batch_mean(m, b), Err(DiffError::NestedBatch));
    assert_eq!(g.d(m, "x", 1), Err(DiffError::DerivativeOfBatch));
}

/// Gradient of a loss that is linear and one that is nonlinear in the batch
/// means, checked against central differences of the naive interpreter.
#[test]
fn evaluator_gradient_linear_and_nonlinear_paths() {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.input("w");
    let (a, b, c) = (g.param(0), g.param(1), g.param(2));
    let ax = g.mul(a, x);
    let z = g.add(ax, b);
    let u = g.tanh(z);
    let ux = g.d(u, "x", 1).unwrap();
    let r = g.sub(ux, x);
    let r2 = g.powi(r, 2);
    let data: Vec<f64> = (0..23).map(|i| -1.0 + i as f64 * 0.09).collect();
    let batch = g.add_batch(&["x"], &data).unwrap();
    let m1 = g.batch_mean(r2, batch).unwrap();
    let cu = g.mul(c, u);
    let cu2 = g.powi(cu, 2);
    let bdata = [0.5, -0.25, 2.0];
    let bb = g.add_batch(&["x"], &bdata).unwrap();
    let m2 = g.batch_mean(cu2, bb).unwrap();
    let wm2 = g.mul(w, m2);
    let linear = g.add(m1, wm2);
    let prod = g.mul(m1, m2);
    let logm = g.log(m1);
    let nonlinear = g.add(prod, logm);

    let params = [0.8, 0.1, -1.1];
    let mut inputs = HashMap::new();
    inputs.insert("w", 2.5);
    let bind = Bindings::new(&params).with("w", 2.5);
    for root in [linear, nonlinear] {
        let grad = g.param_grad(root, &bind).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut up = params;
            let mut dn = params;
            up[i] += h;
            dn[i] -= h;
            let fd = (naive(&g, root, &inputs, &up) - naive(&g, root, &inputs, &dn)) / (2.0 * h);
            assert!(close(grad[i], fd, 1e-7), "param {i}: {} vs {fd}", grad[i]);
        }
        let v = g.eval(root, &bind).unwrap();
        assert!(close(v, naive(&g, root, &inputs, &params), 1e-13));
    }

    // Multiple roots with seeds.
    let ev = g.evaluator(&[linear, nonlinear]).unwrap();
    let both = ev.gradient(&bind, &[2.0, -1.0]).unwrap();
    let gl = g.param_grad(linear, &bind).unwrap();
    let gn = g.param_grad(nonlinear, &bind).unwrap();
    for i in 0..3 {
        assert!(close(both.grad[i], 2.0 * gl[i] - gn[i], 1e-12));
    }
    assert_eq!(both.values, ev.values(&bind).unwrap());
}

#[test]
fn point_map_evaluates_rows() {
    let mut g = Graph::new();
    let (t, x) = (g.input("t"), g.input("x"));
    let p = g.param(0);
    let s = g.add(t, x);
    let f = g.mul(p, s);
    let e = g.exp(t);
    let pm = PointMap::new(&g, &[f, e], &["t", "x"]).unwrap();
    let data: Vec<f64> = (0..41).flat_map(|i| [i as f64 * 0.1, -(i as f64)]).collect();
    let out = pm.apply(&Bindings::new(&[2.0]), &data).unwrap();
    assert_eq!(out.len(), 82);
    for i in 0..41 {
        let (tv, xv) = (data[2 * i], data[2 * i + 1]);
        assert_eq!(out[2 * i], 2.0 * (tv + xv));
        assert_eq!(out[2 * i + 1], tv.exp());
    }
    assert!(pm.apply(&Bindings::new(&[2.0]), &[1.0, 2.0, 3.0]).is_err());
}

// --- property tests ---------------------------------------------------------

/// Analytic derivative table: (primitive, f, f', sample range).
#[allow(clippy::type_complexity)]
fn table() -> Vec<(Primitive, fn(f64) -> f64, fn(f64) -> f64, (f64, f64))> {
    vec![
        (Primitive::Neg, |x| -x, |_| -1.0, (-5.0, 5.0)),
        (Primitive::Exp, f64::exp, f64::exp, (-5.0, 5.0)),
        (Primitive::Log, f64::ln, |x| 1.0 / x, (0.1, 10.0)),
        (Primitive::Sin, f64::sin, f64::cos, (-5.0, 5.0)),
        (Primitive::Cos, f64::cos, |x| -x.sin(), (-5.0, 5.0)),
        (Primitive::Tanh, f64::tanh, |x| 1.0 / x.cosh().powi(2), (-5.0, 5.0)),
        (Primitive::Cosh, f64::cosh, f64::sinh, (-5.0, 5.0)),
        (Primitive::Sinh, f64::sinh, f64::cosh, (-5.0, 5.0)),
        (Primitive::Sqrt, f64::sqrt, |x| 0.5 / x.sqrt(), (0.1, 10.0)),
        (Primitive::Softplus, |x| (1.0 + x.exp()).ln(), |x| 1.0 / (1.0 + (-x).exp()), (-5.0, 5.0)),
        (Primitive::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()), |x| (-x).exp() / (1.0 + (-x).exp()).powi(2), (-5.0, 5.0)),
        (Primitive::PowI(3), |x| x * x * x, |x| 3.0 * x * x, (-5.0, 5.0)),
        (Primitive::PowI(-2), |x| 1.0 / (x * x), |x| -2.0 / (x * x * x), (0.2, 5.0)),
    ]
}

proptest! {
    #[test]
    fn primitive_derivatives_match_table(u in 0.0f64..1.0, idx in 0usize..13) {
        let (prim, f, df, (lo, hi)) = table()[idx];
        let v = lo + (hi - lo) * u;
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.build(prim, &[x]).unwrap();
        let dy = g.d(y, "x", 1).unwrap();
        let got_f = g.eval(y, &at(v)).unwrap();
        let got_d = g.eval(dy, &at(v)).unwrap();
        prop_assert!(close(got_f, f(v), 1e-12), "{prim:?} value at {v}");
        prop_assert!(close(got_d, df(v), 1e-12), "{prim:?} derivative at {v}: {got_d} vs {}", df(v));
    }

    #[test]
    fn binary_derivatives_match_table(a in -3.0f64..3.0, b in 0.5f64..3.0) {
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.constant(b);
        let sx = g.sin(x);
        for (prim, want) in [
            (Primitive::Add, a.cos()),
            (Primitive::Sub, a.cos()),
            (Primitive::Mul, b * a.cos()),
            (Primitive::Div, a.cos() / b),
        ] {
            let f = g.build(prim, &[sx, c]).unwrap();
            let df = g.d(f, "x", 1).unwrap();
            prop_assert!(close(g.eval(df, &at(a)).unwrap(), want, 1e-12));
        }
        // quotient rule on the denominator
        let f = g.build(Primitive::Div, &[c, sx]).unwrap();
        let df = g.d(f, "x", 1).unwrap();
        if a.sin().abs() > 0.1 {
            prop_assert!(close(g.eval(df, &at(a)).unwrap(), -b * a.cos() / a.sin().powi(2), 1e-12));
        }
    }
}

/// Random composite expressions with domains kept safe: log, sqrt and
/// division only ever see `1 + e²`.
#[derive(Clone, Debug)]
enum Ast {
    X,
    T,
    P(usize),
    C(f64),
    Un(u8, Box<Ast>),
    Bin(u8, Box<Ast>, Box<Ast>),
}

fn ast() -> impl Strategy<Value = Ast> {
    let leaf = prop_oneof![
        Just(Ast::X),
        Just(Ast::T),
        (0usize..3).prop_map(Ast::P),
        (-2.0f64..2.0).prop_map(Ast::C),
    ];
    leaf.prop_recursive(5, 24, 2, |inner| {
        prop_oneof![
            (0u8..11, inner.clone()).prop_map(|(o, a)| Ast::Un(o, Box::new(a))),
            (0u8..4, inner.clone(), inner).prop_map(|(o, a, b)| Ast::Bin(o, Box::new(a), Box::new(b))),
        ]
    })
}

fn build_ast(g: &mut Graph, a: &Ast) -> ExprNode {
    match a {
        Ast::X => g.input("x"),
        Ast::T => g.input("t"),
        Ast::P(i) => g.param(*i),
        Ast::C(c) => g.constant(*c),
        Ast::Un(op, a) => {
            let e = build_ast(g, a);
            let safe = |g: &mut Graph, e: ExprNode| {
                let sq = g.powi(e, 2);
                let one = g.constant(1.0);
                g.add(one, sq)
            };
            match op {
                0 => g.neg(e),
                1 => {
                    let s = g.tanh(e);
                    g.exp(s)
                }
                2 => {
                    let s = safe(g, e);
                    g.log(s)
                }
                3 => g.sin(e),
                4 => g.cos(e),
                5 => g.tanh(e),
                6 => {
                    let s = g.tanh(e);
                    g.cosh(s)
                }
                7 => {
                    let s = safe(g, e);
                    g.sqrt(s)
                }
                8 => g.softplus(e),
                9 => g.sigmoid(e),
                _ => {
                    let s = g.tanh(e);
                    g.powi(s, 3)
                }
            }
        }
        Ast::Bin(op, a, b) => {
            let (ea, eb) = (build_ast(g, a), build_ast(g, b));
            match op {
                0 => g.add(ea, eb),
                1 => g.sub(ea, eb),
                2 => g.mul(ea, eb),
                _ => {
                    let sq = g.powi(eb, 2);
                    let one = g.constant(1.0);
                    let den = g.add(one, sq);
                    g.div(ea, den)
                }
            }
        }
    }
}

fn fd_x(g: &Graph, f: ExprNode, p: &[f64], t: f64, x: f64, h: f64) -> f64 {
    let ev = |xv: f64| g.eval(f, &Bindings::new(p).with("t", t).with("x", xv)).unwrap();
    (ev(x + h) - ev(x - h)) / (2.0 * h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn derivative_commutes_with_finite_differences(
        e in ast(), x in -1.5f64..1.5, t in -1.0f64..1.0,
        p in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let mut g = Graph::new();
        let f = build_ast(&mut g, &e);
        g.input("t");
        g.input("x");
        let _ = g.param(2);
        let df = g.d(f, "x", 1).unwrap();
        let b = Bindings::new(&p).with("t", t).with("x", x);
        let analytic = g.eval(df, &b).unwrap();
        let fd = fd_x(&g, f, &p, t, x, 1e-4);
        // Central differences with h = 1e-4 carry an O(h^2 f''') truncation
        // error, so compare in relative terms against a unit floor.
        prop_assert!((analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()).max(1.0),
            "{analytic} vs {fd}");

        // Second derivative against FD of the first.
        let d2 = g.d(f, "x", 2).unwrap();
        let fd2 = fd_x(&g, df, &p, t, x, 1e-4);
        let a2 = g.eval(d2, &b).unwrap();
        prop_assert!((a2 - fd2).abs() <= 1e-6 * a2.abs().max(fd2.abs()).max(1.0), "{a2} vs {fd2}");
    }

    #[test]
    fn param_grad_matches_finite_differences(
        e in ast(), x in -1.5f64..1.5, t in -1.0f64..1.0,
        p in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let mut g = Graph::new();
        let f = build_ast(&mut g, &e);
        g.input("t");
        g.input("x");
        let _ = g.param(2);
        let fx = g.d(f, "x", 1).unwrap();
        for node in [f, fx] {
            let b = Bindings::new(&p).with("t", t).with("x", x);
            let grad = g.param_grad(node, &b).unwrap();
            for i in 0..3 {
                let h = 1e-4;
                let mut up = p.clone();
                let mut dn = p.clone();
                up[i] += h;
                dn[i] -= h;
                let ev = |q: &[f64]| g.eval(node, &Bindings::new(q).with("t", t).with("x", x)).unwrap();
                let fd = (ev(&up) - ev(&dn)) / (2.0 * h);
                prop_assert!((grad[i] - fd).abs() <= 1e-5 * grad[i].abs().max(fd.abs()).max(1.0),
                    "param {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn derivative_is_linear(
        e1 in ast(), e2 in ast(), a in -3.0f64..3.0, c in -3.0f64..3.0,
        x in -1.5f64..1.5, k in 1u8..3,
    ) {
        let mut g = Graph::new();
        let f = build_ast(&mut g, &e1);
        let h = build_ast(&mut g, &e2);
        g.input("t");
        g.input("x");
        let af = g.scale(a, f);
        let ch = g.scale(c, h);
        let comb = g.add(af, ch);
        let dc = g.d(comb, "x", k).unwrap();
        let df = g.d(f, "x", k).unwrap();
        let dh = g.d(h, "x", k).unwrap();
        let p = [0.3, -0.4, 0.9];
        let b = Bindings::new(&p).with("t", 0.2).with("x", x);
        let lhs = g.eval(dc, &b).unwrap();
        let rhs = a * g.eval(df, &b).unwrap() + c * g.eval(dh, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn evaluation_is_deterministic_and_matches_reference(
        e in ast(), x in -1.5f64..1.5, t in -1.0f64..1.0,
    ) {
        let mut g = Graph::new();
        let f = build_ast(&mut g, &e);
        g.input("t");
        g.input("x");
        let _ = g.param(2);
        let d2 = g.d(f, "x", 2).unwrap();
        let p = [0.5, -0.7, 1.1];
        let b = Bindings::new(&p).with("t", t).with("x", x);
        let v1 = g.eval(d2, &b).unwrap();
        let v2 = g.eval(d2, &b).unwrap();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        let mut inputs = HashMap::new();
        inputs.insert("t", t);
        inputs.insert("x", x);
        let r = naive(&g, d2, &inputs, &p);
        prop_assert!((v1 - r).abs() <= 1e-12 * v1.abs().max(1.0));
    }

    #[test]
    fn batched_tape_matches_reference(
        e in ast(), rows in 0usize..60, seed in 0u64..1000,
    ) {
        let mut g = Graph::new();
        let f = build_ast(&mut g, &e);
        g.input("t");
        g.input("x");
        let _ = g.param(2);
        let fx = g.d(f, "x", 1).unwrap();
        let sq = g.powi(fx, 2);
        let data: Vec<f64> = (0..rows * 2)
            .map(|i| (((i as u64 + 1) * (seed + 7) * 2654435761) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        let batch = g.add_batch(&["t", "x"], &data).unwrap();
        let m = g.batch_mean(sq, batch).unwrap();
        let p = [0.25, 0.6, -0.8];
        let got = g.eval(m, &Bindings::new(&p)).unwrap();
        let want = naive(&g, m, &HashMap::new(), &p);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        let grad = g.param_grad(m, &Bindings::new(&p)).unwrap();
        for i in 0..3 {
            let h = 1e-5;
            let mut up = p;
            let mut dn = p;
            up[i] += h;
            dn[i] -= h;
            let fd = (naive(&g, m, &HashMap::new(), &up) - naive(&g, m, &HashMap::new(), &dn)) / (2.0 * h);
            prop_assert!((grad[i] - fd).abs() <= 1e-5 * grad[i].abs().max(fd.abs()).max(1.0));
        }
    }
}
