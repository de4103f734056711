//! Gradients on the large-residual Poisson loss, where a central difference
//! at h = 1e-4 is already at the rounding floor for small components. A
//! fourth-order stencil at a wider step separates the two error sources.

use vipinn::bench::loss_variants;
use vipinn::losses::{LossGraph, Objective};
use vipinn::mlp::{Architecture, NetParams};
use vipinn::oracle::{relative_error, sample_param_indices, LossVariant};
use vipinn::pde::{problem, Counts, ProblemKind};
use vipinn::sampler::sample_training;

#[test]
fn poisson_gradients_match_fourth_order_differences() {
    let p = problem(ProblemKind::Poisson);
    let arch = Architecture::uniform(1, 3, 30);
    let counts = Counts { collocation: 8, boundary: 8, initial: 0, extra: 8 };
    let seed = 23;
    let pts = sample_training(&p, &counts, seed);
    let params = NetParams::init_xavier(&arch, seed).unwrap().to_flat();
    let indices = sample_param_indices(&arch, 20, seed ^ 0x5eed);
    let h = 1e-3;
    for v in loss_variants() {
        let LossVariant::Strategy(s) = v else { continue };
        let mut obj = Objective::new(LossGraph::build(&p, &arch, &pts).unwrap(), s).unwrap();
        let (bd, grad) = obj.step(&params).unwrap();
        let f = |i: usize, d: f64| {
            let mut q = params.clone();
            q[i] += d;
            obj.value_with_weights(&q, bd.weights).unwrap()
        };
        let mut worst: f64 = 0.0;
        for &i in &indices {
            let fd = (8.0 * (f(i, h) - f(i, -h)) - (f(i, 2.0 * h) - f(i, -2.0 * h))) / (12.0 * h);
            // components far below the largest are compared on the gradient's scale
            let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
            let e = if grad[i].abs() < 1e-3 * scale { (grad[i] - fd).abs() / scale } else { relative_error(grad[i], fd) };
            worst = worst.max(e);
        }
        assert!(worst < 1e-5, "{s:?}: {worst:e}");
    }
}
