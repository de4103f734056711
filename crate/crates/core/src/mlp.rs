//! Fully connected tanh network with a mean head and a variance head.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix row-major (`fan_out × fan_in`) followed by its bias vector. The
//! flat index of a parameter in that layout is also the index of its leaf in
//! the expression graph.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{ExprNode, Graph};

/// Floor added to the softplus of the raw variance output.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Both heads are produced by one shared output layer of width 2.
pub const OUTPUT_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer sizes must be at least 1")]
    ZeroSizeLayer,
    #[error("network expects {expected} inputs, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("input dimension must be 1 or 2, got {0}")]
    UnsupportedInputDim(usize),
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        Architecture { input_dim, hidden }
    }

    /// `layers` hidden layers of `neurons` units each.
    pub fn uniform(input_dim: usize, layers: usize, neurons: usize) -> Self {
        Architecture { input_dim, hidden: vec![neurons; layers] }
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(OUTPUT_DIM);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<(), NetError> {
        if !(1..=2).contains(&self.input_dim) {
            return Err(NetError::UnsupportedInputDim(self.input_dim));
        }
        if self.hidden.contains(&0) {
            return Err(NetError::ZeroSizeLayer);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out × fan_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.fan_in + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

impl NetParams {
    /// Xavier-uniform weights, zero biases. Deterministic per seed.
    pub fn init_xavier(arch: &Architecture, seed: u64) -> Result<NetParams, NetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Layer {
                    fan_in,
                    fan_out,
                    weights: (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(NetParams { arch: arch.clone(), layers })
    }

    pub fn zeros(arch: &Architecture) -> Result<NetParams, NetError> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                fan_in,
                fan_out,
                weights: vec![0.0; fan_in * fan_out],
                bias: vec![0.0; fan_out],
            })
            .collect();
        Ok(NetParams { arch: arch.clone(), layers })
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<NetParams, NetError> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(NetError::ParamCount { expected: arch.param_count(), got: flat.len() });
        }
        let mut offset = 0;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = flat[offset..offset + fan_in * fan_out].to_vec();
                offset += fan_in * fan_out;
                let b = flat[offset..offset + fan_out].to_vec();
                offset += fan_out;
                Layer { fan_in, fan_out, weights: w, bias: b }
            })
            .collect();
        Ok(NetParams { arch: arch.clone(), layers })
    }

    /// Writes a checkpoint. Layout (little endian): magic `VIPNNET1`,
    /// `u32` input dim, `u32` hidden layer count, one `u32` per hidden width,
    /// `u32` output dim, `u64` parameter count, then the flat parameters as
    /// `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.arch.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.arch.hidden.len() as u32).to_le_bytes())?;
        for &h in &self.arch.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&(OUTPUT_DIM as u32).to_le_bytes())?;
        let flat = self.to_flat();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<NetParams, NetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<usize, NetError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf) as usize)
        };
        let input_dim = next_u32(&mut r)?;
        let depth = next_u32(&mut r)?;
        if depth > 1024 {
            return Err(NetError::Checkpoint(format!("implausible depth {depth}")));
        }
        let hidden = (0..depth).map(|_| next_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let out = next_u32(&mut r)?;
        if out != OUTPUT_DIM {
            return Err(NetError::Checkpoint(format!("output dimension {out}, expected {OUTPUT_DIM}")));
        }
        let arch = Architecture { input_dim, hidden };
        arch.validate()?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != arch.param_count() {
            return Err(NetError::ParamCount { expected: arch.param_count(), got: count });
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u64buf)?;
            flat.push(f64::from_le_bytes(u64buf));
        }
        NetParams::from_flat(&arch, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NetParams, NetError> {
        NetParams::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VIPNNET1";

/// Mean and variance expressions of one network over a set of input leaves.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    mu: ExprNode,
    sigma2: ExprNode,
}

impl HeadOutputs {
    pub fn mu(&self) -> ExprNode {
        self.mu
    }

    /// `softplus(raw) + 1e-6`, strictly positive.
    pub fn sigma2(&self) -> ExprNode {
        self.sigma2
    }

    /// Heads with arbitrary expressions substituted, for checking losses
    /// against closed-form solutions or a pinned variance.
    pub fn pinned(mu: ExprNode, sigma2: ExprNode) -> Self {
        HeadOutputs { mu, sigma2 }
    }
}

/// Builds the network over `inputs` (`[t, x]`, or `[x]` for stationary
/// problems). Parameter leaf `i` refers to `params.to_flat()[i]`.
pub fn forward(arch: &Architecture, graph: &mut Graph, inputs: &[ExprNode]) -> Result<HeadOutputs, NetError> {
    arch.validate()?;
    if inputs.len() != arch.input_dim {
        return Err(NetError::InputDim { expected: arch.input_dim, got: inputs.len() });
    }
    let shapes = arch.layer_shapes();
    let last = shapes.len() - 1;
    let mut h: Vec<ExprNode> = inputs.to_vec();
    let mut offset = 0;
    for (li, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let bias_base = offset + fan_in * fan_out;
        let mut next = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let mut terms = Vec::with_capacity(fan_in + 1);
            for (k, &hk) in h.iter().enumerate() {
                let w = graph.param(offset + j * fan_in + k);
                terms.push(graph.mul(w, hk));
            }
            terms.push(graph.param(bias_base + j));
            let z = graph.sum(&terms);
            next.push(if li == last { z } else { graph.tanh(z) });
        }
        offset = bias_base + fan_out;
        h = next;
    }
    let mu = h[0];
    let raw = graph.softplus(h[1]);
    let floor = graph.constant(VARIANCE_FLOOR);
    let sigma2 = graph.add(raw, floor);
    Ok(HeadOutputs { mu, sigma2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Bindings;

    fn arch2() -> Architecture {
        Architecture::uniform(2, 3, 30)
    }

    #[test]
    fn parameter_count_matches_layer_formula() {
        assert_eq!(arch2().param_count(), 2012);
        let p = NetParams::init_xavier(&arch2(), 3).unwrap();
        assert_eq!(p.to_flat().len(), 2012);
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let p = NetParams::init_xavier(&arch2(), 11).unwrap();
        let bound = (6.0f64 / 60.0).sqrt();
        assert!((bound - 0.31622776601683794).abs() < 1e-15);
        for w in &p.layers[1].weights {
            assert!(w.abs() <= bound);
        }
        for l in &p.layers {
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = NetParams::init_xavier(&arch2(), 5).unwrap();
        let b = NetParams::init_xavier(&arch2(), 5).unwrap();
        let c = NetParams::init_xavier(&arch2(), 6).unwrap();
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, c);
    }

    #[test]
    fn zero_size_layer_is_rejected() {
        let arch = Architecture::new(2, vec![30, 0, 30]);
        assert!(matches!(NetParams::init_xavier(&arch, 0), Err(NetError::ZeroSizeLayer)));
    }

    #[test]
    fn zero_network_gives_ln2_variance() {
        let arch = arch2();
        let mut g = Graph::new();
        let (t, x) = (g.input("t"), g.input("x"));
        let heads = forward(&arch, &mut g, &[t, x]).unwrap();
        let flat = NetParams::zeros(&arch).unwrap().to_flat();
        let b = Bindings::new(&flat).with("t", 0.3).with("x", -0.7);
        assert_eq!(g.eval(heads.mu(), &b).unwrap(), 0.0);
        let s2 = g.eval(heads.sigma2(), &b).unwrap();
        assert!((s2 - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn very_negative_raw_variance_hits_the_floor() {
        let arch = arch2();
        let mut p = NetParams::zeros(&arch).unwrap();
        p.layers.last_mut().unwrap().bias[1] = -100.0;
        let flat = p.to_flat();
        let mut g = Graph::new();
        let (t, x) = (g.input("t"), g.input("x"));
        let heads = forward(&arch, &mut g, &[t, x]).unwrap();
        let s2 = g.eval(heads.sigma2(), &Bindings::new(&flat).with("t", 0.0).with("x", 0.0)).unwrap();
        assert!((s2 - 1e-6).abs() < 1e-20);
        assert!(s2 >= VARIANCE_FLOOR);
    }

    #[test]
    fn input_dimension_mismatch() {
        let mut g = Graph::new();
        let x = g.input("x");
        assert!(matches!(forward(&arch2(), &mut g, &[x]), Err(NetError::InputDim { expected: 2, got: 1 })));
    }

    #[test]
    fn second_derivative_of_mean_builds() {
        let arch = Architecture::uniform(1, 3, 30);
        let mut g = Graph::new();
        let x = g.input("x");
        let heads = forward(&arch, &mut g, &[x]).unwrap();
        let uxx = g.d(heads.mu(), "x", 2).unwrap();
        let p = NetParams::init_xavier(&arch, 1).unwrap().to_flat();
        assert!(g.eval(uxx, &Bindings::new(&p).with("x", 0.4)).unwrap().is_finite());
    }

    #[test]
    fn trunk_weight_moves_both_heads() {
        let arch = Architecture::uniform(2, 2, 8);
        let p = NetParams::init_xavier(&arch, 9).unwrap();
        let mut flat = p.to_flat();
        let mut g = Graph::new();
        let (t, x) = (g.input("t"), g.input("x"));
        let heads = forward(&arch, &mut g, &[t, x]).unwrap();
        let at = |g: &Graph, f: &[f64]| {
            let b = Bindings::new(f).with("t", 0.2).with("x", 0.6);
            (g.eval(heads.mu(), &b).unwrap(), g.eval(heads.sigma2(), &b).unwrap())
        };
        let before = at(&g, &flat);
        flat[3] += 0.1; // first-layer weight
        let after = at(&g, &flat);
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let p = NetParams::init_xavier(&Architecture::new(2, vec![7, 5]), 42).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = NetParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p.arch, q.arch);
        let bits = |n: &NetParams| n.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        buf[0] = b'X';
        assert!(NetParams::read_checkpoint(&buf[..]).is_err());
    }
}
