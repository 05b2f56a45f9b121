//! Dense layers, residual blocks, Adam, and weight-file serialization.

use crate::autodiff::{Bindings, Graph, NodeId, Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer-size list needs at least two entries")]
    EmptySpec,
    #[error("layer sizes must be positive")]
    NonPositiveSize,
    #[error("input has dim {got}, layer expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shortcut projection must be present exactly when input and output dims differ")]
    BadShortcut,
    #[error("non-finite gradient in parameter group {index}")]
    NonFiniteGradient { index: usize },
    #[error("adam state holds {state} parameter groups, got {got}")]
    AdamArity { state: usize, got: usize },
    #[error("weight file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weight file format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("weight `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Shape, got: Shape },
}

// ── Activations ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Elu => g.elu(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Activation::Elu => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Elu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "elu" => Some(Activation::Elu),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

// ── Layers and blocks ────────────────────────────────────────────────

/// Fully connected layer; weights are Matrix(out, in), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        match self.weights.shape() {
            Shape::Matrix(_, c) => c,
            _ => unreachable!(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.weights.shape() {
            Shape::Matrix(r, _) => r,
            _ => unreachable!(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::DimMismatch { expected: self.in_dim(), got: x.len() });
        }
        let out = self.out_dim();
        let mut y = vec![0.0; out];
        for (i, yo) in y.iter_mut().enumerate() {
            let mut acc = self.bias.at(i);
            for (j, &xj) in x.iter().enumerate() {
                acc += self.weights.at2(i, j) * xj;
            }
            *yo = self.activation.apply(acc);
        }
        Ok(y)
    }
}

/// Two dense layers with a residual shortcut; the shortcut is a projection
/// matrix exactly when input and output dims differ, identity otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetBlock {
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
    pub shortcut: Option<Tensor>,
}

impl ResNetBlock {
    pub fn new(
        layer1: DenseLayer,
        layer2: DenseLayer,
        shortcut: Option<Tensor>,
    ) -> Result<Self, NnError> {
        let needs_proj = layer1.in_dim() != layer2.out_dim();
        if needs_proj != shortcut.is_some() {
            return Err(NnError::BadShortcut);
        }
        if let Some(p) = &shortcut {
            match p.shape() {
                Shape::Matrix(r, c) if r == layer2.out_dim() && c == layer1.in_dim() => {}
                s => {
                    return Err(NnError::ShapeMismatch {
                        name: "shortcut".into(),
                        expected: Shape::Matrix(layer2.out_dim(), layer1.in_dim()),
                        got: s,
                    })
                }
            }
        }
        Ok(ResNetBlock { layer1, layer2, shortcut })
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layer2.out_dim()
    }

    /// activation(layer2(activation(layer1(x)))) + shortcut(x)
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let h = self.layer1.forward(x)?;
        let mut y = self.layer2.forward(&h)?;
        match &self.shortcut {
            None => {
                if x.len() != y.len() {
                    return Err(NnError::DimMismatch { expected: y.len(), got: x.len() });
                }
                for (yo, &xo) in y.iter_mut().zip(x) {
                    *yo += xo;
                }
            }
            Some(p) => {
                for (i, yo) in y.iter_mut().enumerate() {
                    for (j, &xj) in x.iter().enumerate() {
                        *yo += p.at2(i, j) * xj;
                    }
                }
            }
        }
        Ok(y)
    }
}

// ── Initialization ───────────────────────────────────────────────────

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(out_dim, in_dim, data)
}

pub fn init_dense(
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> DenseLayer {
    DenseLayer {
        weights: glorot_uniform(rng, out_dim, in_dim),
        bias: Tensor::zeros(Shape::Vector(out_dim)),
        activation,
    }
}

pub fn init_block(
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> ResNetBlock {
    let layer1 = init_dense(in_dim, out_dim, activation, rng);
    let layer2 = init_dense(out_dim, out_dim, activation, rng);
    let shortcut = (in_dim != out_dim).then(|| glorot_uniform(rng, out_dim, in_dim));
    ResNetBlock { layer1, layer2, shortcut }
}

/// Deterministic dense stack from a layer-size list; hidden layers use
/// `activation`, the final layer is linear.
pub fn init_mlp(
    sizes: &[usize],
    activation: Activation,
    seed: u64,
) -> Result<Vec<DenseLayer>, NnError> {
    if sizes.len() < 2 {
        return Err(NnError::EmptySpec);
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(NnError::NonPositiveSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == sizes.len() { Activation::Identity } else { activation };
            init_dense(w[0], w[1], act, &mut rng)
        })
        .collect())
}

// ── Graph builders ───────────────────────────────────────────────────

/// Whether network parameters enter a graph as trainable leaves or as baked
/// constants (frozen networks).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Leaves,
    Constants,
}

/// Leaf nodes created for a network's parameters, in construction order, so
/// callers can bind current values and request gradients.
#[derive(Debug, Default)]
pub struct ParamNodes {
    pub entries: Vec<(String, NodeId)>,
}

impl ParamNodes {
    /// Reuses the existing leaf when the same parameter appears again in one
    /// graph (shared weights across support poses, or several loss branches).
    fn insert(&mut self, g: &mut Graph, mode: ParamMode, name: String, value: &Tensor) -> NodeId {
        match mode {
            ParamMode::Constants => g.constant(value.clone()),
            ParamMode::Leaves => {
                if let Some((_, id)) = self.entries.iter().find(|(n, _)| n == &name) {
                    return *id;
                }
                let id = g.leaf(&name, value.shape());
                self.entries.push((name, id));
                id
            }
        }
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|(_, id)| *id).collect()
    }

    /// Binds `values` (aligned with the recorded entries) onto `bindings`.
    pub fn bind(&self, bindings: &mut Bindings, values: &[(String, &Tensor)]) {
        assert_eq!(self.entries.len(), values.len(), "parameter arity");
        for ((name, id), (vname, t)) in self.entries.iter().zip(values) {
            assert_eq!(name, vname, "parameter order");
            bindings.bind(*id, (*t).clone());
        }
    }
}

/// Emits `x · Wᵀ + b` with activation for a batch matrix `x` (B × in).
pub fn dense_nodes(
    g: &mut Graph,
    params: &mut ParamNodes,
    mode: ParamMode,
    prefix: &str,
    layer: &DenseLayer,
    x: NodeId,
) -> NodeId {
    let w = params.insert(g, mode, format!("{prefix}.w"), &layer.weights);
    let b = params.insert(g, mode, format!("{prefix}.b"), &layer.bias);
    let xw = g.matmul_tb(x, w);
    let pre = g.add_row(xw, b);
    layer.activation.node(g, pre)
}

pub fn block_nodes(
    g: &mut Graph,
    params: &mut ParamNodes,
    mode: ParamMode,
    prefix: &str,
    block: &ResNetBlock,
    x: NodeId,
) -> NodeId {
    let h = dense_nodes(g, params, mode, &format!("{prefix}.l1"), &block.layer1, x);
    let h2 = dense_nodes(g, params, mode, &format!("{prefix}.l2"), &block.layer2, h);
    let sc = match &block.shortcut {
        None => x,
        Some(p) => {
            let pn = params.insert(g, mode, format!("{prefix}.proj"), p);
            g.matmul_tb(x, pn)
        }
    };
    g.add(h2, sc)
}

pub fn mlp_nodes(
    g: &mut Graph,
    params: &mut ParamNodes,
    mode: ParamMode,
    prefix: &str,
    layers: &[DenseLayer],
    x: NodeId,
) -> NodeId {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = dense_nodes(g, params, mode, &format!("{prefix}.l{i}"), layer, h);
    }
    h
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is multiplied by this factor after every step.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_decay: 1.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Bias-corrected Adam over a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[Shape]) -> Self {
        AdamState {
            lr: cfg.lr,
            cfg,
            step: 0,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::AdamArity { state: self.m.len(), got: params.len() });
        }
        for (i, grad) in grads.iter().enumerate() {
            if !grad.all_finite() {
                return Err(NnError::NonFiniteGradient { index: i });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        self.lr *= self.cfg.lr_decay;
        Ok(())
    }
}

// ── Weight files ─────────────────────────────────────────────────────

const WEIGHT_MAGIC: &[u8; 4] = b"DGWT";
const WEIGHT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightHeader {
    pub format_version: u32,
    pub activation: Activation,
    pub seed: u64,
}

impl WeightHeader {
    pub fn new(activation: Activation, seed: u64) -> Self {
        WeightHeader { format_version: WEIGHT_VERSION, activation, seed }
    }
}

/// Writes named tensors with a versioned header; round-trips are bit-exact.
pub fn save_weights(
    path: &Path,
    header: WeightHeader,
    entries: &[(String, &Tensor)],
) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&header.format_version.to_le_bytes())?;
    w.write_all(&[header.activation.tag()])?;
    w.write_all(&header.seed.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let dims: Vec<u64> = match tensor.shape() {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n as u64],
            Shape::Matrix(r, c) => vec![r as u64, c as u64],
        };
        w.write_all(&[dims.len() as u8])?;
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(WeightHeader, Vec<(String, Tensor)>), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    fn take<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N], NnError> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf).map_err(|_| NnError::Corrupt(format!("truncated at {what}")))?;
        Ok(buf)
    }
    let magic: [u8; 4] = take(&mut r, "magic")?;
    if &magic != WEIGHT_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r, "version")?);
    if version != WEIGHT_VERSION {
        return Err(NnError::VersionMismatch { found: version, expected: WEIGHT_VERSION });
    }
    let act_tag = take::<1>(&mut r, "activation")?[0];
    let activation = Activation::from_tag(act_tag)
        .ok_or_else(|| NnError::Corrupt(format!("unknown activation tag {act_tag}")))?;
    let seed = u64::from_le_bytes(take(&mut r, "seed")?);
    let count = u32::from_le_bytes(take(&mut r, "count")?);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut r, "name length")?) as usize;
        if name_len > 4096 {
            return Err(NnError::Corrupt("oversized name".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|_| NnError::Corrupt("truncated at name".into()))?;
        let name =
            String::from_utf8(name_buf).map_err(|_| NnError::Corrupt("name not utf-8".into()))?;
        let ndims = take::<1>(&mut r, "ndims")?[0];
        let shape = match ndims {
            0 => Shape::Scalar,
            1 => Shape::Vector(u64::from_le_bytes(take(&mut r, "dim")?) as usize),
            2 => {
                let a = u64::from_le_bytes(take(&mut r, "dim")?) as usize;
                let b = u64::from_le_bytes(take(&mut r, "dim")?) as usize;
                Shape::Matrix(a, b)
            }
            n => return Err(NnError::Corrupt(format!("bad rank {n}"))),
        };
        if shape.len() > 100_000_000 {
            return Err(NnError::Corrupt("oversized tensor".into()));
        }
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..shape.len() {
            data.push(f64::from_bits(u64::from_le_bytes(take(&mut r, "data")?)));
        }
        let tensor = match shape {
            Shape::Scalar => Tensor::scalar(data[0]),
            Shape::Vector(_) => Tensor::vector(data),
            Shape::Matrix(a, b) => Tensor::matrix(a, b, data),
        };
        entries.push((name, tensor));
    }
    Ok((WeightHeader { format_version: version, activation, seed }, entries))
}

/// Loads and validates against expected names and shapes.
pub fn load_weights_expected(
    path: &Path,
    expected: &[(String, Shape)],
) -> Result<(WeightHeader, Vec<(String, Tensor)>), NnError> {
    let (header, entries) = load_weights(path)?;
    if entries.len() != expected.len() {
        return Err(NnError::Corrupt(format!(
            "expected {} tensors, found {}",
            expected.len(),
            entries.len()
        )));
    }
    for ((name, tensor), (ename, eshape)) in entries.iter().zip(expected) {
        if name != ename {
            return Err(NnError::Corrupt(format!("expected tensor `{ename}`, found `{name}`")));
        }
        if tensor.shape() != *eshape {
            return Err(NnError::ShapeMismatch {
                name: name.clone(),
                expected: *eshape,
                got: tensor.shape(),
            });
        }
    }
    Ok((header, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Bindings;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_mlp(&[4, 8, 2], Activation::Elu, 3).unwrap();
        let b = init_mlp(&[4, 8, 2], Activation::Elu, 3).unwrap();
        let c = init_mlp(&[4, 8, 2], Activation::Elu, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_bound_for_4_to_8() {
        let layers = init_mlp(&[4, 8], Activation::Elu, 0).unwrap();
        let bound = (6.0_f64 / 12.0).sqrt();
        assert!((bound - 0.707).abs() < 1e-3);
        assert!(layers[0].weights.data().iter().all(|w| w.abs() <= bound));
        assert!(layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn empty_spec_rejected() {
        assert!(matches!(init_mlp(&[4], Activation::Elu, 0), Err(NnError::EmptySpec)));
    }

    fn zero_block(in_dim: usize, out_dim: usize) -> ResNetBlock {
        let zeros = |o: usize, i: usize| DenseLayer {
            weights: Tensor::zeros(Shape::Matrix(o, i)),
            bias: Tensor::zeros(Shape::Vector(o)),
            activation: Activation::Elu,
        };
        let shortcut = (in_dim != out_dim).then(|| Tensor::zeros(Shape::Matrix(out_dim, in_dim)));
        ResNetBlock::new(zeros(out_dim, in_dim), zeros(out_dim, out_dim), shortcut).unwrap()
    }

    #[test]
    fn zero_block_equal_dims_is_identity() {
        let block = zero_block(3, 3);
        let x = vec![0.3, -1.2, 0.8];
        assert_eq!(block.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_block_diff_dims_is_zero() {
        let block = zero_block(3, 5);
        let y = block.forward(&[0.3, -1.2, 0.8]).unwrap();
        assert_eq!(y, vec![0.0; 5]);
    }

    #[test]
    fn block_dim_mismatch_errors() {
        let block = zero_block(3, 3);
        assert!(matches!(block.forward(&[1.0, 2.0]), Err(NnError::DimMismatch { .. })));
    }

    #[test]
    fn shortcut_presence_rule_enforced() {
        let layer = |o: usize, i: usize| DenseLayer {
            weights: Tensor::zeros(Shape::Matrix(o, i)),
            bias: Tensor::zeros(Shape::Vector(o)),
            activation: Activation::Elu,
        };
        assert!(matches!(
            ResNetBlock::new(layer(4, 3), layer(4, 4), None),
            Err(NnError::BadShortcut)
        ));
        assert!(matches!(
            ResNetBlock::new(layer(3, 3), layer(3, 3), Some(Tensor::zeros(Shape::Matrix(3, 3)))),
            Err(NnError::BadShortcut)
        ));
    }

    #[test]
    fn random_block_passes_fd_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = init_block(4, 6, Activation::Elu, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf("x", Shape::Matrix(1, 4));
        let mut params = ParamNodes::default();
        let y = block_nodes(&mut g, &mut params, ParamMode::Constants, "blk", &block, x);
        let s = g.sum(y);
        let mut b = Bindings::new();
        b.bind(x, Tensor::matrix(1, 4, vec![0.4, -0.9, 1.3, 0.1]));
        let err = g.finite_difference_check(s, x, &b, 1e-6).unwrap();
        assert!(err < 1e-6, "fd error {err}");
    }

    #[test]
    fn graph_block_matches_numeric_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = init_block(5, 5, Activation::Elu, &mut rng);
        let x_vals = [0.2, -0.4, 0.9, -1.5, 0.05];
        let numeric = block.forward(&x_vals).unwrap();
        let mut g = Graph::new();
        let x = g.leaf("x", Shape::Matrix(1, 5));
        let mut params = ParamNodes::default();
        let y = block_nodes(&mut g, &mut params, ParamMode::Constants, "blk", &block, x);
        let mut b = Bindings::new();
        b.bind(x, Tensor::matrix(1, 5, x_vals.to_vec()));
        let out = g.evaluate(&b, &[y]).unwrap();
        for (a, e) in out[0].data().iter().zip(&numeric) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With constant gradient at t=1 the update is ±lr per component, up
        // to the ε guard.
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::vector(vec![0.3, -700.0, 1e-3])];
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &[Shape::Vector(3)]);
        let before = params[0].clone();
        adam.step(&mut params, &grads).unwrap();
        for i in 0..3 {
            let delta = params[0].at(i) - before.at(i);
            let expected = -0.01 * grads[0].at(i).signum();
            assert!((delta - expected).abs() < 1e-5, "component {i}: {delta}");
        }
    }

    #[test]
    fn adam_rescaling_invariance_at_t1() {
        let grads_a = vec![Tensor::vector(vec![0.2, -0.7])];
        let grads_b = vec![Tensor::vector(vec![2000.0, -7000.0])];
        let mut pa = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut pb = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut adam_a = AdamState::new(AdamConfig::with_lr(0.05), &[Shape::Vector(2)]);
        let mut adam_b = AdamState::new(AdamConfig::with_lr(0.05), &[Shape::Vector(2)]);
        adam_a.step(&mut pa, &grads_a).unwrap();
        adam_b.step(&mut pb, &grads_b).unwrap();
        for i in 0..2 {
            assert!((pa[0].at(i) - pb[0].at(i)).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let grads = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &[Shape::Vector(2)]);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_nan_gradient_aborts() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        let grads = vec![Tensor::vector(vec![f64::NAN])];
        let mut adam = AdamState::new(AdamConfig::default(), &[Shape::Vector(1)]);
        assert!(matches!(
            adam.step(&mut params, &grads),
            Err(NnError::NonFiniteGradient { index: 0 })
        ));
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // Matches an independent scalar reference implementation step by step
        // and lands near the optimum of (w−5)².
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = AdamState::new(cfg, &[Shape::Scalar]);
        let (mut rm, mut rv, mut rw) = (0.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=200 {
            let w = params[0].as_scalar();
            let grad = 2.0 * (w - 5.0);
            let rg = 2.0 * (rw - 5.0);
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mhat = rm / (1.0 - 0.9_f64.powi(t));
            let vhat = rv / (1.0 - 0.999_f64.powi(t));
            rw -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            adam.step(&mut params, &[Tensor::scalar(grad)]).unwrap();
            assert!((params[0].as_scalar() - rw).abs() < 1e-12, "step {t}");
        }
        assert!((params[0].as_scalar() - 5.0).abs() < 0.05);
    }

    #[test]
    fn lr_decay_applies_after_each_step() {
        let cfg = AdamConfig { lr: 0.1, lr_decay: 0.5, ..Default::default() };
        let mut adam = AdamState::new(cfg, &[Shape::Scalar]);
        let mut params = vec![Tensor::scalar(0.0)];
        adam.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        assert!((adam.lr - 0.05).abs() < 1e-15);
        adam.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        assert!((adam.lr - 0.025).abs() < 1e-15);
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.dgw");
        let t1 = Tensor::matrix(2, 3, vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0]);
        let t2 = Tensor::vector(vec![42.0, -0.125]);
        let header = WeightHeader::new(Activation::Elu, 77);
        save_weights(&path, header, &[("a.w".into(), &t1), ("a.b".into(), &t2)]).unwrap();
        let (h, entries) = load_weights(&path).unwrap();
        assert_eq!(h, header);
        assert!(entries[0].1.bits_eq(&t1));
        assert!(entries[1].1.bits_eq(&t2));
    }

    #[test]
    fn wrong_shape_header_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.dgw");
        let t1 = Tensor::matrix(2, 3, vec![0.0; 6]);
        save_weights(&path, WeightHeader::new(Activation::Elu, 0), &[("w".into(), &t1)]).unwrap();
        let err = load_weights_expected(&path, &[("w".into(), Shape::Matrix(3, 2))]).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.dgw");
        let t1 = Tensor::matrix(4, 4, vec![1.0; 16]);
        save_weights(&path, WeightHeader::new(Activation::Elu, 0), &[("w".into(), &t1)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_weights(&path), Err(NnError::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.dgw");
        let t1 = Tensor::scalar(1.0);
        save_weights(&path, WeightHeader::new(Activation::Elu, 0), &[("w".into(), &t1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(NnError::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn elu_network_input_gradient_is_continuous_relu_jumps() {
        // Dense sampling across a unit's pre-activation zero: the analytic
        // input-gradient of an ELU net moves by O(δ) while a ReLU net with
        // the same weight draw jumps by O(1).
        let probe = |activation: Activation| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let l1 = init_dense(2, 6, activation, &mut rng);
            let l2 = init_dense(6, 1, Activation::Identity, &mut rng);
            let mut g = Graph::new();
            let x = g.leaf("x", Shape::Matrix(1, 2));
            let mut params = ParamNodes::default();
            let h = dense_nodes(&mut g, &mut params, ParamMode::Constants, "l1", &l1, x);
            let y = dense_nodes(&mut g, &mut params, ParamMode::Constants, "l2", &l2, h);
            let s = g.sum(y);
            let grad = g.gradient_of(s, &[x], false).unwrap()[0];
            let grad_at = |g: &Graph, t: f64| -> Vec<f64> {
                let mut b = Bindings::new();
                b.bind(x, Tensor::matrix(1, 2, vec![t, 0.3]));
                g.evaluate(&b, &[grad]).unwrap()[0].data().to_vec()
            };
            // Bisect a pre-activation sign change of unit 0 along the x path.
            let pre = |t: f64| l1.weights.at2(0, 0) * t + l1.weights.at2(0, 1) * 0.3;
            let (mut lo, mut hi) = (-4.0_f64, 4.0_f64);
            assert!(
                pre(lo).signum() != pre(hi).signum(),
                "probe path must cross the unit boundary"
            );
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if pre(mid).signum() == pre(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let boundary = 0.5 * (lo + hi);
            let delta = 1e-8;
            let ga = grad_at(&g, boundary - delta);
            let gb = grad_at(&g, boundary + delta);
            ga.iter().zip(&gb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let elu_jump = probe(Activation::Elu);
        let relu_jump = probe(Activation::Relu);
        assert!(elu_jump < 1e-6, "elu gradient discontinuity estimate {elu_jump}");
        assert!(relu_jump > 1e-2, "relu gradient should jump, got {relu_jump}");
    }
}
