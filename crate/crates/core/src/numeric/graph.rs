//! Parameter storage and the recording tape for reverse-mode
//! differentiation.
//!
//! A forward pass appends one node per operation; `backward` walks the nodes
//! in reverse creation order, so creation order doubles as the topological
//! order. Parameter gradients accumulate into the [`ParamStore`], input
//! gradients stay on the tape's leaf nodes. The tape is single-writer per
//! training step; the values it holds are immutable once recorded.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{
    add_maps, avg_pool, concat_channels, conv2d_backward, conv2d_forward, map_to_matrix, matmul,
    matmul_nt, matrix_to_map, softmax_rows, upsample_nearest, ConvParams, ConvSaved, FeatureMap,
    Matrix, PostOp,
};
use crate::error::{contract, Result};

/// Handle to one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Flat storage for every trainable tensor of a model, with a parallel
/// gradient buffer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    grads: Vec<Vec<f64>>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        if values.len() != shape.iter().product::<usize>() {
            return Err(contract(format!("parameter {name}: values do not match shape")));
        }
        if self.by_name.contains_key(&name) {
            return Err(contract(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.grads.push(vec![0.0; values.len()]);
        self.entries.push(ParamEntry { name, shape, values });
        Ok(ParamId(id))
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.grads[id.0];
        debug_assert_eq!(g.len(), delta.len());
        for (gv, dv) in g.iter_mut().zip(delta.iter()) {
            *gv += dv;
        }
    }

    /// Optimizer access: values and gradient of one tensor, split-borrowed.
    pub fn tensor_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        (&mut self.entries[id.0].values, &self.grads[id.0])
    }
}

/// One conv layer: handles into the store plus the fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: ParamId,
    pub bias: ParamId,
    pub affine: Option<(ParamId, ParamId)>,
    pub post: PostOp,
}

impl ConvLayer {
    /// Registers weights ~ U[-1/sqrt(fan_in), +1/sqrt(fan_in)], zero bias,
    /// and (when `affine`) zero shift with a variance-preserving scale.
    ///
    /// The scale init plays the role batch normalization would at init: the
    /// uniform weight bound shrinks activation variance by 3x per layer (and
    /// the nonlinearity shrinks it further), so an identity scale would
    /// collapse a deep stack's outputs toward zero.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        affine: bool,
        post: PostOp,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(contract(format!("unsupported conv kernel {kernel}")));
        }
        let fan_in = (kernel * kernel * in_channels) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let wlen = kernel * kernel * in_channels * out_channels;
        let weights: Vec<f64> = (0..wlen).map(|_| rng.gen_range(-bound..bound)).collect();
        let weights = store.register(
            format!("{name}.weight"),
            vec![kernel, kernel, in_channels, out_channels],
            weights,
        )?;
        let bias = store.register(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels])?;
        let affine = if affine {
            let gain = match post {
                PostOp::LeakyRelu => 2.44,
                PostOp::Silu => 2.80,
                PostOp::None | PostOp::Sigmoid => 1.73,
            };
            let scale =
                store.register(format!("{name}.scale"), vec![out_channels], vec![gain; out_channels])?;
            let shift =
                store.register(format!("{name}.shift"), vec![out_channels], vec![0.0; out_channels])?;
            Some((scale, shift))
        } else {
            None
        };
        Ok(Self { kernel, in_channels, out_channels, weights, bias, affine, post })
    }

    pub fn set_bias(&self, store: &mut ParamStore, value: f64) {
        store.values_mut(self.bias).iter_mut().for_each(|v| *v = value);
    }

    pub fn params<'a>(&self, store: &'a ParamStore) -> ConvParams<'a> {
        ConvParams {
            kernel: self.kernel,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: store.values(self.weights),
            bias: store.values(self.bias),
            affine: self.affine.map(|(s, t)| (store.values(s), store.values(t))),
            post: self.post,
        }
    }
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
pub enum Value {
    Map(FeatureMap),
    Mat(Matrix),
}

impl Value {
    fn zeros_like(&self) -> Value {
        match self {
            Value::Map(m) => Value::Map(FeatureMap::zeros(m.height(), m.width(), m.channels())),
            Value::Mat(m) => Value::Mat(Matrix::zeros(m.rows(), m.cols())),
        }
    }

    fn accumulate(&mut self, other: &Value) {
        match (self, other) {
            (Value::Map(a), Value::Map(b)) => {
                for (av, bv) in a.data_mut().iter_mut().zip(b.data().iter()) {
                    *av += bv;
                }
            }
            (Value::Mat(a), Value::Mat(b)) => {
                for (av, bv) in a.data_mut().iter_mut().zip(b.data().iter()) {
                    *av += bv;
                }
            }
            _ => unreachable!("gradient kind mismatch"),
        }
    }
}

enum Op {
    Leaf,
    Conv { input: NodeId, layer: ConvLayer, saved: ConvSaved },
    Upsample { input: NodeId, factor: usize },
    AvgPool { input: NodeId, factor: usize },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    MapToMat { input: NodeId },
    MatToMap { input: NodeId },
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    SoftmaxRows { input: NodeId },
}

struct Node {
    value: Value,
    grad: Option<Value>,
    op: Op,
}

/// Recorded forward graph. See the module docs for the execution model.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(contract("node does not belong to this tape".to_string()));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { value, grad: None, op });
        NodeId { tape: self.id, index }
    }

    pub fn input(&mut self, map: FeatureMap) -> NodeId {
        self.push(Value::Map(map), Op::Leaf)
    }

    pub fn map(&self, id: NodeId) -> Result<&FeatureMap> {
        match &self.nodes[self.check(id)?].value {
            Value::Map(m) => Ok(m),
            Value::Mat(_) => Err(contract("node holds a matrix, not a map".to_string())),
        }
    }

    pub fn mat(&self, id: NodeId) -> Result<&Matrix> {
        match &self.nodes[self.check(id)?].value {
            Value::Mat(m) => Ok(m),
            Value::Map(_) => Err(contract("node holds a map, not a matrix".to_string())),
        }
    }

    /// Gradient of a map node after [`Tape::backward`]; `None` when nothing
    /// flowed into it.
    pub fn grad_map(&self, id: NodeId) -> Result<Option<&FeatureMap>> {
        match &self.nodes[self.check(id)?].grad {
            Some(Value::Map(m)) => Ok(Some(m)),
            Some(Value::Mat(_)) => Err(contract("gradient kind mismatch".to_string())),
            None => Ok(None),
        }
    }

    pub fn conv(&mut self, layer: &ConvLayer, input: NodeId, store: &ParamStore) -> Result<NodeId> {
        let x = self.map(input)?;
        let (out, saved) = conv2d_forward(x, &layer.params(store))?;
        Ok(self.push(Value::Map(out), Op::Conv { input, layer: layer.clone(), saved }))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let out = upsample_nearest(self.map(input)?, factor)?;
        Ok(self.push(Value::Map(out), Op::Upsample { input, factor }))
    }

    pub fn avg_pool(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let out = avg_pool(self.map(input)?, factor)?;
        Ok(self.push(Value::Map(out), Op::AvgPool { input, factor }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = concat_channels(self.map(a)?, self.map(b)?)?;
        Ok(self.push(Value::Map(out), Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = add_maps(self.map(a)?, self.map(b)?)?;
        Ok(self.push(Value::Map(out), Op::Add { a, b }))
    }

    pub fn map_to_mat(&mut self, input: NodeId) -> Result<NodeId> {
        let out = map_to_matrix(self.map(input)?);
        Ok(self.push(Value::Mat(out), Op::MapToMat { input }))
    }

    pub fn mat_to_map(&mut self, input: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let out = matrix_to_map(self.mat(input)?, height, width)?;
        Ok(self.push(Value::Map(out), Op::MatToMap { input }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul(self.mat(a)?, self.mat(b)?)?;
        Ok(self.push(Value::Mat(out), Op::Matmul { a, b }))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul_nt(self.mat(a)?, self.mat(b)?)?;
        Ok(self.push(Value::Mat(out), Op::MatmulNt { a, b }))
    }

    pub fn softmax_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.mat(input)?)?;
        Ok(self.push(Value::Mat(out), Op::SoftmaxRows { input }))
    }

    fn add_grad(&mut self, index: usize, delta: Value) {
        match &mut self.nodes[index].grad {
            Some(g) => g.accumulate(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Seeds the given nodes with output gradients and propagates them back
    /// through the recorded graph. Parameter gradients accumulate into
    /// `store`; call [`ParamStore::zero_grads`] first when starting fresh.
    pub fn backward(&mut self, seeds: Vec<(NodeId, FeatureMap)>, store: &mut ParamStore) -> Result<()> {
        for (id, seed) in seeds {
            let index = self.check(id)?;
            match &self.nodes[index].value {
                Value::Map(m) => {
                    if m.shape() != seed.shape() {
                        return Err(contract("seed gradient shape mismatch".to_string()));
                    }
                }
                Value::Mat(_) => return Err(contract("seed must target a map node".to_string())),
            }
            self.add_grad(index, Value::Map(seed));
        }

        for index in (0..self.nodes.len()).rev() {
            let grad = match self.nodes[index].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // Ops only reference earlier nodes, so split at `index`.
            let (before, rest) = self.nodes.split_at_mut(index);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { input, layer, saved } => {
                    let g = match &grad {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let out = match &node.value {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let x = match &before[input.index].value {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let grads = conv2d_backward(x, &layer.params(store), saved, out, g)?;
                    store.accumulate_grad(layer.weights, &grads.weights);
                    store.accumulate_grad(layer.bias, &grads.bias);
                    if let Some((scale, shift)) = layer.affine {
                        store.accumulate_grad(scale, &grads.scale);
                        store.accumulate_grad(shift, &grads.shift);
                    }
                    let input_index = input.index;
                    self.add_grad(input_index, Value::Map(grads.input));
                }
                Op::Upsample { input, factor } => {
                    let g = match &grad {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let (h, w, c) = match &before[input.index].value {
                        Value::Map(m) => m.shape(),
                        _ => unreachable!(),
                    };
                    let mut d = FeatureMap::zeros(h, w, c);
                    for y in 0..g.height() {
                        for x in 0..g.width() {
                            for ch in 0..c {
                                let i = d.idx(y / factor, x / factor, ch);
                                d.data_mut()[i] += g.at(y, x, ch);
                            }
                        }
                    }
                    let input_index = input.index;
                    self.add_grad(input_index, Value::Map(d));
                }
                Op::AvgPool { input, factor } => {
                    let g = match &grad {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let (h, w, c) = match &before[input.index].value {
                        Value::Map(m) => m.shape(),
                        _ => unreachable!(),
                    };
                    let norm = 1.0 / (factor * factor) as f64;
                    let mut d = FeatureMap::zeros(h, w, c);
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                let i = d.idx(y, x, ch);
                                d.data_mut()[i] = g.at(y / factor, x / factor, ch) * norm;
                            }
                        }
                    }
                    let input_index = input.index;
                    self.add_grad(input_index, Value::Map(d));
                }
                Op::Concat { a, b } => {
                    let g = match &grad {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let ca = match &before[a.index].value {
                        Value::Map(m) => m.channels(),
                        _ => unreachable!(),
                    };
                    let (h, w, c) = g.shape();
                    let mut da = FeatureMap::zeros(h, w, ca);
                    let mut db = FeatureMap::zeros(h, w, c - ca);
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                if ch < ca {
                                    let i = da.idx(y, x, ch);
                                    da.data_mut()[i] = g.at(y, x, ch);
                                } else {
                                    let i = db.idx(y, x, ch - ca);
                                    db.data_mut()[i] = g.at(y, x, ch);
                                }
                            }
                        }
                    }
                    let (ai, bi) = (a.index, b.index);
                    self.add_grad(ai, Value::Map(da));
                    self.add_grad(bi, Value::Map(db));
                }
                Op::Add { a, b } => {
                    let (ai, bi) = (a.index, b.index);
                    self.add_grad(ai, grad.clone());
                    self.add_grad(bi, grad);
                }
                Op::MapToMat { input } => {
                    let g = match &grad {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    let (h, w, _) = match &before[input.index].value {
                        Value::Map(m) => m.shape(),
                        _ => unreachable!(),
                    };
                    let d = matrix_to_map(g, h, w)?;
                    let input_index = input.index;
                    self.add_grad(input_index, Value::Map(d));
                }
                Op::MatToMap { input } => {
                    let g = match &grad {
                        Value::Map(m) => m,
                        _ => unreachable!(),
                    };
                    let d = map_to_matrix(g);
                    let input_index = input.index;
                    self.add_grad(input_index, Value::Mat(d));
                }
                Op::Matmul { a, b } => {
                    let g = match &grad {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    let av = match &before[a.index].value {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    let bv = match &before[b.index].value {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    // dA = dC * B^T, dB = A^T * dC
                    let da = matmul_nt(g, bv)?;
                    let mut at = Matrix::zeros(av.cols(), av.rows());
                    for r in 0..av.rows() {
                        for c in 0..av.cols() {
                            at.set(c, r, av.at(r, c));
                        }
                    }
                    let db = matmul(&at, g)?;
                    let (ai, bi) = (a.index, b.index);
                    self.add_grad(ai, Value::Mat(da));
                    self.add_grad(bi, Value::Mat(db));
                }
                Op::MatmulNt { a, b } => {
                    let g = match &grad {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    let av = match &before[a.index].value {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    let bv = match &before[b.index].value {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    // C = A B^T: dA = dC * B, dB = dC^T * A
                    let da = matmul(g, bv)?;
                    let mut gt = Matrix::zeros(g.cols(), g.rows());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gt.set(c, r, g.at(r, c));
                        }
                    }
                    let db = matmul(&gt, av)?;
                    let (ai, bi) = (a.index, b.index);
                    self.add_grad(ai, Value::Mat(da));
                    self.add_grad(bi, Value::Mat(db));
                }
                Op::SoftmaxRows { input } => {
                    let g = match &grad {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    let s = match &node.value {
                        Value::Mat(m) => m,
                        _ => unreachable!(),
                    };
                    // dz_i = s_i * (dg_i - sum_j dg_j s_j) per row
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let mut dot = 0.0;
                        for c in 0..s.cols() {
                            dot += g.at(r, c) * s.at(r, c);
                        }
                        for c in 0..s.cols() {
                            d.set(r, c, s.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    let input_index = input.index;
                    self.add_grad(input_index, Value::Mat(d));
                }
            }
        }
        Ok(())
    }

    /// Convenience for tests: seed a node with all-ones and return the total
    /// of its value (sum reduction).
    pub fn sum_map(&self, id: NodeId) -> Result<f64> {
        Ok(self.map(id)?.data().iter().sum())
    }

    pub fn ones_like(&self, id: NodeId) -> Result<FeatureMap> {
        let m = self.map(id)?;
        Ok(FeatureMap::filled(m.height(), m.width(), m.channels(), 1.0))
    }
}

#[allow(dead_code)]
fn zero_value(v: &Value) -> Value {
    v.zeros_like()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_map(rng: &mut StdRng, h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(h, w, c, data).unwrap()
    }

    /// Relative error with an absolute floor, so near-zero gradients are
    /// judged on absolute difference.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    /// f(params) = sum over one conv output; checks every weight/bias/affine
    /// entry and the input against central differences.
    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let layer = ConvLayer::new(
                &mut store,
                &mut rng,
                "conv",
                3,
                2,
                2,
                true,
                if seed % 2 == 0 { PostOp::Silu } else { PostOp::LeakyRelu },
            )
            .unwrap();
            let input = random_map(&mut rng, 3, 3, 2);

            let eval = |store: &ParamStore, input: &FeatureMap| -> f64 {
                let mut tape = Tape::new();
                let x = tape.input(input.clone());
                let y = tape.conv(&layer, x, store).unwrap();
                tape.sum_map(y).unwrap()
            };

            let mut tape = Tape::new();
            let x = tape.input(input.clone());
            let y = tape.conv(&layer, x, &store).unwrap();
            let seed_grad = tape.ones_like(y).unwrap();
            store.zero_grads();
            tape.backward(vec![(y, seed_grad)], &mut store).unwrap();

            let h = 1e-4;
            for id in store.ids().collect::<Vec<_>>() {
                for i in 0..store.values(id).len() {
                    let orig = store.values(id)[i];
                    let mut probe = store.clone();
                    probe.values_mut(id)[i] = orig + h;
                    let up = eval(&probe, &input);
                    probe.values_mut(id)[i] = orig - h;
                    let down = eval(&probe, &input);
                    let fd = (up - down) / (2.0 * h);
                    let analytic = store.grad(id)[i];
                    assert!(
                        rel_err(analytic, fd) < 1e-3,
                        "seed {seed} param {} [{i}]: analytic {analytic} vs fd {fd}",
                        store.name(id)
                    );
                }
            }

            // Input gradient.
            let gin = tape.grad_map(x).unwrap().unwrap().clone();
            for i in 0..input.data().len() {
                let mut up_in = input.clone();
                up_in.data_mut()[i] += h;
                let mut dn_in = input.clone();
                dn_in.data_mut()[i] -= h;
                let fd = (eval(&store, &up_in) - eval(&store, &dn_in)) / (2.0 * h);
                assert!(rel_err(gin.data()[i], fd) < 1e-3);
            }
        }
    }

    /// Runs a composite graph (conv -> upsample -> concat -> pool -> reshape
    /// -> self-attention -> reshape -> add) and checks parameter gradients.
    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = StdRng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            let conv_a =
                ConvLayer::new(&mut store, &mut rng, "a", 3, 2, 3, true, PostOp::LeakyRelu).unwrap();
            let conv_b =
                ConvLayer::new(&mut store, &mut rng, "b", 1, 6, 2, false, PostOp::Sigmoid).unwrap();
            let input = random_map(&mut rng, 2, 2, 2);

            let eval = |store: &ParamStore, input: &FeatureMap| -> f64 {
                let mut tape = Tape::new();
                let x = tape.input(input.clone());
                let a = tape.conv(&conv_a, x, store).unwrap();
                let up = tape.upsample(a, 2).unwrap();
                let down = tape.avg_pool(up, 2).unwrap();
                let cat = tape.concat(down, a).unwrap();
                let b = tape.conv(&conv_b, cat, store).unwrap();
                let m = tape.map_to_mat(b).unwrap();
                let att = tape.matmul_nt(m, m).unwrap();
                let sm = tape.softmax_rows(att).unwrap();
                let out = tape.matmul(sm, m).unwrap();
                let back = tape.mat_to_map(out, 2, 2).unwrap();
                let sum = tape.add(back, b).unwrap();
                tape.sum_map(sum).unwrap()
            };

            // Analytic gradients via a seeded backward of the same graph.
            let mut tape = Tape::new();
            let x = tape.input(input.clone());
            let a = tape.conv(&conv_a, x, &store).unwrap();
            let up = tape.upsample(a, 2).unwrap();
            let down = tape.avg_pool(up, 2).unwrap();
            let cat = tape.concat(down, a).unwrap();
            let b = tape.conv(&conv_b, cat, &store).unwrap();
            let m = tape.map_to_mat(b).unwrap();
            let att = tape.matmul_nt(m, m).unwrap();
            let sm = tape.softmax_rows(att).unwrap();
            let out = tape.matmul(sm, m).unwrap();
            let back = tape.mat_to_map(out, 2, 2).unwrap();
            let sum = tape.add(back, b).unwrap();
            let ones = tape.ones_like(sum).unwrap();
            store.zero_grads();
            tape.backward(vec![(sum, ones)], &mut store).unwrap();

            let h = 1e-4;
            for id in store.ids().collect::<Vec<_>>() {
                for i in 0..store.values(id).len() {
                    let orig = store.values(id)[i];
                    let mut probe = store.clone();
                    probe.values_mut(id)[i] = orig + h;
                    let fd_up = eval(&probe, &input);
                    probe.values_mut(id)[i] = orig - h;
                    let fd_dn = eval(&probe, &input);
                    let fd = (fd_up - fd_dn) / (2.0 * h);
                    let analytic = store.grad(id)[i];
                    assert!(
                        rel_err(analytic, fd) < 1e-3,
                        "seed {seed} param {}[{i}]: {analytic} vs {fd}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut store = ParamStore::new();
        // Zero weights and zero scale: output is shift only, constant in the input.
        let layer = ConvLayer::new(&mut store, &mut rng, "c", 1, 1, 1, true, PostOp::None).unwrap();
        store.values_mut(layer.weights).iter_mut().for_each(|v| *v = 0.0);
        let (scale, _) = layer.affine.unwrap();
        store.values_mut(scale).iter_mut().for_each(|v| *v = 0.0);

        let input = random_map(&mut rng, 3, 3, 1);
        let mut tape = Tape::new();
        let x = tape.input(input);
        let y = tape.conv(&layer, x, &store).unwrap();
        let ones = tape.ones_like(y).unwrap();
        store.zero_grads();
        tape.backward(vec![(y, ones)], &mut store).unwrap();
        let gin = tape.grad_map(x).unwrap().unwrap();
        assert!(gin.data().iter().all(|&v| v == 0.0));
        assert!(store.grad(layer.weights).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_gradient_is_symmetric_at_symmetric_input() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let m = FeatureMap::from_vec(1, 2, 1, vec![0.0, 0.0]).unwrap();
        let x = tape.input(m);
        let mat = tape.map_to_mat(x).unwrap();
        let sm = tape.softmax_rows(mat).unwrap();
        let back = tape.mat_to_map(sm, 1, 2).unwrap();
        // Seed only the first softmax component.
        let mut seed = FeatureMap::zeros(1, 2, 1);
        seed.set(0, 0, 0, 1.0);
        tape.backward(vec![(back, seed)], &mut store).unwrap();
        let g = tape.grad_map(x).unwrap().unwrap();
        assert!((g.at(0, 0, 0) + g.at(0, 1, 0)).abs() < 1e-12, "components mirror each other");
        assert!((g.at(0, 0, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut tape_a = Tape::new();
        let mut tape_b = Tape::new();
        let x = tape_a.input(FeatureMap::zeros(1, 1, 1));
        assert!(tape_b.upsample(x, 2).is_err());
        let mut store = ParamStore::new();
        assert!(tape_b.backward(vec![(x, FeatureMap::zeros(1, 1, 1))], &mut store).is_err());
    }
}
