//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Recording is eager: every op method computes its output immediately and
//! appends a node. `replay` re-executes the recorded program against updated
//! leaf values (used by the finite-difference checker), `backward` walks the
//! nodes in reverse accumulating cotangents. All values are f64 and no
//! recorded value is ever mutated in place.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use num_complex::Complex64;

use super::NdArray;
use crate::error::{Error, Result};
use crate::fft3d;
use crate::ssm;

pub type ValId = usize;

/// Map from parameter name to its gradient.
pub type GradStore = IndexMap<String, NdArray>;

#[derive(Clone, Debug)]
pub enum Op {
    Add,
    Mul,
    Scale(f64),
    MatMul,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Silu,
    Gelu,
    LeakyRelu(f64),
    Softplus,
    Sum,
    Mean,
    Reshape(Vec<usize>),
    Broadcast(Vec<usize>),
    /// out[:, i] = in[:, idx[i]] on a [C, L] value.
    GatherCols(Arc<Vec<usize>>),
    ConcatRows,
    SliceRows { start: usize, len: usize },
    /// 3x3x3 convolution, padding 1. inputs: x [Ci,H,W,D], w [Co,Ci,3,3,3], b [Co].
    Conv3d { stride: usize },
    /// 2x2x2 transposed convolution, stride 2. inputs: x, w [Ci,Co,2,2,2], b [Co].
    ConvTranspose3d,
    /// depthwise causal conv, width 3, left-padded. inputs: u [C,L], w [C,3], b [C].
    CausalConv1d,
    /// inputs: u, a_log, d_skip, w_b, w_c, w_delta, b_delta.
    SelectiveScan,
    /// normalize over the channel axis of [C, M]. inputs: x, gamma [C], beta [C].
    LayerNorm { eps: f64 },
    /// mean over columns of -log softmax of the true class. input: logits [K, M].
    CrossEntropyMean { labels: Arc<Vec<u8>> },
    /// per-channel |rfft3| of [C,H,W,D] -> [C,H,W,Dh].
    SpectralMag,
    /// per-channel irfft3(m * exp(i*phase)); phase frozen at record time.
    SpectralRecon {
        phase: Arc<Vec<f64>>,
        spatial: (usize, usize, usize),
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Softplus => "softplus",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape(_) => "reshape",
            Op::Broadcast(_) => "broadcast",
            Op::GatherCols(_) => "gather_cols",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d => "conv_transpose3d",
            Op::CausalConv1d => "causal_conv1d",
            Op::SelectiveScan => "selective_scan",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
            Op::SpectralMag => "spectral_mag",
            Op::SpectralRecon { .. } => "spectral_recon",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<ValId>,
    out: ValId,
}

#[derive(Default)]
pub struct Tape {
    slots: Vec<NdArray>,
    nodes: Vec<Node>,
    params: Vec<(String, ValId)>,
    inputs: Vec<(String, ValId)>,
    by_name: HashMap<String, ValId>,
    /// set when a leaf changed without a replay; backward is refused until clean
    dirty: bool,
}

/// Gradients of one backward pass.
pub struct Grads {
    by_id: Vec<Option<NdArray>>,
    store: GradStore,
}

impl Grads {
    pub fn of(&self, id: ValId) -> Option<&NdArray> {
        self.by_id.get(id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&NdArray> {
        self.store.get(name)
    }

    pub fn store(&self) -> &GradStore {
        &self.store
    }

    pub fn into_store(self) -> GradStore {
        self.store
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_leaf(&mut self, value: NdArray) -> ValId {
        let id = self.slots.len();
        self.slots.push(value);
        id
    }

    pub fn input(&mut self, name: &str, value: NdArray) -> ValId {
        let id = self.push_leaf(value);
        self.inputs.push((name.to_string(), id));
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Register a trainable parameter; repeated registration of the same name
    /// returns the existing slot.
    pub fn param(&mut self, name: &str, value: &NdArray) -> ValId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = self.push_leaf(value.clone());
        self.params.push((name.to_string(), id));
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: NdArray) -> ValId {
        self.push_leaf(value)
    }

    pub fn value(&self, id: ValId) -> &NdArray {
        &self.slots[id]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub(crate) fn param_ids(&self) -> &[(String, ValId)] {
        &self.params
    }

    pub(crate) fn input_ids(&self) -> &[(String, ValId)] {
        &self.inputs
    }

    pub(crate) fn set_value_raw(&mut self, id: ValId, idx: usize, v: f64) {
        self.slots[id].data_mut()[idx] = v;
        self.dirty = true;
    }

    pub(crate) fn get_value_raw(&self, id: ValId, idx: usize) -> f64 {
        self.slots[id].data()[idx]
    }

    pub fn set_input(&mut self, name: &str, value: NdArray) -> Result<()> {
        let id = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Tape(format!("no input named '{name}'")))?;
        if self.slots[id].shape() != value.shape() {
            return Err(Error::shape(
                format!("set_input '{name}'"),
                self.slots[id].shape(),
                value.shape(),
            ));
        }
        self.slots[id] = value;
        self.dirty = true;
        Ok(())
    }

    /// Re-execute every recorded node in order against current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let ins: Vec<&NdArray> = self.nodes[i]
                .inputs
                .iter()
                .map(|&id| &self.slots[id])
                .collect();
            let out = eval_op(&self.nodes[i].op, &ins)
                .map_err(|e| Error::Tape(format!("node {i} ({}): {e}", self.nodes[i].op.name())))?;
            let out_id = self.nodes[i].out;
            self.slots[out_id] = out;
        }
        self.dirty = false;
        Ok(())
    }

    fn record(&mut self, op: Op, inputs: Vec<ValId>) -> Result<ValId> {
        let ins: Vec<&NdArray> = inputs.iter().map(|&id| &self.slots[id]).collect();
        let out = eval_op(&op, &ins).map_err(|e| {
            Error::Tape(format!("node {} ({}): {e}", self.nodes.len(), op.name()))
        })?;
        let out_id = self.push_leaf(out);
        self.nodes.push(Node {
            op,
            inputs,
            out: out_id,
        });
        Ok(out_id)
    }

    // -- op methods -------------------------------------------------------

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.record(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.record(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: ValId, c: f64) -> Result<ValId> {
        self.record(Op::Scale(c), vec![a])
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.record(Op::MatMul, vec![a, b])
    }

    pub fn exp(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Log, vec![a])
    }

    pub fn tanh(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Sigmoid, vec![a])
    }

    pub fn silu(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Silu, vec![a])
    }

    pub fn gelu(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Gelu, vec![a])
    }

    pub fn leaky_relu(&mut self, a: ValId, slope: f64) -> Result<ValId> {
        self.record(Op::LeakyRelu(slope), vec![a])
    }

    pub fn softplus(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Softplus, vec![a])
    }

    pub fn sum(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: ValId) -> Result<ValId> {
        self.record(Op::Mean, vec![a])
    }

    pub fn reshape(&mut self, a: ValId, shape: Vec<usize>) -> Result<ValId> {
        self.record(Op::Reshape(shape), vec![a])
    }

    pub fn broadcast(&mut self, a: ValId, shape: Vec<usize>) -> Result<ValId> {
        self.record(Op::Broadcast(shape), vec![a])
    }

    pub fn gather_cols(&mut self, a: ValId, idx: Arc<Vec<usize>>) -> Result<ValId> {
        self.record(Op::GatherCols(idx), vec![a])
    }

    pub fn concat_rows(&mut self, parts: &[ValId]) -> Result<ValId> {
        self.record(Op::ConcatRows, parts.to_vec())
    }

    pub fn slice_rows(&mut self, a: ValId, start: usize, len: usize) -> Result<ValId> {
        self.record(Op::SliceRows { start, len }, vec![a])
    }

    pub fn conv3d(&mut self, x: ValId, w: ValId, b: ValId, stride: usize) -> Result<ValId> {
        self.record(Op::Conv3d { stride }, vec![x, w, b])
    }

    pub fn conv_transpose3d(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        self.record(Op::ConvTranspose3d, vec![x, w, b])
    }

    pub fn causal_conv1d(&mut self, u: ValId, w: ValId, b: ValId) -> Result<ValId> {
        self.record(Op::CausalConv1d, vec![u, w, b])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: ValId,
        a_log: ValId,
        d_skip: ValId,
        w_b: ValId,
        w_c: ValId,
        w_delta: ValId,
        b_delta: ValId,
    ) -> Result<ValId> {
        self.record(
            Op::SelectiveScan,
            vec![u, a_log, d_skip, w_b, w_c, w_delta, b_delta],
        )
    }

    pub fn layer_norm(&mut self, x: ValId, gamma: ValId, beta: ValId, eps: f64) -> Result<ValId> {
        self.record(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn cross_entropy_mean(&mut self, logits: ValId, labels: Arc<Vec<u8>>) -> Result<ValId> {
        self.record(Op::CrossEntropyMean { labels }, vec![logits])
    }

    /// Returns the magnitude value id plus the phase (per-channel half-grid,
    /// frozen as a constant for any later `spectral_recon`).
    pub fn spectral_mag(&mut self, x: ValId) -> Result<(ValId, Arc<Vec<f64>>)> {
        let phase = {
            let xv = &self.slots[x];
            let (c, dims) = expect_chw(xv, "spectral_mag")?;
            let (h, w, d) = dims;
            let vol = h * w * d;
            let dh = fft3d::half_depth(d);
            let mut phase = Vec::with_capacity(c * h * w * dh);
            for ch in 0..c {
                let chan = NdArray::new(
                    vec![h, w, d],
                    xv.data()[ch * vol..(ch + 1) * vol].to_vec(),
                )?;
                let spec = fft3d::rfft3(&chan)?;
                phase.extend(spec.data.iter().map(|&cc| fft3d::phase_of(cc)));
            }
            Arc::new(phase)
        };
        let id = self.record(Op::SpectralMag, vec![x])?;
        Ok((id, phase))
    }

    pub fn spectral_recon(
        &mut self,
        m: ValId,
        phase: Arc<Vec<f64>>,
        spatial: (usize, usize, usize),
    ) -> Result<ValId> {
        self.record(Op::SpectralRecon { phase, spatial }, vec![m])
    }

    // -- backward ---------------------------------------------------------

    /// Reverse accumulation from `out` seeded with `cotangent`.
    pub fn backward(&self, out: ValId, cotangent: &NdArray) -> Result<Grads> {
        if self.dirty {
            return Err(Error::Tape(
                "backward called before forward: leaf values changed without replay".into(),
            ));
        }
        if cotangent.shape() != self.slots[out].shape() {
            return Err(Error::shape(
                "backward cotangent",
                self.slots[out].shape(),
                cotangent.shape(),
            ));
        }
        let mut by_id: Vec<Option<NdArray>> = vec![None; self.slots.len()];
        by_id[out] = Some(cotangent.clone());
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let g = match by_id[node.out].take() {
                Some(g) => g,
                None => continue,
            };
            let ins: Vec<&NdArray> = node.inputs.iter().map(|&id| &self.slots[id]).collect();
            let input_grads = vjp_op(&node.op, &ins, &self.slots[node.out], &g)
                .map_err(|e| Error::Tape(format!("backward node {i} ({}): {e}", node.op.name())))?;
            by_id[node.out] = Some(g);
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                if let Some(grad) = grad {
                    match &mut by_id[*slot] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                        none => *none = Some(grad),
                    }
                }
            }
        }
        let mut store = GradStore::new();
        for (name, id) in &self.params {
            let g = by_id[*id]
                .clone()
                .unwrap_or_else(|| NdArray::zeros(self.slots[*id].shape()));
            store.insert(name.clone(), g);
        }
        Ok(Grads { by_id, store })
    }
}

fn expect_chw(x: &NdArray, context: &str) -> Result<(usize, (usize, usize, usize))> {
    match x.shape() {
        [c, h, w, d] => Ok((*c, (*h, *w, *d))),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{context} expects [C,H,W,D]"),
        }),
    }
}

fn same_shape(a: &NdArray, b: &NdArray, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn conv3d_out_dims(dims: (usize, usize, usize), stride: usize) -> (usize, usize, usize) {
    // kernel 3, padding 1
    let f = |n: usize| (n + 2 - 3) / stride + 1;
    (f(dims.0), f(dims.1), f(dims.2))
}

pub(crate) fn eval_op(op: &Op, ins: &[&NdArray]) -> Result<NdArray> {
    match op {
        Op::Add => {
            same_shape(ins[0], ins[1], "add")?;
            let data = ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(a, b)| a + b)
                .collect();
            NdArray::new(ins[0].shape().to_vec(), data)
        }
        Op::Mul => {
            same_shape(ins[0], ins[1], "mul")?;
            let data = ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(a, b)| a * b)
                .collect();
            NdArray::new(ins[0].shape().to_vec(), data)
        }
        Op::Scale(c) => Ok(ins[0].map(|x| c * x)),
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = match a.shape() {
                [m, k] => (*m, *k),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "matmul lhs must be rank 2".into(),
                    })
                }
            };
            let (k2, n) = match b.shape() {
                [k2, n] => (*k2, *n),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "matmul rhs must be rank 2".into(),
                    })
                }
            };
            if k != k2 {
                return Err(Error::shape("matmul inner dims", &[m, k], &[k2, n]));
            }
            NdArray::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Op::Exp => Ok(ins[0].map(f64::exp)),
        Op::Log => Ok(ins[0].map(f64::ln)),
        Op::Tanh => Ok(ins[0].map(f64::tanh)),
        Op::Sigmoid => Ok(ins[0].map(sigmoid)),
        Op::Silu => Ok(ins[0].map(|x| x * sigmoid(x))),
        Op::Gelu => Ok(ins[0].map(gelu)),
        Op::LeakyRelu(s) => {
            let s = *s;
            Ok(ins[0].map(|x| if x >= 0.0 { x } else { s * x }))
        }
        Op::Softplus => Ok(ins[0].map(softplus)),
        Op::Sum => Ok(NdArray::scalar(ins[0].data().iter().sum())),
        Op::Mean => Ok(NdArray::scalar(
            ins[0].data().iter().sum::<f64>() / ins[0].numel() as f64,
        )),
        Op::Reshape(shape) => ins[0].reshaped(shape.clone()),
        Op::Broadcast(target) => {
            let src = ins[0].shape();
            if src.len() != target.len()
                || src
                    .iter()
                    .zip(target)
                    .any(|(&s, &t)| s != t && s != 1)
            {
                return Err(Error::shape("broadcast", target, src));
            }
            let mut out = NdArray::zeros(target);
            let sd = ins[0].data();
            let rank = target.len();
            let mut src_strides = vec![0usize; rank];
            {
                let mut acc = 1;
                for i in (0..rank).rev() {
                    src_strides[i] = if src[i] == 1 { 0 } else { acc };
                    acc *= src[i];
                }
            }
            let mut idx = vec![0usize; rank];
            for o in out.data_mut().iter_mut() {
                let mut si = 0;
                for i in 0..rank {
                    si += idx[i] * src_strides[i];
                }
                *o = sd[si];
                for i in (0..rank).rev() {
                    idx[i] += 1;
                    if idx[i] < target[i] {
                        break;
                    }
                    idx[i] = 0;
                }
            }
            Ok(out)
        }
        Op::GatherCols(idx) => {
            let (c, l) = match ins[0].shape() {
                [c, l] => (*c, *l),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "gather_cols expects [C, L]".into(),
                    })
                }
            };
            if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
                return Err(Error::Tape(format!(
                    "gather index {bad} out of range for {l} columns"
                )));
            }
            let sd = ins[0].data();
            let mut out = vec![0.0; c * idx.len()];
            for ch in 0..c {
                let src = &sd[ch * l..(ch + 1) * l];
                let dst = &mut out[ch * idx.len()..(ch + 1) * idx.len()];
                for (i, &j) in idx.iter().enumerate() {
                    dst[i] = src[j];
                }
            }
            NdArray::new(vec![c, idx.len()], out)
        }
        Op::ConcatRows => {
            let mut rows = 0;
            let tail = ins[0].shape()[1..].to_vec();
            for x in ins {
                if x.shape()[1..] != tail[..] {
                    return Err(Error::shape("concat_rows trailing dims", &tail, x.shape()));
                }
                rows += x.shape()[0];
            }
            let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
            for x in ins {
                data.extend_from_slice(x.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            NdArray::new(shape, data)
        }
        Op::SliceRows { start, len } => {
            let rows = ins[0].shape()[0];
            if start + len > rows {
                return Err(Error::Tape(format!(
                    "slice_rows {start}..{} out of range for {rows} rows",
                    start + len
                )));
            }
            let row_sz: usize = ins[0].shape()[1..].iter().product();
            let mut shape = vec![*len];
            shape.extend_from_slice(&ins[0].shape()[1..]);
            NdArray::new(
                shape,
                ins[0].data()[start * row_sz..(start + len) * row_sz].to_vec(),
            )
        }
        Op::Conv3d { stride } => {
            let (ci, dims) = expect_chw(ins[0], "conv3d")?;
            let (co, ci2) = match ins[1].shape() {
                [co, ci2, 3, 3, 3] => (*co, *ci2),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "conv3d weight must be [Co,Ci,3,3,3]".into(),
                    })
                }
            };
            if ci != ci2 || ins[2].shape() != [co] {
                return Err(Error::shape("conv3d channels", &[co, ci], ins[1].shape()));
            }
            let (h, w, d) = dims;
            let (oh, ow, od) = conv3d_out_dims(dims, *stride);
            let x = ins[0].data();
            let wt = ins[1].data();
            let bias = ins[2].data();
            let mut out = vec![0.0; co * oh * ow * od];
            for c_out in 0..co {
                for o_h in 0..oh {
                    for o_w in 0..ow {
                        for o_d in 0..od {
                            let mut acc = bias[c_out];
                            for c_in in 0..ci {
                                for kh in 0..3usize {
                                    let ih = (o_h * stride + kh) as isize - 1;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kw in 0..3usize {
                                        let iw = (o_w * stride + kw) as isize - 1;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        for kd in 0..3usize {
                                            let id = (o_d * stride + kd) as isize - 1;
                                            if id < 0 || id >= d as isize {
                                                continue;
                                            }
                                            acc += wt[(((c_out * ci + c_in) * 3 + kh) * 3 + kw) * 3
                                                + kd]
                                                * x[((c_in * h + ih as usize) * w + iw as usize)
                                                    * d
                                                    + id as usize];
                                        }
                                    }
                                }
                            }
                            out[((c_out * oh + o_h) * ow + o_w) * od + o_d] = acc;
                        }
                    }
                }
            }
            NdArray::new(vec![co, oh, ow, od], out)
        }
        Op::ConvTranspose3d => {
            let (ci, (h, w, d)) = expect_chw(ins[0], "conv_transpose3d")?;
            let (ci2, co) = match ins[1].shape() {
                [ci2, co, 2, 2, 2] => (*ci2, *co),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "conv_transpose3d weight must be [Ci,Co,2,2,2]".into(),
                    })
                }
            };
            if ci != ci2 || ins[2].shape() != [co] {
                return Err(Error::shape(
                    "conv_transpose3d channels",
                    &[ci, co],
                    ins[1].shape(),
                ));
            }
            let x = ins[0].data();
            let wt = ins[1].data();
            let bias = ins[2].data();
            let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
            let mut out = vec![0.0; co * oh * ow * od];
            for (c_out, b) in bias.iter().enumerate() {
                let span = &mut out[c_out * oh * ow * od..(c_out + 1) * oh * ow * od];
                span.fill(*b);
            }
            for c_in in 0..ci {
                for c_out in 0..co {
                    let wbase = (c_in * co + c_out) * 8;
                    for hh in 0..h {
                        for ww in 0..w {
                            for dd in 0..d {
                                let xv = x[(c_in * h + hh) * w * d + ww * d + dd];
                                if xv == 0.0 {
                                    continue;
                                }
                                for i in 0..2usize {
                                    for j in 0..2usize {
                                        for l in 0..2usize {
                                            out[((c_out * oh + 2 * hh + i) * ow + 2 * ww + j) * od
                                                + 2 * dd
                                                + l] += xv * wt[wbase + (i * 2 + j) * 2 + l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            NdArray::new(vec![co, oh, ow, od], out)
        }
        Op::CausalConv1d => {
            let (c, l) = match ins[0].shape() {
                [c, l] => (*c, *l),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "causal_conv1d expects [C, L]".into(),
                    })
                }
            };
            if ins[1].shape() != [c, 3] || ins[2].shape() != [c] {
                return Err(Error::shape("causal_conv1d weight", &[c, 3], ins[1].shape()));
            }
            let u = ins[0].data();
            let w = ins[1].data();
            let b = ins[2].data();
            let mut out = vec![0.0; c * l];
            for ch in 0..c {
                for t in 0..l {
                    let mut acc = b[ch];
                    for k in 0..3usize {
                        let tt = t as isize + k as isize - 2;
                        if tt >= 0 {
                            acc += w[ch * 3 + k] * u[ch * l + tt as usize];
                        }
                    }
                    out[ch * l + t] = acc;
                }
            }
            NdArray::new(vec![c, l], out)
        }
        Op::SelectiveScan => {
            let core = ssm::SsmCoreParams {
                a_log: ins[1].clone(),
                d_skip: ins[2].clone(),
                w_b: ins[3].clone(),
                w_c: ins[4].clone(),
                w_delta: ins[5].clone(),
                b_delta: ins[6].clone(),
            };
            ssm::selective_scan(ins[0], &core)
        }
        Op::LayerNorm { eps } => {
            let (c, m) = match ins[0].shape() {
                [c, m] => (*c, *m),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "layer_norm expects [C, M]".into(),
                    })
                }
            };
            if ins[1].shape() != [c] || ins[2].shape() != [c] {
                return Err(Error::shape("layer_norm affine", &[c], ins[1].shape()));
            }
            let x = ins[0].data();
            let gamma = ins[1].data();
            let beta = ins[2].data();
            let mut out = vec![0.0; c * m];
            for col in 0..m {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += x[ch * m + col];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let dv = x[ch * m + col] - mean;
                    var += dv * dv;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ch in 0..c {
                    out[ch * m + col] = gamma[ch] * (x[ch * m + col] - mean) * inv + beta[ch];
                }
            }
            NdArray::new(vec![c, m], out)
        }
        Op::CrossEntropyMean { labels } => {
            let (k, m) = match ins[0].shape() {
                [k, m] => (*k, *m),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "cross_entropy expects logits [K, M]".into(),
                    })
                }
            };
            if labels.len() != m {
                return Err(Error::Tape(format!(
                    "cross_entropy: {} labels for {m} columns",
                    labels.len()
                )));
            }
            if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &y)| y as usize >= k) {
                return Err(Error::Tape(format!(
                    "cross_entropy: label {bad} at voxel {i} out of range (num_classes {k})"
                )));
            }
            let z = ins[0].data();
            let mut total = 0.0;
            for col in 0..m {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..k {
                    mx = mx.max(z[ch * m + col]);
                }
                let mut lse = 0.0;
                for ch in 0..k {
                    lse += (z[ch * m + col] - mx).exp();
                }
                let lse = mx + lse.ln();
                total += lse - z[labels[col] as usize * m + col];
            }
            Ok(NdArray::scalar(total / m as f64))
        }
        Op::SpectralMag => {
            let (c, (h, w, d)) = expect_chw(ins[0], "spectral_mag")?;
            let vol = h * w * d;
            let dh = fft3d::half_depth(d);
            let mut out = Vec::with_capacity(c * h * w * dh);
            for ch in 0..c {
                let chan = NdArray::new(
                    vec![h, w, d],
                    ins[0].data()[ch * vol..(ch + 1) * vol].to_vec(),
                )?;
                let spec = fft3d::rfft3(&chan)?;
                out.extend(spec.data.iter().map(|cc| cc.norm()));
            }
            NdArray::new(vec![c, h, w, dh], out)
        }
        Op::SpectralRecon { phase, spatial } => {
            let (h, w, d) = *spatial;
            let dh = fft3d::half_depth(d);
            let c = match ins[0].shape() {
                [c, hh, ww, dd] if (*hh, *ww, *dd) == (h, w, dh) => *c,
                s => return Err(Error::shape("spectral_recon", &[0, h, w, dh], s)),
            };
            let half = h * w * dh;
            if phase.len() != c * half {
                return Err(Error::Tape(format!(
                    "spectral_recon: phase length {} != {}",
                    phase.len(),
                    c * half
                )));
            }
            let m = ins[0].data();
            let mut out = Vec::with_capacity(c * h * w * d);
            for ch in 0..c {
                let data: Vec<Complex64> = (0..half)
                    .map(|i| {
                        let mag = m[ch * half + i];
                        let p = phase[ch * half + i];
                        Complex64::new(mag * p.cos(), mag * p.sin())
                    })
                    .collect();
                let spec = fft3d::HalfSpectrum {
                    spatial_dims: (h, w, d),
                    data,
                };
                out.extend_from_slice(fft3d::irfft3(&spec).data());
            }
            NdArray::new(vec![c, h, w, d], out)
        }
    }
}

pub(crate) fn vjp_op(
    op: &Op,
    ins: &[&NdArray],
    out: &NdArray,
    g: &NdArray,
) -> Result<Vec<Option<NdArray>>> {
    Ok(match op {
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul => {
            let ga = g
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(gv, b)| gv * b)
                .collect();
            let gb = g
                .data()
                .iter()
                .zip(ins[0].data())
                .map(|(gv, a)| gv * a)
                .collect();
            vec![
                Some(NdArray::new(ins[0].shape().to_vec(), ga)?),
                Some(NdArray::new(ins[1].shape().to_vec(), gb)?),
            ]
        }
        Op::Scale(c) => vec![Some(g.map(|x| c * x))],
        Op::MatMul => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            // gA = g . B^T
            let mut ga = vec![0.0; m * k];
            let b = ins[1].data();
            let gd = g.data();
            for i in 0..m {
                for j in 0..n {
                    let gv = gd[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for kk in 0..k {
                        ga[i * k + kk] += gv * b[kk * n + j];
                    }
                }
            }
            // gB = A^T . g
            let a = ins[0].data();
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for kk in 0..k {
                    let av = a[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let grow = &gd[i * n..(i + 1) * n];
                    let brow = &mut gb[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        brow[j] += av * grow[j];
                    }
                }
            }
            vec![
                Some(NdArray::new(vec![m, k], ga)?),
                Some(NdArray::new(vec![k, n], gb)?),
            ]
        }
        Op::Exp => vec![Some(elementwise_vjp(g, out, |gv, y| gv * y))],
        Op::Log => vec![Some(elementwise_vjp(g, ins[0], |gv, x| gv / x))],
        Op::Tanh => vec![Some(elementwise_vjp(g, out, |gv, y| gv * (1.0 - y * y)))],
        Op::Sigmoid => vec![Some(elementwise_vjp(g, out, |gv, y| gv * y * (1.0 - y)))],
        Op::Silu => vec![Some(elementwise_vjp(g, ins[0], |gv, x| {
            let s = sigmoid(x);
            gv * (s + x * s * (1.0 - s))
        }))],
        Op::Gelu => vec![Some(elementwise_vjp(g, ins[0], |gv, x| gv * gelu_grad(x)))],
        Op::LeakyRelu(s) => {
            let s = *s;
            vec![Some(elementwise_vjp(g, ins[0], move |gv, x| {
                if x >= 0.0 {
                    gv
                } else {
                    s * gv
                }
            }))]
        }
        Op::Softplus => vec![Some(elementwise_vjp(g, ins[0], |gv, x| gv * sigmoid(x)))],
        Op::Sum => vec![Some(NdArray::filled(ins[0].shape(), g.value()))],
        Op::Mean => vec![Some(NdArray::filled(
            ins[0].shape(),
            g.value() / ins[0].numel() as f64,
        ))],
        Op::Reshape(_) => vec![Some(g.reshaped(ins[0].shape().to_vec())?)],
        Op::Broadcast(target) => {
            let src = ins[0].shape().to_vec();
            let rank = target.len();
            let mut acc = NdArray::zeros(&src);
            let mut src_strides = vec![0usize; rank];
            {
                let mut s = 1;
                for i in (0..rank).rev() {
                    src_strides[i] = if src[i] == 1 { 0 } else { s };
                    s *= src[i];
                }
            }
            let gd = g.data();
            let ad = acc.data_mut();
            let mut idx = vec![0usize; rank];
            for &gv in gd {
                let mut si = 0;
                for i in 0..rank {
                    si += idx[i] * src_strides[i];
                }
                ad[si] += gv;
                for i in (0..rank).rev() {
                    idx[i] += 1;
                    if idx[i] < target[i] {
                        break;
                    }
                    idx[i] = 0;
                }
            }
            vec![Some(acc)]
        }
        Op::GatherCols(idx) => {
            let (c, l) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut acc = vec![0.0; c * l];
            let gd = g.data();
            for ch in 0..c {
                let grow = &gd[ch * idx.len()..(ch + 1) * idx.len()];
                let arow = &mut acc[ch * l..(ch + 1) * l];
                for (i, &j) in idx.iter().enumerate() {
                    arow[j] += grow[i];
                }
            }
            vec![Some(NdArray::new(vec![c, l], acc)?)]
        }
        Op::ConcatRows => {
            let row_sz: usize = ins[0].shape()[1..].iter().product();
            let gd = g.data();
            let mut grads = Vec::with_capacity(ins.len());
            let mut offset = 0;
            for x in ins {
                let n = x.shape()[0] * row_sz;
                grads.push(Some(NdArray::new(
                    x.shape().to_vec(),
                    gd[offset..offset + n].to_vec(),
                )?));
                offset += n;
            }
            grads
        }
        Op::SliceRows { start, len } => {
            let row_sz: usize = ins[0].shape()[1..].iter().product();
            let mut acc = NdArray::zeros(ins[0].shape());
            acc.data_mut()[start * row_sz..(start + len) * row_sz].copy_from_slice(g.data());
            vec![Some(acc)]
        }
        Op::Conv3d { stride } => {
            let (ci, (h, w, d)) = expect_chw(ins[0], "conv3d")?;
            let co = ins[1].shape()[0];
            let (oh, ow, od) = conv3d_out_dims((h, w, d), *stride);
            let x = ins[0].data();
            let wt = ins[1].data();
            let gd = g.data();
            let mut gx = vec![0.0; ci * h * w * d];
            let mut gw = vec![0.0; co * ci * 27];
            let mut gb = vec![0.0; co];
            for c_out in 0..co {
                for o_h in 0..oh {
                    for o_w in 0..ow {
                        for o_d in 0..od {
                            let gv = gd[((c_out * oh + o_h) * ow + o_w) * od + o_d];
                            if gv == 0.0 {
                                continue;
                            }
                            gb[c_out] += gv;
                            for c_in in 0..ci {
                                for kh in 0..3usize {
                                    let ih = (o_h * stride + kh) as isize - 1;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kw in 0..3usize {
                                        let iw = (o_w * stride + kw) as isize - 1;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        for kd in 0..3usize {
                                            let id = (o_d * stride + kd) as isize - 1;
                                            if id < 0 || id >= d as isize {
                                                continue;
                                            }
                                            let xi = ((c_in * h + ih as usize) * w + iw as usize)
                                                * d
                                                + id as usize;
                                            let wi = (((c_out * ci + c_in) * 3 + kh) * 3 + kw) * 3
                                                + kd;
                                            gx[xi] += gv * wt[wi];
                                            gw[wi] += gv * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Some(NdArray::new(vec![ci, h, w, d], gx)?),
                Some(NdArray::new(vec![co, ci, 3, 3, 3], gw)?),
                Some(NdArray::new(vec![co], gb)?),
            ]
        }
        Op::ConvTranspose3d => {
            let (ci, (h, w, d)) = expect_chw(ins[0], "conv_transpose3d")?;
            let co = ins[1].shape()[1];
            let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
            let x = ins[0].data();
            let wt = ins[1].data();
            let gd = g.data();
            let mut gx = vec![0.0; ci * h * w * d];
            let mut gw = vec![0.0; ci * co * 8];
            let mut gb = vec![0.0; co];
            for c_out in 0..co {
                let span = &gd[c_out * oh * ow * od..(c_out + 1) * oh * ow * od];
                gb[c_out] = span.iter().sum();
            }
            for c_in in 0..ci {
                for c_out in 0..co {
                    let wbase = (c_in * co + c_out) * 8;
                    for hh in 0..h {
                        for ww in 0..w {
                            for dd in 0..d {
                                let xi = (c_in * h + hh) * w * d + ww * d + dd;
                                for i in 0..2usize {
                                    for j in 0..2usize {
                                        for l in 0..2usize {
                                            let gv = gd[((c_out * oh + 2 * hh + i) * ow
                                                + 2 * ww
                                                + j)
                                                * od
                                                + 2 * dd
                                                + l];
                                            let wi = wbase + (i * 2 + j) * 2 + l;
                                            gx[xi] += gv * wt[wi];
                                            gw[wi] += gv * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Some(NdArray::new(vec![ci, h, w, d], gx)?),
                Some(NdArray::new(vec![ci, co, 2, 2, 2], gw)?),
                Some(NdArray::new(vec![co], gb)?),
            ]
        }
        Op::CausalConv1d => {
            let (c, l) = (ins[0].shape()[0], ins[0].shape()[1]);
            let u = ins[0].data();
            let w = ins[1].data();
            let gd = g.data();
            let mut gu = vec![0.0; c * l];
            let mut gw = vec![0.0; c * 3];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                for t in 0..l {
                    let gv = gd[ch * l + t];
                    if gv == 0.0 {
                        continue;
                    }
                    gb[ch] += gv;
                    for k in 0..3usize {
                        let tt = t as isize + k as isize - 2;
                        if tt >= 0 {
                            gu[ch * l + tt as usize] += gv * w[ch * 3 + k];
                            gw[ch * 3 + k] += gv * u[ch * l + tt as usize];
                        }
                    }
                }
            }
            vec![
                Some(NdArray::new(vec![c, l], gu)?),
                Some(NdArray::new(vec![c, 3], gw)?),
                Some(NdArray::new(vec![c], gb)?),
            ]
        }
        Op::SelectiveScan => {
            let core = ssm::SsmCoreParams {
                a_log: ins[1].clone(),
                d_skip: ins[2].clone(),
                w_b: ins[3].clone(),
                w_c: ins[4].clone(),
                w_delta: ins[5].clone(),
                b_delta: ins[6].clone(),
            };
            let grads = ssm::selective_scan_vjp(ins[0], &core, g)?;
            vec![
                Some(grads.u),
                Some(grads.a_log),
                Some(grads.d_skip),
                Some(grads.w_b),
                Some(grads.w_c),
                Some(grads.w_delta),
                Some(grads.b_delta),
            ]
        }
        Op::LayerNorm { eps } => {
            let (c, m) = (ins[0].shape()[0], ins[0].shape()[1]);
            let x = ins[0].data();
            let gamma = ins[1].data();
            let gd = g.data();
            let mut gx = vec![0.0; c * m];
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for col in 0..m {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += x[ch * m + col];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let dv = x[ch * m + col] - mean;
                    var += dv * dv;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mut mean_gxh = 0.0;
                let mut mean_gxh_xh = 0.0;
                for ch in 0..c {
                    let xh = (x[ch * m + col] - mean) * inv;
                    let gv = gd[ch * m + col];
                    gg[ch] += gv * xh;
                    gbeta[ch] += gv;
                    let gxh = gv * gamma[ch];
                    mean_gxh += gxh;
                    mean_gxh_xh += gxh * xh;
                }
                mean_gxh /= c as f64;
                mean_gxh_xh /= c as f64;
                for ch in 0..c {
                    let xh = (x[ch * m + col] - mean) * inv;
                    let gxh = gd[ch * m + col] * gamma[ch];
                    gx[ch * m + col] = inv * (gxh - mean_gxh - xh * mean_gxh_xh);
                }
            }
            vec![
                Some(NdArray::new(vec![c, m], gx)?),
                Some(NdArray::new(vec![c], gg)?),
                Some(NdArray::new(vec![c], gbeta)?),
            ]
        }
        Op::CrossEntropyMean { labels } => {
            let (k, m) = (ins[0].shape()[0], ins[0].shape()[1]);
            let z = ins[0].data();
            let gv = g.value() / m as f64;
            let mut gz = vec![0.0; k * m];
            for col in 0..m {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..k {
                    mx = mx.max(z[ch * m + col]);
                }
                let mut denom = 0.0;
                for ch in 0..k {
                    denom += (z[ch * m + col] - mx).exp();
                }
                for ch in 0..k {
                    let p = (z[ch * m + col] - mx).exp() / denom;
                    let y = if labels[col] as usize == ch { 1.0 } else { 0.0 };
                    gz[ch * m + col] = gv * (p - y);
                }
            }
            vec![Some(NdArray::new(vec![k, m], gz)?)]
        }
        Op::SpectralMag => {
            let (c, (h, w, d)) = expect_chw(ins[0], "spectral_mag")?;
            let vol = h * w * d;
            let dh = fft3d::half_depth(d);
            let half = h * w * dh;
            let gd = g.data();
            let mut gx = Vec::with_capacity(c * vol);
            for ch in 0..c {
                let chan = NdArray::new(
                    vec![h, w, d],
                    ins[0].data()[ch * vol..(ch + 1) * vol].to_vec(),
                )?;
                let spec = fft3d::rfft3(&chan)?;
                // d|F|/dF has direction e^{i phase}; lift the magnitude
                // cotangent along it and pull back through the linear rfft3
                let ghat: Vec<Complex64> = spec
                    .data
                    .iter()
                    .zip(&gd[ch * half..(ch + 1) * half])
                    .map(|(&cc, &gm)| {
                        let p = fft3d::phase_of(cc);
                        Complex64::new(gm * p.cos(), gm * p.sin())
                    })
                    .collect();
                let gh = fft3d::HalfSpectrum {
                    spatial_dims: (h, w, d),
                    data: ghat,
                };
                gx.extend_from_slice(fft3d::rfft3_adjoint(&gh).data());
            }
            vec![Some(NdArray::new(vec![c, h, w, d], gx)?)]
        }
        Op::SpectralRecon { phase, spatial } => {
            let (h, w, d) = *spatial;
            let dh = fft3d::half_depth(d);
            let half = h * w * dh;
            let c = ins[0].shape()[0];
            let vol = h * w * d;
            let gd = g.data();
            let mut gm = Vec::with_capacity(c * half);
            for ch in 0..c {
                let gchan = NdArray::new(
                    vec![h, w, d],
                    gd[ch * vol..(ch + 1) * vol].to_vec(),
                )?;
                let dc = fft3d::irfft3_adjoint(&gchan)?;
                for (i, cc) in dc.data.iter().enumerate() {
                    let p = phase[ch * half + i];
                    gm.push(cc.re * p.cos() + cc.im * p.sin());
                }
            }
            vec![Some(NdArray::new(vec![c, h, w, dh], gm)?)]
        }
    })
}

fn elementwise_vjp(g: &NdArray, basis: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    let data = g
        .data()
        .iter()
        .zip(basis.data())
        .map(|(&gv, &x)| f(gv, x))
        .collect();
    NdArray::new(basis.shape().to_vec(), data).expect("elementwise shape")
}
