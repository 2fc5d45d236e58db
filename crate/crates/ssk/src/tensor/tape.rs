//! Append-only operation tape for reverse-mode differentiation.
//!
//! Every operation pushes one node holding the output value plus whatever
//! context its vector-Jacobian product needs. Node inputs always have
//! smaller ids than the node itself, so the backward pass is a single
//! reverse sweep over the vector.

#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::SegVariant;
use crate::tensor::Tensor;

/// Handle to a node on a [`GraphTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Geometry of a recorded convolution, saved for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeo {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum OpRecord {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geo: ConvGeo },
    /// `argmax` holds, per output element, the flat input index that won.
    MaxPool2d { input: NodeId, argmax: Arc<Vec<usize>> },
    BilinearUpsample { input: NodeId, n: usize, c: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sigmoid { input: NodeId },
    Tanh { input: NodeId },
    Relu { input: NodeId },
    SoftmaxChannels { input: NodeId, n: usize, c: usize, hw: usize },
    Reshape { input: NodeId },
    /// `[N,C,H,W]` -> `[N*H*W, C]` permutation.
    FlattenSamples { input: NodeId, n: usize, c: usize, hw: usize },
    /// Hadamard product of `[N,C,H,W]` with a `[C,H,W]` map broadcast over N.
    MulMap { input: NodeId, map: NodeId, n: usize, chw: usize },
    SumAll { input: NodeId },
    MeanAll { input: NodeId },
    /// Select frame `t` of a `[B,T,...]` tensor.
    TimeSlice { input: NodeId, t: usize, b: usize, t_total: usize, frame: usize },
    /// Stack T tensors of identical shape `[B,...]` into `[B,T,...]`.
    TimeStack { inputs: Vec<NodeId>, b: usize, frame: usize },
    /// Mean of -log softmax(scores)[label] over K rows.
    CrossEntropy { scores: NodeId, labels: Arc<Vec<usize>>, k: usize, c: usize },
    /// Soft multi-class IoU loss; forward intersection/union are saved per class.
    IouLoss {
        probs: NodeId,
        onehot: Arc<Vec<f64>>,
        classes: Arc<Vec<usize>>,
        k: usize,
        c: usize,
        inter: Arc<Vec<f64>>,
        union: Arc<Vec<f64>>,
    },
    /// Weighted positive/negative sample loss over raw scores; the class
    /// weights are constants (no gradient flows through them).
    SegLoss {
        scores: NodeId,
        labels: Arc<Vec<usize>>,
        k: usize,
        c: usize,
        variant: SegVariant,
        margin: f64,
        w_pos: Arc<Vec<f64>>,
        w_neg: Arc<Vec<f64>>,
        norm: f64,
    },
}

pub(crate) struct Node {
    pub value: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub op: OpRecord,
}

static TAPE_IDS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Recorded computation graph. One tape per forward/backward cycle.
pub struct GraphTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GraphTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`GraphTape::backward`].
pub struct Gradients {
    tape_id: u64,
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given tensor, if any flowed to it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        match t.node_raw() {
            Some((tape_id, id)) if tape_id == self.tape_id => self.by_node.get(id.0)?.as_deref(),
            _ => None,
        }
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        self.by_node.get(id.0)?.as_deref()
    }
}

impl GraphTape {
    pub fn new() -> Self {
        GraphTape {
            id: TAPE_IDS.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf node and returns a tracked copy that
    /// shares the same buffer. `requires_grad` marks parameters.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        let id = self.push(t.data_arc(), t.shape().to_vec(), requires_grad, OpRecord::Leaf);
        Tensor::from_parts(t.shape().to_vec(), t.data_arc(), Some((self.id, id)))
    }

    /// Node id of `t` on this tape; tensors from other tapes (or none)
    /// are registered as constant leaves.
    pub(crate) fn ensure_node(&mut self, t: &Tensor) -> NodeId {
        match t.node_on(self) {
            Some(id) => id,
            None => self.push(t.data_arc(), t.shape().to_vec(), false, OpRecord::Leaf),
        }
    }

    pub(crate) fn push(
        &mut self,
        value: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: OpRecord,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, shape, requires_grad, op });
        id
    }

    /// Pushes an op node, deriving `requires_grad` from its inputs, and
    /// returns the tracked output tensor.
    pub(crate) fn emit(&mut self, value: Vec<f64>, shape: Vec<usize>, inputs: &[NodeId], op: OpRecord) -> Tensor {
        let requires = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let value = Arc::new(value);
        let id = self.push(Arc::clone(&value), shape.clone(), requires, op);
        Tensor::from_parts(shape, value, Some((self.id, id)))
    }

    /// Reverse sweep from a scalar loss. Returns the gradient accumulator;
    /// the tape itself is unchanged and can serve further lookups.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = loss.node_on(self).ok_or(Error::NotOnTape)?;
        if loss_id.0 >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        if self.nodes[loss_id.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss_id.0].shape.clone()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id.0] = Some(vec![1.0]);

        for i in (0..=loss_id.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backward_node(i, g, lower);
        }

        Ok(Gradients { tape_id: self.id, by_node: grads })
    }

    /// Accumulates the VJP of node `i` into `lower` (gradients of ids < i).
    fn backward_node(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        macro_rules! acc {
            ($id:expr) => {
                lower[$id.0].get_or_insert_with(|| vec![0.0; nodes[$id.0].value.len()])
            };
        }

        match &nodes[i].op {
            OpRecord::Leaf => {}

            OpRecord::Add { a, b } => {
                if wants(*a) {
                    let da = acc!(a);
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if wants(*b) {
                    let db = acc!(b);
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }

            OpRecord::Sub { a, b } => {
                if wants(*a) {
                    let da = acc!(a);
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if wants(*b) {
                    let db = acc!(b);
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }

            OpRecord::Mul { a, b } => {
                if wants(*a) {
                    let bv = Arc::clone(&nodes[b.0].value);
                    let da = acc!(a);
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv.iter()) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = Arc::clone(&nodes[a.0].value);
                    let db = acc!(b);
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av.iter()) {
                        *d += gi * ai;
                    }
                }
            }

            OpRecord::Scale { input, factor } => {
                if wants(*input) {
                    let d = acc!(input);
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi * factor;
                    }
                }
            }

            OpRecord::Sigmoid { input } => {
                if wants(*input) {
                    let y = Arc::clone(&nodes[i].value);
                    let d = acc!(input);
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y.iter()) {
                        *di += gi * yi * (1.0 - yi);
                    }
                }
            }

            OpRecord::Tanh { input } => {
                if wants(*input) {
                    let y = Arc::clone(&nodes[i].value);
                    let d = acc!(input);
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y.iter()) {
                        *di += gi * (1.0 - yi * yi);
                    }
                }
            }

            OpRecord::Relu { input } => {
                // Subgradient 0 at the kink.
                if wants(*input) {
                    let x = Arc::clone(&nodes[input.0].value);
                    let d = acc!(input);
                    for ((di, gi), xi) in d.iter_mut().zip(g).zip(x.iter()) {
                        if *xi > 0.0 {
                            *di += gi;
                        }
                    }
                }
            }

            OpRecord::Reshape { input } => {
                if wants(*input) {
                    let d = acc!(input);
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }

            OpRecord::SumAll { input } => {
                if wants(*input) {
                    let d = acc!(input);
                    for di in d.iter_mut() {
                        *di += g[0];
                    }
                }
            }

            OpRecord::MeanAll { input } => {
                if wants(*input) {
                    let d = acc!(input);
                    let scale = g[0] / d.len() as f64;
                    for di in d.iter_mut() {
                        *di += scale;
                    }
                }
            }

            OpRecord::MaxPool2d { input, argmax } => {
                if wants(*input) {
                    let d = acc!(input);
                    for (j, &src) in argmax.iter().enumerate() {
                        d[src] += g[j];
                    }
                }
            }

            OpRecord::FlattenSamples { input, n, c, hw } => {
                if wants(*input) {
                    let d = acc!(input);
                    // out[(n*hw + p)*c + ch] = in[(n*c + ch)*hw + p]
                    for ni in 0..*n {
                        for ch in 0..*c {
                            let in_base = (ni * c + ch) * hw;
                            for p in 0..*hw {
                                d[in_base + p] += g[(ni * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }

            OpRecord::MulMap { input, map, n, chw } => {
                if wants(*input) {
                    let m = Arc::clone(&nodes[map.0].value);
                    let d = acc!(input);
                    for ni in 0..*n {
                        let base = ni * chw;
                        for j in 0..*chw {
                            d[base + j] += g[base + j] * m[j];
                        }
                    }
                }
                if wants(*map) {
                    let x = Arc::clone(&nodes[input.0].value);
                    let d = acc!(map);
                    for ni in 0..*n {
                        let base = ni * chw;
                        for j in 0..*chw {
                            d[j] += g[base + j] * x[base + j];
                        }
                    }
                }
            }

            OpRecord::TimeSlice { input, t, b, t_total, frame } => {
                if wants(*input) {
                    let d = acc!(input);
                    for bi in 0..*b {
                        let dst = (bi * t_total + t) * frame;
                        let src = bi * frame;
                        for j in 0..*frame {
                            d[dst + j] += g[src + j];
                        }
                    }
                }
            }

            OpRecord::TimeStack { inputs, b, frame } => {
                let t_total = inputs.len();
                for (t, id) in inputs.iter().enumerate() {
                    if !wants(*id) {
                        continue;
                    }
                    let d = acc!(id);
                    for bi in 0..*b {
                        let src = (bi * t_total + t) * frame;
                        let dst = bi * frame;
                        for j in 0..*frame {
                            d[dst + j] += g[src + j];
                        }
                    }
                }
            }

            OpRecord::SoftmaxChannels { input, n, c, hw } => {
                if wants(*input) {
                    let y = Arc::clone(&nodes[i].value);
                    let d = acc!(input);
                    for ni in 0..*n {
                        for p in 0..*hw {
                            let mut dot = 0.0;
                            for ch in 0..*c {
                                let idx = (ni * c + ch) * hw + p;
                                dot += g[idx] * y[idx];
                            }
                            for ch in 0..*c {
                                let idx = (ni * c + ch) * hw + p;
                                d[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }

            OpRecord::BilinearUpsample { input, n, c, in_h, in_w, out_h, out_w } => {
                if wants(*input) {
                    let d = acc!(input);
                    let sy = if *out_h > 1 { (*in_h as f64 - 1.0) / (*out_h as f64 - 1.0) } else { 0.0 };
                    let sx = if *out_w > 1 { (*in_w as f64 - 1.0) / (*out_w as f64 - 1.0) } else { 0.0 };
                    for img in 0..(n * c) {
                        let in_base = img * in_h * in_w;
                        let out_base = img * out_h * out_w;
                        for oy in 0..*out_h {
                            let fy = oy as f64 * sy;
                            let y0 = fy.floor() as usize;
                            let y1 = (y0 + 1).min(in_h - 1);
                            let wy = fy - y0 as f64;
                            for ox in 0..*out_w {
                                let fx = ox as f64 * sx;
                                let x0 = fx.floor() as usize;
                                let x1 = (x0 + 1).min(in_w - 1);
                                let wx = fx - x0 as f64;
                                let go = g[out_base + oy * out_w + ox];
                                d[in_base + y0 * in_w + x0] += go * (1.0 - wy) * (1.0 - wx);
                                d[in_base + y0 * in_w + x1] += go * (1.0 - wy) * wx;
                                d[in_base + y1 * in_w + x0] += go * wy * (1.0 - wx);
                                d[in_base + y1 * in_w + x1] += go * wy * wx;
                            }
                        }
                    }
                }
            }

            OpRecord::Conv2d { input, weight, bias, geo } => {
                let geo = geo.clone();
                let x = Arc::clone(&nodes[input.0].value);
                let w = Arc::clone(&nodes[weight.0].value);
                let (oh, ow) = (geo.out_h, geo.out_w);
                if wants(*input) {
                    let d = acc!(input);
                    for ni in 0..geo.n {
                        for co in 0..geo.c_out {
                            let g_base = (ni * geo.c_out + co) * oh * ow;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[g_base + oy * ow + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..geo.c_in {
                                        let in_base = (ni * geo.c_in + ci) * geo.h * geo.w;
                                        let w_base = (co * geo.c_in + ci) * geo.kh * geo.kw;
                                        for ky in 0..geo.kh {
                                            let iy = (oy * geo.stride + ky * geo.dilation) as isize
                                                - geo.pad_top as isize;
                                            if iy < 0 || iy >= geo.h as isize {
                                                continue;
                                            }
                                            for kx in 0..geo.kw {
                                                let ix = (ox * geo.stride + kx * geo.dilation) as isize
                                                    - geo.pad_left as isize;
                                                if ix < 0 || ix >= geo.w as isize {
                                                    continue;
                                                }
                                                d[in_base + iy as usize * geo.w + ix as usize] +=
                                                    go * w[w_base + ky * geo.kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wants(*weight) {
                    let d = acc!(weight);
                    for ni in 0..geo.n {
                        for co in 0..geo.c_out {
                            let g_base = (ni * geo.c_out + co) * oh * ow;
                            for ci in 0..geo.c_in {
                                let in_base = (ni * geo.c_in + ci) * geo.h * geo.w;
                                let w_base = (co * geo.c_in + ci) * geo.kh * geo.kw;
                                for ky in 0..geo.kh {
                                    for kx in 0..geo.kw {
                                        let mut sum = 0.0;
                                        for oy in 0..oh {
                                            let iy = (oy * geo.stride + ky * geo.dilation) as isize
                                                - geo.pad_top as isize;
                                            if iy < 0 || iy >= geo.h as isize {
                                                continue;
                                            }
                                            for ox in 0..ow {
                                                let ix = (ox * geo.stride + kx * geo.dilation) as isize
                                                    - geo.pad_left as isize;
                                                if ix < 0 || ix >= geo.w as isize {
                                                    continue;
                                                }
                                                sum += g[g_base + oy * ow + ox]
                                                    * x[in_base + iy as usize * geo.w + ix as usize];
                                            }
                                        }
                                        d[w_base + ky * geo.kw + kx] += sum;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(bias) = bias {
                    if wants(*bias) {
                        let d = acc!(bias);
                        for ni in 0..geo.n {
                            for co in 0..geo.c_out {
                                let g_base = (ni * geo.c_out + co) * oh * ow;
                                let mut sum = 0.0;
                                for j in 0..oh * ow {
                                    sum += g[g_base + j];
                                }
                                d[co] += sum;
                            }
                        }
                    }
                }
            }

            OpRecord::CrossEntropy { scores, labels, k, c } => {
                if wants(*scores) {
                    let s = Arc::clone(&nodes[scores.0].value);
                    let d = acc!(scores);
                    let scale = g[0] / *k as f64;
                    for row in 0..*k {
                        let base = row * c;
                        let row_s = &s[base..base + c];
                        let max = row_s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for &v in row_s {
                            denom += (v - max).exp();
                        }
                        for j in 0..*c {
                            let p = (row_s[j] - max).exp() / denom;
                            let y = if labels[row] == j { 1.0 } else { 0.0 };
                            d[base + j] += scale * (p - y);
                        }
                    }
                }
            }

            OpRecord::IouLoss { probs, onehot, classes, k, c, inter, union } => {
                // loss = 1 - mean_t inter_t/union_t  (zero-union classes fixed at ratio 1)
                if wants(*probs) {
                    let d = acc!(probs);
                    let m = classes.len() as f64;
                    for &t in classes.iter() {
                        let u = union[t];
                        if u <= 0.0 {
                            continue;
                        }
                        let it = inter[t];
                        for row in 0..*k {
                            let idx = row * c + t;
                            let gt = onehot[idx];
                            // d ratio / d p = (gt*u - it*(1-gt)) / u^2
                            let dr = (gt * u - it * (1.0 - gt)) / (u * u);
                            d[idx] += g[0] * (-dr / m);
                        }
                    }
                }
            }

            OpRecord::SegLoss { scores, labels, k, c, variant, margin, w_pos, w_neg, norm } => {
                if wants(*scores) {
                    let s = Arc::clone(&nodes[scores.0].value);
                    let d = acc!(scores);
                    let scale = g[0] / norm;
                    for row in 0..*k {
                        let base = row * c;
                        let row_s = &s[base..base + c];
                        let gt = labels[row];
                        match variant {
                            SegVariant::Hinge => {
                                // L_p subgradient: +1 at the (zero-masked) runner-up
                                // argmax, -1 at the ground-truth class, if active.
                                if w_pos[gt] != 0.0 {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_j = 0;
                                    for j in 0..*c {
                                        let v = if j == gt { 0.0 } else { row_s[j] };
                                        if v > best {
                                            best = v;
                                            best_j = j;
                                        }
                                    }
                                    if best - row_s[gt] + margin > 0.0 {
                                        let w = scale * w_pos[gt];
                                        if best_j != gt {
                                            d[base + best_j] += w;
                                        }
                                        d[base + gt] -= w;
                                    }
                                }
                                for t in 0..*c {
                                    if t == gt || w_neg[t] == 0.0 {
                                        continue;
                                    }
                                    if row_s[t] - row_s[gt] + margin > 0.0 {
                                        let w = scale * w_neg[t];
                                        d[base + t] += w;
                                        d[base + gt] -= w;
                                    }
                                }
                            }
                            SegVariant::Linear => {
                                if w_pos[gt] != 0.0 {
                                    d[base + gt] -= scale * w_pos[gt];
                                }
                                for t in 0..*c {
                                    if t == gt || w_neg[t] == 0.0 {
                                        continue;
                                    }
                                    if row_s[gt] <= row_s[t] + margin {
                                        d[base + t] += scale * w_neg[t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = GraphTape::new();
        let a = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(&a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_untracked_loss() {
        let tape = GraphTape::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(Error::NotOnTape)));
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        // loss = sum(w * x) with constant x  =>  d loss / d w = x
        let mut tape = GraphTape::new();
        let w = tape.leaf(&Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        let x = Tensor::new(vec![3], vec![3.0, 4.0, 5.0]).unwrap();
        let prod = ops::mul(&mut tape, &w, &x).unwrap();
        let loss = ops::sum_all(&mut tape, &prod);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[3.0, 4.0, 5.0]);
        // x was never registered as a parameter: no gradient for it.
        assert!(grads.get(&x).is_none());
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = GraphTape::new();
        let w = tape.leaf(&Tensor::scalar(0.0), true);
        let y = ops::sigmoid(&mut tape, &w);
        let grads = tape.backward(&y).unwrap();
        assert!((grads.get(&w).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = sum(w*2) + sum(w*3)  =>  d loss / d w = 5 per element
        let mut tape = GraphTape::new();
        let w = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true);
        let a = ops::scale(&mut tape, &w, 2.0);
        let b = ops::scale(&mut tape, &w, 3.0);
        let s = ops::add(&mut tape, &a, &b).unwrap();
        let loss = ops::sum_all(&mut tape, &s);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn same_seed_same_tape_bitwise() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let mut tape = GraphTape::new();
            let w = tape.leaf(&Tensor::uniform(vec![4], 1.0, &mut rng), true);
            let x = Tensor::uniform(vec![4], 1.0, &mut rng);
            let wx = ops::mul(&mut tape, &w, &x).unwrap();
            let h = ops::tanh(&mut tape, &wx);
            let loss = ops::sum_all(&mut tape, &h);
            let grads = tape.backward(&loss).unwrap();
            (loss.item().unwrap(), grads.get(&w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }
}
