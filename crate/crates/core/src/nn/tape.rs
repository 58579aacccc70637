//! Tape-based reverse-mode automatic differentiation over 2D value nodes.
//!
//! Forward values are computed eagerly as the graph is built; `backward`
//! walks the node list in reverse. Every operation carries a hand-derived
//! adjoint, verified end-to-end against central finite differences by the
//! gradient-check tests.

use super::tensor::{c, Scalar};

pub type NodeId = usize;

/// Token/slot ↔ pixel/channel mapping for patchified heatmaps:
/// token = (y/p)·(W/p) + x/p, slot = ((y%p)·p + x%p)·8 + channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchLayout {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn slots(&self) -> usize {
        8 * self.patch * self.patch
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, channel: usize) -> (usize, usize) {
        let p = self.patch;
        let token = (y / p) * (self.width / p) + x / p;
        let slot = ((y % p) * p + x % p) * 8 + channel;
        (token, slot)
    }
}

enum Op<T> {
    Leaf,
    /// [m,k] × [k,n]
    MatMul,
    /// a · bᵀ with b stored [n,k]
    MatMulTransB,
    /// Elementwise sum of two same-shape nodes.
    Add,
    /// [m,n] + row vector [1,n] broadcast over rows.
    AddRowBias,
    Scale(T),
    SoftmaxRows,
    /// inputs: [x, gamma, beta]; gamma/beta are [1, n].
    LayerNorm,
    Gelu,
    Sigmoid,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
    /// Mean Smooth-L1 (beta = 1) against a constant target; output [1,1].
    SmoothL1Mean { target: Vec<T> },
    /// Windowed soft-argmax over a patchified heatmap; output [1,16] of
    /// (x/W, y/H) per channel. Matches `heatmap::decode_corners`.
    SoftArgmax { layout: PatchLayout, radius: usize },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    rows: usize,
    cols: usize,
    value: Vec<T>,
    /// Op-specific cache (LayerNorm: per-row mean and inverse std).
    aux: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        aux: Vec<T>,
    ) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            inputs,
            rows,
            cols,
            value,
            aux,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<T>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(Op::Leaf, vec![], rows, cols, value, vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.nodes[a].value, &self.nodes[b].value, &mut out, m, k, n);
        self.push(Op::MatMul, vec![a, b], m, n, out, vec![])
    }

    /// a · bᵀ where b is stored row-major as [n, k].
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_transb inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        matmul_transb_into(&self.nodes[a].value, &self.nodes[b].value, &mut out, m, k, n);
        self.push(Op::MatMulTransB, vec![a, b], m, n, out, vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "add shape mismatch");
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Op::Add, vec![a, b], m, n, value, vec![])
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(bias), (1, n), "bias must be [1, {n}]");
        let mut value = self.nodes[a].value.clone();
        for r in 0..m {
            for (v, &b) in value[r * n..(r + 1) * n].iter_mut().zip(&self.nodes[bias].value) {
                *v = *v + b;
            }
        }
        self.push(Op::AddRowBias, vec![a, bias], m, n, value, vec![])
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let (m, n) = self.shape(a);
        let value = self.nodes[a].value.iter().map(|&x| x * factor).collect();
        self.push(Op::Scale(factor), vec![a], m, n, value, vec![])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut value = self.nodes[a].value.clone();
        for r in 0..m {
            let row = &mut value[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Op::SoftmaxRows, vec![a], m, n, value, vec![])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let eps = c::<T>(LN_EPS);
        let nt = c::<T>(n as f64);
        let mut value = vec![T::zero(); m * n];
        let mut aux = vec![T::zero(); 2 * m];
        for r in 0..m {
            let row = &self.nodes[x].value[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / nt;
            let istd = T::one() / (var + eps).sqrt();
            aux[2 * r] = mean;
            aux[2 * r + 1] = istd;
            for j in 0..n {
                let xhat = (row[j] - mean) * istd;
                value[r * n + j] =
                    xhat * self.nodes[gamma].value[j] + self.nodes[beta].value[j];
            }
        }
        self.push(Op::LayerNorm, vec![x, gamma, beta], m, n, value, aux)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let k0 = c::<T>(GELU_C0);
        let k1 = c::<T>(GELU_C1);
        let half = c::<T>(0.5);
        let value = self.nodes[a]
            .value
            .iter()
            .map(|&x| {
                let u = k0 * (x + k1 * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        self.push(Op::Gelu, vec![a], m, n, value, vec![])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let value = self.nodes[a]
            .value
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid, vec![a], m, n, value, vec![])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n);
        let mut value = Vec::with_capacity(m * len);
        for r in 0..m {
            value.extend_from_slice(&self.nodes[a].value[r * n + start..r * n + start + len]);
        }
        self.push(Op::SliceCols { start, len }, vec![a], m, len, value, vec![])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m);
        let value = self.nodes[a].value[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows { start, len }, vec![a], len, n, value, vec![])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (m, pn) = self.shape(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            rows += m;
            value.extend_from_slice(&self.nodes[p].value);
        }
        self.push(Op::ConcatRows, parts.to_vec(), rows, n, value, vec![])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = vec![T::zero(); m * total];
        let mut offset = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pm, m, "concat_cols row mismatch");
            for r in 0..m {
                value[r * total + offset..r * total + offset + pn]
                    .copy_from_slice(&self.nodes[p].value[r * pn..(r + 1) * pn]);
            }
            offset += pn;
        }
        self.push(Op::ConcatCols, parts.to_vec(), m, total, value, vec![])
    }

    /// Mean Smooth-L1 (beta = 1) between `a` and a constant `target`.
    pub fn smooth_l1_mean(&mut self, a: NodeId, target: Vec<T>) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(target.len(), m * n);
        let count = c::<T>((m * n) as f64);
        let half = c::<T>(0.5);
        let mut sum = T::zero();
        for (&x, &t) in self.nodes[a].value.iter().zip(&target) {
            let d = x - t;
            let ad = d.abs();
            sum = sum + if ad < T::one() { half * d * d } else { ad - half };
        }
        let value = vec![sum / count];
        self.push(Op::SmoothL1Mean { target }, vec![a], 1, 1, value, vec![])
    }

    /// Decode-style windowed soft-argmax over a patchified heatmap
    /// [tokens, 8p²]; returns [1, 16] of (x/W, y/H) interleaved per channel.
    pub fn soft_argmax(&mut self, a: NodeId, layout: PatchLayout, radius: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m, layout.tokens());
        assert_eq!(n, layout.slots());
        let mut value = vec![T::zero(); 16];
        for ch in 0..8 {
            let (cx, cy, _) = soft_argmax_channel(&self.nodes[a].value, &layout, radius, ch);
            value[2 * ch] = c::<T>(cx / layout.width as f64);
            value[2 * ch + 1] = c::<T>(cy / layout.height as f64);
        }
        self.push(Op::SoftArgmax { layout, radius }, vec![a], 1, 16, value, vec![])
    }

    /// Reverse pass from a scalar node; returns one gradient buffer per node.
    pub fn backward(&self, loss: NodeId) -> Vec<Vec<T>> {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::zero(); n.value.len()])
            .collect();
        grads[loss][0] = T::one();

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if grads[id].iter().all(|g| *g == T::zero()) {
                continue;
            }
            // Take the output gradient by value to satisfy the borrow checker.
            let g = std::mem::take(&mut grads[id]);
            match &node.op {
                Op::Leaf => {
                    grads[id] = g;
                    continue;
                }
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = node.cols;
                    // dA += G·Bᵀ, dB += Aᵀ·G
                    matmul_transb_into(&g, &self.nodes[b].value, &mut grads[a], m, n, k);
                    matmul_transa_into(&self.nodes[a].value, &g, &mut grads[b], m, k, n);
                }
                Op::MatMulTransB => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = node.cols;
                    // y = A·Bᵀ: dA += G·B, dB += Gᵀ·A
                    matmul_into(&g, &self.nodes[b].value, &mut grads[a], m, n, k);
                    matmul_transa_into(&g, &self.nodes[a].value, &mut grads[b], m, n, k);
                }
                Op::Add => {
                    for &input in &node.inputs {
                        for (ga, &gv) in grads[input].iter_mut().zip(&g) {
                            *ga = *ga + gv;
                        }
                    }
                }
                Op::AddRowBias => {
                    let (a, bias) = (node.inputs[0], node.inputs[1]);
                    let n = node.cols;
                    for (ga, &gv) in grads[a].iter_mut().zip(&g) {
                        *ga = *ga + gv;
                    }
                    for r in 0..node.rows {
                        for j in 0..n {
                            grads[bias][j] = grads[bias][j] + g[r * n + j];
                        }
                    }
                }
                Op::Scale(factor) => {
                    let a = node.inputs[0];
                    for (ga, &gv) in grads[a].iter_mut().zip(&g) {
                        *ga = *ga + gv * *factor;
                    }
                }
                Op::SoftmaxRows => {
                    let a = node.inputs[0];
                    let n = node.cols;
                    for r in 0..node.rows {
                        let y = &node.value[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot = y
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv * gv)
                            .sum::<T>();
                        let ga = &mut grads[a][r * n..(r + 1) * n];
                        for j in 0..n {
                            ga[j] = ga[j] + y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm => {
                    let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let n = node.cols;
                    let nt = c::<T>(n as f64);
                    for r in 0..node.rows {
                        let xr = &self.nodes[x].value[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean = node.aux[2 * r];
                        let istd = node.aux[2 * r + 1];
                        // dxhat = g ⊙ gamma; dx = istd·(dxhat − mean(dxhat)
                        //        − xhat·mean(dxhat ⊙ xhat))
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * istd;
                            let dxhat = gr[j] * self.nodes[gamma].value[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            grads[gamma][j] = grads[gamma][j] + gr[j] * xhat;
                            grads[beta][j] = grads[beta][j] + gr[j];
                        }
                        let mean_dxhat = sum_dxhat / nt;
                        let mean_dxhat_xhat = sum_dxhat_xhat / nt;
                        let gx = &mut grads[x][r * n..(r + 1) * n];
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * istd;
                            let dxhat = gr[j] * self.nodes[gamma].value[j];
                            gx[j] = gx[j] + istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                Op::Gelu => {
                    let a = node.inputs[0];
                    let k0 = c::<T>(GELU_C0);
                    let k1 = c::<T>(GELU_C1);
                    let half = c::<T>(0.5);
                    let three = c::<T>(3.0);
                    for (j, (ga, &gv)) in grads[a].iter_mut().zip(&g).enumerate() {
                        let x = self.nodes[a].value[j];
                        let u = k0 * (x + k1 * x * x * x);
                        let t = u.tanh();
                        let du = k0 * (T::one() + three * k1 * x * x);
                        let deriv =
                            half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        *ga = *ga + gv * deriv;
                    }
                }
                Op::Sigmoid => {
                    let a = node.inputs[0];
                    for (j, (ga, &gv)) in grads[a].iter_mut().zip(&g).enumerate() {
                        let y = node.value[j];
                        *ga = *ga + gv * y * (T::one() - y);
                    }
                }
                Op::SliceCols { start, len } => {
                    let a = node.inputs[0];
                    let n = self.nodes[a].cols;
                    for r in 0..node.rows {
                        for j in 0..*len {
                            grads[a][r * n + start + j] =
                                grads[a][r * n + start + j] + g[r * len + j];
                        }
                    }
                }
                Op::SliceRows { start, len } => {
                    let a = node.inputs[0];
                    let n = node.cols;
                    debug_assert_eq!(len * n, g.len());
                    let offset = start * n;
                    for (j, &gv) in g.iter().enumerate() {
                        grads[a][offset + j] = grads[a][offset + j] + gv;
                    }
                }
                Op::ConcatRows => {
                    let mut offset = 0;
                    for &input in &node.inputs {
                        let len = self.nodes[input].value.len();
                        for (ga, &gv) in grads[input].iter_mut().zip(&g[offset..offset + len]) {
                            *ga = *ga + gv;
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols => {
                    let total = node.cols;
                    let mut offset = 0;
                    for &input in &node.inputs {
                        let pn = self.nodes[input].cols;
                        for r in 0..node.rows {
                            for j in 0..pn {
                                grads[input][r * pn + j] =
                                    grads[input][r * pn + j] + g[r * total + offset + j];
                            }
                        }
                        offset += pn;
                    }
                }
                Op::SmoothL1Mean { target } => {
                    let a = node.inputs[0];
                    let count = c::<T>(target.len() as f64);
                    let scale = g[0] / count;
                    for (j, (ga, &t)) in grads[a].iter_mut().zip(target).enumerate() {
                        let d = self.nodes[a].value[j] - t;
                        let phi = if d.abs() < T::one() {
                            d
                        } else if d > T::zero() {
                            T::one()
                        } else {
                            -T::one()
                        };
                        *ga = *ga + scale * phi;
                    }
                }
                Op::SoftArgmax { layout, radius } => {
                    let a = node.inputs[0];
                    for ch in 0..8 {
                        let (cx, cy, window) =
                            soft_argmax_channel(&self.nodes[a].value, layout, *radius, ch);
                        let Some(win) = window else { continue };
                        let gx = g[2 * ch] / c::<T>(layout.width as f64);
                        let gy = g[2 * ch + 1] / c::<T>(layout.height as f64);
                        // With weights w_j = u_j², u_j = v_j − min:
                        // d c/d v_j = 2u_j(p_j − c)/S for j ≠ argmin; the
                        // argmin pixel (the subtracted baseline) takes the
                        // negated sum so the row sums to zero (shift
                        // invariance).
                        let mut acc_x = T::zero();
                        let mut acc_y = T::zero();
                        for (&(x, y, idx), &u) in win.pixels.iter().zip(&win.weights) {
                            if idx == win.argmin {
                                continue;
                            }
                            let dx = c::<T>(2.0 * u * (x as f64 - cx) / win.sum);
                            let dy = c::<T>(2.0 * u * (y as f64 - cy) / win.sum);
                            grads[a][idx] = grads[a][idx] + gx * dx + gy * dy;
                            acc_x = acc_x + dx;
                            acc_y = acc_y + dy;
                        }
                        grads[a][win.argmin] =
                            grads[a][win.argmin] - gx * acc_x - gy * acc_y;
                    }
                }
            }
        }
        grads
    }
}

struct ArgmaxWindow {
    /// (x, y, flat index into the token-major buffer) per window pixel.
    pixels: Vec<(usize, usize, usize)>,
    /// Baseline-subtracted values u_j, parallel to `pixels`.
    weights: Vec<f64>,
    argmin: usize,
    /// Σ u_j².
    sum: f64,
}

/// Shared forward/backward helper: argmax pixel, window, centroid of squared
/// baseline-subtracted values (matching `decode_corners`). Returns the
/// decoded (x, y) and, when the window carries weight, its description for
/// the adjoint.
fn soft_argmax_channel<T: Scalar>(
    data: &[T],
    layout: &PatchLayout,
    radius: usize,
    channel: usize,
) -> (f64, f64, Option<ArgmaxWindow>) {
    let (w, h) = (layout.width, layout.height);
    let mut best = f64::NEG_INFINITY;
    let mut worst = f64::INFINITY;
    let mut best_xy = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (tok, slot) = layout.index(x, y, channel);
            let v = data[tok * layout.slots() + slot]
                .to_f64()
                .expect("finite heatmap value");
            if v > best {
                best = v;
                best_xy = (x, y);
            }
            if v < worst {
                worst = v;
            }
        }
    }
    if best == worst {
        // Constant channel: center, no gradient.
        return ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, None);
    }
    let (px, py) = best_xy;
    let x0 = px.saturating_sub(radius);
    let x1 = (px + radius).min(w - 1);
    let y0 = py.saturating_sub(radius);
    let y1 = (py + radius).min(h - 1);
    let mut pixels = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
    let mut floor = f64::INFINITY;
    let mut argmin = usize::MAX;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (tok, slot) = layout.index(x, y, channel);
            let idx = tok * layout.slots() + slot;
            let v = data[idx].to_f64().expect("finite heatmap value");
            if v < floor {
                floor = v;
                argmin = idx;
            }
            pixels.push((x, y, idx));
        }
    }
    let mut weights = Vec::with_capacity(pixels.len());
    let mut sum = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for &(x, y, idx) in &pixels {
        let u = data[idx].to_f64().unwrap() - floor;
        let wgt = u * u;
        weights.push(u);
        sum += wgt;
        sx += wgt * x as f64;
        sy += wgt * y as f64;
    }
    if sum > 0.0 {
        (
            sx / sum,
            sy / sum,
            Some(ArgmaxWindow {
                pixels,
                weights,
                argmin,
                sum,
            }),
        )
    } else {
        (px as f64, py as f64, None)
    }
}

/// out += a·b, a: [m,k], b: [k,n], all row-major.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out += a·bᵀ, a: [m,k], b: [n,k].
pub fn matmul_transb_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x * y)
                .sum::<T>();
            out[i * n + j] = out[i * n + j] + dot;
        }
    }
}

/// out += aᵀ·g, a: [m,k], g: [m,n], out: [k,n].
pub fn matmul_transa_into<T: Scalar>(
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + aik * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    /// Central finite differences on every element of every leaf, for an
    /// arbitrary scalar-valued graph builder.
    fn grad_check(
        leaves: &[(usize, usize)],
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        seed: u64,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.random_range(-1.2..1.2)).collect())
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves
            .iter()
            .zip(&data)
            .map(|(&(r, c), d)| tape.leaf(r, c, d.clone()))
            .collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (li, &(r, cdim)) in leaves.iter().enumerate() {
            for e in 0..r * cdim {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = leaves
                        .iter()
                        .zip(&data)
                        .enumerate()
                        .map(|(i, (&(r, c), d))| {
                            let mut d = d.clone();
                            if i == li {
                                d[e] += delta;
                            }
                            tape.leaf(r, c, d)
                        })
                        .collect();
                    let loss = build(&mut tape, &ids);
                    tape.value(loss)[0]
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = grads[ids[li]][e];
                // The floor reflects the FD noise floor (~1e-11 absolute at
                // eps = 1e-6 in f64): below it, relative error is meaningless.
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "leaf {li} elem {e}: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        grad_check(
            &[(3, 4), (4, 5), (1, 5)],
            |t, ids| {
                let y = t.matmul(ids[0], ids[1]);
                let y = t.add_row_bias(y, ids[2]);
                let y = t.gelu(y);
                t.smooth_l1_mean(y, vec![0.3; 15])
            },
            1,
        );
    }

    #[test]
    fn matmul_transb_and_softmax_gradients() {
        grad_check(
            &[(3, 4), (5, 4)],
            |t, ids| {
                let y = t.matmul_transb(ids[0], ids[1]);
                let y = t.scale(y, 0.7);
                let y = t.softmax_rows(y);
                t.smooth_l1_mean(y, vec![0.1; 15])
            },
            2,
        );
    }

    #[test]
    fn layer_norm_and_sigmoid_gradients() {
        grad_check(
            &[(4, 6), (1, 6), (1, 6)],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]);
                let y = t.sigmoid(y);
                t.smooth_l1_mean(y, vec![0.4; 24])
            },
            3,
        );
    }

    #[test]
    fn slice_concat_gradients() {
        grad_check(
            &[(4, 6), (2, 6)],
            |t, ids| {
                let joined = t.concat_rows(&[ids[0], ids[1]]);
                let top = t.slice_rows(joined, 1, 3);
                let left = t.slice_cols(top, 0, 3);
                let right = t.slice_cols(top, 3, 3);
                let glued = t.concat_cols(&[right, left]);
                let act = t.add(glued, glued);
                t.smooth_l1_mean(act, vec![0.0; 18])
            },
            4,
        );
    }

    #[test]
    fn soft_argmax_matches_decode_and_gradients() {
        // An 8x8 single-patch layout keeps the check tiny.
        let layout = PatchLayout {
            height: 8,
            width: 8,
            patch: 8,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut data = vec![0.0f64; layout.tokens() * layout.slots()];
        for v in data.iter_mut() {
            // Round through f32 so the f64 tape and the f32 decoder see
            // identical values.
            *v = rng.random_range(0.0..0.2f32) as f64;
        }
        // A clear peak per channel.
        for ch in 0..8 {
            let (x, y) = (1 + ch % 5, 2 + ch % 4);
            let (tok, slot) = layout.index(x, y, ch);
            data[tok * layout.slots() + slot] = 1.0;
        }
        let mut tape = Tape::new();
        let leaf = tape.leaf(layout.tokens(), layout.slots(), data.clone());
        let out = tape.soft_argmax(leaf, layout, 3);

        // Forward agrees with the heatmap decoder on the same values.
        let mut hm = crate::heatmap::CornerHeatmap::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..8 {
                    let (tok, slot) = layout.index(x, y, ch);
                    hm.values[(y * 8 + x) * 8 + ch] =
                        data[tok * layout.slots() + slot] as f32;
                }
            }
        }
        let (decoded, _) = crate::heatmap::decode_corners(&hm);
        for ch in 0..8 {
            let got_x = tape.value(out)[2 * ch] * 8.0;
            let got_y = tape.value(out)[2 * ch + 1] * 8.0;
            assert!((got_x - decoded.points[ch].x).abs() < 1e-5);
            assert!((got_y - decoded.points[ch].y).abs() < 1e-5);
        }

        grad_check(
            &[(layout.tokens(), layout.slots())],
            |t, ids| {
                // Shift into a positive, peaked range so argmax stays put
                // under the finite-difference probes.
                let base = t.leaf(layout.tokens(), layout.slots(), data.clone());
                let x = t.scale(ids[0], 0.05);
                let x = t.add(x, base);
                let coords = t.soft_argmax(x, layout, 3);
                t.smooth_l1_mean(coords, vec![0.5; 16])
            },
            6,
        );
    }
}
