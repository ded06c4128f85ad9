//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape covers exactly the operations the reconstruction pipeline needs:
//! dense affine layers, sine/ReLU activations, same-padded 2-D convolution,
//! per-channel bias, elementwise arithmetic, MSE losses, and an opaque
//! linear-map node that wraps any matched forward/adjoint operator pair
//! (the CT projector enters the graph through it). Nodes are recorded in
//! topological order during the forward build; `backward` replays them in
//! exact reverse order.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nnkit::params::ParamSet;
use crate::nnkit::tensor::Tensor;

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

type LinearFn = Rc<dyn Fn(&Tensor) -> Tensor>;

enum Op {
    Leaf,
    /// View into the ParamSet at build time; grads flow back via `apply_grads`.
    Param { offset: usize },
    /// (N,K) @ (K,M) -> (N,M)
    MatMul { a: Node, b: Node },
    /// Add a length-M vector to every row of an (N,M) matrix.
    AddRowVec { mat: Node, vec: Node },
    /// Add a length-C vector per channel of a (C,H,W) tensor.
    AddChanBias { x: Node, bias: Node },
    /// sin(w0 * x)
    SinScale { x: Node, w0: f64 },
    Relu { x: Node },
    Add { a: Node, b: Node },
    Sub { a: Node, b: Node },
    /// a * x + b, elementwise with scalar constants.
    AffineConst { x: Node, a: f64 },
    /// Scalar mean((a - b)^2).
    Mse { a: Node, b: Node },
    /// Same-padded stride-1 2-D convolution: (C,H,W) * (O,C,k,k) -> (O,H,W).
    Conv2d { input: Node, weight: Node },
    /// Stack n same-shape tensors along a new leading axis.
    Stack { parts: Vec<Node> },
    Reshape { x: Node },
    /// Opaque linear operator with its exact algebraic adjoint.
    LinearMap { x: Node, adj: LinearFn },
}

struct TapeNode {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Recorded forward computation; one backward pass per forward build.
pub struct Tape {
    nodes: Vec<TapeNode>,
    consumed: bool,
    // (offset, node) pairs so repeated `param` calls reuse one node.
    param_nodes: Vec<(usize, Node)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, param_nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Node {
        let n = value.len();
        self.nodes.push(TapeNode { value, grad: vec![0.0; n], op });
        Node(self.nodes.len() - 1)
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn grad(&self, node: Node) -> &[f64] {
        &self.nodes[node.0].grad
    }

    pub fn leaf(&mut self, value: Tensor) -> Node {
        self.push(value, Op::Leaf)
    }

    /// Register a named parameter block as a (shaped) node. Repeated
    /// registrations of the same block return the same node, so weight
    /// sharing across graph branches accumulates gradients correctly.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Node> {
        let entry = params.entry(name)?;
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(off, _)| *off == entry.offset) {
            return Ok(node);
        }
        let value = Tensor::new(
            entry.shape.clone(),
            params.values[entry.offset..entry.offset + entry.len()].to_vec(),
        )?;
        let offset = entry.offset;
        let node = self.push(value, Op::Param { offset });
        self.param_nodes.push((offset, node));
        Ok(node)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add_row_vec(&mut self, mat: Node, vec: Node) -> Result<Node> {
        let (sm, sv) = (self.value(mat).shape(), self.value(vec).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                context: "add_row_vec",
                expected: sm.to_vec(),
                got: sv.to_vec(),
            });
        }
        let (n, m) = (sm[0], sm[1]);
        let mut out = self.value(mat).data().to_vec();
        let v = self.value(vec).data();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += v[j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::AddRowVec { mat, vec }))
    }

    pub fn add_chan_bias(&mut self, x: Node, bias: Node) -> Result<Node> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                context: "add_chan_bias",
                expected: sx.to_vec(),
                got: sb.to_vec(),
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for ch in 0..c {
            for p in 0..h * w {
                out[ch * h * w + p] += b[ch];
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(value, Op::AddChanBias { x, bias }))
    }

    pub fn sin_scale(&mut self, x: Node, w0: f64) -> Node {
        let value = self.value(x).map(|v| (w0 * v).sin());
        self.push(value, Op::SinScale { x, w0 })
    }

    pub fn relu(&mut self, x: Node) -> Node {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise a*x + b with scalar constants.
    pub fn affine(&mut self, x: Node, a: f64, b: f64) -> Node {
        let value = self.value(x).affine(a, b);
        self.push(value, Op::AffineConst { x, a })
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Node {
        self.affine(x, c, 0.0)
    }

    pub fn mse(&mut self, a: Node, b: Node) -> Result<Node> {
        let value = Tensor::scalar(self.value(a).mse(self.value(b))?);
        Ok(self.push(value, Op::Mse { a, b }))
    }

    pub fn conv2d(&mut self, input: Node, weight: Node) -> Result<Node> {
        let (si, sw) = (self.value(input).shape(), self.value(weight).shape());
        if si.len() != 3 || sw.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "conv2d rank",
                expected: si.to_vec(),
                got: sw.to_vec(),
            });
        }
        if si[0] != sw[1] {
            return Err(Error::ShapeMismatch {
                context: "conv2d channels",
                expected: vec![si[0]],
                got: vec![sw[1]],
            });
        }
        if sw[2] != sw[3] || sw[2].is_multiple_of(2) {
            return Err(Error::invalid("conv2d kernels must be square with odd size"));
        }
        if sw[2] > si[1] || sw[2] > si[2] {
            return Err(Error::invalid(format!(
                "conv2d kernel {} larger than input {}x{}",
                sw[2], si[1], si[2]
            )));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, k) = (sw[0], sw[2]);
        let out = conv2d_raw(self.value(input).data(), self.value(weight).data(), c, h, w, o, k);
        let value = Tensor::new(vec![o, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight }))
    }

    pub fn stack(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::invalid("stack of zero tensors"));
        }
        let shape0 = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            if self.value(p).shape() != shape0.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "stack",
                    expected: shape0,
                    got: self.value(p).shape().to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&shape0);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: Node, shape: Vec<usize>) -> Result<Node> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Apply an opaque linear operator. `adj` must be the exact algebraic
    /// transpose of `fwd`; the backward pass applies it to the upstream
    /// gradient.
    pub fn linear_map(
        &mut self,
        x: Node,
        fwd: impl Fn(&Tensor) -> Tensor + 'static,
        adj: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Node {
        let value = fwd(self.value(x));
        self.push(value, Op::LinearMap { x, adj: Rc::new(adj) })
    }

    /// Reverse pass from a scalar loss node. Errors on a non-scalar loss and
    /// on reuse of an already-consumed tape.
    pub fn backward(&mut self, loss: Node) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same forward pass".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_node(i)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) -> Result<()> {
        // Split borrows: take the grad out, scatter into input grads, put back.
        let grad = std::mem::take(&mut self.nodes[i].grad);
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                // dA = dOut @ B^T
                let da = matmul_nt(&grad, self.nodes[b.0].value.data(), n, m, k);
                // dB = A^T @ dOut
                let db = matmul_tn(self.nodes[a.0].value.data(), &grad, n, k, m);
                accumulate(&mut self.nodes[a.0].grad, &da);
                accumulate(&mut self.nodes[b.0].grad, &db);
            }
            Op::AddRowVec { mat, vec } => {
                let (mat, vec) = (*mat, *vec);
                let m = self.nodes[vec.0].value.len();
                accumulate(&mut self.nodes[mat.0].grad, &grad);
                let gv = &mut self.nodes[vec.0].grad;
                for (idx, g) in grad.iter().enumerate() {
                    gv[idx % m] += g;
                }
            }
            Op::AddChanBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                accumulate(&mut self.nodes[x.0].grad, &grad);
                let gb = &mut self.nodes[bias.0].grad;
                for ch in 0..c {
                    let mut s = 0.0;
                    for p in 0..hw {
                        s += grad[ch * hw + p];
                    }
                    gb[ch] += s;
                }
            }
            Op::SinScale { x, w0 } => {
                let (x, w0) = (*x, *w0);
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(&grad)
                    .map(|(&v, &g)| g * w0 * (w0 * v).cos())
                    .collect();
                accumulate(&mut self.nodes[x.0].grad, &gx);
            }
            Op::Relu { x } => {
                let x = *x;
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(&grad)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(&mut self.nodes[x.0].grad, &gx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(&mut self.nodes[a.0].grad, &grad);
                accumulate(&mut self.nodes[b.0].grad, &grad);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(&mut self.nodes[a.0].grad, &grad);
                let gb = &mut self.nodes[b.0].grad;
                for (g, d) in gb.iter_mut().zip(&grad) {
                    *g -= d;
                }
            }
            Op::AffineConst { x, a } => {
                let (x, a) = (*x, *a);
                let gx: Vec<f64> = grad.iter().map(|&g| a * g).collect();
                accumulate(&mut self.nodes[x.0].grad, &gx);
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let g = grad[0];
                let n = self.nodes[a.0].value.len().max(1) as f64;
                let scale = 2.0 * g / n;
                let diffs: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(&av, &bv)| scale * (av - bv))
                    .collect();
                accumulate(&mut self.nodes[a.0].grad, &diffs);
                let gb = &mut self.nodes[b.0].grad;
                for (gv, d) in gb.iter_mut().zip(&diffs) {
                    *gv -= d;
                }
            }
            Op::Conv2d { input, weight } => {
                let (input, weight) = (*input, *weight);
                let si = self.nodes[input.0].value.shape().to_vec();
                let sw = self.nodes[weight.0].value.shape().to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let (o, k) = (sw[0], sw[2]);
                let (gi, gw) = conv2d_backward_raw(
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    &grad,
                    c,
                    h,
                    w,
                    o,
                    k,
                );
                accumulate(&mut self.nodes[input.0].grad, &gi);
                accumulate(&mut self.nodes[weight.0].grad, &gw);
            }
            Op::Stack { parts } => {
                let parts = parts.clone();
                let part_len = self.nodes[parts[0].0].value.len();
                for (pi, &p) in parts.iter().enumerate() {
                    let chunk = &grad[pi * part_len..(pi + 1) * part_len];
                    accumulate(&mut self.nodes[p.0].grad, chunk);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                accumulate(&mut self.nodes[x.0].grad, &grad);
            }
            Op::LinearMap { x, adj } => {
                let (x, adj) = (*x, Rc::clone(adj));
                let shape = self.nodes[i].value.shape().to_vec();
                let gt = Tensor::new(shape, grad.clone())?;
                let gx = adj(&gt);
                if gx.shape() != self.nodes[x.0].value.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "linear_map adjoint",
                        expected: self.nodes[x.0].value.shape().to_vec(),
                        got: gx.shape().to_vec(),
                    });
                }
                accumulate(&mut self.nodes[x.0].grad, gx.data());
            }
        }
        self.nodes[i].grad = grad;
        Ok(())
    }

    /// Accumulate parameter-node gradients back into the ParamSet.
    pub fn apply_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let Op::Param { offset } = node.op {
                for (i, g) in node.grad.iter().enumerate() {
                    params.grads[offset + i] += g;
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// (N,K) @ (K,M), ikj order for cache behavior.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// (N,M) @ (K,M)^T -> (N,K)
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for kk in 0..k {
            let brow = &b[kk * m..(kk + 1) * m];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * k + kk] = s;
        }
    }
    out
}

/// (N,K)^T @ (N,M) -> (K,M)
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn conv2d_raw(input: &[f64], weight: &[f64], c: usize, h: usize, w: usize, o: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for ic in 0..c {
            let wbase = (oc * c + ic) * k * k;
            let ibase = ic * h * w;
            let obase = oc * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // Output rows where input row y+ky-pad is in bounds.
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad - ky).min(h);
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let irow = ibase + iy * w;
                        let orow = obase + y * w;
                        for x in x_lo..x_hi {
                            let ix = x + kx - pad;
                            out[orow + x] += wv * input[irow + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_raw(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let mut gi = vec![0.0; c * h * w];
    let mut gw = vec![0.0; o * c * k * k];
    for oc in 0..o {
        for ic in 0..c {
            let wbase = (oc * c + ic) * k * k;
            let ibase = ic * h * w;
            let obase = oc * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    let mut gwv = 0.0;
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad - ky).min(h);
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let irow = ibase + iy * w;
                        let orow = obase + y * w;
                        for x in x_lo..x_hi {
                            let ix = x + kx - pad;
                            let g = grad_out[orow + x];
                            gi[irow + ix] += wv * g;
                            gwv += input[irow + ix] * g;
                        }
                    }
                    gw[wbase + ky * k + kx] += gwv;
                }
            }
        }
    }
    (gi, gw)
}
