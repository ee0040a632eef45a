//! Reverse-mode tape. Every op appends one node holding its value and the
//! data its backward rule needs; `backward` walks the nodes in reverse.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::ops::{col2im_add, conv_output_extent, im2col_into, log_softmax_rows, softmax_rows, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics seen by a train-mode batch norm, reported so
/// the owner of the running statistics can fold them in after the pass.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub tag: usize,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
        out_channels: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LogSoftmax(Var),
    Softmax(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    StackRows(Vec<Var>),
    FlattenTranspose(Var),
    Reshape(Var),
    Sum(Var),
    /// Scalar whose gradient w.r.t. `x` was computed alongside its value.
    Loss {
        x: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_observations: Vec<BnObservation>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("grad shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0)?.take()
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    t.expect_rank(2, what)?;
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_observations: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, false)
    }

    /// A shared leaf that receives a gradient (model parameters).
    pub fn param(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, Op::Leaf, true)
    }

    /// An owned leaf, optionally tracked.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, requires_grad)
    }

    // ---------------------------------------------------------------- layers

    /// Cross-correlation of `C_in×H×W` with `C_out×C_in×kh×kw` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return shape_err(format!("conv2d: input {xs:?}, weight {ws:?}"));
        }
        if xs[0] != ws[1] {
            return shape_err(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs[0], ws[1]
            ));
        }
        if self.value(b).shape() != [ws[0]] {
            return shape_err(format!(
                "conv2d: bias {:?} for {} output channels",
                self.value(b).shape(),
                ws[0]
            ));
        }
        let (oh, ow) = match (
            conv_output_extent(xs[1], ws[2], stride.0, padding.0),
            conv_output_extent(xs[2], ws[3], stride.1, padding.1),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return shape_err(format!(
                    "conv2d: kernel {}x{} stride {:?} pad {:?} does not fit input {}x{}",
                    ws[2], ws[3], stride, padding, xs[1], xs[2]
                ))
            }
        };
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            out_h: oh,
            out_w: ow,
        };
        let (k, n, cout) = (geom.rows(), geom.cols(), ws[0]);
        let mut cols = vec![0.0; k * n];
        im2col_into(self.value(x).data(), &geom, &mut cols);
        let mut out = vec![0.0; cout * n];
        for (c, bias) in self.value(b).data().iter().enumerate() {
            out[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *bias);
        }
        gemm(cout, k, n, self.value(w).data(), false, &cols, false, &mut out, true);
        let value = Tensor::new(vec![cout, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
                out_channels: cout,
            },
            &[x, w, b],
        ))
    }

    /// Per-channel normalization of `C×…`. Train mode normalizes with the
    /// statistics of this input and reports them (tagged) for running-stat
    /// updates; eval mode uses the supplied running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (&[f64], &[f64]), tag: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return shape_err("batch_norm: rank-0 input");
        }
        let c = xs[0];
        let per = self.value(x).len() / c.max(1);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("batch_norm: affine params do not match {c} channels"));
        }
        let batch_stats = self.mode == Mode::Train;
        if !batch_stats && (running.0.len() != c || running.1.len() != c) {
            return Err(Error::Contract(
                "batch_norm: eval mode needs populated running statistics".into(),
            ));
        }
        if batch_stats && per < 2 {
            return Err(Error::Contract(format!(
                "batch_norm: {per} value(s) per channel cannot give batch statistics"
            )));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        let mut obs_mean = Vec::new();
        let mut obs_var = Vec::new();
        for ch in 0..c {
            let src = &xd[ch * per..(ch + 1) * per];
            let (mean, var) = if batch_stats {
                let mean = src.iter().sum::<f64>() / per as f64;
                let ss: f64 = src.iter().map(|v| (v - mean) * (v - mean)).sum();
                obs_mean.push(mean);
                obs_var.push(ss / (per as f64 - 1.0));
                (mean, ss / per as f64)
            } else {
                (running.0[ch], running.1[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..per {
                let h = (src[i] - mean) * is;
                xhat[ch * per + i] = h;
                out[ch * per + i] = gd[ch] * h + bd[ch];
            }
        }
        if batch_stats {
            self.bn_observations.push(BnObservation {
                tag,
                mean: obs_mean,
                var: obs_var,
            });
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalizes each row of a `T×D` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (t, d) = dims2(self.value(x), "layer_norm")?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return shape_err("layer_norm: affine params do not match width");
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let src = &xd[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect()).expect("same shape");
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Inverted dropout; identity in eval mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    // ---------------------------------------------------------------- algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return shape_err(format!("matmul: [{m}x{k}] · [{k2}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds a length-`D` bias to every row of a `T×D` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, d) = dims2(self.value(x), "add_row_bias")?;
        if self.value(b).shape() != [d] {
            return shape_err(format!("add_row_bias: bias {:?} for width {d}", self.value(b).shape()));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..t {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(value, Op::AddRowBias { x, b }, &[x, b]))
    }

    /// `x · w + b` for `x: T×D_in`, `w: D_in×D_out`, `b: D_out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
        )?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        )?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (t, k) = dims2(self.value(x), "log_softmax")?;
        if k == 0 {
            return shape_err("log_softmax: zero classes");
        }
        let value = Tensor::new(vec![t, k], log_softmax_rows(self.value(x).data(), k))?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (t, k) = dims2(self.value(x), "softmax")?;
        if k == 0 {
            return shape_err("softmax: zero classes");
        }
        let value = Tensor::new(vec![t, k], softmax_rows(self.value(x).data(), k))?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start + len > c {
            return shape_err(format!("slice_cols: {start}+{len} exceeds {c} columns"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols: no inputs");
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return shape_err("concat_cols: row counts differ");
            }
            widths.push(c);
        }
        let r = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row `index` of a matrix as a `1×D` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "row")?;
        if index >= r {
            return shape_err(format!("row: index {index} of {r}"));
        }
        let value = Tensor::new(vec![1, c], self.value(x).row(index).to_vec())?;
        Ok(self.push(value, Op::Row { x, index }, &[x]))
    }

    /// Stacks `1×D` (or `k×D`) blocks vertically.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("stack_rows: no inputs");
        }
        let d = dims2(self.value(parts[0]), "stack_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2(self.value(p), "stack_rows")?;
            if c != d {
                return shape_err("stack_rows: widths differ");
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec()), parts))
    }

    /// `C×L×W` feature map to a `(L·W)×C` sequence; row `i·W + j` is the
    /// channel vector at spatial position `(i, j)`.
    pub fn flatten_transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.expect_rank(3, "flatten_transpose")?;
        let (c, l, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let n = l * w;
        let src = t.data();
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                out[p * c + ch] = src[ch * n + p];
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::FlattenTranspose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Records a scalar loss whose gradient w.r.t. `x` is already known.
    pub fn loss_node(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return shape_err("loss_node: gradient does not match input");
        }
        Ok(self.push(Tensor::scalar(value), Op::Loss { x, grad }, &[x]))
    }

    // --------------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` w.r.t. every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
                out_channels,
            } => {
                let (k, n, cout) = (geom.rows(), geom.cols(), *out_channels);
                if self.tracked(*w) {
                    add_into(&mut grads[w.0], cout * k, |dw| {
                        gemm(cout, n, k, g, false, cols, true, dw, true)
                    });
                }
                if self.tracked(*b) {
                    add_into(&mut grads[b.0], cout, |db| {
                        for c in 0..cout {
                            db[c] += g[c * n..(c + 1) * n].iter().sum::<f64>();
                        }
                    });
                }
                if self.tracked(*x) {
                    let mut dcols = vec![0.0; k * n];
                    gemm(k, cout, n, self.value(*w).data(), true, g, false, &mut dcols, false);
                    let len = self.value(*x).len();
                    add_into(&mut grads[x.0], len, |dx| col2im_add(&dcols, geom, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let per = xhat.len() / c;
                let gd = self.value(*gamma).data();
                if self.tracked(*gamma) {
                    add_into(&mut grads[gamma.0], c, |dg| {
                        for ch in 0..c {
                            let r = ch * per..(ch + 1) * per;
                            dg[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                if self.tracked(*beta) {
                    add_into(&mut grads[beta.0], c, |db| {
                        for ch in 0..c {
                            db[ch] += g[ch * per..(ch + 1) * per].iter().sum::<f64>();
                        }
                    });
                }
                if self.tracked(*x) {
                    add_into(&mut grads[x.0], c * per, |dx| {
                        for ch in 0..c {
                            let r = ch * per..(ch + 1) * per;
                            let scale = gd[ch] * inv_std[ch];
                            if *batch_stats {
                                let gs = &g[r.clone()];
                                let hs = &xhat[r.clone()];
                                let sum_g: f64 = gs.iter().sum();
                                let sum_gh: f64 = gs.iter().zip(hs).map(|(a, b)| a * b).sum();
                                let inv_n = 1.0 / per as f64;
                                for ((d, gv), hv) in dx[r].iter_mut().zip(gs).zip(hs) {
                                    *d += scale * (gv - inv_n * sum_g - hv * inv_n * sum_gh);
                                }
                            } else {
                                for (d, gv) in dx[r.clone()].iter_mut().zip(&g[r]) {
                                    *d += scale * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let t = inv_std.len();
                let d = xhat.len() / t;
                let gd = self.value(*gamma).data();
                if self.tracked(*gamma) {
                    add_into(&mut grads[gamma.0], d, |dg| {
                        for r in 0..t {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if self.tracked(*beta) {
                    add_into(&mut grads[beta.0], d, |db| {
                        for r in 0..t {
                            for j in 0..d {
                                db[j] += g[r * d + j];
                            }
                        }
                    });
                }
                if self.tracked(*x) {
                    add_into(&mut grads[x.0], t * d, |dx| {
                        let inv_d = 1.0 / d as f64;
                        for r in 0..t {
                            let mut sum_gh = 0.0;
                            let mut sum_g = 0.0;
                            for j in 0..d {
                                let gh = g[r * d + j] * gd[j];
                                sum_g += gh;
                                sum_gh += gh * xhat[r * d + j];
                            }
                            for j in 0..d {
                                let gh = g[r * d + j] * gd[j];
                                dx[r * d + j] += inv_std[r] * (gh - inv_d * sum_g - xhat[r * d + j] * inv_d * sum_gh);
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => add_into(&mut grads[x.0], g.len(), |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    if *yv > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Sigmoid(x) => add_into(&mut grads[x.0], g.len(), |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }),
            Op::Tanh(x) => add_into(&mut grads[x.0], g.len(), |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }),
            Op::Dropout { x, mask } => add_into(&mut grads[x.0], g.len(), |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.tracked(*a) {
                    let bd = self.value(*b).data();
                    add_into(&mut grads[a.0], m * k, |da| gemm(m, n, k, g, false, bd, true, da, true));
                }
                if self.tracked(*b) {
                    let ad = self.value(*a).data();
                    add_into(&mut grads[b.0], k * n, |db| gemm(k, m, n, ad, true, g, false, db, true));
                }
            }
            Op::AddRowBias { x, b } => {
                let d = self.value(*b).len();
                if self.tracked(*x) {
                    add_into(&mut grads[x.0], g.len(), |dx| {
                        dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
                    });
                }
                if self.tracked(*b) {
                    add_into(&mut grads[b.0], d, |db| {
                        for row in g.chunks_exact(d) {
                            db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.tracked(*v) {
                        add_into(&mut grads[v.0], g.len(), |dv| {
                            dv.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.tracked(*v) {
                        let od = self.value(*other).data();
                        add_into(&mut grads[v.0], g.len(), |dv| {
                            for ((d, gv), o) in dv.iter_mut().zip(g).zip(od) {
                                *d += gv * o;
                            }
                        });
                    }
                }
            }
            Op::Scale(x, s) => add_into(&mut grads[x.0], g.len(), |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s)
            }),
            Op::LogSoftmax(x) => {
                let k = node.value.shape()[1];
                add_into(&mut grads[x.0], g.len(), |dx| {
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                        let sg: f64 = grow.iter().sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * sg;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                add_into(&mut grads[x.0], g.len(), |dx| {
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                add_into(&mut grads[x.0], g.len(), |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.value(*x).shape()[1];
                add_into(&mut grads[x.0], r * c, |dx| {
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.tracked(*p) {
                        add_into(&mut grads[p.0], r * w, |dp| {
                            for i in 0..r {
                                for j in 0..w {
                                    dp[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Row { x, index } => {
                let c = node.value.shape()[1];
                let len = self.value(*x).len();
                add_into(&mut grads[x.0], len, |dx| {
                    dx[index * c..(index + 1) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += gv)
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.tracked(*p) {
                        add_into(&mut grads[p.0], len, |dp| {
                            dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, gv)| *d += gv)
                        });
                    }
                    offset += len;
                }
            }
            Op::FlattenTranspose(x) => {
                let (n, c) = (node.value.shape()[0], node.value.shape()[1]);
                add_into(&mut grads[x.0], n * c, |dx| {
                    for ch in 0..c {
                        for p in 0..n {
                            dx[ch * n + p] += g[p * c + ch];
                        }
                    }
                });
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g.len(), |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
            }),
            Op::Sum(x) => {
                let len = self.value(*x).len();
                add_into(&mut grads[x.0], len, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Loss { x, grad } => add_into(&mut grads[x.0], grad.len(), |dx| {
                dx.iter_mut().zip(grad).for_each(|(d, gv)| *d += g[0] * gv)
            }),
        }
    }
}
