//! Minimal reverse-mode tape over the closed operator set the model uses.
//!
//! Tensors carry a leading batch dimension where it matters. Every node keeps
//! its forward value; `Graph::backward` walks the tape in reverse and returns
//! gradients for every node that requires them.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    RmsNormRows {
        x: Var,
        inv_rms: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    RowDot {
        x: Var,
        q: Var,
    },
    SoftmaxRows(Var),
    AttnPool {
        a: Var,
        h: Var,
    },
    Sigmoid(Var),
    Mul(Var, Var),
    GatedSqDist {
        h: Var,
        w: Var,
        p: Var,
    },
    Exp(Var),
    DivScalar {
        x: Var,
        s: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    GroupLse {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// `c = a·b + beta·c` for strided row/column-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: all index ranges were bounds-checked above and the slices do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> ConvGeom {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d input must be (N, C, H, W)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (O, C, K, K)");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (h, wd, k) = (xs[2], xs[3], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than padded input");
        ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w: wd,
            o: ws[0],
            k,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
            stride,
            pad,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let g = self.conv_geom(x, w, stride, pad);
        assert_eq!(self.shape(b), &[g.o], "conv2d bias shape");
        let (ckk, hw) = (g.ckk(), g.hw_out());
        let mut cols = vec![0.0; g.n * ckk * hw];
        let mut out = vec![0.0; g.n * g.o * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let in_len = g.c * g.h * g.w;
        for n in 0..g.n {
            let col = &mut cols[n * ckk * hw..(n + 1) * ckk * hw];
            im2col(&xv[n * in_len..(n + 1) * in_len], &g, col);
            let y = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
            for (o, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[o]);
            }
            gemm(g.o, ckk, hw, wv, (ckk, 1), col, (hw, 1), y, (hw, 1), 1.0);
        }
        let value = Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect());
        self.push(out, Op::Relu(x), &[x])
    }

    /// (N, C, H, W) → (N, C)
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::from_parts(vec![s[0], s[1]], out), Op::GlobalAvgPool(x), &[x])
    }

    /// Divides each leading-axis row by its root mean square.
    pub fn rms_norm_rows(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-12;
        let v = self.value(x);
        let rows = v.shape()[0];
        let width = v.len() / rows;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for r in 0..rows {
            let row = &v.data()[r * width..(r + 1) * width];
            let ms = row.iter().map(|a| a * a).sum::<f64>() / width as f64;
            let inv = 1.0 / (ms + EPS).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().map(|a| a * inv));
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::RmsNormRows { x, inv_rms }, &[x])
    }

    /// `x (N, I) · wᵀ (I, O) + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 2, "linear input must be (N, I)");
        assert_eq!(ws.len(), 2, "linear weight must be (O, I)");
        assert_eq!(xs[1], ws[1], "linear inner dimension mismatch");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = match b {
            Some(b) => {
                assert_eq!(self.shape(b), &[o], "linear bias shape");
                let bv = self.value(b).data();
                (0..n).flat_map(|_| bv.iter().cloned()).collect()
            }
            None => vec![0.0; n * o],
        };
        gemm(n, i, o, self.value(x).data(), (i, 1), self.value(w).data(), (1, i), &mut out, (o, 1), 1.0);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w, b }, &inputs)
    }

    /// Row-wise dot product `x (N, A) · q (A)` → (N)
    pub fn row_dot(&mut self, x: Var, q: Var) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 2);
        assert_eq!(self.shape(q), &[xs[1]], "row_dot length mismatch");
        let qv = self.value(q).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(xs[1])
            .map(|r| r.iter().zip(qv).map(|(a, b)| a * b).sum())
            .collect();
        let n = out.len();
        self.push(Tensor::from_parts(vec![n], out), Op::RowDot { x, q }, &[x, q])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(s[1]).for_each(softmax_in_place);
        self.push(Tensor::from_parts(s, out), Op::SoftmaxRows(x), &[x])
    }

    /// `a (B, T)`, `h (B·T, D)` → `Σ_t a[b,t]·h[b·T+t]` of shape (B, D)
    pub fn attn_pool(&mut self, a: Var, h: Var) -> Var {
        let (bsz, t) = {
            let s = self.shape(a);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let hs = self.shape(h);
        assert_eq!(hs.len(), 2);
        assert_eq!(hs[0], bsz * t, "attn_pool row count mismatch");
        let d = hs[1];
        let av = self.value(a).data();
        let hv = self.value(h).data();
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let dst = &mut out[b * d..(b + 1) * d];
            for ti in 0..t {
                let w = av[b * t + ti];
                let src = &hv[(b * t + ti) * d..(b * t + ti + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
            }
        }
        self.push(Tensor::from_parts(vec![bsz, d], out), Op::AttnPool { a, h }, &[a, h])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&z| logistic(z)).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `d[b,k] = Σ_i w[b,i]·(h[b,i] − p[k,i])²` for `h, w (B, D)` and `p (…, D)`.
    pub fn gated_sq_dist(&mut self, h: Var, w: Var, p: Var) -> Var {
        let hs = self.shape(h).to_vec();
        assert_eq!(hs.len(), 2);
        assert_eq!(self.shape(w), &hs[..], "gate shape mismatch");
        let d = hs[1];
        let pv = self.value(p);
        assert_eq!(pv.len() % d, 0, "prototype width mismatch");
        let k = pv.len() / d;
        let (hv, wv, pv) = (self.value(h).data(), self.value(w).data(), pv.data());
        let mut out = vec![0.0; hs[0] * k];
        for b in 0..hs[0] {
            let (hr, wr) = (&hv[b * d..(b + 1) * d], &wv[b * d..(b + 1) * d]);
            for j in 0..k {
                let pr = &pv[j * d..(j + 1) * d];
                out[b * k + j] = (0..d).map(|i| wr[i] * (hr[i] - pr[i]).powi(2)).sum();
            }
        }
        self.push(Tensor::from_parts(vec![hs[0], k], out), Op::GatedSqDist { h, w, p }, &[h, w, p])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a.exp()).collect());
        self.push(value, Op::Exp(x), &[x])
    }

    fn scalar_of(&self, s: Var) -> f64 {
        let v = self.value(s);
        assert_eq!(v.len(), 1, "expected a scalar node");
        v.data()[0]
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_of(s);
        let v = self.value(x);
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a / sv).collect());
        self.push(value, Op::DivScalar { x, s }, &[x, s])
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_of(s);
        let v = self.value(x);
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * sv).collect());
        self.push(value, Op::MulScalar { x, s }, &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// LogSumExp over consecutive groups of `group` entries of each row: (B, G·m) → (B, G).
    pub fn group_lse(&mut self, x: Var, group: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert!(group > 0 && s[1].is_multiple_of(group), "group size must divide row width");
        let out: Vec<f64> = self.value(x).data().chunks(group).map(lse).collect();
        self.push(Tensor::from_parts(vec![s[0], s[1] / group], out), Op::GroupLse { x, group }, &[x])
    }

    /// Mean cross-entropy of row-wise logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], labels.len(), "one label per row");
        let c = s[1];
        let v = self.value(logits).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| {
                assert!(y < c, "label {y} out of range");
                let row = &v[b * c..(b + 1) * c];
                lse(row) - row[y]
            })
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let geo = self.conv_geom(*x, *w, *stride, *pad);
                let (ckk, hw) = (geo.ckk(), geo.hw_out());
                let wv = self.value(*w).data();
                if self.needs(*w) || self.needs(*b) {
                    let mut gw = vec![0.0; geo.o * ckk];
                    let mut gb = vec![0.0; geo.o];
                    for n in 0..geo.n {
                        let gyn = &g[n * geo.o * hw..(n + 1) * geo.o * hw];
                        let col = &cols[n * ckk * hw..(n + 1) * ckk * hw];
                        gemm(geo.o, hw, ckk, gyn, (hw, 1), col, (1, hw), &mut gw, (ckk, 1), 1.0);
                        for (o, chunk) in gyn.chunks(hw).enumerate() {
                            gb[o] += chunk.iter().sum::<f64>();
                        }
                    }
                    acc(*w, Tensor::from_parts(self.shape(*w).to_vec(), gw));
                    acc(*b, Tensor::from_parts(vec![geo.o], gb));
                }
                if self.needs(*x) {
                    let in_len = geo.c * geo.h * geo.w;
                    let mut gx = vec![0.0; geo.n * in_len];
                    let mut dcol = vec![0.0; ckk * hw];
                    for n in 0..geo.n {
                        let gyn = &g[n * geo.o * hw..(n + 1) * geo.o * hw];
                        gemm(ckk, geo.o, hw, wv, (1, ckk), gyn, (hw, 1), &mut dcol, (hw, 1), 0.0);
                        col2im(&dcol, &geo, &mut gx[n * in_len..(n + 1) * in_len]);
                    }
                    acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                }
            }
            Op::Relu(x) => {
                let gx = g.iter().zip(y.data()).map(|(gi, yi)| if *yi > 0.0 { *gi } else { 0.0 }).collect();
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let gx = g.iter().flat_map(|gi| std::iter::repeat_n(gi / hw as f64, hw)).collect();
                acc(*x, Tensor::from_parts(s.to_vec(), gx));
            }
            Op::RmsNormRows { x, inv_rms } => {
                let width = y.len() / inv_rms.len();
                let mut gx = Vec::with_capacity(y.len());
                for (r, inv) in inv_rms.iter().enumerate() {
                    let gr = &g[r * width..(r + 1) * width];
                    let yr = &y.data()[r * width..(r + 1) * width];
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * mean_gy) * inv));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::Linear { x, w, b } => {
                let (n, o) = (y.shape()[0], y.shape()[1]);
                let i = self.shape(*x)[1];
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * i];
                    gemm(n, o, i, g, (o, 1), self.value(*w).data(), (i, 1), &mut gx, (i, 1), 0.0);
                    acc(*x, Tensor::from_parts(vec![n, i], gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; o * i];
                    gemm(o, n, i, g, (1, o), self.value(*x).data(), (i, 1), &mut gw, (i, 1), 0.0);
                    acc(*w, Tensor::from_parts(vec![o, i], gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(*b, Tensor::from_parts(vec![o], gb));
                }
            }
            Op::RowDot { x, q } => {
                let xv = self.value(*x);
                let a = xv.shape()[1];
                let qv = self.value(*q).data();
                if self.needs(*x) {
                    let gx = g.iter().flat_map(|gi| qv.iter().map(move |qj| gi * qj)).collect();
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.needs(*q) {
                    let mut gq = vec![0.0; a];
                    for (gi, row) in g.iter().zip(xv.data().chunks(a)) {
                        gq.iter_mut().zip(row).for_each(|(o, r)| *o += gi * r);
                    }
                    acc(*q, Tensor::from_parts(vec![a], gq));
                }
            }
            Op::SoftmaxRows(x) => {
                let t = y.shape()[1];
                let mut gx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(t).zip(y.data().chunks(t)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::AttnPool { a, h } => {
                let (bsz, t) = (self.shape(*a)[0], self.shape(*a)[1]);
                let d = y.shape()[1];
                let av = self.value(*a).data();
                let hv = self.value(*h).data();
                if self.needs(*a) {
                    let mut ga = vec![0.0; bsz * t];
                    for b in 0..bsz {
                        let gb = &g[b * d..(b + 1) * d];
                        for ti in 0..t {
                            let hr = &hv[(b * t + ti) * d..(b * t + ti + 1) * d];
                            ga[b * t + ti] = gb.iter().zip(hr).map(|(x, z)| x * z).sum();
                        }
                    }
                    acc(*a, Tensor::from_parts(vec![bsz, t], ga));
                }
                if self.needs(*h) {
                    let mut gh = vec![0.0; bsz * t * d];
                    for b in 0..bsz {
                        let gb = &g[b * d..(b + 1) * d];
                        for ti in 0..t {
                            let w = av[b * t + ti];
                            gh[(b * t + ti) * d..(b * t + ti + 1) * d]
                                .iter_mut()
                                .zip(gb)
                                .for_each(|(o, x)| *o = w * x);
                        }
                    }
                    acc(*h, Tensor::from_parts(vec![bsz * t, d], gh));
                }
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y.data()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), g.iter().zip(bv).map(|(x, z)| x * z).collect()));
                }
                if self.needs(*b) {
                    acc(*b, Tensor::from_parts(y.shape().to_vec(), g.iter().zip(av).map(|(x, z)| x * z).collect()));
                }
            }
            Op::GatedSqDist { h, w, p } => {
                let (bsz, k) = (y.shape()[0], y.shape()[1]);
                let d = self.shape(*h)[1];
                let (hv, wv, pv) = (self.value(*h).data(), self.value(*w).data(), self.value(*p).data());
                let mut gh = vec![0.0; bsz * d];
                let mut gw = vec![0.0; bsz * d];
                let mut gp = vec![0.0; k * d];
                for b in 0..bsz {
                    for j in 0..k {
                        let gbj = g[b * k + j];
                        if gbj == 0.0 {
                            continue;
                        }
                        for i in 0..d {
                            let diff = hv[b * d + i] - pv[j * d + i];
                            let t = 2.0 * gbj * wv[b * d + i] * diff;
                            gh[b * d + i] += t;
                            gp[j * d + i] -= t;
                            gw[b * d + i] += gbj * diff * diff;
                        }
                    }
                }
                if self.needs(*h) {
                    acc(*h, Tensor::from_parts(vec![bsz, d], gh));
                }
                if self.needs(*w) {
                    acc(*w, Tensor::from_parts(vec![bsz, d], gw));
                }
                if self.needs(*p) {
                    acc(*p, Tensor::from_parts(self.shape(*p).to_vec(), gp));
                }
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(y.data()).map(|(a, b)| a * b).collect();
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::DivScalar { x, s } => {
                let sv = self.scalar_of(*s);
                if self.needs(*x) {
                    acc(*x, Tensor::from_parts(y.shape().to_vec(), g.iter().map(|a| a / sv).collect()));
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let gs: f64 = g.iter().zip(xv).map(|(a, b)| -a * b / (sv * sv)).sum();
                    acc(*s, Tensor::from_parts(self.shape(*s).to_vec(), vec![gs]));
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.scalar_of(*s);
                if self.needs(*x) {
                    acc(*x, Tensor::from_parts(y.shape().to_vec(), g.iter().map(|a| a * sv).collect()));
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let gs: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::from_parts(self.shape(*s).to_vec(), vec![gs]));
                }
            }
            Op::Scale { x, c } => {
                acc(*x, Tensor::from_parts(y.shape().to_vec(), g.iter().map(|a| a * c).collect()));
            }
            Op::GroupLse { x, group } => {
                let xv = self.value(*x);
                let mut gx = Vec::with_capacity(xv.len());
                for (chunk, (gi, yi)) in xv.data().chunks(*group).zip(g.iter().zip(y.data())) {
                    gx.extend(chunk.iter().map(|v| gi * (v - yi).exp()));
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let c = lv.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut gx = lv.data().to_vec();
                for (b, row) in gx.chunks_mut(c).enumerate() {
                    softmax_in_place(row);
                    row[labels[b]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, Tensor::from_parts(lv.shape().to_vec(), gx));
            }
            Op::Reshape(x) => {
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), g.to_vec()));
            }
        }
    }
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` w.r.t. every coordinate of every leaf in `leaves`.
    fn check<F>(leaves: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|t| g.param(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).data()[0]
        };
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[li], leaf);
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                // absolute floor covers exactly-zero partials (e.g. bias under softmax shift)
                let ok = (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()) + 1e-8;
                assert!(ok, "leaf {li} coord {k}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
        // random linear functional so every output coordinate matters
        let n = g.value(v).len();
        let w = rand_tensor(&[1, n], seed);
        let flat = g.reshape(v, vec![1, n]);
        let wv = g.input(w);
        let out = g.linear(flat, wv, None);
        g.reshape(out, vec![1])
    }

    #[test]
    fn conv_relu_pool_gradients() {
        let x = rand_tensor(&[2, 3, 7, 6], 1);
        let w = rand_tensor(&[4, 3, 3, 3], 2);
        let b = rand_tensor(&[4], 3);
        check(vec![x, w, b], |g, v| {
            let c = g.conv2d(v[0], v[1], v[2], 2, 1);
            let r = g.relu(c);
            let p = g.global_avg_pool(r);
            weighted_sum(g, p, 9)
        });
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = rand_tensor(&[1, 2, 5, 5], 4);
        let w = rand_tensor(&[3, 2, 3, 3], 5);
        let b = rand_tensor(&[3], 6);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1);
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rms_linear_rowdot_softmax_pool_gradients() {
        let x = rand_tensor(&[6, 5], 11);
        let w = rand_tensor(&[4, 5], 12);
        let b = rand_tensor(&[4], 13);
        let q = rand_tensor(&[4], 14);
        check(vec![x, w, b, q], |g, v| {
            let n = g.rms_norm_rows(v[0]);
            let u = g.linear(n, v[1], Some(v[2]));
            let logits = g.row_dot(u, v[3]);
            let logits = g.reshape(logits, vec![2, 3]);
            let a = g.softmax_rows(logits);
            let pooled = g.attn_pool(a, n);
            weighted_sum(g, pooled, 15)
        });
    }

    #[test]
    fn head_op_gradients() {
        let h = rand_tensor(&[3, 4], 21);
        let gate_w = rand_tensor(&[4, 4], 22);
        let protos = rand_tensor(&[2, 3, 4], 23);
        let log_tau = Tensor::scalar(-0.3);
        check(vec![h, gate_w, protos, log_tau], |g, v| {
            let z = g.linear(v[0], v[1], None);
            let w = g.sigmoid(z);
            let gated = g.mul(v[0], w);
            let d = g.gated_sq_dist(gated, w, v[2]);
            let tau = g.exp(v[3]);
            let nd = g.scale(d, -1.0);
            let q = g.div_scalar(nd, tau);
            let l = g.group_lse(q, 3);
            let logits = g.mul_scalar(l, tau);
            g.cross_entropy(logits, &[0, 1, 1])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let x2 = g.reshape(x, vec![1, 2]);
        let p = g.param(Tensor::vector(vec![0.5, -1.0]));
        let d = g.row_dot(x2, p);
        let grads = g.backward(d);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
