//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Values are
//! immutable once recorded; [`Graph::backward`] replays the recorded
//! primitives in reverse and returns the gradient of a scalar output with
//! respect to every node.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv3x3 { x: Var, kernel: Var, bias: Var },
    Add(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    SpatialMean(Var),
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    PermuteLast2(Var),
    PairwiseProduct(Var, Var),
    PairWeightedSum(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, zeros if `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exact (error-function) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

const LN_EPS: f64 = 1e-6;

/// `out[m×n] += a[m×k] · b[k×n]`.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn named_leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].label = Some(name.into());
        v
    }

    /// Attaches a diagnostic name to a node.
    pub fn set_label(&mut self, v: Var, name: impl Into<String>) {
        self.nodes[v.0].label = Some(name.into());
    }

    /// Name of the first node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.label {
                Some(l) => l.clone(),
                None => format!("#{i} ({})", op_name(&n.op)),
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("rank-2 expected, got {}", shape_str(s))));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a)))
    }

    /// Stride-1, zero-padded 3×3 cross-correlation over an `H×W×Cin` map.
    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 3
            || sk.len() != 4
            || sk[0] != 3
            || sk[1] != 3
            || sk[2] != sx[2]
            || sb != [sk[3]]
        {
            return Err(Error::dim(
                "conv2d_3x3",
                format!(
                    "input {} kernel {} bias {}",
                    shape_str(sx),
                    shape_str(sk),
                    shape_str(sb)
                ),
            ));
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sk[3]);
        let out = conv3x3_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            h,
            w,
            cin,
            cout,
        );
        Ok(self.push(Tensor::new([h, w, cout], out)?, Op::Conv3x3 { x, kernel, bias }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`C` vector to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = *sx.last().expect("rank >= 1");
        if sb != [c] {
            return Err(Error::dim(
                "add_bias",
                format!("{} + {}", shape_str(sx), shape_str(sb)),
            ));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Averages over every axis but the trailing channel axis; input rank must be >= 3.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 3 {
            return Err(Error::dim(
                "spatial_mean",
                format!("rank >= 3 required, got {}", shape_str(s)),
            ));
        }
        let c = *s.last().unwrap();
        let count = self.value(a).numel() / c;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        Ok(self.push(Tensor::new([c], out)?, Op::SpatialMean(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        let c = *sx.last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {} gamma {} beta {}",
                    shape_str(sx),
                    shape_str(self.shape(gamma)),
                    shape_str(self.shape(beta))
                ),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = self.value(x).numel() / c;
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (i, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_leading(start, len)?;
        Ok(self.push(t, Op::SliceRows { x: a, start }))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let inner = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != inner[..] {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{} vs trailing {:?}", shape_str(s), inner),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(inner);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, shape_str(s)),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new([m, len], out)?;
        Ok(self.push(t, Op::SliceCols { x: a, start }))
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let m = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::dim(
                    "concat_cols",
                    format!("{} vs {m} rows", shape_str(s)),
                ));
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// `[A×B×C] -> [A×C×B]`.
    pub fn permute_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::dim("permute_last2", format!("rank-3 expected, got {}", shape_str(s))));
        }
        let (d0, d1, d2) = (s[0], s[1], s[2]);
        let out = permute_last2(self.value(a).data(), d0, d1, d2);
        let t = Tensor::new([d0, d2, d1], out)?;
        Ok(self.push(t, Op::PermuteLast2(a)))
    }

    /// `out[i, j, c] = q[i, c] * k[j, c]` for `q: [N×d]`, `k: [M×d]`.
    pub fn pairwise_product(&mut self, q: Var, k: Var) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::dim(
                "pairwise_product",
                format!("{} vs {}", shape_str(sq), shape_str(sk)),
            ));
        }
        let (n, m, d) = (sq[0], sk[0], sq[1]);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for j in 0..m {
                out.extend((0..d).map(|c| qd[i * d + c] * kd[j * d + c]));
            }
        }
        let t = Tensor::new([n, m, d], out)?;
        Ok(self.push(t, Op::PairwiseProduct(q, k)))
    }

    /// `out[i, c] = Σ_j a[i, j, c] * v[j, c]` for `a: [N×M×d]`, `v: [M×d]`.
    pub fn pair_weighted_sum(&mut self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sa.len() != 3 || sv.len() != 2 || sa[1] != sv[0] || sa[2] != sv[1] {
            return Err(Error::dim(
                "pair_weighted_sum",
                format!("{} vs {}", shape_str(sa), shape_str(sv)),
            ));
        }
        let (n, m, d) = (sa[0], sa[1], sa[2]);
        let (ad, vd) = (self.value(a).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..m {
                let base = (i * m + j) * d;
                for c in 0..d {
                    out[i * d + c] += ad[base + c] * vd[j * d + c];
                }
            }
        }
        let t = Tensor::new([n, d], out)?;
        Ok(self.push(t, Op::PairWeightedSum(a, v)))
    }

    /// Mean softmax cross-entropy of `logits: [B×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {} for {} labels", shape_str(s), labels.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim("cross_entropy", format!("label {bad} >= {k} classes")));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Gradient of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut ga = vec![0.0; m * k];
                gemm_nt(g, self.value(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn(self.value(*a).data(), g, &mut gb, m, k, n);
                accumulate_owned(&mut grads[a.0], ga);
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Conv3x3 { x, kernel, bias } => {
                let sx = self.shape(*x);
                let (h, w, cin) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(*kernel)[3];
                let (gx, gk, gb) = conv3x3_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    h,
                    w,
                    cin,
                    cout,
                );
                accumulate_owned(&mut grads[x.0], gx);
                accumulate_owned(&mut grads[kernel.0], gk);
                accumulate_owned(&mut grads[bias.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g);
                accumulate(&mut grads[b.0], g);
            }
            Op::AddBias(x, b) => {
                accumulate(&mut grads[x.0], g);
                let c = self.shape(*b)[0];
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::Hadamard(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = g.iter().zip(bd).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(ad).map(|(g, a)| g * a).collect();
                accumulate_owned(&mut grads[a.0], ga);
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::Scale(a, s) => {
                accumulate_owned(&mut grads[a.0], g.iter().map(|v| v * s).collect());
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Softmax(a) => {
                let c = *node.value.shape().last().unwrap();
                let mut ga = Vec::with_capacity(out.len());
                for (grow, yrow) in g.chunks(c).zip(out.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    ga.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot)));
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::SpatialMean(a) => {
                let n = self.value(*a).numel();
                let c = g.len();
                let inv = (c as f64) / (n as f64);
                let ga = (0..n).map(|i| g[i % c] * inv).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate_owned(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ((grow, hrow), r) in g.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for i in 0..c {
                        let d = grow[i] * gam[i];
                        mean_d += d;
                        mean_dh += d * hrow[i];
                        gg[i] += grow[i] * hrow[i];
                        gbeta[i] += grow[i];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for i in 0..c {
                        let d = grow[i] * gam[i];
                        gx.push(r * (d - mean_d - hrow[i] * mean_dh));
                    }
                }
                accumulate_owned(&mut grads[x.0], gx);
                accumulate_owned(&mut grads[gamma.0], gg);
                accumulate_owned(&mut grads[beta.0], gbeta);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let inner: usize = t.shape()[1..].iter().product();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; t.numel()]);
                for (o, v) in slot[start * inner..start * inner + g.len()].iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    accumulate(&mut grads[p.0], &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                let len = node.value.shape()[1];
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for i in 0..m {
                    for j in 0..len {
                        slot[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * n + off..i * n + off + w]);
                    }
                    accumulate_owned(&mut grads[p.0], gp);
                    off += w;
                }
            }
            Op::PermuteLast2(a) => {
                let s = self.shape(*a);
                // output is [d0×d2×d1]; permuting it back restores [d0×d1×d2]
                let ga = permute_last2(g, s[0], s[2], s[1]);
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::PairwiseProduct(q, k) => {
                let (n, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let m = self.shape(*k)[0];
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let base = (i * m + j) * d;
                        for c in 0..d {
                            gq[i * d + c] += g[base + c] * kd[j * d + c];
                            gk[j * d + c] += g[base + c] * qd[i * d + c];
                        }
                    }
                }
                accumulate_owned(&mut grads[q.0], gq);
                accumulate_owned(&mut grads[k.0], gk);
            }
            Op::PairWeightedSum(a, v) => {
                let sa = self.shape(*a);
                let (n, m, d) = (sa[0], sa[1], sa[2]);
                let (ad, vd) = (self.value(*a).data(), self.value(*v).data());
                let mut ga = vec![0.0; n * m * d];
                let mut gv = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let base = (i * m + j) * d;
                        for c in 0..d {
                            ga[base + c] = g[i * d + c] * vd[j * d + c];
                            gv[j * d + c] += g[i * d + c] * ad[base + c];
                        }
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
                accumulate_owned(&mut grads[v.0], gv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (row, &label) in gl.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate_owned(&mut grads[logits.0], gl);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Conv3x3 { .. } => "conv2d_3x3",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Hadamard(..) => "hadamard",
        Op::Scale(..) => "scale",
        Op::Sigmoid(_) => "sigmoid",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::SpatialMean(_) => "spatial_mean",
        Op::Sum(_) => "sum",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Reshape(_) => "reshape",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::PermuteLast2(_) => "permute_last2",
        Op::PairwiseProduct(..) => "pairwise_product",
        Op::PairWeightedSum(..) => "pair_weighted_sum",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

fn permute_last2(src: &[f64], d0: usize, d1: usize, d2: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                out[(a * d2 + c) * d1 + b] = src[(a * d1 + b) * d2 + c];
            }
        }
    }
    out
}

fn conv3x3_forward(
    x: &[f64],
    k: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * cout);
    for _ in 0..h * w {
        out.extend_from_slice(b);
    }
    for y in 0..h {
        for xx in 0..w {
            let orow = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for dy in 0..3 {
                let sy = y + dy;
                if sy == 0 || sy > h {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx + dx;
                    if sx == 0 || sx > w {
                        continue;
                    }
                    let ipix = &x[((sy - 1) * w + sx - 1) * cin..((sy - 1) * w + sx) * cin];
                    let kbase = (dy * 3 + dx) * cin * cout;
                    for (ci, &iv) in ipix.iter().enumerate() {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += iv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w * cin];
    let mut gk = vec![0.0; 9 * cin * cout];
    let mut gb = vec![0.0; cout];
    for y in 0..h {
        for xx in 0..w {
            let grow = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for (o, v) in gb.iter_mut().zip(grow) {
                *o += v;
            }
            for dy in 0..3 {
                let sy = y + dy;
                if sy == 0 || sy > h {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx + dx;
                    if sx == 0 || sx > w {
                        continue;
                    }
                    let ibase = ((sy - 1) * w + sx - 1) * cin;
                    let kbase = (dy * 3 + dx) * cin * cout;
                    for ci in 0..cin {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let iv = x[ibase + ci];
                        let gkrow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += grow[co] * krow[co];
                            gkrow[co] += iv * grow[co];
                        }
                        gx[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}
