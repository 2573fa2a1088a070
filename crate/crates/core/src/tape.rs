//! Minimal reverse-mode automatic differentiation over dense f32 matrices.
//!
//! The encoder-decoder records one tape per example; backward visits nodes
//! in reverse insertion order exactly once and accumulates gradients for
//! every named leaf. The DP losses live outside the tape: their gradients
//! with respect to the lattice logits are injected as backward seeds at the
//! two head nodes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major f32 matrix. Vectors are 1 x C or R x 1 as convenient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Tensor {
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gauss() as f32 * std).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

pub type NodeId = usize;

enum Op {
    Leaf { name: Option<String> },
    Matmul { a: NodeId, b: NodeId, transpose_b: bool },
    Add { a: NodeId, b: NodeId },
    AddRowBroadcast { a: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    RowGather { a: NodeId, indices: Vec<usize> },
    RowFill { base: NodeId, repl: NodeId, rows: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f32 = 1e-5;

fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape_str(),
                rhs: y.shape_str(),
            });
        }
        Ok(())
    }

    /// Anonymous constant leaf; receives no gradient by name.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf { name: None }, t)
    }

    /// Named trainable leaf; `backward` reports its gradient under `name`.
    pub fn leaf(&mut self, name: &str, t: Tensor) -> NodeId {
        self.push(Op::Leaf { name: Some(name.to_string()) }, t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        let inner_ok = if transpose_b { x.cols == y.cols } else { x.cols == y.rows };
        if !inner_ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: x.shape_str(),
                rhs: format!("{}{}", y.shape_str(), if transpose_b { "^T" } else { "" }),
            });
        }
        let out = if transpose_b {
            raw_matmul_nt(x, y)
        } else {
            raw_matmul(x, y)
        };
        Ok(self.push(Op::Matmul { a, b, transpose_b }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = Tensor {
            rows: self.nodes[a].value.rows,
            cols: self.nodes[a].value.cols,
            data: self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(x, y)| x + y)
                .collect(),
        };
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// Adds a 1 x C row vector to every row of a.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (&self.nodes[a].value, &self.nodes[row].value);
        if r.rows != 1 || r.cols != x.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: x.shape_str(),
                rhs: r.shape_str(),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += r.data[j];
            }
        }
        Ok(self.push(Op::AddRowBroadcast { a, row }, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = Tensor {
            rows: self.nodes[a].value.rows,
            cols: self.nodes[a].value.cols,
            data: self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(x, y)| x * y)
                .collect(),
        };
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        self.push(Op::Scale { a, c }, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|x| *x = gelu_scalar(*x));
        self.push(Op::Gelu { a }, out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut out = x.clone();
        for i in 0..x.rows {
            let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows { a }, out)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut out = x.clone();
        for i in 0..x.rows {
            let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows { a }, out)
    }

    /// out[r] = a[indices[r]]; used for embedding lookup and upsampling.
    pub fn row_gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if indices.iter().any(|&i| i >= x.rows) {
            return Err(Error::ShapeMismatch {
                op: "row_gather",
                lhs: x.shape_str(),
                rhs: format!("index >= {}", x.rows),
            });
        }
        let mut out = Tensor::zeros(indices.len(), x.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row(i));
        }
        Ok(self.push(Op::RowGather { a, indices: indices.to_vec() }, out))
    }

    /// Masked row fill: out = base with out[rows[i]] = repl[i].
    pub fn row_fill(&mut self, base: NodeId, repl: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (b, r) = (&self.nodes[base].value, &self.nodes[repl].value);
        if r.rows != rows.len() || r.cols != b.cols || rows.iter().any(|&i| i >= b.rows) {
            return Err(Error::ShapeMismatch {
                op: "row_fill",
                lhs: b.shape_str(),
                rhs: format!("{} rows into {}", rows.len(), b.rows),
            });
        }
        let mut out = b.clone();
        for (i, &row) in rows.iter().enumerate() {
            out.data[row * b.cols..(row + 1) * b.cols].copy_from_slice(r.row(i));
        }
        Ok(self.push(Op::RowFill { base, repl, rows: rows.to_vec() }, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let mut cols = 0;
        for &p in parts {
            if self.nodes[p].value.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: format!("{rows} rows"),
                    rhs: self.nodes[p].value.shape_str(),
                });
            }
            cols += self.nodes[p].value.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols]
                    .copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, out))
    }

    /// Per-row layer norm with affine gain/bias (1 x C each).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, g, b) = (
            &self.nodes[a].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
        );
        if g.rows != 1 || g.cols != x.cols || b.rows != 1 || b.cols != x.cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape_str(),
                rhs: format!("{} / {}", g.shape_str(), b.shape_str()),
            });
        }
        let mut out = Tensor::zeros(x.rows, x.cols);
        let d = x.cols as f32;
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f32>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..x.cols {
                out.data[r * x.cols + j] = (row[j] - mean) * rstd * g.data[j] + b.data[j];
            }
        }
        Ok(self.push(Op::LayerNorm { a, gain, bias }, out))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f32 = self.nodes[a].value.data.iter().sum();
        self.push(Op::SumAll { a }, Tensor::from_vec(1, 1, vec![s]))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let s: f32 = t.data.iter().sum::<f32>() / t.len() as f32;
        self.push(Op::MeanAll { a }, Tensor::from_vec(1, 1, vec![s]))
    }

    /// Reverse sweep from the given seed gradients; returns gradients for
    /// every named leaf. Seeds must match their node's shape.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let node = &self.nodes[*id];
            if node.value.shape() != seed.shape() {
                return Err(Error::ShapeMismatch {
                    op: "backward seed",
                    lhs: node.value.shape_str(),
                    rhs: seed.shape_str(),
                });
            }
            accumulate(&mut grads[*id], seed);
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    grads[id] = Some(dy); // keep for reporting
                }
                Op::Matmul { a, b, transpose_b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if *transpose_b {
                        // C = A B^T: dA = dC B, dB = dC^T A
                        let da = raw_matmul(&dy, bv);
                        let db = raw_matmul_tn(&dy, av);
                        accumulate(&mut grads[*a], &da);
                        accumulate(&mut grads[*b], &db);
                    } else {
                        // C = A B: dA = dC B^T, dB = A^T dC
                        let da = raw_matmul_nt(&dy, bv);
                        let db = raw_matmul_tn(av, &dy);
                        accumulate(&mut grads[*a], &da);
                        accumulate(&mut grads[*b], &db);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &dy);
                    accumulate(&mut grads[*b], &dy);
                }
                Op::AddRowBroadcast { a, row } => {
                    accumulate(&mut grads[*a], &dy);
                    let cols = dy.cols;
                    let mut dr = Tensor::zeros(1, cols);
                    for r in 0..dy.rows {
                        for j in 0..cols {
                            dr.data[j] += dy.data[r * cols + j];
                        }
                    }
                    accumulate(&mut grads[*row], &dr);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Tensor {
                        rows: dy.rows,
                        cols: dy.cols,
                        data: dy.data.iter().zip(&bv.data).map(|(d, y)| d * y).collect(),
                    };
                    let db = Tensor {
                        rows: dy.rows,
                        cols: dy.cols,
                        data: dy.data.iter().zip(&av.data).map(|(d, x)| d * x).collect(),
                    };
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Scale { a, c } => {
                    let da = Tensor {
                        rows: dy.rows,
                        cols: dy.cols,
                        data: dy.data.iter().map(|d| d * c).collect(),
                    };
                    accumulate(&mut grads[*a], &da);
                }
                Op::Gelu { a } => {
                    let av = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: dy.rows,
                        cols: dy.cols,
                        data: dy
                            .data
                            .iter()
                            .zip(&av.data)
                            .map(|(d, x)| d * gelu_grad(*x))
                            .collect(),
                    };
                    accumulate(&mut grads[*a], &da);
                }
                Op::SoftmaxRows { a } => {
                    let p = &self.nodes[id].value;
                    let mut da = Tensor::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let dot: f32 = (0..dy.cols)
                            .map(|j| p.data[r * dy.cols + j] * dy.data[r * dy.cols + j])
                            .sum();
                        for j in 0..dy.cols {
                            da.data[r * dy.cols + j] =
                                p.data[r * dy.cols + j] * (dy.data[r * dy.cols + j] - dot);
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &self.nodes[id].value;
                    let mut da = Tensor::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let total: f32 = (0..dy.cols).map(|j| dy.data[r * dy.cols + j]).sum();
                        for j in 0..dy.cols {
                            let p = y.data[r * dy.cols + j].exp();
                            da.data[r * dy.cols + j] = dy.data[r * dy.cols + j] - p * total;
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                }
                Op::RowGather { a, indices } => {
                    let cols = dy.cols;
                    let mut da = Tensor::zeros(self.nodes[*a].value.rows, cols);
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            da.data[i * cols + j] += dy.data[r * cols + j];
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                }
                Op::RowFill { base, repl, rows } => {
                    let cols = dy.cols;
                    let mut dbase = dy.clone();
                    let mut drepl = Tensor::zeros(rows.len(), cols);
                    for (i, &row) in rows.iter().enumerate() {
                        for j in 0..cols {
                            drepl.data[i * cols + j] = dy.data[row * cols + j];
                            dbase.data[row * cols + j] = 0.0;
                        }
                    }
                    accumulate(&mut grads[*base], &dbase);
                    accumulate(&mut grads[*repl], &drepl);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pcols = self.nodes[p].value.cols;
                        let mut dp = Tensor::zeros(dy.rows, pcols);
                        for r in 0..dy.rows {
                            dp.data[r * pcols..(r + 1) * pcols].copy_from_slice(
                                &dy.data[r * dy.cols + offset..r * dy.cols + offset + pcols],
                            );
                        }
                        accumulate(&mut grads[p], &dp);
                        offset += pcols;
                    }
                }
                Op::LayerNorm { a, gain, bias } => {
                    let x = &self.nodes[*a].value;
                    let g = &self.nodes[*gain].value;
                    let d = x.cols as f32;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    let mut dg = Tensor::zeros(1, x.cols);
                    let mut db = Tensor::zeros(1, x.cols);
                    for r in 0..x.rows {
                        let row = x.row(r);
                        let mean = row.iter().sum::<f32>() / d;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
                        let rstd = 1.0 / (var + LN_EPS).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..x.cols {
                            let xhat = (row[j] - mean) * rstd;
                            let dyj = dy.data[r * x.cols + j];
                            db.data[j] += dyj;
                            dg.data[j] += dyj * xhat;
                            let dxhat = dyj * g.data[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d;
                        mean_dxhat_xhat /= d;
                        for j in 0..x.cols {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = dy.data[r * x.cols + j] * g.data[j];
                            da.data[r * x.cols + j] =
                                rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*gain], &dg);
                    accumulate(&mut grads[*bias], &db);
                }
                Op::SumAll { a } => {
                    let t = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: t.rows,
                        cols: t.cols,
                        data: vec![dy.data[0]; t.len()],
                    };
                    accumulate(&mut grads[*a], &da);
                }
                Op::MeanAll { a } => {
                    let t = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: t.rows,
                        cols: t.cols,
                        data: vec![dy.data[0] / t.len() as f32; t.len()],
                    };
                    accumulate(&mut grads[*a], &da);
                }
            }
        }

        let mut named = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = grads[id].take() {
                    named.insert(name.clone(), g);
                }
            }
        }
        Ok(named)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: &Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
        None => *slot = Some(delta.clone()),
    }
}

fn raw_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn raw_matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            out.data[i * b.rows + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a^T @ b.
fn raw_matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a scalar-valued graph builder.
    fn check_grad<F>(inputs: Vec<Tensor>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let run = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals
                .iter()
                .enumerate()
                .map(|(i, t)| tape.leaf(&format!("in{i}"), t.clone()))
                .collect();
            let out = build(&mut tape, &ids);
            tape.value(out).data.iter().map(|&x| x as f64).sum()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(&format!("in{i}"), t.clone()))
            .collect();
        let out = build(&mut tape, &ids);
        let seed = Tensor {
            rows: tape.value(out).rows,
            cols: tape.value(out).cols,
            data: vec![1.0; tape.value(out).len()],
        };
        let grads = tape.backward(&[(out, seed)]).unwrap();

        let h = 2e-2f32;
        for (i, t) in inputs.iter().enumerate() {
            let g = &grads[&format!("in{i}")];
            for idx in 0..t.len() {
                let mut up = inputs.clone();
                up[i].data[idx] += h;
                let mut dn = inputs.clone();
                dn[i].data[idx] -= h;
                let fd = (run(&up) - run(&dn)) / (2.0 * h as f64);
                let an = g.data[idx] as f64;
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "input {i} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", randn(3, 4, 1));
        let s = tape.sum_all(x);
        let grads = tape
            .backward(&[(s, Tensor::from_vec(1, 1, vec![1.0]))])
            .unwrap();
        assert!(grads["x"].data.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn matmul_gradient() {
        check_grad(
            vec![randn(3, 4, 2), randn(4, 2, 3)],
            |t, ids| t.matmul(ids[0], ids[1]).unwrap(),
            1e-3,
        );
        check_grad(
            vec![randn(3, 4, 4), randn(5, 4, 5)],
            |t, ids| t.matmul_nt(ids[0], ids[1]).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn elementwise_gradients() {
        check_grad(
            vec![randn(2, 5, 6), randn(2, 5, 7)],
            |t, ids| {
                let m = t.mul(ids[0], ids[1]).unwrap();
                let a = t.add(m, ids[0]).unwrap();
                t.scale(a, 0.7)
            },
            1e-3,
        );
        check_grad(vec![randn(3, 3, 8)], |t, ids| t.gelu(ids[0]), 2e-3);
        check_grad(
            vec![randn(2, 6, 9), randn(1, 6, 10)],
            |t, ids| t.add_row_broadcast(ids[0], ids[1]).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn softmax_gradients() {
        // weight the outputs so the softmax jacobian is nontrivial
        check_grad(
            vec![randn(3, 5, 11), randn(3, 5, 12)],
            |t, ids| {
                let p = t.softmax_rows(ids[0]);
                t.mul(p, ids[1]).unwrap()
            },
            2e-3,
        );
        check_grad(
            vec![randn(3, 5, 13), randn(3, 5, 14)],
            |t, ids| {
                let p = t.log_softmax_rows(ids[0]);
                t.mul(p, ids[1]).unwrap()
            },
            2e-3,
        );
    }

    #[test]
    fn log_softmax_gradient_rows_sum_to_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", randn(4, 6, 15));
        let y = tape.log_softmax_rows(x);
        // seed with an arbitrary upstream gradient
        let seed = randn(4, 6, 16);
        let grads = tape.backward(&[(y, seed)]).unwrap();
        for r in 0..4 {
            let s: f32 = grads["x"].row(r).iter().sum();
            assert!(s.abs() < 1e-4, "row {r} sums to {s}");
        }
    }

    #[test]
    fn gather_fill_concat_gradients() {
        check_grad(
            vec![randn(4, 3, 17)],
            |t, ids| t.row_gather(ids[0], &[0, 2, 2, 3]).unwrap(),
            1e-3,
        );
        check_grad(
            vec![randn(4, 3, 18), randn(2, 3, 19)],
            |t, ids| t.row_fill(ids[0], ids[1], &[1, 3]).unwrap(),
            1e-3,
        );
        check_grad(
            vec![randn(3, 2, 20), randn(3, 4, 21)],
            |t, ids| t.concat_cols(&[ids[0], ids[1]]).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn layer_norm_gradient() {
        check_grad(
            vec![randn(3, 8, 22), randn(1, 8, 23), randn(1, 8, 24), randn(3, 8, 25)],
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                t.mul(ln, ids[3]).unwrap()
            },
            3e-3,
        );
    }

    #[test]
    fn reduce_gradients() {
        check_grad(vec![randn(3, 4, 26)], |t, ids| t.mean_all(ids[0]), 1e-3);
        check_grad(
            vec![randn(2, 3, 27)],
            |t, ids| {
                let g = t.gelu(ids[0]);
                t.sum_all(g)
            },
            2e-3,
        );
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(randn(2, 3, 28));
        let b = tape.constant(randn(2, 3, 29));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x: gradient must be 2
        let mut tape = Tape::new();
        let x = tape.leaf("x", Tensor::from_vec(1, 2, vec![1.5, -0.5]));
        let y = tape.add(x, x).unwrap();
        let grads = tape
            .backward(&[(y, Tensor::from_vec(1, 2, vec![1.0, 1.0]))])
            .unwrap();
        assert_eq!(grads["x"].data, vec![2.0, 2.0]);
    }
}
