//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse insertion order, so the
//! same tape always yields the same gradient bits.
//!
//! Leaves bound with `requires_grad = false` (frozen parameters, inputs)
//! are treated as constants: backward never visits the subgraph that only
//! depends on them. Parameters that do not take part in the loss receive
//! no entry in the returned [`Gradients`].
//!
//! ```
//! use priming::tape::Tape;
//! use priming::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param("w", &Tensor::vector(vec![3.0, 4.0]), true);
//! let sq = tape.mul(w, w).unwrap();
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get("w").unwrap().data(), &[3.0, 4.0]);
//! ```

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, rows: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter id, in the order the parameters were bound.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.map.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, grad: Tensor) {
        self.map.insert(id.into(), grad);
    }

    pub fn remove(&mut self, id: &str) -> Option<Tensor> {
        self.map.shift_remove(id)
    }

    /// Adds `other` into `self` entry by entry. New ids are appended in
    /// `other`'s order.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in other.iter() {
            match self.map.get_mut(id) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(Error::shape(
                            "gradients",
                            format!("{id}: {:?} vs {:?}", mine.shape(), g.shape()),
                        ));
                    }
                    mine.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                }
                None => {
                    self.map.insert(id.to_string(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// L2 norm over the entries whose id satisfies `filter`.
    pub fn norm_where(&self, mut filter: impl FnMut(&str) -> bool) -> f64 {
        self.map
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, g)| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }
}

/// Records primitive evaluations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a named parameter as a leaf.
    pub fn param(&mut self, id: &str, value: &Tensor, requires_grad: bool) -> Var {
        let mut value = value.clone();
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: Some(id.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Anonymous differentiable leaf; its gradient is reachable through
    /// [`Tape::backward_wrt`].
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            0 => Ok((1, 1)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", s))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(x), self.value(bias));
        let c = va.cols();
        if vb.len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", va.shape(), vb.shape()),
            ));
        }
        let b = vb.data();
        let data = va
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, factor), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start + width > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of a {c}-column matrix", start + width),
            ));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, width], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (r, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} and {pc}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather; `embedding` with range checking on the ids.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", table)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of a {r}-row table")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, _) = self.matrix_dims("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        self.gather_rows(table, ids)
    }

    /// Row-wise softmax. With a mask, columns marked `false` get exactly zero
    /// probability; a fully masked row is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax", x)?;
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::shape("softmax", format!("mask of {} for {c} columns", m.len())));
            }
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let keep = |j: usize| mask.map_or(true, |m| m[j]);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(self.value(x).shape().to_vec(), out)?,
            Op::Softmax { x },
            rg,
        ))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {c} with gain {:?} and bias {:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let v = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(self.value(x).shape().to_vec(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// Dropout in evaluation form: the identity.
    pub fn dropout(&mut self, x: Var) -> Var {
        x
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Softmax cross-entropy averaged over the rows whose target is `Some`.
    /// With no counted rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("class {bad} of {c}")));
        }
        let v = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            if let Some(t) = targets[i] {
                total += -(row[t] - max - z.ln());
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients for every bound parameter that requires one and lies on a
    /// path to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.run_backward(loss)?;
        let mut out = Gradients::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g), true) = (&node.param, g, node.requires_grad) {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.map.get_mut(id.as_str()) {
                    Some(prev) => prev
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(id.clone(), t);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients with respect to arbitrary nodes; zeros where no path exists.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.run_backward(loss)?;
        wrt.iter()
            .map(|v| {
                let shape = self.value(*v).shape().to_vec();
                match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Ok(Tensor::zeros(&shape)),
                }
            })
            .collect()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let n = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(*a) {
                    acc(*a, &|s| matmul_nt_acc(g, vb.data(), s, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &|s| matmul_tn_acc(va.data(), g, s, m, k, n));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc(*v, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
                if wants(*bias) {
                    let c = nodes[bias.0].value.len();
                    acc(*bias, &|s| {
                        for row in g.chunks(c) {
                            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * vb[i];
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * va[i];
                        }
                    });
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b * f));
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    acc(*x, &|s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let w = node.value.cols();
                    acc(*x, &|s| {
                        for (i, row) in g.chunks(w).enumerate() {
                            let dst = &mut s[i * c + start..i * c + start + w];
                            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(*p) {
                        acc(*p, &|s| {
                            for (i, row) in g.chunks(total).enumerate() {
                                let src = &row[offset..offset + w];
                                s[i * w..(i + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(*p) {
                        acc(*p, &|s| {
                            s.iter_mut()
                                .zip(&g[offset..offset + n])
                                .for_each(|(a, b)| *a += b)
                        });
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, rows } => {
                if wants(*table) {
                    let c = nodes[table.0].value.cols();
                    acc(*table, &|s| {
                        for (k, &r) in rows.iter().enumerate() {
                            s[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[k * c..(k + 1) * c])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let p = node.value.data();
                    let c = node.value.cols();
                    acc(*x, &|s| {
                        for (i, (prow, grow)) in p.chunks(c).zip(g.chunks(c)).enumerate() {
                            let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                s[i * c + j] += prow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = nodes[gain.0].value.data();
                if wants(*x) {
                    acc(*x, &|s| {
                        for (i, grow) in g.chunks(c).enumerate() {
                            let h = &xhat[i * c..(i + 1) * c];
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..c {
                                let d = grow[j] * gv[j];
                                mean_d += d;
                                mean_dh += d * h[j];
                            }
                            mean_d /= c as f64;
                            mean_dh /= c as f64;
                            for j in 0..c {
                                let d = grow[j] * gv[j];
                                s[i * c + j] += inv_std[i] * (d - mean_d - h[j] * mean_dh);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    acc(*gain, &|s| {
                        for (grow, h) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                s[j] += grow[j] * h[j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(*bias, &|s| {
                        for grow in g.chunks(c) {
                            s.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let v = nodes[x.0].value.data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * gelu_grad(v[i]);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let v = nodes[x.0].value.data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            if v[i] > 0.0 {
                                s[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) && *count > 0 {
                    let c = nodes[logits.0].value.cols();
                    let scale = g[0] / *count as f64;
                    acc(*logits, &|s| {
                        for (i, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            for j in 0..c {
                                let onehot = if j == *t { 1.0 } else { 0.0 };
                                s[i * c + j] += scale * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(*x, &|s| s.iter_mut().for_each(|a| *a += g[0]));
                }
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, input: Tensor) {
        let mut tape = Tape::new();
        let x = tape.var(input.clone());
        let loss = build(&mut tape, x);
        let analytic = tape.backward_wrt(loss, &[x]).unwrap().remove(0);
        let eps = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let x = tape.var(t);
                let l = build(&mut tape, x);
                tape.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-6, "index {i}: analytic {a} numeric {numeric}");
        }
    }

    fn probe(tape: &mut Tape, x: Var) -> Var {
        // Weighted sum so that every output element matters differently.
        let v = tape.value(x);
        let w: Vec<f64> = (0..v.len()).map(|i| 0.3 + 0.17 * i as f64).collect();
        let w = tape.constant(Tensor::new(v.shape().to_vec(), w).unwrap());
        let m = tape.mul(x, w).unwrap();
        tape.sum(m)
    }

    fn sample(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0 + 0.013 * i as f64).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let p = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap());
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln3() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let l = tape.cross_entropy(x, &[Some(1)]).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones_and_quadratic_gradient_is_identity() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward_wrt(s, &[w]).unwrap();
        assert_eq!(g[0].data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let w = tape.var(Tensor::vector(vec![3.0, 4.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward_wrt(l, &[w]).unwrap();
        assert_eq!(g[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2×3] · [2×3]"), "{err}");
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.embedding(t, &[0, 4]), Err(Error::Input(_))));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        fd_check(|t, x| { let y = t.gelu(x); probe(t, y) }, sample(&[3, 4]));
        fd_check(|t, x| { let y = t.softmax(x, None).unwrap(); probe(t, y) }, sample(&[3, 4]));
        fd_check(
            |t, x| {
                let y = t.softmax(x, Some(&[true, false, true, true])).unwrap();
                probe(t, y)
            },
            sample(&[2, 4]),
        );
        fd_check(
            |t, x| {
                let g = t.constant(Tensor::vector(vec![1.0, 0.5, -2.0, 1.5]));
                let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                probe(t, y)
            },
            sample(&[3, 4]),
        );
        fd_check(
            |t, x| t.cross_entropy(x, &[Some(2), None, Some(0)]).unwrap(),
            sample(&[3, 4]),
        );
        fd_check(
            |t, x| {
                let w = t.constant(sample(&[4, 2]));
                let y = t.matmul(x, w).unwrap();
                let yt = t.transpose(y).unwrap();
                probe(t, yt)
            },
            sample(&[3, 4]),
        );
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 1, 2).unwrap();
                let b = t.slice_cols(x, 0, 1).unwrap();
                let c = t.concat_cols(&[a, b]).unwrap();
                let r = t.concat_rows(&[c, c]).unwrap();
                let sq = t.mul(r, r).unwrap();
                probe(t, sq)
            },
            sample(&[3, 4]),
        );
        fd_check(
            |t, x| {
                let e = t.gather_rows(x, &[2, 0, 2]).unwrap();
                let b = t.constant(Tensor::vector(vec![1.0, -1.0, 0.5, 0.0]));
                let y = t.add_bias(e, b).unwrap();
                let y = t.mul(y, y).unwrap();
                probe(t, y)
            },
            sample(&[3, 4]),
        );
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::vector(vec![1.0, 2.0]), true);
        let b = tape.param("b", &Tensor::vector(vec![3.0, 4.0]), false);
        let _unused = tape.param("c", &Tensor::vector(vec![1.0]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        assert!(g.get("b").is_none());
        assert!(g.get("c").is_none());
    }
}
