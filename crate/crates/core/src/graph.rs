//! Define-by-run reverse-mode autodiff over f64 tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Ops execute eagerly and
//! record enough state for the backward sweep; [`Graph::backward`] walks the
//! tape in reverse creation order and accumulates gradients additively, so a
//! value used twice receives the sum of both branch gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[R x C] + [C]`, broadcast over rows.
    AddRowVec(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Embedding lookup: rows of a `[V x D]` table.
    GatherRows(Var, Vec<usize>),
    /// `[R x C] -> [R]`, picks one column per row.
    PickPerRow(Var, Vec<usize>),
    Sigmoid(Var),
    Swish(Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    /// Row-wise softmax over the last axis where only `allow[i]` entries
    /// participate; fully masked rows yield zeros.
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// Gradients flow through batch statistics only in training mode.
        train: bool,
    },
    SumAll(Var),
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    Conv2dStride2 {
        x: Var,
        kernel: Var,
    },
    Dropout(Var, Vec<f64>),
    /// Scalar whose gradient w.r.t. its single parent was computed in the
    /// forward pass (used by the CTC loss).
    ScalarWithGrad(Var, Vec<f64>),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Autograd tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_cache: std::collections::HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- leaves ------------------------------------------------------

    /// Non-differentiable input (features, masks, constants).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf { param: None }, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(data, shape, Op::Leaf { param: None }, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![1], Op::Leaf { param: None }, false)
    }

    /// Differentiable leaf honoring `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data.clone(),
            t.shape.clone(),
            Op::Leaf { param: None },
            t.requires_grad,
        )
    }

    /// Bind a parameter from the store; its gradient is retrievable by id
    /// after `backward` via [`Graph::param_grads`]. Repeated bindings of the
    /// same id within one graph share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.data.clone(),
            t.shape.clone(),
            Op::Leaf { param: Some(id) },
            t.requires_grad,
        );
        self.param_cache.insert(id, v);
        v
    }

    // ---- elementwise and linear algebra ------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let ng = self.needs(a);
        self.push(data, self.nodes[a.0].shape.clone(), Op::Scale(a, c), ng)
    }

    /// `[R x C] + [C]` broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let c = *self.shape(a).last().ok_or_else(|| {
            Error::InvalidArg("add_row_vec on rank-0 tensor".into())
        })?;
        if self.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let vv = self.data(v).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&vv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::AddRowVec(a, v), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul lhs")?;
        let (k2, n) = dims2(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::Matmul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, vec![c, r], Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(Error::InvalidArg(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let ng = self.needs(a);
        let data = self.data(a).to_vec();
        Ok(self.push(data, shape, Op::Reshape(a), ng))
    }

    // ---- slicing and concatenation ------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "slice_rows")?;
        if start + len > r {
            return Err(Error::InvalidArg(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = self.data(a)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(data, vec![len, c], Op::SliceRows(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_rows of zero parts".into()));
        }
        let (_, c) = dims2(self.shape(parts[0]), "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let (r_p, c_p) = dims2(self.shape(p), "concat_rows")?;
            if c_p != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r_p, c_p],
                });
            }
            rows += r_p;
            ng |= self.needs(p);
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(data, vec![rows, c], Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "slice_cols")?;
        if start + len > c {
            return Err(Error::InvalidArg(format!(
                "slice_cols {start}..{} out of {c} cols",
                start + len
            )));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(data, vec![r, len], Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols of zero parts".into()));
        }
        let (r, _) = dims2(self.shape(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut ng = false;
        for &p in parts {
            let (r_p, c_p) = dims2(self.shape(p), "concat_cols")?;
            if r_p != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r, total],
                    rhs: vec![r_p, c_p],
                });
            }
            widths.push(c_p);
            total += c_p;
            ng |= self.needs(p);
        }
        let mut data = vec![0.0; r * total];
        for i in 0..r {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.data(p)[i * w..(i + 1) * w]);
                off += w;
            }
        }
        Ok(self.push(data, vec![r, total], Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Embedding lookup: `table[ids[i], :]` stacked into `[ids.len() x D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArg(format!(
                "gather_rows id {bad} out of range for table with {v} rows"
            )));
        }
        let x = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            Op::GatherRows(table, ids.to_vec()),
            ng,
        ))
    }

    /// `out[r] = a[r, idx[r]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "pick_per_row")?;
        if idx.len() != r {
            return Err(Error::InvalidArg(format!(
                "pick_per_row wants {r} indices, got {}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArg(format!(
                "pick_per_row index {bad} out of range for {c} cols"
            )));
        }
        let x = self.data(a);
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        let ng = self.needs(a);
        Ok(self.push(data, vec![r], Op::PickPerRow(a, idx.to_vec()), ng))
    }

    // ---- activations ---------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push(data, self.nodes[a.0].shape.clone(), Op::Sigmoid(a), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push(data, self.nodes[a.0].shape.clone(), Op::Swish(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(data, self.nodes[a.0].shape.clone(), Op::Relu(a), ng)
    }

    /// Gated linear unit over the last axis: first half times
    /// `sigmoid(second half)`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if c == 0 || c % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "glu wants an even last dimension, got shape {:?}",
                self.shape(a)
            )));
        }
        let rows = self.numel(a) / c;
        let flat = self.reshape(a, vec![rows, c])?;
        let content = self.slice_cols(flat, 0, c / 2)?;
        let gate = self.slice_cols(flat, c / 2, c / 2)?;
        let gate = self.sigmoid(gate);
        let out = self.mul(content, gate)?;
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = c / 2;
        self.reshape(out, shape)
    }

    // ---- normalization and softmax --------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut data = self.data(a).to_vec();
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (data[base + i * stride] - max).exp();
                data[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                data[base + i * stride] /= sum;
            }
        });
        let ng = self.needs(a);
        Ok(self.push(data, shape, Op::Softmax(a, axis), ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "log_softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut data = self.data(a).to_vec();
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                sum += (data[base + i * stride] - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..len {
                data[base + i * stride] -= lse;
            }
        });
        let ng = self.needs(a);
        Ok(self.push(data, shape, Op::LogSoftmax(a, axis), ng))
    }

    /// Softmax over the last axis of a `[R x C]` tensor where only entries
    /// with `allow[i] == true` compete; rows with no allowed entry come out
    /// as all zeros.
    pub fn masked_softmax(&mut self, a: Var, allow: &[bool]) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "masked_softmax")?;
        if allow.len() != r * c {
            return Err(Error::InvalidArg(format!(
                "masked_softmax mask has {} entries for shape [{r}, {c}]",
                allow.len()
            )));
        }
        let x = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = &allow[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if m[j] {
                    max = max.max(row[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(data, vec![r, c], Op::MaskedSoftmax(a), ng))
    }

    /// Layer normalization over the last axis, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| {
            Error::InvalidArg("layer_norm on rank-0 tensor".into())
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape.clone(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.numel(x) / c;
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let xd = self.data(x);
        let mut data = vec![0.0; rows * c];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for i in 0..rows {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..c {
                data[i * c + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            data,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            ng,
        ))
    }

    /// Batch normalization of a `[R x C]` tensor over its rows.
    ///
    /// In training mode statistics come from the batch itself and are
    /// returned so the caller can maintain running averages; in eval mode
    /// the provided running statistics are used and treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = dims2(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![r, c],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let xd = self.data(x);
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= r as f64;
                }
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= r as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = g[j] * (xd[i * c + j] - mean[j]) * inv_std[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            data,
            vec![r, c],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                train,
            },
            ng,
        );
        Ok((out, mean, var))
    }

    // ---- convolutions ----------------------------------------------------

    /// Depthwise 1-D convolution: `x [T x C]`, `kernel [K x C]` with odd `K`,
    /// symmetric zero padding so the length is preserved.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, c) = dims2(self.shape(x), "depthwise_conv1d input")?;
        let (k, ck) = dims2(self.shape(kernel), "depthwise_conv1d kernel")?;
        if ck != c {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: vec![t, c],
                rhs: vec![k, ck],
            });
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "depthwise_conv1d kernel length must be odd, got {k}"
            )));
        }
        let half = k / 2;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            for j in 0..k {
                let src = ti as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                let krow = &kd[j * c..(j + 1) * c];
                for ci in 0..c {
                    orow[ci] += xrow[ci] * krow[ci];
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel);
        Ok(self.push(out, vec![t, c], Op::DepthwiseConv1d { x, kernel }, ng))
    }

    /// 2-D convolution with 3x3 kernels, stride 2, no padding.
    ///
    /// `x` is `[H x W x Cin]`, `kernel` is `[3 x 3 x Cin x Cout]`, output is
    /// `[H' x W' x Cout]` with `H' = (H - 3) / 2 + 1`.
    pub fn conv2d_stride2(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (h, w, cin) = match xs.as_slice() {
            [h, w, c] => (*h, *w, *c),
            _ => {
                return Err(Error::InvalidArg(format!(
                    "conv2d_stride2 wants a rank-3 input, got {xs:?}"
                )))
            }
        };
        let cout = match ks.as_slice() {
            [3, 3, kc, cout] if *kc == cin => *cout,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d_stride2",
                    lhs: xs,
                    rhs: ks,
                })
            }
        };
        if h < 3 || w < 3 {
            return Err(Error::InvalidArg(format!(
                "conv2d_stride2 input [{h}, {w}] smaller than the 3x3 kernel"
            )));
        }
        let h_out = (h - 3) / 2 + 1;
        let w_out = (w - 3) / 2 + 1;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; h_out * w_out * cout];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let acc = &mut out[(oy * w_out + ox) * cout..(oy * w_out + ox + 1) * cout];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = 2 * oy + ky;
                        let ix = 2 * ox + kx;
                        let xrow = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let krow =
                                &kd[((ky * 3 + kx) * cin + ci) * cout..((ky * 3 + kx) * cin + ci + 1) * cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            out,
            vec![h_out, w_out, cout],
            Op::Conv2dStride2 { x, kernel },
            ng,
        ))
    }

    // ---- reductions and custom scalars ------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![s], vec![1], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a).max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout; a rate of zero is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl rand::Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel(a))
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = zip_map(self.data(a), &mask, |x, m| x * m);
        let ng = self.needs(a);
        self.push(data, self.nodes[a.0].shape.clone(), Op::Dropout(a, mask), ng)
    }

    /// Scalar node whose gradient w.r.t. `x` was computed by the caller.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.numel(x) {
            return Err(Error::InvalidArg(format!(
                "scalar_with_grad gradient has {} entries for an input of {}",
                grad.len(),
                self.numel(x)
            )));
        }
        let ng = self.needs(x);
        Ok(self.push(vec![value], vec![1], Op::ScalarWithGrad(x, grad), ng))
    }

    /// `matmul(x, w) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_vec(y, b)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; gradients accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().expect("grad present");
            self.step_backward(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn step_backward(&mut self, id: usize, g: &[f64]) {
        // Clones of parent data below are cheap relative to the matmuls and
        // keep the borrow structure simple.
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |d| axpy(d, g, 1.0));
                self.accumulate(b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |d| axpy(d, g, 1.0));
                self.accumulate(b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                self.accumulate(a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, |d| axpy(d, g, c));
            }
            Op::AddRowVec(a, v) => {
                let (a, v) = (*a, *v);
                let c = self.nodes[v.0].data.len();
                self.accumulate(a, |d| axpy(d, g, 1.0));
                self.accumulate(v, |d| {
                    for row in g.chunks_exact(c) {
                        for j in 0..c {
                            d[j] += row[j];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                // dA = g . B^T
                self.accumulate(a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T . g
                self.accumulate(b, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let drow = &mut d[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += a_ip * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.accumulate(a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accumulate(a, |d| axpy(d, g, 1.0));
            }
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                let c = self.nodes[a.0].shape[1];
                self.accumulate(a, |d| {
                    axpy(&mut d[start * c..start * c + g.len()], g, 1.0);
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].data.len();
                    self.accumulate(p, |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let c = self.nodes[a.0].shape[1];
                let len = self.nodes[id].shape[1];
                let r = self.nodes[id].shape[0];
                self.accumulate(a, |d| {
                    for i in 0..r {
                        for j in 0..len {
                            d[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.nodes[id].shape[1];
                let r = self.nodes[id].shape[0];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    self.accumulate(p, |d| {
                        for i in 0..r {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let table = *table;
                let ids = ids.clone();
                let d_cols = self.nodes[table.0].shape[1];
                self.accumulate(table, |d| {
                    for (i, &row) in ids.iter().enumerate() {
                        for j in 0..d_cols {
                            d[row * d_cols + j] += g[i * d_cols + j];
                        }
                    }
                });
            }
            Op::PickPerRow(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let c = self.nodes[a.0].shape[1];
                self.accumulate(a, |d| {
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] += g[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[id].data.clone();
                self.accumulate(a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Swish(a) => {
                let a = *a;
                let x = self.nodes[a.0].data.clone();
                self.accumulate(a, |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(x[i]);
                        d[i] += g[i] * (s + x[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.nodes[a.0].data.clone();
                self.accumulate(a, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (a, axis) = (*a, *axis);
                let y = self.nodes[id].data.clone();
                let shape = self.nodes[id].shape.clone();
                self.accumulate(a, |d| {
                    for_each_lane(&shape, axis, |base, stride, len| {
                        let mut dot = 0.0;
                        for i in 0..len {
                            dot += g[base + i * stride] * y[base + i * stride];
                        }
                        for i in 0..len {
                            let ix = base + i * stride;
                            d[ix] += y[ix] * (g[ix] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (a, axis) = (*a, *axis);
                let y = self.nodes[id].data.clone();
                let shape = self.nodes[id].shape.clone();
                self.accumulate(a, |d| {
                    for_each_lane(&shape, axis, |base, stride, len| {
                        let mut gsum = 0.0;
                        for i in 0..len {
                            gsum += g[base + i * stride];
                        }
                        for i in 0..len {
                            let ix = base + i * stride;
                            d[ix] += g[ix] - y[ix].exp() * gsum;
                        }
                    });
                });
            }
            Op::MaskedSoftmax(a) => {
                let a = *a;
                let y = self.nodes[id].data.clone();
                let c = self.nodes[id].shape[1];
                self.accumulate(a, |d| {
                    for (row, (grow, yrow)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += grow[j] * yrow[j];
                        }
                        for j in 0..c {
                            d[row * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let c = self.nodes[gamma.0].data.len();
                let rows = mean.len();
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                self.accumulate(beta, |d| {
                    for row in g.chunks_exact(c) {
                        for j in 0..c {
                            d[j] += row[j];
                        }
                    }
                });
                self.accumulate(gamma, |d| {
                    for i in 0..rows {
                        for j in 0..c {
                            let xhat = (xd[i * c + j] - mean[i]) * inv_std[i];
                            d[j] += g[i * c + j] * xhat;
                        }
                    }
                });
                self.accumulate(x, |d| {
                    for i in 0..rows {
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..c {
                            let h = gd[j] * g[i * c + j];
                            let xhat = (xd[i * c + j] - mean[i]) * inv_std[i];
                            h_mean += h;
                            hx_mean += h * xhat;
                        }
                        h_mean /= c as f64;
                        hx_mean /= c as f64;
                        for j in 0..c {
                            let h = gd[j] * g[i * c + j];
                            let xhat = (xd[i * c + j] - mean[i]) * inv_std[i];
                            d[i * c + j] += inv_std[i] * (h - h_mean - xhat * hx_mean);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let c = mean.len();
                let rows = self.nodes[x.0].shape[0];
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                self.accumulate(beta, |d| {
                    for row in g.chunks_exact(c) {
                        for j in 0..c {
                            d[j] += row[j];
                        }
                    }
                });
                self.accumulate(gamma, |d| {
                    for i in 0..rows {
                        for j in 0..c {
                            let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                            d[j] += g[i * c + j] * xhat;
                        }
                    }
                });
                self.accumulate(x, |d| {
                    if train {
                        // Per column, mirroring the layer-norm derivation
                        // with statistics over rows.
                        for j in 0..c {
                            let mut h_mean = 0.0;
                            let mut hx_mean = 0.0;
                            for i in 0..rows {
                                let h = gd[j] * g[i * c + j];
                                let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                                h_mean += h;
                                hx_mean += h * xhat;
                            }
                            h_mean /= rows as f64;
                            hx_mean /= rows as f64;
                            for i in 0..rows {
                                let h = gd[j] * g[i * c + j];
                                let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                                d[i * c + j] += inv_std[j] * (h - h_mean - xhat * hx_mean);
                            }
                        }
                    } else {
                        for i in 0..rows {
                            for j in 0..c {
                                d[i * c + j] += g[i * c + j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let a = *a;
                let gv = g[0];
                self.accumulate(a, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (x, kernel) = (*x, *kernel);
                let (t, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let k = self.nodes[kernel.0].shape[0];
                let half = k / 2;
                let xd = self.nodes[x.0].data.clone();
                let kd = self.nodes[kernel.0].data.clone();
                self.accumulate(x, |d| {
                    for ti in 0..t {
                        let grow = &g[ti * c..(ti + 1) * c];
                        for j in 0..k {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let drow = &mut d[src as usize * c..(src as usize + 1) * c];
                            let krow = &kd[j * c..(j + 1) * c];
                            for ci in 0..c {
                                drow[ci] += grow[ci] * krow[ci];
                            }
                        }
                    }
                });
                self.accumulate(kernel, |d| {
                    for ti in 0..t {
                        let grow = &g[ti * c..(ti + 1) * c];
                        for j in 0..k {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                            let drow = &mut d[j * c..(j + 1) * c];
                            for ci in 0..c {
                                drow[ci] += grow[ci] * xrow[ci];
                            }
                        }
                    }
                });
            }
            Op::Conv2dStride2 { x, kernel } => {
                let (x, kernel) = (*x, *kernel);
                let xs = self.nodes[x.0].shape.clone();
                let (h, w, cin) = (xs[0], xs[1], xs[2]);
                let cout = self.nodes[kernel.0].shape[3];
                let h_out = (h - 3) / 2 + 1;
                let w_out = (w - 3) / 2 + 1;
                let xd = self.nodes[x.0].data.clone();
                let kd = self.nodes[kernel.0].data.clone();
                self.accumulate(x, |d| {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let grow = &g[(oy * w_out + ox) * cout..(oy * w_out + ox + 1) * cout];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = 2 * oy + ky;
                                    let ix = 2 * ox + kx;
                                    for ci in 0..cin {
                                        let krow = &kd[((ky * 3 + kx) * cin + ci) * cout
                                            ..((ky * 3 + kx) * cin + ci + 1) * cout];
                                        let mut s = 0.0;
                                        for oc in 0..cout {
                                            s += grow[oc] * krow[oc];
                                        }
                                        d[(iy * w + ix) * cin + ci] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(kernel, |d| {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let grow = &g[(oy * w_out + ox) * cout..(oy * w_out + ox + 1) * cout];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = 2 * oy + ky;
                                    let ix = 2 * ox + kx;
                                    let xrow = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                                    for (ci, &xv) in xrow.iter().enumerate() {
                                        let drow = &mut d[((ky * 3 + kx) * cin + ci) * cout
                                            ..((ky * 3 + kx) * cin + ci + 1) * cout];
                                        for oc in 0..cout {
                                            drow[oc] += xv * grow[oc];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let mask = mask.clone();
                self.accumulate(a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::ScalarWithGrad(a, grad) => {
                let a = *a;
                let grad = grad.clone();
                let gv = g[0];
                self.accumulate(a, |d| {
                    for i in 0..d.len() {
                        d[i] += gv * grad[i];
                    }
                });
            }
        }
    }

    /// Accumulated gradients per parameter id, summed over multiple bindings.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut acc: Vec<(ParamId, Vec<f64>)> = Vec::new();
        let mut where_is: std::collections::HashMap<ParamId, usize> = std::collections::HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    match where_is.get(&pid) {
                        Some(&slot) => axpy(&mut acc[slot].1, g, 1.0),
                        None => {
                            where_is.insert(pid, acc.len());
                            acc.push((pid, g.clone()));
                        }
                    }
                }
            }
        }
        acc
    }

    /// Write accumulated gradients into the `grad` field of store tensors.
    /// Trainable parameters that received no flow get a zero gradient.
    pub fn write_grads_to(&self, store: &mut ParamStore) {
        let grads = self.param_grads();
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_trainable(id) {
                let n = store.get(id).numel();
                store.get_mut(id).grad = Some(vec![0.0; n]);
            }
        }
        for (pid, g) in grads {
            store.get_mut(pid).grad = Some(g);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::InvalidArg(format!(
            "{what}: expected rank-2 tensor, got shape {shape:?}"
        ))),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// `C += A[m x k] . B[k x n]`, cache-friendly i-k-j order.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
    c
}

/// Visit every 1-D lane of `shape` along `axis` as (base, stride, len).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).unwrap().requires_grad()
    }

    /// Central finite differences vs analytic gradient on every input.
    fn fd_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
    ) {
        let h = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars);
        assert_eq!(g.numel(loss), 1, "fd_check loss must be scalar");
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.numel(v)]))
            .collect();

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
            let loss = build(&mut g, &vars);
            g.scalar_value(loss)
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            for ei in 0..t.data.len() {
                let orig = work[ti].data[ei];
                work[ti].data[ei] = orig + h;
                let fp = eval(&work);
                work[ti].data[ei] = orig - h;
                let fm = eval(&work);
                work[ti].data[ei] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[ti][ei];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel <= tol,
                    "input {ti} element {ei}: analytic {a}, numeric {numeric}, rel {rel}"
                );
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);

        let b = g.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let out = g.matmul(va, vb).unwrap();
        // independent naive triple loop
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data[i * 4 + p] * b.data[p * 2 + j];
                }
                assert!((g.data(out)[i * 2 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]);
        let b = g.constant(vec![2, 2], vec![0.0; 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let y = g.softmax(x, 0).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }
        let x1 = g.constant(vec![3], vec![1.0, 2.0, 3.0]);
        let y1 = g.softmax(x1, 0).unwrap();
        let x2 = g.constant(vec![3], vec![1.0 + 7.5, 2.0 + 7.5, 3.0 + 7.5]);
        let y2 = g.softmax(x2, 0).unwrap();
        for (a, b) in g.data(y1).iter().zip(g.data(y2)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]);
        let y = g.softmax(x, 0).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (a, e) in g.data(y).iter().zip(&exps) {
            assert!((a - e / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = rand_tensor(&mut rng, vec![4, 7]);
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let s = g.softmax(x, 1).unwrap();
        let ls = g.log_softmax(x, 1).unwrap();
        for row in g.data(s).chunks_exact(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (a, b) in g.data(s).iter().zip(g.data(ls)) {
            assert!((a.ln() - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_over_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor(&mut rng, vec![2, 3, 2]);
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let s = g.softmax(x, 1).unwrap();
        let d = g.data(s);
        for b in 0..2 {
            for j in 0..2 {
                let sum: f64 = (0..3).map(|i| d[b * 6 + i * 2 + j]).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_returns_beta() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 4], vec![5.0; 4]);
        let gamma = g.constant(vec![4], vec![1.0; 4]);
        let beta = g.constant(vec![4], vec![0.0; 4]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.data(y) {
            assert!(v.abs() <= 1e-10);
        }
    }

    #[test]
    fn layer_norm_normalizes_to_zero_mean_unit_var() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let gamma = g.constant(vec![3], vec![1.0; 3]);
        let beta = g.constant(vec![3], vec![0.0; 3]);
        let y = g.layer_norm(x, gamma, beta, 1e-10).unwrap();
        let d = g.data(y);
        let mean: f64 = d.iter().sum::<f64>() / 3.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-4); // eps shifts variance slightly
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_tensor(&mut rng, vec![1, 6]);
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let gamma = g.constant(vec![6], vec![1.0; 6]);
        let beta = g.constant(vec![6], vec![0.0; 6]);
        let eps = 1e-5;
        let y = g.layer_norm(x, gamma, beta, eps).unwrap();
        let mean: f64 = t.data.iter().sum::<f64>() / 6.0;
        let var: f64 = t.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        for (out, xin) in g.data(y).iter().zip(&t.data) {
            let want = (xin - mean) / (var + eps).sqrt();
            assert!((out - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![5, 3]);
        let mut g = Graph::new();
        let vx = g.leaf(&x);
        let mut k = vec![0.0; 3 * 3];
        for c in 0..3 {
            k[1 * 3 + c] = 1.0; // center tap
        }
        let vk = g.constant(vec![3, 3], k);
        let y = g.depthwise_conv1d(vx, vk).unwrap();
        for (a, b) in g.data(y).iter().zip(&x.data) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn depthwise_all_ones_boundary() {
        let mut g = Graph::new();
        let x = g.constant(vec![4, 1], vec![1.0; 4]);
        let k = g.constant(vec![3, 1], vec![1.0; 3]);
        let y = g.depthwise_conv1d(x, k).unwrap();
        assert_eq!(g.data(y), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn depthwise_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, vec![7, 2]);
        let k = rand_tensor(&mut rng, vec![5, 2]);
        let mut g = Graph::new();
        let (vx, vk) = (g.leaf(&x), g.leaf(&k));
        let y = g.depthwise_conv1d(vx, vk).unwrap();
        for t in 0..7i64 {
            for c in 0..2usize {
                let mut s = 0.0;
                for j in 0..5i64 {
                    let src = t + j - 2;
                    if (0..7).contains(&src) {
                        s += x.data[src as usize * 2 + c] * k.data[j as usize * 2 + c];
                    }
                }
                assert!((g.data(y)[t as usize * 2 + c] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_even_kernel_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec![4, 1], vec![0.0; 4]);
        let k = g.constant(vec![4, 1], vec![0.0; 4]);
        assert!(g.depthwise_conv1d(x, k).is_err());
    }

    #[test]
    fn glu_and_swish_contracts() {
        let mut g = Graph::new();
        // gate half zero -> output = 0.5 * content
        let x = g.constant(vec![1, 4], vec![2.0, -4.0, 0.0, 0.0]);
        let y = g.glu(x).unwrap();
        assert_eq!(g.data(y), &[1.0, -2.0]);
        let odd = g.constant(vec![1, 3], vec![0.0; 3]);
        assert!(g.glu(odd).is_err());

        let z = g.constant(vec![1], vec![0.0]);
        let s = g.swish(z);
        assert_eq!(g.data(s), &[0.0]);
        let v = g.constant(vec![2], vec![-1.0, 1.0]);
        let s = g.swish(v);
        for (o, x) in g.data(s).iter().zip([-1.0f64, 1.0]) {
            let want = x * (1.0 / (1.0 + (-x).exp()));
            assert!((o - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_dot_gives_other() {
        let mut g = Graph::new();
        let xt = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad();
        let x = g.leaf(&xt);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let yt = Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let x = g.leaf(&xt);
        let y = g.input(&yt);
        let prod = g.mul(x, y).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reuse_accumulates_sum_of_branches() {
        let xt = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad();
        // loss = sum(x*x) + sum(x): grad = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(&xt);
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        let got = g.grad(x).unwrap();
        assert_eq!(got, &[3.0, 5.0]);

        // equals the sum of the two single-use graphs
        let mut g1 = Graph::new();
        let x1 = g1.leaf(&xt);
        let sq = g1.mul(x1, x1).unwrap();
        let l1 = g1.sum_all(sq);
        g1.backward(l1).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.leaf(&xt);
        let l2 = g2.sum_all(x2);
        g2.backward(l2).unwrap();
        for i in 0..2 {
            assert_eq!(
                got[i],
                g1.grad(x1).unwrap()[i] + g2.grad(x2).unwrap()[i]
            );
        }
    }

    #[test]
    fn finite_difference_all_core_ops() {
        // One composite graph per op family, 5 seeds each.
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            let a = rand_tensor(&mut rng, vec![3, 4]);
            let b = rand_tensor(&mut rng, vec![4, 3]);
            fd_check(&[a, b], |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                let s = g.swish(m);
                g.sum_all(s)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![2, 6]);
            fd_check(&[x], |g, v| {
                let y = g.glu(v[0]).unwrap();
                let y = g.softmax(y, 1).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![3, 5]);
            let gamma = rand_tensor(&mut rng, vec![5]);
            let beta = rand_tensor(&mut rng, vec![5]);
            fd_check(&[x, gamma, beta], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let y = g.sigmoid(y);
                g.sum_all(y)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![4, 3]);
            let gamma = rand_tensor(&mut rng, vec![3]);
            let beta = rand_tensor(&mut rng, vec![3]);
            fd_check(&[x, gamma, beta], |g, v| {
                let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, None).unwrap();
                let y = g.relu(y);
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![6, 3]);
            let k = rand_tensor(&mut rng, vec![3, 3]);
            fd_check(&[x, k], |g, v| {
                let y = g.depthwise_conv1d(v[0], v[1]).unwrap();
                let y = g.swish(y);
                g.sum_all(y)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![7, 5, 2]);
            let k = rand_tensor(&mut rng, vec![3, 3, 2, 3]);
            fd_check(&[x, k], |g, v| {
                let y = g.conv2d_stride2(v[0], v[1]).unwrap();
                let y = g.swish(y);
                g.sum_all(y)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![3, 4]);
            fd_check(&[x], |g, v| {
                let y = g.log_softmax(v[0], 1).unwrap();
                let picked = g.pick_per_row(y, &[1, 0, 3]).unwrap();
                let s = g.sum_all(picked);
                g.scale(s, -1.0)
            }, 1e-4);

            let table = rand_tensor(&mut rng, vec![5, 3]);
            fd_check(&[table], |g, v| {
                let rows = g.gather_rows(v[0], &[0, 2, 2, 4]).unwrap();
                let y = g.sigmoid(rows);
                g.sum_all(y)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![4, 4]);
            let allow = vec![
                true, false, true, true, //
                true, true, false, false, //
                false, false, false, false, // fully masked row
                true, true, true, true,
            ];
            fd_check(&[x], |g, v| {
                let y = g.masked_softmax(v[0], &allow).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }, 1e-4);

            let x = rand_tensor(&mut rng, vec![3, 4]);
            let bias = rand_tensor(&mut rng, vec![4]);
            fd_check(&[x, bias], |g, v| {
                let y = g.add_row_vec(v[0], v[1]).unwrap();
                let t = g.transpose(y).unwrap();
                let sl = g.slice_rows(t, 1, 2).unwrap();
                let sc = g.slice_cols(sl, 0, 2).unwrap();
                let cc = g.concat_cols(&[sc, sc]).unwrap();
                let cr = g.concat_rows(&[cc, cc]).unwrap();
                let y = g.swish(cr);
                g.sum_all(y)
            }, 1e-4);
        }
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let allow = vec![true, true, false, false, false, false];
        let y = g.masked_softmax(x, &allow).unwrap();
        let d = g.data(y);
        assert!((d[0] + d[1] - 1.0).abs() <= 1e-12);
        assert_eq!(d[2], 0.0);
        assert_eq!(&d[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn no_nan_on_bounded_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n: usize = rng.gen_range(1..5);
            let data: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let t = Tensor::new(vec![n, 4], data).unwrap();
            let mut g = Graph::new();
            let x = g.input(&t);
            let sm = g.softmax(x, 1).unwrap();
            let ls = g.log_softmax(x, 1).unwrap();
            let gamma = g.constant(vec![4], vec![1.0; 4]);
            let beta = g.constant(vec![4], vec![0.0; 4]);
            let ln = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let sw = g.swish(x);
            for v in [sm, ls, ln, sw] {
                assert!(g.data(v).iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_inverted_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = rand_tensor(&mut rng, vec![10, 10]);
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
        let z = g.dropout(x, 0.5, &mut rng);
        for (o, i) in g.data(z).iter().zip(&t.data) {
            assert!(*o == 0.0 || (o - i * 2.0).abs() <= 1e-12);
        }
    }
}
