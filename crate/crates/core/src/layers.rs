//! Building-block layers: linear maps, norms, attention, positional
//! encoding. Each layer owns [`ParamId`]s into a shared store and is applied
//! through a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}/w"),
            init_uniform_fan_in(rng, vec![in_dim, out_dim], in_dim),
            true,
        );
        let b = store.add(&format!("{name}/b"), Tensor::zeros(vec![out_dim]), true);
        Linear { w, b }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            &format!("{name}/gamma"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("shape matches"),
            true,
        );
        let beta = store.add(&format!("{name}/beta"), Tensor::zeros(vec![dim]), true);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pending running-statistics update produced by a training-mode batch norm.
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnUpdate {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply(&self, store: &mut ParamStore, momentum: f64) {
        let rm = &mut store.get_mut(self.mean_id).data;
        for (r, b) in rm.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let rv = &mut store.get_mut(self.var_id).data;
        for (r, b) in rv.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Batch normalization over all valid rows of a packed batch, with running
/// statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            &format!("{name}/gamma"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("shape matches"),
            true,
        );
        let beta = store.add(&format!("{name}/beta"), Tensor::zeros(vec![dim]), true);
        let running_mean = store.add(
            &format!("{name}/running_mean"),
            Tensor::zeros(vec![dim]),
            false,
        );
        let running_var = store.add(
            &format!("{name}/running_var"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("shape matches"),
            false,
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: Var,
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if train {
            let (y, mean, var) = g.batch_norm(x, gamma, beta, BN_EPS, None)?;
            updates.push(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean,
                var,
            });
            Ok(y)
        } else {
            let rm = store.get(self.running_mean).data.clone();
            let rv = store.get(self.running_var).data.clone();
            let (y, _, _) = g.batch_norm(x, gamma, beta, BN_EPS, Some((&rm, &rv)))?;
            Ok(y)
        }
    }
}

/// Mutable state threaded through a forward pass.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub dropout: f64,
    pub bn_updates: &'a mut Vec<BnUpdate>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> ForwardCtx<'a> {
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.train && self.dropout > 0.0 {
            g.dropout(x, self.dropout, self.rng)
        } else {
            x
        }
    }

    /// Evaluation-mode context with a fixed rng (dropout off).
    pub fn eval(bn_updates: &'a mut Vec<BnUpdate>, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            bn_updates,
            rng,
        }
    }
}

/// Sinusoidal positional encoding rows `[len x d]` starting at `offset`.
pub fn positional_encoding(offset: usize, len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        let pos = (offset + t) as f64;
        for i in 0..d / 2 {
            let rate = pos / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = rate.sin();
            data[t * d + 2 * i + 1] = rate.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = pos / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + d - 1] = rate.sin();
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches")
}

/// Allow-mask where query `i` may attend to keys `j <= i`.
pub fn causal_mask(n: usize) -> Result<Vec<bool>> {
    if n == 0 {
        return Err(Error::InvalidArg("causal_mask of size 0".into()));
    }
    let mut allow = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            allow[i * n + j] = true;
        }
    }
    Ok(allow)
}

/// Scaled dot-product multi-head attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if d_model % num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {num_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}/wq"), d_model, d_model),
            wk: Linear::new(store, rng, &format!("{name}/wk"), d_model, d_model),
            wv: Linear::new(store, rng, &format!("{name}/wv"), d_model, d_model),
            wo: Linear::new(store, rng, &format!("{name}/wo"), d_model, d_model),
            num_heads,
            d_model,
        })
    }

    /// `queries [Tq x d]` attend to `keys_values [Tk x d]`.
    ///
    /// `allow`, when given, is a `[Tq x Tk]` mask; disallowed keys get
    /// exactly zero attention weight, and a fully masked query row yields a
    /// zero context vector.
    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        allow: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.wq.forward(store, g, queries)?;
        let k = self.wk.forward(store, g, keys_values)?;
        let v = self.wv.forward(store, g, keys_values)?;
        let dh = self.d_model / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kht = g.transpose(kh)?;
            let scores = g.matmul(qh, kht)?;
            let scores = g.scale(scores, scale);
            let weights = match allow {
                Some(m) => g.masked_softmax(scores, m)?,
                None => g.softmax(scores, 1)?,
            };
            heads.push(g.matmul(weights, vh)?);
        }
        let concat = g.concat_cols(&heads)?;
        self.wo.forward(store, g, concat)
    }
}
