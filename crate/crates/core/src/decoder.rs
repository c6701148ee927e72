//! Transformer decoder used for both PHN-DEC and GRP-DEC.
//!
//! One parameterized implementation, instantiated twice with different
//! vocabularies. Layers are post-norm: causal self-attention, cross
//! attention over the encoder output, feed-forward, each wrapped in
//! residual + layer norm. [`DecoderState`] supports incremental decoding
//! with per-layer key/value caches and value semantics.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{causal_mask, positional_encoding, ForwardCtx, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{init_uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_hidden: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_ln: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_ln: LayerNorm,
    ffn_w1: Linear,
    ffn_w2: Linear,
    ffn_ln: LayerNorm,
}

impl DecoderLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}/self"),
                cfg.d_model,
                cfg.num_heads,
            )?,
            self_ln: LayerNorm::new(store, &format!("{name}/self_ln"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}/cross"),
                cfg.d_model,
                cfg.num_heads,
            )?,
            cross_ln: LayerNorm::new(store, &format!("{name}/cross_ln"), cfg.d_model),
            ffn_w1: Linear::new(store, rng, &format!("{name}/ffn/w1"), cfg.d_model, cfg.ff_hidden),
            ffn_w2: Linear::new(store, rng, &format!("{name}/ffn/w2"), cfg.ff_hidden, cfg.d_model),
            ffn_ln: LayerNorm::new(store, &format!("{name}/ffn_ln"), cfg.d_model),
        })
    }

    fn ffn(&self, store: &ParamStore, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.ffn_w1.forward(store, g, x)?;
        let y = g.relu(y);
        let y = ctx.dropout(g, y);
        self.ffn_w2.forward(store, g, y)
    }
}

/// Incremental decoding cache: the token prefix plus per-layer K/V rows.
/// Plain values; cloning a state forks it without interference.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    pub len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecoderState {
    pub fn new(num_layers: usize) -> Self {
        DecoderState {
            len: 0,
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
        }
    }
}

pub struct TransformerDecoder {
    pub cfg: DecoderConfig,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    out: Linear,
}

impl TransformerDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: DecoderConfig,
    ) -> Result<Self> {
        if cfg.d_model % cfg.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by {} heads",
                cfg.d_model, cfg.num_heads
            )));
        }
        let embed = store.add(
            &format!("{name}/embed/w"),
            init_uniform_fan_in(rng, vec![cfg.vocab_size, cfg.d_model], cfg.d_model),
            true,
        );
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            layers.push(DecoderLayer::new(store, rng, &format!("{name}/layer{i}"), &cfg)?);
        }
        let out = Linear::new(store, rng, &format!("{name}/out"), cfg.d_model, cfg.vocab_size);
        Ok(TransformerDecoder {
            cfg,
            embed,
            layers,
            out,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidArg(format!(
                "token id {bad} out of range for vocab of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits `[U x V]` for one utterance.
    ///
    /// `enc` is that utterance's encoder output `[S x d]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        tokens: &[usize],
        enc: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::InvalidArg("decoder needs at least one token".into()));
        }
        let u = tokens.len();
        let table = g.param(store, self.embed);
        let emb = g.gather_rows(table, tokens)?;
        let emb = g.scale(emb, (self.cfg.d_model as f64).sqrt());
        let pe = positional_encoding(0, u, self.cfg.d_model);
        let pe = g.input(&pe);
        let mut x = g.add(emb, pe)?;
        let allow = causal_mask(u)?;
        for layer in &self.layers {
            let sa = layer.self_attn.forward(store, g, x, x, Some(&allow))?;
            let sa = ctx.dropout(g, sa);
            let sum = g.add(x, sa)?;
            x = layer.self_ln.forward(store, g, sum)?;
            let ca = layer.cross_attn.forward(store, g, x, enc, None)?;
            let ca = ctx.dropout(g, ca);
            let sum = g.add(x, ca)?;
            x = layer.cross_ln.forward(store, g, sum)?;
            let ff = layer.ffn(store, g, x, ctx)?;
            let ff = ctx.dropout(g, ff);
            let sum = g.add(x, ff)?;
            x = layer.ffn_ln.forward(store, g, sum)?;
        }
        self.out.forward(store, g, x)
    }

    /// Feed one token and get logits for the next position, extending the
    /// cache. Matches the last row of [`TransformerDecoder::forward`] on the
    /// full prefix.
    pub fn step(
        &self,
        store: &ParamStore,
        state: &DecoderState,
        token: usize,
        enc: &Tensor,
    ) -> Result<(Vec<f64>, DecoderState)> {
        use rand::SeedableRng;
        self.check_tokens(&[token])?;
        if state.keys.len() != self.cfg.num_layers {
            return Err(Error::InvalidArg(format!(
                "decoder state has {} layer caches, model has {}",
                state.keys.len(),
                self.cfg.num_layers
            )));
        }
        let d = self.cfg.d_model;
        for (l, k) in state.keys.iter().enumerate() {
            if k.len() != state.len * d || state.values[l].len() != state.len * d {
                return Err(Error::InvalidArg(format!(
                    "inconsistent cache length in layer {l}: prefix {} rows",
                    state.len
                )));
            }
        }
        let mut next = state.clone();
        let mut g = Graph::new();
        let mut bn_updates = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut bn_updates, &mut rng);
        let table = g.param(store, self.embed);
        let emb = g.gather_rows(table, &[token])?;
        let emb = g.scale(emb, (d as f64).sqrt());
        let pe = positional_encoding(state.len, 1, d);
        let pe = g.input(&pe);
        let mut x = g.add(emb, pe)?;
        let enc_var = g.input(enc);
        for (l, layer) in self.layers.iter().enumerate() {
            // fresh K/V row for this position, from the layer's input
            let wk = g.param(store, layer.self_attn.wk.w);
            let bk = g.param(store, layer.self_attn.wk.b);
            let k_new = g.linear(x, wk, bk)?;
            let wv = g.param(store, layer.self_attn.wv.w);
            let bv = g.param(store, layer.self_attn.wv.b);
            let v_new = g.linear(x, wv, bv)?;

            let t = state.len + 1;
            let mut k_cache = state.keys[l].clone();
            k_cache.extend_from_slice(g.data(k_new));
            let mut v_cache = state.values[l].clone();
            v_cache.extend_from_slice(g.data(v_new));
            next.keys[l] = k_cache.clone();
            next.values[l] = v_cache.clone();

            let k_all = g.constant(vec![t, d], k_cache);
            let v_all = g.constant(vec![t, d], v_cache);
            let wq = g.param(store, layer.self_attn.wq.w);
            let bq = g.param(store, layer.self_attn.wq.b);
            let q = g.linear(x, wq, bq)?;
            let heads = self.cfg.num_heads;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut parts = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k_all, h * dh, dh)?;
                let vh = g.slice_cols(v_all, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let w = g.softmax(scores, 1)?;
                parts.push(g.matmul(w, vh)?);
            }
            let concat = g.concat_cols(&parts)?;
            let sa = layer.self_attn.wo.forward(store, &mut g, concat)?;
            let sum = g.add(x, sa)?;
            x = layer.self_ln.forward(store, &mut g, sum)?;

            let ca = layer.cross_attn.forward(store, &mut g, x, enc_var, None)?;
            let sum = g.add(x, ca)?;
            x = layer.cross_ln.forward(store, &mut g, sum)?;

            let ff = layer.ffn(store, &mut g, x, &mut ctx)?;
            let sum = g.add(x, ff)?;
            x = layer.ffn_ln.forward(store, &mut g, sum)?;
        }
        let logits = self.out.forward(store, &mut g, x)?;
        next.len += 1;
        Ok((g.data(logits).to_vec(), next))
    }
}
