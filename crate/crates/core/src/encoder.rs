//! Conformer encoder: convolutional subsampling, sinusoidal positional
//! encoding, then N conformer blocks in macaron order.
//!
//! Batches are processed in packed form: the valid frames of every
//! utterance are concatenated row-wise and row-local ops (feed-forward,
//! norms) run on the whole pack, while attention and convolutions slice out
//! one utterance at a time. Padding therefore never enters the computation,
//! and batch-norm statistics automatically cover valid frames only.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::NUM_MEL_BINS;
use crate::graph::{Graph, Var};
use crate::layers::{
    positional_encoding, BatchNorm, ForwardCtx, LayerNorm, Linear, MultiHeadAttention,
};
use crate::params::{init_uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MIN_INPUT_FRAMES: usize = 11;
const FREQ_AFTER_SUBSAMPLE: usize = 9; // 40 -> 19 -> 9 under two stride-2 3x3 convs

#[derive(Debug, Clone, PartialEq)]
pub enum ConvNormKind {
    Batch,
    Layer,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_hidden: usize,
    pub conv_kernel: usize,
    pub conv_norm: ConvNormKind,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: 2,
            d_model: 64,
            num_heads: 4,
            ff_hidden: 128,
            conv_kernel: 15,
            conv_norm: ConvNormKind::Batch,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// Output frame count after the two stride-2 convolutions.
pub fn subsampled_len(l: usize) -> Result<usize> {
    if l < MIN_INPUT_FRAMES {
        return Err(Error::TooShortForSubsampling {
            frames: l,
            min: MIN_INPUT_FRAMES,
        });
    }
    let l1 = (l - 3) / 2 + 1;
    Ok((l1 - 3) / 2 + 1)
}

/// Zero-padded feature batch `[B x T_max x 40]`.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_utterances(utts: &[&Tensor]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut lengths = Vec::with_capacity(utts.len());
        let mut dim = 0;
        for u in utts {
            let (t, d) = u.dims2()?;
            lengths.push(t);
            dim = d;
        }
        let t_max = *lengths.iter().max().expect("non-empty");
        let mut data = vec![0.0; utts.len() * t_max * dim];
        for (i, u) in utts.iter().enumerate() {
            let t = lengths[i];
            data[i * t_max * dim..i * t_max * dim + t * dim].copy_from_slice(&u.data);
        }
        Ok(PaddedBatch {
            features: Tensor::new(vec![utts.len(), t_max, dim], data)?,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Valid rows of utterance `i` as an owned `[T_i x D]` tensor.
    pub fn utterance(&self, i: usize) -> Tensor {
        let t_max = self.features.shape[1];
        let d = self.features.shape[2];
        let t = self.lengths[i];
        let start = i * t_max * d;
        Tensor::new(vec![t, d], self.features.data[start..start + t * d].to_vec())
            .expect("slice matches shape")
    }

    /// Invariant check: every padded cell is zero.
    pub fn padding_is_zero(&self) -> bool {
        let t_max = self.features.shape[1];
        let d = self.features.shape[2];
        self.lengths.iter().enumerate().all(|(i, &t)| {
            self.features.data[i * t_max * d + t * d..(i + 1) * t_max * d]
                .iter()
                .all(|&v| v == 0.0)
        })
    }
}

/// Encoder output in padded form.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub hidden: Tensor,
    pub out_lengths: Vec<usize>,
}

/// Valid-row concatenation of a batch inside a graph.
pub struct PackedSeqs {
    pub var: Var,
    pub lens: Vec<usize>,
}

impl PackedSeqs {
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.lens.len() + 1);
        let mut acc = 0;
        off.push(0);
        for &l in &self.lens {
            acc += l;
            off.push(acc);
        }
        off
    }

    pub fn slice(&self, g: &mut Graph, i: usize) -> Result<Var> {
        let start: usize = self.lens[..i].iter().sum();
        g.slice_rows(self.var, start, self.lens[i])
    }
}

/// Two 3x3 stride-2 convolutions over (time x freq) with a swish between,
/// then a linear projection of the flattened freq/channel axes to d_model.
struct ConvSubsampler {
    k1: ParamId,
    b1: ParamId,
    k2: ParamId,
    b2: ParamId,
    proj: Linear,
    d_model: usize,
}

impl ConvSubsampler {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_model: usize) -> Self {
        let k1 = store.add(
            "enc/subsample/conv1/w",
            init_uniform_fan_in(rng, vec![3, 3, 1, d_model], 9),
            true,
        );
        let b1 = store.add("enc/subsample/conv1/b", Tensor::zeros(vec![d_model]), true);
        let k2 = store.add(
            "enc/subsample/conv2/w",
            init_uniform_fan_in(rng, vec![3, 3, d_model, d_model], 9 * d_model),
            true,
        );
        let b2 = store.add("enc/subsample/conv2/b", Tensor::zeros(vec![d_model]), true);
        let proj = Linear::new(
            store,
            rng,
            "enc/subsample/proj",
            FREQ_AFTER_SUBSAMPLE * d_model,
            d_model,
        );
        ConvSubsampler {
            k1,
            b1,
            k2,
            b2,
            proj,
            d_model,
        }
    }

    /// `[T x 40] -> [T'' x d_model]`.
    fn forward(&self, store: &ParamStore, g: &mut Graph, feats: Var) -> Result<Var> {
        let (t, _) = {
            let s = g.shape(feats);
            (s[0], s[1])
        };
        subsampled_len(t)?;
        let x = g.reshape(feats, vec![t, NUM_MEL_BINS, 1])?;
        let k1 = g.param(store, self.k1);
        let y = g.conv2d_stride2(x, k1)?;
        let (t1, f1) = {
            let s = g.shape(y);
            (s[0], s[1])
        };
        let y = g.reshape(y, vec![t1 * f1, self.d_model])?;
        let b1 = g.param(store, self.b1);
        let y = g.add_row_vec(y, b1)?;
        let y = g.swish(y);
        let y = g.reshape(y, vec![t1, f1, self.d_model])?;
        let k2 = g.param(store, self.k2);
        let y = g.conv2d_stride2(y, k2)?;
        let (t2, f2) = {
            let s = g.shape(y);
            (s[0], s[1])
        };
        let y = g.reshape(y, vec![t2 * f2, self.d_model])?;
        let b2 = g.param(store, self.b2);
        let y = g.add_row_vec(y, b2)?;
        let y = g.reshape(y, vec![t2, f2 * self.d_model])?;
        self.proj.forward(store, g, y)
    }
}

/// Macaron half-step feed-forward: LN, expand, swish, project back.
struct FeedForward {
    ln: LayerNorm,
    w1: Linear,
    w2: Linear,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            ln: LayerNorm::new(store, &format!("{name}/ln"), d_model),
            w1: Linear::new(store, rng, &format!("{name}/w1"), d_model, hidden),
            w2: Linear::new(store, rng, &format!("{name}/w2"), hidden, d_model),
        }
    }

    fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.ln.forward(store, g, x)?;
        let y = self.w1.forward(store, g, y)?;
        let y = g.swish(y);
        let y = ctx.dropout(g, y);
        let y = self.w2.forward(store, g, y)?;
        Ok(ctx.dropout(g, y))
    }
}

enum ConvNorm {
    Batch(BatchNorm),
    Layer(LayerNorm),
}

/// LN -> pointwise expand x2 -> GLU -> depthwise conv -> norm -> swish ->
/// pointwise project.
struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw: ParamId,
    norm: ConvNorm,
    pw2: Linear,
}

impl ConvModule {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let d = cfg.d_model;
        let ln = LayerNorm::new(store, &format!("{name}/ln"), d);
        let pw1 = Linear::new(store, rng, &format!("{name}/pw1"), d, 2 * d);
        let dw = store.add(
            &format!("{name}/dw/w"),
            init_uniform_fan_in(rng, vec![cfg.conv_kernel, d], cfg.conv_kernel),
            true,
        );
        let norm = match cfg.conv_norm {
            ConvNormKind::Batch => ConvNorm::Batch(BatchNorm::new(store, &format!("{name}/norm"), d)),
            ConvNormKind::Layer => ConvNorm::Layer(LayerNorm::new(store, &format!("{name}/norm"), d)),
        };
        let pw2 = Linear::new(store, rng, &format!("{name}/pw2"), d, d);
        ConvModule {
            ln,
            pw1,
            dw,
            norm,
            pw2,
        }
    }

    fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: &PackedSeqs,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let y = self.ln.forward(store, g, x.var)?;
        let y = self.pw1.forward(store, g, y)?;
        let y = g.glu(y)?;
        // depthwise convolution must not bleed across utterance boundaries
        let packed_y = PackedSeqs {
            var: y,
            lens: x.lens.clone(),
        };
        let kernel = g.param(store, self.dw);
        let mut parts = Vec::with_capacity(x.lens.len());
        for i in 0..x.lens.len() {
            let xi = packed_y.slice(g, i)?;
            parts.push(g.depthwise_conv1d(xi, kernel)?);
        }
        let y = g.concat_rows(&parts)?;
        let y = match &self.norm {
            ConvNorm::Batch(bn) => bn.forward(store, g, y, ctx.train, ctx.bn_updates)?,
            ConvNorm::Layer(ln) => ln.forward(store, g, y)?,
        };
        let y = g.swish(y);
        let y = self.pw2.forward(store, g, y)?;
        Ok(ctx.dropout(g, y))
    }
}

/// One conformer block in macaron order with a final layer norm.
struct ConformerBlock {
    ffn1: FeedForward,
    mhsa_ln: LayerNorm,
    mhsa: MultiHeadAttention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_ln: LayerNorm,
}

impl ConformerBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        Ok(ConformerBlock {
            ffn1: FeedForward::new(store, rng, &format!("{name}/ffn1"), cfg.d_model, cfg.ff_hidden),
            mhsa_ln: LayerNorm::new(store, &format!("{name}/mhsa/ln"), cfg.d_model),
            mhsa: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}/mhsa/att"),
                cfg.d_model,
                cfg.num_heads,
            )?,
            conv: ConvModule::new(store, rng, &format!("{name}/conv"), cfg),
            ffn2: FeedForward::new(store, rng, &format!("{name}/ffn2"), cfg.d_model, cfg.ff_hidden),
            final_ln: LayerNorm::new(store, &format!("{name}/final_ln"), cfg.d_model),
        })
    }

    fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: PackedSeqs,
        ctx: &mut ForwardCtx,
    ) -> Result<PackedSeqs> {
        let lens = x.lens.clone();
        // x + 1/2 FFN(x)
        let f = self.ffn1.forward(store, g, x.var, ctx)?;
        let f = g.scale(f, 0.5);
        let mut h = g.add(x.var, f)?;
        // x + MHSA(LN(x)), attention within each utterance
        let normed = self.mhsa_ln.forward(store, g, h)?;
        let packed = PackedSeqs {
            var: normed,
            lens: lens.clone(),
        };
        let mut parts = Vec::with_capacity(lens.len());
        for i in 0..lens.len() {
            let xi = packed.slice(g, i)?;
            let a = self.mhsa.forward(store, g, xi, xi, None)?;
            parts.push(a);
        }
        let att = g.concat_rows(&parts)?;
        let att = ctx.dropout(g, att);
        h = g.add(h, att)?;
        // x + Conv(x)
        let packed = PackedSeqs {
            var: h,
            lens: lens.clone(),
        };
        let c = self.conv.forward(store, g, &packed, ctx)?;
        h = g.add(h, c)?;
        // x + 1/2 FFN(x)
        let f = self.ffn2.forward(store, g, h, ctx)?;
        let f = g.scale(f, 0.5);
        h = g.add(h, f)?;
        let out = self.final_ln.forward(store, g, h)?;
        Ok(PackedSeqs { var: out, lens })
    }
}

/// The full encoder: subsampling, positional encoding, conformer blocks.
pub struct ConformerEncoder {
    pub cfg: EncoderConfig,
    subsample: ConvSubsampler,
    blocks: Vec<ConformerBlock>,
}

impl ConformerEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let subsample = ConvSubsampler::new(store, rng, cfg.d_model);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(ConformerBlock::new(store, rng, &format!("enc/block{i}"), &cfg)?);
        }
        Ok(ConformerEncoder {
            cfg,
            subsample,
            blocks,
        })
    }

    /// Graph-level forward over per-utterance `[T_i x 40]` feature tensors.
    pub fn forward_packed(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        feats: &[&Tensor],
        ctx: &mut ForwardCtx,
    ) -> Result<PackedSeqs> {
        if feats.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(feats.len());
        let mut lens = Vec::with_capacity(feats.len());
        for f in feats {
            let v = g.input(f);
            let sub = self.subsample.forward(store, g, v)?;
            let t2 = g.shape(sub)[0];
            let pe = positional_encoding(0, t2, self.cfg.d_model);
            let pe = g.input(&pe);
            let sub = g.add(sub, pe)?;
            lens.push(t2);
            parts.push(sub);
        }
        let var = g.concat_rows(&parts)?;
        let mut packed = PackedSeqs { var, lens };
        for block in &self.blocks {
            packed = block.forward(store, g, packed, ctx)?;
        }
        Ok(packed)
    }

    /// Inference-mode convenience over a [`PaddedBatch`].
    pub fn encode(&self, store: &ParamStore, batch: &PaddedBatch) -> Result<EncodedBatch> {
        use rand::SeedableRng;
        let mut g = Graph::new();
        let mut bn_updates = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            train: false,
            dropout: 0.0,
            bn_updates: &mut bn_updates,
            rng: &mut rng,
        };
        let utts: Vec<Tensor> = (0..batch.batch_size()).map(|i| batch.utterance(i)).collect();
        let refs: Vec<&Tensor> = utts.iter().collect();
        let packed = self.forward_packed(store, &mut g, &refs, &mut ctx)?;
        let d = self.cfg.d_model;
        let t_max = *packed.lens.iter().max().expect("non-empty");
        let mut hidden = vec![0.0; packed.lens.len() * t_max * d];
        let data = g.data(packed.var);
        let offsets = packed.offsets();
        for (i, &t) in packed.lens.iter().enumerate() {
            hidden[i * t_max * d..i * t_max * d + t * d]
                .copy_from_slice(&data[offsets[i] * d..offsets[i + 1] * d]);
        }
        Ok(EncodedBatch {
            hidden: Tensor::new(vec![packed.lens.len(), t_max, d], hidden)?,
            out_lengths: packed.lens,
        })
    }
}
