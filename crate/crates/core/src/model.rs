//! The full network: shared conformer encoder, CTC projection over
//! graphemes, and the two parallel decoders (PHN-DEC auxiliary, GRP-DEC
//! with language-label-first targets).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecoderConfig, TransformerDecoder};
use crate::encoder::{ConformerEncoder, EncoderConfig, PackedSeqs};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ForwardCtx, Linear};
use crate::loss::{ctc_loss_op, ctc_required_len, seq_cross_entropy};
use crate::params::{ParamStore, ParamId};
use crate::tensor::Tensor;
use crate::vocab::TargetBundle;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dec_layers: usize,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            dec_layers: 1,
            label_smoothing: 0.0,
        }
    }
}

/// One utterance's training inputs.
pub struct TrainItem<'a> {
    pub feats: &'a Tensor,
    pub bundle: &'a TargetBundle,
}

/// Loss nodes for one batch, before multitask combination.
pub struct ForwardOutput {
    pub l_ctc: Var,
    pub l_gr: Var,
    pub l_pr: Var,
    /// Utterances dropped from the CTC term because their target cannot be
    /// aligned to the subsampled frame count.
    pub ctc_skipped: usize,
}

pub struct DualDecoderModel {
    pub cfg: ModelConfig,
    pub encoder: ConformerEncoder,
    pub phn_dec: TransformerDecoder,
    pub grp_dec: TransformerDecoder,
    pub ctc_proj: Linear,
}

impl DualDecoderModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: ModelConfig,
        phoneme_vocab_size: usize,
        grapheme_vocab_size: usize,
    ) -> Result<Self> {
        let encoder = ConformerEncoder::new(store, rng, cfg.encoder.clone())?;
        let dec_cfg = |vocab_size: usize| DecoderConfig {
            num_layers: cfg.dec_layers,
            d_model: cfg.encoder.d_model,
            num_heads: cfg.encoder.num_heads,
            ff_hidden: cfg.encoder.ff_hidden,
            vocab_size,
            dropout: cfg.encoder.dropout,
        };
        let phn_dec = TransformerDecoder::new(store, rng, "dec_phn", dec_cfg(phoneme_vocab_size))?;
        let grp_dec = TransformerDecoder::new(store, rng, "dec_grp", dec_cfg(grapheme_vocab_size))?;
        let ctc_proj = Linear::new(store, rng, "ctc/proj", cfg.encoder.d_model, grapheme_vocab_size);
        Ok(DualDecoderModel {
            cfg,
            encoder,
            phn_dec,
            grp_dec,
            ctc_proj,
        })
    }

    /// Encoder output plus the three per-batch loss nodes.
    pub fn forward_losses(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        items: &[TrainItem],
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardOutput> {
        if items.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let feats: Vec<&Tensor> = items.iter().map(|it| it.feats).collect();
        let enc = self.encoder.forward_packed(store, g, &feats, ctx)?;

        let l_ctc_pair = self.ctc_branch(store, g, &enc, items)?;
        let l_gr = self.attention_branch(store, g, &enc, items, Head::Grapheme, ctx)?;
        let l_pr = self.attention_branch(store, g, &enc, items, Head::Phoneme, ctx)?;
        Ok(ForwardOutput {
            l_ctc: l_ctc_pair.0,
            l_gr,
            l_pr,
            ctc_skipped: l_ctc_pair.1,
        })
    }

    /// Per-utterance CTC over the grapheme inventory, batch-mean reduction.
    fn ctc_branch(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        enc: &PackedSeqs,
        items: &[TrainItem],
    ) -> Result<(Var, usize)> {
        let logits = self.ctc_proj.forward(store, g, enc.var)?;
        let logp = g.log_softmax(logits, 1)?;
        let packed = PackedSeqs {
            var: logp,
            lens: enc.lens.clone(),
        };
        let mut terms = Vec::new();
        let mut skipped = 0;
        for (i, item) in items.iter().enumerate() {
            if ctc_required_len(&item.bundle.ctc_ids) > enc.lens[i] {
                skipped += 1;
                continue;
            }
            let rows = packed.slice(g, i)?;
            terms.push(ctc_loss_op(g, rows, &item.bundle.ctc_ids)?);
        }
        if terms.is_empty() {
            return Ok((g.scalar(0.0), skipped));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok((g.scale(acc, 1.0 / terms.len() as f64), skipped))
    }

    /// Teacher-forced cross entropy for one decoder, mean over all target
    /// positions in the batch.
    fn attention_branch(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        enc: &PackedSeqs,
        items: &[TrainItem],
        head: Head,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let dec = match head {
            Head::Grapheme => &self.grp_dec,
            Head::Phoneme => &self.phn_dec,
        };
        let mut logit_parts = Vec::with_capacity(items.len());
        let mut targets = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let ids = match head {
                Head::Grapheme => &item.bundle.grapheme_ids,
                Head::Phoneme => &item.bundle.phoneme_ids,
            };
            if ids.len() < 2 {
                return Err(Error::Data(
                    "target must contain at least sos and eos".into(),
                ));
            }
            let input = &ids[..ids.len() - 1];
            let enc_i = enc.slice(g, i)?;
            logit_parts.push(dec.forward(store, g, input, enc_i, ctx)?);
            targets.extend_from_slice(&ids[1..]);
        }
        let logits = g.concat_rows(&logit_parts)?;
        seq_cross_entropy(g, logits, &targets, None, self.cfg.label_smoothing)
    }

    /// Shape compatibility between this model's heads and vocab sizes.
    pub fn validate_vocab_sizes(
        &self,
        phoneme_vocab_size: usize,
        grapheme_vocab_size: usize,
    ) -> Result<()> {
        if self.phn_dec.cfg.vocab_size != phoneme_vocab_size
            || self.grp_dec.cfg.vocab_size != grapheme_vocab_size
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint was built for vocab sizes {}/{}, got {}/{}",
                self.phn_dec.cfg.vocab_size,
                self.grp_dec.cfg.vocab_size,
                phoneme_vocab_size,
                grapheme_vocab_size
            )));
        }
        Ok(())
    }

    /// Ids of all parameters belonging to one decoder, for freeze checks.
    pub fn decoder_param_ids(&self, store: &ParamStore, prefix: &str) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, e)| e.name.starts_with(prefix) && e.trainable)
            .map(|(id, _)| id)
            .collect()
    }
}

enum Head {
    Grapheme,
    Phoneme,
}

/// Deterministic model construction from a seed.
pub fn build_model(
    cfg: &ModelConfig,
    phoneme_vocab_size: usize,
    grapheme_vocab_size: usize,
    seed: u64,
) -> Result<(ParamStore, DualDecoderModel)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DualDecoderModel::new(
        &mut store,
        &mut rng,
        cfg.clone(),
        phoneme_vocab_size,
        grapheme_vocab_size,
    )?;
    Ok((store, model))
}
