//! Inference: greedy CTC decoding and length-normalized beam search with
//! conditional language-label decoding.

use crate::decoder::{DecoderState, TransformerDecoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::{decode_ids, extract_language, LanguageLabel, Vocab, BLANK_ID, SOS_EOS_ID};

/// Decoded candidate with its length-normalized log probability.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub token_ids: Vec<usize>,
    pub log_score: f64,
    pub language: Option<LanguageLabel>,
    pub text: String,
}

/// Best-path CTC decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy(logp: &[f64], t_len: usize, v: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_len {
        let row = &logp[t * v..(t + 1) * v];
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log probs"))
            .map(|(i, _)| i)
            .expect("non-empty row");
        if arg != prev && arg != BLANK_ID {
            out.push(arg);
        }
        prev = arg;
    }
    out
}

pub struct BeamSearchParams {
    pub beam: usize,
    pub max_len: usize,
    pub constrain_first: bool,
}

struct Beam {
    state: DecoderState,
    tokens: Vec<usize>,
    cum_log_prob: f64,
    /// Log softmax of the next-token logits given `tokens`.
    next_logp: Vec<f64>,
}

fn log_softmax_inplace(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

/// Normalized score: cumulative log prob over emitted tokens (sos excluded).
fn normalized(cum: f64, emitted: usize) -> f64 {
    cum / emitted.max(1) as f64
}

/// Length-normalized beam search over the grapheme decoder for one
/// utterance's encoder output `[S x d]`.
///
/// With `constrain_first` the first emitted token is restricted to the
/// language-label set. `max_len` bounds the total token count including
/// `sos`; hypotheses still alive at the limit are finalized as-is.
pub fn beam_search(
    decoder: &TransformerDecoder,
    store: &ParamStore,
    enc: &Tensor,
    vocab: &Vocab,
    params: &BeamSearchParams,
) -> Result<Vec<Hypothesis>> {
    if params.beam == 0 {
        return Err(Error::InvalidArg("beam must be >= 1".into()));
    }
    if params.max_len < 3 {
        return Err(Error::InvalidArg(format!(
            "max_len {} cannot fit sos + language label + eos",
            params.max_len
        )));
    }
    let v = decoder.cfg.vocab_size;
    let start = {
        let state = DecoderState::new(decoder.cfg.num_layers);
        let (mut logits, state) = decoder.step(store, &state, SOS_EOS_ID, enc)?;
        log_softmax_inplace(&mut logits);
        Beam {
            state,
            tokens: vec![SOS_EOS_ID],
            cum_log_prob: 0.0,
            next_logp: logits,
        }
    };
    let mut live = vec![start];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && live[0].tokens.len() < params.max_len {
        // candidates: (live index, token, cumulative, normalized)
        let mut candidates: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (bi, b) in live.iter().enumerate() {
            let emitted = b.tokens.len(); // after appending one more token
            let first_emission = b.tokens.len() == 1;
            for tok in 0..v {
                if tok == BLANK_ID {
                    continue;
                }
                if params.constrain_first && first_emission && !vocab.is_language_label(tok) {
                    continue;
                }
                let cum = b.cum_log_prob + b.next_logp[tok];
                candidates.push((bi, tok, cum, normalized(cum, emitted)));
            }
        }
        candidates.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .expect("finite scores")
                .then_with(|| live[a.0].tokens.cmp(&live[b.0].tokens))
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(params.beam);
        let mut next_live = Vec::with_capacity(params.beam);
        for (bi, tok, cum, norm) in candidates {
            let parent = &live[bi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if tok == SOS_EOS_ID {
                done.push(finalize(&tokens, norm, vocab)?);
            } else {
                let (mut logits, state) = decoder.step(store, &parent.state, tok, enc)?;
                log_softmax_inplace(&mut logits);
                next_live.push(Beam {
                    state,
                    tokens,
                    cum_log_prob: cum,
                    next_logp: logits,
                });
            }
        }
        live = next_live;
    }
    for b in live {
        let emitted = b.tokens.len() - 1;
        done.push(finalize(
            &b.tokens,
            normalized(b.cum_log_prob, emitted),
            vocab,
        )?);
    }
    done.sort_by(|a, b| {
        b.log_score
            .partial_cmp(&a.log_score)
            .expect("finite scores")
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    done.truncate(params.beam);
    if done.is_empty() {
        return Err(Error::Data("beam search produced no hypotheses".into()));
    }
    Ok(done)
}

fn finalize(tokens: &[usize], score: f64, vocab: &Vocab) -> Result<Hypothesis> {
    Ok(Hypothesis {
        token_ids: tokens.to_vec(),
        log_score: score,
        language: extract_language(tokens, vocab),
        text: decode_ids(tokens, vocab)?,
    })
}
