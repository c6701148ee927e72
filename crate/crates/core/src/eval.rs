//! Evaluation and decoding drivers: per-language score reports, single
//! utterance decoding, and the alpha-sweep harness.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_corpus, load_manifest, LoadedUtterance};
use crate::decoding::{beam_search, BeamSearchParams, Hypothesis};
use crate::error::{Error, Result};
use crate::frontend::{compute_log_mel, read_wav, NUM_MEL_BINS};
use crate::graph::Graph;
use crate::layers::ForwardCtx;
use crate::metrics::{ScoreReport, ScoredUtterance};
use crate::model::DualDecoderModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{self, load_trained_model};
use crate::vocab::Vocab;

/// Encoder output for a single utterance, `[S x d]`, eval mode.
pub fn encode_utterance(
    store: &ParamStore,
    model: &DualDecoderModel,
    feats: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut bn = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx::eval(&mut bn, &mut rng);
    let packed = model.encoder.forward_packed(store, &mut g, &[feats], &mut ctx)?;
    Tensor::new(
        vec![packed.lens[0], model.cfg.encoder.d_model],
        g.data(packed.var).to_vec(),
    )
}

/// Beam-search the grapheme decoder for one utterance.
pub fn decode_utterance(
    store: &ParamStore,
    model: &DualDecoderModel,
    gv: &Vocab,
    feats: &Tensor,
    params: &BeamSearchParams,
) -> Result<Hypothesis> {
    let enc = encode_utterance(store, model, feats)?;
    let hyps = beam_search(&model.grp_dec, store, &enc, gv, params)?;
    Ok(hyps.into_iter().next().expect("beam search returns at least one"))
}

/// Decode and score a corpus; utterances are processed in utt_id order.
pub fn score_corpus(
    store: &ParamStore,
    model: &DualDecoderModel,
    gv: &Vocab,
    corpus: &[LoadedUtterance],
    params: &BeamSearchParams,
) -> Result<(ScoreReport, Vec<ScoredUtterance>)> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus[a].utt_id.cmp(&corpus[b].utt_id));
    let mut scored = Vec::with_capacity(corpus.len());
    for i in order {
        let u = &corpus[i];
        let hyp = decode_utterance(store, model, gv, &u.feats, params)?;
        scored.push(ScoredUtterance {
            utt_id: u.utt_id.clone(),
            language: u.language.clone(),
            reference: u.text.clone(),
            hypothesis: hyp.text.clone(),
            hyp_language: hyp.language.clone(),
            log_score: hyp.log_score,
        });
    }
    let report = ScoreReport::from_utterances(&scored)?;
    Ok((report, scored))
}

fn hypotheses_tsv(scored: &[ScoredUtterance]) -> String {
    let mut out = String::new();
    for s in scored {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\n",
            s.utt_id,
            s.hyp_language
                .as_ref()
                .map(|l| l.tag().to_string())
                .unwrap_or_else(|| "-".to_string()),
            s.hypothesis,
            s.log_score
        ));
    }
    out
}

/// Evaluate a checkpoint against a manifest, writing `scores.csv` and
/// `hypotheses.tsv` into `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    manifest_path: &Path,
    beam: usize,
    out_dir: &Path,
) -> Result<ScoreReport> {
    let (store, model, pv, gv) = load_trained_model(cfg, checkpoint_path)?;
    let manifest = load_manifest(manifest_path)?.filter_languages(&cfg.training.langs);
    let (corpus, _) = load_corpus(&manifest, &gv, &pv)?;
    if corpus.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let params = BeamSearchParams {
        beam,
        max_len: cfg.decode.max_len,
        constrain_first: cfg.decode.constrain_first,
    };
    let (report, scored) = score_corpus(&store, &model, &gv, &corpus, &params)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("scores.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("hypotheses.tsv"), hypotheses_tsv(&scored))?;
    Ok(report)
}

/// Decode one WAV or feature-container file; returns the hypothesis line
/// `utt_id, language, text, log_score` (tab separated).
pub fn cmd_decode(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    input: &Path,
    beam: usize,
) -> Result<String> {
    let (store, model, _pv, gv) = load_trained_model(cfg, checkpoint_path)?;
    let feats = if input.extension().is_some_and(|e| e == "wav") {
        compute_log_mel(&read_wav(input)?)?
    } else {
        let tensors = checkpoint::read_container(std::io::BufReader::new(
            std::fs::File::open(input)?,
        ))?;
        tensors
            .into_iter()
            .next()
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("{}: empty feature container", input.display())))?
    };
    // normalize with the statistics stored in the checkpoint
    let mean = store
        .lookup("norm/mean")
        .map(|id| store.get(id).data.clone())
        .unwrap_or_else(|| vec![0.0; NUM_MEL_BINS]);
    let std = store
        .lookup("norm/std")
        .map(|id| store.get(id).data.clone())
        .unwrap_or_else(|| vec![1.0; NUM_MEL_BINS]);
    let mut feats = feats;
    for row in feats.data.chunks_exact_mut(NUM_MEL_BINS) {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[d]) / std[d].max(1e-8);
        }
    }
    let params = BeamSearchParams {
        beam,
        max_len: cfg.decode.max_len,
        constrain_first: cfg.decode.constrain_first,
    };
    let hyp = decode_utterance(&store, &model, &gv, &feats, &params)?;
    let utt_id = input
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "utt".to_string());
    Ok(format!(
        "{utt_id}\t{}\t{}\t{:.6}",
        hyp.language
            .as_ref()
            .map(|l| l.tag().to_string())
            .unwrap_or_else(|| "-".to_string()),
        hyp.text,
        hyp.log_score
    ))
}

/// Train and evaluate one model per alpha in `{0.0, 0.1, ..., 1.0}` with
/// everything else fixed (same seed), writing `sweep.csv` with the columns
/// `alpha,lang,wer,cer` plus per-language best-alpha lines on stdout.
pub fn cmd_alpha_sweep(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("alpha,lang,wer,cer\n");
    let mut results: Vec<(f64, ScoreReport)> = Vec::new();
    for i in 0..=10u32 {
        let alpha = i as f64 / 10.0;
        let mut run_cfg = cfg.clone();
        run_cfg.loss.alpha = alpha;
        let run_dir = out_dir.join(format!("alpha_{:.1}", alpha));
        let summary = trainer::train(&run_cfg, &run_dir)?;
        let report = cmd_eval(
            &run_cfg,
            &summary.checkpoint_path,
            &run_dir.join("valid.tsv"),
            run_cfg.decode.beam,
            &run_dir,
        )?;
        for row in &report.rows {
            csv.push_str(&format!(
                "{alpha:.1},{},{:.4},{:.4}\n",
                row.lang, row.wer, row.cer
            ));
        }
        results.push((alpha, report));
    }
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, &csv)?;

    // summary: best alpha per language by WER
    let langs: Vec<String> = results[0].1.rows.iter().map(|r| r.lang.clone()).collect();
    for lang in langs {
        let best = results
            .iter()
            .filter_map(|(a, rep)| {
                rep.rows
                    .iter()
                    .find(|r| r.lang == lang)
                    .map(|r| (*a, r.wer))
            })
            .min_by(|x, y| x.1.partial_cmp(&y.1).expect("finite WER"))
            .expect("language present in all runs");
        println!("{lang}: best WER {:.4}% at alpha {:.1}", best.1, best.0);
    }
    Ok(path)
}
