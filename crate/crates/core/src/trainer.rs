//! Training driver: joint CTC-attention multitask optimization with a
//! reduce-on-plateau learning-rate schedule and best-validation
//! checkpointing. Fully deterministic under a fixed seed.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    load_corpus, load_corpus_speed_perturbed, load_manifest, make_batches, save_manifest,
    split_train_valid, LoadedUtterance, Manifest, SplitSpec,
};
use crate::error::{Error, Result};
use crate::frontend::{spec_augment, SpecAugmentConfig};
use crate::graph::Graph;
use crate::layers::{ForwardCtx, BN_MOMENTUM};
use crate::loss::multitask_loss;
use crate::model::{build_model, DualDecoderModel, TrainItem};
use crate::optim::{check_gradients, AdamState, GradCheckReport};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_history: Vec<f64>,
    pub ctc_skipped_total: usize,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Train per the run configuration, writing into `out_dir`:
/// `best.ckpt`, `train_log.csv`, `config.resolved`, the vocab files, and
/// `valid.tsv` when the validation set was split off the training manifest.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let train_manifest_path = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train_manifest is required".into()))?;
    let manifest = load_manifest(train_manifest_path)?.filter_languages(&cfg.training.langs);
    if manifest.rows.is_empty() {
        return Err(Error::Data("no training utterances after filtering".into()));
    }
    let (train_manifest, valid_manifest) = match &cfg.data.valid_manifest {
        Some(p) => (
            manifest,
            load_manifest(p)?.filter_languages(&cfg.training.langs),
        ),
        None => {
            let (t, v) = split_train_valid(
                &manifest,
                SplitSpec::Fraction(cfg.data.valid_fraction),
                cfg.training.seed,
            )?;
            (t, v)
        }
    };
    save_manifest(&out_dir.join("valid.tsv"), &valid_manifest.with_absolute_paths())?;

    let (pv, gv) = train_manifest.build_vocabs()?;
    pv.save(&out_dir.join("phoneme.vocab"))?;
    gv.save(&out_dir.join("grapheme.vocab"))?;

    let (train_corpus, skipped_short) =
        load_corpus_speed_perturbed(&train_manifest, &gv, &pv, cfg.training.speed_perturb)?;
    let (valid_corpus, _) = load_corpus(&valid_manifest, &gv, &pv)?;
    if train_corpus.is_empty() || valid_corpus.is_empty() {
        return Err(Error::Data("empty train or validation corpus".into()));
    }
    if skipped_short > 0 {
        eprintln!("warning: skipped {skipped_short} utterances shorter than the subsampling minimum");
    }

    let (mut store, model) = build_model(&cfg.model, pv.size(), gv.size(), cfg.training.seed)?;
    register_norm_stats(&mut store, &train_manifest);
    let mut adam = AdamState::new(&store, cfg.optimizer.learning_rate);

    let mut log = String::from("epoch,step,l_ctc,l_pr,l_gr,l_total,lr\n");
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_bytes: Option<Vec<u8>> = None;
    let mut bad_epochs = 0usize;
    let mut ctc_skipped_total = 0usize;
    let mut val_history = Vec::with_capacity(cfg.training.epochs);

    for epoch in 1..=cfg.training.epochs {
        let batches = make_batches(
            &train_corpus,
            cfg.training.batch_size,
            cfg.training.seed ^ (epoch as u64).wrapping_mul(0x517C_C1B7_2722_0A95),
        );
        for (step, batch) in batches.iter().enumerate() {
            let augmented = augment_batch(cfg, &train_corpus, &batch.indices, epoch);
            let items: Vec<TrainItem> = augmented
                .iter()
                .zip(&batch.indices)
                .map(|(feats, &i)| TrainItem {
                    feats,
                    bundle: &train_corpus[i].bundle,
                })
                .collect();
            let mut g = Graph::new();
            let mut bn_updates = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.training.seed ^ ((epoch * 10_007 + step) as u64),
            );
            let mut ctx = ForwardCtx {
                train: true,
                dropout: cfg.model.encoder.dropout,
                bn_updates: &mut bn_updates,
                rng: &mut rng,
            };
            let out = model.forward_losses(&store, &mut g, &items, &mut ctx)?;
            ctc_skipped_total += out.ctc_skipped;
            let (total, bd) = multitask_loss(&mut g, out.l_ctc, out.l_gr, out.l_pr, &cfg.loss)?;
            if !bd.l_total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch} step {step}: \
                     ctc {} pr {} gr {}",
                    bd.l_ctc, bd.l_pr, bd.l_gr
                )));
            }
            g.backward(total)?;
            let grads = g.param_grads();
            drop(g);
            adam.step(&mut store, &grads)?;
            for u in &bn_updates {
                u.apply(&mut store, BN_MOMENTUM);
            }
            log.push_str(&format!(
                "{epoch},{step},{:.6},{:.6},{:.6},{:.6},{:.8}\n",
                bd.l_ctc, bd.l_pr, bd.l_gr, bd.l_total, adam.learning_rate
            ));
        }

        let val = validation_loss(cfg, &store, &model, &valid_corpus)?;
        val_history.push(val);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            bad_epochs = 0;
            let mut buf = Vec::new();
            checkpoint::write_container(
                &mut buf,
                store.iter().map(|(_, e)| (e.name.as_str(), &e.tensor)),
            )?;
            best_bytes = Some(buf);
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.optimizer.plateau_patience {
                adam.learning_rate =
                    (adam.learning_rate * cfg.optimizer.plateau_factor).max(cfg.optimizer.min_learning_rate);
                bad_epochs = 0;
            }
        }
    }

    let checkpoint_path = out_dir.join("best.ckpt");
    std::fs::write(
        &checkpoint_path,
        best_bytes.ok_or_else(|| Error::Data("no epochs ran".into()))?,
    )?;
    let log_path = out_dir.join("train_log.csv");
    std::fs::write(&log_path, log)?;
    std::fs::write(out_dir.join("config.resolved"), cfg.to_config_string())?;
    Ok(TrainSummary {
        epochs_run: cfg.training.epochs,
        best_epoch,
        best_val_loss: best_val,
        val_history,
        ctc_skipped_total,
        checkpoint_path,
        log_path,
    })
}

/// Feature statistics travel with the checkpoint so `decode` can normalize
/// single utterances without the manifest.
fn register_norm_stats(store: &mut ParamStore, manifest: &Manifest) {
    let dim = crate::frontend::NUM_MEL_BINS;
    let mean = manifest.mean.clone().unwrap_or_else(|| vec![0.0; dim]);
    let std = manifest.std.clone().unwrap_or_else(|| vec![1.0; dim]);
    store.add(
        "norm/mean",
        Tensor::new(vec![dim], mean).expect("stat length"),
        false,
    );
    store.add(
        "norm/std",
        Tensor::new(vec![dim], std).expect("stat length"),
        false,
    );
}

/// Rebuild a trained model from a checkpoint and its sibling vocab files.
pub fn load_trained_model(
    cfg: &RunConfig,
    checkpoint_path: &Path,
) -> Result<(ParamStore, DualDecoderModel, Vocab, Vocab)> {
    let dir = checkpoint_path
        .parent()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no parent directory".into()))?;
    let pv = Vocab::load(&dir.join("phoneme.vocab"))?;
    let gv = Vocab::load(&dir.join("grapheme.vocab"))?;
    let (mut store, model) = build_model(&cfg.model, pv.size(), gv.size(), cfg.training.seed)?;
    let dim = crate::frontend::NUM_MEL_BINS;
    store.add("norm/mean", Tensor::zeros(vec![dim]), false);
    store.add(
        "norm/std",
        Tensor::new(vec![dim], vec![1.0; dim]).expect("stat length"),
        false,
    );
    checkpoint::load_params_into(checkpoint_path, &mut store).map_err(|e| {
        Error::Checkpoint(format!("checkpoint/vocab mismatch or corrupt file: {e}"))
    })?;
    Ok((store, model, pv, gv))
}

fn augment_batch(
    cfg: &RunConfig,
    corpus: &[LoadedUtterance],
    indices: &[usize],
    epoch: usize,
) -> Vec<Tensor> {
    indices
        .iter()
        .map(|&i| {
            if cfg.training.spec_augment {
                let sa = SpecAugmentConfig {
                    num_freq_masks: cfg.training.freq_masks,
                    max_freq_width: cfg.training.freq_mask_width,
                    num_time_masks: cfg.training.time_masks,
                    max_time_width: cfg.training.time_mask_width,
                    seed: cfg
                        .training
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((epoch * 1_000_003 + i) as u64),
                };
                spec_augment(&corpus[i].feats, &sa).unwrap_or_else(|_| corpus[i].feats.clone())
            } else {
                corpus[i].feats.clone()
            }
        })
        .collect()
}

/// Eval-mode multitask loss over a corpus, weighted by utterance count.
pub fn validation_loss(
    cfg: &RunConfig,
    store: &ParamStore,
    model: &DualDecoderModel,
    corpus: &[LoadedUtterance],
) -> Result<f64> {
    let batches = make_batches(corpus, cfg.training.batch_size, 0);
    let mut total = 0.0;
    let mut n = 0usize;
    for batch in &batches {
        let items: Vec<TrainItem> = batch
            .indices
            .iter()
            .map(|&i| TrainItem {
                feats: &corpus[i].feats,
                bundle: &corpus[i].bundle,
            })
            .collect();
        let mut g = Graph::new();
        let mut bn_updates = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut bn_updates, &mut rng);
        let out = model.forward_losses(store, &mut g, &items, &mut ctx)?;
        let (_, bd) = multitask_loss(&mut g, out.l_ctc, out.l_gr, out.l_pr, &cfg.loss)?;
        total += bd.l_total * items.len() as f64;
        n += items.len();
    }
    if n == 0 {
        return Err(Error::Data("empty validation corpus".into()));
    }
    Ok(total / n as f64)
}

/// Full-model finite-difference gradient check on a seeded synthetic
/// micro-batch. Dropout is forced off so the loss closure is deterministic.
pub fn cmd_gradcheck(cfg: &RunConfig, seed: u64) -> Result<GradCheckReport> {
    let (pv_size, gv_size) = (10usize, 14usize);
    let (mut store, model) = build_model(&cfg.model, pv_size, gv_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut batch = Vec::new();
    for len in [16usize, 12] {
        let data: Vec<f64> = (0..len * 40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = Tensor::new(vec![len, 40], data)?;
        let n_chars = rng.gen_range(1..=2usize);
        let chars: Vec<usize> = (0..n_chars).map(|_| rng.gen_range(7..gv_size)).collect();
        let mut grapheme_ids = vec![crate::vocab::SOS_EOS_ID, 4];
        grapheme_ids.extend(&chars);
        grapheme_ids.push(crate::vocab::SOS_EOS_ID);
        let phones: Vec<usize> = (0..2).map(|_| rng.gen_range(4..pv_size)).collect();
        let mut phoneme_ids = vec![crate::vocab::SOS_EOS_ID];
        phoneme_ids.extend(&phones);
        phoneme_ids.push(crate::vocab::SOS_EOS_ID);
        batch.push((
            feats,
            crate::vocab::TargetBundle {
                grapheme_ids,
                ctc_ids: chars,
                phoneme_ids,
                oov_count: 0,
            },
        ));
    }
    let loss_cfg = cfg.loss;
    check_gradients(
        &mut store,
        |s, g| {
            let items: Vec<TrainItem> = batch
                .iter()
                .map(|(f, b)| TrainItem { feats: f, bundle: b })
                .collect();
            let mut bn_updates = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx {
                train: true,
                dropout: 0.0,
                bn_updates: &mut bn_updates,
                rng: &mut rng,
            };
            let out = model.forward_losses(s, g, &items, &mut ctx)?;
            let (total, _) = multitask_loss(g, out.l_ctc, out.l_gr, out.l_pr, &loss_cfg)?;
            Ok(total)
        },
        1e-5,
        1e-4,
        4,
        seed,
    )
}

/// Collapse a per-tensor gradient-check report to per-group maxima
/// (`enc/block0`, `dec_grp`, ...).
pub fn group_report(report: &GradCheckReport) -> Vec<(String, f64)> {
    let mut groups: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    for e in &report.entries {
        let group = e
            .name
            .split('/')
            .take(2)
            .collect::<Vec<_>>()
            .join("/");
        let slot = groups.entry(group).or_insert(0.0);
        *slot = slot.max(e.max_rel_err);
    }
    groups.into_iter().collect()
}
