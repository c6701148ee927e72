//! Synthetic multilingual corpora, manifest I/O, and batching.
//!
//! The synthetic generator stands in for the license-gated challenge
//! corpus: a shared phone inventory (plus one pause phone that maps to the
//! space token) with per-language disjoint grapheme alphabets and an
//! injective phone-to-grapheme map per language, so the Bayes-optimal WER
//! at zero noise is 0.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::encoder::{subsampled_len, PaddedBatch};
use crate::error::{Error, Result};
use crate::frontend::{self, compute_log_mel, Waveform, NUM_MEL_BINS, SAMPLE_RATE};
use crate::tensor::Tensor;
use crate::vocab::{encode_targets, LanguageLabel, TargetBundle, Vocab, VocabBuilder};

/// Letter pool for the disjoint per-language alphabets.
const LETTER_POOL: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z', 'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J',
    'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z', '0', '1',
    '2', '3', '4', '5', '6', '7', '8', '9',
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_languages: usize,
    /// Content phones shared across languages (a pause phone is added on
    /// top and maps to the space token in every language).
    pub phones_shared: usize,
    /// Grapheme inventory size per language; must be >= `phones_shared` so
    /// the per-language phone-to-grapheme map can be injective.
    pub graphemes_per_language: usize,
    pub utterances_per_language: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub frames_per_phone: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Write WAV tones and extract features through the front end instead
    /// of emitting feature-space templates directly.
    pub waveform_mode: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_languages: 3,
            phones_shared: 10,
            graphemes_per_language: 10,
            utterances_per_language: 60,
            min_phones: 3,
            max_phones: 8,
            frames_per_phone: 8,
            noise_std: 0.05,
            seed: 42,
            waveform_mode: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.graphemes_per_language < self.phones_shared {
            return Err(Error::Config(format!(
                "graphemes_per_language {} < phones_shared {}: phone-to-grapheme map cannot be injective",
                self.graphemes_per_language, self.phones_shared
            )));
        }
        if self.num_languages * self.graphemes_per_language > LETTER_POOL.len() {
            return Err(Error::Config(format!(
                "{} languages x {} graphemes exceeds the {}-letter pool",
                self.num_languages,
                self.graphemes_per_language,
                LETTER_POOL.len()
            )));
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err(Error::Config(format!(
                "bad phone count range [{}, {}]",
                self.min_phones, self.max_phones
            )));
        }
        if self.frames_per_phone == 0 {
            return Err(Error::Config("frames_per_phone must be >= 1".into()));
        }
        Ok(())
    }

    pub fn language_labels(&self) -> Vec<LanguageLabel> {
        (1..=self.num_languages)
            .map(|i| LanguageLabel::new(&format!("[L{i}]")).expect("valid tag"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub utt_id: String,
    pub path: String,
    pub text: String,
    pub language: LanguageLabel,
    pub phonemes: String,
}

/// Corpus listing plus optional global per-dim feature statistics.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub mean: Option<Vec<f64>>,
    pub std: Option<Vec<f64>>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn build_vocabs(&self) -> Result<(Vocab, Vocab)> {
        let mut b = VocabBuilder::new();
        for row in &self.rows {
            b.add_row(&row.text, &row.phonemes, &row.language);
        }
        b.build()
    }

    pub fn filter_languages(&self, langs: &[LanguageLabel]) -> Manifest {
        if langs.is_empty() {
            return self.clone();
        }
        Manifest {
            rows: self
                .rows
                .iter()
                .filter(|r| langs.contains(&r.language))
                .cloned()
                .collect(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(rel)
        }
    }

    /// Rewrite feature paths as absolute so the manifest can be saved
    /// outside its corpus directory.
    pub fn with_absolute_paths(&self) -> Manifest {
        Manifest {
            rows: self
                .rows
                .iter()
                .map(|r| ManifestRow {
                    path: self.resolve(&r.path).display().to_string(),
                    ..r.clone()
                })
                .collect(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Manifest TSV: 5 tab-separated columns `utt_id, path, text, lang,
/// phonemes`, `#` comments, with optional `#mean:`/`#std:` statistics lines.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut manifest = Manifest {
        base_dir,
        ..Default::default()
    };
    let parse_stats = |line: &str, lineno: usize| -> Result<Vec<f64>> {
        line.split_whitespace()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: format!("bad float {v:?} in statistics line"),
                })
            })
            .collect()
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("#mean:") {
            manifest.mean = Some(parse_stats(rest, lineno)?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("#std:") {
            manifest.std = Some(parse_stats(rest, lineno)?);
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let language = LanguageLabel::new(fields[3]).map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: format!("unknown language tag {:?}", fields[3]),
        })?;
        if !manifest.base_dir.join(fields[1]).exists() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("feature path {:?} does not resolve", fields[1]),
            });
        }
        manifest.rows.push(ManifestRow {
            utt_id: fields[0].to_string(),
            path: fields[1].to_string(),
            text: fields[2].to_string(),
            language,
            phonemes: fields[4].to_string(),
        });
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    if let Some(mean) = &manifest.mean {
        out.push_str("#mean:");
        for v in mean {
            out.push_str(&format!(" {v:.17e}"));
        }
        out.push('\n');
    }
    if let Some(std) = &manifest.std {
        out.push_str("#std:");
        for v in std {
            out.push_str(&format!(" {v:.17e}"));
        }
        out.push('\n');
    }
    for r in &manifest.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.path,
            r.text,
            r.language.tag(),
            r.phonemes
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-phone structure shared by a corpus: templates, tone frequencies,
/// per-language grapheme maps.
///
/// Phone templates are shared across languages (the common-label-set
/// premise); a per-language accent offset is added on top so utterances
/// remain acoustically language-identifiable, which conditional decoding
/// needs to reach its Bayes outcome.
struct PhoneWorld {
    /// phone symbol per index; index `phones_shared` is the pause phone
    symbols: Vec<String>,
    templates: Vec<Vec<f64>>,
    accent: Vec<Vec<f64>>,
    tone_hz: Vec<f64>,
    /// per language: phone index -> grapheme (pause maps to space)
    maps: Vec<Vec<char>>,
}

impl PhoneWorld {
    fn new(cfg: &SynthConfig) -> PhoneWorld {
        let num_phones = cfg.phones_shared + 1; // plus pause
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut symbols: Vec<String> = (0..cfg.phones_shared).map(|i| format!("p{i}")).collect();
        symbols.push("sil".to_string());
        let templates: Vec<Vec<f64>> = (0..num_phones)
            .map(|_| (0..NUM_MEL_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let accent: Vec<Vec<f64>> = (0..cfg.num_languages)
            .map(|_| (0..NUM_MEL_BINS).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        let tone_hz: Vec<f64> = (0..num_phones).map(|i| 200.0 + 170.0 * i as f64).collect();
        let mut maps = Vec::with_capacity(cfg.num_languages);
        for lang in 0..cfg.num_languages {
            let base = lang * cfg.graphemes_per_language;
            let mut letters: Vec<char> =
                LETTER_POOL[base..base + cfg.graphemes_per_language].to_vec();
            letters.shuffle(&mut rng);
            let map: Vec<char> = letters[..cfg.phones_shared].to_vec();
            maps.push(map);
        }
        PhoneWorld {
            symbols,
            templates,
            accent,
            tone_hz,
            maps,
        }
    }

    fn pause_index(&self) -> usize {
        self.symbols.len() - 1
    }
}

/// Deterministically generate one corpus split into `out_dir`.
///
/// Feature files land in `out_dir/feats/` (or WAVs in `out_dir/wavs/` in
/// waveform mode) and the manifest at `out_dir/<split>.tsv`. The phone
/// world (templates, grapheme maps) depends only on `cfg.seed`, so splits
/// generated with different names share it; utterance draws get a
/// split-specific stream.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path, split: &str) -> Result<Manifest> {
    cfg.validate()?;
    let world = PhoneWorld::new(cfg);
    let split_salt = split.bytes().fold(0u64, |h, b| {
        h.wrapping_mul(31).wrapping_add(b as u64)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ split_salt.wrapping_mul(0x9E37_79B9));
    let subdir = if cfg.waveform_mode { "wavs" } else { "feats" };
    std::fs::create_dir_all(out_dir.join(subdir))?;
    let labels = cfg.language_labels();
    let mut manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        ..Default::default()
    };
    let mut sum = vec![0.0; NUM_MEL_BINS];
    let mut sum_sq = vec![0.0; NUM_MEL_BINS];
    let mut n_frames = 0usize;
    for (li, label) in labels.iter().enumerate() {
        for ui in 0..cfg.utterances_per_language {
            let utt_id = format!("{split}_l{}_{ui:04}", li + 1);
            // words of 1-4 content phones separated by the pause phone
            let n_phones = rng.gen_range(cfg.min_phones..=cfg.max_phones);
            let mut phone_seq = Vec::new();
            let mut remaining = n_phones;
            while remaining > 0 {
                let w = rng.gen_range(1..=4usize).min(remaining);
                for _ in 0..w {
                    phone_seq.push(rng.gen_range(0..cfg.phones_shared));
                }
                remaining -= w;
                if remaining > 0 {
                    phone_seq.push(world.pause_index());
                }
            }
            let text: String = phone_seq
                .iter()
                .map(|&p| {
                    if p == world.pause_index() {
                        ' '
                    } else {
                        world.maps[li][p]
                    }
                })
                .collect();
            let phonemes: Vec<&str> = phone_seq.iter().map(|&p| world.symbols[p].as_str()).collect();
            let rel_path;
            let frames: Tensor;
            if cfg.waveform_mode {
                let mut samples = Vec::new();
                for &p in &phone_seq {
                    let hz = world.tone_hz[p] + 50.0 * li as f64;
                    let n = cfg.frames_per_phone * frontend::FRAME_SHIFT;
                    for k in 0..n {
                        let t = (samples.len() + k) as f64 / SAMPLE_RATE as f64;
                        let _ = t;
                        let phase = 2.0 * std::f64::consts::PI * hz * k as f64 / SAMPLE_RATE as f64;
                        samples.push(0.4 * phase.sin() + cfg.noise_std * rng.gen_range(-1.0..1.0));
                    }
                }
                // tail so the last phone gets full windows
                samples.extend(std::iter::repeat(0.0).take(frontend::FRAME_LEN));
                let wav = Waveform::new(samples, SAMPLE_RATE)?;
                rel_path = format!("{subdir}/{utt_id}.wav");
                frontend::write_wav(&out_dir.join(&rel_path), &wav)?;
                frames = compute_log_mel(&wav)?;
            } else {
                let t_len = phone_seq.len() * cfg.frames_per_phone;
                let mut data = Vec::with_capacity(t_len * NUM_MEL_BINS);
                for &p in &phone_seq {
                    for _ in 0..cfg.frames_per_phone {
                        for d in 0..NUM_MEL_BINS {
                            let noise = if cfg.noise_std > 0.0 {
                                cfg.noise_std * gaussian(&mut rng)
                            } else {
                                0.0
                            };
                            data.push(world.templates[p][d] + world.accent[li][d] + noise);
                        }
                    }
                }
                frames = Tensor::new(vec![t_len, NUM_MEL_BINS], data)?;
                rel_path = format!("{subdir}/{utt_id}.feat");
                checkpoint::save_single(
                    &out_dir.join(&rel_path),
                    &format!("feat/{utt_id}"),
                    &frames,
                )?;
            }
            for row in frames.data.chunks_exact(NUM_MEL_BINS) {
                for (d, v) in row.iter().enumerate() {
                    sum[d] += v;
                    sum_sq[d] += v * v;
                }
                n_frames += 1;
            }
            manifest.rows.push(ManifestRow {
                utt_id,
                path: rel_path,
                text,
                language: label.clone(),
                phonemes: phonemes.join(" "),
            });
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n_frames as f64).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / n_frames as f64 - m * m).max(1e-12).sqrt())
        .collect();
    manifest.mean = Some(mean);
    manifest.std = Some(std);
    save_manifest(&out_dir.join(format!("{split}.tsv")), &manifest)?;
    Ok(manifest)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// An utterance loaded into memory with encoded targets.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub utt_id: String,
    pub feats: Tensor,
    pub bundle: TargetBundle,
    pub language: LanguageLabel,
    pub text: String,
}

/// Load features (normalizing with manifest statistics when present) and
/// encode targets. Utterances too short to survive subsampling are skipped;
/// the skip count is returned alongside.
pub fn load_corpus(
    manifest: &Manifest,
    grapheme_vocab: &Vocab,
    phoneme_vocab: &Vocab,
) -> Result<(Vec<LoadedUtterance>, usize)> {
    let mut out = Vec::with_capacity(manifest.rows.len());
    let mut skipped = 0;
    for row in &manifest.rows {
        let feats = load_features(manifest, row)?;
        if subsampled_len(feats.shape[0]).is_err() {
            skipped += 1;
            continue;
        }
        let feats = normalize(feats, manifest);
        let bundle = encode_targets(
            &row.text,
            &row.phonemes,
            &row.language,
            grapheme_vocab,
            phoneme_vocab,
        )?;
        out.push(LoadedUtterance {
            utt_id: row.utt_id.clone(),
            feats,
            bundle,
            language: row.language.clone(),
            text: row.text.clone(),
        });
    }
    Ok((out, skipped))
}

/// Like [`load_corpus`], optionally tripling WAV-backed utterances at the
/// speed factors 0.9 / 1.0 / 1.1. Feature-file rows are not resampled.
pub fn load_corpus_speed_perturbed(
    manifest: &Manifest,
    grapheme_vocab: &Vocab,
    phoneme_vocab: &Vocab,
    speed_perturb: bool,
) -> Result<(Vec<LoadedUtterance>, usize)> {
    if !speed_perturb {
        return load_corpus(manifest, grapheme_vocab, phoneme_vocab);
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for row in &manifest.rows {
        let variants: Vec<(String, Tensor)> = if row.path.ends_with(".wav") {
            let wav = frontend::read_wav(&manifest.resolve(&row.path))?;
            let mut v = Vec::new();
            for factor in [0.9, 1.0, 1.1] {
                let perturbed = frontend::speed_perturb(&wav, factor)?;
                v.push((
                    format!("{}#sp{factor}", row.utt_id),
                    compute_log_mel(&perturbed)?,
                ));
            }
            v
        } else {
            vec![(row.utt_id.clone(), load_features(manifest, row)?)]
        };
        for (utt_id, feats) in variants {
            if subsampled_len(feats.shape[0]).is_err() {
                skipped += 1;
                continue;
            }
            let feats = normalize(feats, manifest);
            let bundle = encode_targets(
                &row.text,
                &row.phonemes,
                &row.language,
                grapheme_vocab,
                phoneme_vocab,
            )?;
            out.push(LoadedUtterance {
                utt_id,
                feats,
                bundle,
                language: row.language.clone(),
                text: row.text.clone(),
            });
        }
    }
    Ok((out, skipped))
}

pub fn load_features(manifest: &Manifest, row: &ManifestRow) -> Result<Tensor> {
    let path = manifest.resolve(&row.path);
    if row.path.ends_with(".wav") {
        let wav = frontend::read_wav(&path)?;
        compute_log_mel(&wav)
    } else {
        checkpoint::load_single(&path, &format!("feat/{}", row.utt_id))
    }
}

pub fn normalize(mut feats: Tensor, manifest: &Manifest) -> Tensor {
    if let (Some(mean), Some(std)) = (&manifest.mean, &manifest.std) {
        for row in feats.data.chunks_exact_mut(NUM_MEL_BINS) {
            for (d, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[d]) / std[d].max(1e-8);
            }
        }
    }
    feats
}

/// One training batch: indices into the loaded corpus, longest first.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    /// Spec-shaped padded view of the batch features.
    pub fn padded(&self, corpus: &[LoadedUtterance]) -> Result<PaddedBatch> {
        let utts: Vec<&Tensor> = self.indices.iter().map(|&i| &corpus[i].feats).collect();
        PaddedBatch::from_utterances(&utts)
    }
}

/// Seeded epoch shuffle, then length-sorted bucketing into batches of at
/// most `batch_size`, each sorted by descending length.
pub fn make_batches(corpus: &[LoadedUtterance], batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| corpus[b].feats.shape[0].cmp(&corpus[a].feats.shape[0]));
    order
        .chunks(batch_size.max(1))
        .map(|c| Batch {
            indices: c.to_vec(),
        })
        .collect()
}

/// Validation split size: a fraction of utterances or an audio duration.
#[derive(Debug, Clone, Copy)]
pub enum SplitSpec {
    Fraction(f64),
    Hours(f64),
}

/// Per-language stratified random split into (train, valid).
pub fn split_train_valid(
    manifest: &Manifest,
    spec: SplitSpec,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if let SplitSpec::Fraction(f) = spec {
        if !(0.0..1.0).contains(&f) || f <= 0.0 {
            return Err(Error::Config(format!(
                "validation fraction must be in (0, 1), got {f}"
            )));
        }
    }
    let mut by_lang: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, r) in manifest.rows.iter().enumerate() {
        by_lang.entry(r.language.tag().to_string()).or_default().push(i);
    }
    let mut langs: Vec<String> = by_lang.keys().cloned().collect();
    langs.sort();
    let mut valid_idx = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lang in langs {
        let mut idx = by_lang.remove(&lang).expect("key exists");
        idx.shuffle(&mut rng);
        match spec {
            SplitSpec::Fraction(f) => {
                let k = (f * idx.len() as f64).round() as usize;
                if k >= idx.len() {
                    return Err(Error::Config(format!(
                        "validation fraction {f} leaves no training data for {lang}"
                    )));
                }
                valid_idx.extend_from_slice(&idx[..k]);
            }
            SplitSpec::Hours(h) => {
                let mut remaining = h * 3600.0;
                let mut taken = 0;
                for &i in &idx {
                    if remaining <= 0.0 {
                        break;
                    }
                    remaining -= utterance_duration_secs(manifest, &manifest.rows[i])?;
                    taken += 1;
                }
                if remaining > 0.0 {
                    return Err(Error::Config(format!(
                        "requested {h} h of validation audio exceeds corpus for {lang}"
                    )));
                }
                if taken >= idx.len() {
                    return Err(Error::Config(format!(
                        "validation split leaves no training data for {lang}"
                    )));
                }
                valid_idx.extend_from_slice(&idx[..taken]);
            }
        }
    }
    let in_valid: std::collections::HashSet<usize> = valid_idx.into_iter().collect();
    let pick = |keep: bool| Manifest {
        rows: manifest
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| in_valid.contains(i) == keep)
            .map(|(_, r)| r.clone())
            .collect(),
        mean: manifest.mean.clone(),
        std: manifest.std.clone(),
        base_dir: manifest.base_dir.clone(),
    };
    Ok((pick(false), pick(true)))
}

/// Duration in seconds, from the feature frame count (10 ms frames) or the
/// WAV payload size.
pub fn utterance_duration_secs(manifest: &Manifest, row: &ManifestRow) -> Result<f64> {
    if row.path.ends_with(".wav") {
        let bytes = std::fs::metadata(manifest.resolve(&row.path))?.len();
        Ok(bytes.saturating_sub(44) as f64 / (2.0 * SAMPLE_RATE as f64))
    } else {
        let t = checkpoint::load_single(&manifest.resolve(&row.path), &format!("feat/{}", row.utt_id))?
            .shape[0];
        Ok(t as f64 * 0.010)
    }
}
