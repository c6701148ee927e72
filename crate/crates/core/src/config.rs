//! Run configuration: flat `key = value` text with `[sections]` and `#`
//! comments. Every value has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::encoder::ConvNormKind;
use crate::error::{Error, Result};
use crate::loss::MultiTaskLossConfig;
use crate::model::ModelConfig;
use crate::vocab::LanguageLabel;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            plateau_factor: 0.5,
            plateau_patience: 2,
            min_learning_rate: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Language subset filter; empty trains on everything.
    pub langs: Vec<LanguageLabel>,
    pub spec_augment: bool,
    pub speed_perturb: bool,
    pub freq_masks: usize,
    pub freq_mask_width: usize,
    pub time_masks: usize,
    pub time_mask_width: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 20,
            seed: 1,
            langs: Vec::new(),
            spec_augment: false,
            speed_perturb: false,
            freq_masks: 2,
            freq_mask_width: 6,
            time_masks: 2,
            time_mask_width: 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub constrain_first: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 4,
            max_len: 64,
            constrain_first: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: MultiTaskLossConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
    pub synth: SynthConfig,
    pub dev_utterances_per_language: usize,
    /// Weight initialization scheme; recorded for reproducibility. Only
    /// `uniform_fan_in` is implemented.
    pub init: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: MultiTaskLossConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig {
                train_manifest: None,
                valid_manifest: None,
                valid_fraction: 0.1,
            },
            decode: DecodeConfig::default(),
            synth: SynthConfig::default(),
            dev_utterances_per_language: 20,
            init: "uniform_fan_in".to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                i + 1
            )))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value, &base).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.loss.validate()?;
        if self.init != "uniform_fan_in" {
            return Err(Error::Config(format!(
                "unsupported init scheme {:?}",
                self.init
            )));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str, base: &Path) -> Result<()> {
        let unknown = || {
            Err(Error::Config(format!(
                "unknown key {key:?} in section [{section}]"
            )))
        };
        match section {
            "model" => match key {
                "num_blocks" => self.model.encoder.num_blocks = parse(value)?,
                "d_model" => self.model.encoder.d_model = parse(value)?,
                "num_heads" => self.model.encoder.num_heads = parse(value)?,
                "ff_hidden" => self.model.encoder.ff_hidden = parse(value)?,
                "conv_kernel" => self.model.encoder.conv_kernel = parse(value)?,
                "conv_norm" => {
                    self.model.encoder.conv_norm = match value {
                        "batch" => ConvNormKind::Batch,
                        "layer" => ConvNormKind::Layer,
                        _ => {
                            return Err(Error::Config(format!(
                                "conv_norm must be `batch` or `layer`, got {value:?}"
                            )))
                        }
                    }
                }
                "dropout" => self.model.encoder.dropout = parse(value)?,
                "dec_layers" => self.model.dec_layers = parse(value)?,
                "label_smoothing" => self.model.label_smoothing = parse(value)?,
                "init" => self.init = value.to_string(),
                _ => return unknown(),
            },
            "loss" => match key {
                "lambda" => self.loss.lambda = parse(value)?,
                "alpha" => self.loss.alpha = parse(value)?,
                _ => return unknown(),
            },
            "optimizer" => match key {
                "learning_rate" => self.optimizer.learning_rate = parse(value)?,
                "plateau_factor" => self.optimizer.plateau_factor = parse(value)?,
                "plateau_patience" => self.optimizer.plateau_patience = parse(value)?,
                "min_learning_rate" => self.optimizer.min_learning_rate = parse(value)?,
                _ => return unknown(),
            },
            "training" => match key {
                "epochs" => self.training.epochs = parse(value)?,
                "batch_size" => self.training.batch_size = parse(value)?,
                "seed" => self.training.seed = parse(value)?,
                "langs" => self.training.langs = parse_langs(value)?,
                "spec_augment" => self.training.spec_augment = parse_bool(value)?,
                "speed_perturb" => self.training.speed_perturb = parse_bool(value)?,
                "freq_masks" => self.training.freq_masks = parse(value)?,
                "freq_mask_width" => self.training.freq_mask_width = parse(value)?,
                "time_masks" => self.training.time_masks = parse(value)?,
                "time_mask_width" => self.training.time_mask_width = parse(value)?,
                _ => return unknown(),
            },
            "data" => match key {
                "train_manifest" => self.data.train_manifest = opt_path(value, base),
                "valid_manifest" => self.data.valid_manifest = opt_path(value, base),
                "valid_fraction" => self.data.valid_fraction = parse(value)?,
                _ => return unknown(),
            },
            "decode" => match key {
                "beam" => self.decode.beam = parse(value)?,
                "max_len" => self.decode.max_len = parse(value)?,
                "constrain_first" => self.decode.constrain_first = parse_bool(value)?,
                _ => return unknown(),
            },
            "synth" => match key {
                "num_languages" => self.synth.num_languages = parse(value)?,
                "phones_shared" => self.synth.phones_shared = parse(value)?,
                "graphemes_per_language" => self.synth.graphemes_per_language = parse(value)?,
                "utterances_per_language" => self.synth.utterances_per_language = parse(value)?,
                "dev_utterances_per_language" => self.dev_utterances_per_language = parse(value)?,
                "min_phones" => self.synth.min_phones = parse(value)?,
                "max_phones" => self.synth.max_phones = parse(value)?,
                "frames_per_phone" => self.synth.frames_per_phone = parse(value)?,
                "noise_std" => self.synth.noise_std = parse(value)?,
                "seed" => self.synth.seed = parse(value)?,
                "waveform_mode" => self.synth.waveform_mode = parse_bool(value)?,
                _ => return unknown(),
            },
            "" => {
                return Err(Error::Config(format!(
                    "key {key:?} appears before any [section]"
                )))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Render the fully resolved configuration; parseable by `load`.
    pub fn to_config_string(&self) -> String {
        let conv_norm = match self.model.encoder.conv_norm {
            ConvNormKind::Batch => "batch",
            ConvNormKind::Layer => "layer",
        };
        let langs = self
            .training
            .langs
            .iter()
            .map(|l| l.tag().to_string())
            .collect::<Vec<_>>()
            .join(",");
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        format!(
            "[model]\n\
             num_blocks = {}\nd_model = {}\nnum_heads = {}\nff_hidden = {}\n\
             conv_kernel = {}\nconv_norm = {conv_norm}\ndropout = {}\n\
             dec_layers = {}\nlabel_smoothing = {}\ninit = {}\n\n\
             [loss]\nlambda = {}\nalpha = {}\n\n\
             [optimizer]\nlearning_rate = {}\nplateau_factor = {}\n\
             plateau_patience = {}\nmin_learning_rate = {}\n\n\
             [training]\nepochs = {}\nbatch_size = {}\nseed = {}\nlangs = {langs}\n\
             spec_augment = {}\nspeed_perturb = {}\nfreq_masks = {}\n\
             freq_mask_width = {}\ntime_masks = {}\ntime_mask_width = {}\n\n\
             [data]\ntrain_manifest = {}\nvalid_manifest = {}\nvalid_fraction = {}\n\n\
             [decode]\nbeam = {}\nmax_len = {}\nconstrain_first = {}\n\n\
             [synth]\nnum_languages = {}\nphones_shared = {}\n\
             graphemes_per_language = {}\nutterances_per_language = {}\n\
             dev_utterances_per_language = {}\nmin_phones = {}\nmax_phones = {}\n\
             frames_per_phone = {}\nnoise_std = {}\nseed = {}\nwaveform_mode = {}\n",
            self.model.encoder.num_blocks,
            self.model.encoder.d_model,
            self.model.encoder.num_heads,
            self.model.encoder.ff_hidden,
            self.model.encoder.conv_kernel,
            self.model.encoder.dropout,
            self.model.dec_layers,
            self.model.label_smoothing,
            self.init,
            self.loss.lambda,
            self.loss.alpha,
            self.optimizer.learning_rate,
            self.optimizer.plateau_factor,
            self.optimizer.plateau_patience,
            self.optimizer.min_learning_rate,
            self.training.epochs,
            self.training.batch_size,
            self.training.seed,
            self.training.spec_augment,
            self.training.speed_perturb,
            self.training.freq_masks,
            self.training.freq_mask_width,
            self.training.time_masks,
            self.training.time_mask_width,
            path_str(&self.data.train_manifest),
            path_str(&self.data.valid_manifest),
            self.data.valid_fraction,
            self.decode.beam,
            self.decode.max_len,
            self.decode.constrain_first,
            self.synth.num_languages,
            self.synth.phones_shared,
            self.synth.graphemes_per_language,
            self.synth.utterances_per_language,
            self.dev_utterances_per_language,
            self.synth.min_phones,
            self.synth.max_phones,
            self.synth.frames_per_phone,
            self.synth.noise_std,
            self.synth.seed,
            self.synth.waveform_mode,
        )
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?}")))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {value:?} as bool"))),
    }
}

fn parse_langs(value: &str) -> Result<Vec<LanguageLabel>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|t| LanguageLabel::new(t.trim()))
        .collect()
}

fn opt_path(value: &str, base: &Path) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        let p = PathBuf::from(value);
        Some(if p.is_absolute() { p } else { base.join(p) })
    }
}

pub fn parse_langs_arg(value: &str) -> Result<Vec<LanguageLabel>> {
    parse_langs(value)
}
