//! Token inventories for the decoders and the CTC head.
//!
//! Both vocabularies share the same layout: four specials (`<blank>` pinned
//! at id 0, `<unk>`, `<space>`, `<sos/eos>`), then language labels (grapheme
//! vocab only), then units sorted by Unicode code point.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SPACE_ID: usize = 2;
pub const SOS_EOS_ID: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<blank>", "<unk>", "<space>", "<sos/eos>"];

/// A language tag such as `[TE]` or `[L1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguageLabel(String);

impl LanguageLabel {
    pub fn new(tag: &str) -> Result<Self> {
        if tag.len() >= 3 && tag.starts_with('[') && tag.ends_with(']') {
            Ok(LanguageLabel(tag.to_string()))
        } else {
            Err(Error::Vocab(format!(
                "language label must look like [XX], got {tag:?}"
            )))
        }
    }

    pub fn tag(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Immutable token inventory; ids are dense from 0.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    language_label_ids: Vec<usize>,
}

impl Vocab {
    /// `units` must be free of duplicates and specials; ordering is
    /// normalized to code-point order internally.
    pub fn build(units: &[String], language_labels: &[LanguageLabel]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let labels: BTreeSet<&LanguageLabel> = language_labels.iter().collect();
        let mut language_label_ids = Vec::new();
        for label in labels {
            language_label_ids.push(tokens.len());
            tokens.push(label.tag().to_string());
        }
        let sorted: BTreeSet<&String> = units.iter().collect();
        for unit in sorted {
            tokens.push(unit.clone());
        }
        Self::from_tokens(tokens, language_label_ids)
    }

    fn from_tokens(tokens: Vec<String>, language_label_ids: Vec<usize>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Vocab(
                "vocab must start with <blank>, <unk>, <space>, <sos/eos>".into(),
            ));
        }
        Ok(Vocab {
            tokens,
            index,
            language_label_ids,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range (size {})", self.size())))
    }

    pub fn is_language_label(&self, id: usize) -> bool {
        self.language_label_ids.contains(&id)
    }

    pub fn language_label_ids(&self) -> &[usize] {
        &self.language_label_ids
    }

    pub fn language_labels(&self) -> Vec<LanguageLabel> {
        self.language_label_ids
            .iter()
            .map(|&id| LanguageLabel(self.tokens[id].clone()))
            .collect()
    }

    pub fn label_id(&self, label: &LanguageLabel) -> Option<usize> {
        self.id(label.tag()).filter(|id| self.is_language_label(*id))
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let language_label_ids = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.len() >= 3 && t.starts_with('[') && t.ends_with(']'))
            .map(|(i, _)| i)
            .collect();
        Self::from_tokens(tokens, language_label_ids)
    }
}

/// Accumulates transcripts and lexicon entries, then emits both vocabs.
#[derive(Default)]
pub struct VocabBuilder {
    chars: BTreeSet<char>,
    phones: BTreeSet<String>,
    labels: BTreeSet<String>,
    rows: usize,
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, text: &str, phonemes: &str, language: &LanguageLabel) {
        self.rows += 1;
        for c in text.chars() {
            if c != ' ' {
                self.chars.insert(c);
            }
        }
        for p in phonemes.split_whitespace() {
            self.phones.insert(p.to_string());
        }
        self.labels.insert(language.tag().to_string());
    }

    /// Returns `(phoneme_vocab, grapheme_vocab)`.
    pub fn build(self) -> Result<(Vocab, Vocab)> {
        if self.rows == 0 {
            return Err(Error::Vocab("empty manifest: no rows to build vocabs from".into()));
        }
        let phones: Vec<String> = self.phones.into_iter().collect();
        let chars: Vec<String> = self.chars.into_iter().map(|c| c.to_string()).collect();
        let labels: Vec<LanguageLabel> = self
            .labels
            .into_iter()
            .map(|t| LanguageLabel::new(&t))
            .collect::<Result<_>>()?;
        let pv = Vocab::build(&phones, &[])?;
        let gv = Vocab::build(&chars, &labels)?;
        Ok((pv, gv))
    }
}

/// Encoded targets for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    /// `[sos, lang, chars..., eos]` for the grapheme decoder.
    pub grapheme_ids: Vec<usize>,
    /// Characters and spaces only; no specials besides `<space>`.
    pub ctc_ids: Vec<usize>,
    /// `[sos, phonemes..., eos]` for the phoneme decoder.
    pub phoneme_ids: Vec<usize>,
    /// Characters or phones that fell back to `<unk>`.
    pub oov_count: usize,
}

/// Build the per-utterance target sequences for all three heads.
pub fn encode_targets(
    text: &str,
    phonemes: &str,
    language: &LanguageLabel,
    grapheme_vocab: &Vocab,
    phoneme_vocab: &Vocab,
) -> Result<TargetBundle> {
    let lang_id = grapheme_vocab.label_id(language).ok_or_else(|| {
        Error::Vocab(format!("language {language} not in grapheme vocab"))
    })?;
    let mut oov = 0;
    let mut ctc_ids = Vec::with_capacity(text.chars().count());
    for c in text.chars() {
        if c == ' ' {
            ctc_ids.push(SPACE_ID);
        } else {
            match grapheme_vocab.id(&c.to_string()) {
                Some(id) => ctc_ids.push(id),
                None => {
                    ctc_ids.push(UNK_ID);
                    oov += 1;
                }
            }
        }
    }
    let mut grapheme_ids = Vec::with_capacity(ctc_ids.len() + 3);
    grapheme_ids.push(SOS_EOS_ID);
    grapheme_ids.push(lang_id);
    grapheme_ids.extend_from_slice(&ctc_ids);
    grapheme_ids.push(SOS_EOS_ID);

    let mut phoneme_ids = Vec::new();
    phoneme_ids.push(SOS_EOS_ID);
    for p in phonemes.split_whitespace() {
        match phoneme_vocab.id(p) {
            Some(id) => phoneme_ids.push(id),
            None => {
                phoneme_ids.push(UNK_ID);
                oov += 1;
            }
        }
    }
    phoneme_ids.push(SOS_EOS_ID);

    Ok(TargetBundle {
        grapheme_ids,
        ctc_ids,
        phoneme_ids,
        oov_count: oov,
    })
}

/// Render ids as text: units pass through, `<space>` becomes a space,
/// structural specials and language labels are stripped.
pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id)?;
        match id {
            BLANK_ID | SOS_EOS_ID => {}
            SPACE_ID => out.push(' '),
            UNK_ID => out.push_str("<unk>"),
            _ if vocab.is_language_label(id) => {}
            _ => out.push_str(token),
        }
    }
    Ok(out)
}

/// First language-label token in the sequence, if any.
pub fn extract_language(ids: &[usize], vocab: &Vocab) -> Option<LanguageLabel> {
    ids.iter()
        .find(|&&id| vocab.is_language_label(id))
        .map(|&id| LanguageLabel(vocab.token(id).expect("checked id").to_string()))
}
