//! Scoring: Levenshtein alignment with S/D/I counts, corpus-level WER/CER,
//! language-ID accuracy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vocab::LanguageLabel;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
    }
}

/// Unit-cost Levenshtein alignment; ties prefer substitution, then
/// deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[idx(i - 1, j - 1)]
                + if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            dist[idx(i, j)] = sub.min(del).min(ins);
        }
    }
    // backtrace with the stated tie preference
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[idx(i, j)];
        if i > 0 && j > 0 {
            let matched = reference[i - 1] == hypothesis[j - 1];
            let diag = dist[idx(i - 1, j - 1)] + if matched { 0 } else { 1 };
            if diag == here {
                if !matched {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i - 1, j)] + 1 == here {
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        counts.insertions += 1;
        j -= 1;
    }
    counts
}

/// Words are split on the space token; empty splits are dropped.
pub fn words(text: &str) -> Vec<&str> {
    text.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Grapheme units excluding the space token.
pub fn chars_no_space(text: &str) -> Vec<char> {
    text.chars().filter(|&c| c != ' ').collect()
}

/// Corpus-level error aggregation: sum of errors over sum of reference
/// lengths, times 100.
#[derive(Debug, Default, Clone)]
pub struct ErrorTally {
    pub counts: EditCounts,
    pub ref_len: usize,
}

impl ErrorTally {
    pub fn accumulate<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        let c = edit_distance(reference, hypothesis);
        self.counts.add(&c);
        self.ref_len += reference.len();
    }

    pub fn percent(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Data("empty reference corpus".into()));
        }
        Ok(self.counts.total() as f64 / self.ref_len as f64 * 100.0)
    }
}

/// Corpus-level word error rate over space-token splits.
pub fn wer(refs: &[&str], hyps: &[&str]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!(
            "wer: {} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut tally = ErrorTally::default();
    for (r, h) in refs.iter().zip(hyps) {
        tally.accumulate(&words(r), &words(h));
    }
    tally.percent()
}

/// Corpus-level character error rate over grapheme units excluding space.
pub fn cer(refs: &[&str], hyps: &[&str]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!(
            "cer: {} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut tally = ErrorTally::default();
    for (r, h) in refs.iter().zip(hyps) {
        tally.accumulate(&chars_no_space(r), &chars_no_space(h));
    }
    tally.percent()
}

/// Fraction of hypotheses whose extracted language equals the reference;
/// a missing hypothesis label counts as wrong.
pub fn language_id_accuracy(
    hyp_langs: &[Option<LanguageLabel>],
    ref_langs: &[LanguageLabel],
) -> f64 {
    if ref_langs.is_empty() {
        return 0.0;
    }
    let correct = hyp_langs
        .iter()
        .zip(ref_langs)
        .filter(|(h, r)| h.as_ref() == Some(r))
        .count();
    correct as f64 / ref_langs.len() as f64 * 100.0
}

/// One scored utterance.
#[derive(Debug, Clone)]
pub struct ScoredUtterance {
    pub utt_id: String,
    pub language: LanguageLabel,
    pub reference: String,
    pub hypothesis: String,
    pub hyp_language: Option<LanguageLabel>,
    pub log_score: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub lang: String,
    pub wer: f64,
    pub cer: f64,
    pub lid_acc: f64,
    pub n_utts: usize,
    pub n_words: usize,
    pub word_errors: EditCounts,
}

/// Per-language WER/CER/language-ID table.
#[derive(Debug, Clone, Default)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn from_utterances(utts: &[ScoredUtterance]) -> Result<ScoreReport> {
        let mut by_lang: BTreeMap<String, Vec<&ScoredUtterance>> = BTreeMap::new();
        for u in utts {
            by_lang.entry(u.language.tag().to_string()).or_default().push(u);
        }
        let mut rows = Vec::new();
        for (lang, group) in by_lang {
            let mut word_tally = ErrorTally::default();
            let mut char_tally = ErrorTally::default();
            let mut hyp_langs = Vec::new();
            let mut ref_langs = Vec::new();
            for u in &group {
                word_tally.accumulate(&words(&u.reference), &words(&u.hypothesis));
                char_tally.accumulate(
                    &chars_no_space(&u.reference),
                    &chars_no_space(&u.hypothesis),
                );
                hyp_langs.push(u.hyp_language.clone());
                ref_langs.push(u.language.clone());
            }
            rows.push(ScoreRow {
                lang,
                wer: word_tally.percent()?,
                cer: char_tally.percent()?,
                lid_acc: language_id_accuracy(&hyp_langs, &ref_langs),
                n_utts: group.len(),
                n_words: word_tally.ref_len,
                word_errors: word_tally.counts,
            });
        }
        Ok(ScoreReport { rows })
    }

    /// CSV with the columns `lang,wer,cer,lid_acc,n_utts,n_words`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lang,wer,cer,lid_acc,n_utts,n_words\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{},{}\n",
                r.lang, r.wer, r.cer, r.lid_acc, r.n_utts, r.n_words
            ));
        }
        out
    }

    pub fn mean_wer(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.wer).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_cer(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.cer).sum::<f64>() / self.rows.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_no_errors() {
        let c = edit_distance(&["a", "b"], &["a", "b"]);
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn kitten_to_sitting_is_three() {
        let r: Vec<char> = "kitten".chars().collect();
        let h: Vec<char> = "sitting".chars().collect();
        let c = edit_distance(&r, &h);
        assert_eq!(c.total(), 3);
        assert_eq!(c.substitutions, 2);
        assert_eq!(c.insertions, 1);
        assert_eq!(c.deletions, 0);
    }

    #[test]
    fn empty_reference_all_insertions() {
        let c = edit_distance::<char>(&[], &['x', 'y', 'z']);
        assert_eq!(c.insertions, 3);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
                let n = rng.gen_range(0..8);
                (0..n).map(|_| rng.gen_range(0..3u8)).collect()
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            let c = gen(&mut rng);
            let dab = edit_distance(&a, &b).total();
            let dba = edit_distance(&b, &a).total();
            assert_eq!(dab, dba);
            let dac = edit_distance(&a, &c).total();
            let dcb = edit_distance(&c, &b).total();
            assert!(dab <= dac + dcb);
        }
    }

    #[test]
    fn wer_one_deletion_of_three_words() {
        let got = wer(&["a b c"], &["a c"]).unwrap();
        assert!((got - 100.0 / 3.0).abs() <= 1e-9);
        assert_eq!(wer(&["a b", "c"], &["a b", "c"]).unwrap(), 0.0);
        assert!(wer(&[""], &["x"]).is_err());
    }

    #[test]
    fn cer_excludes_spaces() {
        let got = cer(&["ab cd"], &["ab ce"]).unwrap();
        assert!((got - 25.0).abs() <= 1e-9);
    }

    #[test]
    fn corpus_level_invariant_under_reordering() {
        let refs = ["a b c", "d e", "f"];
        let hyps = ["a c", "d x", "f"];
        let w1 = wer(&refs, &hyps).unwrap();
        let perm = [2usize, 0, 1];
        let refs2: Vec<&str> = perm.iter().map(|&i| refs[i]).collect();
        let hyps2: Vec<&str> = perm.iter().map(|&i| hyps[i]).collect();
        let w2 = wer(&refs2, &hyps2).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn language_id_scoring() {
        let l1 = LanguageLabel::new("[L1]").unwrap();
        let l2 = LanguageLabel::new("[L2]").unwrap();
        let refs = vec![l1.clone(), l2.clone(), l1.clone()];
        let hyps = vec![Some(l1.clone()), Some(l2.clone()), Some(l1.clone())];
        assert_eq!(language_id_accuracy(&hyps, &refs), 100.0);
        let hyps = vec![Some(l1.clone()), None, Some(l2)];
        assert!((language_id_accuracy(&hyps, &refs) - 100.0 / 3.0).abs() <= 1e-9);
    }

    #[test]
    fn report_csv_schema() {
        let l1 = LanguageLabel::new("[L1]").unwrap();
        let utts = vec![ScoredUtterance {
            utt_id: "u1".into(),
            language: l1.clone(),
            reference: "a b".into(),
            hypothesis: "a b".into(),
            hyp_language: Some(l1),
            log_score: -0.1,
        }];
        let report = ScoreReport::from_utterances(&utts).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("lang,wer,cer,lid_acc,n_utts,n_words\n"));
        assert!(csv.contains("[L1],0.0000,0.0000,100.0000,1,2"));
    }
}
