//! Levenshtein-based character and word error rates.
//!
//! Rates are corpus-level: total edits over total reference length. Spaces
//! count as characters for CER, and words are runs of non-whitespace.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{references} references but {hypotheses} hypotheses")]
    LengthMismatch { references: usize, hypotheses: usize },
    #[error("all references are empty; error rates are undefined")]
    EmptyReferences,
}

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEdits {
    pub char_edits: usize,
    pub char_len: usize,
    pub word_edits: usize,
    pub word_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub cer: f64,
    /// Percent.
    pub wer: f64,
    pub char_edits: usize,
    pub char_total: usize,
    pub word_edits: usize,
    pub word_total: usize,
    pub samples: Vec<SampleEdits>,
}

pub fn cer_wer<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<EvalReport, MetricsError> {
    if references.len() != hypotheses.len() {
        return Err(MetricsError::LengthMismatch {
            references: references.len(),
            hypotheses: hypotheses.len(),
        });
    }
    let samples: Vec<SampleEdits> = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| {
            let (r, h) = (r.as_ref(), h.as_ref());
            let rc: Vec<char> = r.chars().collect();
            let hc: Vec<char> = h.chars().collect();
            let (rw, hw) = (words(r), words(h));
            SampleEdits {
                char_edits: levenshtein(&rc, &hc),
                char_len: rc.len(),
                word_edits: levenshtein(&rw, &hw),
                word_len: rw.len(),
            }
        })
        .collect();
    let char_total: usize = samples.iter().map(|s| s.char_len).sum();
    let word_total: usize = samples.iter().map(|s| s.word_len).sum();
    if char_total == 0 || word_total == 0 {
        return Err(MetricsError::EmptyReferences);
    }
    let char_edits: usize = samples.iter().map(|s| s.char_edits).sum();
    let word_edits: usize = samples.iter().map(|s| s.word_edits).sum();
    Ok(EvalReport {
        cer: 100.0 * char_edits as f64 / char_total as f64,
        wer: 100.0 * word_edits as f64 / word_total as f64,
        char_edits,
        char_total,
        word_edits,
        word_total,
        samples,
    })
}

impl EvalReport {
    /// Aligned text summary. The header states the counting convention.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# corpus-level rates; spaces count as characters; words split on whitespace");
        let _ = writeln!(s, "{:<8}{:>10}{:>12}{:>12}", "metric", "rate(%)", "edits", "reference");
        let _ = writeln!(s, "{:<8}{:>10.2}{:>12}{:>12}", "CER", self.cer, self.char_edits, self.char_total);
        let _ = writeln!(s, "{:<8}{:>10.2}{:>12}{:>12}", "WER", self.wer, self.word_edits, self.word_total);
        s
    }

    /// Tab-separated per-sample rows followed by a totals row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sample\tchar_edits\tchar_len\tword_edits\tword_len\n");
        for (i, e) in self.samples.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}\t{}\t{}", e.char_edits, e.char_len, e.word_edits, e.word_len);
        }
        let _ = writeln!(
            s,
            "total\t{}\t{}\t{}\t{}",
            self.char_edits, self.char_total, self.word_edits, self.word_total
        );
        s
    }
}
