//! Attachment scoring: LA (label accuracy), UAS (unlabeled attachment
//! score), LAS (labeled attachment score).
//!
//! Counts are exact; percentages are derived on demand and displayed with
//! two decimals. Punctuation (gold UPOS `PUNCT`) is counted by default and
//! can be excluded.

use serde_json::json;
use thiserror::Error;

use crate::conllu::Sentence;
use crate::decoder::ParseResult;
use crate::lexicon::Lexicon;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sentence {sentence}: {details}")]
    Alignment { sentence: usize, details: String },
}

/// Aggregated match counts over a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalReport {
    pub token_count: usize,
    pub head_matches: usize,
    pub label_matches: usize,
    pub both_matches: usize,
}

fn pct(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

impl EvalReport {
    /// Percentage of tokens with the correct label.
    pub fn la(&self) -> f64 {
        pct(self.label_matches, self.token_count)
    }

    /// Percentage of tokens with the correct head.
    pub fn uas(&self) -> f64 {
        pct(self.head_matches, self.token_count)
    }

    /// Percentage of tokens with both correct.
    pub fn las(&self) -> f64 {
        pct(self.both_matches, self.token_count)
    }

    pub fn add(&mut self, other: &EvalReport) {
        self.token_count += other.token_count;
        self.head_matches += other.head_matches;
        self.label_matches += other.label_matches;
        self.both_matches += other.both_matches;
    }

    fn score(&mut self, head_ok: bool, label_ok: bool) {
        self.token_count += 1;
        self.head_matches += head_ok as usize;
        self.label_matches += label_ok as usize;
        self.both_matches += (head_ok && label_ok) as usize;
    }

    /// One machine-readable line: counts plus two-decimal percentages.
    pub fn to_json_line(&self) -> String {
        let round2 = |x: f64| (x * 100.0).round() / 100.0;
        json!({
            "tokens": self.token_count,
            "la": round2(self.la()),
            "uas": round2(self.uas()),
            "las": round2(self.las()),
        })
        .to_string()
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "tokens {:>8}", self.token_count)?;
        writeln!(f, "LA     {:>8.2}", self.la())?;
        writeln!(f, "UAS    {:>8.2}", self.uas())?;
        write!(f, "LAS    {:>8.2}", self.las())
    }
}

fn check_len(sentence: usize, gold: usize, pred: usize) -> Result<(), MetricsError> {
    if gold != pred {
        return Err(MetricsError::Alignment {
            sentence,
            details: format!("gold has {gold} tokens but prediction has {pred}"),
        });
    }
    Ok(())
}

fn check_count(gold: usize, pred: usize) -> Result<(), MetricsError> {
    if gold != pred {
        return Err(MetricsError::Alignment {
            sentence: gold.min(pred),
            details: format!("gold corpus has {gold} sentences but prediction has {pred}"),
        });
    }
    Ok(())
}

/// Score decoder output against gold trees; predicted label ids are resolved
/// through the lexicon. `exclude_punct` drops tokens whose gold UPOS is
/// `PUNCT`.
pub fn attachment_scores(
    gold: &[Sentence],
    pred: &[ParseResult],
    lexicon: &Lexicon,
    exclude_punct: bool,
) -> Result<EvalReport, MetricsError> {
    check_count(gold.len(), pred.len())?;
    let mut report = EvalReport::default();
    for (idx, (g, p)) in gold.iter().zip(pred.iter()).enumerate() {
        check_len(idx, g.len(), p.heads.len())?;
        for (t, token) in g.tokens.iter().enumerate() {
            if exclude_punct && token.upos == "PUNCT" {
                continue;
            }
            let head_ok = token.head == p.heads[t];
            let label_ok = token.deprel == lexicon.label_name(p.labels[t]);
            report.score(head_ok, label_ok);
        }
    }
    Ok(report)
}

/// Score one parsed corpus against another, both already in sentence form.
pub fn compare_sentences(
    gold: &[Sentence],
    pred: &[Sentence],
    exclude_punct: bool,
) -> Result<EvalReport, MetricsError> {
    check_count(gold.len(), pred.len())?;
    let mut report = EvalReport::default();
    for (idx, (g, p)) in gold.iter().zip(pred.iter()).enumerate() {
        check_len(idx, g.len(), p.len())?;
        for (gt, pt) in g.tokens.iter().zip(p.tokens.iter()) {
            if exclude_punct && gt.upos == "PUNCT" {
                continue;
            }
            report.score(gt.head == pt.head, gt.deprel == pt.deprel);
        }
    }
    Ok(report)
}
