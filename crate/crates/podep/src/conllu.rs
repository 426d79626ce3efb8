//! CoNLL-U reading, writing, and corpus statistics.
//!
//! Only basic dependencies are handled: multiword-token range lines and empty
//! nodes are skipped on input. Field text is kept verbatim (`_` becomes the
//! empty string) so writing a parsed file reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConlluError {
    #[error("line {line}: {details}")]
    Format { line: usize, details: String },
    #[error("sentence {sentence}: {details}")]
    Validation { sentence: usize, details: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One syntactic word. `head` is 0 for attachment to the artificial root,
/// otherwise the 1-based id of the governing token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    /// Raw FEATS column (`Case=Nom|Number=Sing`), empty when absent.
    pub feats: String,
    pub head: usize,
    pub deprel: String,
    /// Raw DEPS column, preserved for round-tripping.
    pub deps: String,
    /// Raw MISC column, preserved for round-tripping.
    pub misc: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    /// Comment lines, kept verbatim including the leading `#`.
    pub comments: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold head for each token, index 0 holding token 1's head.
    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    /// Why the gold heads fail to form a tree, if they do.
    ///
    /// A valid tree has every head in range, exactly one token attached to
    /// the artificial root, and no cycles.
    pub fn tree_violation(&self) -> Option<String> {
        let n = self.tokens.len();
        for t in &self.tokens {
            if t.head > n {
                return Some(format!("token {} head {} out of range", t.id, t.head));
            }
            if t.head == t.id {
                return Some(format!("token {} is its own head", t.id));
            }
        }
        let roots = self.tokens.iter().filter(|t| t.head == 0).count();
        if roots == 0 {
            return Some("no token attached to the root".into());
        }
        if roots > 1 {
            return Some(format!("{} tokens attached to the root", roots));
        }
        // Walk up from every token; a walk longer than n steps is a cycle.
        for start in &self.tokens {
            let mut cur = start.head;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Some(format!("cycle reachable from token {}", start.id));
                }
            }
        }
        None
    }
}

fn unescape(field: &str) -> String {
    if field == "_" {
        String::new()
    } else {
        field.to_string()
    }
}

fn escape(field: &str) -> &str {
    if field.is_empty() {
        "_"
    } else {
        field
    }
}

/// Parse a CoNLL-U stream. Range lines (`1-2`) and empty nodes (`1.1`) are
/// skipped; comments are attached to the following sentence.
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<Sentence>, ConlluError> {
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.is_empty() {
            if !current.tokens.is_empty() || !current.comments.is_empty() {
                finish_sentence(&mut sentences, std::mem::take(&mut current))?;
            }
            continue;
        }
        if line.starts_with('#') {
            current.comments.push(line);
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::Format {
                line: line_no,
                details: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| ConlluError::Format {
            line: line_no,
            details: format!("token id {:?} is not an integer", cols[0]),
        })?;
        let head: usize = cols[6].parse().map_err(|_| ConlluError::Format {
            line: line_no,
            details: format!("head {:?} is not an integer", cols[6]),
        })?;
        current.tokens.push(Token {
            id,
            form: unescape(cols[1]),
            lemma: unescape(cols[2]),
            upos: unescape(cols[3]),
            xpos: unescape(cols[4]),
            feats: unescape(cols[5]),
            head,
            deprel: unescape(cols[7]),
            deps: unescape(cols[8]),
            misc: unescape(cols[9]),
        });
    }
    if !current.tokens.is_empty() || !current.comments.is_empty() {
        finish_sentence(&mut sentences, current)?;
    }
    Ok(sentences)
}

fn finish_sentence(
    sentences: &mut Vec<Sentence>,
    sentence: Sentence,
) -> Result<(), ConlluError> {
    let index = sentences.len();
    let n = sentence.tokens.len();
    for (pos, t) in sentence.tokens.iter().enumerate() {
        if t.id != pos + 1 {
            return Err(ConlluError::Validation {
                sentence: index,
                details: format!("token ids not consecutive: expected {}, found {}", pos + 1, t.id),
            });
        }
        if t.head > n {
            return Err(ConlluError::Validation {
                sentence: index,
                details: format!("token {} head {} out of range 0..={}", t.id, t.head, n),
            });
        }
    }
    sentences.push(sentence);
    Ok(())
}

pub fn parse_str(text: &str) -> Result<Vec<Sentence>, ConlluError> {
    parse_conllu(text.as_bytes())
}

pub fn parse_file(path: impl AsRef<Path>) -> Result<Vec<Sentence>, ConlluError> {
    parse_conllu(BufReader::new(File::open(path)?))
}

/// Serialize sentences back to CoNLL-U text, one blank line after each.
pub fn write_conllu(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for c in &s.comments {
            out.push_str(c);
            out.push('\n');
        }
        for t in &s.tokens {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.id,
                escape(&t.form),
                escape(&t.lemma),
                escape(&t.upos),
                escape(&t.xpos),
                escape(&t.feats),
                t.head,
                escape(&t.deprel),
                escape(&t.deps),
                escape(&t.misc),
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// Corpus size counters. Skipped range and empty-node lines are never
/// represented as tokens, so they do not count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub token_count: usize,
    pub sentence_count: usize,
}

impl DatasetStats {
    pub fn add(&mut self, other: DatasetStats) {
        self.token_count += other.token_count;
        self.sentence_count += other.sentence_count;
    }
}

pub fn dataset_stats(sentences: &[Sentence]) -> DatasetStats {
    DatasetStats {
        token_count: sentences.iter().map(|s| s.tokens.len()).sum(),
        sentence_count: sentences.len(),
    }
}

/// Split a raw FEATS string into attribute/value pairs. `""` (a `_` column)
/// gives an empty map; a repeated attribute keeps the last value.
pub fn split_feats(feats: &str) -> Result<BTreeMap<String, String>, ConlluError> {
    let mut map = BTreeMap::new();
    if feats.is_empty() {
        return Ok(map);
    }
    for pair in feats.split('|') {
        let Some((attr, value)) = pair.split_once('=') else {
            return Err(ConlluError::Format {
                line: 0,
                details: format!("feature pair {:?} has no '='", pair),
            });
        };
        if let Some(old) = map.insert(attr.to_string(), value.to_string()) {
            log::warn!("duplicate feature {attr}: {old} replaced by {value}");
        }
    }
    Ok(map)
}
