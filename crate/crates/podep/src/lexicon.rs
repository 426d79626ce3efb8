//! Vocabularies for characters, dependency labels, and POS attributes.
//!
//! Built from the training split only. Characters are Unicode scalar values
//! with four reserved ids; labels are dense 0..k-1; every POS attribute
//! reserves id 0 for values unseen in training. UPOS participates as an
//! ordinary attribute named "UPOS" next to the split morphological features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{split_feats, ConlluError, Sentence};

pub const PAD: usize = 0;
pub const UNK_CHAR: usize = 1;
pub const BOW: usize = 2;
pub const EOW: usize = 3;
const RESERVED_CHARS: usize = 4;

/// Attribute id 0 is the unseen-value slot.
pub const UNK_VALUE: usize = 0;

#[derive(Error, Debug)]
pub enum LexiconError {
    #[error("cannot build a lexicon from an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Conllu(#[from] ConlluError),
}

/// One categorical tagging target: an attribute name and its value inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosAttr {
    pub name: String,
    /// Values in id order, starting at id 1 (id 0 is [`UNK_VALUE`]).
    values: Vec<String>,
    value_ids: BTreeMap<String, usize>,
}

impl PosAttr {
    /// Number of classes including the unseen-value slot.
    pub fn class_count(&self) -> usize {
        self.values.len() + 1
    }

    pub fn value_id(&self, value: &str) -> usize {
        self.value_ids.get(value).copied().unwrap_or(UNK_VALUE)
    }

    pub fn value_name(&self, id: usize) -> &str {
        if id == UNK_VALUE {
            "<unk>"
        } else {
            &self.values[id - 1]
        }
    }
}

/// Immutable mapping between surface symbols and dense ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    chars: BTreeMap<char, usize>,
    labels: Vec<String>,
    label_ids: BTreeMap<String, usize>,
    attrs: Vec<PosAttr>,
}

impl Lexicon {
    /// Collect inventories from the training split. Symbol ids follow sorted
    /// order, so the result is independent of sentence order.
    pub fn build(train: &[Sentence]) -> Result<Self, LexiconError> {
        if train.iter().all(|s| s.tokens.is_empty()) {
            return Err(LexiconError::EmptyCorpus);
        }
        let mut chars = std::collections::BTreeSet::new();
        let mut labels = std::collections::BTreeSet::new();
        let mut attr_values: BTreeMap<String, std::collections::BTreeSet<String>> =
            BTreeMap::new();
        for s in train {
            for t in &s.tokens {
                chars.extend(t.form.chars());
                labels.insert(t.deprel.clone());
                if !t.upos.is_empty() {
                    attr_values.entry("UPOS".into()).or_default().insert(t.upos.clone());
                }
                for (attr, value) in split_feats(&t.feats)? {
                    attr_values.entry(attr).or_default().insert(value);
                }
            }
        }
        let chars = chars
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i + RESERVED_CHARS))
            .collect();
        let labels: Vec<String> = labels.into_iter().collect();
        let label_ids = labels.iter().cloned().zip(0..).collect();
        let attrs = attr_values
            .into_iter()
            .map(|(name, values)| {
                let values: Vec<String> = values.into_iter().collect();
                let value_ids = values.iter().cloned().zip(1..).collect();
                PosAttr { name, values, value_ids }
            })
            .collect();
        Ok(Lexicon { chars, labels, label_ids, attrs })
    }

    /// Character ids of a form, fenced with the word markers. Length is
    /// always `|form| + 2` in scalar values.
    pub fn encode_word(&self, form: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(form.chars().count() + 2);
        ids.push(BOW);
        ids.extend(form.chars().map(|c| self.chars.get(&c).copied().unwrap_or(UNK_CHAR)));
        ids.push(EOW);
        ids
    }

    /// Size of the character embedding table (reserved ids included).
    pub fn char_table_size(&self) -> usize {
        RESERVED_CHARS + self.chars.len()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, deprel: &str) -> Option<usize> {
        self.label_ids.get(deprel).copied()
    }

    pub fn label_name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn attrs(&self) -> &[PosAttr] {
        &self.attrs
    }

    /// Training targets for one sentence.
    ///
    /// A deprel absent from the training inventory maps to label 0 with a
    /// warning; that only happens when encoding data the lexicon was not
    /// built from. A (token, attribute) pair is supervised only when the
    /// token carries that attribute.
    pub fn encode_sentence(&self, sentence: &Sentence) -> EncodedSentence {
        let n = sentence.tokens.len();
        let char_ids = sentence.tokens.iter().map(|t| self.encode_word(&t.form)).collect();
        let heads = sentence.heads();
        let label_ids = sentence
            .tokens
            .iter()
            .map(|t| {
                self.label_id(&t.deprel).unwrap_or_else(|| {
                    log::warn!("deprel {:?} not in the training inventory", t.deprel);
                    0
                })
            })
            .collect();
        let mut attr_targets = vec![vec![None; n]; self.attrs.len()];
        for (ti, t) in sentence.tokens.iter().enumerate() {
            let feats = split_feats(&t.feats).unwrap_or_default();
            for (ai, attr) in self.attrs.iter().enumerate() {
                let value = if attr.name == "UPOS" {
                    (!t.upos.is_empty()).then_some(t.upos.as_str())
                } else {
                    feats.get(&attr.name).map(String::as_str)
                };
                attr_targets[ai][ti] = value.map(|v| attr.value_id(v));
            }
        }
        EncodedSentence { char_ids, heads, label_ids, attr_targets }
    }
}

/// Integer view of one sentence, ready for the network.
#[derive(Clone, Debug)]
pub struct EncodedSentence {
    /// Fenced character ids per token.
    pub char_ids: Vec<Vec<usize>>,
    /// Gold head per token (0 = root).
    pub heads: Vec<usize>,
    /// Gold dependency label id per token.
    pub label_ids: Vec<usize>,
    /// Per attribute, per token: gold value id, `None` when unsupervised.
    pub attr_targets: Vec<Vec<Option<usize>>>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::parse_str;

    fn corpus() -> Vec<Sentence> {
        parse_str(
            "1\tkot\tkot\tNOUN\t_\tCase=Nom\t2\tnsubj\t_\t_\n\
             2\tab\tab\tVERB\t_\t_\t0\troot\t_\t_\n\n",
        )
        .unwrap()
    }

    #[test]
    fn char_ids_cover_training_characters_plus_reserved() {
        let lex = Lexicon::build(&corpus()).unwrap();
        // Characters {a, b, k, o, t} plus the 4 reserved ids.
        assert_eq!(lex.char_table_size(), 9);
    }

    #[test]
    fn labels_get_dense_ids() {
        let lex = Lexicon::build(&corpus()).unwrap();
        assert_eq!(lex.label_count(), 2);
        let a = lex.label_id("nsubj").unwrap();
        let b = lex.label_id("root").unwrap();
        assert_eq!(lex.label_name(a), "nsubj");
        assert_eq!(lex.label_name(b), "root");
        assert_eq!([a, b].iter().copied().min(), Some(0));
        assert_eq!([a, b].iter().copied().max(), Some(1));
    }

    #[test]
    fn encode_word_fences_and_lengths() {
        let lex = Lexicon::build(&corpus()).unwrap();
        let kot = lex.encode_word("kot");
        assert_eq!(kot.len(), 5);
        assert_eq!(kot[0], BOW);
        assert_eq!(kot[4], EOW);
        assert!(kot[1..4].iter().all(|&id| id >= RESERVED_CHARS));

        assert_eq!(lex.encode_word(""), vec![BOW, EOW]);
    }

    #[test]
    fn unseen_character_maps_to_unk() {
        let lex = Lexicon::build(&corpus()).unwrap();
        let ids = lex.encode_word("k✗t");
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[2], UNK_CHAR);
        assert_ne!(ids[1], UNK_CHAR);
        assert_ne!(ids[3], UNK_CHAR);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Lexicon::build(&[]), Err(LexiconError::EmptyCorpus)));
    }

    #[test]
    fn upos_is_an_attribute_and_unseen_values_hit_unk() {
        let lex = Lexicon::build(&corpus()).unwrap();
        let upos = lex.attrs().iter().find(|a| a.name == "UPOS").unwrap();
        assert_eq!(upos.class_count(), 3);
        assert_ne!(upos.value_id("NOUN"), UNK_VALUE);
        assert_eq!(upos.value_id("ADJ"), UNK_VALUE);
        assert_eq!(upos.value_name(upos.value_id("VERB")), "VERB");
    }

    #[test]
    fn encode_sentence_marks_unsupervised_pairs() {
        let lex = Lexicon::build(&corpus()).unwrap();
        let enc = lex.encode_sentence(&corpus()[0]);
        assert_eq!(enc.heads, vec![2, 0]);
        assert_eq!(enc.len(), 2);
        let case_idx = lex.attrs().iter().position(|a| a.name == "Case").unwrap();
        assert!(enc.attr_targets[case_idx][0].is_some());
        assert_eq!(enc.attr_targets[case_idx][1], None);
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let lex = Lexicon::build(&corpus()).unwrap();
        let json = serde_json::to_string(&lex).unwrap();
        let back: Lexicon = serde_json::from_str(&json).unwrap();
        assert_eq!(lex, back);
    }
}
