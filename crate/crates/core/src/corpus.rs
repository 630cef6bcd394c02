//! BIO corpus ingestion: parsing, validation, vocabularies and padded batches.
//!
//! The column file format is one character and one label per line, separated
//! by a single tab or space. A blank line ends a sentence; lines whose first
//! character is `#` are comments (which means `#` itself cannot be used as a
//! data character in column files).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};

/// Reserved vocabulary id for padding.
pub const PAD_ID: usize = 0;
/// Reserved vocabulary id for unknown characters.
pub const UNK_ID: usize = 1;

/// A character sequence paired with one BIO label per character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub chars: Vec<char>,
    pub labels: Vec<String>,
}

impl LabeledSentence {
    pub fn new(chars: Vec<char>, labels: Vec<String>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "sentence must contain at least one character".into(),
            });
        }
        if chars.len() != labels.len() {
            return Err(Error::Dimension {
                what: "labeled sentence",
                expected: format!("{} labels", chars.len()),
                got: format!("{}", labels.len()),
            });
        }
        Ok(Self { chars, labels })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

/// Structural reading of a single BIO label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

/// Splits a label into its BIO kind; errors on names that are neither `O`
/// nor `B-`/`I-` prefixed.
pub fn label_kind(label: &str) -> Result<LabelKind<'_>> {
    if label == "O" {
        return Ok(LabelKind::Outside);
    }
    if let Some(ty) = label.strip_prefix("B-") {
        if !ty.is_empty() {
            return Ok(LabelKind::Begin(ty));
        }
    }
    if let Some(ty) = label.strip_prefix("I-") {
        if !ty.is_empty() {
            return Ok(LabelKind::Inside(ty));
        }
    }
    Err(Error::UnknownLabel {
        label: label.to_owned(),
        line: None,
    })
}

/// Ordered, bijective label inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    /// Builds a label set from an ordered list of distinct labels.
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidConfig("label set must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    /// Entity type names in first-appearance order (e.g. PER, LOC, ...).
    pub fn entity_types(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for l in &self.labels {
            if let Ok(LabelKind::Begin(ty) | LabelKind::Inside(ty)) = label_kind(l) {
                if !seen.iter().any(|s: &String| s == ty) {
                    seen.push(ty.to_owned());
                }
            }
        }
        seen
    }
}

impl Default for LabelSet {
    /// The eleven-label inventory over the five entity types
    /// Name, Location, Judicial Organization, Docket Number and Crime Type.
    fn default() -> Self {
        Self::new([
            "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG", "B-NUM", "I-NUM", "B-CRI",
            "I-CRI", "O",
        ])
        .expect("default label set is well-formed")
    }
}

/// Character-to-id map with reserved PAD (0) and UNK (1) entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>, // chars[i] has id i + 2
    index: HashMap<char, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Number of ids, reserved entries included.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK always exist
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Id for a character; unseen characters map to UNK.
    pub fn id_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Inverse lookup for non-reserved ids.
    pub fn char_of(&self, id: usize) -> Option<char> {
        if id < 2 {
            None
        } else {
            self.chars.get(id - 2).copied()
        }
    }

    /// Non-reserved characters in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Rebuilds a vocabulary from its id-ordered character list (model load).
    pub fn from_chars(chars: Vec<char>, min_count: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + 2).is_some() {
                return Err(Error::ModelFormat(format!(
                    "duplicate vocabulary char {c:?}"
                )));
            }
        }
        Ok(Self {
            chars,
            index,
            min_count,
        })
    }
}

/// Builds a vocabulary over all characters occurring at least `min_count`
/// times, assigning ids by first occurrence.
pub fn build_vocab(sentences: &[LabeledSentence], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::InvalidConfig("min_count must be >= 1".into()));
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    for s in sentences {
        for &c in &s.chars {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut chars = Vec::new();
    let mut index = HashMap::new();
    for s in sentences {
        for &c in &s.chars {
            if counts[&c] >= min_count && !index.contains_key(&c) {
                index.insert(c, chars.len() + 2);
                chars.push(c);
            }
        }
    }
    Ok(Vocabulary {
        chars,
        index,
        min_count,
    })
}

/// Fixed-length id matrices for a batch of sentences.
///
/// Positions at or beyond a sentence's true length hold PAD in `char_ids`
/// and must be ignored by losses and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pub char_ids: Vec<Vec<usize>>,
    pub label_ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Encodes sentences to padded id matrices, truncating at `max_len`.
pub fn encode(
    sentences: &[LabeledSentence],
    vocab: &Vocabulary,
    label_set: &LabelSet,
    max_len: usize,
) -> Result<EncodedBatch> {
    if max_len < 1 {
        return Err(Error::InvalidConfig("max_len must be >= 1".into()));
    }
    let mut char_ids = Vec::with_capacity(sentences.len());
    let mut label_ids = Vec::with_capacity(sentences.len());
    let mut lengths = Vec::with_capacity(sentences.len());
    for s in sentences {
        let n = s.len().min(max_len);
        let mut crow = vec![PAD_ID; max_len];
        let mut lrow = vec![0usize; max_len];
        for i in 0..n {
            crow[i] = vocab.id_of(s.chars[i]);
            lrow[i] = label_set
                .index_of(&s.labels[i])
                .ok_or_else(|| Error::UnknownLabel {
                    label: s.labels[i].clone(),
                    line: None,
                })?;
        }
        char_ids.push(crow);
        label_ids.push(lrow);
        lengths.push(n);
    }
    Ok(EncodedBatch {
        char_ids,
        label_ids,
        lengths,
        max_len,
    })
}

/// Inverse of [`encode`] on the unpadded prefix of every row. Reserved ids
/// (PAD/UNK) cannot be decoded back to a character.
pub fn decode(
    batch: &EncodedBatch,
    vocab: &Vocabulary,
    label_set: &LabelSet,
) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::with_capacity(batch.len());
    for (row, (lrow, &n)) in batch
        .char_ids
        .iter()
        .zip(batch.label_ids.iter().zip(&batch.lengths))
    {
        let mut chars = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = vocab.char_of(row[i]).ok_or_else(|| {
                Error::ModelFormat(format!(
                    "id {} has no character (reserved or out of range)",
                    row[i]
                ))
            })?;
            if lrow[i] >= label_set.len() {
                return Err(Error::ModelFormat(format!(
                    "label id {} out of range",
                    lrow[i]
                )));
            }
            chars.push(c);
            labels.push(label_set.label(lrow[i]).to_owned());
        }
        out.push(LabeledSentence::new(chars, labels)?);
    }
    Ok(out)
}

/// Parses a BIO column stream into sentences, validating labels against
/// `label_set`. Reports the offending line number on any malformed input.
pub fn parse_bio<R: BufRead>(reader: R, label_set: &LabelSet) -> Result<Vec<LabeledSentence>> {
    let mut sentences = Vec::new();
    let mut chars: Vec<char> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.trim().is_empty() {
            if !chars.is_empty() {
                sentences.push(LabeledSentence::new(
                    std::mem::take(&mut chars),
                    std::mem::take(&mut labels),
                )?);
            }
            continue;
        }
        let (token, label) = split_line(trimmed, lineno)?;
        let mut token_chars = token.chars();
        let c = token_chars.next().ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "empty character field".into(),
        })?;
        if token_chars.next().is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("token {token:?} is not a single character"),
            });
        }
        if label_set.index_of(label).is_none() {
            return Err(Error::UnknownLabel {
                label: label.to_owned(),
                line: Some(lineno),
            });
        }
        chars.push(c);
        labels.push(label.to_owned());
    }
    if !chars.is_empty() {
        sentences.push(LabeledSentence::new(chars, labels)?);
    }
    Ok(sentences)
}

fn split_line(line: &str, lineno: usize) -> Result<(&str, &str)> {
    let sep = line.find(['\t', ' ']).ok_or_else(|| Error::Parse {
        line: lineno,
        msg: format!("expected `<char><TAB or space><label>`, got {line:?}"),
    })?;
    let (token, rest) = line.split_at(sep);
    let label = &rest[1..];
    if token.is_empty() || label.is_empty() || label.contains(['\t', ' ']) {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected exactly two fields, got {line:?}"),
        });
    }
    Ok((token, label))
}

/// Writes sentences in the column format accepted by [`parse_bio`].
pub fn serialize_bio(sentences: &[LabeledSentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (c, l) in s.chars.iter().zip(&s.labels) {
            let _ = writeln!(out, "{c}\t{l}");
        }
    }
    out
}

/// Parses a pretrained embedding file: one `<char> <v1> ... <vE>` record
/// per line, whitespace-separated. Blank lines and `#` comments are
/// skipped; every record must carry exactly `embed_dim` values.
pub fn parse_embeddings<R: BufRead>(reader: R, embed_dim: usize) -> Result<Vec<(char, Vec<f64>)>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-blank line has a first field");
        let mut chars = token.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected a single character, got {token:?}"),
            });
        };
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad value {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != embed_dim {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {embed_dim} values, got {}", values.len()),
            });
        }
        out.push((c, values));
    }
    Ok(out)
}

/// Returns every position whose label is `I-X` while the previous label is
/// neither `B-X` nor `I-X` (position 0 counts). Violations are reported,
/// never repaired.
pub fn validate_bio(labels: &[String]) -> Vec<usize> {
    let mut violations = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let Ok(LabelKind::Inside(ty)) = label_kind(label) else {
            continue;
        };
        let ok_prev = i > 0
            && matches!(
                label_kind(&labels[i - 1]),
                Ok(LabelKind::Begin(prev) | LabelKind::Inside(prev)) if prev == ty
            );
        if !ok_prev {
            violations.push(i);
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sent(chars: &str, labels: &[&str]) -> LabeledSentence {
        LabeledSentence::new(
            chars.chars().collect(),
            labels.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_two_char_person() {
        let ls = LabelSet::default();
        let out = parse_bio(Cursor::new("张 B-PER\n三 I-PER\n\n"), &ls).unwrap();
        assert_eq!(out, vec![sent("张三", &["B-PER", "I-PER"])]);
    }

    #[test]
    fn parse_empty_input() {
        let ls = LabelSet::default();
        assert!(parse_bio(Cursor::new(""), &ls).unwrap().is_empty());
    }

    #[test]
    fn parse_accepts_tab_and_space_and_comments() {
        let ls = LabelSet::default();
        let text = "# header comment\na\tB-LOC\nb I-LOC\n\nc\tO\n";
        let out = parse_bio(Cursor::new(text), &ls).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], sent("ab", &["B-LOC", "I-LOC"]));
        assert_eq!(out[1], sent("c", &["O"]));
    }

    #[test]
    fn parse_rejects_multi_char_token_with_line_number() {
        let ls = LabelSet::default();
        let err = parse_bio(Cursor::new("a\tO\nxy\tO\n"), &ls).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn parse_rejects_wrong_field_count() {
        let ls = LabelSet::default();
        assert!(parse_bio(Cursor::new("a\n"), &ls).is_err());
        assert!(parse_bio(Cursor::new("a O extra\n"), &ls).is_err());
    }

    #[test]
    fn parse_rejects_unknown_label() {
        let ls = LabelSet::default();
        let err = parse_bio(Cursor::new("a\tB-XYZ\n"), &ls).unwrap_err();
        match err {
            Error::UnknownLabel { label, line } => {
                assert_eq!(label, "B-XYZ");
                assert_eq!(line, Some(1));
            }
            other => panic!("expected unknown label, got {other}"),
        }
    }

    #[test]
    fn roundtrip_three_sentences_all_label_categories() {
        let ls = LabelSet::default();
        let sents = vec![
            sent("张三犯", &["B-PER", "I-PER", "O"]),
            sent("北京市法院", &["B-LOC", "I-LOC", "I-LOC", "B-ORG", "I-ORG"]),
            sent("12抢劫", &["B-NUM", "I-NUM", "B-CRI", "I-CRI"]),
        ];
        let text = serialize_bio(&sents);
        let parsed = parse_bio(Cursor::new(text), &ls).unwrap();
        assert_eq!(parsed, sents);
        // label multiset is preserved
        let mut before: Vec<&String> = sents.iter().flat_map(|s| &s.labels).collect();
        let mut after: Vec<&String> = parsed.iter().flat_map(|s| &s.labels).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn validate_bio_paper_example() {
        // I-ORG must not follow B-LOC
        let labels = vec!["B-LOC".to_string(), "I-ORG".to_string()];
        assert_eq!(validate_bio(&labels), vec![1]);
    }

    #[test]
    fn validate_bio_all_outside() {
        let labels = vec!["O".to_string(); 3];
        assert!(validate_bio(&labels).is_empty());
    }

    #[test]
    fn validate_bio_rule_by_position() {
        let labels: Vec<String> = ["I-PER", "B-ORG", "I-ORG", "I-LOC"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(validate_bio(&labels), vec![0, 3]);
    }

    #[test]
    fn build_vocab_threshold() {
        let sents = vec![sent("aba", &["O", "O", "O"])];
        let v = build_vocab(&sents, 2).unwrap();
        assert_eq!(v.id_of('a'), 2);
        assert_eq!(v.id_of('b'), UNK_ID);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn build_vocab_min_count_one() {
        let sents = vec![sent("xy", &["O", "O"])];
        let v = build_vocab(&sents, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id_of('x'), 2);
        assert_eq!(v.id_of('y'), 3);
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let sents = vec![sent("cab", &["O", "O", "O"]), sent("bca", &["O", "O", "O"])];
        let a = build_vocab(&sents, 1).unwrap();
        let b = build_vocab(&sents, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_vocab_empty_corpus_errors() {
        assert!(matches!(build_vocab(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_pads_and_records_length() {
        let ls = LabelSet::default();
        let sents = vec![sent("ab", &["B-PER", "I-PER"])];
        let v = build_vocab(&sents, 1).unwrap();
        let batch = encode(&sents, &v, &ls, 4).unwrap();
        assert_eq!(batch.char_ids[0], vec![2, 3, PAD_ID, PAD_ID]);
        assert_eq!(batch.lengths, vec![2]);
    }

    #[test]
    fn encode_truncates_long_sentences() {
        let ls = LabelSet::default();
        let sents = vec![sent("abcde", &["O", "O", "O", "O", "O"])];
        let v = build_vocab(&sents, 1).unwrap();
        let batch = encode(&sents, &v, &ls, 3).unwrap();
        assert_eq!(batch.char_ids[0].len(), 3);
        assert_eq!(batch.char_ids[0], vec![2, 3, 4]);
        assert_eq!(batch.lengths, vec![3]);
    }

    #[test]
    fn encode_ids_stay_in_range() {
        let ls = LabelSet::default();
        let sents = vec![
            sent("abc", &["B-PER", "I-PER", "O"]),
            sent("xyz", &["B-CRI", "I-CRI", "O"]),
        ];
        let v = build_vocab(&sents, 1).unwrap();
        let batch = encode(&sents, &v, &ls, 5).unwrap();
        for row in &batch.char_ids {
            assert!(row.iter().all(|&id| id < v.len()));
        }
        for row in &batch.label_ids {
            assert!(row.iter().all(|&id| id < ls.len()));
        }
    }

    #[test]
    fn decode_inverts_encode_within_max_len() {
        let ls = LabelSet::default();
        let sents = vec![
            sent("ab", &["B-PER", "I-PER"]),
            sent("cde", &["B-LOC", "I-LOC", "O"]),
        ];
        let v = build_vocab(&sents, 1).unwrap();
        let batch = encode(&sents, &v, &ls, 8).unwrap();
        assert_eq!(decode(&batch, &v, &ls).unwrap(), sents);
    }

    #[test]
    fn label_set_entity_types_in_order() {
        let ls = LabelSet::default();
        assert_eq!(ls.entity_types(), vec!["PER", "LOC", "ORG", "NUM", "CRI"]);
        assert_eq!(ls.len(), 11);
    }

    #[test]
    fn label_kind_rejects_malformed() {
        assert!(label_kind("B-").is_err());
        assert!(label_kind("X-PER").is_err());
        assert!(label_kind("").is_err());
        assert!(matches!(label_kind("I-LOC"), Ok(LabelKind::Inside("LOC"))));
    }

    #[test]
    fn embeddings_parse_values_per_char() {
        let text = "# comment\n张 0.5 -1.25 3\n\n三 1 2 4.5\n";
        let vecs = parse_embeddings(Cursor::new(text), 3).unwrap();
        assert_eq!(
            vecs,
            vec![('张', vec![0.5, -1.25, 3.0]), ('三', vec![1.0, 2.0, 4.5]),]
        );
    }

    #[test]
    fn embeddings_reject_bad_records() {
        // wrong arity
        let err = parse_embeddings(Cursor::new("a 1 2\n"), 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        // multi-char token
        assert!(parse_embeddings(Cursor::new("ab 1 2 3\n"), 3).is_err());
        // non-numeric value
        assert!(parse_embeddings(Cursor::new("a 1 x 3\n"), 3).is_err());
    }
}
