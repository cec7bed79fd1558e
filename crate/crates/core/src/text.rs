//! Closed-vocabulary tokenizer, embedding lookup and prompt alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed token-sequence length.
pub const MAX_TOKENS: usize = 12;
/// Width of a token embedding.
pub const TEXT_DIM: usize = 64;

pub const PAD: usize = 0;
pub const NULL: usize = 1;

const WORDS: &[&str] = &[
    "<pad>", "<null>",
    // scene grammar
    "a", "big", "small", "red", "green", "blue", "yellow", "square", "circle", "triangle", "on",
    "white", "black", "gray", "background", ",", "striped", "plain",
    // free words for hand-written prompts
    "the", "an", "of", "and", "with", "next", "to", "my", "new", "photo", "drawing", "children",
    "castle", "river", "bicycle", "car", "cake", "lemon", "pumpkin", "dotted",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            words: WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    /// Validates a deserialised word list (reserved tokens first, no repeats).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD] != "<pad>" || words[NULL] != "<null>" {
            return Err(Error::Config("vocabulary must start with <pad>, <null>".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = words.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::Config(format!("duplicate vocabulary word {dup:?}")));
        }
        Ok(Vocabulary { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Split on whitespace, with commas as tokens of their own.
    fn lex(prompt: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for chunk in prompt.split_whitespace() {
            let mut rest = chunk;
            while let Some(pos) = rest.find(',') {
                if pos > 0 {
                    out.push(&rest[..pos]);
                }
                out.push(",");
                rest = &rest[pos + 1..];
            }
            if !rest.is_empty() {
                out.push(rest);
            }
        }
        out
    }

    pub fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        let words = Self::lex(prompt);
        if words.len() > MAX_TOKENS {
            return Err(Error::PromptTooLong {
                len: words.len(),
                max: MAX_TOKENS,
            });
        }
        let mut ids = [PAD; MAX_TOKENS];
        for (position, w) in words.iter().enumerate() {
            let id = match self.lookup(w) {
                Some(id) if id != PAD && id != NULL => id,
                _ => {
                    return Err(Error::UnknownWord {
                        word: w.to_string(),
                        position,
                    })
                }
            };
            ids[position] = id;
        }
        Ok(TokenSequence {
            ids,
            length: words.len(),
        })
    }

    pub fn detokenize(&self, tokens: &TokenSequence) -> String {
        let mut out = String::new();
        for &id in tokens.real() {
            let w = self.word(id);
            if !out.is_empty() && w != "," {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    /// Words of the real tokens, in order.
    pub fn token_words(&self, tokens: &TokenSequence) -> Vec<String> {
        tokens.real().iter().map(|&id| self.word(id).to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: [usize; MAX_TOKENS],
    length: usize,
}

impl TokenSequence {
    /// The unconditional sequence used for classifier-free guidance.
    pub fn null() -> Self {
        let mut ids = [PAD; MAX_TOKENS];
        ids[0] = NULL;
        TokenSequence { ids, length: 1 }
    }

    pub fn ids(&self) -> &[usize; MAX_TOKENS] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn real(&self) -> &[usize] {
        &self.ids[..self.length]
    }
}

/// Embedding rows for every slot of the sequence, `[MAX_TOKENS, D]`.
pub fn embed<F: Scalar>(tokens: &TokenSequence, table: &Tensor<F>) -> Result<Tensor<F>> {
    if table.shape().len() != 2 {
        return Err(Error::dim("embed", format!("table {:?}", table.shape())));
    }
    let mut rows = Vec::with_capacity(MAX_TOKENS * table.cols());
    for &id in tokens.ids() {
        if id >= table.rows() {
            return Err(Error::dim(
                "embed",
                format!("token {id} with {} table rows", table.rows()),
            ));
        }
        rows.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(vec![MAX_TOKENS, table.cols()], rows)
}

/// Target slot → source slot (or `None`), over all `MAX_TOKENS` slots.
///
/// Mapped source indices are strictly increasing and every mapped pair holds
/// equal token ids. Padding slots are paired positionally after the real
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    entries: Vec<Option<usize>>,
}

impl AlignmentMap {
    pub fn identity() -> Self {
        AlignmentMap {
            entries: (0..MAX_TOKENS).map(Some).collect(),
        }
    }

    pub fn from_entries(entries: Vec<Option<usize>>) -> Result<Self> {
        if entries.len() != MAX_TOKENS {
            return Err(Error::Contract(format!(
                "alignment has {} entries, expected {MAX_TOKENS}",
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().flatten().find(|&&i| i >= MAX_TOKENS) {
            return Err(Error::Contract(format!("alignment index {bad} out of range")));
        }
        Ok(AlignmentMap { entries })
    }

    pub fn get(&self, target: usize) -> Option<usize> {
        self.entries[target]
    }

    pub fn entries(&self) -> &[Option<usize>] {
        &self.entries
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().enumerate().all(|(j, e)| *e == Some(j))
    }
}

/// Longest-common-subsequence pairing of real tokens, as `(source, target)`
/// index pairs in increasing order. Ties prefer the earliest source match.
pub fn lcs_pairs(source: &[usize], target: &[usize]) -> Vec<(usize, usize)> {
    let (n, m) = (source.len(), target.len());
    // suffix[i][j] = LCS length of source[i..] and target[j..]
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if source[i] == target[j] {
                1 + suffix[i + 1][j + 1]
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(suffix[0][0]);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if source[i] == target[j] && suffix[i][j] == 1 + suffix[i + 1][j + 1] {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if suffix[i][j + 1] == suffix[i][j] {
            j += 1;
        } else {
            i += 1;
        }
    }
    pairs
}

/// Alignment used by phrase refinement: LCS over real tokens, `None` for
/// target tokens outside it.
pub fn align(source: &TokenSequence, target: &TokenSequence) -> AlignmentMap {
    let mut entries = vec![None; MAX_TOKENS];
    for (s, t) in lcs_pairs(source.real(), target.real()) {
        entries[t] = Some(s);
    }
    for (k, slot) in entries.iter_mut().enumerate().skip(target.len()) {
        let s = source.len() + (k - target.len());
        if s < MAX_TOKENS {
            *slot = Some(s);
        }
    }
    AlignmentMap { entries }
}

/// Where one target attention column takes its injected values from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSource {
    /// Keep the target's own column.
    Own,
    /// Copy one source column (possibly shared by several target columns).
    Source(usize),
    /// Uniform average of several source columns.
    Average(Vec<usize>),
}

impl ColumnSource {
    /// Source column whose injection schedule governs this target column.
    pub fn lead(&self) -> Option<usize> {
        match self {
            ColumnSource::Own => None,
            ColumnSource::Source(i) => Some(*i),
            ColumnSource::Average(v) => v.first().copied(),
        }
    }
}

/// Column-level recipe for building an injected map in target token space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub columns: Vec<ColumnSource>,
}

impl ColumnMap {
    pub fn identity() -> Self {
        ColumnMap {
            columns: (0..MAX_TOKENS).map(ColumnSource::Source).collect(),
        }
    }

    pub fn from_alignment(a: &AlignmentMap) -> Self {
        ColumnMap {
            columns: a
                .entries()
                .iter()
                .map(|e| e.map_or(ColumnSource::Own, ColumnSource::Source))
                .collect(),
        }
    }
}

/// Word-swap column map: LCS anchors, with each run of unmatched target tokens
/// taking the run of unmatched source tokens between the same anchors.
/// Longer target runs duplicate source columns, shorter ones average them.
pub fn swap_columns(source: &TokenSequence, target: &TokenSequence) -> ColumnMap {
    let mut columns = vec![ColumnSource::Own; MAX_TOKENS];
    let pairs = lcs_pairs(source.real(), target.real());
    let mut prev = (0usize, 0usize);
    let mut spans = Vec::new();
    for &(s, t) in &pairs {
        spans.push((prev.0..s, prev.1..t));
        columns[t] = ColumnSource::Source(s);
        prev = (s + 1, t + 1);
    }
    spans.push((prev.0..source.len(), prev.1..target.len()));
    for (src, tgt) in spans {
        let (n, m) = (src.len(), tgt.len());
        if n == 0 || m == 0 {
            continue;
        }
        for k in 0..m {
            let lo = k * n / m;
            let hi = ((k + 1) * n / m).max(lo + 1);
            columns[tgt.start + k] = if hi - lo == 1 {
                ColumnSource::Source(src.start + lo)
            } else {
                ColumnSource::Average((src.start + lo..src.start + hi).collect())
            };
        }
    }
    for (k, col) in columns.iter_mut().enumerate().skip(target.len()) {
        let s = source.len() + (k - target.len());
        if s < MAX_TOKENS {
            *col = ColumnSource::Source(s);
        }
    }
    ColumnMap { columns }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    #[test]
    fn empty_prompt_is_all_padding() {
        let t = vocab().tokenize("").unwrap();
        assert_eq!(t.len(), 0);
        assert!(t.ids().iter().all(|&id| id == PAD));
    }

    #[test]
    fn scene_prompt_has_seven_tokens() {
        let t = vocab().tokenize("a red square on a blue background").unwrap();
        assert_eq!(t.len(), 7);
        assert!(t.ids()[7..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn unknown_word_is_reported() {
        match vocab().tokenize("xyzzy") {
            Err(Error::UnknownWord { word, position }) => {
                assert_eq!(word, "xyzzy");
                assert_eq!(position, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let p = "a a a a a a a a a a a a a";
        assert!(matches!(
            vocab().tokenize(p),
            Err(Error::PromptTooLong { len: 13, .. })
        ));
    }

    #[test]
    fn commas_are_tokens() {
        let v = vocab();
        let t = v.tokenize("a big red square on a white background, striped").unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(v.word(t.ids()[8]), ",");
        assert_eq!(v.detokenize(&t), "a big red square on a white background, striped");
    }

    #[test]
    fn vocabulary_size_and_reserved_ids() {
        let v = vocab();
        assert_eq!(v.lookup("<pad>"), Some(PAD));
        assert_eq!(v.lookup("<null>"), Some(NULL));
        assert!((36..=44).contains(&v.len()));
    }

    #[test]
    fn reserved_words_are_not_promptable() {
        assert!(vocab().tokenize("<null>").is_err());
    }

    #[test]
    fn embed_all_padding_repeats_pad_row() {
        let table = Tensor::<f32>::from_vec(
            vec![4, 3],
            (0..12).map(|i| i as f32).collect(),
        )
        .unwrap();
        let e = embed(&vocab().tokenize("").unwrap(), &table).unwrap();
        for r in 0..MAX_TOKENS {
            assert_eq!(e.row(r), table.row(PAD));
        }
    }

    #[test]
    fn one_hot_table_gives_one_hot_rows() {
        let v = vocab();
        let table = Tensor::<f32>::eye(v.len());
        let t = v.tokenize("a small green circle").unwrap();
        let e = embed(&t, &table).unwrap();
        for (r, &id) in t.ids().iter().enumerate() {
            for c in 0..v.len() {
                assert_eq!(e.get2(r, c), if c == id { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn shared_prefix_rows_agree() {
        let v = vocab();
        let table = Tensor::<f32>::from_vec(
            vec![v.len(), 5],
            (0..v.len() * 5).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let a = embed(&v.tokenize("a big red square").unwrap(), &table).unwrap();
        let b = embed(&v.tokenize("a big red circle").unwrap(), &table).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn self_alignment_is_identity() {
        let v = vocab();
        let p = v.tokenize("a big red square on a white background").unwrap();
        assert!(align(&p, &p).is_identity());
        assert_eq!(swap_columns(&p, &p), ColumnMap::identity());
    }

    #[test]
    fn castle_refinement_alignment() {
        let v = vocab();
        let src = v.tokenize("a castle next to a river").unwrap();
        let dst = v.tokenize("children drawing of a castle next to a river").unwrap();
        let a = align(&src, &dst);
        assert_eq!(&a.entries()[..3], &[None, None, None]);
        for k in 0..6 {
            assert_eq!(a.get(3 + k), Some(k));
        }
    }

    #[test]
    fn word_swap_falls_back_positionally() {
        let v = vocab();
        let src = v.tokenize("a big red bicycle").unwrap();
        let dst = v.tokenize("a big red car").unwrap();
        let a = align(&src, &dst);
        assert_eq!(&a.entries()[..4], &[Some(0), Some(1), Some(2), None]);
        let cols = swap_columns(&src, &dst);
        assert_eq!(cols.columns[3], ColumnSource::Source(3));
    }

    #[test]
    fn swap_duplicates_and_averages_spans() {
        let v = vocab();
        let src = v.tokenize("a red square on a white background").unwrap();
        let dst = v.tokenize("a big blue square on a white background").unwrap();
        // "red" (1) is replaced by "big blue" (1, 2): duplicated.
        let cols = swap_columns(&src, &dst);
        assert_eq!(cols.columns[1], ColumnSource::Source(1));
        assert_eq!(cols.columns[2], ColumnSource::Source(1));
        assert_eq!(cols.columns[3], ColumnSource::Source(2));
        // and the reverse direction averages.
        let back = swap_columns(&dst, &src);
        assert_eq!(back.columns[1], ColumnSource::Average(vec![1, 2]));
        assert_eq!(back.columns[2], ColumnSource::Source(3));
    }
}
