// SPDX-License-Identifier: Apache-2.0

//! Tokenized parallel text, vocabularies and Pharaoh word alignments.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense id of a vocabulary entry. Three sentinel ids sit at the top of the
/// range and never index a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Test-time token that never occurred in training; its cache is empty.
    pub const UNK: TokenId = TokenId(u32::MAX);
    /// End of sentence, emitted by decoders.
    pub const EOS: TokenId = TokenId(u32::MAX - 1);
    /// Left sentence boundary, used as padding by context embedders.
    pub const BOS: TokenId = TokenId(u32::MAX - 2);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_special(self) -> bool {
        self.0 >= Self::BOS.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TokenId::UNK => f.write_str("<unk>"),
            TokenId::EOS => f.write_str("</s>"),
            TokenId::BOS => f.write_str("<s>"),
            TokenId(i) => write!(f, "{i}"),
        }
    }
}

/// A token position: sentence index and zero-based position in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Loc {
    pub sent: u32,
    pub pos: u32,
}

impl Loc {
    pub fn new(sent: usize, pos: usize) -> Self {
        Loc {
            sent: sent as u32,
            pos: pos as u32,
        }
    }
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sent, self.pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn code(self) -> u8 {
        match self {
            Side::Source => 0,
            Side::Target => 1,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "source",
            Side::Target => "target",
        })
    }
}

/// Corpus-derived vocabulary with occurrence counts, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
    ids: HashMap<String, TokenId>,
    freq: Vec<u64>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one occurrence of `token`, inserting it if new.
    pub fn observe(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            self.freq[id.index()] += 1;
            return id;
        }
        let id = TokenId(self.entries.len() as u32);
        self.entries.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        self.freq.push(1);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(TokenId::UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        match id {
            TokenId::UNK => "<unk>",
            TokenId::EOS => "</s>",
            TokenId::BOS => "<s>",
            _ => self.entries.get(id.index()).map_or("<unk>", String::as_str),
        }
    }

    pub fn freq(&self, id: TokenId) -> u64 {
        self.freq.get(id.index()).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn total_count(&self) -> u64 {
        self.freq.iter().sum()
    }

    /// Whitespace-tokenizes `line`; unknown tokens map to [`TokenId::UNK`].
    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `token<TAB>count` line per entry, in id order.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (t, f) in self.entries.iter().zip(&self.freq) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&f.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Vocabulary::new();
        for (i, line) in text.lines().enumerate() {
            let bad = || Error::BadHeader {
                what: "vocabulary",
                detail: format!("line {}: expected token<TAB>count", i + 1),
            };
            let (tok, count) = line.split_once('\t').ok_or_else(bad)?;
            let count: u64 = count.parse().map_err(|_| bad())?;
            if tok.is_empty() || v.ids.contains_key(tok) {
                return Err(bad());
            }
            let id = TokenId(v.entries.len() as u32);
            v.entries.push(tok.to_string());
            v.ids.insert(tok.to_string(), id);
            v.freq.push(count);
        }
        Ok(v)
    }
}

pub type Alignment = Vec<(u32, u32)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    /// Sorted, duplicate-free `(src_pos, tgt_pos)` pairs.
    pub alignment: Alignment,
}

impl SentencePair {
    /// Source positions with no alignment pair; they contribute no cache entry.
    pub fn unaligned_source_positions(&self) -> Vec<usize> {
        let mut aligned = vec![false; self.src.len()];
        for &(s, _) in &self.alignment {
            aligned[s as usize] = true;
        }
        (0..self.src.len()).filter(|&p| !aligned[p]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub vocab_src: Vocabulary,
    pub vocab_tgt: Vocabulary,
    src_offsets: Vec<usize>,
    tgt_offsets: Vec<usize>,
}

impl ParallelCorpus {
    /// Builds a corpus from whitespace-tokenized lines. Alignments start empty.
    pub fn from_lines<S: AsRef<str>, T: AsRef<str>>(src: &[S], tgt: &[T]) -> Result<Self> {
        if src.is_empty() && tgt.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if src.len() != tgt.len() {
            return Err(Error::LineCountMismatch {
                src_lines: src.len(),
                tgt_lines: tgt.len(),
            });
        }
        let mut vocab_src = Vocabulary::new();
        let mut vocab_tgt = Vocabulary::new();
        let mut pairs = Vec::with_capacity(src.len());
        for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
            let s_ids: Vec<TokenId> = s
                .as_ref()
                .split_whitespace()
                .map(|tok| vocab_src.observe(tok))
                .collect();
            if s_ids.is_empty() {
                return Err(Error::EmptyLine {
                    side: "source",
                    line: i + 1,
                });
            }
            let t_ids: Vec<TokenId> = t
                .as_ref()
                .split_whitespace()
                .map(|tok| vocab_tgt.observe(tok))
                .collect();
            if t_ids.is_empty() {
                return Err(Error::EmptyLine {
                    side: "target",
                    line: i + 1,
                });
            }
            pairs.push(SentencePair {
                src: s_ids,
                tgt: t_ids,
                alignment: Vec::new(),
            });
        }
        let src_offsets = offsets(pairs.iter().map(|p| p.src.len()));
        let tgt_offsets = offsets(pairs.iter().map(|p| p.tgt.len()));
        Ok(ParallelCorpus {
            pairs,
            vocab_src,
            vocab_tgt,
            src_offsets,
            tgt_offsets,
        })
    }

    /// Attaches one alignment set per pair, validating every index.
    pub fn with_alignments(mut self, alignments: Vec<Alignment>) -> Result<Self> {
        if alignments.len() != self.pairs.len() {
            return Err(Error::AlignmentLineCount {
                expected: self.pairs.len(),
                found: alignments.len(),
            });
        }
        for (i, (pair, mut a)) in self.pairs.iter_mut().zip(alignments).enumerate() {
            for &(s, t) in &a {
                if s as usize >= pair.src.len() || t as usize >= pair.tgt.len() {
                    return Err(Error::AlignmentOutOfRange {
                        line: i + 1,
                        src: s as usize,
                        tgt: t as usize,
                        src_len: pair.src.len(),
                        tgt_len: pair.tgt.len(),
                    });
                }
            }
            a.sort_unstable();
            a.dedup();
            pair.alignment = a;
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of source tokens.
    pub fn source_token_count(&self) -> usize {
        *self.src_offsets.last().unwrap_or(&0)
    }

    /// Total number of target tokens; the size of a vanilla datastore.
    pub fn target_token_count(&self) -> usize {
        *self.tgt_offsets.last().unwrap_or(&0)
    }

    pub fn token_count(&self, side: Side) -> usize {
        match side {
            Side::Source => self.source_token_count(),
            Side::Target => self.target_token_count(),
        }
    }

    pub fn alignment_pair_count(&self) -> usize {
        self.pairs.iter().map(|p| p.alignment.len()).sum()
    }

    /// Row offsets of each sentence in a flattened per-token matrix, plus the
    /// total as the last element.
    pub fn offsets(&self, side: Side) -> &[usize] {
        match side {
            Side::Source => &self.src_offsets,
            Side::Target => &self.tgt_offsets,
        }
    }

    pub fn row(&self, side: Side, loc: Loc) -> usize {
        self.offsets(side)[loc.sent as usize] + loc.pos as usize
    }

    pub fn loc(&self, side: Side, row: usize) -> Loc {
        let offs = self.offsets(side);
        let sent = offs.partition_point(|&o| o <= row) - 1;
        Loc::new(sent, row - offs[sent])
    }

    pub fn token_at(&self, side: Side, loc: Loc) -> TokenId {
        let pair = &self.pairs[loc.sent as usize];
        match side {
            Side::Source => pair.src[loc.pos as usize],
            Side::Target => pair.tgt[loc.pos as usize],
        }
    }

    pub fn sentence_lengths(&self, side: Side) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|p| match side {
                Side::Source => p.src.len(),
                Side::Target => p.tgt.len(),
            })
            .collect()
    }

    /// Canonical text form: one sentence per line, single spaces, trailing newline.
    pub fn to_text(&self) -> (String, String) {
        let mut src = String::new();
        let mut tgt = String::new();
        for p in &self.pairs {
            src.push_str(&self.vocab_src.decode(&p.src));
            src.push('\n');
            tgt.push_str(&self.vocab_tgt.decode(&p.tgt));
            tgt.push('\n');
        }
        (src, tgt)
    }

    pub fn alignment_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format_pharaoh(&p.alignment));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        let (s, t) = self.to_text();
        fs::write(src_path, s).map_err(|e| Error::io(src_path, e))?;
        fs::write(tgt_path, t).map_err(|e| Error::io(tgt_path, e))?;
        Ok(())
    }
}

fn offsets(lens: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    let mut acc = 0;
    for l in lens {
        acc += l;
        out.push(acc);
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a sentence-aligned corpus from two whitespace-tokenized files.
pub fn load_parallel_corpus(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    let src = read_text(src_path)?;
    let tgt = read_text(tgt_path)?;
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    ParallelCorpus::from_lines(&src_lines, &tgt_lines)
}

/// Parses one Pharaoh line ("0-0 1-2 ..."). `line_no` is only used in errors.
pub fn parse_pharaoh(line: &str, line_no: usize) -> Result<Alignment> {
    line.split_whitespace()
        .map(|tok| {
            let malformed = || Error::MalformedAlignment {
                line: line_no,
                token: tok.to_string(),
            };
            let (a, b) = tok.split_once('-').ok_or_else(malformed)?;
            let s = a.parse::<u32>().map_err(|_| malformed())?;
            let t = b.parse::<u32>().map_err(|_| malformed())?;
            Ok((s, t))
        })
        .collect()
}

pub fn format_pharaoh(alignment: &[(u32, u32)]) -> String {
    alignment
        .iter()
        .map(|(s, t)| format!("{s}-{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_alignment_text(text: &str) -> Result<Vec<Alignment>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| parse_pharaoh(l, i + 1))
        .collect()
}

/// Attaches the alignments in the Pharaoh file at `path` to `corpus`.
pub fn load_alignments(path: &Path, corpus: ParallelCorpus) -> Result<ParallelCorpus> {
    let text = read_text(path)?;
    corpus.with_alignments(parse_alignment_text(&text)?)
}
