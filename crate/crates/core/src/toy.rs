// SPDX-License-Identifier: Apache-2.0

//! The five-sentence walkthrough corpus and hand-set representations.
//!
//! Each representation is the one-hot axis of its token type plus a small
//! offset on a shared extra axis. Queries carry offset -1, so among
//! same-type candidates the one with the smallest offset is nearest under
//! every metric. Offsets are chosen so that, with `c = 2`, the test input
//! `B C E` selects `x12, x21` for B, `x13, x22` for C and `x34, x52` for E
//! (1-based sentence/position subscripts).

use std::path::Path;

use crate::corpus::{Loc, ParallelCorpus, Side, TokenId};
use crate::decode::SourceEncoder;
use crate::error::{Error, Result};
use crate::repr::{write_repr_file, ReprMatrix};

pub const TOY_SOURCE: [&str; 5] = ["A B C D", "B C D", "A B D E", "B D E", "D E F"];
pub const TOY_TARGET: [&str; 5] = ["b c d a", "c d e b", "a b c d e", "b d e", "d e f"];
/// 0-based Pharaoh alignments, one line per sentence.
pub const TOY_ALIGNMENTS: [&str; 5] = ["0-3 1-0 2-1 3-2", "0-3 1-0 2-1", "0-0 1-1 2-3 3-4", "0-0 1-1 2-2", "0-0 1-1 2-2"];
pub const TOY_TEST: &str = "B C E";
pub const TOY_DIM: usize = 8;
const OFFSET_AXIS: usize = 6;
const QUERY_OFFSET: f32 = -1.0;

/// Offsets for source occurrences, by 0-based `(sentence, position)`.
const SRC_OFFSETS: [&[f32]; 5] = [
    &[0.4, 0.1, 0.1, 0.4],
    &[0.2, 0.3, 0.4],
    &[0.4, 0.5, 0.4, 0.1],
    &[0.7, 0.4, 0.6],
    &[0.4, 0.2, 0.4],
];

pub fn toy_corpus() -> ParallelCorpus {
    let alignments = TOY_ALIGNMENTS
        .iter()
        .enumerate()
        .map(|(i, l)| crate::corpus::parse_pharaoh(l, i + 1))
        .collect::<Result<Vec<_>>>()
        .expect("toy alignments parse");
    ParallelCorpus::from_lines(&TOY_SOURCE, &TOY_TARGET)
        .and_then(|c| c.with_alignments(alignments))
        .expect("toy corpus is well formed")
}

fn axis_vector(id: TokenId, offset: f32) -> Vec<f32> {
    let mut v = vec![0.0; TOY_DIM];
    if id.index() < OFFSET_AXIS {
        v[id.index()] = 1.0;
    }
    v[OFFSET_AXIS] = offset;
    v
}

pub fn toy_source_reprs(corpus: &ParallelCorpus) -> ReprMatrix {
    let mut data = Vec::new();
    for (s, pair) in corpus.pairs.iter().enumerate() {
        for (p, &tok) in pair.src.iter().enumerate() {
            data.extend(axis_vector(tok, SRC_OFFSETS[s][p]));
        }
    }
    ReprMatrix::new(Side::Source, TOY_DIM, data, &corpus.sentence_lengths(Side::Source)).expect("toy source reprs")
}

pub fn toy_target_reprs(corpus: &ParallelCorpus) -> ReprMatrix {
    let mut data = Vec::new();
    for (s, pair) in corpus.pairs.iter().enumerate() {
        for (p, &tok) in pair.tgt.iter().enumerate() {
            data.extend(axis_vector(tok, 0.1 * (s + 1) as f32 + 0.01 * p as f32));
        }
    }
    ReprMatrix::new(Side::Target, TOY_DIM, data, &corpus.sentence_lengths(Side::Target)).expect("toy target reprs")
}

/// Query encoder for the toy setting: type axis at offset -1.
pub struct ToyEncoder;

impl SourceEncoder for ToyEncoder {
    fn encode(&self, source: &[TokenId]) -> Result<Vec<f32>> {
        Ok(source.iter().flat_map(|&t| axis_vector(t, QUERY_OFFSET)).collect())
    }
}

/// The target locations expected for `B C E` at `c = 2`, in retrieval order.
pub fn toy_expected_target_locs() -> Vec<Loc> {
    // y11, y24, y12, y21, y35, y52 in 1-based subscripts.
    [(0, 0), (1, 3), (0, 1), (1, 0), (2, 4), (4, 1)]
        .iter()
        .map(|&(s, p)| Loc::new(s, p))
        .collect()
}

/// Writes the corpus, alignments, representations and test input into `dir`.
pub fn write_toy(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = toy_corpus();
    c.write(&dir.join("train.src"), &dir.join("train.tgt"))?;
    let align = dir.join("train.align");
    std::fs::write(&align, c.alignment_text()).map_err(|e| Error::io(&align, e))?;
    let src = toy_source_reprs(&c);
    let tgt = toy_target_reprs(&c);
    write_repr_file(&dir.join("train.src.repr"), TOY_DIM, src.data())?;
    write_repr_file(&dir.join("train.tgt.repr"), TOY_DIM, tgt.data())?;
    let test = dir.join("test.src");
    std::fs::write(&test, format!("{TOY_TEST}\n")).map_err(|e| Error::io(&test, e))?;
    let q = ToyEncoder.encode(&c.vocab_src.encode(TOY_TEST))?;
    write_repr_file(&dir.join("test.src.repr"), TOY_DIM, &q)
}
