//! Bit-packed hash codes and the NXOR/popcount similarity kernel.
//!
//! Codes are stored as 32-bit words using an interleaved layout: the `d`
//! boolean columns are split into 32 contiguous chunks of `d / 32` columns,
//! and word `w` collects column `w` of every chunk, chunk 0 in the most
//! significant bit. Retrieval never depends on the layout because the
//! agreement count is invariant under any bit permutation shared by both
//! operands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const WORD_BITS: usize = 32;
/// Largest supported code length; keeps every agreement count inside `u32`
/// with ample headroom and bounds the top-k histogram.
pub const MAX_CODE_BITS: usize = 1 << 15;

const CODE_MAGIC: &[u8; 4] = b"SPLC";
const CODE_VERSION: u32 = 1;

/// Rows at or above this count are scored in parallel chunks.
const PAR_ROWS: usize = 1 << 14;

fn check_length(length_bits: usize) -> Result<()> {
    if length_bits == 0 || length_bits % WORD_BITS != 0 {
        return Err(Error::NotWordAligned(length_bits));
    }
    if length_bits > MAX_CODE_BITS {
        return Err(Error::CodeTooLong(length_bits));
    }
    Ok(())
}

/// A single packed code of `length_bits` bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    words: Vec<u32>,
    length_bits: usize,
}

impl HashCode {
    pub fn from_words(words: Vec<u32>) -> Result<Self> {
        let length_bits = words.len() * WORD_BITS;
        check_length(length_bits)?;
        Ok(Self { words, length_bits })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn length_bits(&self) -> usize {
        self.length_bits
    }
}

/// `n` packed codes of `L` bits each, row-major, index-aligned with the
/// vectors they were computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    length_bits: usize,
    data: Vec<u32>,
}

impl CodeMatrix {
    pub fn from_words(rows: usize, length_bits: usize, data: Vec<u32>) -> Result<Self> {
        check_length(length_bits)?;
        if data.len() != rows * (length_bits / WORD_BITS) {
            return Err(Error::shape(format!(
                "{} words cannot hold {rows} codes of {length_bits} bits",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            length_bits,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn length_bits(&self) -> usize {
        self.length_bits
    }

    pub fn words_per_row(&self) -> usize {
        self.length_bits / WORD_BITS
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn row_words(&self, i: usize) -> &[u32] {
        let w = self.words_per_row();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row(&self, i: usize) -> HashCode {
        HashCode {
            words: self.row_words(i).to_vec(),
            length_bits: self.length_bits,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODE_MAGIC)?;
        binio::put_u32(&mut w, CODE_VERSION)?;
        binio::put_u32(&mut w, binio::to_u32(self.rows, "rows")?)?;
        binio::put_u32(&mut w, binio::to_u32(self.length_bits, "length_bits")?)?;
        binio::put_u32_block(&mut w, &self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(CODE_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CODE_VERSION {
            return Err(Error::Format {
                offset: at,
                detail: format!("unsupported code index version {version}"),
            });
        }
        let rows = r.u32()? as usize;
        let at = r.offset();
        let length_bits = r.u32()? as usize;
        check_length(length_bits).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
        let words = rows * (length_bits / WORD_BITS);
        let data = r.u32_block(words, 16 + 4 * words as u64)?;
        r.expect_eof()?;
        Self::from_words(rows, length_bits, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Per-row agreement counts; each entry lies in `[0, L]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreVector {
    scores: Vec<u32>,
    length_bits: usize,
}

impl ScoreVector {
    pub fn new(scores: Vec<u32>, length_bits: usize) -> Result<Self> {
        check_length(length_bits)?;
        if let Some(bad) = scores.iter().find(|&&s| s as usize > length_bits) {
            return Err(Error::shape(format!("score {bad} exceeds code length {length_bits}")));
        }
        Ok(Self {
            scores,
            length_bits,
        })
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn length_bits(&self) -> usize {
        self.length_bits
    }

    /// Keeps only the first `len` entries (the causally visible prefix).
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            scores: self.scores[..len.min(self.scores.len())].to_vec(),
            length_bits: self.length_bits,
        }
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.scores
    }
}

/// Packs an `n × d` row-major boolean matrix into `n` codes of `d` bits.
pub fn pack_bits(bits: &[bool], d: usize) -> Result<CodeMatrix> {
    check_length(d)?;
    if bits.len() % d != 0 {
        return Err(Error::shape(format!("{} bits is not a whole number of {d}-bit rows", bits.len())));
    }
    let rows = bits.len() / d;
    let per_row = d / WORD_BITS;
    let mut data = vec![0u32; rows * per_row];
    for (src, dst) in bits.chunks_exact(d).zip(data.chunks_exact_mut(per_row)) {
        for chunk in src.chunks_exact(per_row) {
            for (word, &bit) in dst.iter_mut().zip(chunk) {
                *word = (*word << 1) | bit as u32;
            }
        }
    }
    Ok(CodeMatrix {
        rows,
        length_bits: d,
        data,
    })
}

/// Inverse of [`pack_bits`]: returns the `n × L` row-major boolean matrix.
pub fn unpack_bits(codes: &CodeMatrix) -> Vec<bool> {
    let per_row = codes.words_per_row();
    let mut out = Vec::with_capacity(codes.rows * codes.length_bits);
    for row in codes.data.chunks_exact(per_row) {
        for chunk in 0..WORD_BITS {
            let shift = WORD_BITS - 1 - chunk;
            out.extend(row.iter().map(|&w| (w >> shift) & 1 == 1));
        }
    }
    out
}

#[inline]
fn agreement(a: &[u32], b: &[u32]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (!(x ^ y)).count_ones()).sum()
}

/// Number of agreeing bit positions between `query` and each row of `index`.
///
/// For ±1 sign vectors this is the affine image of the dot product:
/// `dot = 2 * score - L`.
pub fn nxor_scores(query: &HashCode, index: &CodeMatrix) -> Result<ScoreVector> {
    if query.length_bits != index.length_bits {
        return Err(Error::shape(format!(
            "query has {} bits, index has {}",
            query.length_bits, index.length_bits
        )));
    }
    let per_row = index.words_per_row();
    let q = query.words.as_slice();
    let scores = if index.rows >= PAR_ROWS {
        index
            .data
            .par_chunks(per_row * 1024)
            .flat_map_iter(|block| block.chunks_exact(per_row).map(|row| agreement(q, row)))
            .collect()
    } else {
        index
            .data
            .chunks_exact(per_row)
            .map(|row| agreement(q, row))
            .collect()
    };
    Ok(ScoreVector {
        scores,
        length_bits: index.length_bits,
    })
}

/// The `k` highest-scoring indices, ordered by score descending then index
/// ascending. Ties at the cut are resolved in favour of lower indices.
///
/// Runs in `O(n + L + k log k)` using a histogram over the bounded score range.
pub fn top_k_indices(scores: &ScoreVector, k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::BudgetOutOfRange { k, n });
    }
    let mut hist = vec![0usize; scores.length_bits + 1];
    for &s in &scores.scores {
        hist[s as usize] += 1;
    }
    let mut threshold = scores.length_bits;
    let mut above = 0usize;
    loop {
        if above + hist[threshold] >= k {
            break;
        }
        above += hist[threshold];
        threshold -= 1;
    }
    let mut at_threshold = k - above;
    let threshold = threshold as u32;
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for (i, &s) in scores.scores.iter().enumerate() {
        if s > threshold {
            picked.push(i);
        } else if s == threshold && at_threshold > 0 {
            picked.push(i);
            at_threshold -= 1;
        }
    }
    picked.sort_by(|&a, &b| scores.scores[b].cmp(&scores.scores[a]).then(a.cmp(&b)));
    Ok(picked)
}
