//! Bit-packed ±1 matrices and exact XNOR/popcount products.
//!
//! A set bit encodes +1 and a clear bit encodes −1. Rows are padded to a whole number of
//! words and the pad bits are always zero, so two canonical rows can be XORed word by word
//! without masking: pad positions agree and contribute nothing to the popcount.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;

pub type Word = u64;
pub const WORD_BITS: usize = Word::BITS as usize;

const MAGIC: &[u8; 4] = b"PBM1";

/// Largest inner dimension the `i32` accumulators are specified for.
pub const MAX_INNER: usize = 1 << 20;

#[inline]
pub fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

#[inline]
fn last_word_mask(cols: usize) -> Word {
    match cols % WORD_BITS {
        0 => Word::MAX,
        r => (1 << r) - 1,
    }
}

/// Row-major bit-packed matrix of ±1 values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<Word>,
}

impl PackedBitMatrix {
    /// All entries −1.
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        PackedBitMatrix {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    /// Builds a matrix from raw row-major words, zeroing any pad bits.
    pub fn from_words(rows: usize, cols: usize, words: Vec<Word>) -> Result<Self> {
        let words_per_row = words_for(cols);
        if words.len() != rows * words_per_row {
            return Err(Error::shape(format!(
                "{rows}x{cols} packed matrix needs {} words, got {}",
                rows * words_per_row,
                words.len()
            )));
        }
        let mut m = PackedBitMatrix {
            rows,
            cols,
            words_per_row,
            words,
        };
        m.canonicalize();
        Ok(m)
    }

    /// Packs a row-major slice: bit set iff the element is strictly positive.
    pub fn pack_slice<T: Real>(data: &[T], rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        let mut m = Self::new(rows, cols);
        let wpr = m.words_per_row;
        if cols == 0 {
            return Ok(m);
        }
        for (row, out) in data.chunks_exact(cols).zip(m.words.chunks_exact_mut(wpr)) {
            for (chunk, w) in row.chunks(WORD_BITS).zip(out.iter_mut()) {
                let mut word: Word = 0;
                for (b, &x) in chunk.iter().enumerate() {
                    word |= ((x > T::zero()) as Word) << b;
                }
                *w = word;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    /// Raw word access. Writes may set pad bits; call [`canonicalize`](Self::canonicalize)
    /// before using the matrix in a product.
    pub fn raw_words_mut(&mut self) -> &mut [Word] {
        &mut self.words
    }

    pub fn row_words(&self, r: usize) -> &[Word] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(r < self.rows && c < self.cols, "bit ({r},{c}) out of range");
        self.words[r * self.words_per_row + c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        assert!(r < self.rows && c < self.cols, "bit ({r},{c}) out of range");
        let w = &mut self.words[r * self.words_per_row + c / WORD_BITS];
        let mask = 1 << (c % WORD_BITS);
        if bit {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    /// ±1 value at `(r, c)`.
    pub fn value(&self, r: usize, c: usize) -> i32 {
        if self.get(r, c) {
            1
        } else {
            -1
        }
    }

    /// Zeroes all pad bits beyond `cols` in every row.
    pub fn canonicalize(&mut self) {
        if self.words_per_row == 0 {
            return;
        }
        let mask = last_word_mask(self.cols);
        let wpr = self.words_per_row;
        for row in self.words.chunks_exact_mut(wpr) {
            row[wpr - 1] &= mask;
        }
    }

    pub fn is_canonical(&self) -> bool {
        if self.words_per_row == 0 {
            return true;
        }
        let mask = last_word_mask(self.cols);
        self.words
            .chunks_exact(self.words_per_row)
            .all(|row| row[self.words_per_row - 1] & !mask == 0)
    }

    /// ±1 entries as a row-major vector.
    pub fn unpack_vec<T: Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let row = self.row_words(r);
            for c in 0..self.cols {
                let bit = row[c / WORD_BITS] >> (c % WORD_BITS) & 1;
                out.push(if bit == 1 { T::one() } else { -T::one() });
            }
        }
        out
    }

    /// Serializes as `PBM1`: magic, then rows, cols and word size in bits as little-endian
    /// `u64`, then the row-major words.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.rows as u64, self.cols as u64, WORD_BITS as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a `PBM1` stream. Files written with 8-, 16-, 32- or 64-bit words are accepted;
    /// pad bits are cleared on load.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("PBM1 header", format!("bad magic {magic:?}")));
        }
        let mut field = [0u8; 8];
        let mut next = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut field)?;
            Ok(u64::from_le_bytes(field))
        };
        let rows = next(&mut r)? as usize;
        let cols = next(&mut r)? as usize;
        let word_bits = next(&mut r)? as usize;
        if !matches!(word_bits, 8 | 16 | 32 | 64) {
            return Err(Error::format(
                "PBM1 header",
                format!("unsupported word size {word_bits}"),
            ));
        }
        let file_row_bytes = cols.div_ceil(word_bits) * word_bits / 8;
        let mut m = Self::new(rows, cols);
        let mut buf = vec![0u8; file_row_bytes];
        for row in 0..rows {
            r.read_exact(&mut buf)?;
            let dst = &mut m.words[row * m.words_per_row..(row + 1) * m.words_per_row];
            for (i, byte) in buf.iter().enumerate() {
                if i / 8 < dst.len() {
                    dst[i / 8] |= (*byte as Word) << (8 * (i % 8));
                }
            }
        }
        m.canonicalize();
        Ok(m)
    }
}

/// Packs a tensor viewed as `rows × last-axis`.
pub fn pack<T: Real>(m: &Tensor<T>) -> PackedBitMatrix {
    let (rows, cols) = m.rows_cols();
    PackedBitMatrix::pack_slice(m.data(), rows, cols).expect("tensor length matches its shape")
}

/// Expands a packed matrix into a `rows × cols` tensor of ±1.
pub fn unpack<T: Real>(p: &PackedBitMatrix) -> Tensor<T> {
    Tensor::from_vec(&[p.rows(), p.cols()], p.unpack_vec()).expect("consistent shape")
}

pub fn popcount_words(words: &[Word]) -> u64 {
    words.iter().map(|w| w.count_ones() as u64).sum()
}

/// Dense row-major integer matrix produced by the packed product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

/// Rows of at most a few words: the word loop is unrolled and the A row stays in registers.
#[inline(always)]
fn product_rows_fixed<const W: usize>(a: &PackedBitMatrix, b: &PackedBitMatrix, first_row: usize, out: &mut [i32]) {
    let k = a.cols as i32;
    let m = b.rows;
    for (i, out_row) in out.chunks_exact_mut(m).enumerate() {
        let start = (first_row + i) * W;
        let ar: [Word; W] = a.words[start..start + W].try_into().expect("row of W words");
        for (o, br) in out_row.iter_mut().zip(b.words.chunks_exact(W)) {
            let mut diff = 0u32;
            for w in 0..W {
                diff += (ar[w] ^ br[w]).count_ones();
            }
            *o = k - 2 * diff as i32;
        }
    }
}

#[inline(always)]
fn product_rows(a: &PackedBitMatrix, b: &PackedBitMatrix, first_row: usize, out: &mut [i32]) {
    match a.words_per_row {
        1 => return product_rows_fixed::<1>(a, b, first_row, out),
        2 => return product_rows_fixed::<2>(a, b, first_row, out),
        3 => return product_rows_fixed::<3>(a, b, first_row, out),
        4 => return product_rows_fixed::<4>(a, b, first_row, out),
        _ => {}
    }
    let k = a.cols as i32;
    let m = b.rows;
    let wpr = a.words_per_row;
    let rows = out.len() / m.max(1);
    // Four rows of A share each load of a B row.
    let mut i = 0;
    while i + 4 <= rows {
        let r = |t: usize| &a.words[(first_row + i + t) * wpr..][..wpr];
        let (a0, a1, a2, a3) = (r(0), r(1), r(2), r(3));
        let block = &mut out[i * m..(i + 4) * m];
        for j in 0..m {
            let br = &b.words[j * wpr..][..wpr];
            let (mut c0, mut c1, mut c2, mut c3) = (0u32, 0u32, 0u32, 0u32);
            for w in 0..wpr {
                let y = br[w];
                c0 += (a0[w] ^ y).count_ones();
                c1 += (a1[w] ^ y).count_ones();
                c2 += (a2[w] ^ y).count_ones();
                c3 += (a3[w] ^ y).count_ones();
            }
            block[j] = k - 2 * c0 as i32;
            block[m + j] = k - 2 * c1 as i32;
            block[2 * m + j] = k - 2 * c2 as i32;
            block[3 * m + j] = k - 2 * c3 as i32;
        }
        i += 4;
    }
    for (t, out_row) in out[i * m..].chunks_exact_mut(m.max(1)).enumerate() {
        let ar = a.row_words(first_row + i + t);
        for (j, o) in out_row.iter_mut().enumerate() {
            let br = &b.words[j * wpr..(j + 1) * wpr];
            let diff: u32 = ar.iter().zip(br).map(|(x, y)| (x ^ y).count_ones()).sum();
            *o = k - 2 * diff as i32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn product_rows_popcnt(
    a: &PackedBitMatrix,
    b: &PackedBitMatrix,
    first_row: usize,
    out: &mut [i32],
) {
    product_rows(a, b, first_row, out)
}

fn product_block(a: &PackedBitMatrix, b: &PackedBitMatrix, first_row: usize, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the feature was detected at runtime.
            unsafe { product_rows_popcnt(a, b, first_row, out) };
            return;
        }
    }
    product_rows(a, b, first_row, out)
}

/// `A · Bᵀ` over ±1 entries for `A: n × k` and `B: m × k`, computed as
/// `k − 2·popcount(a XOR b)` per entry.
pub fn xnor_popcount_matmul(a: &PackedBitMatrix, b: &PackedBitMatrix) -> Result<IntMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "packed product inner dims differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.cols > MAX_INNER {
        return Err(Error::shape(format!(
            "inner dimension {} exceeds {MAX_INNER}",
            a.cols
        )));
    }
    debug_assert!(a.is_canonical() && b.is_canonical());
    let (n, m) = (a.rows, b.rows);
    let mut data = vec![0i32; n * m];
    if m > 0 {
        // Row blocks are independent, so the parallel split does not change any result.
        const BLOCK: usize = 64;
        let work = n * m * a.words_per_row.max(1);
        if work >= 1 << 16 {
            data.par_chunks_mut(BLOCK * m)
                .enumerate()
                .for_each(|(blk, out)| product_block(a, b, blk * BLOCK, out));
        } else {
            product_block(a, b, 0, &mut data);
        }
    }
    Ok(IntMatrix {
        rows: n,
        cols: m,
        data,
    })
}
