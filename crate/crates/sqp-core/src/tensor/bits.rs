//! Bit-packed binary maps.
//!
//! One bit per logical element, row-major, each row padded to a whole
//! number of 64-bit words so rows stay independently addressable for
//! sliding-window work. Pad bits are always 0; every operation that could
//! disturb them re-masks.

use crate::error::{Result, SqpError};
use crate::tensor::TensorF32;

pub const WORD_BITS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(0);
    let rows: usize = if shape.is_empty() {
        0
    } else {
        shape[..shape.len() - 1].iter().product()
    };
    (rows, cols)
}

impl BitTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let (rows, cols) = rows_cols(shape);
        let words_per_row = cols.div_ceil(WORD_BITS);
        BitTensor {
            shape: shape.to_vec(),
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Logical element count (product of the shape).
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
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

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        let w = self.words[r * self.words_per_row + c / WORD_BITS];
        (w >> (c % WORD_BITS)) & 1 != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let idx = r * self.words_per_row + c / WORD_BITS;
        let mask = 1u64 << (c % WORD_BITS);
        if value {
            self.words[idx] |= mask;
        } else {
            self.words[idx] &= !mask;
        }
    }

    /// Mask covering the valid bits of the last word in a row (all ones when
    /// the row ends exactly on a word boundary).
    pub fn tail_mask(&self) -> u64 {
        let rem = self.cols % WORD_BITS;
        if rem == 0 {
            !0
        } else {
            (1u64 << rem) - 1
        }
    }

    /// Clear pad bits in every row. Cheap; called after word-level writes.
    pub fn mask_padding(&mut self) {
        let tail = self.tail_mask();
        if tail == !0 || self.words_per_row == 0 {
            return;
        }
        for r in 0..self.rows {
            self.words[r * self.words_per_row + self.words_per_row - 1] &= tail;
        }
    }

    /// True when every pad bit is zero.
    pub fn padding_clean(&self) -> bool {
        let tail = self.tail_mask();
        if tail == !0 || self.words_per_row == 0 {
            return true;
        }
        (0..self.rows)
            .all(|r| self.words[r * self.words_per_row + self.words_per_row - 1] & !tail == 0)
    }

    /// Build a row directly from words (pad bits are re-masked).
    pub fn set_row_words(&mut self, r: usize, src: &[u64]) {
        debug_assert_eq!(src.len(), self.words_per_row);
        let base = r * self.words_per_row;
        self.words[base..base + self.words_per_row].copy_from_slice(src);
        if self.tail_mask() != !0 && self.words_per_row > 0 {
            self.words[base + self.words_per_row - 1] &= self.tail_mask();
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Pack a {0,1}-valued dense tensor into bits.
pub fn pack_bitmap(src: &TensorF32) -> Result<BitTensor> {
    let mut out = BitTensor::zeros(src.shape());
    let cols = out.cols;
    for (i, &x) in src.data().iter().enumerate() {
        let bit = if x == 1.0 {
            true
        } else if x == 0.0 {
            false
        } else {
            return Err(SqpError::NonBinaryElement { index: i, value: x });
        };
        if bit {
            out.set(i / cols, i % cols, true);
        }
    }
    Ok(out)
}

/// Exact inverse of [`pack_bitmap`].
pub fn unpack_bitmap(src: &BitTensor) -> TensorF32 {
    let mut data = Vec::with_capacity(src.len());
    for r in 0..src.rows {
        for c in 0..src.cols {
            data.push(if src.get(r, c) { 1.0 } else { 0.0 });
        }
    }
    TensorF32::from_vec(src.shape(), data).expect("length matches by construction")
}

/// Number of set bits inside the half-open window `[r0, r1) × [c0, c1)`.
pub fn popcount_region(src: &BitTensor, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<u64> {
    if r0 > r1 || c0 > c1 || r1 > src.rows || c1 > src.cols {
        return Err(SqpError::WindowOutOfBounds(format!(
            "window [{r0},{r1})x[{c0},{c1}) on {}x{} map",
            src.rows, src.cols
        )));
    }
    if r0 == r1 || c0 == c1 {
        return Ok(0);
    }
    let w0 = c0 / WORD_BITS;
    let w1 = (c1 - 1) / WORD_BITS;
    let lo_mask = !0u64 << (c0 % WORD_BITS);
    let hi_bits = (c1 - 1) % WORD_BITS + 1;
    let hi_mask = if hi_bits == WORD_BITS {
        !0
    } else {
        (1u64 << hi_bits) - 1
    };
    let mut total = 0u64;
    for r in r0..r1 {
        let row = src.row_words(r);
        if w0 == w1 {
            total += (row[w0] & lo_mask & hi_mask).count_ones() as u64;
        } else {
            total += (row[w0] & lo_mask).count_ones() as u64;
            for w in &row[w0 + 1..w1] {
                total += w.count_ones() as u64;
            }
            total += (row[w1] & hi_mask).count_ones() as u64;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_binary(rng: &mut Rng, rows: usize, cols: usize) -> TensorF32 {
        let data = (0..rows * cols)
            .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
            .collect();
        TensorF32::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn all_zeros_packs_to_zero_words() {
        let t = TensorF32::zeros(&[4, 4]);
        let b = pack_bitmap(&t).unwrap();
        assert!(b.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn all_ones_sets_sixteen_bits_and_clean_padding() {
        let t = TensorF32::full(&[4, 4], 1.0);
        let b = pack_bitmap(&t).unwrap();
        assert_eq!(b.count_ones(), 16);
        assert!(b.padding_clean());
    }

    #[test]
    fn non_binary_rejected_with_index() {
        let t = TensorF32::from_vec(&[2, 2], vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        match pack_bitmap(&t) {
            Err(SqpError::NonBinaryElement { index, value }) => {
                assert_eq!(index, 2);
                assert_eq!(value, 0.5);
            }
            other => panic!("expected NonBinaryElement, got {other:?}"),
        }
    }

    #[test]
    fn unpack_all_set_two_by_three() {
        let t = TensorF32::full(&[2, 3], 1.0);
        let b = pack_bitmap(&t).unwrap();
        assert_eq!(unpack_bitmap(&b).data(), &[1.0; 6]);
    }

    #[test]
    fn unpack_empty_shape() {
        let b = BitTensor::zeros(&[0, 7]);
        assert_eq!(unpack_bitmap(&b).len(), 0);
    }

    #[test]
    fn round_trip_449x120() {
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = random_binary(&mut rng, 449, 120);
            let b = pack_bitmap(&t).unwrap();
            assert_eq!(unpack_bitmap(&b), t);
            assert_eq!(pack_bitmap(&unpack_bitmap(&b)).unwrap(), b);
            assert!(b.padding_clean());
        }
    }

    #[test]
    fn popcount_full_window_all_ones() {
        let b = pack_bitmap(&TensorF32::full(&[8, 8], 1.0)).unwrap();
        assert_eq!(popcount_region(&b, 0, 0, 8, 8).unwrap(), 64);
    }

    #[test]
    fn popcount_empty_window_is_zero() {
        let mut rng = Rng::seed_from_u64(3);
        let b = pack_bitmap(&random_binary(&mut rng, 5, 70)).unwrap();
        assert_eq!(popcount_region(&b, 2, 10, 2, 10).unwrap(), 0);
        assert_eq!(popcount_region(&b, 1, 5, 4, 5).unwrap(), 0);
    }

    #[test]
    fn popcount_out_of_bounds_rejected() {
        let b = BitTensor::zeros(&[4, 4]);
        assert!(popcount_region(&b, 0, 0, 5, 4).is_err());
        assert!(popcount_region(&b, 0, 2, 2, 1).is_err());
    }

    #[test]
    fn popcount_matches_naive_bit_loop() {
        let mut rng = Rng::seed_from_u64(77);
        let t = random_binary(&mut rng, 56, 15);
        let b = pack_bitmap(&t).unwrap();
        for _ in 0..200 {
            let r0 = rng.below(57);
            let r1 = r0 + rng.below(57 - r0);
            let c0 = rng.below(16);
            let c1 = c0 + rng.below(16 - c0);
            let mut naive = 0u64;
            for r in r0..r1 {
                for c in c0..c1 {
                    if b.get(r, c) {
                        naive += 1;
                    }
                }
            }
            assert_eq!(popcount_region(&b, r0, c0, r1, c1).unwrap(), naive);
        }
    }

    #[test]
    fn popcount_full_window_equals_unpacked_sum() {
        let mut rng = Rng::seed_from_u64(8);
        let t = random_binary(&mut rng, 33, 77);
        let b = pack_bitmap(&t).unwrap();
        let sum: f32 = unpack_bitmap(&b).data().iter().sum();
        assert_eq!(popcount_region(&b, 0, 0, 33, 77).unwrap() as f32, sum);
    }
}
