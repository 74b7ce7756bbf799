//! Word-level primitives for the packed engine: row shifts for the three
//! kernel column offsets, even-bit compression for 2x2 OR-pooling, and
//! bit-sliced counters for the bit-plane convolution backend.

/// Shift a packed row by one column: `dir = -1` makes bit c read old bit
/// c+1, `dir = +1` makes bit c read old bit c-1, `dir = 0` copies.
/// Out-of-range columns read 0; `tail_mask` clears pad bits afterwards.
pub fn shift_row(src: &[u64], dst: &mut [u64], dir: i32, tail_mask: u64) {
    let n = src.len();
    debug_assert_eq!(dst.len(), n);
    if n == 0 {
        return;
    }
    match dir {
        0 => dst.copy_from_slice(src),
        1 => {
            for k in (1..n).rev() {
                dst[k] = (src[k] << 1) | (src[k - 1] >> 63);
            }
            dst[0] = src[0] << 1;
        }
        -1 => {
            for k in 0..n - 1 {
                dst[k] = (src[k] >> 1) | (src[k + 1] << 63);
            }
            dst[n - 1] = src[n - 1] >> 1;
        }
        _ => unreachable!("column shift is one of -1, 0, 1"),
    }
    dst[n - 1] &= tail_mask;
}

/// Gather the bits at even positions of `x` into the low 32 bits.
pub fn compress_even(x: u64) -> u64 {
    let mut x = x & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x >> 4)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x >> 8)) & 0x0000_ffff_0000_ffff;
    x = (x | (x >> 16)) & 0x0000_0000_ffff_ffff;
    x
}

/// OR adjacent column pairs of a packed row: output bit j = in(2j) | in(2j+1).
/// `dst` must hold ceil(out_cols/64) words for out_cols = in_cols/2.
pub fn or_pairs_row(src: &[u64], dst: &mut [u64]) {
    for (j, d) in dst.iter_mut().enumerate() {
        let lo = src.get(2 * j).copied().unwrap_or(0);
        let hi = src.get(2 * j + 1).copied().unwrap_or(0);
        *d = compress_even(lo | (lo >> 1)) | (compress_even(hi | (hi >> 1)) << 32);
    }
}

/// Bit-sliced saturation-free counter: `planes[p]` holds bit p of a per-column
/// tally. Adding a mask increments every column whose mask bit is set.
pub fn bitslice_add(planes: &mut [Vec<u64>], mask: &[u64]) {
    let mut carry: Vec<u64> = mask.to_vec();
    for plane in planes.iter_mut() {
        let mut all_zero = true;
        for (p, c) in plane.iter_mut().zip(carry.iter_mut()) {
            let t = *p & *c;
            *p ^= *c;
            *c = t;
            all_zero &= t == 0;
        }
        if all_zero {
            return;
        }
    }
    debug_assert!(carry.iter().all(|&c| c == 0), "bit-sliced counter overflow");
}

/// Read column `col` of a bit-sliced counter.
#[cfg(test)]
pub fn bitslice_get(planes: &[Vec<u64>], col: usize) -> u32 {
    let (word, bit) = (col / 64, col % 64);
    let mut v = 0u32;
    for (p, plane) in planes.iter().enumerate() {
        v |= (((plane[word] >> bit) & 1) as u32) << p;
    }
    v
}
