//! im2col lowering of the 3x3 same-pad convolution onto GEMM. The training
//! loop runs on this path; the reference kernel in the parent module keeps
//! the tap-ordered accumulation the packed engine is compared against.

use crate::tensor::Real;

pub const TAPS: usize = 9;

/// Grow-only scratch sizing: the contents are fully overwritten by the
/// next im2col / GEMM, so no refill on reuse.
pub fn scratch<R: Real>(buf: &mut Vec<R>, n: usize) -> &mut [R] {
    if buf.len() < n {
        buf.resize(n, R::ZERO);
    }
    &mut buf[..n]
}

/// Lowered patch matrix: row (ci*9 + dr*3 + dc) holds the input plane `ci`
/// shifted by (dr-1, dc-1), zero-padded, flattened over pixels.
pub fn im2col<R: Real>(input: &[R], h: usize, w: usize, cin: usize, col: &mut [R]) {
    let hw = h * w;
    assert_eq!(input.len(), cin * hw);
    assert_eq!(col.len(), cin * TAPS * hw);
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for dr in 0..3usize {
            for dc in 0..3usize {
                let row = ci * TAPS + dr * 3 + dc;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for r in 0..h {
                    let ir = r as isize + dr as isize - 1;
                    let dst_row = &mut dst[r * w..(r + 1) * w];
                    if ir < 0 || ir >= h as isize {
                        dst_row.fill(R::ZERO);
                        continue;
                    }
                    let src_row = &plane[ir as usize * w..(ir as usize + 1) * w];
                    match dc {
                        0 => {
                            dst_row[0] = R::ZERO;
                            dst_row[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => dst_row.copy_from_slice(src_row),
                        _ => {
                            if w > 1 {
                                dst_row[..w - 1].copy_from_slice(&src_row[1..]);
                            }
                            dst_row[w - 1] = R::ZERO;
                        }
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulate the patch-matrix gradient back
/// onto the input gradient.
pub fn col2im_add<R: Real>(col: &[R], h: usize, w: usize, cin: usize, d_input: &mut [R]) {
    let hw = h * w;
    assert_eq!(d_input.len(), cin * hw);
    assert_eq!(col.len(), cin * TAPS * hw);
    for ci in 0..cin {
        let plane = &mut d_input[ci * hw..(ci + 1) * hw];
        for dr in 0..3usize {
            for dc in 0..3usize {
                let row = ci * TAPS + dr * 3 + dc;
                let src = &col[row * hw..(row + 1) * hw];
                for r in 0..h {
                    let ir = r as isize + dr as isize - 1;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let src_row = &src[r * w..(r + 1) * w];
                    let dst_row = &mut plane[ir as usize * w..(ir as usize + 1) * w];
                    match dc {
                        0 => {
                            for (d, &s) in dst_row[..w - 1].iter_mut().zip(&src_row[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst_row.iter_mut().zip(src_row) {
                                *d += s;
                            }
                        }
                        _ => {
                            if w > 1 {
                                for (d, &s) in dst_row[1..].iter_mut().zip(&src_row[..w - 1]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 same-pad convolution as kernel[cout x cin*9] * col[cin*9 x hw],
/// plus bias. Not tap-order compatible with the reference kernel; a few
/// ulps of difference are expected.
pub fn conv3x3_same_lowered<R: Real>(
    input: &[R],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[R],
    bias: &[R],
    cout: usize,
    out: &mut [R],
    col: &mut Vec<R>,
) {
    let hw = h * w;
    assert_eq!(out.len(), cout * hw);
    assert_eq!(kernel.len(), cout * cin * TAPS);
    let k = cin * TAPS;
    let col = scratch(col, k * hw);
    im2col(input, h, w, cin, col);
    R::gemm(
        cout, k, hw,
        R::ONE,
        kernel, k as isize, 1,
        col, hw as isize, 1,
        R::ZERO,
        out, hw as isize, 1,
    );
    for co in 0..cout {
        let b = bias[co];
        for o in &mut out[co * hw..(co + 1) * hw] {
            *o += b;
        }
    }
}
