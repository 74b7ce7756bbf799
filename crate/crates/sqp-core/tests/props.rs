//! Property tests for the bit-packing and quantization invariants.

use proptest::prelude::*;

use sqp_core::quant::QuantParams;
use sqp_core::tensor::{pack_bitmap, popcount_region, unpack_bitmap, TensorF32};

fn binary_map(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(any::<bool>(), r * c).prop_map(move |bits| (r, c, bits))
    })
}

proptest! {
    #[test]
    fn pack_unpack_round_trip((rows, cols, bits) in binary_map(24, 150)) {
        let t = TensorF32::from_vec(
            &[rows, cols],
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let packed = pack_bitmap(&t).unwrap();
        prop_assert!(packed.padding_clean());
        prop_assert_eq!(unpack_bitmap(&packed), t);
        prop_assert_eq!(pack_bitmap(&unpack_bitmap(&packed)).unwrap(), packed);
    }

    #[test]
    fn popcount_window_matches_naive(
        (rows, cols, bits) in binary_map(16, 90),
        sel in any::<[u16; 4]>(),
    ) {
        let t = TensorF32::from_vec(
            &[rows, cols],
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let packed = pack_bitmap(&t).unwrap();
        let r0 = sel[0] as usize % (rows + 1);
        let r1 = r0 + sel[1] as usize % (rows + 1 - r0);
        let c0 = sel[2] as usize % (cols + 1);
        let c1 = c0 + sel[3] as usize % (cols + 1 - c0);
        let mut naive = 0u64;
        for r in r0..r1 {
            for c in c0..c1 {
                if bits[r * cols + c] {
                    naive += 1;
                }
            }
        }
        prop_assert_eq!(popcount_region(&packed, r0, c0, r1, c1).unwrap(), naive);
    }

    #[test]
    fn affine_quantization_error_bounded(
        lo in -20.0f32..-0.01,
        hi in 0.01f32..20.0,
        xs in proptest::collection::vec(-25.0f32..25.0, 1..200),
    ) {
        let qp = QuantParams::affine_u8(lo, hi);
        // zero is exactly representable
        prop_assert_eq!(qp.dequantize_value(qp.quantize_value(0.0)), 0.0);
        let in_lo = qp.scale * (qp.qmin - qp.zero_point) as f32;
        let in_hi = qp.scale * (qp.qmax - qp.zero_point) as f32;
        for &x in &xs {
            let dq = qp.dequantize_value(qp.quantize_value(x));
            if x >= in_lo && x <= in_hi {
                // in-range values round to within half a step
                prop_assert!((x - dq).abs() <= qp.scale / 2.0 + qp.scale * 1e-4);
            } else {
                // out-of-range values clamp to the grid ends
                prop_assert!(dq == in_lo || dq == in_hi);
            }
        }
    }
}
