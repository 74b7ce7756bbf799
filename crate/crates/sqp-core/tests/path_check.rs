use sqp_core::model::{self, build_dnsmos, ConvImpl, Mode, Variant};
use sqp_core::rng::Rng;
use sqp_core::tensor::TensorF32;

#[test]
fn predict_matches_forward_paths() {
    let mut rng = Rng::seed_from_u64(1);
    for variant in [Variant::Baseline, Variant::Bam] {
        let (g, w) = build_dnsmos(variant, 5);
        for shape in [[37usize, 40usize], [149, 120], [449, 120]] {
            let x = TensorF32::from_vec(
                &shape,
                (0..shape[0] * shape[1]).map(|_| rng.range_f32(-8.0, 1.0)).collect(),
            )
            .unwrap();
            let (a, _) = model::forward(&g, &w, &x, Mode::Eval, None).unwrap();
            let (b, _) = model::forward_with(&g, &w, &x, Mode::Eval, None, ConvImpl::Lowered).unwrap();
            let c = model::predict(&g, &w, &x).unwrap();
            assert!((a - b).abs() < 1e-3, "{variant:?}: ref {a} vs lowered {b}");
            assert_eq!(b, c, "{variant:?}: lowered-with-cache vs predict");
        }
    }
}
