mod common;

use poetx::block::{apply_to_features, apply_to_weight_rows, BlockDiagonalFactor};
use poetx::cnp::{cayley_exact, cnp_forward, packed_grad_from_skew_grad, skew_from_packed, NeumannOrder, SkewParams};
use poetx::dense::{gaussian_matrix, svd_singular_values, BlockStack, Rng};
use poetx::layer::{reference, relative_drift, QuantizedMatrix, Variant};
use poetx::optim::global_clip;
use poetx::permute::{permute_cols, permute_rows, sample_permutation, Direction};
use proptest::prelude::*;

fn block_size() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 3, 4, 8])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_round_trip(n in 1usize..40, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pi = sample_permutation(n, &mut rng).unwrap();
        let w = gaussian_matrix::<f64>(n, c, 1.0, &mut rng).unwrap();
        let back = permute_rows(&permute_rows(&w, &pi, Direction::Forward).unwrap(), &pi, Direction::Inverse).unwrap();
        prop_assert_eq!(&back, &w);
        let wt = w.transpose();
        let back = permute_cols(&permute_cols(&wt, &pi, Direction::Inverse).unwrap(), &pi, Direction::Forward).unwrap();
        prop_assert_eq!(back, wt);
    }

    #[test]
    fn skew_is_antisymmetric(nb in 1usize..4, b in 2usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = SkewParams::from_vec(nb, b, (0..nb * b * (b - 1) / 2).map(|_| rng.normal()).collect()).unwrap();
        let q = skew_from_packed(&p);
        let qt = q.transpose_blocks();
        prop_assert!(q.data().iter().zip(qt.data()).all(|(a, t)| *a == -*t));
    }

    #[test]
    fn packed_grad_is_adjoint_of_skew(nb in 1usize..4, b in 2usize..6, seed in any::<u64>()) {
        // <skew(p), D> = <p, packed_grad(D)>
        let mut rng = Rng::new(seed);
        let p = SkewParams::from_vec(nb, b, (0..nb * b * (b - 1) / 2).map(|_| rng.normal()).collect()).unwrap();
        let d = BlockStack::from_vec(nb, b, (0..nb * b * b).map(|_| rng.normal()).collect()).unwrap();
        let lhs: f64 = skew_from_packed(&p).data().iter().zip(d.data()).map(|(a, b)| a * b).sum();
        let g = packed_grad_from_skew_grad(&d);
        let rhs: f64 = p.packed().iter().zip(g.packed()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn cnp_error_scales_with_fourth_power(nb in 1usize..3, b in 2usize..9, frob in 0.001f64..0.2, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (_, q) = common::skew_stack(nb, b, frob, &mut rng);
        let (g, _) = cnp_forward(&q, NeumannOrder::default()).unwrap();
        // per eigen-pair the defect is 2 l^4 - l^8 <= 2 |Q|_F^4
        prop_assert!(g.orthogonality_error() <= 2.0 * frob.powi(4) * 2f64.sqrt() + 1e-14);
        prop_assert!(cayley_exact(&q).unwrap().orthogonality_error() <= 1e-12);
    }

    #[test]
    fn orthogonal_blocks_preserve_spectrum(nb in 1usize..4, b in 2usize..5, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (_, q) = common::skew_stack(nb, b, 0.7, &mut rng);
        let f = BlockDiagonalFactor::new(cayley_exact(&q).unwrap());
        let w = gaussian_matrix::<f64>(nb * b, c, 1.0, &mut rng).unwrap();
        let rotated = apply_to_weight_rows(&f, &w, false).unwrap();
        let drift = relative_drift(&svd_singular_values(&w).unwrap(), &svd_singular_values(&rotated).unwrap());
        prop_assert!(drift <= 1e-9);
        let x = w.transpose();
        let back = apply_to_features(&f, &apply_to_features(&f, &x, false).unwrap(), true).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-10);
    }

    #[test]
    fn layer_matches_weight_centric_oracle(b in block_size(), km in 1usize..5, kn in 1usize..5, batch in 1usize..6, seed in any::<u64>()) {
        let layer = common::random_layer(b * km, b * kn, b, Variant::Fast, 0.2, seed);
        let x = common::input(batch, b * km, seed ^ 1);
        let (z, _) = layer.forward(&x).unwrap();
        prop_assert!(z.max_abs_diff(&reference::forward(&layer, &x).unwrap()) <= 1e-12);
        let w = layer.materialize_weight().unwrap();
        prop_assert!(z.max_abs_diff(&poetx::dense::matmul(&x, &w).unwrap()) <= 1e-12);
    }

    #[test]
    fn quantization_error_within_half_step(rows in 1usize..8, cols in 1usize..12, scale in 1e-3f64..1e3, seed in any::<u64>()) {
        let w = gaussian_matrix::<f64>(rows, cols, scale, &mut Rng::new(seed)).unwrap();
        let q = QuantizedMatrix::quantize(&w);
        let dq = q.dequantize();
        for r in 0..rows {
            let absmax = w.row(r).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (a, b) in w.row(r).iter().zip(dq.row(r)) {
                prop_assert!((a - b).abs() <= absmax / 254.0 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn clip_caps_global_norm(a in prop::collection::vec(-10.0f64..10.0, 1..20), b in prop::collection::vec(-10.0f64..10.0, 1..20), thr in 0.01f64..20.0) {
        let (mut a, mut b) = (a, b);
        let pre = global_clip(&mut [a.as_mut_slice(), b.as_mut_slice()], thr);
        let post = a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((post - pre.min(thr)).abs() <= 1e-12 * (1.0 + pre));
    }
}

#[test]
fn boundary_spectral_norm_exceeds_orthogonality_tolerance() {
    // at |Q|_2 = 0.05 with b = 2 the k=3 defect is sqrt(2) (2 l^4 - l^8)
    let l = 0.05f64;
    let q = skew_from_packed(&SkewParams::from_vec(1, 2, vec![l]).unwrap());
    let (g, _) = cnp_forward(&q, NeumannOrder::default()).unwrap();
    let want = 2f64.sqrt() * (2.0 * l.powi(4) - l.powi(8));
    assert!((g.orthogonality_error() - want).abs() <= 1e-15);
    assert!(g.orthogonality_error() > 1e-5);
}

#[test]
fn permutation_draws_are_uniform() {
    // n = 5: chi-square over the 120 outcomes of 12000 draws
    let mut rng = Rng::new(77);
    let mut counts = std::collections::HashMap::new();
    let draws = 12_000;
    for _ in 0..draws {
        *counts.entry(sample_permutation(5, &mut rng).unwrap().forward().to_vec()).or_insert(0u32) += 1;
    }
    assert_eq!(counts.len(), 120);
    let e = draws as f64 / 120.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 119 dof: mean 119, sd ~15.4; 5 sd margin
    assert!(chi2 < 119.0 + 5.0 * 15.43, "chi2 = {chi2}");
    let sigma = (e * (1.0 - 1.0 / 120.0)).sqrt();
    assert!(counts.values().all(|&c| (c as f64 - e).abs() <= 4.5 * sigma));
}
