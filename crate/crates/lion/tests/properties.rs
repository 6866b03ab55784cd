//! Property tests for the algebraic invariants.

use lion_lora::model::{patchify, unpatchify, ModelConfig};
use lion_lora::scaling::fourier_embed;
use lion_lora::tensor::Tensor;
use lion_lora::weights::{FileBuilder, WeightFile};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(
        a in finite_vec(3 * 4),
        b in finite_vec(4 * 5),
        c in finite_vec(5 * 2),
    ) {
        let a = Tensor::from_vec(vec![3, 4], a).unwrap();
        let b = Tensor::from_vec(vec![4, 5], b).unwrap();
        let c = Tensor::from_vec(vec![5, 2], c).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data().iter()) {
            let scale = x.abs().max(1.0);
            prop_assert!((x - y).abs() / scale < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(4 * 7)) {
        let t = Tensor::from_vec(vec![4, 7], data).unwrap();
        let sm = t.softmax_rows().unwrap();
        for i in 0..4 {
            let sum: f64 = sm.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn fourier_embedding_is_two_periodic(s in 0.0f64..1.0, j in 1usize..10) {
        let a = fourier_embed(s, j);
        let b = fourier_embed(s + 2.0, j);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_pairs_lie_on_the_unit_circle(s in -2.0f64..2.0, j in 1usize..9) {
        let g = fourier_embed(s, j);
        for pair in g.chunks(2) {
            prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patchify_roundtrips_exactly(data in finite_vec(2 * 8 * 8)) {
        let cfg = ModelConfig {
            num_blocks: 1,
            channels: 16,
            heads: 2,
            frames: 2,
            frame_size: 8,
            patch_size: 4,
            diffusion_steps: 10,
        };
        let frames = Tensor::from_vec(vec![2, 8, 8], data).unwrap();
        let tokens = patchify(&frames, &cfg).unwrap();
        let back = unpatchify(&tokens, &cfg).unwrap();
        prop_assert!(frames
            .data()
            .iter()
            .zip(back.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn weight_file_roundtrips_exactly(
        data in finite_vec(12),
        rows in 1usize..4,
    ) {
        let cols = 12 / rows;
        let t = Tensor::from_vec(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut fb = FileBuilder::new();
        fb.begin_section("s", serde_json::Value::Null);
        fb.add_tensor("t", &t);
        let bytes = fb.to_bytes().unwrap();
        let wf = WeightFile::from_bytes(&bytes).unwrap();
        let back: Tensor<f64> = wf.section("s").unwrap().tensor("t").unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back
            .data()
            .iter()
            .zip(t.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        xs in proptest::collection::vec(-5.0f64..5.0, 5..12),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v * 0.5 + (i as f64).sin()).collect();
        if let Ok(r1) = lion_lora::diagnostics::pearson(&xs, &ys) {
            let xs2: Vec<f64> = xs.iter().map(|v| v * scale + shift).collect();
            let r2 = lion_lora::diagnostics::pearson(&xs2, &ys).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-12, "{r1} vs {r2}");
        }
    }
}
