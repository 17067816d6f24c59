use pfenet_core::{Shape, Tensor};
use proptest::prelude::*;

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-100.0..100.0f64, n)
}

proptest! {
    /// Pooling preserves the global mean whenever the bins tile the input
    /// exactly.
    #[test]
    fn pool_preserves_mean_when_divisible(
        bins in 1usize..5,
        mult in 1usize..4,
        seed in any::<u64>(),
    ) {
        let h = bins * mult;
        let mut state = seed;
        let data: Vec<f64> = (0..h * h).map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }).collect();
        let mean_in: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let t = Tensor::from_vec(Shape::new(&[1, 1, h, h]).unwrap(), data).unwrap();
        let pooled = t.adaptive_avg_pool(bins).unwrap();
        let mean_out: f64 = pooled.data().iter().sum::<f64>() / pooled.data().len() as f64;
        prop_assert!((mean_in - mean_out).abs() < 1e-12);
    }

    /// 3×3 convolution with stride 1 and padding 1 preserves spatial size.
    #[test]
    fn conv3x3_preserves_spatial_dims(h in 3usize..8, w in 3usize..8, data in finite_vec(1)) {
        let x = Tensor::filled(Shape::new(&[1, 1, h, w]).unwrap(), data[0]);
        let weight = Tensor::filled(Shape::new(&[2, 1, 3, 3]).unwrap(), 0.25);
        let bias = Tensor::zeros(Shape::new(&[2]).unwrap());
        let y = x.conv2d(&weight, &bias, 1, 1).unwrap();
        prop_assert_eq!(y.shape().dims(), &[1, 2, h, w]);
    }

    /// Resizing to the same size is the identity.
    #[test]
    fn bilinear_same_size_identity(h in 1usize..6, w in 1usize..6, v in -10.0..10.0f64) {
        let data: Vec<f64> = (0..h * w).map(|i| v + i as f64).collect();
        let x = Tensor::from_vec(Shape::new(&[1, 1, h, w]).unwrap(), data.clone()).unwrap();
        let y = x.bilinear_resize(h, w).unwrap();
        for (a, b) in y.data().iter().zip(&data) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Forward ops are pure: the same inputs give bitwise-identical outputs.
    #[test]
    fn forward_is_deterministic(h in 3usize..6, seed in any::<u64>()) {
        let mut state = seed;
        let data: Vec<f64> = (0..h * h).map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        }).collect();
        let x = Tensor::from_vec(Shape::new(&[1, 1, h, h]).unwrap(), data).unwrap();
        let w = Tensor::filled(Shape::new(&[1, 1, 3, 3]).unwrap(), 0.37);
        let b = Tensor::zeros(Shape::new(&[1]).unwrap());
        let y1 = x.conv2d(&w, &b, 1, 1).unwrap().relu().adaptive_avg_pool(2).unwrap();
        let y2 = x.conv2d(&w, &b, 1, 1).unwrap().relu().adaptive_avg_pool(2).unwrap();
        let bits1: Vec<u64> = y1.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = y2.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits1, bits2);
    }
}
