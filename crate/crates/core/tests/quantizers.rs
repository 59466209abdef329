mod common;

use adfq_core::quant::{
    outlier_split, round_half_even, shift_log2_quantize, lq_dequantize, uq_calibrate, uq_dequantize, uq_fake,
    uq_quantize, BitWidth, Granularity, OutlierConfig, OutlierRule,
};
use adfq_core::tensor::{gelu, Tensor};
use common::assert_close;
use proptest::prelude::*;

fn x34() -> Tensor {
    Tensor::from_rows(&[&[0.31, -1.7, 2.25, 0.0], &[-0.4, 0.95, -2.6, 1.1], &[1.8, 0.05, 0.6, -0.75]]).unwrap()
}

// Oracle: numpy with half-to-even np.round, frozen.
#[test]
fn per_channel_k4_matches_frozen_oracle() {
    let p = uq_calibrate(&x34(), BitWidth::new(4).unwrap(), Granularity::PerChannel).unwrap();
    let got = uq_fake(&x34(), &p).unwrap();
    let want = [
        0.29333333333333333, -1.7666666666666666, 2.263333333333333, 0.0,
        -0.44, 0.8833333333333333, -2.5866666666666664, 1.11,
        1.76, 0.0, 0.6466666666666666, -0.74,
    ];
    assert_close(got.data(), &want, 1e-12);
}

#[test]
fn per_tensor_k3_matches_frozen_oracle() {
    let p = uq_calibrate(&x34(), BitWidth::new(3).unwrap(), Granularity::PerTensor).unwrap();
    let got = uq_fake(&x34(), &p).unwrap();
    let a = 0.6928571428571428;
    let want = [0.0, -2.0 * a, 3.0 * a, 0.0, -a, a, -4.0 * a, 2.0 * a, 3.0 * a, 0.0, a, -a];
    assert_close(got.data(), &want, 1e-12);
}

#[test]
fn shift_log2_k4_matches_frozen_oracle() {
    let g = Tensor::vector(&[-0.16, -0.05, 0.0, 0.12, 0.7, 2.9, 0.33, -0.11]).unwrap();
    let (q, p) = shift_log2_quantize(&g, BitWidth::new(4).unwrap(), 1e-8).unwrap();
    let want = [
        -0.1599066262106323, -0.0643750096875, 0.031249990624999995, 0.22249999125,
        0.6049999924999999, 2.9, 0.22249999125, -0.11218750984375,
    ];
    assert_close(lq_dequantize(&q, &p).data(), &want, 1e-12);
}

#[test]
fn rounding_is_half_to_even() {
    for (x, r) in [(0.5, 0.0), (1.5, 2.0), (2.5, 2.0), (-0.5, 0.0), (-1.5, -2.0), (2.4999, 2.0)] {
        assert_eq!(round_half_even(x), r);
    }
}

fn granularity() -> impl Strategy<Value = Granularity> {
    prop_oneof![Just(Granularity::PerTensor), Just(Granularity::PerChannel), Just(Granularity::PerPatch)]
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6, 0.01f64..100.0)
        .prop_flat_map(|(r, c, span)| {
            proptest::collection::vec(-span..span, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
}

proptest! {
    #[test]
    fn round_trip_error_within_half_step(x in matrix(), g in granularity(), k in prop::sample::select(vec![2u32, 4, 8])) {
        let p = uq_calibrate(&x, BitWidth::new(k).unwrap(), g).unwrap();
        let q = uq_quantize(&x, &p).unwrap();
        prop_assert!(q.codes.iter().all(|&c| c <= (1 << k) - 1));
        let xh = uq_dequantize(&q);
        let c = x.last_dim();
        for (i, (a, b)) in x.data().iter().zip(xh.data()).enumerate() {
            let grp = match g {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => i % c,
                Granularity::PerPatch => i / c,
            };
            prop_assert!((a - b).abs() <= p.scales[grp] / 2.0 + 1e-9, "{a} -> {b}");
        }
    }

    #[test]
    fn outlier_split_recombines_exactly(x in matrix(), alpha in 0.001f64..200.0, one_sided in any::<bool>()) {
        let rule = if one_sided { OutlierRule::OneSided } else { OutlierRule::Magnitude };
        let cfg = OutlierConfig::with_rule(alpha, rule).unwrap();
        let (dense, sparse) = outlier_split(&x, &cfg).unwrap();
        let back = dense.add(&sparse.densify()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!(a == b, "{a} vs {b}");
        }
        prop_assert!(sparse.entries().iter().all(|e| cfg.is_outlier(e.2)));
    }

    #[test]
    fn infinite_alpha_is_identity(x in matrix()) {
        let (dense, sparse) = outlier_split(&x, &OutlierConfig::disabled()).unwrap();
        prop_assert_eq!(dense, x);
        prop_assert_eq!(sparse.nnz(), 0);
    }

    #[test]
    fn tiny_alpha_takes_every_nonzero(x in matrix()) {
        let (dense, sparse) = outlier_split(&x, &OutlierConfig::new(1e-300).unwrap()).unwrap();
        prop_assert!(dense.data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(sparse.nnz(), x.data().iter().filter(|v| v.abs() >= 1e-300).count());
    }
}

#[test]
fn per_patch_beats_per_tensor_with_one_outlier_patch() {
    let mut rng = adfq_core::rng::Rng::new(5);
    let k = BitWidth::new(4).unwrap();
    for case in 0..100 {
        let scale = rng.uniform_range(0.1, 2.0);
        let mut x = rng.normal_tensor(&[16, 32], scale);
        let (r, c) = (rng.below(16), rng.below(32));
        x.data_mut()[r * 32 + c] = 100.0 * scale;
        let mse = |g| {
            let y = uq_fake(&x, &uq_calibrate(&x, k, g).unwrap()).unwrap();
            y.sub(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>()
        };
        assert!(mse(Granularity::PerPatch) < mse(Granularity::PerTensor), "case {case}");
    }
}

#[test]
fn shift_log2_is_finer_than_uniform_on_the_negative_side() {
    let mut rng = adfq_core::rng::Rng::new(17);
    let k = BitWidth::new(4).unwrap();
    for case in 0..100 {
        let x = gelu(&rng.normal_tensor(&[64, 16], 1.0));
        let (q, p) = shift_log2_quantize(&x, k, 1e-8).unwrap();
        let slq = lq_dequantize(&q, &p);
        let uni = uq_fake(&x, &uq_calibrate(&x, k, Granularity::PerTensor).unwrap()).unwrap();
        let neg_mse = |y: &Tensor| {
            x.data().iter().zip(y.data()).filter(|(a, _)| **a < 0.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        assert!(neg_mse(&slq) < neg_mse(&uni), "case {case}");
    }
}

#[test]
fn shift_log2_total_mse_exceeds_uniform_on_gelu() {
    // Recorded behaviour: the coarse upper levels dominate the total error.
    let mut rng = adfq_core::rng::Rng::new(17);
    let k = BitWidth::new(4).unwrap();
    let x = gelu(&rng.normal_tensor(&[64, 16], 1.0));
    let (q, p) = shift_log2_quantize(&x, k, 1e-8).unwrap();
    let mse = |y: &Tensor| y.sub(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>();
    let uni = uq_fake(&x, &uq_calibrate(&x, k, Granularity::PerTensor).unwrap()).unwrap();
    assert!(mse(&lq_dequantize(&q, &p)) > mse(&uni));
}
