//! Property-based checks over randomized inputs.

use proptest::prelude::*;

use fdflow::flo::{read_flo, write_flo};
use fdflow::metrics::{epe, fl_all};
use fdflow::ops::warp::warp_forward;
use fdflow::tensor::Tensor;
use fdflow::viz::colorize;

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

fn small_f32() -> impl Strategy<Value = f32> {
    -100.0f32..100.0f32
}

fn field(h: usize, w: usize, values: impl Strategy<Value = f32>) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(values, 2 * h * w)
        .prop_map(move |data| Tensor::new(vec![1, 2, h, w], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn flo_round_trip_is_bit_exact(flow in field(3, 4, finite_f32())) {
        let mut buf = Vec::new();
        write_flo(&mut buf, &flow).unwrap();
        let back = read_flo(buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), flow.shape());
        for (a, b) in back.data().iter().zip(flow.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flo_rejects_any_truncation(flow in field(2, 3, small_f32()), cut in 1usize..59) {
        let mut buf = Vec::new();
        write_flo(&mut buf, &flow).unwrap();
        buf.truncate(buf.len() - cut);
        prop_assert!(read_flo(buf.as_slice()).is_err());
    }

    #[test]
    fn fl_all_never_decreases_when_errors_grow(
        gt in field(4, 4, small_f32()),
        err in field(4, 4, -20.0f32..20.0f32),
        scale in 1.0f32..8.0,
    ) {
        let mut base = gt.clone();
        for (p, e) in base.data_mut().iter_mut().zip(err.data()) {
            *p += e;
        }
        let mut grown = gt.clone();
        for (p, e) in grown.data_mut().iter_mut().zip(err.data()) {
            *p += scale * e;
        }
        let lo = fl_all(&base, &gt, None).unwrap();
        let hi = fl_all(&grown, &gt, None).unwrap();
        prop_assert!(hi >= lo, "scaling errors by {scale} dropped fl_all {lo} -> {hi}");
    }

    #[test]
    fn epe_is_zero_only_at_equality(gt in field(4, 4, small_f32()), du in -50.0f32..50.0, dv in -50.0f32..50.0) {
        prop_assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
        let mut shifted = gt.clone();
        let hw = 16;
        for i in 0..hw {
            shifted.plane_mut(0, 0)[i] += du;
            shifted.plane_mut(0, 1)[i] += dv;
        }
        let want = (du as f64).hypot(dv as f64);
        let got = epe(&shifted, &gt, None).unwrap();
        // f32 addition rounds each shifted component, so allow a loose bound.
        prop_assert!((got - want).abs() <= 1e-3 * want.max(1.0));
    }

    #[test]
    fn warp_with_zero_flow_is_the_identity(img_data in prop::collection::vec(small_f32(), 3 * 5 * 6)) {
        let img = Tensor::new(vec![1, 3, 5, 6], img_data).unwrap();
        let flow = Tensor::<f32>::zeros(&[1, 2, 5, 6]);
        let out = warp_forward(&img, &flow).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn colorize_is_invariant_under_power_of_two_scaling(
        flow in field(4, 4, -10.0f32..10.0),
        exp in -3i32..4,
    ) {
        let scale = (2.0f32).powi(exp);
        let mut scaled = flow.clone();
        for v in scaled.data_mut() {
            *v *= scale;
        }
        let (a, _) = colorize(&flow, None).unwrap();
        let (b, _) = colorize(&scaled, None).unwrap();
        prop_assert_eq!(a, b);
    }
}
