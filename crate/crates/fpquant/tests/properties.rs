//! Property-based invariants for formats and quantizers.

use proptest::prelude::*;

use fpquant::formats::{bias_from_max, FpFormat, IntFormat};
use fpquant::quantsim::{quantize_fp_oracle, quantize_fp_value, quantize_int};
use fpquant::tensor::Tensor;

fn fp_format() -> impl Strategy<Value = FpFormat> {
    (1u32..=6, 1u32..=6, -4.0f64..20.0)
        .prop_map(|(m, e, bias)| FpFormat::new(m, e, bias).unwrap())
}

proptest! {
    #[test]
    fn output_is_a_grid_member(f in fp_format(), x in -1e6f64..1e6) {
        let grid = f.enumerate_grid().unwrap();
        let q = quantize_fp_value(x, &f);
        let on_grid = grid
            .values()
            .iter()
            .any(|v| v.to_bits() == q.to_bits());
        prop_assert!(on_grid, "{q} not on grid of {}M{}E b̂={}", f.mantissa_bits, f.exponent_bits, f.bias);
    }

    #[test]
    fn idempotent(f in fp_format(), x in -1e6f64..1e6) {
        let q = quantize_fp_value(x, &f);
        prop_assert_eq!(quantize_fp_value(q, &f).to_bits(), q.to_bits());
    }

    #[test]
    fn odd_symmetry(f in fp_format(), x in -1e6f64..1e6) {
        let q = quantize_fp_value(x, &f);
        prop_assert_eq!(quantize_fp_value(-x, &f).to_bits(), (-q).to_bits());
    }

    #[test]
    fn monotone(f in fp_format(), a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize_fp_value(lo, &f) <= quantize_fp_value(hi, &f));
    }

    #[test]
    fn agrees_with_oracle(f in fp_format(), x in -1e5f64..1e5) {
        let grid = f.enumerate_grid().unwrap();
        prop_assert_eq!(
            quantize_fp_value(x, &f).to_bits(),
            quantize_fp_oracle(x, &grid).to_bits()
        );
    }

    #[test]
    fn nearest_among_grid_values(f in fp_format(), x in -1e5f64..1e5) {
        let grid = f.enumerate_grid().unwrap();
        let q = quantize_fp_value(x, &f);
        let best = grid
            .values()
            .iter()
            .map(|&v| (v - x).abs())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((q - x).abs() <= best * (1.0 + 1e-15) + f64::MIN_POSITIVE);
    }

    #[test]
    fn bias_round_trips_through_max(f in fp_format()) {
        let c = f.max_representable();
        let b = bias_from_max(c, f.mantissa_bits, f.exponent_bits).unwrap();
        prop_assert!((b - f.bias).abs() <= 1e-12 * f.bias.abs().max(1.0));
    }

    #[test]
    fn grid_is_sorted_and_symmetric(f in fp_format()) {
        let grid = f.enumerate_grid().unwrap();
        let v = grid.values();
        prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
        let n = v.len();
        for i in 0..n / 2 {
            prop_assert_eq!(v[i], -v[n - 1 - i]);
        }
        prop_assert_eq!(grid.max(), f.max_representable());
        prop_assert!(v.contains(&0.0));
    }

    #[test]
    fn int_output_is_scaled_integer_in_range(
        bits in 2u32..=8,
        scale in 1e-3f64..1e3,
        x in -1e6f64..1e6,
    ) {
        let f = IntFormat::new(bits, scale).unwrap();
        let t = Tensor::from_vec(vec![x]).unwrap();
        let q = quantize_int(&t, &f).unwrap().data()[0];
        // q/scale need not be an exact integer in f64, but q must be the
        // exact product of the scale and some in-range code.
        let code = (q / scale).round();
        prop_assert!(q == scale * code);
        prop_assert!(code >= f.min_code() as f64 && code <= f.max_code() as f64);
    }
}
