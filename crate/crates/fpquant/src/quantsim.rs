//! Simulated quantization to floating-point and integer grids.
//!
//! The fast path computes a per-element power-of-two scale from the element's
//! binade and rounds on that scale, which is equivalent to nearest-grid-point
//! projection when both use the same tie-breaking rule. Ties go to the even
//! mantissa code in both paths.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{FpFormat, IntFormat, QuantGrid};
use crate::tensor::Tensor;

const PAR_THRESHOLD: usize = 1 << 14;

/// Quantizer configuration for floating-point simulation. The bias may be a
/// single value (carried by `format`) or one value per channel; mantissa and
/// exponent widths are always per-tensor.
#[derive(Debug, Clone)]
pub struct QuantizerConfig {
    pub format: FpFormat,
    pub per_channel_bias: Option<Vec<f64>>,
}

impl QuantizerConfig {
    pub fn per_tensor(format: FpFormat) -> Self {
        Self {
            format,
            per_channel_bias: None,
        }
    }

    pub fn per_channel(format: FpFormat, biases: Vec<f64>) -> Self {
        Self {
            format,
            per_channel_bias: Some(biases),
        }
    }
}

/// Per-format constants shared by every element with the same bias.
#[derive(Debug, Clone, Copy)]
struct FpKernel {
    mantissa_bits: f64,
    bias: f64,
    /// Largest grid value, computed exactly as the grid enumeration does.
    grid_max: f64,
}

impl FpKernel {
    fn new(f: &FpFormat) -> Self {
        let m = f.mantissa_bits as f64;
        Self {
            mantissa_bits: m,
            bias: f.bias,
            // max_representable shares its arithmetic with enumerate_grid, so
            // clipping lands bit-exactly on the grid's top value.
            grid_max: f.max_representable(),
        }
    }

    #[inline]
    fn quantize(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let t = (x.abs().log2() + self.bias).floor().max(1.0);
        let mut s = (t - self.bias - self.mantissa_bits).exp2();
        let mut code = (x / s).round_ties_even();
        // Rounding up to the top of the binade lands on the next binade's
        // first value. Recompute it on that binade's scale so the result is
        // bit-identical to the enumerated grid (with a non-integer bias the
        // scale is not a power of two, and s·2^(m+1) and 2s·2^m round
        // differently).
        if code.abs() == (self.mantissa_bits + 1.0).exp2() {
            s = (t + 1.0 - self.bias - self.mantissa_bits).exp2();
            code *= 0.5;
        }
        let v = s * code;
        if v == 0.0 {
            // Normalize -0.0: the grid holds a single +0.0.
            0.0
        } else {
            v.clamp(-self.grid_max, self.grid_max)
        }
    }
}

/// Quantizes one value with the fast path of `quantize_fp`.
pub fn quantize_fp_value(x: f64, format: &FpFormat) -> f64 {
    FpKernel::new(format).quantize(x)
}

/// Simulated floating-point quantization of a tensor (per-tensor or
/// per-channel bias).
pub fn quantize_fp(x: &Tensor, cfg: &QuantizerConfig) -> Result<Tensor> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    match &cfg.per_channel_bias {
        None => {
            let kernel = FpKernel::new(&cfg.format);
            let out = map_elementwise(x.data(), move |v| kernel.quantize(v));
            x.with_data(out)
        }
        Some(biases) => {
            if biases.len() != x.channel_count() {
                return Err(Error::ShapeMismatch(format!(
                    "{} per-channel biases for {} channels",
                    biases.len(),
                    x.channel_count()
                )));
            }
            if x.channel_axis().is_none() {
                return Err(Error::InvalidTensor(
                    "per-channel quantization requires a channel axis".into(),
                ));
            }
            let kernels: Vec<FpKernel> = biases
                .iter()
                .map(|&b| {
                    FpKernel::new(&FpFormat {
                        bias: b,
                        ..cfg.format
                    })
                })
                .collect();
            let data = x.data();
            let out: Vec<f64> = if data.len() >= PAR_THRESHOLD {
                (0..data.len())
                    .into_par_iter()
                    .map(|i| kernels[x.channel_of(i)].quantize(data[i]))
                    .collect()
            } else {
                (0..data.len())
                    .map(|i| kernels[x.channel_of(i)].quantize(data[i]))
                    .collect()
            };
            x.with_data(out)
        }
    }
}

fn map_elementwise<F>(data: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    if data.len() >= PAR_THRESHOLD {
        data.par_iter().map(|&v| f(v)).collect()
    } else {
        data.iter().map(|&v| f(v)).collect()
    }
}

/// Brute-force nearest-grid-point projection over a sorted grid, with ties
/// broken toward the value whose code index in its interval is even. This is
/// the reference against which `quantize_fp` is verified.
pub fn quantize_fp_oracle(x: f64, grid: &QuantGrid) -> f64 {
    let values = grid.values();
    if x <= grid.min() {
        return grid.min();
    }
    if x >= grid.max() {
        return grid.max();
    }
    // First index with values[i] >= x; both neighbors exist here.
    let i = values.partition_point(|&v| v < x);
    let lo = values[i - 1];
    let hi = values[i];
    let d_lo = x - lo;
    let d_hi = hi - x;
    if d_lo < d_hi {
        lo
    } else if d_hi < d_lo {
        hi
    } else {
        // Exact midpoint: the interval is uniform with step hi - lo, so both
        // endpoints have integer positions on that step. Pick the even one.
        let step = hi - lo;
        let q_lo = (lo / step).round_ties_even();
        if (q_lo as i64) % 2 == 0 {
            lo
        } else {
            hi
        }
    }
}

/// Integer (de)quantization: `s * clip(round(x/s), min_code, max_code)` with
/// ties-to-even rounding.
pub fn quantize_int(x: &Tensor, f: &IntFormat) -> Result<Tensor> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    let s = f.scale;
    let lo = f.min_code() as f64;
    let hi = f.max_code() as f64;
    let out = map_elementwise(x.data(), move |v| {
        let q = s * (v / s).round_ties_even().clamp(lo, hi);
        // Normalize -0.0 so outputs are bitwise grid members.
        if q == 0.0 {
            0.0
        } else {
            q
        }
    });
    x.with_data(out)
}

/// Mean squared elementwise difference between a tensor and its quantized
/// counterpart.
pub fn empirical_mse(x: &Tensor, quantized: &Tensor) -> Result<f64> {
    x.mse_against(quantized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::bias_from_max;

    fn fp(m: u32, e: u32, bias: f64) -> FpFormat {
        FpFormat::new(m, e, bias).unwrap()
    }

    #[test]
    fn grid_points_are_fixed_points() {
        let f = fp(2, 2, 2.0);
        let grid = f.enumerate_grid().unwrap();
        for &v in grid.values() {
            assert_eq!(quantize_fp_value(v, &f), v, "grid point {v}");
        }
    }

    #[test]
    fn clips_to_max_value() {
        let f = fp(3, 4, 8.0);
        assert_eq!(quantize_fp_value(300.0, &f), 240.0);
        assert_eq!(quantize_fp_value(-1e6, &f), -240.0);
    }

    #[test]
    fn rounds_to_nearest_grid_point() {
        let f = fp(2, 2, 2.0);
        // Grid around 0.3: {0.25, 0.375}.
        assert_eq!(quantize_fp_value(0.3, &f), 0.25);
    }

    #[test]
    fn zero_maps_to_zero() {
        let f = fp(3, 4, 8.0);
        assert_eq!(quantize_fp_value(0.0, &f), 0.0);
    }

    #[test]
    fn oracle_exact_grid_point_and_clipping() {
        let f = fp(2, 2, 2.0);
        let grid = f.enumerate_grid().unwrap();
        for &v in grid.values() {
            assert_eq!(quantize_fp_oracle(v, &grid), v);
        }
        assert_eq!(quantize_fp_oracle(100.0, &grid), 3.5);
        assert_eq!(quantize_fp_oracle(-100.0, &grid), -3.5);
    }

    #[test]
    fn tie_breaking_matches_between_paths() {
        let f = fp(2, 2, 2.0);
        let grid = f.enumerate_grid().unwrap();
        // Midpoints of adjacent grid values are exact ties.
        for w in grid.values().windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            assert_eq!(
                quantize_fp_value(mid, &f),
                quantize_fp_oracle(mid, &grid),
                "midpoint {mid}"
            );
        }
    }

    #[test]
    fn oracle_equivalence_sampled() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (m, e) in [(5u32, 2u32), (3, 4)] {
            let f = fp(m, e, 8.0);
            let grid = f.enumerate_grid().unwrap();
            let c = f.max_representable();
            for _ in 0..20_000 {
                let x = rng.random_range(-2.0 * c..2.0 * c);
                assert_eq!(quantize_fp_value(x, &f), quantize_fp_oracle(x, &grid));
            }
        }
    }

    #[test]
    fn sign_symmetry_and_idempotence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let f = fp(4, 3, bias_from_max(6.0, 4, 3).unwrap());
        for _ in 0..5_000 {
            let x: f64 = rng.random_range(-10.0..10.0);
            let q = quantize_fp_value(x, &f);
            assert_eq!(quantize_fp_value(-x, &f), -q);
            assert_eq!(quantize_fp_value(q, &f), q);
        }
    }

    #[test]
    fn int_quantization_examples() {
        let f = IntFormat::new(8, 1.0).unwrap();
        let x = Tensor::from_vec(vec![3.4, 1000.0, -1000.0]).unwrap();
        let q = quantize_int(&x, &f).unwrap();
        assert_eq!(q.data(), &[3.0, 127.0, -128.0]);

        let f = IntFormat::new(8, 0.1).unwrap();
        let x = Tensor::from_vec(vec![0.26]).unwrap();
        let q = quantize_int(&x, &f).unwrap();
        assert!((q.data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn per_channel_bias_application() {
        let f = fp(3, 4, 0.0);
        let x = Tensor::new(vec![0.3, 0.3, 30.0, 30.0], vec![2, 2], Some(0)).unwrap();
        let b0 = bias_from_max(0.5, 3, 4).unwrap();
        let b1 = bias_from_max(50.0, 3, 4).unwrap();
        let cfg = QuantizerConfig::per_channel(f, vec![b0, b1]);
        let q = quantize_fp(&x, &cfg).unwrap();
        // Channel 0 clips at 0.5, channel 1 at 50.
        assert!(q.data()[0] <= 0.5 && (q.data()[0] - 0.3).abs() < 0.05);
        assert!((q.data()[2] - 30.0).abs() < 2.0);

        let bad = QuantizerConfig::per_channel(f, vec![b0]);
        assert!(quantize_fp(&x, &bad).is_err());
    }

    #[test]
    fn output_is_on_grid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = fp(2, 5, 16.0);
        let grid = f.enumerate_grid().unwrap();
        for _ in 0..5_000 {
            let x = rng.random_range(-1e5..1e5);
            let q = quantize_fp_value(x, &f);
            assert!(grid.values().binary_search_by(|v| v.partial_cmp(&q).unwrap()).is_ok());
        }
    }
}
