//! Number format definitions and representable-value grids.
//!
//! A floating-point format is described by its mantissa width `m`, exponent
//! width `e` and a real-valued reparameterized bias `b̂`. The bias absorbs any
//! quantization scale, so a single real number positions the whole grid.
//! Integer formats are a bit width plus a positive scale.

use crate::error::{Error, Result};

/// Maximum total bit width (sign + exponent + mantissa) for grid enumeration.
pub const MAX_ENUM_BITS: u32 = 16;

/// A signed minifloat format with a real-valued exponent bias.
///
/// All exponent codes denote finite values; there are no Inf/NaN encodings.
/// The zero exponent field marks subnormals (implicit exponent 1, no hidden
/// bit), which makes 0 exactly representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpFormat {
    /// Mantissa bits. May be 0 for a pure-exponent grid.
    pub mantissa_bits: u32,
    /// Exponent bits, at least 1.
    pub exponent_bits: u32,
    /// Reparameterized bias `b̂ = b - log2(γ)`.
    pub bias: f64,
}

impl FpFormat {
    pub fn new(mantissa_bits: u32, exponent_bits: u32, bias: f64) -> Result<Self> {
        if exponent_bits == 0 {
            return Err(Error::InvalidFormat(
                "exponent width must be at least 1".into(),
            ));
        }
        if !bias.is_finite() {
            return Err(Error::InvalidFormat("bias must be finite".into()));
        }
        Ok(Self {
            mantissa_bits,
            exponent_bits,
            bias,
        })
    }

    /// Total bit width including the sign bit.
    pub fn bit_width(&self) -> u32 {
        self.mantissa_bits + self.exponent_bits + 1
    }

    /// Largest representable magnitude, `c = (2 - 2^-m) * 2^(2^e - b̂ - 1)`.
    ///
    /// Evaluated as `2^(2^e - 1 - b̂ - m) * (2^(m+1) - 1)`, the same arithmetic
    /// the grid enumeration uses for its top value, so the two agree
    /// bit-exactly.
    pub fn max_representable(&self) -> f64 {
        let m = self.mantissa_bits as f64;
        let top_field = ((1u64 << self.exponent_bits) - 1) as f64;
        let top_code = ((1u64 << (self.mantissa_bits + 1)) - 1) as f64;
        (top_field - self.bias - m).exp2() * top_code
    }

    /// Smallest positive representable value, `2^(1 - b̂ - m)`.
    pub fn min_subnormal(&self) -> f64 {
        (1.0 - self.bias - self.mantissa_bits as f64).exp2()
    }

    /// Enumerates every representable value, sorted ascending.
    pub fn enumerate_grid(&self) -> Result<QuantGrid> {
        if self.bit_width() > MAX_ENUM_BITS {
            return Err(Error::InvalidFormat(format!(
                "bit width {} exceeds enumeration bound {}",
                self.bit_width(),
                MAX_ENUM_BITS
            )));
        }
        let m = self.mantissa_bits as f64;
        let mant_count = 1u64 << self.mantissa_bits;
        let exp_count = 1u64 << self.exponent_bits;
        let mut positives = Vec::with_capacity((exp_count * mant_count) as usize);
        // Values are built as scale * integer-code with the scale exponent
        // written exactly as in the fast quantizer path, so both produce
        // bit-identical binary64 values.
        for p_field in 0..exp_count {
            for d in 0..mant_count {
                let v = if p_field == 0 {
                    // Subnormal: implicit exponent 1, no hidden bit.
                    (1.0 - self.bias - m).exp2() * d as f64
                } else {
                    (p_field as f64 - self.bias - m).exp2() * (mant_count + d) as f64
                };
                positives.push(v);
            }
        }
        let mut values = Vec::with_capacity(positives.len() * 2);
        for &v in &positives {
            if v > 0.0 {
                values.push(-v);
            }
        }
        values.extend_from_slice(&positives);
        QuantGrid::from_values(values)
    }
}

/// A symmetric signed integer format: codes in `[-2^(n-1), 2^(n-1) - 1]`
/// times a positive scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntFormat {
    pub bit_width: u32,
    pub scale: f64,
}

impl IntFormat {
    pub fn new(bit_width: u32, scale: f64) -> Result<Self> {
        if bit_width < 2 || bit_width > MAX_ENUM_BITS {
            return Err(Error::InvalidFormat(format!(
                "integer bit width {bit_width} outside [2, {MAX_ENUM_BITS}]"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidFormat("scale must be positive".into()));
        }
        Ok(Self { bit_width, scale })
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.bit_width - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bit_width - 1)) - 1
    }

    /// Enumerates `scale * k` for every integer code `k`.
    pub fn enumerate_grid(&self) -> Result<QuantGrid> {
        let values: Vec<f64> = (self.min_code()..=self.max_code())
            .map(|k| self.scale * k as f64)
            .collect();
        QuantGrid::from_values(values)
    }
}

/// Sorted distinct representable values of a format.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    values: Vec<f64>,
}

impl QuantGrid {
    /// Builds a grid from arbitrary finite values, sorting and deduplicating.
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidFormat("empty quantization grid".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFormat("non-finite grid value".into()));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        // Collapse -0.0 and +0.0.
        if let Some(i) = values.iter().position(|&v| v == 0.0) {
            if i + 1 < values.len() && values[i + 1] == 0.0 {
                values.remove(i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// Inverts `max_representable`: the bias that makes `c` the largest
/// representable magnitude of an `(m, e)` format.
///
/// `b̂ = 2^e - 1 + log2(2 - 2^-m) - log2(c)`; exact round-trip with
/// [`FpFormat::max_representable`].
pub fn bias_from_max(c: f64, mantissa_bits: u32, exponent_bits: u32) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidFormat(format!(
            "clipping value must be positive, got {c}"
        )));
    }
    let m = mantissa_bits as f64;
    let two_e = (1u64 << exponent_bits) as f64;
    // Single log of the ratio: exact whenever (2 - 2^-m)/c is a power of two
    // (e.g. c = 240 for 3M4E gives exactly 8).
    Ok(two_e - 1.0 + ((2.0 - (-m).exp2()) / c).log2())
}
