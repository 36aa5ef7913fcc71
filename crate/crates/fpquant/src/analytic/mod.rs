//! Expected quantization error for parametric distributions.
//!
//! The expected MSE of nearest-grid-point quantization decomposes into a
//! rounding term (inside the grid range) and a clipping term (outside). Both
//! reduce to partial moments of the density over sub-intervals, which have
//! closed forms for the Gaussian and Uniform families; Student's-t uses
//! adaptive quadrature as the authoritative path with a hypergeometric
//! closed form for cross-validation.
//!
//! Densities are truncated to the clip bounds without renormalization: the
//! tail mass simply does not contribute.

pub mod quad;
pub mod special;

use crate::error::{Error, Result};
use crate::formats::{bias_from_max, FpFormat, IntFormat, QuantGrid};
use special::{beta, erf, hyp2f1};

const QUAD_TOL: f64 = 1e-12;

/// Distribution family with its parameters (unclipped density).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Gaussian { mu: f64, sigma: f64 },
    Uniform { a: f64, b: f64 },
    StudentT { nu: f64 },
}

/// A parametric density restricted to finite clip bounds `[w_min, w_max]`.
///
/// The restriction drops tail mass; it is not renormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distribution {
    pub family: Family,
    pub w_min: f64,
    pub w_max: f64,
}

impl Distribution {
    pub fn new(family: Family, w_min: f64, w_max: f64) -> Result<Self> {
        if !(w_min.is_finite() && w_max.is_finite() && w_min < w_max) {
            return Err(Error::InvalidDistribution(format!(
                "clip bounds [{w_min}, {w_max}] must be finite with w_min < w_max"
            )));
        }
        match family {
            Family::Gaussian { sigma, .. } if !(sigma > 0.0 && sigma.is_finite()) => {
                return Err(Error::InvalidDistribution(format!("sigma = {sigma}")));
            }
            Family::Uniform { a, b } if !(a < b && a.is_finite() && b.is_finite()) => {
                return Err(Error::InvalidDistribution(format!("uniform [{a}, {b}]")));
            }
            Family::StudentT { nu } if !(nu > 0.0 && nu.is_finite()) => {
                return Err(Error::InvalidDistribution(format!("nu = {nu}")));
            }
            _ => {}
        }
        Ok(Self {
            family,
            w_min,
            w_max,
        })
    }

    pub fn gaussian(mu: f64, sigma: f64, w_min: f64, w_max: f64) -> Result<Self> {
        Self::new(Family::Gaussian { mu, sigma }, w_min, w_max)
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        Self::new(Family::Uniform { a, b }, a, b)
    }

    pub fn student_t(nu: f64, w_min: f64, w_max: f64) -> Result<Self> {
        Self::new(Family::StudentT { nu }, w_min, w_max)
    }

    /// Unclipped density of the family at `x`.
    pub fn density(&self, x: f64) -> f64 {
        match self.family {
            Family::Gaussian { mu, sigma } => {
                let z = (x - mu) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            Family::Uniform { a, b } => {
                if x >= a && x <= b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            Family::StudentT { nu } => {
                let z = nu.sqrt() * beta(0.5, 0.5 * nu);
                (1.0 + x * x / nu).powf(-0.5 * (nu + 1.0)) / z
            }
        }
    }

    /// Density restricted to the clip bounds.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.w_min || x > self.w_max {
            0.0
        } else {
            self.density(x)
        }
    }

    /// Largest absolute value of the support.
    pub fn abs_bound(&self) -> f64 {
        self.w_min.abs().max(self.w_max.abs())
    }

    /// Closed-form partial moments `(∫p, ∫x·p, ∫x²·p)` over `[a, b]` of the
    /// unclipped density. `None` when no closed form converges (Student's-t
    /// with a failing hypergeometric series).
    fn partial_moments(&self, a: f64, b: f64) -> Option<(f64, f64, f64)> {
        match self.family {
            Family::Gaussian { mu, sigma } => {
                let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let za = (a - mu) / sigma;
                let zb = (b - mu) / sigma;
                let p0 = 0.5 * (erf(zb / std::f64::consts::SQRT_2) - erf(za / std::f64::consts::SQRT_2));
                let pd = phi(za) - phi(zb);
                let p1 = mu * p0 + sigma * pd;
                let p2 = mu * mu * p0
                    + 2.0 * mu * sigma * pd
                    + sigma * sigma * (p0 + za * phi(za) - zb * phi(zb));
                Some((p0, p1, p2))
            }
            Family::Uniform { a: ua, b: ub } => {
                let lo = a.max(ua);
                let hi = b.min(ub);
                if hi <= lo {
                    return Some((0.0, 0.0, 0.0));
                }
                let p0 = 1.0 / (ub - ua);
                Some((
                    p0 * (hi - lo),
                    p0 * (hi * hi - lo * lo) / 2.0,
                    p0 * (hi * hi * hi - lo * lo * lo) / 3.0,
                ))
            }
            Family::StudentT { nu } => {
                let z = nu.sqrt() * beta(0.5, 0.5 * nu);
                // Antiderivative of p.
                let f0 = |t: f64| {
                    hyp2f1(0.5, 0.5 * (nu + 1.0), 1.5, -t * t / nu).map(|h| t * h / z)
                };
                // Antiderivative of t·p.
                let f1 = |t: f64| {
                    if (nu - 1.0).abs() < 1e-12 {
                        0.5 * nu * (1.0 + t * t / nu).ln() / z
                    } else {
                        -(nu / (nu - 1.0)) * (1.0 + t * t / nu).powf(0.5 * (1.0 - nu)) / z
                    }
                };
                // Antiderivative of t²·p.
                let f2 = |t: f64| {
                    hyp2f1(1.5, 0.5 * (nu + 1.0), 2.5, -t * t / nu).map(|h| t * t * t / 3.0 * h / z)
                };
                let p0 = f0(b)? - f0(a)?;
                let p1 = f1(b) - f1(a);
                let p2 = f2(b)? - f2(a)?;
                Some((p0, p1, p2))
            }
        }
    }

    fn check_interval(&self, a: f64, b: f64) -> Result<()> {
        // A tiny slack absorbs roundoff when callers clamp to the bounds.
        let span = (self.w_max - self.w_min).abs();
        let eps = 1e-9 * span.max(1.0);
        if a > b || a < self.w_min - eps || b > self.w_max + eps {
            return Err(Error::InvalidInterval {
                a,
                b,
                lo: self.w_min,
                hi: self.w_max,
            });
        }
        Ok(())
    }
}

/// `∫_a^b (q0 + q1·t + t²) φ_{μ,σ}(w) dw` with `t = w - (a+b)/2`, evaluated
/// as a midpoint Taylor series of the density. Used when the interval is
/// narrow relative to σ, where combining the Φ/φ antiderivative terms loses
/// most significant digits to cancellation (rounding cells are exactly this
/// regime). Returns `None` when the series would need large intermediate
/// terms and the antiderivative form is already well conditioned.
fn gaussian_series_moment(mu: f64, sigma: f64, a: f64, b: f64, q0: f64, q1: f64) -> Option<f64> {
    let wm = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let s2 = sigma * sigma;
    let dm = wm - mu;
    if h * (dm.abs() + h) > 2.0 * s2 {
        return None;
    }
    let dens = (-0.5 * dm * dm / s2).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    // Taylor coefficients e_k of exp(-(2·dm·t + t²)/(2σ²)) from
    // (k+1)·e_{k+1} = -(dm·e_k + e_{k-1})/σ².
    let (mut e_km2, mut e_km1, mut e_k) = (0.0f64, 0.0f64, 1.0f64);
    let mut sum = 0.0;
    let mut h_pow = h; // h^(k+1)
    for k in 0..120u32 {
        if k % 2 == 0 {
            let coeff = q0 * e_k + q1 * e_km1 + e_km2;
            let term = coeff * 2.0 * h_pow / (k + 1) as f64;
            sum += term;
            if k >= 4 && term.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        let e_next = -(dm * e_k + e_km1) / (s2 * (k + 1) as f64);
        (e_km2, e_km1, e_k) = (e_km1, e_k, e_next);
        h_pow *= h;
    }
    Some(dens * sum)
}

/// Uniform partial moments of `(q0 + q1·u + u²)` with `u = w - x0`, written
/// in the shifted variable so narrow intervals far from the origin do not
/// cancel. Returns the integral over `[a, b] ∩ [ua, ub]`.
fn uniform_shifted_moment(ua: f64, ub: f64, a: f64, b: f64, x0: f64, q0: f64, q1: f64) -> f64 {
    let lo = a.max(ua);
    let hi = b.min(ub);
    if hi <= lo {
        return 0.0;
    }
    let u1 = lo - x0;
    let u2 = hi - x0;
    let width = hi - lo;
    let m0 = width;
    let m1 = width * 0.5 * (u1 + u2);
    let m2 = width * (u1 * u1 + u1 * u2 + u2 * u2) / 3.0;
    (q0 * m0 + q1 * m1 + m2) / (ub - ua)
}

/// `I(a, b, x0) = ∫_a^b (w - x0)² p(w) dw` over the clipped density.
///
/// Closed form for Gaussian/Uniform; adaptive quadrature for Student's-t.
pub fn moment_integral_i(d: &Distribution, a: f64, b: f64, x0: f64) -> Result<f64> {
    d.check_interval(a, b)?;
    if a == b {
        return Ok(0.0);
    }
    match d.family {
        Family::StudentT { .. } => {
            let f = |w: f64| (w - x0) * (w - x0) * d.density(w);
            Ok(quad::integrate(&f, a, b, QUAD_TOL)?.0)
        }
        Family::Uniform { a: ua, b: ub } => {
            // (w - x0)² = u² with u = w - x0.
            Ok(uniform_shifted_moment(ua, ub, a, b, x0, 0.0, 0.0))
        }
        Family::Gaussian { mu, sigma } => {
            // (w - x0)² = c0² + 2·c0·t + t² with t = w - wm, c0 = wm - x0.
            let c0 = 0.5 * (a + b) - x0;
            if let Some(v) = gaussian_series_moment(mu, sigma, a, b, c0 * c0, 2.0 * c0) {
                return Ok(v);
            }
            let (p0, p1, p2) = d.partial_moments(a, b).expect("closed form available");
            Ok(p2 - 2.0 * x0 * p1 + x0 * x0 * p0)
        }
    }
}

/// `J(a, b, x0) = ∫_a^b w (w - x0) p(w) dw` over the clipped density.
pub fn moment_integral_j(d: &Distribution, a: f64, b: f64, x0: f64) -> Result<f64> {
    d.check_interval(a, b)?;
    if a == b {
        return Ok(0.0);
    }
    match d.family {
        Family::StudentT { .. } => {
            let f = |w: f64| w * (w - x0) * d.density(w);
            Ok(quad::integrate(&f, a, b, QUAD_TOL)?.0)
        }
        Family::Uniform { a: ua, b: ub } => {
            // w(w - x0) = x0·u + u² with u = w - x0.
            Ok(uniform_shifted_moment(ua, ub, a, b, x0, 0.0, x0))
        }
        Family::Gaussian { mu, sigma } => {
            // w(w - x0) = wm·c0 + (wm + c0)·t + t² with t = w - wm.
            let wm = 0.5 * (a + b);
            let c0 = wm - x0;
            if let Some(v) = gaussian_series_moment(mu, sigma, a, b, wm * c0, wm + c0) {
                return Ok(v);
            }
            let (_, p1, p2) = d.partial_moments(a, b).expect("closed form available");
            Ok(p2 - x0 * p1)
        }
    }
}

/// Student's-t `I` via the hypergeometric closed form, for cross-validation
/// against the quadrature path. `None` when the series fails to converge.
pub fn student_t_i_closed_form(d: &Distribution, a: f64, b: f64, x0: f64) -> Option<f64> {
    match d.family {
        Family::StudentT { .. } => {
            let (p0, p1, p2) = d.partial_moments(a, b)?;
            Some(p2 - 2.0 * x0 * p1 + x0 * x0 * p0)
        }
        _ => None,
    }
}

/// Rounding and clipping components of expected quantization MSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBreakdown {
    pub rounding: f64,
    pub clipping: f64,
}

impl ErrorBreakdown {
    pub fn total(&self) -> f64 {
        self.rounding + self.clipping
    }
}

/// Clamps `[a, b]` to the distribution support, returning `None` when the
/// intersection is empty.
fn clamp_interval(d: &Distribution, a: f64, b: f64) -> Option<(f64, f64)> {
    let lo = a.max(d.w_min);
    let hi = b.min(d.w_max);
    if hi > lo {
        Some((lo, hi))
    } else {
        None
    }
}

/// Expected squared rounding error: per grid interval, the two sub-intervals
/// on either side of the midpoint integrate `(w - nearest grid point)²`.
pub fn rounding_error(grid: &QuantGrid, d: &Distribution) -> Result<f64> {
    let values = grid.values();
    let mut total = 0.0;
    for w in values.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        if let Some((a, b)) = clamp_interval(d, lo, mid) {
            total += moment_integral_i(d, a, b, lo)?;
        }
        if let Some((a, b)) = clamp_interval(d, mid, hi) {
            total += moment_integral_i(d, a, b, hi)?;
        }
    }
    Ok(total)
}

/// Expected squared clipping error from mass outside the grid range.
pub fn clipping_error(grid: &QuantGrid, d: &Distribution) -> Result<f64> {
    let mut total = 0.0;
    if d.w_min < grid.min() {
        let b = grid.min().min(d.w_max);
        total += moment_integral_i(d, d.w_min, b, grid.min())?;
    }
    if grid.max() < d.w_max {
        let a = grid.max().max(d.w_min);
        total += moment_integral_i(d, a, d.w_max, grid.max())?;
    }
    Ok(total)
}

/// Total expected quantization MSE, split into rounding and clipping parts.
pub fn expected_mse(grid: &QuantGrid, d: &Distribution) -> Result<ErrorBreakdown> {
    Ok(ErrorBreakdown {
        rounding: rounding_error(grid, d)?,
        clipping: clipping_error(grid, d)?,
    })
}

/// Signed residual term `E_s = ∫ w·(w - Q(w)) p(w) dw` over the grid range,
/// split per sub-interval.
pub fn signed_error(grid: &QuantGrid, d: &Distribution) -> Result<f64> {
    let values = grid.values();
    let mut total = 0.0;
    for w in values.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        if let Some((a, b)) = clamp_interval(d, lo, mid) {
            total += moment_integral_j(d, a, b, lo)?;
        }
        if let Some((a, b)) = clamp_interval(d, mid, hi) {
            total -= moment_integral_j(d, a, b, hi)?;
        }
    }
    Ok(total)
}

/// Second non-central moment `M = ∫ w² p(w) dw` over the clip range.
pub fn second_moment(d: &Distribution) -> Result<f64> {
    moment_integral_i(d, d.w_min, d.w_max, 0.0)
}

/// Expected squared error of the scalar product of independently quantized
/// `W` and `X`, full six-term expansion.
pub fn scalar_product_mse(
    grid_w: &QuantGrid,
    d_w: &Distribution,
    grid_x: &QuantGrid,
    d_x: &Distribution,
) -> Result<f64> {
    let m_w = second_moment(d_w)?;
    let m_x = second_moment(d_x)?;
    let e_rw = rounding_error(grid_w, d_w)?;
    let e_rx = rounding_error(grid_x, d_x)?;
    let e_sw = signed_error(grid_w, d_w)?;
    let e_sx = signed_error(grid_x, d_x)?;
    Ok(m_x * e_rw + m_w * e_rx + e_rw * e_rx
        + 2.0 * e_sw * e_sx
        + 2.0 * e_rw * e_sx
        + 2.0 * e_rx * e_sw)
}

/// First two (dominant) terms of [`scalar_product_mse`].
pub fn scalar_product_mse_approx(
    grid_w: &QuantGrid,
    d_w: &Distribution,
    grid_x: &QuantGrid,
    d_x: &Distribution,
) -> Result<f64> {
    let m_w = second_moment(d_w)?;
    let m_x = second_moment(d_x)?;
    let e_rw = rounding_error(grid_w, d_w)?;
    let e_rx = rounding_error(grid_x, d_x)?;
    Ok(m_x * e_rw + m_w * e_rx)
}

/// Signal-to-quantization-noise ratio in decibels; `+∞` for zero error.
pub fn sqnr(d: &Distribution, grid: &QuantGrid) -> Result<f64> {
    let signal = second_moment(d)?;
    let noise = expected_mse(grid, d)?.total();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Independent oracle for the total expected MSE: numerically integrates the
/// squared residual per sub-interval (never across a midpoint, where the
/// residual is non-smooth). Returns the value and accumulated error estimate.
pub fn quadrature_mse_oracle(grid: &QuantGrid, d: &Distribution) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut err = 0.0;
    let mut add = |target: f64, a: f64, b: f64| -> Result<()> {
        let f = |w: f64| (w - target) * (w - target) * d.density(w);
        let (v, e) = quad::integrate(&f, a, b, QUAD_TOL)?;
        total += v;
        err += e;
        Ok(())
    };
    if d.w_min < grid.min() {
        add(grid.min(), d.w_min, grid.min().min(d.w_max))?;
    }
    for w in grid.values().windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if let Some((a, b)) = clamp_interval(d, w[0], mid) {
            add(w[0], a, b)?;
        }
        if let Some((a, b)) = clamp_interval(d, mid, w[1]) {
            add(w[1], a, b)?;
        }
    }
    if grid.max() < d.w_max {
        add(grid.max(), grid.max().max(d.w_min), d.w_max)?;
    }
    Ok((total, err))
}

/// Result of an MSE-optimal clipping-value search for a fixed format shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalClip {
    /// Clipping value (largest representable magnitude).
    pub c: f64,
    /// Reparameterized bias (FP) or scale (INT) realizing `c`.
    pub param: f64,
    pub mse: f64,
}

const CLIP_SEARCH_LO: f64 = 0.05;
const CLIP_SEARCH_HI: f64 = 2.0;
const CLIP_COARSE_POINTS: usize = 80;

/// Golden-section minimization of `f` on `[a, b]` (assumed unimodal there).
fn golden_section<F: FnMut(f64) -> Result<f64>>(mut f: F, mut a: f64, mut b: f64) -> Result<f64> {
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    for _ in 0..80 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2)?;
        }
        if (b - a).abs() <= 1e-10 * b.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

/// Minimizes an MSE objective over the clipping value `c` with a coarse scan
/// followed by golden-section refinement of the best bracket (the landscape
/// is only piecewise-smooth, so a bare golden section is not reliable).
fn optimize_clip<F: FnMut(f64) -> Result<f64>>(mut mse_at: F, w_abs: f64) -> Result<(f64, f64)> {
    let lo = CLIP_SEARCH_LO * w_abs;
    let hi = CLIP_SEARCH_HI * w_abs;
    let n = CLIP_COARSE_POINTS;
    let mut best = (lo, f64::INFINITY);
    let mut samples = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let c = lo + (hi - lo) * i as f64 / n as f64;
        let v = mse_at(c)?;
        samples.push((c, v));
        if v < best.1 {
            best = (c, v);
        }
    }
    let idx = samples.iter().position(|&(c, _)| c == best.0).unwrap();
    let a = samples[idx.saturating_sub(1)].0;
    let b = samples[(idx + 1).min(n)].0;
    let c = golden_section(&mut mse_at, a, b)?;
    let v = mse_at(c)?;
    if v <= best.1 {
        Ok((c, v))
    } else {
        Ok(best)
    }
}

/// MSE-optimal bias for an `(m, e)` floating-point format under `d`.
pub fn optimal_fp_bias(mantissa_bits: u32, exponent_bits: u32, d: &Distribution) -> Result<OptimalClip> {
    let w_abs = d.abs_bound();
    let (c, mse) = optimize_clip(
        |c| {
            let bias = bias_from_max(c, mantissa_bits, exponent_bits)?;
            let grid = FpFormat::new(mantissa_bits, exponent_bits, bias)?.enumerate_grid()?;
            Ok(expected_mse(&grid, d)?.total())
        },
        w_abs,
    )?;
    Ok(OptimalClip {
        c,
        param: bias_from_max(c, mantissa_bits, exponent_bits)?,
        mse,
    })
}

/// MSE-optimal scale for an integer format under `d`.
pub fn optimal_int_scale(bit_width: u32, d: &Distribution) -> Result<OptimalClip> {
    let w_abs = d.abs_bound();
    let max_code = ((1u64 << (bit_width - 1)) - 1) as f64;
    let (c, mse) = optimize_clip(
        |c| {
            let grid = IntFormat::new(bit_width, c / max_code)?.enumerate_grid()?;
            Ok(expected_mse(&grid, d)?.total())
        },
        w_abs,
    )?;
    Ok(OptimalClip {
        c,
        param: c / max_code,
        mse,
    })
}
