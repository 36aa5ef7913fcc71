//! MSE-based selection of mantissa bits and clipping value for real tensors.
//!
//! The search space is the 8-bit formats m ∈ [1, 6] with e = 7 − m. For each
//! m, the clipping value is swept over 111 evenly spaced points between 0.1σ
//! and 1.2σ (σ = absolute maximum); the winner is the exhaustive argmin. Per
//! channel, each channel picks its own clipping value while a majority vote
//! across channels fixes a single shared m.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{bias_from_max, FpFormat};
use crate::quantsim::{quantize_fp, QuantizerConfig};
use crate::tensor::Tensor;

pub const M_MIN: u32 = 1;
pub const M_MAX: u32 = 6;
const CLIP_POINTS: usize = 111;
const CLIP_LO_FRAC: f64 = 0.1;
const CLIP_HI_FRAC: f64 = 1.2;

/// Clipping values of a search result: one per tensor or one per channel.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipValues {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

/// Outcome of [`grid_search_format`].
#[derive(Debug, Clone, PartialEq)]
pub struct FormatSearchResult {
    pub mantissa_bits: u32,
    pub exponent_bits: u32,
    pub clip: ClipValues,
    /// Reconstruction MSE of the whole tensor under the selected config.
    pub mse: f64,
    /// Channels (or the whole tensor) with σ = 0, which received the
    /// deterministic fallback and were excluded from the majority vote.
    pub degenerate_channels: Vec<usize>,
}

/// The 111-point clipping-value sweep for a given σ.
fn clip_candidates(sigma: f64) -> Vec<f64> {
    let lo = CLIP_LO_FRAC * sigma;
    let step = (CLIP_HI_FRAC - CLIP_LO_FRAC) * sigma / (CLIP_POINTS - 1) as f64;
    (0..CLIP_POINTS).map(|i| lo + step * i as f64).collect()
}

fn quantize_slice_mse(data: &[f64], m: u32, c: f64) -> Result<f64> {
    let e = 7 - m;
    let f = FpFormat::new(m, e, bias_from_max(c, m, e)?)?;
    let kernel_input = Tensor::from_vec(data.to_vec())?;
    let q = quantize_fp(&kernel_input, &QuantizerConfig::per_tensor(f))?;
    kernel_input.mse_against(&q)
}

/// Reconstruction MSE of quantizing `x` with mantissa width `m`, exponent
/// width `7 − m`, and clipping value `c`.
pub fn eval_candidate(x: &Tensor, m: u32, c: f64) -> Result<f64> {
    if !(M_MIN..=M_MAX).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "mantissa bits {m} outside [{M_MIN}, {M_MAX}]"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "clipping value must be positive, got {c}"
        )));
    }
    quantize_slice_mse(x.data(), m, c)
}

/// Per-m best clipping value and MSE for one data slice.
#[derive(Debug, Clone)]
struct SliceSearch {
    /// Indexed by m − M_MIN: (best c, best MSE).
    per_m: Vec<(f64, f64)>,
    degenerate: bool,
}

/// Deterministic fallback for an all-zero slice: m = 1 with the smallest
/// positive normal of the format at the conventional bias 2^(e−1).
fn degenerate_fallback() -> (u32, f64) {
    let m = M_MIN;
    let e = 7 - m;
    let bias = (1u64 << (e - 1)) as f64;
    (m, (1.0 - bias).exp2())
}

fn search_slice(data: &[f64]) -> Result<SliceSearch> {
    let sigma = data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if sigma == 0.0 {
        let (_, c) = degenerate_fallback();
        return Ok(SliceSearch {
            per_m: (M_MIN..=M_MAX).map(|_| (c, 0.0)).collect(),
            degenerate: true,
        });
    }
    let candidates = clip_candidates(sigma);
    let per_m: Result<Vec<(f64, f64)>> = (M_MIN..=M_MAX)
        .into_par_iter()
        .map(|m| {
            let mut best = (candidates[0], f64::INFINITY);
            for &c in &candidates {
                let mse = quantize_slice_mse(data, m, c)?;
                // Strict inequality keeps the smallest c on ties.
                if mse < best.1 {
                    best = (c, mse);
                }
            }
            Ok(best)
        })
        .collect();
    Ok(SliceSearch {
        per_m: per_m?,
        degenerate: false,
    })
}

/// Exhaustive MSE-minimizing search for mantissa bits and clipping value(s).
///
/// Per-tensor: a single (m, c) pair. Per-channel: one c per channel with a
/// shared m chosen by majority vote over the channels' preferred m; vote ties
/// go to the m with the lowest cumulative MSE, then to the smaller m.
pub fn grid_search_format(x: &Tensor, per_channel: bool) -> Result<FormatSearchResult> {
    if x.is_empty() {
        return Err(Error::InvalidTensor("empty tensor".into()));
    }
    if !per_channel {
        let s = search_slice(x.data())?;
        if s.degenerate {
            let (m, c) = degenerate_fallback();
            return Ok(FormatSearchResult {
                mantissa_bits: m,
                exponent_bits: 7 - m,
                clip: ClipValues::PerTensor(c),
                mse: 0.0,
                degenerate_channels: vec![0],
            });
        }
        // Argmin over m; strict inequality prefers the smaller m on ties.
        let (mut best_m, mut best) = (M_MIN, s.per_m[0]);
        for (i, &cand) in s.per_m.iter().enumerate() {
            if cand.1 < best.1 {
                best_m = M_MIN + i as u32;
                best = cand;
            }
        }
        return Ok(FormatSearchResult {
            mantissa_bits: best_m,
            exponent_bits: 7 - best_m,
            clip: ClipValues::PerTensor(best.0),
            mse: best.1,
            degenerate_channels: vec![],
        });
    }

    if x.channel_axis().is_none() {
        return Err(Error::InvalidTensor(
            "per-channel search requires a channel axis".into(),
        ));
    }
    let channels = x.channel_count();
    // Group element values by channel in one pass.
    let mut slices: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, &v) in x.data().iter().enumerate() {
        slices[x.channel_of(i)].push(v);
    }
    let searches: Result<Vec<SliceSearch>> =
        slices.iter().map(|s| search_slice(s)).collect();
    let searches = searches?;

    let degenerate: Vec<usize> = searches
        .iter()
        .enumerate()
        .filter(|(_, s)| s.degenerate)
        .map(|(i, _)| i)
        .collect();

    // Majority vote on each non-degenerate channel's preferred m.
    let mut votes = [0usize; (M_MAX - M_MIN + 1) as usize];
    let mut cumulative = [0.0f64; (M_MAX - M_MIN + 1) as usize];
    for s in searches.iter().filter(|s| !s.degenerate) {
        let mut pref = 0usize;
        for (i, cand) in s.per_m.iter().enumerate() {
            if cand.1 < s.per_m[pref].1 {
                pref = i;
            }
        }
        votes[pref] += 1;
        for (i, cand) in s.per_m.iter().enumerate() {
            cumulative[i] += cand.1;
        }
    }
    let shared_m = if degenerate.len() == channels {
        degenerate_fallback().0
    } else {
        let mut winner = 0usize;
        for i in 1..votes.len() {
            let better_vote = votes[i] > votes[winner];
            let tie_break = votes[i] == votes[winner] && cumulative[i] < cumulative[winner];
            if better_vote || tie_break {
                winner = i;
            }
        }
        M_MIN + winner as u32
    };

    let clips: Vec<f64> = searches
        .iter()
        .map(|s| {
            if s.degenerate {
                degenerate_fallback().1
            } else {
                s.per_m[(shared_m - M_MIN) as usize].0
            }
        })
        .collect();

    // Overall MSE under the selected per-channel configuration.
    let e = 7 - shared_m;
    let biases: Result<Vec<f64>> = clips.iter().map(|&c| bias_from_max(c, shared_m, e)).collect();
    let f = FpFormat::new(shared_m, e, 0.0)?;
    let q = quantize_fp(x, &QuantizerConfig::per_channel(f, biases?))?;
    let mse = x.mse_against(&q)?;

    Ok(FormatSearchResult {
        mantissa_bits: shared_m,
        exponent_bits: e,
        clip: ClipValues::PerChannel(clips),
        mse,
        degenerate_channels: degenerate,
    })
}
