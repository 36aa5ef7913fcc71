//! Command-line front end: format inspection, analytic MSE sweeps, tensor
//! quantization, format search, learning runs, and fast-path verification.
//!
//! Outputs are machine-readable CSV/JSON. Exit codes: 0 success, 1 property
//! failure (`verify`), 2 usage or input error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use fpquant::analytic::{
    expected_mse, optimal_fp_bias, optimal_int_scale, scalar_product_mse,
    scalar_product_mse_approx, second_moment, Distribution, Family,
};
use fpquant::formats::{bias_from_max, FpFormat, IntFormat, QuantGrid};
use fpquant::learn::{sgd_learn, LearnState};
use fpquant::quantsim::{quantize_fp, quantize_fp_oracle, quantize_int, QuantizerConfig};
use fpquant::search::{grid_search_format, ClipValues};
use fpquant::tensor::{read_tensor, write_tensor, Tensor};
use fpquant::{Error, Result};

const PRNG_NAME: &str = "ChaCha8";

#[derive(Parser)]
#[command(
    name = "fpquant",
    version,
    about = "Low-bit floating-point and integer quantization toolkit"
)]
struct Cli {
    /// JSON config file; command-line flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump every representable value of a format as CSV (one per line).
    Grid(GridArgs),
    /// Expected-MSE sweep over formats × distributions (CSV).
    MseSweep(SweepArgs),
    /// Scalar-product expected MSE over weight × activation format pairs.
    DotprodMse(DotprodArgs),
    /// Quantize a tensor file with a fixed or searched format.
    Quantize(QuantizeArgs),
    /// MSE-optimal mantissa width and clipping value(s) for a tensor.
    Search(SearchArgs),
    /// Learn the clipping value and mantissa width by full-batch SGD.
    Learn(LearnArgs),
    /// Verify the fast quantizer against the brute-force oracle.
    Verify(VerifyArgs),
}

/// Per-command sections of the JSON config file. Field names match the
/// long flag names.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    grid: Option<GridCfg>,
    #[serde(rename = "mse-sweep")]
    mse_sweep: Option<SweepCfg>,
    #[serde(rename = "dotprod-mse")]
    dotprod_mse: Option<DotprodCfg>,
    quantize: Option<QuantizeCfg>,
    search: Option<SearchCfg>,
    learn: Option<LearnCfg>,
    verify: Option<VerifyCfg>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => Ok(serde_json::from_slice(&std::fs::read(p)?)?),
    }
}

fn pick<T>(flag: Option<T>, cfg: Option<T>, default: T) -> T {
    flag.or(cfg).unwrap_or(default)
}

fn require<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> Result<T> {
    flag.or(cfg)
        .ok_or_else(|| Error::InvalidArgument(format!("missing required option --{name}")))
}

// ---------------------------------------------------------------------------
// Format and distribution grammars
// ---------------------------------------------------------------------------

/// Bias / scale position of a parsed format string.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ParamSpec {
    Given(f64),
    Auto,
    /// Not specified: conventional bias 2^(e−1) (FP) or scale 1 (INT).
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FormatSpec {
    Fp { m: u32, e: u32, bias: ParamSpec },
    Int { n: u32, scale: ParamSpec },
}

impl FormatSpec {
    fn name(&self) -> String {
        match self {
            FormatSpec::Fp { m, e, .. } => format!("{m}M{e}E"),
            FormatSpec::Int { n, .. } => format!("INT{n}"),
        }
    }
}

/// Parses `<m>M<e>E[:b=<real>|:auto]` or `INT<n>[:s=<real>|:auto]`.
fn parse_format(s: &str) -> Result<FormatSpec> {
    let bad = || Error::InvalidFormat(format!("cannot parse format string {s:?}"));
    let (head, suffix) = match s.split_once(':') {
        Some((h, t)) => (h, Some(t)),
        None => (s, None),
    };
    if let Some(digits) = head.strip_prefix("INT") {
        let n: u32 = digits.parse().map_err(|_| bad())?;
        let scale = match suffix {
            None => ParamSpec::Default,
            Some("auto") => ParamSpec::Auto,
            Some(t) => match t.strip_prefix("s=") {
                Some(v) => ParamSpec::Given(v.parse().map_err(|_| bad())?),
                None => return Err(bad()),
            },
        };
        // Constructor validation (width bounds) with a placeholder scale.
        IntFormat::new(n, 1.0)?;
        return Ok(FormatSpec::Int { n, scale });
    }
    let rest = head.strip_suffix('E').ok_or_else(bad)?;
    let (m_str, e_str) = rest.split_once('M').ok_or_else(bad)?;
    let m: u32 = m_str.parse().map_err(|_| bad())?;
    let e: u32 = e_str.parse().map_err(|_| bad())?;
    let bias = match suffix {
        None => ParamSpec::Default,
        Some("auto") => ParamSpec::Auto,
        Some(t) => match t.strip_prefix("b=") {
            Some(v) => ParamSpec::Given(v.parse().map_err(|_| bad())?),
            None => return Err(bad()),
        },
    };
    // Constructor + enumeration-bound validation.
    FpFormat::new(m, e, 0.0)?.enumerate_grid()?;
    Ok(FormatSpec::Fp { m, e, bias })
}

/// Splits a comma-separated list, ignoring commas inside parentheses (so
/// `gaussian(0,1),uniform(-1,1)` yields two items).
fn split_list(s: &str) -> Vec<&str> {
    let mut items = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                items.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    items.push(s[start..].trim());
    items.retain(|p| !p.is_empty());
    items
}

/// Conventional bias 2^(e−1) used when no bias is specified.
fn default_bias(e: u32) -> f64 {
    (1u64 << (e - 1)) as f64
}

/// Parses `gaussian(mu,sigma)[:clip=lo..hi]`, `uniform(a,b)` or
/// `student_t(nu):clip=lo..hi`.
fn parse_distribution(s: &str) -> Result<Distribution> {
    let bad = || Error::InvalidDistribution(format!("cannot parse distribution string {s:?}"));
    let (head, suffix) = match s.split_once(':') {
        Some((h, t)) => (h, Some(t)),
        None => (s, None),
    };
    let open = head.find('(').ok_or_else(bad)?;
    let close = head.strip_suffix(')').ok_or_else(bad)?;
    let name = &close[..open];
    let params: Vec<f64> = close[open + 1..]
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let clip = match suffix {
        None => None,
        Some(t) => {
            let r = t.strip_prefix("clip=").ok_or_else(bad)?;
            let (lo, hi) = r.split_once("..").ok_or_else(bad)?;
            Some((
                lo.parse::<f64>().map_err(|_| bad())?,
                hi.parse::<f64>().map_err(|_| bad())?,
            ))
        }
    };
    match (name, params.as_slice(), clip) {
        ("gaussian", [mu, sigma], Some((lo, hi))) => Distribution::gaussian(*mu, *sigma, lo, hi),
        ("gaussian", [mu, sigma], None) => {
            // Default clip at ±8σ around the mean: tail mass < 1e-15.
            Distribution::gaussian(*mu, *sigma, mu - 8.0 * sigma, mu + 8.0 * sigma)
        }
        ("uniform", [a, b], None) => Distribution::uniform(*a, *b),
        ("uniform", [a, b], Some((lo, hi))) => Distribution::new(Family::Uniform { a: *a, b: *b }, lo, hi),
        ("student_t", [nu], Some((lo, hi))) => Distribution::student_t(*nu, lo, hi),
        ("student_t", [_], None) => Err(Error::InvalidDistribution(
            "student_t requires an explicit :clip=lo..hi range".into(),
        )),
        _ => Err(bad()),
    }
}

fn dist_columns(d: &Distribution) -> (String, String, String) {
    let (name, param) = match d.family {
        Family::Gaussian { mu, sigma } => ("gaussian".to_string(), format!("mu={mu};sigma={sigma}")),
        Family::Uniform { a, b } => ("uniform".to_string(), format!("a={a};b={b}")),
        Family::StudentT { nu } => ("student_t".to_string(), format!("nu={nu}")),
    };
    (name, param, format!("[{},{}]", d.w_min, d.w_max))
}

/// ≥ 12 significant digits for CSV reals.
fn fmt12(v: f64) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{v:.12e}")
}

/// ≥ 17 significant digits (exact binary64 round-trip) for grid dumps.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_output(path: &Option<PathBuf>, contents: &str) -> Result<()> {
    match path {
        Some(p) => Ok(std::fs::write(p, contents)?),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

/// Grid of a format spec resolved against an analytic distribution (for
/// `auto`) or the conventional default.
fn resolve_grid_analytic(spec: &FormatSpec, d: &Distribution) -> Result<(f64, QuantGrid)> {
    match spec {
        FormatSpec::Fp { m, e, bias } => {
            let b = match bias {
                ParamSpec::Given(b) => *b,
                ParamSpec::Default => default_bias(*e),
                ParamSpec::Auto => optimal_fp_bias(*m, *e, d)?.param,
            };
            Ok((b, FpFormat::new(*m, *e, b)?.enumerate_grid()?))
        }
        FormatSpec::Int { n, scale } => {
            let s = match scale {
                ParamSpec::Given(s) => *s,
                ParamSpec::Default => 1.0,
                ParamSpec::Auto => optimal_int_scale(*n, d)?.param,
            };
            Ok((s, IntFormat::new(*n, s)?.enumerate_grid()?))
        }
    }
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GridArgs {
    /// Format string, e.g. "2M2E:b=2" or "INT8:s=1".
    #[arg(long)]
    format: Option<String>,
    /// Output CSV path (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GridCfg {
    format: Option<String>,
    output: Option<PathBuf>,
}

fn cmd_grid(args: GridArgs, cfg: GridCfg) -> Result<i32> {
    let format = require(args.format, cfg.format, "format")?;
    let output = args.output.or(cfg.output);
    let spec = parse_format(&format)?;
    let grid = match spec {
        FormatSpec::Fp { m, e, bias } => {
            let b = match bias {
                ParamSpec::Given(b) => b,
                ParamSpec::Default => default_bias(e),
                ParamSpec::Auto => {
                    return Err(Error::InvalidArgument(
                        "grid needs an explicit bias (\":auto\" requires a distribution)".into(),
                    ))
                }
            };
            FpFormat::new(m, e, b)?.enumerate_grid()?
        }
        FormatSpec::Int { n, scale } => {
            let s = match scale {
                ParamSpec::Given(s) => s,
                ParamSpec::Default => 1.0,
                ParamSpec::Auto => {
                    return Err(Error::InvalidArgument(
                        "grid needs an explicit scale (\":auto\" requires a distribution)".into(),
                    ))
                }
            };
            IntFormat::new(n, s)?.enumerate_grid()?
        }
    };
    let mut out = String::from("value\n");
    for &v in grid.values() {
        out.push_str(&fmt17(v));
        out.push('\n');
    }
    write_output(&output, &out)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// mse-sweep
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated format strings (bias/scale "auto" allowed).
    #[arg(long)]
    formats: Option<String>,
    /// Comma-separated distribution strings.
    #[arg(long)]
    distributions: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SweepCfg {
    formats: Option<String>,
    distributions: Option<String>,
    output: Option<PathBuf>,
}

/// The six 8-bit FP formats with auto bias, plus INT8 with auto scale.
const DEFAULT_SWEEP_FORMATS: &str =
    "1M6E:auto,2M5E:auto,3M4E:auto,4M3E:auto,5M2E:auto,6M1E:auto,INT8:auto";

fn cmd_mse_sweep(args: SweepArgs, cfg: SweepCfg) -> Result<i32> {
    let formats = pick(
        args.formats,
        cfg.formats,
        DEFAULT_SWEEP_FORMATS.to_string(),
    );
    let distributions = require(args.distributions, cfg.distributions, "distributions")?;
    let output = args.output.or(cfg.output);

    let specs: Vec<FormatSpec> = split_list(&formats)
        .into_iter()
        .map(parse_format)
        .collect::<Result<_>>()?;
    let dists: Vec<Distribution> = split_list(&distributions)
        .into_iter()
        .map(parse_distribution)
        .collect::<Result<_>>()?;

    use rayon::prelude::*;
    let cells: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|i| (0..dists.len()).map(move |j| (i, j)))
        .collect();
    // Parallel evaluation; collect preserves cell order, so rows come out in
    // the deterministic formats × distributions order.
    let rows: Result<Vec<String>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let spec = &specs[i];
            let d = &dists[j];
            let (param, grid) = resolve_grid_analytic(spec, d)?;
            let e = expected_mse(&grid, d)?;
            let signal = second_moment(d)?;
            let total = e.total();
            let sqnr_db = if total == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (signal / total).log10()
            };
            let (dname, dparam, drange) = dist_columns(d);
            Ok(format!(
                "{},{},{},{},{},{},{},{},{}\n",
                spec.name(),
                fmt12(param),
                dname,
                dparam,
                drange,
                fmt12(e.rounding),
                fmt12(e.clipping),
                fmt12(total),
                fmt12(sqnr_db),
            ))
        })
        .collect();
    let mut out =
        String::from("format,bias,distribution,param,range,E_round,E_clip,mse,sqnr_db\n");
    for r in rows? {
        out.push_str(&r);
    }
    write_output(&output, &out)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// dotprod-mse
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DotprodArgs {
    /// Weight distribution string.
    #[arg(long)]
    weight_dist: Option<String>,
    /// Activation distribution string.
    #[arg(long)]
    activation_dist: Option<String>,
    /// Comma-separated formats for both operands (auto bias per operand).
    #[arg(long)]
    formats: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DotprodCfg {
    #[serde(rename = "weight-dist")]
    weight_dist: Option<String>,
    #[serde(rename = "activation-dist")]
    activation_dist: Option<String>,
    formats: Option<String>,
    output: Option<PathBuf>,
}

const DEFAULT_FP8_FORMATS: &str =
    "1M6E:auto,2M5E:auto,3M4E:auto,4M3E:auto,5M2E:auto,6M1E:auto";

fn cmd_dotprod_mse(args: DotprodArgs, cfg: DotprodCfg) -> Result<i32> {
    let weight_dist = require(args.weight_dist, cfg.weight_dist, "weight-dist")?;
    let activation_dist = require(args.activation_dist, cfg.activation_dist, "activation-dist")?;
    let formats = pick(args.formats, cfg.formats, DEFAULT_FP8_FORMATS.to_string());
    let output = args.output.or(cfg.output);

    let d_w = parse_distribution(&weight_dist)?;
    let d_x = parse_distribution(&activation_dist)?;
    let specs: Vec<FormatSpec> = split_list(&formats)
        .into_iter()
        .map(parse_format)
        .collect::<Result<_>>()?;

    // Resolve each format once per operand distribution.
    let grids_w: Vec<(f64, QuantGrid)> = specs
        .iter()
        .map(|s| resolve_grid_analytic(s, &d_w))
        .collect::<Result<_>>()?;
    let grids_x: Vec<(f64, QuantGrid)> = specs
        .iter()
        .map(|s| resolve_grid_analytic(s, &d_x))
        .collect::<Result<_>>()?;

    use rayon::prelude::*;
    let cells: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|i| (0..specs.len()).map(move |j| (i, j)))
        .collect();
    let rows: Result<Vec<String>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let full = scalar_product_mse(&grids_w[i].1, &d_w, &grids_x[j].1, &d_x)?;
            let approx = scalar_product_mse_approx(&grids_w[i].1, &d_w, &grids_x[j].1, &d_x)?;
            let rel_gap = if full == 0.0 {
                0.0
            } else {
                (full - approx).abs() / full.abs()
            };
            Ok(format!(
                "{},{},{},{},{},{},{}\n",
                specs[i].name(),
                fmt12(grids_w[i].0),
                specs[j].name(),
                fmt12(grids_x[j].0),
                fmt12(full),
                fmt12(approx),
                fmt12(rel_gap),
            ))
        })
        .collect();
    let mut out =
        String::from("w_format,w_bias,x_format,x_bias,mse_full,mse_approx,rel_gap\n");
    for r in rows? {
        out.push_str(&r);
    }
    write_output(&output, &out)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(Args)]
struct QuantizeArgs {
    /// Input tensor file (binary + JSON sidecar, or rank-1 CSV).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fixed format string; ":auto" clips at the tensor's absolute maximum.
    #[arg(long, conflicts_with = "search")]
    format: Option<String>,
    /// Search the MSE-optimal format instead of fixing one.
    #[arg(long)]
    search: bool,
    /// Per-channel clipping values during search.
    #[arg(long)]
    per_channel: bool,
    /// Output tensor file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct QuantizeCfg {
    input: Option<PathBuf>,
    format: Option<String>,
    search: Option<bool>,
    #[serde(rename = "per-channel")]
    per_channel: Option<bool>,
    output: Option<PathBuf>,
    report: Option<PathBuf>,
}

fn empirical_sqnr(x: &Tensor, mse: f64) -> f64 {
    let signal: f64 =
        x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / mse).log10()
    }
}

fn json_f64(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    } else {
        json!(v)
    }
}

fn cmd_quantize(args: QuantizeArgs, cfg: QuantizeCfg) -> Result<i32> {
    let input = require(args.input, cfg.input, "input")?;
    let output = require(args.output, cfg.output, "output")?;
    let format = args.format.or(cfg.format);
    let search = args.search || cfg.search.unwrap_or(false);
    let per_channel = args.per_channel || cfg.per_channel.unwrap_or(false);
    let report_path = args.report.or(cfg.report);

    let x = read_tensor(&input)?;
    let (q, report) = if search {
        let r = grid_search_format(&x, per_channel)?;
        let (q, clip_json, bias_json) = match &r.clip {
            ClipValues::PerTensor(c) => {
                let b = bias_from_max(*c, r.mantissa_bits, r.exponent_bits)?;
                let f = FpFormat::new(r.mantissa_bits, r.exponent_bits, b)?;
                (
                    quantize_fp(&x, &QuantizerConfig::per_tensor(f))?,
                    json!(c),
                    json!(b),
                )
            }
            ClipValues::PerChannel(cs) => {
                let biases: Vec<f64> = cs
                    .iter()
                    .map(|&c| bias_from_max(c, r.mantissa_bits, r.exponent_bits))
                    .collect::<Result<_>>()?;
                let f = FpFormat::new(r.mantissa_bits, r.exponent_bits, 0.0)?;
                (
                    quantize_fp(&x, &QuantizerConfig::per_channel(f, biases.clone()))?,
                    json!(cs),
                    json!(biases),
                )
            }
        };
        let report = json!({
            "mode": "search",
            "format": format!("{}M{}E", r.mantissa_bits, r.exponent_bits),
            "m": r.mantissa_bits,
            "e": r.exponent_bits,
            "c": clip_json,
            "bias": bias_json,
            "degenerate_channels": r.degenerate_channels,
            "mse": json_f64(r.mse),
            "sqnr_db": json_f64(empirical_sqnr(&x, r.mse)),
        });
        (q, report)
    } else {
        let format = format.ok_or_else(|| {
            Error::InvalidArgument("either --format or --search is required".into())
        })?;
        let spec = parse_format(&format)?;
        let (q, param_key, param) = match spec {
            FormatSpec::Fp { m, e, bias } => {
                let b = match bias {
                    ParamSpec::Given(b) => b,
                    ParamSpec::Default => default_bias(e),
                    ParamSpec::Auto => {
                        let c = x.abs_max();
                        if c == 0.0 {
                            return Err(Error::InvalidTensor(
                                "auto bias undefined for an all-zero tensor".into(),
                            ));
                        }
                        bias_from_max(c, m, e)?
                    }
                };
                let f = FpFormat::new(m, e, b)?;
                (quantize_fp(&x, &QuantizerConfig::per_tensor(f))?, "bias", b)
            }
            FormatSpec::Int { n, scale } => {
                let s = match scale {
                    ParamSpec::Given(s) => s,
                    ParamSpec::Default => 1.0,
                    ParamSpec::Auto => {
                        let c = x.abs_max();
                        if c == 0.0 {
                            return Err(Error::InvalidTensor(
                                "auto scale undefined for an all-zero tensor".into(),
                            ));
                        }
                        c / ((1u64 << (n - 1)) - 1) as f64
                    }
                };
                (quantize_int(&x, &IntFormat::new(n, s)?)?, "scale", s)
            }
        };
        let mse = x.mse_against(&q)?;
        let report = json!({
            "mode": "fixed",
            "format": spec.name(),
            param_key: param,
            "mse": json_f64(mse),
            "sqnr_db": json_f64(empirical_sqnr(&x, mse)),
        });
        (q, report)
    };

    write_tensor(&output, &q)?;
    let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
    write_output(&report_path, &text)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    per_channel: bool,
    /// Output JSON path (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SearchCfg {
    input: Option<PathBuf>,
    #[serde(rename = "per-channel")]
    per_channel: Option<bool>,
    output: Option<PathBuf>,
}

fn cmd_search(args: SearchArgs, cfg: SearchCfg) -> Result<i32> {
    let input = require(args.input, cfg.input, "input")?;
    let per_channel = args.per_channel || cfg.per_channel.unwrap_or(false);
    let output = args.output.or(cfg.output);

    let x = read_tensor(&input)?;
    let r = grid_search_format(&x, per_channel)?;
    let mut report = json!({
        "m": r.mantissa_bits,
        "e": r.exponent_bits,
        "mse": json_f64(r.mse),
        "degenerate_channels": r.degenerate_channels,
    });
    match &r.clip {
        ClipValues::PerTensor(c) => report["c"] = json!(c),
        ClipValues::PerChannel(cs) => report["c_per_channel"] = json!(cs),
    }
    let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
    write_output(&output, &text)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// learn
// ---------------------------------------------------------------------------

#[derive(Args)]
struct LearnArgs {
    /// PRNG seed for the N(0,1) sample.
    #[arg(long)]
    seed: Option<u64>,
    /// Sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Initial mantissa bits.
    #[arg(long)]
    init_m: Option<u32>,
    /// Initial exponent bits (must satisfy m + e = 7).
    #[arg(long)]
    init_e: Option<u32>,
    /// Initial reparameterized bias.
    #[arg(long)]
    init_bias: Option<f64>,
    /// Relative learning rate for the clipping value.
    #[arg(long)]
    lr_c: Option<f64>,
    /// Absolute learning rate for the mantissa width.
    #[arg(long)]
    lr_m: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Trajectory CSV path (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LearnCfg {
    seed: Option<u64>,
    samples: Option<usize>,
    #[serde(rename = "init-m")]
    init_m: Option<u32>,
    #[serde(rename = "init-e")]
    init_e: Option<u32>,
    #[serde(rename = "init-bias")]
    init_bias: Option<f64>,
    #[serde(rename = "lr-c")]
    lr_c: Option<f64>,
    #[serde(rename = "lr-m")]
    lr_m: Option<f64>,
    iters: Option<usize>,
    output: Option<PathBuf>,
}

fn cmd_learn(args: LearnArgs, cfg: LearnCfg) -> Result<i32> {
    let seed = pick(args.seed, cfg.seed, 42);
    let samples = pick(args.samples, cfg.samples, 100_000);
    let init_m = pick(args.init_m, cfg.init_m, 3);
    let init_e = pick(args.init_e, cfg.init_e, 4);
    let init_bias = pick(args.init_bias, cfg.init_bias, 8.0);
    let lr_c = pick(args.lr_c, cfg.lr_c, 0.01);
    let lr_m = pick(args.lr_m, cfg.lr_m, 0.01);
    let iters = pick(args.iters, cfg.iters, 500);
    let output = args.output.or(cfg.output);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = rand_distr::Normal::new(0.0, 1.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data: Vec<f64> = (0..samples)
        .map(|_| rand_distr::Distribution::sample(&dist, &mut rng))
        .collect();
    let x = Tensor::from_vec(data)?;

    let init = LearnState::from_format(&FpFormat::new(init_m, init_e, init_bias)?)?;
    let traj = sgd_learn(&x, &init, lr_c, lr_m, iters)?;

    let mut out = String::from("iter,c,m,loss\n");
    for p in &traj.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.iter,
            fmt12(p.c),
            fmt12(p.m),
            fmt12(p.loss)
        );
    }
    let meta = json!({
        "prng": PRNG_NAME,
        "seed": seed,
        "samples": samples,
        "init": {"m": init_m, "e": init_e, "bias": init_bias, "c": init.c},
        "lr_c": lr_c,
        "lr_m": lr_m,
        "iters": iters,
    });
    match &output {
        Some(p) => {
            std::fs::write(p, &out)?;
            let mut meta_path = p.as_os_str().to_owned();
            meta_path.push(".meta.json");
            std::fs::write(
                Path::new(&meta_path),
                format!("{}\n", serde_json::to_string_pretty(&meta)?),
            )?;
        }
        None => {
            print!("{out}");
            eprintln!("{}", serde_json::to_string(&meta)?);
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Args)]
struct VerifyArgs {
    /// Random inputs per configuration.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace ties-to-even with ties-away-from-zero in the fast path to
    /// demonstrate that the harness catches rounding faults.
    #[arg(long)]
    inject_fault: bool,
    /// Report path (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct VerifyCfg {
    trials: Option<usize>,
    seed: Option<u64>,
    #[serde(rename = "inject-fault")]
    inject_fault: Option<bool>,
    output: Option<PathBuf>,
}

/// Fast-path quantization with ties-away-from-zero instead of ties-to-even:
/// the deliberate fault for `--inject-fault`.
fn quantize_fp_value_ties_away(x: f64, f: &FpFormat) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let m = f.mantissa_bits as f64;
    let t = (x.abs().log2() + f.bias).floor();
    let p = if t > 1.0 { t - f.bias - m } else { 1.0 - f.bias - m };
    let s = p.exp2();
    let v = s * (x / s).round();
    if v == 0.0 {
        return 0.0;
    }
    let c = f.max_representable();
    v.clamp(-c, c)
}

fn cmd_verify(args: VerifyArgs, cfg: VerifyCfg) -> Result<i32> {
    let trials = pick(args.trials, cfg.trials, 1_000_000);
    let seed = pick(args.seed, cfg.seed, 0);
    let inject_fault = args.inject_fault || cfg.inject_fault.unwrap_or(false);
    let output = args.output.or(cfg.output);

    const MAX_LISTED: usize = 10;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "verify: trials={trials} seed={seed} prng={PRNG_NAME} fault={inject_fault}"
    );
    let mut total_mismatches = 0usize;
    for (m, e) in [(5u32, 2u32), (4, 3), (3, 4), (2, 5)] {
        for bias in [4.0, 8.0, 16.0] {
            let f = FpFormat::new(m, e, bias)?;
            let grid = f.enumerate_grid()?;
            let c = f.max_representable();
            let lo = f.min_subnormal();
            // Deterministic per-configuration stream: independent of the
            // enumeration order of the configurations.
            let cfg_seed = seed
                ^ (m as u64) << 32
                ^ (e as u64) << 40
                ^ (bias.to_bits().rotate_left(17));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg_seed);
            let mut mismatches = 0usize;
            let mut check = |x: f64, out: &mut String| {
                let fast = if inject_fault {
                    quantize_fp_value_ties_away(x, &f)
                } else {
                    fpquant::quantsim::quantize_fp_value(x, &f)
                };
                let oracle = quantize_fp_oracle(x, &grid);
                if fast.to_bits() != oracle.to_bits() {
                    mismatches += 1;
                    if mismatches <= MAX_LISTED {
                        let _ = writeln!(
                            out,
                            "  mismatch {m}M{e}E b={bias}: x={x:e} (0x{:016x}) fast={fast:e} (0x{:016x}) oracle={oracle:e} (0x{:016x})",
                            x.to_bits(),
                            fast.to_bits(),
                            oracle.to_bits()
                        );
                    }
                }
            };
            // Exact midpoints of adjacent grid values exercise tie-breaking.
            for w in grid.values().windows(2) {
                check(0.5 * (w[0] + w[1]), &mut out);
            }
            for i in 0..trials {
                let x = if i % 2 == 0 {
                    rng.random_range(-2.0 * c..2.0 * c)
                } else {
                    // Log-uniform magnitude covering subnormals through clip.
                    let lg = rng.random_range((lo / 4.0).log2()..(2.0 * c).log2());
                    let mag = lg.exp2();
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                };
                check(x, &mut out);
            }
            total_mismatches += mismatches;
            let _ = writeln!(
                out,
                "config {m}M{e}E b={bias}: inputs={} mismatches={mismatches}",
                trials + grid.len() - 1
            );
        }
    }
    let _ = writeln!(out, "total mismatches: {total_mismatches}");
    write_output(&output, &out)?;
    Ok(if total_mismatches == 0 { 0 } else { 1 })
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Grid(a) => cmd_grid(a, cfg.grid.unwrap_or_default()),
        Command::MseSweep(a) => cmd_mse_sweep(a, cfg.mse_sweep.unwrap_or_default()),
        Command::DotprodMse(a) => cmd_dotprod_mse(a, cfg.dotprod_mse.unwrap_or_default()),
        Command::Quantize(a) => cmd_quantize(a, cfg.quantize.unwrap_or_default()),
        Command::Search(a) => cmd_search(a, cfg.search.unwrap_or_default()),
        Command::Learn(a) => cmd_learn(a, cfg.learn.unwrap_or_default()),
        Command::Verify(a) => cmd_verify(a, cfg.verify.unwrap_or_default()),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
