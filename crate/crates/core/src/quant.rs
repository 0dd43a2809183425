//! Simulated low-bit post-training quantization: per-tensor affine grids,
//! fake (quantize-dequantize) rounding, range calibration, and the
//! quantized-vs-fp perplexity comparison.
//!
//! Quantized sites: every linear-layer weight (symmetric grid) plus the
//! residual-stream block inputs/outputs and linear-layer input activations
//! (asymmetric grid, min/max calibrated). Softmax probabilities and
//! layernorm statistics stay in full precision.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Interception point at named activation sites during a forward pass.
pub trait QuantHook {
    fn site(&self, tape: &mut Tape, id: &str, var: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Zero-point pinned to 0; grid symmetric about zero. Used for weights.
    Symmetric,
    /// Affine grid over [min, max]. Used for activations.
    Asymmetric,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub bits: u32,
    pub weight_mode: QuantMode,
    pub activation_mode: QuantMode,
    /// Number of calibration batches for running min/max.
    pub calib_batches: usize,
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme {
            bits: 8,
            weight_mode: QuantMode::Symmetric,
            activation_mode: QuantMode::Asymmetric,
            calib_batches: 16,
        }
    }
}

/// Observed (min, max) per activation site, keyed by site id.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ActRanges {
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl ActRanges {
    pub fn observe(&mut self, site: &str, t: &Tensor) {
        let (mut lo, mut hi) = self
            .ranges
            .get(site)
            .copied()
            .unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
        for &x in &t.data {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        self.ranges.insert(site.to_string(), (lo, hi));
    }

    pub fn get(&self, site: &str) -> Result<(f64, f64)> {
        self.ranges
            .get(site)
            .copied()
            .ok_or_else(|| Error::MissingRange(site.to_string()))
    }

    /// Pointwise union of two observation sets; min/max are associative so
    /// disjoint-batch calibration merges exactly.
    pub fn merge(&mut self, other: &ActRanges) {
        for (site, &(lo, hi)) in &other.ranges {
            let e = self
                .ranges
                .entry(site.clone())
                .or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }
    }
}

/// One tensor's quantization grid.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
    pub mode: QuantMode,
}

impl QuantParams {
    fn grid_limits(&self) -> (i64, i64) {
        match self.mode {
            QuantMode::Symmetric => {
                let q = (1i64 << (self.bits - 1)) - 1;
                (-q, q)
            }
            QuantMode::Asymmetric => (0, (1i64 << self.bits) - 1),
        }
    }
}

/// Scale and zero-point for the given range and grid. Symmetric mode pins
/// zero_point = 0 on a signed grid; asymmetric mode first extends the range
/// to contain zero so the zero-point lands on the grid exactly. A range that
/// is still degenerate (all zero) is widened by a minimal epsilon.
pub fn quant_params(min: f64, max: f64, bits: u32, mode: QuantMode) -> QuantParams {
    assert!(min <= max, "quant_params: min {min} > max {max}");
    assert!((2..=32).contains(&bits), "quant_params: bits {bits}");
    match mode {
        QuantMode::Symmetric => {
            let mut bound = min.abs().max(max.abs());
            if bound == 0.0 {
                bound = 1e-8;
            }
            let qmax = (1i64 << (bits - 1)) - 1;
            QuantParams { scale: bound / qmax as f64, zero_point: 0, bits, mode }
        }
        QuantMode::Asymmetric => {
            let mut lo = min.min(0.0);
            let mut hi = max.max(0.0);
            if lo == hi {
                lo = -1e-8;
                hi = 1e-8;
            }
            let qmax = (1i64 << bits) - 1;
            let scale = (hi - lo) / qmax as f64;
            let zp = ((-lo / scale).round() as i64).clamp(0, qmax);
            QuantParams { scale, zero_point: zp, bits, mode }
        }
    }
}

/// Quantize-dequantize on the integer grid:
/// dequant(clamp(round(x/scale) + zp)). Idempotent; in-range error ≤ scale/2.
pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Tensor {
    let (qlo, qhi) = p.grid_limits();
    x.map(|v| {
        let q = (v / p.scale).round() + p.zero_point as f64;
        let q = q.clamp(qlo as f64, qhi as f64);
        (q - p.zero_point as f64) * p.scale
    })
}

// ── model calibration and evaluation ─────────────────────────────────

/// Records running min/max at every visited site.
pub struct CalibrationHook {
    ranges: RefCell<ActRanges>,
}

impl CalibrationHook {
    pub fn new() -> Self {
        CalibrationHook { ranges: RefCell::new(ActRanges::default()) }
    }

    pub fn into_ranges(self) -> ActRanges {
        self.ranges.into_inner()
    }
}

impl Default for CalibrationHook {
    fn default() -> Self {
        Self::new()
    }
}

impl QuantHook for CalibrationHook {
    fn site(&self, tape: &mut Tape, id: &str, var: Var) -> Result<Var> {
        self.ranges.borrow_mut().observe(id, tape.value(var));
        Ok(var)
    }
}

/// Rewrites every visited site with a fake-quant node on the calibrated
/// grid. A site without a calibrated range is a configuration error.
pub struct FakeQuantHook<'a> {
    pub ranges: &'a ActRanges,
    pub bits: u32,
    pub mode: QuantMode,
}

impl QuantHook for FakeQuantHook<'_> {
    fn site(&self, tape: &mut Tape, id: &str, var: Var) -> Result<Var> {
        let (lo, hi) = self.ranges.get(id)?;
        let p = quant_params(lo, hi, self.bits, self.mode);
        Ok(tape.fake_quant(var, &p))
    }
}

/// Run the model over calibration sequences, collecting per-site ranges.
pub fn calibrate(
    params: &crate::model::ParamSet,
    config: &crate::model::ModelConfig,
    batches: &[Vec<usize>],
) -> Result<ActRanges> {
    let hook = CalibrationHook::new();
    for tokens in batches {
        let mut tape = Tape::new();
        crate::model::forward_on_tape(&mut tape, tokens, params, config, Some(&hook))?;
    }
    Ok(hook.into_ranges())
}

fn is_linear_weight(name: &str) -> bool {
    name.contains("attn.w_") || name.contains("mlp.fc") || name == "lm_head"
}

/// Symmetric per-tensor fake quantization of every linear-layer weight.
/// Embeddings, layernorm parameters, sink logits, and registers stay fp.
pub fn quantize_weights(
    params: &crate::model::ParamSet,
    bits: u32,
) -> (crate::model::ParamSet, BTreeMap<String, QuantParams>) {
    let mut out = params.clone();
    let mut grids = BTreeMap::new();
    for entry in out.entries.iter_mut() {
        if !is_linear_weight(&entry.name) {
            continue;
        }
        let lo = entry.tensor.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = entry.tensor.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p = quant_params(lo, hi, bits, QuantMode::Symmetric);
        entry.tensor = fake_quant(&entry.tensor, &p);
        grids.insert(entry.name.clone(), p);
    }
    (out, grids)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuantEvalOptions {
    pub quantize_weights: bool,
    pub quantize_activations: bool,
}

impl Default for QuantEvalOptions {
    fn default() -> Self {
        QuantEvalOptions { quantize_weights: true, quantize_activations: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiteReport {
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub zero_point: i64,
}

/// The quantization report written by the CLI: per-site grids, weight
/// grids, and the perplexity comparison against the fp model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantReport {
    pub bits: u32,
    pub sites: BTreeMap<String, SiteReport>,
    pub weight_scales: BTreeMap<String, f64>,
    pub perplexity_fp: f64,
    pub perplexity_q: f64,
    pub delta: f64,
}

fn perplexity_with_hook(
    params: &crate::model::ParamSet,
    config: &crate::model::ModelConfig,
    sequences: &[Vec<usize>],
    hook: Option<&dyn QuantHook>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for tokens in sequences {
        let mut tape = Tape::new();
        let nodes = crate::model::forward_on_tape(&mut tape, tokens, params, config, hook)?;
        let logits = tape.value(nodes.logits);
        let (nll, n) = crate::metrics::sequence_nll(logits, tokens)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptySelection("quantized_eval"));
    }
    Ok((total / count as f64).exp())
}

/// Evaluate fp and fake-quantized perplexity on the same split.
/// ΔPerplexity may be negative (quantization can accidentally help); the
/// pipeline is deterministic given (weights, ranges, split).
pub fn quantized_eval(
    params: &crate::model::ParamSet,
    config: &crate::model::ModelConfig,
    ranges: &ActRanges,
    scheme: &QuantScheme,
    eval: &[Vec<usize>],
    opts: QuantEvalOptions,
) -> Result<QuantReport> {
    let perplexity_fp = perplexity_with_hook(params, config, eval, None)?;

    let (q_params, weight_grids) = if opts.quantize_weights {
        quantize_weights(params, scheme.bits)
    } else {
        (params.clone(), BTreeMap::new())
    };
    let hook = FakeQuantHook { ranges, bits: scheme.bits, mode: scheme.activation_mode };
    let perplexity_q = if opts.quantize_activations {
        perplexity_with_hook(&q_params, config, eval, Some(&hook))?
    } else {
        perplexity_with_hook(&q_params, config, eval, None)?
    };

    let mut sites = BTreeMap::new();
    if opts.quantize_activations {
        for (site, &(lo, hi)) in &ranges.ranges {
            let p = quant_params(lo, hi, scheme.bits, scheme.activation_mode);
            sites.insert(
                site.clone(),
                SiteReport { min: lo, max: hi, scale: p.scale, zero_point: p.zero_point },
            );
        }
    }
    let weight_scales = weight_grids.into_iter().map(|(k, p)| (k, p.scale)).collect();
    Ok(QuantReport {
        bits: scheme.bits,
        sites,
        weight_scales,
        perplexity_fp,
        perplexity_q,
        delta: perplexity_q - perplexity_fp,
    })
}
