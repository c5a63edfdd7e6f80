//! Measurements: token coverage, attention L1 error, compression ratio, and
//! the spike / sink / instability analyses used to characterize traces.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{update_h2o_scores, PolicyConfig, PolicyKind, SelectionState};
use crate::tensor::{attention, AttentionConfig};
use crate::trace::Trace;

/// Attention mass captured by `kept`, divided by `budget`.
///
/// Positions below `exclude_first` are removed from the distribution and the
/// rest renormalized to 1 first, so heavy sink tokens do not dominate.
/// With every position kept the result is `1 / budget`.
pub fn token_coverage(
    dist_by_origin: &[f32],
    kept: &[usize],
    budget: usize,
    exclude_first: usize,
) -> Result<f64> {
    if kept.is_empty() {
        return Err(Error::EmptyKept);
    }
    if budget == 0 {
        return Err(Error::InvalidParams("coverage budget must be > 0".into()));
    }
    if let Some(&p) = kept.iter().find(|&&p| p >= dist_by_origin.len()) {
        return Err(Error::LengthMismatch {
            expected: dist_by_origin.len(),
            found: p + 1,
        });
    }
    let remaining: f64 = dist_by_origin.iter().skip(exclude_first).map(|&x| x as f64).sum();
    if remaining <= 0.0 {
        return Ok(0.0);
    }
    let captured: f64 = kept
        .iter()
        .filter(|&&p| p >= exclude_first)
        .map(|&p| dist_by_origin[p] as f64)
        .sum();
    Ok(captured / remaining / budget as f64)
}

/// `Σ |a_i - b_i|` over a shared position index.
pub fn attention_l1_error(compressed: &[f32], oracle: &[f32]) -> Result<f64> {
    if compressed.len() != oracle.len() {
        return Err(Error::LengthMismatch {
            expected: oracle.len(),
            found: compressed.len(),
        });
    }
    Ok(compressed
        .iter()
        .zip(oracle)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum())
}

/// `fp_bits·L / (bits·(L−R) + fp_bits·R)`: original over compressed size for
/// a length-`L` sequence with `R` tokens at full precision. Scale and zero
/// point storage is ignored; see [`compression_ratio_with_overhead`].
pub fn compression_ratio(len: usize, fp_tokens: usize, bits: u32, fp_bits: u32) -> Result<f64> {
    if fp_tokens > len {
        return Err(Error::InvalidParams(format!(
            "full-precision count {fp_tokens} exceeds sequence length {len}"
        )));
    }
    let denom = bits as f64 * (len - fp_tokens) as f64 + fp_bits as f64 * fp_tokens as f64;
    if denom <= 0.0 {
        return Err(Error::InvalidParams("compressed size is zero".into()));
    }
    Ok(fp_bits as f64 * len as f64 / denom)
}

/// Like [`compression_ratio`] but for a K/V pair of width `head_dim`,
/// charging 64 bits (f32 scale + zero point) per quantization group: keys
/// per channel, values per token.
pub fn compression_ratio_with_overhead(
    len: usize,
    fp_tokens: usize,
    bits: u32,
    fp_bits: u32,
    head_dim: usize,
    group_size: usize,
) -> Result<f64> {
    if fp_tokens > len {
        return Err(Error::InvalidParams(format!(
            "full-precision count {fp_tokens} exceeds sequence length {len}"
        )));
    }
    if group_size == 0 || head_dim == 0 {
        return Err(Error::InvalidParams(
            "group_size and head_dim must be >= 1".into(),
        ));
    }
    let q = len - fp_tokens;
    let groups = head_dim * q.div_ceil(group_size) + q * head_dim.div_ceil(group_size);
    let compressed = 2.0
        * (bits as f64 * (q * head_dim) as f64 + fp_bits as f64 * (fp_tokens * head_dim) as f64)
        + 64.0 * groups as f64;
    if compressed <= 0.0 {
        return Err(Error::InvalidParams("compressed size is zero".into()));
    }
    Ok(2.0 * fp_bits as f64 * (len * head_dim) as f64 / compressed)
}

/// Per-step metrics row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub coverage: f64,
    pub l1_error: f64,
    pub fp_count: usize,
    pub q_count: usize,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut max) = (0usize, 0.0f64, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            max = max.max(v);
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            mean: sum / n as f64,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub coverage: Summary,
    pub l1_error: Summary,
    pub fp_count: Summary,
    pub q_count: Summary,
    pub compression_ratio: Summary,
}

/// Metrics for one replayed stream under one policy configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub trace_id: String,
    pub policy: PolicyConfig,
    pub bits: u8,
    pub budget: usize,
    pub seed: u64,
    pub per_step: Vec<StepMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(
        trace_id: String,
        policy: PolicyConfig,
        bits: u8,
        budget: usize,
        seed: u64,
        per_step: Vec<StepMetrics>,
    ) -> Self {
        let aggregate = Aggregate {
            coverage: Summary::of(per_step.iter().map(|s| s.coverage)),
            l1_error: Summary::of(per_step.iter().map(|s| s.l1_error)),
            fp_count: Summary::of(per_step.iter().map(|s| s.fp_count as f64)),
            q_count: Summary::of(per_step.iter().map(|s| s.q_count as f64)),
            compression_ratio: Summary::of(per_step.iter().map(|s| s.compression_ratio)),
        };
        Self {
            trace_id,
            policy,
            bits,
            budget,
            seed,
            per_step,
            aggregate,
        }
    }
}

/// How spike positions are picked out of the per-position maxima.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpikeThreshold {
    Absolute(f32),
    /// Nearest-rank percentile (0..=100) of the per-position maxima.
    Percentile(f64),
}

impl Default for SpikeThreshold {
    fn default() -> Self {
        SpikeThreshold::Percentile(95.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStats {
    /// Max attention per position over the step window.
    pub per_position_max: Vec<f32>,
    pub threshold: f32,
    pub spikes: Vec<usize>,
    /// Bin `b` counts spikes with `floor(log2(distance + 1)) == b`, where the
    /// distance is measured from the most recent position.
    pub histogram: Vec<usize>,
}

/// Spike positions over a window of decode steps, binned by log2 distance.
/// Distributions may grow in length step to step; positions are aligned at 0.
pub fn spike_histogram(steps: &[Vec<f32>], threshold: SpikeThreshold) -> Result<SpikeStats> {
    let n = steps.iter().map(Vec::len).max().unwrap_or(0);
    if steps.is_empty() || n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut per_position_max = vec![0.0f32; n];
    for dist in steps {
        for (m, &x) in per_position_max.iter_mut().zip(dist) {
            *m = m.max(x);
        }
    }
    let threshold = match threshold {
        SpikeThreshold::Absolute(t) => t,
        SpikeThreshold::Percentile(p) => {
            let mut sorted = per_position_max.clone();
            sorted.sort_by(f32::total_cmp);
            let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
            sorted[rank - 1]
        }
    };
    let spikes: Vec<usize> = (0..n).filter(|&i| per_position_max[i] >= threshold).collect();
    let mut histogram = vec![0usize; log2_bin(n - 1) + 1];
    for &p in &spikes {
        histogram[log2_bin(n - 1 - p)] += 1;
    }
    Ok(SpikeStats {
        per_position_max,
        threshold,
        spikes,
        histogram,
    })
}

fn log2_bin(distance: usize) -> usize {
    (usize::BITS - 1 - (distance + 1).leading_zeros()) as usize
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Boxplot {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Boxplot {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Ok(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Distribution across steps of the mass on the first `sinks` positions
/// versus the summed mass of the `recent` most recent positions.
pub fn sink_vs_recent(steps: &[Vec<f32>], sinks: usize, recent: usize) -> Result<(Boxplot, Boxplot)> {
    let sink_mass: Vec<f64> = steps
        .iter()
        .map(|d| d.iter().take(sinks).map(|&x| x as f64).sum())
        .collect();
    let recent_mass: Vec<f64> = steps
        .iter()
        .map(|d| d.iter().skip(sinks).rev().take(recent).map(|&x| x as f64).sum())
        .collect();
    Ok((Boxplot::of(&sink_mass)?, Boxplot::of(&recent_mass)?))
}

/// Cross-step instability: for each consecutive pair of steps, the fraction
/// of the earlier step's top-`k` positions that fall out of the later step's
/// top-`k` (over the positions both steps share).
pub fn topk_instability(steps: &[Vec<f32>], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    let top = |d: &[f32], len: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(b.cmp(&a)));
        idx.truncate(k.min(len));
        idx.sort_unstable();
        idx
    };
    Ok(steps
        .windows(2)
        .map(|w| {
            let len = w[0].len().min(w[1].len());
            let a = top(&w[0], len);
            let b = top(&w[1], len);
            if a.is_empty() {
                return 0.0;
            }
            let lost = a.iter().filter(|p| b.binary_search(p).is_err()).count();
            lost as f64 / a.len() as f64
        })
        .collect())
}

/// One row of a coverage comparison; `step == None` marks the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub policy: PolicyKind,
    pub step: Option<usize>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub fn mean_for(&self, policy: PolicyKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.step.is_none())
            .map(|r| r.coverage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,step,coverage\n");
        for r in &self.rows {
            let step = r.step.map_or_else(|| "mean".to_string(), |s| s.to_string());
            out.push_str(&format!("{},{},{:.9}\n", r.policy, step, r.coverage));
        }
        out
    }
}

/// Selection-only replay of one trace stream (layer, kv head, group-averaged
/// query) under each policy, measuring coverage of the oracle distribution.
/// H2O accumulates the oracle mass on its kept positions.
pub fn coverage_comparison(
    trace: &Trace,
    layer: usize,
    kv_head: usize,
    policies: &[PolicyConfig],
    attn: &AttentionConfig,
    exclude_first: usize,
) -> Result<CoverageTable> {
    let Some(first) = policies.first() else {
        return Ok(CoverageTable::default());
    };
    if policies.iter().any(|p| p.fp_budget() != first.fp_budget()) {
        return Err(Error::Config("coverage comparison needs a shared budget".into()));
    }
    let h = trace.header;
    if attn.head_dim != h.head_dim as usize {
        return Err(Error::DimMismatch {
            operand: "attention config",
            expected: h.head_dim as usize,
            found: attn.head_dim,
        });
    }
    let prompt_len = h.prompt_len as usize;
    let mut states: Vec<SelectionState> = policies.iter().map(|_| SelectionState::new()).collect();
    let mut full_k = trace.prompt_keys(layer, kv_head).clone();
    let mut full_v = trace.prompt_values(layer, kv_head).clone();
    for p in 0..prompt_len {
        for (s, cfg) in states.iter_mut().zip(policies) {
            s.append(cfg, p)?;
        }
    }

    let mut per_policy: Vec<Vec<f64>> = vec![Vec::new(); policies.len()];
    let mut rows = Vec::new();
    for step in 0..h.decode_steps as usize {
        let pos = prompt_len + step;
        full_k.push_row(trace.step_key(step, layer, kv_head))?;
        full_v.push_row(trace.step_value(step, layer, kv_head))?;
        let q = trace.group_mean_query(step, layer, kv_head);
        let oracle = attention(&q, &full_k, &full_v, attn)?;
        for (i, (s, cfg)) in states.iter_mut().zip(policies).enumerate() {
            s.append(cfg, pos)?;
            let cov = token_coverage(&oracle.dist, s.kept(), cfg.fp_budget(), exclude_first)?;
            if cfg.kind == PolicyKind::H2o {
                let fp: Vec<f32> = s.kept().iter().map(|&p| oracle.dist[p]).collect();
                update_h2o_scores(s, &fp)?;
            }
            per_policy[i].push(cov);
            rows.push(CoverageRow {
                policy: cfg.kind,
                step: Some(step),
                coverage: cov,
            });
        }
    }
    for (cfg, covs) in policies.iter().zip(&per_policy) {
        rows.push(CoverageRow {
            policy: cfg.kind,
            step: None,
            coverage: Summary::of(covs.iter().copied()).mean,
        });
    }
    Ok(CoverageTable { rows })
}
