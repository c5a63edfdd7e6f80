//! Experiment sweeps: replay every (trace, layer, kv head, policy, bits,
//! budget, mode) combination through a compressed cache, compare each decode
//! step against the full-precision oracle, and write one CSV per run.
//!
//! Tasks are independent and run on rayon when the `parallel` feature is on.
//! `LOGKV_THREADS` caps the worker count. Output order is the task order, so
//! sequential and parallel runs produce identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{CompressedKvCache, ReleasePayload};
use crate::error::{Error, Result};
use crate::metrics::{attention_l1_error, compression_ratio, token_coverage, MetricsReport, StepMetrics};
use crate::policy::{Mode, PolicyConfig, PolicyKind};
use crate::quant::DEFAULT_GROUP_SIZE;
use crate::tensor::{attention, AttentionConfig};
use crate::trace::{generate_synthetic_trace, SyntheticSpec, Trace};

pub const CSV_HEADER: [&str; 11] = [
    "trace_id",
    "policy",
    "mode",
    "bits",
    "budget",
    "step",
    "coverage",
    "l1_error",
    "fp_count",
    "q_count",
    "compression_ratio",
];

pub const THREADS_ENV: &str = "LOGKV_THREADS";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "run.toml";

/// Attention logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleChoice {
    #[default]
    InvSqrtD,
    Unscaled,
}

/// How query heads sharing a kv head are replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GqaReplay {
    /// One query per kv head: the mean of its group.
    #[default]
    GroupMean,
    /// Every query head attends the shared cache; one row set per head.
    PerHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub count: usize,
    /// Trace `i` uses seed `experiment seed + i`; `spec.seed` is ignored.
    #[serde(default)]
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub traces: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    pub policies: Vec<PolicyKind>,
    /// 2 and 4 quantize; 16 stores released rows exactly.
    pub bits: Vec<u8>,
    /// Full-precision budgets `R`; LogQuant runs with `W = floor(R/3)`.
    pub budgets: Vec<usize>,
    pub modes: Vec<Mode>,
    pub group_size: usize,
    pub scale: ScaleChoice,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub gqa: GqaReplay,
    /// Leading positions removed from coverage.
    pub exclude_first: usize,
    /// StreamingLLM sink count.
    pub sinks: usize,
    /// H2O recent window; unset means half the budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2o_recent: Option<usize>,
    /// KiVi / StreamingLLM / H2O release batch. Unset means batches of up to
    /// `group_size` in quantize_rest mode and single releases when evicting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub release_batch: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            traces: Vec::new(),
            synthetic: None,
            policies: PolicyKind::ALL.to_vec(),
            bits: vec![2],
            budgets: vec![128],
            modes: vec![Mode::QuantizeRest],
            group_size: DEFAULT_GROUP_SIZE,
            scale: ScaleChoice::InvSqrtD,
            seed: 0,
            out_dir: PathBuf::from("out"),
            gqa: GqaReplay::GroupMean,
            exclude_first: 2,
            sinks: 4,
            h2o_recent: None,
            release_batch: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The policy a task runs with.
    pub fn policy_for(&self, kind: PolicyKind, budget: usize, mode: Mode) -> PolicyConfig {
        let base = PolicyConfig::for_budget(kind, budget).with_mode(mode);
        match kind {
            PolicyKind::Logquant => base,
            PolicyKind::Kivi | PolicyKind::StreamingLlm => {
                let sinks = if kind == PolicyKind::StreamingLlm {
                    self.sinks
                } else {
                    0
                };
                let batch = self.release_batch.or(match mode {
                    Mode::QuantizeRest => Some(self.group_size.min(budget.saturating_sub(sinks)).max(1)),
                    Mode::EvictRest => None,
                });
                base.with_sinks(sinks).with_release_batch(batch)
            }
            PolicyKind::H2o => {
                let recent = self.h2o_recent.unwrap_or(budget / 2);
                let batch = self.release_batch.or(match mode {
                    Mode::QuantizeRest => Some(self.group_size.min(budget - recent).max(1)),
                    Mode::EvictRest => None,
                });
                PolicyConfig::h2o(budget, recent)
                    .with_mode(mode)
                    .with_release_batch(batch)
            }
        }
    }

    /// Rejects contradictions before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.traces.is_empty() && self.synthetic.is_none() {
            return Err(Error::Config(
                "no traces: give `traces` or a `synthetic` section".into(),
            ));
        }
        if let Some(s) = &self.synthetic {
            if s.count == 0 {
                return Err(Error::Config("synthetic.count must be >= 1".into()));
            }
        }
        for (name, empty) in [
            ("policies", self.policies.is_empty()),
            ("bits", self.bits.is_empty()),
            ("budgets", self.budgets.is_empty()),
            ("modes", self.modes.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("`{name}` must not be empty")));
            }
        }
        if let Some(b) = self.bits.iter().find(|b| ![2, 4, 16].contains(*b)) {
            return Err(Error::Config(format!("bits must be 2, 4 or 16, got {b}")));
        }
        if let Some(r) = self.budgets.iter().find(|&&r| r < 3) {
            return Err(Error::Config(format!("budget R must be >= 3, got {r}")));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        for &kind in &self.policies {
            for &budget in &self.budgets {
                for &mode in &self.modes {
                    self.policy_for(kind, budget, mode)
                        .validate()
                        .map_err(|e| Error::Config(format!("{kind} with budget {budget} ({mode}): {e}")))?;
                }
            }
        }
        Ok(())
    }

    fn attention_config(&self, head_dim: usize) -> Result<AttentionConfig> {
        match self.scale {
            ScaleChoice::InvSqrtD => AttentionConfig::new(head_dim),
            ScaleChoice::Unscaled => AttentionConfig::unscaled(head_dim),
        }
    }
}

/// How tasks are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon pool; falls back to sequential without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// One CSV row; `step == None` is the per-stream mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub trace_id: String,
    pub policy: PolicyKind,
    pub mode: Mode,
    /// 0 in evict_rest mode.
    pub bits: u8,
    pub budget: usize,
    pub step: Option<usize>,
    pub coverage: f64,
    pub l1_error: f64,
    pub fp_count: f64,
    pub q_count: f64,
    pub compression_ratio: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 11] {
        [
            self.trace_id.clone(),
            self.policy.to_string(),
            self.mode.to_string(),
            self.bits.to_string(),
            self.budget.to_string(),
            self.step.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            self.coverage.to_string(),
            self.l1_error.to_string(),
            self.fp_count.to_string(),
            self.q_count.to_string(),
            self.compression_ratio.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        let bad = |col: &str| Error::Config(format!("CSV line {line}: bad `{col}` value"));
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(CSV_HEADER[i]));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| bad(CSV_HEADER[i])) };
        Ok(Self {
            trace_id: field(0)?.to_string(),
            policy: PolicyKind::parse(field(1)?).map_err(|_| bad("policy"))?,
            mode: Mode::parse(field(2)?).map_err(|_| bad("mode"))?,
            bits: field(3)?.parse().map_err(|_| bad("bits"))?,
            budget: field(4)?.parse().map_err(|_| bad("budget"))?,
            step: match field(5)? {
                "mean" => None,
                s => Some(s.parse().map_err(|_| bad("step"))?),
            },
            coverage: num(6)?,
            l1_error: num(7)?,
            fp_count: num(8)?,
            q_count: num(9)?,
            compression_ratio: num(10)?,
        })
    }
}

fn report_rows(report: &MetricsReport, mode: Mode) -> impl Iterator<Item = MetricsRow> + '_ {
    let row = move |step: Option<usize>, cov, l1, fp, q, ratio| MetricsRow {
        trace_id: report.trace_id.clone(),
        policy: report.policy.kind,
        mode,
        bits: report.bits,
        budget: report.budget,
        step,
        coverage: cov,
        l1_error: l1,
        fp_count: fp,
        q_count: q,
        compression_ratio: ratio,
    };
    let a = &report.aggregate;
    report
        .per_step
        .iter()
        .map(move |s| {
            row(
                Some(s.step),
                s.coverage,
                s.l1_error,
                s.fp_count as f64,
                s.q_count as f64,
                s.compression_ratio,
            )
        })
        .chain(std::iter::once(row(
            None,
            a.coverage.mean,
            a.l1_error.mean,
            a.fp_count.mean,
            a.q_count.mean,
            a.compression_ratio.mean,
        )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub reports: Vec<MetricsReport>,
    pub rows: Vec<MetricsRow>,
}

impl ExperimentOutput {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    /// Writes `metrics.csv` and the resolved config echo into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(METRICS_FILE);
        std::fs::write(&path, self.to_csv()?)?;
        std::fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_toml_string()?)?;
        Ok(path)
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Config(format!("CSV write: {e}"));
    w.write_record(CSV_HEADER).map_err(to_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("CSV write: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV fields are UTF-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::Config(format!("CSV header: {e}")))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!(
            "CSV header must be `{}`",
            CSV_HEADER.join(",")
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| Error::Config(format!("CSV line {}: {e}", i + 2)))?;
            MetricsRow::parse(&rec, i + 2)
        })
        .collect()
}

/// One sweep point for the `report` table, averaged over streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub mode: Mode,
    pub bits: u8,
    pub budget: usize,
    pub streams: usize,
    pub coverage: f64,
    pub l1_error: f64,
    pub compression_ratio: f64,
}

/// Averages the per-stream mean rows by (policy, mode, bits, budget).
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    use std::collections::BTreeMap;
    // (policy, mode, bits, budget) -> (mode, streams, coverage, l1, ratio) sums
    type Sums = (Mode, usize, f64, f64, f64);
    let mut groups: BTreeMap<(PolicyKind, &str, u8, usize), Sums> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.step.is_none()) {
        let e = groups
            .entry((r.policy, r.mode.name(), r.bits, r.budget))
            .or_insert((r.mode, 0, 0.0, 0.0, 0.0));
        e.1 += 1;
        e.2 += r.coverage;
        e.3 += r.l1_error;
        e.4 += r.compression_ratio;
    }
    groups
        .into_iter()
        .map(|((policy, _, bits, budget), (mode, n, c, l, cr))| SummaryRow {
            policy,
            mode,
            bits,
            budget,
            streams: n,
            coverage: c / n as f64,
            l1_error: l / n as f64,
            compression_ratio: cr / n as f64,
        })
        .collect()
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<14} {:<14} {:>4} {:>6} {:>7} {:>10} {:>10} {:>8}\n",
        "policy", "mode", "bits", "budget", "streams", "coverage", "l1_error", "ratio"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:<14} {:>4} {:>6} {:>7} {:>10.6} {:>10.6} {:>8.3}\n",
            r.policy.name(),
            r.mode.name(),
            r.bits,
            r.budget,
            r.streams,
            r.coverage,
            r.l1_error,
            r.compression_ratio
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Task {
    trace: usize,
    layer: usize,
    kv_head: usize,
    policy: PolicyKind,
    mode: Mode,
    bits: u8,
    budget: usize,
}

/// Loads or generates every trace named by `cfg`, in config order.
pub fn load_traces(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<(String, Trace)>> {
    let mut out = Vec::new();
    for path in &cfg.traces {
        let id = path.file_stem().map_or_else(
            || path.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        out.push((id, Trace::read_file(path)?));
    }
    if let Some(src) = &cfg.synthetic {
        let idx: Vec<usize> = (0..src.count).collect();
        let generated = map_tasks(&idx, exec, |&i| {
            let spec = SyntheticSpec {
                seed: cfg.seed.wrapping_add(i as u64),
                ..src.spec.clone()
            };
            Ok((format!("synthetic-{i}"), generate_synthetic_trace(&spec)?))
        })?;
        out.extend(generated);
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, Execution::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Execution) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let traces = load_traces(cfg, exec)?;
    run_on_traces(cfg, &traces, exec)
}

/// Runs the sweep over already loaded traces.
pub fn run_on_traces(
    cfg: &ExperimentConfig,
    traces: &[(String, Trace)],
    exec: Execution,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for (ti, (_, trace)) in traces.iter().enumerate() {
        let h = trace.header;
        for layer in 0..h.layer_count as usize {
            for kv_head in 0..h.kv_head_count as usize {
                for &policy in &cfg.policies {
                    for &budget in &cfg.budgets {
                        for &mode in &cfg.modes {
                            let bits: Vec<u8> = match mode {
                                Mode::QuantizeRest => cfg.bits.clone(),
                                Mode::EvictRest => vec![0],
                            };
                            for bits in bits {
                                tasks.push(Task {
                                    trace: ti,
                                    layer,
                                    kv_head,
                                    policy,
                                    mode,
                                    bits,
                                    budget,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    let per_task = map_tasks(&tasks, exec, |t| {
        let (id, trace) = &traces[t.trace];
        run_task(cfg, id, trace, t)
    })?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (task, task_reports) in tasks.iter().zip(per_task) {
        for r in task_reports {
            rows.extend(report_rows(&r, task.mode));
            reports.push(r);
        }
    }
    Ok(ExperimentOutput { reports, rows })
}

fn run_task(cfg: &ExperimentConfig, id: &str, trace: &Trace, t: &Task) -> Result<Vec<MetricsReport>> {
    let h = trace.header;
    let d = h.head_dim as usize;
    let attn = cfg.attention_config(d)?;
    let policy = cfg.policy_for(t.policy, t.budget, t.mode);
    let payload = match t.mode {
        Mode::QuantizeRest => ReleasePayload::for_bits(t.bits, cfg.group_size)?,
        Mode::EvictRest => ReleasePayload::Passthrough,
    };
    // bits fed to the ratio formula: evicted rows cost nothing
    let ratio_bits = u32::from(t.bits);
    let mut cache = CompressedKvCache::new(policy, d, payload)?;

    let prompt_k = trace.prompt_keys(t.layer, t.kv_head);
    let prompt_v = trace.prompt_values(t.layer, t.kv_head);
    for p in 0..h.prompt_len as usize {
        cache.append_token(prompt_k.row(p), prompt_v.row(p), p)?;
    }
    let mut full_k = prompt_k.clone();
    let mut full_v = prompt_v.clone();

    let streams: Vec<(String, Option<usize>)> = match cfg.gqa {
        GqaReplay::GroupMean => vec![(format!("{id}/l{}/kv{}", t.layer, t.kv_head), None)],
        GqaReplay::PerHead => trace
            .heads_of(t.kv_head)
            .map(|head| (format!("{id}/l{}/h{head}", t.layer), Some(head)))
            .collect(),
    };
    let mut per_stream: Vec<Vec<StepMetrics>> = vec![Vec::new(); streams.len()];

    for step in 0..h.decode_steps as usize {
        let pos = h.prompt_len as usize + step;
        let (k, v) = (
            trace.step_key(step, t.layer, t.kv_head),
            trace.step_value(step, t.layer, t.kv_head),
        );
        cache.append_token(k, v, pos)?;
        full_k.push_row(k)?;
        full_v.push_row(v)?;

        let fp = cache.fp_count();
        let mut fp_mass = vec![0.0f32; fp];
        for ((_, head), steps) in streams.iter().zip(per_stream.iter_mut()) {
            let q = match head {
                None => trace.group_mean_query(step, t.layer, t.kv_head),
                Some(head) => trace.query(step, t.layer, *head).to_vec(),
            };
            let oracle = attention(&q, &full_k, &full_v, &attn)?;
            let got = cache.attend(&q, &attn)?;
            for (m, x) in fp_mass.iter_mut().zip(&got.dist_over_stored[..fp]) {
                *m += x / streams.len() as f32;
            }
            steps.push(StepMetrics {
                step,
                coverage: token_coverage(
                    &oracle.dist,
                    cache.state().kept(),
                    policy.fp_budget(),
                    cfg.exclude_first,
                )?,
                l1_error: attention_l1_error(&got.dist_by_origin, &oracle.dist)?,
                fp_count: fp,
                q_count: cache.q_count(),
                compression_ratio: compression_ratio(pos + 1, fp, ratio_bits, 16)?,
            });
        }
        cache.record_attention(&fp_mass)?;
    }

    Ok(streams
        .into_iter()
        .zip(per_stream)
        .map(|((trace_id, _), steps)| MetricsReport::new(trace_id, policy, t.bits, t.budget, cfg.seed, steps))
        .collect())
}

fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{s}`"
            ))),
        },
    }
}

/// Maps `f` over `items`, preserving order; the first error wins.
fn map_tasks<T, R, F>(items: &[T], exec: Execution, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    match exec {
        Execution::Sequential => items.iter().map(f).collect(),
        Execution::Parallel => parallel_map(items, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&f).collect::<Result<Vec<R>>>();
    match thread_limit()? {
        None => run(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    thread_limit()?;
    items.iter().map(f).collect()
}
