//! Token selection policies.
//!
//! A policy decides which cache positions stay at full precision. Everything
//! it lets go of is either quantized or evicted, depending on [`Mode`].
//!
//! * LogQuant: keeps up to `3W` tokens. When full, the oldest `2W` entries are
//!   decimated to every other entry (`kept[0..2W]` at even indices), the next
//!   `W` stay, and the new token is appended. Repeated decimation leaves a
//!   base-2 log-sparse tail behind a dense recent window.
//! * KiVi: the most recent `R` tokens, optionally released in batches of `G`.
//! * StreamingLLM: KiVi over `R - sinks` slots plus the first `sinks` tokens.
//! * H2O: heavy hitters by cumulative attention, plus an optional recent window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "log_quant")]
    Logquant,
    Kivi,
    #[serde(alias = "streaming", alias = "streamingllm")]
    StreamingLlm,
    H2o,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Logquant,
        PolicyKind::Kivi,
        PolicyKind::StreamingLlm,
        PolicyKind::H2o,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Logquant => "logquant",
            PolicyKind::Kivi => "kivi",
            PolicyKind::StreamingLlm => "streaming_llm",
            PolicyKind::H2o => "h2o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "logquant" | "log_quant" => Ok(PolicyKind::Logquant),
            "kivi" => Ok(PolicyKind::Kivi),
            "streaming_llm" | "streamingllm" | "streaming" => Ok(PolicyKind::StreamingLlm),
            "h2o" => Ok(PolicyKind::H2o),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What happens to tokens a policy releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    QuantizeRest,
    EvictRest,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::QuantizeRest => "quantize_rest",
            Mode::EvictRest => "evict_rest",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "quantize_rest" | "quantize" => Ok(Mode::QuantizeRest),
            "evict_rest" | "evict" => Ok(Mode::EvictRest),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// `W` for LogQuant; the full-precision budget `R` for the others.
    pub window: usize,
    pub sink_count: usize,
    pub mode: Mode,
    /// Positions released together once full (KiVi, StreamingLLM, H2O);
    /// `None` releases the minimum each step.
    pub release_batch: Option<usize>,
    /// H2O only: most recent positions kept regardless of score.
    pub recent_window: usize,
}

impl PolicyConfig {
    pub fn logquant(w: usize) -> Self {
        Self::base(PolicyKind::Logquant, w)
    }

    pub fn kivi(budget: usize) -> Self {
        Self::base(PolicyKind::Kivi, budget)
    }

    pub fn streaming(budget: usize, sink_count: usize) -> Self {
        Self {
            sink_count,
            ..Self::base(PolicyKind::StreamingLlm, budget)
        }
    }

    pub fn h2o(budget: usize, recent_window: usize) -> Self {
        Self {
            recent_window,
            ..Self::base(PolicyKind::H2o, budget)
        }
    }

    /// Matches a policy to a full-precision budget `R`. LogQuant gets
    /// `W = floor(R/3)` so its `3W` peak never exceeds the others' `R`.
    pub fn for_budget(kind: PolicyKind, budget: usize) -> Self {
        match kind {
            PolicyKind::Logquant => Self::logquant(budget / 3),
            PolicyKind::Kivi => Self::kivi(budget),
            PolicyKind::StreamingLlm => Self::streaming(budget, 4),
            PolicyKind::H2o => Self::h2o(budget, 0),
        }
    }

    fn base(kind: PolicyKind, window: usize) -> Self {
        Self {
            kind,
            window,
            sink_count: 0,
            mode: Mode::QuantizeRest,
            release_batch: None,
            recent_window: 0,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_release_batch(mut self, batch: Option<usize>) -> Self {
        self.release_batch = batch;
        self
    }

    pub fn with_sinks(mut self, sink_count: usize) -> Self {
        self.sink_count = sink_count;
        self
    }

    /// Maximum number of full-precision tokens.
    pub fn fp_budget(&self) -> usize {
        match self.kind {
            PolicyKind::Logquant => 3 * self.window,
            _ => self.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParams(format!("{} window must be >= 1", self.kind)));
        }
        let budget = self.fp_budget();
        if self.sink_count >= budget {
            return Err(Error::InvalidParams(format!(
                "sink_count {} must be below the budget {budget}",
                self.sink_count
            )));
        }
        if let Some(b) = self.release_batch {
            if b == 0 || b > budget - self.sink_count {
                return Err(Error::InvalidParams(format!(
                    "release batch {b} must be in 1..={}",
                    budget - self.sink_count
                )));
            }
        }
        if self.kind == PolicyKind::H2o && self.recent_window > budget {
            return Err(Error::InvalidParams(format!(
                "h2o budget {budget} below recent window {}",
                self.recent_window
            )));
        }
        Ok(())
    }
}

/// One release event: positions that left the full-precision set when
/// `at_position` was appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleaseEvent {
    pub at_position: usize,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionState {
    kept: Vec<usize>,
    released_log: Vec<ReleaseEvent>,
    /// Cumulative attention per kept position (aligned with `kept`); H2O only.
    scores: Vec<f64>,
    last: Option<usize>,
}

impl SelectionState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Full-precision positions, strictly increasing.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn released_log(&self) -> &[ReleaseEvent] {
        &self.released_log
    }

    pub fn all_released(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .released_log
            .iter()
            .flat_map(|e| e.positions.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }

    /// H2O scores as `(position, score)` pairs in kept order.
    pub fn h2o_scores(&self) -> Vec<(usize, f64)> {
        self.kept
            .iter()
            .copied()
            .zip(self.scores.iter().copied())
            .collect()
    }

    /// Appends `pos` under `cfg`, returning the released positions (ascending).
    pub fn append(&mut self, cfg: &PolicyConfig, pos: usize) -> Result<Vec<usize>> {
        match cfg.kind {
            PolicyKind::Logquant => logquant_append(self, pos, cfg.window),
            PolicyKind::Kivi => kivi_append(self, pos, cfg.window, cfg.release_batch),
            PolicyKind::StreamingLlm => {
                streaming_append(self, pos, cfg.window, cfg.sink_count, cfg.release_batch)
            }
            PolicyKind::H2o => h2o_append(self, pos, cfg.window, cfg.recent_window, cfg.release_batch),
        }
    }

    fn check_monotonic(&self, pos: usize) -> Result<()> {
        match self.last {
            Some(last) if pos <= last => Err(Error::NonMonotonicPosition { pos, last }),
            _ => Ok(()),
        }
    }

    fn push(&mut self, pos: usize) {
        self.kept.push(pos);
        self.scores.push(0.0);
        self.last = Some(pos);
    }

    /// Keeps entries whose index satisfies `keep`, returning the dropped positions.
    fn retain_indices(&mut self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut released = Vec::new();
        let mut kept = Vec::with_capacity(self.kept.len());
        let mut scores = Vec::with_capacity(self.kept.len());
        for (i, (&p, &s)) in self.kept.iter().zip(&self.scores).enumerate() {
            if keep(i) {
                kept.push(p);
                scores.push(s);
            } else {
                released.push(p);
            }
        }
        self.kept = kept;
        self.scores = scores;
        released
    }

    fn log_release(&mut self, at_position: usize, positions: &[usize]) {
        if !positions.is_empty() {
            self.released_log.push(ReleaseEvent {
                at_position,
                positions: positions.to_vec(),
            });
        }
    }
}

/// Log-sparse selection: decimates the oldest `2W` entries when `3W` are held.
pub fn logquant_append(state: &mut SelectionState, new_pos: usize, w: usize) -> Result<Vec<usize>> {
    if w == 0 {
        return Err(Error::InvalidParams("logquant window must be >= 1".into()));
    }
    state.check_monotonic(new_pos)?;
    let mut released = Vec::new();
    if state.kept.len() >= 3 * w {
        // kept[0..2W] at even indices, then kept[2W..3W]
        released = state.retain_indices(|i| i >= 2 * w || i % 2 == 0);
    }
    state.push(new_pos);
    state.log_release(new_pos, &released);
    Ok(released)
}

/// Sliding window over the most recent `budget` positions.
pub fn kivi_append(
    state: &mut SelectionState,
    new_pos: usize,
    budget: usize,
    batch: Option<usize>,
) -> Result<Vec<usize>> {
    streaming_append(state, new_pos, budget, 0, batch)
}

/// First `sink_count` positions pinned, sliding window over the remainder.
pub fn streaming_append(
    state: &mut SelectionState,
    new_pos: usize,
    budget: usize,
    sink_count: usize,
    batch: Option<usize>,
) -> Result<Vec<usize>> {
    if budget <= sink_count {
        return Err(Error::InvalidParams(format!(
            "budget {budget} must exceed sink_count {sink_count}"
        )));
    }
    let slots = budget - sink_count;
    if let Some(b) = batch {
        if b == 0 || b > slots {
            return Err(Error::InvalidParams(format!(
                "release batch {b} must be in 1..={slots}"
            )));
        }
    }
    state.check_monotonic(new_pos)?;
    state.push(new_pos);

    let sinks = sink_count.min(state.kept.len());
    let window_len = state.kept.len() - sinks;
    let release = match batch {
        None => window_len.saturating_sub(slots),
        Some(b) if window_len > slots => b,
        Some(_) => 0,
    };
    let released = if release > 0 {
        state.retain_indices(|i| i < sinks || i >= sinks + release)
    } else {
        Vec::new()
    };
    state.log_release(new_pos, &released);
    Ok(released)
}

/// Heavy-hitter append. The arriving token has no attention history yet, so it
/// is always admitted. When the cache is full, `batch` (default 1) older
/// positions leave at once. The protected recent window shrinks by the batch
/// for that selection, so a batch can also take recent low scorers; the
/// survivors are picked with [`h2o_select`].
pub fn h2o_append(
    state: &mut SelectionState,
    new_pos: usize,
    budget: usize,
    recent_window: usize,
    batch: Option<usize>,
) -> Result<Vec<usize>> {
    if budget == 0 || budget < recent_window {
        return Err(Error::InvalidParams(format!(
            "h2o budget {budget} must be >= max(1, recent window {recent_window})"
        )));
    }
    let b = batch.unwrap_or(1);
    if b == 0 || b > budget {
        return Err(Error::InvalidParams(format!(
            "release batch {b} must be in 1..={budget}"
        )));
    }
    state.check_monotonic(new_pos)?;
    let mut released = Vec::new();
    if state.kept.len() >= budget {
        let survivors = h2o_select(&state.h2o_scores(), budget - b, recent_window.saturating_sub(b))?;
        let kept = &state.kept;
        let keep_idx: Vec<bool> = kept.iter().map(|p| survivors.binary_search(p).is_ok()).collect();
        released = state.retain_indices(|i| keep_idx[i]);
    }
    state.push(new_pos);
    state.log_release(new_pos, &released);
    Ok(released)
}

/// Picks the kept set: the `recent_window` most recent positions plus the
/// highest-scoring `budget - recent_window` of the rest. Ties go to the more
/// recent position. Returns positions in ascending order.
pub fn h2o_select(scores: &[(usize, f64)], budget: usize, recent_window: usize) -> Result<Vec<usize>> {
    if budget < recent_window {
        return Err(Error::InvalidParams(format!(
            "h2o budget {budget} below recent window {recent_window}"
        )));
    }
    let mut live: Vec<(usize, f64)> = scores.to_vec();
    live.sort_by_key(|&(p, _)| p);
    if budget >= live.len() {
        return Ok(live.into_iter().map(|(p, _)| p).collect());
    }
    let split = live.len() - recent_window.min(live.len());
    let (older, recent) = live.split_at(split);
    let mut ranked: Vec<(usize, f64)> = older.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
    let mut out: Vec<usize> = ranked
        .into_iter()
        .take(budget - recent.len())
        .map(|(p, _)| p)
        .chain(recent.iter().map(|&(p, _)| p))
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Adds one step of attention mass to every kept position's score. `dist` is
/// aligned with [`SelectionState::kept`].
pub fn update_h2o_scores(state: &mut SelectionState, dist: &[f32]) -> Result<()> {
    if dist.len() != state.kept.len() {
        return Err(Error::LengthMismatch {
            expected: state.kept.len(),
            found: dist.len(),
        });
    }
    for (s, &p) in state.scores.iter_mut().zip(dist) {
        *s += p as f64;
    }
    Ok(())
}
