//! Binary attention traces (`KVTR`) and the synthetic trace generator.
//!
//! Layout (all little-endian, see FORMATS.md):
//!
//! ```text
//! header (32 bytes)
//!   magic "KVTR" | version u16 | layer_count u32 | head_count u32
//!   kv_head_count u32 | head_dim u32 | prompt_len u32 | decode_steps u32
//!   dtype u16 (0 = f32)
//! prompt: for layer, for kv_head: K [prompt_len × d], V [prompt_len × d]
//! decode: for step, for layer: Q [head_count × d], then for kv_head: K [d], V [d]
//! ```
//!
//! Decode step `t` generates position `prompt_len + t`; its K/V rows enter the
//! cache before that step's queries attend.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"KVTR";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 0;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("header short: {found} of {HEADER_LEN} bytes")]
    HeaderShort { found: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {version} at offset 4")]
    UnsupportedVersion { version: u16 },
    #[error("unsupported dtype tag {tag} at offset 30")]
    UnsupportedDtype { tag: u16 },
    #[error("{field} must be >= 1 (offset {offset})")]
    ZeroDimension { field: &'static str, offset: usize },
    #[error("head_count {heads} is not a multiple of kv_head_count {kv_heads}")]
    HeadGrouping { heads: u32, kv_heads: u32 },
    #[error("payload short by {missing} bytes (expected file length {expected})")]
    PayloadShort { missing: u64, expected: u64 },
    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { extra: u64, offset: u64 },
    #[error("non-finite value at byte offset {offset}")]
    NonFinite { offset: u64 },
    #[error("cannot read trace: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceHeader {
    pub version: u16,
    pub layer_count: u32,
    pub head_count: u32,
    pub kv_head_count: u32,
    pub head_dim: u32,
    pub prompt_len: u32,
    pub decode_steps: u32,
    pub dtype: u16,
}

impl TraceHeader {
    pub fn new(
        layer_count: u32,
        head_count: u32,
        kv_head_count: u32,
        head_dim: u32,
        prompt_len: u32,
        decode_steps: u32,
    ) -> Result<Self, TraceError> {
        let h = Self {
            version: VERSION,
            layer_count,
            head_count,
            kv_head_count,
            head_dim,
            prompt_len,
            decode_steps,
            dtype: DTYPE_F32,
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), TraceError> {
        for (field, offset, v) in [
            ("layer_count", 6, self.layer_count),
            ("head_count", 10, self.head_count),
            ("kv_head_count", 14, self.kv_head_count),
            ("head_dim", 18, self.head_dim),
        ] {
            if v == 0 {
                return Err(TraceError::ZeroDimension { field, offset });
            }
        }
        if !self.head_count.is_multiple_of(self.kv_head_count) {
            return Err(TraceError::HeadGrouping {
                heads: self.head_count,
                kv_heads: self.kv_head_count,
            });
        }
        Ok(())
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        (self.head_count / self.kv_head_count) as usize
    }

    fn prompt_floats(&self) -> u64 {
        let (l, kv, d, p) = (
            self.layer_count as u64,
            self.kv_head_count as u64,
            self.head_dim as u64,
            self.prompt_len as u64,
        );
        l * kv * 2 * p * d
    }

    fn step_floats(&self) -> u64 {
        let (l, h, kv, d) = (
            self.layer_count as u64,
            self.head_count as u64,
            self.kv_head_count as u64,
            self.head_dim as u64,
        );
        l * (h + 2 * kv) * d
    }

    pub fn payload_len(&self) -> u64 {
        4 * (self.prompt_floats() + self.decode_steps as u64 * self.step_floats())
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.payload_len()
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        for (i, v) in [
            self.layer_count,
            self.head_count,
            self.kv_head_count,
            self.head_dim,
            self.prompt_len,
            self.decode_steps,
        ]
        .into_iter()
        .enumerate()
        {
            b[6 + 4 * i..10 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        b[30..32].copy_from_slice(&self.dtype.to_le_bytes());
        b
    }

    fn decode(bytes: &[u8]) -> Result<Self, TraceError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(TraceError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(TraceError::HeaderShort { found: bytes.len() });
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(TraceError::UnsupportedVersion { version });
        }
        let dtype = u16::from_le_bytes([bytes[30], bytes[31]]);
        if dtype != DTYPE_F32 {
            return Err(TraceError::UnsupportedDtype { tag: dtype });
        }
        let h = Self {
            version,
            layer_count: u32_at(6),
            head_count: u32_at(10),
            kv_head_count: u32_at(14),
            head_dim: u32_at(18),
            prompt_len: u32_at(22),
            decode_steps: u32_at(26),
            dtype,
        };
        h.validate()?;
        Ok(h)
    }
}

/// A decoded trace held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    /// Indexed `layer * kv_head_count + kv_head`.
    prompt_k: Vec<Matrix>,
    prompt_v: Vec<Matrix>,
    /// `[step][layer][head][d]`
    queries: Vec<f32>,
    /// `[step][layer][kv_head][d]`
    step_k: Vec<f32>,
    step_v: Vec<f32>,
}

impl Trace {
    fn stream(&self, layer: usize, kv_head: usize) -> usize {
        layer * self.header.kv_head_count as usize + kv_head
    }

    fn d(&self) -> usize {
        self.header.head_dim as usize
    }

    pub fn prompt_keys(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.prompt_k[self.stream(layer, kv_head)]
    }

    pub fn prompt_values(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.prompt_v[self.stream(layer, kv_head)]
    }

    pub fn query(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        let h = &self.header;
        let i = (step * h.layer_count as usize + layer) * h.head_count as usize + head;
        &self.queries[i * self.d()..(i + 1) * self.d()]
    }

    fn kv_index(&self, step: usize, layer: usize, kv_head: usize) -> usize {
        let h = &self.header;
        (step * h.layer_count as usize + layer) * h.kv_head_count as usize + kv_head
    }

    pub fn step_key(&self, step: usize, layer: usize, kv_head: usize) -> &[f32] {
        let i = self.kv_index(step, layer, kv_head);
        &self.step_k[i * self.d()..(i + 1) * self.d()]
    }

    pub fn step_value(&self, step: usize, layer: usize, kv_head: usize) -> &[f32] {
        let i = self.kv_index(step, layer, kv_head);
        &self.step_v[i * self.d()..(i + 1) * self.d()]
    }

    /// Query heads that share `kv_head`.
    pub fn heads_of(&self, kv_head: usize) -> std::ops::Range<usize> {
        let g = self.header.group_size();
        kv_head * g..(kv_head + 1) * g
    }

    /// Mean of the group's query heads for one step.
    pub fn group_mean_query(&self, step: usize, layer: usize, kv_head: usize) -> Vec<f32> {
        let heads = self.heads_of(kv_head);
        let n = heads.len() as f32;
        let mut q = vec![0.0f32; self.d()];
        for h in heads {
            for (a, x) in q.iter_mut().zip(self.query(step, layer, h)) {
                *a += x;
            }
        }
        q.iter_mut().for_each(|x| *x /= n);
        q
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.file_len() as usize);
        out.extend_from_slice(&h.encode());
        let mut put = |xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (k, v) in self.prompt_k.iter().zip(&self.prompt_v) {
            put(k.data());
            put(v.data());
        }
        for step in 0..h.decode_steps as usize {
            for layer in 0..h.layer_count as usize {
                for head in 0..h.head_count as usize {
                    put(self.query(step, layer, head));
                }
                for kv in 0..h.kv_head_count as usize {
                    put(self.step_key(step, layer, kv));
                    put(self.step_value(step, layer, kv));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        let h = TraceHeader::decode(bytes)?;
        let expected = h.file_len();
        let found = bytes.len() as u64;
        if found < expected {
            return Err(TraceError::PayloadShort {
                missing: expected - found,
                expected,
            });
        }
        if found > expected {
            return Err(TraceError::TrailingBytes {
                extra: found - expected,
                offset: expected,
            });
        }

        let mut cursor = HEADER_LEN;
        let mut take = |n: usize| -> Result<Vec<f32>, TraceError> {
            let start = cursor;
            let floats: Vec<f32> = bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = floats.iter().position(|x| !x.is_finite()) {
                return Err(TraceError::NonFinite {
                    offset: (start + 4 * i) as u64,
                });
            }
            cursor += 4 * n;
            Ok(floats)
        };

        let d = h.head_dim as usize;
        let p = h.prompt_len as usize;
        let streams = (h.layer_count * h.kv_head_count) as usize;
        let mut prompt_k = Vec::with_capacity(streams);
        let mut prompt_v = Vec::with_capacity(streams);
        for _ in 0..streams {
            prompt_k.push(Matrix::new(p, d, take(p * d)?).expect("sized"));
            prompt_v.push(Matrix::new(p, d, take(p * d)?).expect("sized"));
        }
        let mut queries = Vec::new();
        let mut step_k = Vec::new();
        let mut step_v = Vec::new();
        for _ in 0..h.decode_steps {
            for _ in 0..h.layer_count {
                queries.extend(take(h.head_count as usize * d)?);
                for _ in 0..h.kv_head_count {
                    step_k.extend(take(d)?);
                    step_v.extend(take(d)?);
                }
            }
        }
        Ok(Self {
            header: h,
            prompt_k,
            prompt_v,
            queries,
            step_k,
            step_v,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| TraceError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }
}

/// Header echo returned by [`validate_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub header: TraceHeader,
    pub file_len: u64,
}

impl std::fmt::Display for TraceSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let h = &self.header;
        write!(
            f,
            "KVTR v{} f32: layers={} heads={} kv_heads={} head_dim={} prompt_len={} decode_steps={} ({} bytes)",
            h.version,
            h.layer_count,
            h.head_count,
            h.kv_head_count,
            h.head_dim,
            h.prompt_len,
            h.decode_steps,
            self.file_len
        )
    }
}

/// Checks magic, version, size arithmetic and finiteness of every value.
pub fn validate_trace(path: impl AsRef<Path>) -> Result<TraceSummary, TraceError> {
    let t = Trace::read_file(path)?;
    Ok(TraceSummary {
        file_len: t.header.file_len(),
        header: t.header,
    })
}

/// Attention shape planted by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeModel {
    /// Sparse far-context spikes at log-uniform distances, plus a recency
    /// bump and optional sink mass.
    LogUniformSpikes,
    /// Near-uniform attention.
    Uniform,
    /// Attention that decays linearly in logit with distance.
    RecencyDecay,
}

impl SpikeModel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "log_uniform_spikes" | "log_spikes" => Some(SpikeModel::LogUniformSpikes),
            "uniform" => Some(SpikeModel::Uniform),
            "recency_decay" | "recency" => Some(SpikeModel::RecencyDecay),
            _ => None,
        }
    }
}

/// Parameters of a synthetic trace. These shape the generator only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub prompt_len: usize,
    pub decode_steps: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub model: SpikeModel,
    pub seed: u64,
    /// Planted spikes per query.
    pub spikes_per_step: usize,
    /// Target logit of a planted spike.
    pub spike_logit: f32,
    /// Spikes are drawn at distances log-uniform in
    /// `[spike_min_distance, position]`.
    pub spike_min_distance: usize,
    /// Width (in tokens) of the recency bump.
    pub recency_width: usize,
    /// Logit of the most recent token; falls linearly to 0 across the bump.
    pub recency_logit: f32,
    /// Logit bonus on positions 0 and 1; `0` disables sinks.
    pub sink_logit: f32,
    /// Std-dev of per-element query noise.
    pub query_noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            prompt_len: 256,
            decode_steps: 64,
            head_dim: 128,
            layers: 1,
            heads: 1,
            kv_heads: 1,
            model: SpikeModel::LogUniformSpikes,
            seed: 0,
            spikes_per_step: 4,
            spike_logit: 8.0,
            spike_min_distance: 128,
            recency_width: 4,
            recency_logit: 6.0,
            sink_logit: 6.0,
            query_noise: 0.05,
        }
    }
}

/// Builds a trace whose oracle attention follows `spec.model`.
///
/// Channel 0 of every key is a sink flag (1 on positions 0 and 1). The other
/// channels hold a random direction of norm `sqrt(d)`. A query is the sum of
/// the key directions it should attend to, each weighted so its logit hits the
/// requested target; cross terms between random directions act as background
/// noise.
pub fn generate_synthetic_trace(spec: &SyntheticSpec) -> Result<Trace, TraceError> {
    if spec.head_dim < 2 {
        return Err(TraceError::ZeroDimension {
            field: "head_dim (generator needs >= 2)",
            offset: 18,
        });
    }
    if spec.prompt_len + spec.decode_steps == 0 {
        return Err(TraceError::ZeroDimension {
            field: "prompt_len + decode_steps",
            offset: 22,
        });
    }
    let header = TraceHeader::new(
        spec.layers as u32,
        spec.heads as u32,
        spec.kv_heads as u32,
        spec.head_dim as u32,
        spec.prompt_len as u32,
        spec.decode_steps as u32,
    )?;
    let d = spec.head_dim;
    let total = spec.prompt_len + spec.decode_steps;
    let streams = spec.layers * spec.kv_heads;
    let scale = 1.0 / (d as f32).sqrt();
    let key_norm = (d as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // keys[stream][pos], values[stream][pos]
    let mut keys: Vec<Vec<Vec<f32>>> = Vec::with_capacity(streams);
    let mut values: Vec<Vec<Vec<f32>>> = Vec::with_capacity(streams);
    for _ in 0..streams {
        let mut ks = Vec::with_capacity(total);
        let mut vs = Vec::with_capacity(total);
        for pos in 0..total {
            let mut k = vec![0.0f32; d];
            k[0] = if pos < 2 && spec.sink_logit != 0.0 {
                1.0
            } else {
                0.0
            };
            let dir: Vec<f32> = (1..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            for (slot, x) in k[1..].iter_mut().zip(&dir) {
                *slot = x / norm * key_norm;
            }
            ks.push(k);
            vs.push((0..d).map(|_| StandardNormal.sample(&mut rng)).collect());
        }
        keys.push(ks);
        values.push(vs);
    }

    let mut queries = Vec::with_capacity(spec.decode_steps * spec.layers * spec.heads * d);
    let mut step_k = Vec::new();
    let mut step_v = Vec::new();
    let group = header.group_size();
    for step in 0..spec.decode_steps {
        let pos = spec.prompt_len + step;
        for layer in 0..spec.layers {
            for head in 0..spec.heads {
                let stream = layer * spec.kv_heads + head / group;
                let targets = planted_logits(spec, pos, &mut rng);
                let mut q: Vec<f32> = (0..d)
                    .map(|_| {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        n * spec.query_noise
                    })
                    .collect();
                if spec.model == SpikeModel::LogUniformSpikes {
                    q[0] += spec.sink_logit / scale;
                }
                for (p, logit) in targets {
                    let k = &keys[stream][p];
                    // logit = scale * q·k and |k[1..]|^2 = d
                    let w = logit / (scale * key_norm * key_norm);
                    for (a, x) in q[1..].iter_mut().zip(&k[1..]) {
                        *a += w * x;
                    }
                }
                queries.extend(q);
            }
            for kv in 0..spec.kv_heads {
                let stream = layer * spec.kv_heads + kv;
                step_k.extend_from_slice(&keys[stream][pos]);
                step_v.extend_from_slice(&values[stream][pos]);
            }
        }
    }

    let p = spec.prompt_len;
    let to_matrix = |rows: &[Vec<f32>]| Matrix::from_rows(d, rows).expect("rows have width d");
    Ok(Trace {
        header,
        prompt_k: keys.iter().map(|ks| to_matrix(&ks[..p])).collect(),
        prompt_v: values.iter().map(|vs| to_matrix(&vs[..p])).collect(),
        queries,
        step_k,
        step_v,
    })
}

/// Positions and target logits a query at `pos` should produce.
fn planted_logits(spec: &SyntheticSpec, pos: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, f32)> {
    let mut out = Vec::new();
    let recency = |width: usize, out: &mut Vec<(usize, f32)>| {
        for j in 0..width.min(pos + 1) {
            let logit = spec.recency_logit * (1.0 - j as f32 / width as f32);
            out.push((pos - j, logit));
        }
    };
    match spec.model {
        SpikeModel::Uniform => {}
        SpikeModel::RecencyDecay => recency(spec.recency_width.max(1) * 4, &mut out),
        SpikeModel::LogUniformSpikes => {
            recency(spec.recency_width, &mut out);
            let lo = spec.spike_min_distance.max(1);
            // positions 0 and 1 carry sink mass already
            let hi = pos.saturating_sub(2);
            if hi >= lo {
                let (ln_lo, ln_hi) = ((lo as f64).ln(), ((hi + 1) as f64).ln());
                let mut chosen: Vec<usize> = Vec::with_capacity(spec.spikes_per_step);
                let mut attempts = 0;
                while chosen.len() < spec.spikes_per_step.min(hi - lo + 1)
                    && attempts < 64 * spec.spikes_per_step
                {
                    attempts += 1;
                    let dist = (rng.random_range(ln_lo..ln_hi).exp() as usize).clamp(lo, hi);
                    if !chosen.contains(&dist) {
                        chosen.push(dist);
                    }
                }
                out.extend(chosen.into_iter().map(|dist| (pos - dist, spec.spike_logit)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            prompt_len: 40,
            decode_steps: 5,
            head_dim: 16,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            spike_min_distance: 8,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_bytes() {
        let t = generate_synthetic_trace(&small_spec()).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len() as u64, t.header.file_len());
        assert_eq!(Trace::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_trace(&small_spec()).unwrap().to_bytes();
        let b = generate_synthetic_trace(&small_spec()).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate_synthetic_trace(&SyntheticSpec {
            seed: 4,
            ..small_spec()
        })
        .unwrap()
        .to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn truncated_file() {
        let bytes = generate_synthetic_trace(&small_spec()).unwrap().to_bytes();
        let err = Trace::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, TraceError::PayloadShort { missing: 10, .. }));
        assert!(err.to_string().starts_with("payload short by 10 bytes"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Trace::from_bytes(&long),
            Err(TraceError::TrailingBytes { extra: 1, .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = generate_synthetic_trace(&small_spec()).unwrap().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Trace::from_bytes(&bytes),
            Err(TraceError::UnsupportedVersion { version: 9 })
        ));
        bytes[0] = b'X';
        assert_eq!(Trace::from_bytes(&bytes).unwrap_err().to_string(), "bad magic");
        assert!(matches!(
            Trace::from_bytes(b"KVTR"),
            Err(TraceError::HeaderShort { found: 4 })
        ));
    }

    #[test]
    fn non_finite_reports_offset() {
        let mut bytes = generate_synthetic_trace(&small_spec()).unwrap().to_bytes();
        let off = HEADER_LEN + 4 * 7;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            Trace::from_bytes(&bytes).unwrap_err(),
            TraceError::NonFinite { offset: off as u64 }
        );
    }

    #[test]
    fn grouping_must_divide() {
        assert!(matches!(
            TraceHeader::new(1, 3, 2, 4, 1, 1),
            Err(TraceError::HeadGrouping {
                heads: 3,
                kv_heads: 2
            })
        ));
        assert!(TraceHeader::new(1, 4, 0, 4, 1, 1).is_err());
    }

    #[test]
    fn accessors_follow_layout() {
        let t = generate_synthetic_trace(&small_spec()).unwrap();
        assert_eq!(t.prompt_keys(1, 1).rows(), 40);
        assert_eq!(t.heads_of(1), 2..4);
        let mean = t.group_mean_query(2, 1, 1);
        for (i, m) in mean.iter().enumerate() {
            let want = (t.query(2, 1, 2)[i] + t.query(2, 1, 3)[i]) / 2.0;
            assert!((m - want).abs() < 1e-6);
        }
    }
}
