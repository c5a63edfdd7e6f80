//! Compressed KV cache for one (layer, kv-head) stream.
//!
//! Storage is position-agnostic: full-precision rows (in kept order) come
//! first, followed by released rows in release order. Attention is a weighted
//! sum over rows, so the storage order does not change the output. Original
//! positions are tracked only to report distributions by position.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::policy::{update_h2o_scores, Mode, PolicyConfig, PolicyKind, SelectionState};
use crate::quant::{quantize_kv, QuantParams, QuantizedTensor};
use crate::tensor::{attention, AttentionConfig, Matrix};

/// How released rows are stored in `quantize_rest` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleasePayload {
    Quantized {
        key: QuantParams,
        value: QuantParams,
    },
    /// Released rows kept as exact f32 copies (the 16-bit setting).
    Passthrough,
}

impl ReleasePayload {
    /// `16` selects passthrough; `2` and `4` select per-channel keys and
    /// per-token values with group size `group_size`.
    pub fn for_bits(bits: u8, group_size: usize) -> Result<Self> {
        if bits == 16 {
            return Ok(ReleasePayload::Passthrough);
        }
        let (key, value) = QuantParams::kv_pair(bits, group_size)?;
        Ok(ReleasePayload::Quantized { key, value })
    }

    pub fn bits(&self) -> u8 {
        match self {
            ReleasePayload::Quantized { key, .. } => key.bits(),
            ReleasePayload::Passthrough => 16,
        }
    }
}

/// Result of one decode-step attention over the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Distribution in storage order.
    pub dist_over_stored: Vec<f32>,
    /// Same mass indexed by original position; evicted positions are 0.
    pub dist_by_origin: Vec<f32>,
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Footprint {
    pub fp_bytes: usize,
    pub q_bytes: usize,
    pub metadata_bytes: usize,
}

impl Footprint {
    pub fn total(&self) -> usize {
        self.fp_bytes + self.q_bytes + self.metadata_bytes
    }
}

#[derive(Debug, Clone)]
pub struct CompressedKvCache {
    policy: PolicyConfig,
    state: SelectionState,
    head_dim: usize,
    payload: ReleasePayload,
    fp_elem_bytes: usize,

    fp_keys: Matrix,
    fp_values: Matrix,
    fp_origin: Vec<usize>,

    q_keys: Vec<QuantizedTensor>,
    q_values: Vec<QuantizedTensor>,
    // dequantized copies of the released rows; quantization happens once per
    // batch so this is exactly dequantize(q_*) concatenated
    released_keys: Matrix,
    released_values: Matrix,
    q_origin: Vec<usize>,

    position_span: usize,
    appended: usize,
}

/// Bytes per element of the deployment dtype (BF16) used for accounting.
pub const DEFAULT_FP_ELEM_BYTES: usize = 2;

impl CompressedKvCache {
    pub fn new(policy: PolicyConfig, head_dim: usize, payload: ReleasePayload) -> Result<Self> {
        policy.validate()?;
        if head_dim == 0 {
            return Err(Error::InvalidParams("head_dim must be >= 1".into()));
        }
        Ok(Self {
            policy,
            state: SelectionState::new(),
            head_dim,
            payload,
            fp_elem_bytes: DEFAULT_FP_ELEM_BYTES,
            fp_keys: Matrix::empty(head_dim),
            fp_values: Matrix::empty(head_dim),
            fp_origin: Vec::new(),
            q_keys: Vec::new(),
            q_values: Vec::new(),
            released_keys: Matrix::empty(head_dim),
            released_values: Matrix::empty(head_dim),
            q_origin: Vec::new(),
            position_span: 0,
            appended: 0,
        })
    }

    pub fn with_fp_elem_bytes(mut self, bytes: usize) -> Self {
        self.fp_elem_bytes = bytes;
        self
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn state(&self) -> &SelectionState {
        &self.state
    }

    pub fn payload(&self) -> ReleasePayload {
        self.payload
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn fp_count(&self) -> usize {
        self.fp_origin.len()
    }

    pub fn q_count(&self) -> usize {
        self.q_origin.len()
    }

    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn is_empty(&self) -> bool {
        self.fp_count() + self.q_count() == 0
    }

    /// Original position of every stored row, in storage order.
    pub fn origin_positions(&self) -> Vec<usize> {
        self.fp_origin.iter().chain(&self.q_origin).copied().collect()
    }

    pub fn quantized_keys(&self) -> &[QuantizedTensor] {
        &self.q_keys
    }

    pub fn quantized_values(&self) -> &[QuantizedTensor] {
        &self.q_values
    }

    /// Adds one token. Rows the policy releases move to the quantized store
    /// (or are dropped in `evict_rest` mode). Returns the released positions.
    pub fn append_token(&mut self, k_row: &[f32], v_row: &[f32], pos: usize) -> Result<Vec<usize>> {
        for (operand, row) in [("k_row", k_row), ("v_row", v_row)] {
            if row.len() != self.head_dim {
                return Err(Error::DimMismatch {
                    operand,
                    expected: self.head_dim,
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row: pos, col: c });
            }
        }

        let released = self.state.append(&self.policy, pos)?;
        if !released.is_empty() {
            self.release(&released)?;
        }
        self.fp_keys.push_row(k_row)?;
        self.fp_values.push_row(v_row)?;
        self.fp_origin.push(pos);
        self.position_span = pos + 1;
        self.appended += 1;
        debug_assert_eq!(self.fp_origin, self.state.kept());
        Ok(released)
    }

    fn release(&mut self, released: &[usize]) -> Result<()> {
        // both lists ascending
        let mut out_idx = Vec::with_capacity(released.len());
        let mut keep_idx = Vec::with_capacity(self.fp_origin.len());
        let mut r = released.iter().peekable();
        for (i, &p) in self.fp_origin.iter().enumerate() {
            if r.peek() == Some(&&p) {
                out_idx.push(i);
                r.next();
            } else {
                keep_idx.push(i);
            }
        }
        debug_assert_eq!(out_idx.len(), released.len());

        if self.policy.mode == Mode::QuantizeRest {
            let batch_k = self.fp_keys.select_rows(&out_idx);
            let batch_v = self.fp_values.select_rows(&out_idx);
            match self.payload {
                ReleasePayload::Quantized { key, value } => {
                    let (qk, qv) = quantize_kv(&batch_k, &batch_v, key, value)?;
                    self.released_keys.append(&qk.dequantize())?;
                    self.released_values.append(&qv.dequantize())?;
                    self.q_keys.push(qk);
                    self.q_values.push(qv);
                }
                ReleasePayload::Passthrough => {
                    self.released_keys.append(&batch_k)?;
                    self.released_values.append(&batch_v)?;
                }
            }
            self.q_origin.extend_from_slice(released);
        }

        self.fp_keys = self.fp_keys.select_rows(&keep_idx);
        self.fp_values = self.fp_values.select_rows(&keep_idx);
        self.fp_origin = keep_idx.iter().map(|&i| self.fp_origin[i]).collect();
        Ok(())
    }

    /// Attention of one decode query over everything stored.
    pub fn attend(&self, q_row: &[f32], cfg: &AttentionConfig) -> Result<StepResult> {
        if self.is_empty() {
            return Err(Error::EmptyCache);
        }
        let mut k = self.fp_keys.clone();
        k.append(&self.released_keys)?;
        let mut v = self.fp_values.clone();
        v.append(&self.released_values)?;
        let att = attention(q_row, &k, &v, cfg)?;

        let mut by_origin = vec![0.0f32; self.position_span];
        for (&p, &mass) in self.fp_origin.iter().chain(&self.q_origin).zip(&att.dist) {
            by_origin[p] = mass;
        }
        Ok(StepResult {
            dist_over_stored: att.dist,
            dist_by_origin: by_origin,
            output: att.output,
        })
    }

    /// Feeds one step's attention back into the policy. Only H2O keeps
    /// scores; the mass on full-precision rows is what it accumulates.
    pub fn record_attention(&mut self, fp_dist: &[f32]) -> Result<()> {
        if self.policy.kind == PolicyKind::H2o {
            update_h2o_scores(&mut self.state, fp_dist)?;
        }
        Ok(())
    }

    pub fn memory_footprint(&self) -> Footprint {
        let row_bytes = self.head_dim * 2 * self.fp_elem_bytes;
        let q_bytes = match self.payload {
            ReleasePayload::Quantized { .. } => self
                .q_keys
                .iter()
                .chain(&self.q_values)
                .map(QuantizedTensor::byte_size)
                .sum(),
            ReleasePayload::Passthrough => self.q_count() * row_bytes,
        };
        Footprint {
            fp_bytes: self.fp_count() * row_bytes,
            q_bytes,
            metadata_bytes: 4 * (self.fp_count() + self.q_count()),
        }
    }

    /// Writes the cache state dump (layout in FORMATS.md).
    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&[self.payload.bits(), mode_tag(self.policy.mode)])?;
        for x in [self.head_dim, self.fp_count(), self.q_count(), self.q_keys.len()] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for x in self.fp_keys.data().iter().chain(self.fp_values.data()) {
            w.write_all(&x.to_le_bytes())?;
        }
        match self.payload {
            ReleasePayload::Quantized { .. } => {
                for (k, v) in self.q_keys.iter().zip(&self.q_values) {
                    k.write_to(w)?;
                    v.write_to(w)?;
                }
            }
            ReleasePayload::Passthrough => {
                for x in self
                    .released_keys
                    .data()
                    .iter()
                    .chain(self.released_values.data())
                {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        for &p in self.fp_origin.iter().chain(&self.q_origin) {
            w.write_all(&(p as u32).to_le_bytes())?;
        }
        Ok(())
    }
}

const DUMP_MAGIC: &[u8; 4] = b"KVCD";
const DUMP_VERSION: u16 = 1;

fn mode_tag(mode: Mode) -> u8 {
    match mode {
        Mode::QuantizeRest => 0,
        Mode::EvictRest => 1,
    }
}

/// Parsed cache state dump.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheDump {
    pub bits: u8,
    pub mode: Mode,
    pub fp_keys: Matrix,
    pub fp_values: Matrix,
    pub q_keys: Vec<QuantizedTensor>,
    pub q_values: Vec<QuantizedTensor>,
    /// Released rows as stored (dequantized or passthrough).
    pub released_keys: Matrix,
    pub released_values: Matrix,
    pub origin_positions: Vec<usize>,
}

impl CacheDump {
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::InvalidParams("bad cache dump magic".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        if u16::from_le_bytes(b2) != DUMP_VERSION {
            return Err(Error::InvalidParams("unsupported cache dump version".into()));
        }
        r.read_exact(&mut b2)?;
        let bits = b2[0];
        let mode = if b2[1] == 0 {
            Mode::QuantizeRest
        } else {
            Mode::EvictRest
        };
        let mut nums = [0usize; 4];
        for n in &mut nums {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *n = u32::from_le_bytes(b) as usize;
        }
        let [d, fp, q, segments] = nums;
        let fp_keys = Matrix::new(fp, d, read_f32s(r, fp * d)?)?;
        let fp_values = Matrix::new(fp, d, read_f32s(r, fp * d)?)?;
        let (mut q_keys, mut q_values) = (Vec::new(), Vec::new());
        let (mut released_keys, mut released_values) = (Matrix::empty(d), Matrix::empty(d));
        if bits == 16 {
            released_keys = Matrix::new(q, d, read_f32s(r, q * d)?)?;
            released_values = Matrix::new(q, d, read_f32s(r, q * d)?)?;
        } else {
            for _ in 0..segments {
                let k = QuantizedTensor::read_from(r)?;
                let v = QuantizedTensor::read_from(r)?;
                released_keys.append(&k.dequantize())?;
                released_values.append(&v.dequantize())?;
                q_keys.push(k);
                q_values.push(v);
            }
        }
        let mut origin_positions = Vec::with_capacity(fp + q);
        for _ in 0..fp + q {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            origin_positions.push(u32::from_le_bytes(b) as usize);
        }
        Ok(Self {
            bits,
            mode,
            fp_keys,
            fp_values,
            q_keys,
            q_values,
            released_keys,
            released_values,
            origin_positions,
        })
    }
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Uncompressed attention over all tokens in original order; the reference
/// every error metric is measured against.
pub fn oracle_attend(
    full_k: &Matrix,
    full_v: &Matrix,
    q_row: &[f32],
    cfg: &AttentionConfig,
) -> Result<StepResult> {
    let att = attention(q_row, full_k, full_v, cfg)?;
    Ok(StepResult {
        dist_by_origin: att.dist.clone(),
        dist_over_stored: att.dist,
        output: att.output,
    })
}
