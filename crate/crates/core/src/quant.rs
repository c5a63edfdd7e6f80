//! Asymmetric min/max group quantization to 2 or 4 bits.
//!
//! Each group of up to `G` consecutive elements along the grouping axis shares
//! a float scale and zero point:
//!
//! ```text
//! scale = (max - min) / (2^bits - 1)
//! zero  = min
//! code  = clamp(round((x - zero) / scale), 0, 2^bits - 1)
//! x_hat = code * scale + zero
//! ```
//!
//! A group whose values are all equal gets `scale = 0` and all-zero codes,
//! which reconstructs exactly. Rounding is half away from zero.
//!
//! Keys are grouped per channel (a channel across up to `G` consecutive tokens),
//! values per token (a token's channels chunked by `G`). Codes are stored
//! group by group, in group-index order, packed least-significant bits first.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// A group is one channel over up to `G` consecutive rows.
    PerChannel,
    /// A group is up to `G` consecutive channels of one row.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantParams {
    bits: u8,
    group_size: usize,
    axis: GroupAxis,
}

pub const DEFAULT_GROUP_SIZE: usize = 64;

impl QuantParams {
    pub fn new(bits: u8, group_size: usize, axis: GroupAxis) -> Result<Self> {
        if bits != 2 && bits != 4 {
            return Err(Error::InvalidParams(format!("bits must be 2 or 4, got {bits}")));
        }
        if group_size == 0 {
            return Err(Error::InvalidParams("group_size must be >= 1".into()));
        }
        Ok(Self {
            bits,
            group_size,
            axis,
        })
    }

    /// Per-channel key params and per-token value params.
    pub fn kv_pair(bits: u8, group_size: usize) -> Result<(Self, Self)> {
        Ok((
            Self::new(bits, group_size, GroupAxis::PerChannel)?,
            Self::new(bits, group_size, GroupAxis::PerToken)?,
        ))
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn axis(&self) -> GroupAxis {
        self.axis
    }

    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Number of groups covering a `rows × cols` tensor.
    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        match self.axis {
            GroupAxis::PerToken => rows * cols.div_ceil(self.group_size),
            GroupAxis::PerChannel => cols * rows.div_ceil(self.group_size),
        }
    }

    /// Group index of element `(row, col)`.
    pub fn group_of(&self, row: usize, col: usize, cols: usize) -> usize {
        let g = self.group_size;
        match self.axis {
            GroupAxis::PerToken => row * cols.div_ceil(g) + col / g,
            GroupAxis::PerChannel => (row / g) * cols + col,
        }
    }

    /// Row-major element indices in code-stream order, plus the start offset
    /// of every group in that stream (with a trailing end sentinel).
    fn stream_layout(&self, rows: usize, cols: usize) -> (Vec<usize>, Vec<usize>) {
        let g = self.group_size;
        let mut order = Vec::with_capacity(rows * cols);
        let mut bounds = Vec::with_capacity(self.group_count(rows, cols) + 1);
        if rows == 0 || cols == 0 {
            bounds.push(0);
            return (order, bounds);
        }
        match self.axis {
            GroupAxis::PerToken => {
                for r in 0..rows {
                    for start in (0..cols).step_by(g) {
                        bounds.push(order.len());
                        order.extend((start..(start + g).min(cols)).map(|c| r * cols + c));
                    }
                }
            }
            GroupAxis::PerChannel => {
                for block in (0..rows).step_by(g) {
                    for c in 0..cols {
                        bounds.push(order.len());
                        order.extend((block..(block + g).min(rows)).map(|r| r * cols + c));
                    }
                }
            }
        }
        bounds.push(order.len());
        (order, bounds)
    }
}

/// A packed low-bit tensor with per-group scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    params: QuantParams,
    rows: usize,
    cols: usize,
    packed: Vec<u8>,
    scales: Vec<f32>,
    zero_points: Vec<f32>,
}

pub fn quantize(m: &Matrix, params: QuantParams) -> Result<QuantizedTensor> {
    m.check_finite()?;
    let (rows, cols) = (m.rows(), m.cols());
    let (order, bounds) = params.stream_layout(rows, cols);
    let data = m.data();
    let max_code = params.max_code();
    let levels = max_code as f32;

    let mut codes = Vec::with_capacity(order.len());
    let mut scales = Vec::with_capacity(bounds.len().saturating_sub(1));
    let mut zero_points = Vec::with_capacity(scales.capacity());
    for w in bounds.windows(2) {
        let idx = &order[w[0]..w[1]];
        let (lo, hi) = idx
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(data[i]), hi.max(data[i]))
            });
        let scale = (hi - lo) / levels;
        scales.push(scale);
        zero_points.push(lo);
        if scale > 0.0 {
            codes.extend(idx.iter().map(|&i| {
                // f32::round is half-away-from-zero
                ((data[i] - lo) / scale).round().clamp(0.0, levels) as u8
            }));
        } else {
            codes.extend(std::iter::repeat_n(0u8, idx.len()));
        }
    }

    Ok(QuantizedTensor {
        params,
        rows,
        cols,
        packed: pack_codes(&codes, params.bits),
        scales,
        zero_points,
    })
}

/// Quantizes keys per channel and values per token.
pub fn quantize_kv(
    k_rows: &Matrix,
    v_rows: &Matrix,
    params_k: QuantParams,
    params_v: QuantParams,
) -> Result<(QuantizedTensor, QuantizedTensor)> {
    if k_rows.rows() != v_rows.rows() {
        return Err(Error::LengthMismatch {
            expected: k_rows.rows(),
            found: v_rows.rows(),
        });
    }
    Ok((quantize(k_rows, params_k)?, quantize(v_rows, params_v)?))
}

impl QuantizedTensor {
    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f32] {
        &self.zero_points
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    /// Codes in stream (group) order.
    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.params.bits, self.rows * self.cols)
    }

    /// Code of element `(row, col)`.
    pub fn code_at(&self, row: usize, col: usize) -> u8 {
        let (order, _) = self.params.stream_layout(self.rows, self.cols);
        let flat = row * self.cols + col;
        let pos = order.iter().position(|&i| i == flat).expect("element in range");
        unpack_codes(&self.packed, self.params.bits, pos + 1)[pos]
    }

    /// Scale of the group holding `(row, col)`.
    pub fn scale_at(&self, row: usize, col: usize) -> f32 {
        self.scales[self.params.group_of(row, col, self.cols)]
    }

    pub fn dequantize(&self) -> Matrix {
        let (order, bounds) = self.params.stream_layout(self.rows, self.cols);
        let codes = self.codes();
        let mut out = vec![0.0f32; self.rows * self.cols];
        for (g, w) in bounds.windows(2).enumerate() {
            let (scale, zero) = (self.scales[g], self.zero_points[g]);
            for s in w[0]..w[1] {
                out[order[s]] = codes[s] as f32 * scale + zero;
            }
        }
        Matrix::new(self.rows, self.cols, out).expect("shape preserved")
    }

    /// Payload bytes: packed codes plus f32 scales and zero points.
    pub fn byte_size(&self) -> usize {
        self.packed.len() + 4 * (self.scales.len() + self.zero_points.len())
    }

    /// Serializes the tensor in the dump layout described in FORMATS.md.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&[self.params.bits, axis_tag(self.params.axis)])?;
        w.write_all(&(self.params.group_size as u32).to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&(self.scales.len() as u32).to_le_bytes())?;
        w.write_all(&(self.packed.len() as u32).to_le_bytes())?;
        w.write_all(&self.packed)?;
        for s in &self.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        for z in &self.zero_points {
            w.write_all(&z.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let axis = match head[1] {
            0 => GroupAxis::PerChannel,
            1 => GroupAxis::PerToken,
            t => return Err(Error::InvalidParams(format!("unknown axis tag {t}"))),
        };
        let group_size = read_u32(r)? as usize;
        let params = QuantParams::new(head[0], group_size, axis)?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let groups = read_u32(r)? as usize;
        let packed_len = read_u32(r)? as usize;
        if groups != params.group_count(rows, cols)
            || packed_len != (rows * cols * params.bits as usize).div_ceil(8)
        {
            return Err(Error::InvalidParams(
                "inconsistent quantized tensor header".into(),
            ));
        }
        let mut packed = vec![0u8; packed_len];
        r.read_exact(&mut packed)?;
        let scales = read_f32s(r, groups)?;
        let zero_points = read_f32s(r, groups)?;
        Ok(Self {
            params,
            rows,
            cols,
            packed,
            scales,
            zero_points,
        })
    }
}

fn axis_tag(axis: GroupAxis) -> u8 {
    match axis {
        GroupAxis::PerChannel => 0,
        GroupAxis::PerToken => 1,
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Packs `bits`-wide codes into bytes, filling each byte from its least
/// significant bits. `bits` must divide 8.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    debug_assert!(matches!(bits, 1 | 2 | 4 | 8));
    let per_byte = (8 / bits) as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    codes
        .chunks(per_byte)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |b, (j, &c)| b | ((c & mask) << (j * bits as usize)))
        })
        .collect()
}

/// Inverse of [`pack_codes`]; returns exactly `count` codes.
pub fn unpack_codes(packed: &[u8], bits: u8, count: usize) -> Vec<u8> {
    let per_byte = (8 / bits) as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    let mut out = Vec::with_capacity(count);
    for &byte in packed {
        for j in 0..per_byte {
            if out.len() == count {
                return out;
            }
            out.push((byte >> (j * bits as usize)) & mask);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[f32]) -> Matrix {
        Matrix::new(1, values.len(), values.to_vec()).unwrap()
    }

    fn per_token(bits: u8, g: usize) -> QuantParams {
        QuantParams::new(bits, g, GroupAxis::PerToken).unwrap()
    }

    #[test]
    fn constant_group_is_exact() {
        let q = quantize(&row(&[5.0; 4]), per_token(2, 64)).unwrap();
        assert_eq!(q.scales(), &[0.0]);
        assert_eq!(q.codes(), vec![0, 0, 0, 0]);
        assert_eq!(q.dequantize().data(), &[5.0; 4]);
    }

    #[test]
    fn grid_aligned_round_trip() {
        let q = quantize(&row(&[0.0, 1.0, 2.0, 3.0]), per_token(2, 64)).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.zero_points(), &[0.0]);
        assert_eq!(q.codes(), vec![0, 1, 2, 3]);
        assert_eq!(q.dequantize().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn rounds_to_nearest() {
        let q = quantize(&row(&[0.0, 0.4, 2.6, 3.0]), per_token(2, 64)).unwrap();
        assert_eq!(q.codes(), vec![0, 0, 3, 3]);
        assert_eq!(q.dequantize().data(), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // scale 1, 1.5 sits exactly between codes 1 and 2
        let q = quantize(&row(&[0.0, 1.5, 3.0]), per_token(2, 64)).unwrap();
        assert_eq!(q.codes(), vec![0, 2, 3]);
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let m = Matrix::zeros(5, 9);
        let q = quantize(&m, QuantParams::new(2, 4, GroupAxis::PerChannel).unwrap()).unwrap();
        assert_eq!(q.dequantize(), m);
    }

    #[test]
    fn group_counts() {
        let pk = QuantParams::new(2, 64, GroupAxis::PerChannel).unwrap();
        let pv = per_token(2, 64);
        let (k, v) = quantize_kv(&Matrix::zeros(64, 8), &Matrix::zeros(64, 8), pk, pv).unwrap();
        assert_eq!(k.group_count(), 8);
        assert_eq!(v.group_count(), 64);
        assert_eq!(quantize(&Matrix::zeros(1, 128), pv).unwrap().group_count(), 2);
        let (k, v) = quantize_kv(&Matrix::empty(8), &Matrix::empty(8), pk, pv).unwrap();
        assert_eq!((k.group_count(), v.group_count()), (0, 0));
        assert!(k.packed().is_empty());
    }

    #[test]
    fn kv_row_mismatch() {
        let (pk, pv) = QuantParams::kv_pair(2, 64).unwrap();
        assert!(quantize_kv(&Matrix::zeros(3, 4), &Matrix::zeros(2, 4), pk, pv).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(QuantParams::new(3, 64, GroupAxis::PerToken).is_err());
        assert!(QuantParams::new(2, 0, GroupAxis::PerToken).is_err());
    }

    #[test]
    fn non_finite_input_reports_position() {
        let m = Matrix::new(2, 2, vec![0.0, 1.0, f32::NAN, 0.0]).unwrap();
        let err = quantize(&m, per_token(2, 2)).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at (1,0)");
    }

    #[test]
    fn short_trailing_groups() {
        // 5 rows, G=2 per channel: row blocks {0,1},{2,3},{4}
        let m = Matrix::new(5, 1, vec![0.0, 3.0, 1.0, 1.0, 7.0]).unwrap();
        let q = quantize(&m, QuantParams::new(2, 2, GroupAxis::PerChannel).unwrap()).unwrap();
        assert_eq!(q.group_count(), 3);
        assert_eq!(q.scales(), &[1.0, 0.0, 0.0]);
        assert_eq!(q.dequantize(), m);
    }

    /// Scalar per-token reference written without the stream layout.
    fn reference_per_token(m: &Matrix, bits: u8, g: usize) -> Vec<f32> {
        let levels = ((1u32 << bits) - 1) as f32;
        let mut out = Vec::new();
        for r in 0..m.rows() {
            let row = m.row(r);
            for chunk in row.chunks(g) {
                let mut lo = chunk[0];
                let mut hi = chunk[0];
                for &x in chunk {
                    if x < lo {
                        lo = x;
                    }
                    if x > hi {
                        hi = x;
                    }
                }
                let scale = (hi - lo) / levels;
                for &x in chunk {
                    if scale == 0.0 {
                        out.push(lo);
                    } else {
                        let mut c = ((x - lo) / scale).round();
                        if c > levels {
                            c = levels;
                        }
                        if c < 0.0 {
                            c = 0.0;
                        }
                        out.push(c * scale + lo);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_scalar_reference_4bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..8 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = Matrix::new(8, 64, data).unwrap();
        for g in [64, 16, 7] {
            let got = quantize(&m, per_token(4, g)).unwrap().dequantize();
            assert_eq!(got.data(), reference_per_token(&m, 4, g).as_slice());
        }
    }

    #[test]
    fn per_channel_groups_run_down_columns() {
        let m = Matrix::new(3, 2, vec![0.0, 10.0, 1.0, 10.0, 2.0, 10.0]).unwrap();
        let q = quantize(&m, QuantParams::new(2, 64, GroupAxis::PerChannel).unwrap()).unwrap();
        assert_eq!(q.group_count(), 2);
        assert_eq!(q.scale_at(0, 1), 0.0);
        assert!((q.scale_at(2, 0) - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(q.code_at(2, 0), 3);
    }

    #[test]
    fn packing_is_lsb_first() {
        assert_eq!(pack_codes(&[1, 2, 3, 0, 3], 2), vec![0b00_11_10_01, 0b11]);
        assert_eq!(pack_codes(&[0xA, 0x5, 0xF], 4), vec![0x5A, 0x0F]);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..6 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quantize(
            &Matrix::new(6, 10, data).unwrap(),
            QuantParams::new(2, 4, GroupAxis::PerChannel).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        q.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 22 + q.byte_size());
        assert_eq!(QuantizedTensor::read_from(&mut buf.as_slice()).unwrap(), q);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(codes in prop::collection::vec(0u8..16, 0..200), four in any::<bool>()) {
            let bits = if four { 4 } else { 2 };
            let codes: Vec<u8> = codes.into_iter().map(|c| c & ((1 << bits) - 1)).collect();
            let packed = pack_codes(&codes, bits);
            prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()), codes);
        }

        #[test]
        fn round_trip_within_half_scale(
            rows in 1usize..12,
            cols in 1usize..12,
            seed in any::<u64>(),
            four in any::<bool>(),
            per_channel in any::<bool>(),
            g in 1usize..9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let axis = if per_channel { GroupAxis::PerChannel } else { GroupAxis::PerToken };
            let p = QuantParams::new(if four { 4 } else { 2 }, g, axis).unwrap();
            let q = quantize(&m, p).unwrap();
            prop_assert!(q.codes().iter().all(|&c| c <= p.max_code()));
            let back = q.dequantize();
            for r in 0..rows {
                for c in 0..cols {
                    let err = (m.get(r, c) - back.get(r, c)).abs();
                    let bound = q.scale_at(r, c) / 2.0 + 1e-6 * m.get(r, c).abs().max(1.0);
                    prop_assert!(err <= bound, "err {} bound {}", err, bound);
                }
            }
            // determinism
            prop_assert_eq!(quantize(&m, p).unwrap(), q);
        }
    }
}
