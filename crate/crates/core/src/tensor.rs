//! Dense f32 kernels: row-major matrices, softmax and single-query attention.

use crate::error::{Error, Result};

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::new`] but rejects NaN and infinities.
    pub fn new_finite(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self::new(rows, cols, data)?;
        m.check_finite()?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix with a fixed column count, ready for [`Matrix::push_row`].
    pub fn empty(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimMismatch {
                operand: "row",
                expected: self.cols,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Appends every row of `other` below `self`.
    pub fn append(&mut self, other: &Matrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::DimMismatch {
                operand: "append",
                expected: self.cols,
                found: other.cols,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Gathers the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                row: i / self.cols.max(1),
                col: i % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub head_dim: usize,
    /// Multiplier applied to `q·k` before the softmax.
    pub scale: f32,
    /// Decode replay is always causal; kept for documentation of intent.
    pub causal: bool,
}

impl AttentionConfig {
    /// Standard scaled dot-product attention, `scale = 1/sqrt(d)`.
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_scale(head_dim, 1.0 / (head_dim as f32).sqrt())
    }

    /// Unscaled `softmax(q·K^T)` form.
    pub fn unscaled(head_dim: usize) -> Result<Self> {
        Self::with_scale(head_dim, 1.0)
    }

    pub fn with_scale(head_dim: usize, scale: f32) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::InvalidParams("head_dim must be >= 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParams(format!("scale must be > 0, got {scale}")));
        }
        Ok(Self {
            head_dim,
            scale,
            causal: true,
        })
    }
}

/// Numerically stable softmax (max-subtracted, accumulated in f64).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { row: 0, col: i });
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// Output of one single-query attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// Attention distribution over the rows of K, in row order.
    pub dist: Vec<f32>,
    /// `dist · V`, length `d`.
    pub output: Vec<f32>,
}

/// `softmax(scale · q·K^T) · V` for a single query row.
pub fn attention(q: &[f32], k: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> Result<Attention> {
    let d = cfg.head_dim;
    if q.len() != d {
        return Err(Error::DimMismatch {
            operand: "q",
            expected: d,
            found: q.len(),
        });
    }
    if k.cols() != d {
        return Err(Error::DimMismatch {
            operand: "k",
            expected: d,
            found: k.cols(),
        });
    }
    if v.cols() != d {
        return Err(Error::DimMismatch {
            operand: "v",
            expected: d,
            found: v.cols(),
        });
    }
    if v.rows() != k.rows() {
        return Err(Error::DimMismatch {
            operand: "v",
            expected: k.rows(),
            found: v.rows(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::EmptyLogits);
    }

    let logits: Vec<f32> = k.iter_rows().map(|row| cfg.scale * dot(q, row)).collect();
    let dist = softmax(&logits)?;

    let mut acc = vec![0.0f64; d];
    for (p, row) in dist.iter().zip(v.iter_rows()) {
        let p = *p as f64;
        for (a, x) in acc.iter_mut().zip(row) {
            *a += p * *x as f64;
        }
    }
    Ok(Attention {
        dist,
        output: acc.into_iter().map(|x| x as f32).collect(),
    })
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_of_logs_is_normalized_weights() {
        let p = softmax(&[1f32.ln(), 2f32.ln(), 3f32.ln()]).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
        assert!(matches!(
            softmax(&[0.0, f32::NAN]),
            Err(Error::NonFinite { col: 1, .. })
        ));
    }

    #[test]
    fn single_key_takes_all_mass() {
        let k = Matrix::new(1, 3, vec![0.3, -2.0, 5.0]).unwrap();
        let v = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let cfg = AttentionConfig::new(3).unwrap();
        let a = attention(&[1.0, 1.0, 1.0], &k, &v, &cfg).unwrap();
        assert_eq!(a.dist, vec![1.0]);
        assert_eq!(a.output, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn orthogonal_query_gives_uniform_distribution() {
        // q along axis 0, every key lives in axes 1..
        let k = Matrix::new(3, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 7.0, 0.0, -3.0, 2.0]).unwrap();
        let v = Matrix::zeros(3, 3);
        let cfg = AttentionConfig::with_scale(3, 17.0).unwrap();
        let a = attention(&[4.0, 0.0, 0.0], &k, &v, &cfg).unwrap();
        for p in a.dist {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_matrix(&mut rng, 4, 8);
        let v = random_matrix(&mut rng, 4, 8);
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = AttentionConfig::new(8).unwrap();
        let got = attention(&q, &k, &v, &cfg).unwrap();

        // naive reference
        let mut logits = [0.0f64; 4];
        for i in 0..4 {
            for j in 0..8 {
                logits[i] += q[j] as f64 * k.get(i, j) as f64;
            }
            logits[i] /= (8f64).sqrt();
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..8 {
            let mut o = 0.0;
            for i in 0..4 {
                o += logits[i].exp() / z * v.get(i, j) as f64;
            }
            assert!((got.output[j] as f64 - o).abs() < 1e-5);
        }
    }

    #[test]
    fn dimension_errors_name_operand() {
        let k = Matrix::zeros(2, 4);
        let v = Matrix::zeros(2, 3);
        let cfg = AttentionConfig::new(4).unwrap();
        let err = attention(&[0.0; 4], &k, &v, &cfg).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { operand: "v", .. }));
        let err = attention(&[0.0; 3], &k, &k, &cfg).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { operand: "q", .. }));
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(0).is_err());
        assert!(AttentionConfig::with_scale(4, 0.0).is_err());
        assert_eq!(AttentionConfig::new(16).unwrap().scale, 0.25);
    }

    #[test]
    fn matrix_rejects_bad_lengths_and_nan() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        let err = Matrix::new_finite(2, 2, vec![0.0, 0.0, f32::INFINITY, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 0 }));
    }
}
