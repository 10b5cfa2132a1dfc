//! Dense row-major `f64` tensors.
//!
//! Values are plain owned buffers: slicing and region extraction copy, there
//! is no view aliasing. Only the broadcasting the rest of the crate needs is
//! supported (none, beyond per-row and per-channel helpers in the layers).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

const MAGIC: &[u8; 4] = b"NDT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Structural(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Structural(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Structural("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..numel(shape)).map(|_| std * rng.normal()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.uniform_range(lo, hi))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Structural(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Extent of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copy of leading-axis slice `i`, with the leading axis removed.
    pub fn index_row(&self, i: usize) -> Result<Self> {
        if i >= self.rows() {
            return Err(Error::Index(format!("row {i} of {}", self.rows())));
        }
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Self::new(shape, self.row(i).to_vec())
    }

    /// Gathers leading-axis slices in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.row_len());
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::Index(format!("row {i} of {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Structural("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.check_same(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Structural(format!(
                "expected rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [b, c, t, h, w] => Ok([b, c, t, h, w]),
            _ => Err(Error::Structural(format!(
                "expected (B, C, T, H, W) tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// `(m, k) x (k, n)` product.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Structural(format!(
                "matmul inner dims {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.data,
            false,
            &other.data,
            false,
            0.0,
            &mut out,
        );
        Self::new(vec![m, n], out)
    }

    /// Copies the box `src[src_start .. src_start + extent]` into
    /// `self[dst_start .. dst_start + extent]`. All three slices have the
    /// tensors' rank.
    pub fn copy_region(
        &mut self,
        dst_start: &[usize],
        src: &Tensor,
        src_start: &[usize],
        extent: &[usize],
    ) -> Result<()> {
        let r = self.rank();
        if src.rank() != r || dst_start.len() != r || src_start.len() != r || extent.len() != r {
            return Err(Error::Structural("copy_region rank mismatch".into()));
        }
        for d in 0..r {
            if dst_start[d] + extent[d] > self.shape[d] || src_start[d] + extent[d] > src.shape[d] {
                return Err(Error::Index(format!(
                    "region out of bounds on axis {d}: dst {}+{} of {}, src {}+{} of {}",
                    dst_start[d], extent[d], self.shape[d], src_start[d], extent[d], src.shape[d]
                )));
            }
        }
        if extent.contains(&0) {
            return Ok(());
        }
        let ds = strides(&self.shape);
        let ss = strides(&src.shape);
        let run = extent[r - 1];
        let outer: usize = extent[..r - 1].iter().product();
        let mut idx = vec![0usize; r - 1];
        for _ in 0..outer {
            let mut d_off = dst_start[r - 1];
            let mut s_off = src_start[r - 1];
            for a in 0..r - 1 {
                d_off += (dst_start[a] + idx[a]) * ds[a];
                s_off += (src_start[a] + idx[a]) * ss[a];
            }
            self.data[d_off..d_off + run].copy_from_slice(&src.data[s_off..s_off + run]);
            for a in (0..r - 1).rev() {
                idx[a] += 1;
                if idx[a] < extent[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(())
    }

    /// Copy of the box `[start .. start + extent]`.
    pub fn region(&self, start: &[usize], extent: &[usize]) -> Result<Self> {
        if extent.contains(&0) {
            return Err(Error::Structural(format!("empty region extent {extent:?}")));
        }
        let mut out = Tensor::zeros(extent);
        let zero = vec![0; extent.len()];
        out.copy_region(&zero, self, start, extent)?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("NDT1 blob: {msg}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let rank = read_u32(4)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(read_u32(8 + 4 * i)? as usize);
        }
        let payload = &bytes[8 + 4 * rank..];
        if payload.len() != 8 * numel(&shape) {
            return Err(bad("payload length does not match header"));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(a)` is `(m, k)` and `op(b)` is `(k, n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the strides describe exactly the row-major buffers whose
    // lengths are asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scales every row of a `(B, D)` tensor to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (b, _) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..b {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {n}; cannot normalize"
            )));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Per-row softmax of a `(B, K)` tensor, max-shifted.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (b, _) = logits.dims2()?;
    let mut out = logits.clone();
    for i in 0..b {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Per-row `-log softmax(logits)[target]`, computed with log-sum-exp.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let (b, k) = logits.dims2()?;
    if targets.len() != b {
        return Err(Error::Structural(format!(
            "{} targets for {b} rows",
            targets.len()
        )));
    }
    let mut out = Vec::with_capacity(b);
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Index(format!("target {t} for {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(lse - row[t]);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient
/// `(softmax(logits) - onehot(target)) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if !logits.all_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let per_row = cross_entropy_rows(logits, targets)?;
    let b = per_row.len() as f64;
    let loss = per_row.iter().sum::<f64>() / b;
    let mut grad = softmax_rows(logits)?;
    for (i, &t) in targets.iter().enumerate() {
        grad.row_mut(i)[t] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= b);
    Ok((loss, grad))
}

/// Index of the largest entry of each row; the first wins on ties.
pub fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    let (b, _) = x.dims2()?;
    Ok((0..b)
        .map(|i| {
            let row = x.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
