//! Dense row-major `f64` tensors.
//!
//! Tensors are plain values: every arithmetic operation returns a new tensor
//! and leaves its inputs untouched. Mutable access is only exposed to owners
//! (parameters being stepped by the optimizer, layer kernels filling a freshly
//! allocated output).

use std::fmt;

use crate::error::{Result, SevenError};

/// Magic bytes opening a tensor snapshot.
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SEVN";
/// Current snapshot layout version.
pub const SNAPSHOT_VERSION: u8 = 1;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl ElementwiseOp {
    fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(SevenError::invalid("tensor rank must be at least 1"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(SevenError::invalid(format!(
            "tensor extent {pos} is zero in shape {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| SevenError::invalid(format!("shape {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(SevenError::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor::new(vec![values.len().max(1)], values.to_vec())
            .expect("vector must be non-empty")
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(SevenError::invalid("ragged matrix rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
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

    /// Extent of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Returns `(batch, channels, height, width)` for a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(SevenError::invalid(format!(
                "expected a 4-D image tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Returns `(rows, cols)` for a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(SevenError::invalid(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(SevenError::invalid(format!(
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok(index.iter().zip(self.strides()).map(|(i, s)| i * s).sum())
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (k, &extent) in self.shape.iter().enumerate().rev() {
            index[k] = flat % extent;
            flat /= extent;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(SevenError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(SevenError::ShapeMismatch {
                op: op.name(),
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Mul, other)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(SevenError::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.dims2()?;
        let (k2, c) = other.dims2()?;
        if k != k2 {
            return Err(SevenError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; r * c];
        gemm(
            1.0,
            MatRef::row_major(&self.data, r, k),
            MatRef::row_major(&other.data, k, c),
            0.0,
            &mut out,
        );
        Tensor::new(vec![r, c], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors along the leading axis. Trailing extents must agree.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| SevenError::invalid("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut batch = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        for part in parts {
            if &part.shape[1..] != tail {
                return Err(SevenError::ShapeMismatch {
                    op: "concat_batch",
                    left: first.shape.clone(),
                    right: part.shape.clone(),
                });
            }
            batch += part.shape[0];
            data.extend_from_slice(&part.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Tensor::new(shape, data)
    }

    /// Leading-axis rows `start..end` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(SevenError::invalid(format!(
                "batch slice {start}..{end} out of range for shape {:?}",
                self.shape
            )));
        }
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * n..end * n].to_vec())
    }

    /// Serializes into the snapshot layout: magic, version byte, rank byte,
    /// extents as little-endian `u64`, values as little-endian `f64`.
    pub fn write_snapshot(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        out.push(self.shape.len() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_snapshot(&mut out);
        out
    }

    /// Parses one snapshot from `reader`, advancing it past the tensor.
    pub fn read_snapshot(reader: &mut ByteReader<'_>) -> Result<Tensor> {
        let start = reader.offset();
        let magic = reader.take(4)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(reader.error_at(start, format!("bad tensor magic {magic:?}")));
        }
        let version = reader.u8()?;
        if version != SNAPSHOT_VERSION {
            return Err(reader.error_at(
                start + 4,
                format!("unsupported tensor snapshot version {version}"),
            ));
        }
        let rank = reader.u8()? as usize;
        if rank == 0 {
            return Err(reader.error_at(start + 5, "tensor rank 0"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = reader.offset();
            let e = reader.u64()?;
            let e = usize::try_from(e).map_err(|_| reader.error_at(at, "extent overflow"))?;
            shape.push(e);
        }
        let n = check_shape(&shape).map_err(|e| reader.error_at(start, e.to_string()))?;
        let byte_len = n
            .checked_mul(8)
            .ok_or_else(|| reader.error_at(start, "tensor size overflow"))?;
        let bytes = reader.take(byte_len)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Tensor> {
        let mut reader = ByteReader::new(bytes, "tensor snapshot");
        let t = Tensor::read_snapshot(&mut reader)?;
        if !reader.is_empty() {
            return Err(reader.error_at(reader.offset(), "trailing bytes after tensor"));
        }
        Ok(t)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Cursor over a byte buffer that reports offsets in its errors.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], context: impl Into<String>) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            context: context.into(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn error_at(&self, offset: u64, message: impl Into<String>) -> SevenError {
        SevenError::format(self.context.clone(), offset, message)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.offset(),
                format!(
                    "truncated: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Strided read-only matrix view used by the GEMM wrapper.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` a dense row-major buffer.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views were bounds-checked at construction (row-major
    // extents fit their buffers; transposition only swaps strides), and `c`
    // holds at least m*n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elementwise_examples() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        let c = Tensor::vector(&[2.0, 3.0]);
        let d = Tensor::vector(&[0.5, 2.0]);
        assert_eq!(c.mul(&d).unwrap().data(), &[1.0, 6.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(Tensor::vector(&[3.0, 4.0]).l2_norm(), 5.0);
        assert_eq!(Tensor::zeros(&[5]).l2_norm(), 0.0);
        assert_eq!(Tensor::vector(&[1.0, 1.0, 1.0, 1.0]).l2_norm(), 2.0);
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Tensor::matrix(&[&[1.5, -2.0, 3.0], &[4.0, 5.0, -6.5]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);

        let row = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        let col = Tensor::matrix(&[&[3.0], &[4.0]]).unwrap();
        let p = row.matmul(&col).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.data(), &[11.0]);

        assert!(matches!(
            row.matmul(&row),
            Err(SevenError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn snapshot_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = t.to_snapshot();
        let mut expected = b"SEVN".to_vec();
        expected.push(1);
        expected.push(2);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_snapshot_reports_offset() {
        let t = Tensor::zeros(&[3, 3]);
        let bytes = t.to_snapshot();
        let err = Tensor::from_snapshot(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, SevenError::Format { offset: 22, .. }), "{err}");
        assert!(Tensor::from_snapshot(b"NOPE\x01\x01").is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..5)
    }

    proptest! {
        #[test]
        fn index_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| i as f64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat = rng.random_range(0..t.len());
            let idx = t.unravel(flat);
            prop_assert_eq!(t.flat_index(&idx).unwrap(), flat);
            prop_assert_eq!(t.get(&idx).unwrap(), flat as f64);
            // Row-major: last stride is 1, each stride is the product of later extents.
            let strides = t.strides();
            prop_assert_eq!(*strides.last().unwrap(), 1);
            let reshaped = t.reshape(&[t.len()]).unwrap();
            prop_assert_eq!(reshaped.data()[flat], flat as f64);
        }

        #[test]
        fn snapshot_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&shape, |_| rng.random::<f64>() * 1e3 - 500.0);
            let back = Tensor::from_snapshot(&t.to_snapshot()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn norm_nonnegative_and_zero_only_for_zero(v in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let t = Tensor::vector(&v);
            let inputs = t.clone();
            let n = t.l2_norm();
            prop_assert!(n >= 0.0);
            prop_assert_eq!(n == 0.0, v.iter().all(|&x| x == 0.0));
            let _ = t.add(&t).unwrap();
            prop_assert_eq!(t, inputs);
        }
    }
}
