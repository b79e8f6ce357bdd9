//! Dense rank-4 tensors.
//!
//! Layout is row-major NCHW: the flat index of `(n, c, y, x)` is
//! `((n * C + c) * H + y) * W + x`. The binary format (`MTIT`, version 1) is
//! little-endian: magic, `u32` version, `u32` n, c, h, w, then the values as
//! `f64` in that same order.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::bytes::{put_f64s, put_u32, ByteReader};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MTIT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }

    pub fn with_spatial(&self, h: usize, w: usize) -> Self {
        Self { h, w, ..*self }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::contract(format!("degenerate shape {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::contract(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.numel() > 0, "degenerate shape {shape}");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `h * w` plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// The value of a `[1, 1, 1, 1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `start..start + len` into a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::contract(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor {
            shape: s.with_channels(len),
            data,
        })
    }

    /// Extracts batch item `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks batch-of-one (or larger) tensors with identical c/h/w.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty list"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::contract(format!(
                    "cannot stack {} with {}",
                    t.shape, first
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape { n, ..first }, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.numel());
        self.write_bytes(&mut out);
        out
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        put_u32(out, TENSOR_VERSION);
        for d in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            put_u32(out, d as u32);
        }
        put_f64s(out, &self.data);
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut r = ByteReader::new(bytes);
        let t = Self::read_bytes(&mut r)?;
        if !r.is_empty() {
            return Err(Error::data_at(r.offset(), "trailing bytes after tensor"));
        }
        Ok(t)
    }

    pub(crate) fn read_bytes(r: &mut ByteReader<'_>) -> Result<Tensor> {
        r.magic(TENSOR_MAGIC)?;
        r.version(TENSOR_VERSION)?;
        let at = r.offset();
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if dims.contains(&0) {
            return Err(Error::data_at(at, format!("zero dimension in {dims:?}")));
        }
        let shape = Shape::new(
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
        );
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::data_at(at, "tensor size overflows"))?;
        let data = r.f64s(count)?;
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_batch_outermost() {
        let t = Tensor::from_vec(Shape::new(2, 3, 2, 2), (0..24).map(f64::from).collect())
            .unwrap();
        assert_eq!(t.at(1, 2, 1, 0), 22.0);
        assert_eq!(t.at(0, 1, 0, 1), 5.0);
        assert_eq!(t.plane(1, 0), &[12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn header_bytes() {
        let t = Tensor::scalar(1.5);
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"MTIT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b.len(), 4 + 4 + 16 + 8);
        assert_eq!(&b[24..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_data_errors() {
        let b = Tensor::zeros(Shape::new(1, 2, 3, 3)).to_bytes();
        for cut in [0, 3, 10, 23, b.len() - 1] {
            assert!(matches!(
                Tensor::from_bytes(&b[..cut]),
                Err(Error::Data { .. })
            ));
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        let err = Tensor::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("MTIT"), "{err}");
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_bit_exact(
            n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in any::<u64>(),
        ) {
            let shape = Shape::new(n, c, h, w);
            let data: Vec<f64> = (0..shape.numel() as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(17) & 0x7fef_ffff_ffff_ffff))
                .collect();
            let t = Tensor::from_vec(shape, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
