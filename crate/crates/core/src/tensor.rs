//! Dense row-major tensors with the raw kernels behind the autodiff graph.
//!
//! Shapes are lists of positive extents; rank 0 denotes a scalar. Every
//! documented operation checks its result for non-finite values — NaN or
//! infinity production is reported as an error, never propagated silently.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("new", format!("zero extent in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {:?} wants {} elements, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); numel_of(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![E::one(); numel_of(shape)] }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel_of(shape)] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows".to_string()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// Gaussian init with the given std, mean zero.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..numel_of(shape))
            .map(|_| E::from_f64(dist.sample(rng)))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Uniform in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[E] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    // ----- arithmetic kernels -------------------------------------------------

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expects rank-2 operands, got {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let (m, p) = (self.shape[0], self.shape[1]);
        let (p2, n) = (rhs.shape[0], rhs.shape[1]);
        if p != p2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * p..(i + 1) * p];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }.checked("matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("expects rank 2, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "add")?;
        self.zip(rhs, |a, b| a + b).checked("add")
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "sub")?;
        self.zip(rhs, |a, b| a - b).checked("sub")
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "mul")?;
        self.zip(rhs, |a, b| a * b).checked("mul")
    }

    pub fn scale(&self, c: E) -> Result<Self> {
        self.map(|v| v * c).checked("scale")
    }

    pub fn add_scalar(&self, c: E) -> Result<Self> {
        self.map(|v| v + c).checked("add_scalar")
    }

    pub fn tanh(&self) -> Result<Self> {
        self.map(|v| v.tanh()).checked("tanh")
    }

    pub fn exp(&self) -> Result<Self> {
        self.map(|v| v.exp()).checked("exp")
    }

    pub fn erf(&self) -> Result<Self> {
        self.map(|v| v.erf()).checked("erf")
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.map(|v| v.sqrt()).checked("sqrt")
    }

    pub fn recip(&self) -> Result<Self> {
        self.map(|v| E::one() / v).checked("recip")
    }

    pub fn sum_all(&self) -> Result<Self> {
        let mut acc = E::zero();
        for &v in &self.data {
            acc += v;
        }
        Tensor::scalar(acc).checked("sum")
    }

    /// Sum of columns of a rank-2 tensor, keeping the row axis: [r, c] -> [r, 1].
    pub fn row_sum(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("row_sum", format!("expects rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::zero(); r];
        for i in 0..r {
            let mut acc = E::zero();
            for j in 0..c {
                acc += self.data[i * c + j];
            }
            out[i] = acc;
        }
        Tensor { shape: vec![r, 1], data: out }.checked("row_sum")
    }

    /// Repeat a [r, 1] column across `c` columns: [r, 1] -> [r, c].
    pub fn broadcast_cols(&self, c: usize) -> Result<Self> {
        if self.rank() != 2 || self.shape[1] != 1 {
            return Err(Error::shape(
                "broadcast_cols",
                format!("expects shape [r, 1], got {:?}", self.shape),
            ));
        }
        let r = self.shape[0];
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(std::iter::repeat(self.data[i]).take(c));
        }
        Ok(Tensor { shape: vec![r, c], data: out })
    }

    /// Materialize a leading-batch broadcast: own shape must be a suffix of `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if !is_suffix(&self.shape, shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} is not a trailing suffix of {:?}", self.shape, shape),
            ));
        }
        let reps = numel_of(shape) / self.numel().max(1);
        let mut out = Vec::with_capacity(numel_of(shape));
        for _ in 0..reps {
            out.extend_from_slice(&self.data);
        }
        Ok(Tensor { shape: shape.to_vec(), data: out })
    }

    /// Sum out leading batch axes down to a trailing suffix shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if !is_suffix(shape, &self.shape) {
            return Err(Error::shape(
                "sum_to",
                format!("{:?} is not a trailing suffix of {:?}", shape, self.shape),
            ));
        }
        let chunk = numel_of(shape);
        let mut out = vec![E::zero(); chunk];
        if chunk == 0 {
            return Tensor::new(shape.to_vec(), out);
        }
        for block in self.data.chunks_exact(chunk.max(1)) {
            for (o, &v) in out.iter_mut().zip(block) {
                *o += v;
            }
        }
        Tensor { shape: shape.to_vec(), data: out }.checked("sum_to")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Reverse along one axis; axis 0 of a sequence tensor is time reversal.
    pub fn reverse_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "time_reverse",
                format!("axis {} out of range for shape {:?}", axis, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![E::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..len {
                let src = (o * len + i) * inner;
                let dst = (o * len + (len - 1 - i)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Contiguous slab `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {}..{} on axis {} of shape {:?}",
                    start,
                    start + len,
                    axis,
                    self.shape
                ),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let full = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data: out })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts".to_string()))?;
        if axis >= first.rank() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first.shape),
            ));
        }
        let mut total = 0;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible part shapes {:?} vs {:?}", first.shape, p.shape),
                ));
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis];
                let base = o * len * inner;
                out.extend_from_slice(&p.data[base..base + len * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data: out })
    }

    fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, rhs: &Self, f: impl Fn(E, E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    // ----- comparison helpers -------------------------------------------------

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Max elementwise difference normalized by the largest magnitude present.
    pub fn rel_err(&self, other: &Self) -> f64 {
        let scale = self
            .data
            .iter()
            .chain(&other.data)
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        self.max_abs_diff(other) / scale
    }

    pub fn bit_equal(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn matmul_identity() {
        let a = T::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
        let i = T::eye(3);
        assert!(i.matmul(&a).unwrap().bit_equal(&a));
        assert!(a.matmul(&i).unwrap().bit_equal(&a));
    }

    #[test]
    fn matmul_shape_error_names_extents() {
        let a = T::zeros(&[2, 3]);
        let b = T::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn time_reverse_involution() {
        let x = T::new(vec![4, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let twice = x.reverse_axis(0).unwrap().reverse_axis(0).unwrap();
        assert!(twice.bit_equal(&x));
    }

    #[test]
    fn sum_concat_linearity() {
        let a = T::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::new(vec![3, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let cat = T::concat(&[&a, &b], 0).unwrap();
        let lhs = cat.sum_all().unwrap().item().unwrap();
        let rhs = a.sum_all().unwrap().item().unwrap() + b.sum_all().unwrap().item().unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn concat_narrow_roundtrip_axis1() {
        let a = T::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::new(vec![2, 1], vec![9.0, 10.0]).unwrap();
        let cat = T::concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert!(cat.narrow(1, 0, 2).unwrap().bit_equal(&a));
        assert!(cat.narrow(1, 2, 1).unwrap().bit_equal(&b));
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint_shapes() {
        let v = T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let big = v.broadcast_to(&[4, 3]).unwrap();
        assert_eq!(big.shape(), &[4, 3]);
        let back = big.sum_to(&[3]).unwrap();
        assert_eq!(back.data(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn nan_is_an_error_not_a_value() {
        let a = T::new(vec![1], vec![1e308]).unwrap();
        let doubled = a.add(&a);
        assert!(matches!(doubled, Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(T::new(vec![0, 2], vec![]).is_err());
    }
}
