//! Dense row-major tensors and the handful of kernels the transformer needs.
//!
//! Every reduction accumulates sequentially in index order, so a given row of
//! a matrix product is bit-identical no matter how many other rows are
//! computed alongside it. The KV-cache equivalence guarantees rest on this.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type: `f32` at runtime, `f64` for verification.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| T::from_f64(x)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<T> {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Vertical concatenation of two matrices with equal column counts.
    pub fn concat_rows(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cols() != other.cols() {
            return Err(Error::Dimension(format!(
                "concat_rows: {} vs {} columns",
                self.cols(),
                other.cols()
            )));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: vec![self.rows() + other.rows(), self.cols()],
            data,
        })
    }
}

fn check_2d<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a[m×k] · b[k×n]`, each output accumulated over `k` in order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d(a, "matmul lhs")?;
    let (k2, n) = check_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dims {k} and {k2} differ"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let mut mx = T::neg_infinity();
    for &v in x {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Softmax along the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = Tensor::zeros(&x.shape);
    for i in 0..x.rows() {
        softmax_row(
            &x.data[i * c..(i + 1) * c],
            &mut out.data[i * c..(i + 1) * c],
        );
    }
    out
}

/// `log Σ exp(x)` of one row.
pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in x {
        if v > mx {
            mx = v;
        }
    }
    if mx == T::neg_infinity() {
        return mx;
    }
    let mut sum = T::zero();
    for &v in x {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_product() {
        let i2 = Tensor::<f64>::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Tensor::<f64>::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f64>::from_f64_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = Tensor::<f64>::from_f64_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let want = Tensor::<f64>::from_f64_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), want);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::new(vec![3, 4], a.clone()).unwrap();
        let tb = Tensor::new(vec![4, 5], b.clone()).unwrap();
        let got = matmul(&ta, &tb).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 5 + j];
                }
                assert!((got.get2(i, j) - s).abs() < 1e-12);
            }
        }
        // transposed variants agree with explicit transposes
        let bt: Vec<f64> = (0..5)
            .flat_map(|j| (0..4).map(move |k| (j, k)))
            .map(|(j, k)| b[k * 5 + j])
            .collect();
        let tbt = Tensor::new(vec![5, 4], bt).unwrap();
        let nt = matmul_nt(&ta, &tbt);
        let at: Vec<f64> = (0..4)
            .flat_map(|k| (0..3).map(move |i| (k, i)))
            .map(|(k, i)| a[i * 4 + k])
            .collect();
        let tat = Tensor::new(vec![4, 3], at).unwrap();
        let tn = matmul_tn(&tat, &tb);
        for (x, y) in got.data().iter().zip(nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in got.data().iter().zip(tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f64>::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let s = softmax(&Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, p) in s.data().iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn row_results_do_not_depend_on_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f32> = (0..7 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::new(vec![7, 6], a).unwrap();
        let tw = Tensor::new(vec![6, 5], w).unwrap();
        let full = matmul(&ta, &tw).unwrap();
        let part = matmul(&ta.slice_rows(3, 7), &tw).unwrap();
        assert_eq!(full.slice_rows(3, 7), part);
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let n = xs.len();
            let s = softmax(&Tensor::new(vec![n], xs).unwrap());
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-9);
            proptest::prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }
    }
}
