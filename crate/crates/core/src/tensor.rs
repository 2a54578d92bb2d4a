//! Dense d-way tensors stored first-index-fastest.
//!
//! Element `(i_1, ..., i_d)` (0-based) lives at flat offset
//! `i_1 + n_1 i_2 + n_1 n_2 i_3 + ...`, which is the column-major layout used by
//! MATLAB-style `reshape`. Every unfolding used by the tensor-train code relies
//! on this: an `r n x m` unfolding of a buffer is the same buffer read as a
//! column-major matrix.
//!
//! Modes are 1-indexed in the public API.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn checked_numel(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("tensor needs at least one mode".into()));
    }
    if let Some(pos) = dims.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("mode {} has zero length", pos + 1)));
    }
    Ok(dims.iter().product())
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        if numel != data.len() {
            return Err(Error::ElementCount {
                expected: numel,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; numel],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index (0-based), in
    /// storage order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f(&idx));
            for (i, n) in idx.iter_mut().zip(&dims) {
                *i += 1;
                if *i < *n {
                    break;
                }
                *i = 0;
            }
        }
        Ok(Self { dims, data })
    }

    pub fn from_vector(v: Vec<f64>) -> Result<Self> {
        Self::new(vec![v.len()], v)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Flat offset of a 0-based multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (&i, &n) in index.iter().zip(&self.dims) {
            debug_assert!(i < n);
            off += i * stride;
            stride *= n;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// k-mode product `A x_k U` with `U` of shape `p x n_k`; `mode` is 1-based.
    pub fn mode_product(&self, u: &DMatrix<f64>, mode: usize) -> Result<DenseTensor> {
        let m = self.mode_index(mode)?;
        let nk = self.dims[m];
        if u.ncols() != nk {
            return Err(Error::ModeMismatch {
                mode,
                expected: nk,
                found: u.ncols(),
            });
        }
        let p = u.nrows();
        let left: usize = self.dims[..m].iter().product();
        let right: usize = self.dims[m + 1..].iter().product();
        let mut out = vec![0.0; left * p * right];
        for c in 0..right {
            let src = &self.data[c * left * nk..(c + 1) * left * nk];
            let dst = &mut out[c * left * p..(c + 1) * left * p];
            for i in 0..nk {
                let slab = &src[i * left..(i + 1) * left];
                for j in 0..p {
                    let coef = u[(j, i)];
                    if coef == 0.0 {
                        continue;
                    }
                    for (d, s) in dst[j * left..(j + 1) * left].iter_mut().zip(slab) {
                        *d += coef * s;
                    }
                }
            }
        }
        let mut dims = self.dims.clone();
        dims[m] = p;
        Ok(DenseTensor { dims, data: out })
    }

    /// Contracts mode `mode` (1-based) with a vector, i.e. the k-mode product
    /// with the `1 x n_k` row vector `v^T`. The contracted mode keeps length 1.
    pub fn mode_product_vec(&self, v: &[f64], mode: usize) -> Result<DenseTensor> {
        let row = DMatrix::from_row_slice(1, v.len(), v);
        self.mode_product(&row, mode)
    }

    pub fn reshape(&self, new_dims: &[usize]) -> Result<DenseTensor> {
        let numel = checked_numel(new_dims)?;
        if numel != self.data.len() {
            return Err(Error::ElementCount {
                expected: self.data.len(),
                found: numel,
            });
        }
        Ok(DenseTensor {
            dims: new_dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn vectorize(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn inner_product(&self, other: &DenseTensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "inner product of {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Outer product `a^(1) o a^(2) o ... o a^(d)`.
    pub fn rank1_from_vectors(vectors: &[Vec<f64>]) -> Result<DenseTensor> {
        if vectors.is_empty() {
            return Err(Error::InvalidArgument("rank-1 tensor needs at least one factor".into()));
        }
        let dims: Vec<usize> = vectors.iter().map(Vec::len).collect();
        checked_numel(&dims)?;
        let mut data = vectors[0].clone();
        for v in &vectors[1..] {
            let mut next = Vec::with_capacity(data.len() * v.len());
            for &x in v {
                next.extend(data.iter().map(|d| d * x));
            }
            data = next;
        }
        Ok(DenseTensor { dims, data })
    }

    /// Mode-k unfolding (`n_k x prod_{l != k} n_l`), 1-based mode.
    pub fn unfold(&self, mode: usize) -> Result<DMatrix<f64>> {
        let m = self.mode_index(mode)?;
        let nk = self.dims[m];
        let left: usize = self.dims[..m].iter().product();
        let right: usize = self.dims[m + 1..].iter().product();
        let mut out = DMatrix::zeros(nk, left * right);
        for c in 0..right {
            for i in 0..nk {
                for a in 0..left {
                    out[(i, a + left * c)] = self.data[a + left * (i + nk * c)];
                }
            }
        }
        Ok(out)
    }

    fn mode_index(&self, mode: usize) -> Result<usize> {
        if mode == 0 || mode > self.dims.len() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range 1..={}",
                self.dims.len()
            )));
        }
        Ok(mode - 1)
    }
}

/// Best rank-1 approximation `lambda * u^(1) o ... o u^(d)` by higher-order
/// power iteration, started from the leading left singular vectors of the mode
/// unfoldings. Returns `lambda` and unit-norm factors.
pub fn best_rank1(a: &DenseTensor, max_iters: usize, tol: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let d = a.order();
    let mut factors = Vec::with_capacity(d);
    for mode in 1..=d {
        let unf = a.unfold(mode)?;
        let svd = unf.svd(true, false);
        let u = svd.u.as_ref().expect("svd requested u");
        let (best, _) =
            svd.singular_values.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc },
            );
        factors.push(u.column(best).iter().copied().collect::<Vec<f64>>());
    }
    let mut lambda = contract_all_but(a, &factors, None)?[0];
    for _ in 0..max_iters {
        for k in 0..d {
            let v = contract_all_but(a, &factors, Some(k))?;
            let nrm = dot(&v, &v).sqrt();
            if nrm == 0.0 {
                return Ok((0.0, factors));
            }
            factors[k] = v.iter().map(|x| x / nrm).collect();
        }
        let next = contract_all_but(a, &factors, None)?[0];
        let stalled = (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        if stalled {
            break;
        }
    }
    Ok((lambda, factors))
}

/// Contracts every mode except `keep` (0-based) with the matching vector.
/// With `keep = None` the result is a single scalar.
pub(crate) fn contract_all_but(a: &DenseTensor, vectors: &[Vec<f64>], keep: Option<usize>) -> Result<Vec<f64>> {
    let mut t = a.clone();
    for (k, v) in vectors.iter().enumerate() {
        if Some(k) != keep {
            t = t.mode_product_vec(v, k + 1)?;
        }
    }
    Ok(t.into_data())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat2(rows: &[&[f64]]) -> DenseTensor {
        // row-major literal to first-index-fastest storage
        let (r, c) = (rows.len(), rows[0].len());
        DenseTensor::from_fn(vec![r, c], |ix| rows[ix[0]][ix[1]]).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>) -> DenseTensor {
        DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Direct transcription of the k-mode product summation.
    fn mode_product_oracle(a: &DenseTensor, u: &DMatrix<f64>, mode: usize) -> DenseTensor {
        let m = mode - 1;
        let mut dims = a.dims().to_vec();
        dims[m] = u.nrows();
        DenseTensor::from_fn(dims, |ix| {
            let mut src = ix.to_vec();
            (0..a.dims()[m])
                .map(|i| {
                    src[m] = i;
                    u[(ix[m], i)] * a.get(&src)
                })
                .sum()
        })
        .unwrap()
    }

    #[test]
    fn mode_product_identity_is_noop() {
        let a = mat2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = a.mode_product(&DMatrix::identity(2, 2), 1).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn mode_product_row_of_ones_sums_columns() {
        let a = mat2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let u = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let out = a.mode_product(&u, 1).unwrap();
        let oracle = mode_product_oracle(&a, &u, 1);
        assert_eq!(out.dims(), &[1, 2]);
        assert_eq!(out.data(), oracle.data());
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, vec![2, 3, 4]);
        let out = a.mode_product(&DMatrix::zeros(1, 3), 2).unwrap();
        assert_eq!(out.dims(), &[2, 1, 4]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mode_product_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, vec![3, 4, 2, 5]);
        for mode in 1..=4 {
            let n = a.dims()[mode - 1];
            let u = DMatrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0));
            let got = a.mode_product(&u, mode).unwrap();
            let want = mode_product_oracle(&a, &u, mode);
            assert_eq!(got.dims(), want.dims());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode_product_dimension_error_names_mode() {
        let a = DenseTensor::zeros(vec![2, 3]).unwrap();
        let err = a.mode_product(&DMatrix::zeros(2, 2), 2).unwrap_err();
        match err {
            Error::ModeMismatch { mode, expected, found } => assert_eq!((mode, expected, found), (2, 3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reshape_keeps_buffer() {
        let a = DenseTensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = a.reshape(&[3, 2]).unwrap();
        assert_eq!(b.data(), a.data());
        // flat offset 1 is (2,1) in 1-based terms for both shapes
        assert_eq!(a.get(&[1, 0]), b.get(&[1, 0]));
        let v = DenseTensor::new(vec![6], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(v.reshape(&[2, 3]).unwrap().reshape(&[6]).unwrap(), v);
        assert!(matches!(a.reshape(&[4, 2]), Err(Error::ElementCount { .. })));
    }

    #[test]
    fn reshape_and_vectorize_follow_offset_formula() {
        let a = DenseTensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(a.reshape(&[4]).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        // [[1,3],[2,4]] stored column-major
        let m = mat2(&[&[1.0, 3.0], &[2.0, 4.0]]);
        assert_eq!(m.vectorize(), vec![1.0, 2.0, 3.0, 4.0]);
        let one = DenseTensor::new(vec![1, 1], vec![5.0]).unwrap();
        assert_eq!(one.vectorize().len(), 1);
    }

    #[test]
    fn inner_products_and_norms() {
        let a = DenseTensor::from_vector(vec![1.0, 2.0]).unwrap();
        let b = DenseTensor::from_vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.inner_product(&b).unwrap(), 11.0);
        let z = DenseTensor::zeros(vec![2]).unwrap();
        assert_eq!(a.inner_product(&z).unwrap(), 0.0);
        assert_eq!(z.frobenius_norm(), 0.0);
        let one_hot = DenseTensor::from_fn(vec![2, 3], |ix| (ix == [1, 2]) as u8 as f64).unwrap();
        assert_eq!(one_hot.frobenius_norm(), 1.0);
        assert_eq!(mat2(&[&[3.0, 4.0]]).frobenius_norm(), 5.0);
        let c = DenseTensor::zeros(vec![2, 1]).unwrap();
        assert!(a.inner_product(&c).is_err());
    }

    #[test]
    fn rank1_outer_products() {
        let t = DenseTensor::rank1_from_vectors(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t, mat2(&[&[3.0, 4.0], &[6.0, 8.0]]));
        let v = DenseTensor::rank1_from_vectors(&[vec![1.0, -2.0, 5.0]]).unwrap();
        assert_eq!(v.data(), &[1.0, -2.0, 5.0]);
        let z = DenseTensor::rank1_from_vectors(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![7.0]]).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(DenseTensor::rank1_from_vectors(&[]).is_err());
    }

    #[test]
    fn best_rank1_recovers_rank1_tensor() {
        let a =
            DenseTensor::rank1_from_vectors(&[vec![1.0, 2.0, 2.0], vec![0.6, 0.8], vec![3.0, 0.0, 4.0, 0.0]]).unwrap();
        let (lambda, f) = best_rank1(&a, 100, 1e-8).unwrap();
        assert!((lambda.abs() - a.frobenius_norm()).abs() < 1e-10);
        let mut rebuilt = DenseTensor::rank1_from_vectors(&f).unwrap();
        rebuilt.data_mut().iter_mut().for_each(|x| *x *= lambda);
        for (x, y) in rebuilt.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn best_rank1_of_matrix_is_top_singular_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, vec![6, 4]);
        let (lambda, _) = best_rank1(&a, 100, 1e-12).unwrap();
        let m = DMatrix::from_column_slice(6, 4, a.data());
        let top = m.singular_values().max();
        assert!((lambda.abs() - top).abs() < 1e-8 * top);
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..5)
    }

    proptest! {
        #[test]
        fn identity_mode_product_any_mode(dims in dims_strategy(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, dims.clone());
            for mode in 1..=dims.len() {
                let n = dims[mode - 1];
                let out = a.mode_product(&DMatrix::identity(n, n), mode).unwrap();
                prop_assert_eq!(&out, &a);
            }
        }

        #[test]
        fn inner_product_equals_vectorized_dot(dims in dims_strategy(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, dims.clone());
            let b = random_tensor(&mut rng, dims.clone());
            let va = DenseTensor::from_vector(a.vectorize()).unwrap();
            let vb = DenseTensor::from_vector(b.vectorize()).unwrap();
            prop_assert_eq!(a.inner_product(&b).unwrap(), va.inner_product(&vb).unwrap());
            let flat: usize = dims.iter().product();
            let r = a.reshape(&[flat]).unwrap();
            prop_assert_eq!(r.frobenius_norm(), a.frobenius_norm());
        }

        #[test]
        fn rank1_contraction_factorizes(dims in dims_strategy(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = dims.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let w: Vec<Vec<f64>> = dims.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let t = DenseTensor::rank1_from_vectors(&a).unwrap();
            let got = contract_all_but(&t, &w, None).unwrap()[0];
            let want: f64 = a.iter().zip(&w).map(|(x, y)| dot(x, y)).product();
            // relative to the product of factor norms, which bounds both sides
            let scale: f64 = a.iter().zip(&w).map(|(x, y)| (dot(x, x) * dot(y, y)).sqrt()).product();
            prop_assert!((got - want).abs() <= 1e-12 * scale);
        }
    }
}
