//! Tensor trains: TT-SVD construction, canonical forms and contractions.
//!
//! Core `k` has dims `r_k x n_k x r_{k+1}` and is stored first-index-fastest,
//! so its left unfolding (`r_k n_k x r_{k+1}`) and right unfolding
//! (`r_k x n_k r_{k+1}`) are both the raw buffer read column-major.
//!
//! Sites (core indices) are 1-based in the public API.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_orthonormality_residual, row_orthonormality_residual, svd_sorted, thin_qr};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorTrain {
    cores: Vec<DenseTensor>,
    /// 1-based site of the mixed-canonical center, if known.
    center: Option<usize>,
}

/// Output of [`TensorTrain::tt_svd`].
#[derive(Clone, Debug)]
pub struct TtSvd {
    pub train: TensorTrain,
    /// `sqrt(sum of discarded sigma^2) / ||A||_F`, which bounds the relative
    /// reconstruction error.
    pub relative_error: f64,
    /// True when a rank cap, not the epsilon rule, decided at least one bond.
    pub capped: bool,
}

impl TensorTrain {
    /// Validates boundary ranks and bond agreement. The result has no center.
    pub fn new(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidArgument("tensor train needs at least one core".into()));
        }
        for (k, c) in cores.iter().enumerate() {
            if c.order() != 3 {
                return Err(Error::Shape(format!(
                    "core {} has {} modes, expected 3",
                    k + 1,
                    c.order()
                )));
            }
        }
        let d = cores.len();
        if cores[0].dims()[0] != 1 || cores[d - 1].dims()[2] != 1 {
            return Err(Error::Shape("boundary ranks must be 1".into()));
        }
        for k in 0..d - 1 {
            let (l, r) = (cores[k].dims()[2], cores[k + 1].dims()[0]);
            if l != r {
                return Err(Error::Shape(format!(
                    "core {} right rank {l} does not match core {} left rank {r}",
                    k + 1,
                    k + 2
                )));
            }
        }
        Ok(Self { cores, center: None })
    }

    /// Cores with i.i.d. standard normal entries. `ranks` is the full vector
    /// `r_1..r_{d+1}` with unit boundaries.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], ranks: &[usize], rng: &mut R) -> Result<Self> {
        validate_rank_vector(dims, ranks)?;
        let cores = (0..dims.len())
            .map(|k| {
                let shape = vec![ranks[k], dims[k], ranks[k + 1]];
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                DenseTensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores)
    }

    pub fn zeros(dims: &[usize], ranks: &[usize]) -> Result<Self> {
        validate_rank_vector(dims, ranks)?;
        let cores = (0..dims.len())
            .map(|k| DenseTensor::zeros(vec![ranks[k], dims[k], ranks[k + 1]]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores)
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dims()[1]).collect()
    }

    /// Full rank vector `r_1..r_{d+1}`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.dims()[0]).collect();
        r.push(1);
        r
    }

    pub fn center(&self) -> Option<usize> {
        self.center
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    /// Core at 1-based site `k`.
    pub fn core(&self, k: usize) -> &DenseTensor {
        &self.cores[k - 1]
    }

    /// Replaces the data of core `k` (1-based) keeping its shape. Any canonical
    /// center other than `k` itself is invalidated.
    pub fn set_core_data(&mut self, k: usize, data: &[f64]) -> Result<()> {
        let core = &mut self.cores[k - 1];
        if core.numel() != data.len() {
            return Err(Error::LengthMismatch {
                expected: core.numel(),
                found: data.len(),
            });
        }
        core.data_mut().copy_from_slice(data);
        if self.center != Some(k) {
            self.center = None;
        }
        Ok(())
    }

    /// Number of stored scalars, `sum_k r_k n_k r_{k+1}`.
    /// Marks `k` as the canonical center without checking orthogonality.
    pub(crate) fn set_center_unchecked(&mut self, k: usize) {
        self.center = Some(k);
    }

    pub fn storage(&self) -> usize {
        self.cores.iter().map(DenseTensor::numel).sum()
    }

    /// TT-SVD with per-unfolding truncation threshold
    /// `epsilon ||A||_F / sqrt(d-1)`. `max_ranks`, when given, caps the
    /// interior ranks `r_2..r_d` (length `d-1`) and overrides the epsilon rule.
    /// The returned train is centred on the last site.
    pub fn tt_svd(a: &DenseTensor, epsilon: f64, max_ranks: Option<&[usize]>) -> Result<TtSvd> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
        }
        let dims = a.dims().to_vec();
        let d = dims.len();
        if let Some(caps) = max_ranks {
            if caps.len() != d.saturating_sub(1) {
                return Err(Error::LengthMismatch {
                    expected: d.saturating_sub(1),
                    found: caps.len(),
                });
            }
            if caps.contains(&0) {
                return Err(Error::InvalidArgument("rank caps must be >= 1".into()));
            }
        }
        let norm = a.frobenius_norm();
        let delta = if d > 1 {
            epsilon * norm / ((d - 1) as f64).sqrt()
        } else {
            0.0
        };

        let mut cores = Vec::with_capacity(d);
        let mut discarded_sq = 0.0;
        let mut capped = false;
        let mut rank = 1usize;
        let mut rest = a.data().to_vec();
        for k in 0..d - 1 {
            let rows = rank * dims[k];
            let cols = rest.len() / rows;
            let mat = DMatrix::from_column_slice(rows, cols, &rest);
            let svd = svd_sorted(&mat);
            let sigma = svd.s.as_slice();

            // smallest r whose tail energy fits within delta^2
            let mut keep = sigma.len();
            let mut tail = 0.0;
            while keep > 1 {
                let next = tail + sigma[keep - 1] * sigma[keep - 1];
                if next > delta * delta {
                    break;
                }
                tail = next;
                keep -= 1;
            }
            if let Some(caps) = max_ranks {
                if caps[k] < keep {
                    keep = caps[k];
                    capped = true;
                }
            }
            discarded_sq += sigma[keep..].iter().map(|s| s * s).sum::<f64>();

            let u = svd.u.columns(0, keep).into_owned();
            cores.push(DenseTensor::new(vec![rank, dims[k], keep], u.as_slice().to_vec())?);
            let mut sv = svd.v_t.rows(0, keep).into_owned();
            for (i, mut row) in sv.row_iter_mut().enumerate() {
                row *= sigma[i];
            }
            rest = sv.as_slice().to_vec();
            rank = keep;
        }
        cores.push(DenseTensor::new(vec![rank, dims[d - 1], 1], rest)?);

        let mut train = Self::new(cores)?;
        train.center = Some(d);
        let relative_error = if norm > 0.0 { discarded_sq.sqrt() / norm } else { 0.0 };
        Ok(TtSvd {
            train,
            relative_error,
            capped,
        })
    }

    /// Dense reconstruction: entry `(i_1..i_d)` is the product of slices
    /// `A1(:,i_1,:) ... Ad(:,i_d,:)`.
    pub fn to_full(&self) -> DenseTensor {
        // acc is (prod n_1..n_k) x r_{k+1}, column-major
        let first = &self.cores[0];
        let mut acc = first.data().to_vec();
        let mut rows = first.dims()[1];
        for core in &self.cores[1..] {
            let (r, n, r_next) = (core.dims()[0], core.dims()[1], core.dims()[2]);
            let a = DMatrix::from_column_slice(rows, r, &acc);
            let c = DMatrix::from_column_slice(r, n * r_next, core.data());
            let prod = a * c;
            // prod is rows x (n r_next) and the buffer reads as (rows n) x r_next
            acc = prod.as_slice().to_vec();
            rows *= n;
        }
        DenseTensor::new(self.dims(), acc).expect("reconstruction shape")
    }

    /// `<full(self), full(other)>` by a left-to-right sweep over the two-row
    /// network; ranks may differ.
    pub fn inner_product(&self, other: &TensorTrain) -> Result<f64> {
        self.check_modes(other)?;
        let mut env = vec![1.0];
        for (a, b) in self.cores.iter().zip(&other.cores) {
            env = left_env_step(&env, a, b);
        }
        Ok(env[0])
    }

    /// Frobenius norm. Read from the center core when a center is set,
    /// otherwise from the self inner product.
    pub fn norm(&self) -> f64 {
        match self.center {
            Some(k) => self.cores[k - 1].frobenius_norm(),
            None => self.inner_product(self).map(|s| s.max(0.0).sqrt()).unwrap_or(0.0),
        }
    }

    /// Brings the train to site-`k`-mixed-canonical form: cores before `k`
    /// left-orthogonal, cores after `k` right-orthogonal. Uses `d-1` QRs.
    pub fn canonicalize(&mut self, k: usize) -> Result<()> {
        let d = self.order();
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!("site {k} out of range 1..={d}")));
        }
        self.check_orthogonalizable()?;
        for l in 0..k - 1 {
            self.left_orthogonalize(l);
        }
        for l in (k..d).rev() {
            self.right_orthogonalize(l);
        }
        self.center = Some(k);
        Ok(())
    }

    pub fn canonicalized(&self, k: usize) -> Result<TensorTrain> {
        let mut t = self.clone();
        t.canonicalize(k)?;
        Ok(t)
    }

    /// Moves the center from `k` to `k+1` with one thin QR of core `k`, the
    /// `R` factor absorbed into core `k+1` along its first mode. From the
    /// last site the `R` factor goes into core 1 and the train is swept back to
    /// a clean site-1 form.
    pub fn shift_center_right(&mut self) -> Result<()> {
        let k = self.center.ok_or(Error::CenterUnset)?;
        let d = self.order();
        if d == 1 {
            return Ok(());
        }
        if k < d {
            self.check_bond(k - 1)?;
            self.left_orthogonalize(k - 1);
            self.center = Some(k + 1);
        } else {
            let (q, r) = self.core_left_qr(d - 1);
            self.cores[d - 1].data_mut().copy_from_slice(q.as_slice());
            let scale = r[(0, 0)];
            self.cores[0].data_mut().iter_mut().for_each(|x| *x *= scale);
            self.canonicalize(1)?;
        }
        Ok(())
    }

    pub fn shifted_right(&self) -> Result<TensorTrain> {
        let mut t = self.clone();
        t.shift_center_right()?;
        Ok(t)
    }

    /// `max |Q^T Q - I|` of the left unfolding of core `k` (1-based).
    pub fn left_orthogonality_residual(&self, k: usize) -> f64 {
        let c = &self.cores[k - 1];
        let (r, n, r2) = core_shape(c);
        column_orthonormality_residual(&DMatrix::from_column_slice(r * n, r2, c.data()))
    }

    /// `max |Q Q^T - I|` of the right unfolding of core `k` (1-based).
    pub fn right_orthogonality_residual(&self, k: usize) -> f64 {
        let c = &self.cores[k - 1];
        let (r, n, r2) = core_shape(c);
        row_orthonormality_residual(&DMatrix::from_column_slice(r, n * r2, c.data()))
    }

    /// Worst orthogonality residual over all non-center cores, or `None` when
    /// no center is set.
    pub fn canonical_residual(&self) -> Option<f64> {
        let k = self.center?;
        let left = (1..k).map(|l| self.left_orthogonality_residual(l));
        let right = (k + 1..=self.order()).map(|l| self.right_orthogonality_residual(l));
        Some(left.chain(right).fold(0.0, f64::max))
    }

    fn check_modes(&self, other: &TensorTrain) -> Result<()> {
        if self.order() != other.order() {
            return Err(Error::Shape(format!(
                "trains of order {} and {}",
                self.order(),
                other.order()
            )));
        }
        for (k, (a, b)) in self.cores.iter().zip(&other.cores).enumerate() {
            if a.dims()[1] != b.dims()[1] {
                return Err(Error::ModeMismatch {
                    mode: k + 1,
                    expected: a.dims()[1],
                    found: b.dims()[1],
                });
            }
        }
        Ok(())
    }

    /// Every bond must satisfy `r_{k+1} <= r_k n_k` and
    /// `r_{k+1} <= n_{k+1} r_{k+2}` for fixed-rank QR sweeps to exist.
    fn check_orthogonalizable(&self) -> Result<()> {
        (0..self.order() - 1).try_for_each(|k| self.check_bond(k))
    }

    fn check_bond(&self, k: usize) -> Result<()> {
        let (r, n, r2) = core_shape(&self.cores[k]);
        let (_, n_next, r3) = core_shape(&self.cores[k + 1]);
        let bound = (r * n).min(n_next * r3);
        if r2 > bound {
            return Err(Error::RankBound {
                bond: k + 2,
                rank: r2,
                bound,
            });
        }
        Ok(())
    }

    fn core_left_qr(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let c = &self.cores[k];
        let (r, n, r2) = core_shape(c);
        thin_qr(&DMatrix::from_column_slice(r * n, r2, c.data()))
    }

    /// core k := Q, core k+1 := core k+1 x_1 R (0-based k).
    fn left_orthogonalize(&mut self, k: usize) {
        let (q, r) = self.core_left_qr(k);
        self.cores[k].data_mut().copy_from_slice(q.as_slice());
        let next = &mut self.cores[k + 1];
        let (r_next, n, r3) = core_shape(next);
        let m = DMatrix::from_column_slice(r_next, n * r3, next.data());
        let updated = r * m;
        next.data_mut().copy_from_slice(updated.as_slice());
    }

    /// core k := Q^T from the QR of its transposed right unfolding,
    /// core k-1 := core k-1 x_3 R^T (0-based k >= 1).
    fn right_orthogonalize(&mut self, k: usize) {
        let c = &self.cores[k];
        let (r, n, r2) = core_shape(c);
        let m = DMatrix::from_column_slice(r, n * r2, c.data());
        let (q, rr) = thin_qr(&m.transpose());
        let qt = q.transpose();
        self.cores[k].data_mut().copy_from_slice(qt.as_slice());
        let prev = &mut self.cores[k - 1];
        let (rp, np, _) = core_shape(prev);
        let pm = DMatrix::from_column_slice(rp * np, r, prev.data());
        let updated = pm * rr.transpose();
        prev.data_mut().copy_from_slice(updated.as_slice());
    }
}

/// Checks a full rank vector `r_1..r_{d+1}` against mode dims.
pub fn validate_rank_vector(dims: &[usize], ranks: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("need at least one mode".into()));
    }
    if ranks.len() != dims.len() + 1 {
        return Err(Error::LengthMismatch {
            expected: dims.len() + 1,
            found: ranks.len(),
        });
    }
    if ranks[0] != 1 || ranks[dims.len()] != 1 {
        return Err(Error::InvalidArgument("boundary ranks must be 1".into()));
    }
    if ranks.contains(&0) || dims.contains(&0) {
        return Err(Error::InvalidArgument("ranks and dims must be >= 1".into()));
    }
    Ok(())
}

pub(crate) fn core_shape(c: &DenseTensor) -> (usize, usize, usize) {
    let d = c.dims();
    (d[0], d[1], d[2])
}

/// One step of the left environment of a two-train network:
/// `E'[a',c'] = sum_{a,c,i} E[a,c] A[a,i,a'] B[c,i,c']`, with `E` stored
/// column-major as `r_A x r_B`.
pub(crate) fn left_env_step(env: &[f64], a: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
    let (ra, n, ra2) = core_shape(a);
    let (rb, _, rb2) = core_shape(b);
    let (ad, bd) = (a.data(), b.data());
    // T[a, i, c'] = sum_c E[a,c] B[c,i,c']
    let mut t = vec![0.0; ra * n * rb2];
    for c2 in 0..rb2 {
        for i in 0..n {
            let dst = &mut t[ra * (i + n * c2)..ra * (i + n * c2 + 1)];
            for c in 0..rb {
                let bv = bd[c + rb * (i + n * c2)];
                if bv == 0.0 {
                    continue;
                }
                for (x, e) in dst.iter_mut().zip(&env[ra * c..ra * (c + 1)]) {
                    *x += e * bv;
                }
            }
        }
    }
    // E'[a', c'] = sum_{a,i} A[a,i,a'] T[a,i,c']
    let len = ra * n;
    let mut out = vec![0.0; ra2 * rb2];
    for c2 in 0..rb2 {
        let tcol = &t[len * c2..len * (c2 + 1)];
        for a2 in 0..ra2 {
            out[a2 + ra2 * c2] = crate::tensor::dot(&ad[len * a2..len * (a2 + 1)], tcol);
        }
    }
    out
}

/// One step of the right environment:
/// `E[a,c] = sum_{a',c',i} A[a,i,a'] B[c,i,c'] E'[a',c']`.
pub(crate) fn right_env_step(env: &[f64], a: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
    let (ra, n, ra2) = core_shape(a);
    let (rb, _, rb2) = core_shape(b);
    let (ad, bd) = (a.data(), b.data());
    // T[c, i, a'] = sum_{c'} B[c,i,c'] E'[a',c']
    let mut t = vec![0.0; rb * n * ra2];
    for a2 in 0..ra2 {
        for c2 in 0..rb2 {
            let e = env[a2 + ra2 * c2];
            if e == 0.0 {
                continue;
            }
            let src = &bd[rb * n * c2..rb * n * (c2 + 1)];
            let dst = &mut t[rb * n * a2..rb * n * (a2 + 1)];
            for (x, s) in dst.iter_mut().zip(src) {
                *x += e * s;
            }
        }
    }
    // E[a, c] = sum_{i,a'} A[a,i,a'] T[c,i,a']
    let mut out = vec![0.0; ra * rb];
    for a2 in 0..ra2 {
        for i in 0..n {
            let acol = &ad[ra * (i + n * a2)..ra * (i + n * a2 + 1)];
            let tcol = &t[rb * (i + n * a2)..rb * (i + n * a2 + 1)];
            for (c, &tv) in tcol.iter().enumerate() {
                if tv == 0.0 {
                    continue;
                }
                for (x, av) in out[ra * c..ra * (c + 1)].iter_mut().zip(acol) {
                    *x += av * tv;
                }
            }
        }
    }
    out
}

/// Contracts the two-train network with core `k` (0-based) of `weight`
/// removed, given the left environment `r^W_k x r^X_k` and right environment
/// `r^W_{k+1} x r^X_{k+1}`. The result is shaped like the removed weight core
/// and vectorized first-index-fastest.
pub(crate) fn open_core(left: &[f64], sample_core: &DenseTensor, right: &[f64], rw: usize, rw2: usize) -> Vec<f64> {
    let (rx, n, rx2) = core_shape(sample_core);
    let xd = sample_core.data();
    // T[a, i, c'] = sum_c L[a,c] X[c,i,c']
    let mut t = vec![0.0; rw * n * rx2];
    for c2 in 0..rx2 {
        for i in 0..n {
            let dst = &mut t[rw * (i + n * c2)..rw * (i + n * c2 + 1)];
            for c in 0..rx {
                let xv = xd[c + rx * (i + n * c2)];
                if xv == 0.0 {
                    continue;
                }
                for (o, l) in dst.iter_mut().zip(&left[rw * c..rw * (c + 1)]) {
                    *o += l * xv;
                }
            }
        }
    }
    // out[a, i, b] = sum_{c'} T[a,i,c'] R[b,c']
    let len = rw * n;
    let mut out = vec![0.0; len * rw2];
    for b in 0..rw2 {
        let dst = &mut out[len * b..len * (b + 1)];
        for c2 in 0..rx2 {
            let rv = right[b + rw2 * c2];
            if rv == 0.0 {
                continue;
            }
            for (o, s) in dst.iter_mut().zip(&t[len * c2..len * (c2 + 1)]) {
                *o += rv * s;
            }
        }
    }
    out
}

/// Left environments `L_1..L_d` (0-based: `envs[k]` covers cores `< k`).
pub(crate) fn left_environments(weight: &TensorTrain, sample: &TensorTrain, upto: usize) -> Vec<Vec<f64>> {
    let mut envs = Vec::with_capacity(upto + 1);
    envs.push(vec![1.0]);
    for k in 0..upto {
        let next = left_env_step(&envs[k], &weight.cores[k], &sample.cores[k]);
        envs.push(next);
    }
    envs
}

/// Right environments: `envs[k]` covers cores `> k` (0-based), `envs[d-1]` is
/// the unit scalar.
pub(crate) fn right_environments(weight: &TensorTrain, sample: &TensorTrain, downto: usize) -> Vec<Vec<f64>> {
    let d = weight.order();
    let mut envs = vec![Vec::new(); d];
    envs[d - 1] = vec![1.0];
    for k in (downto..d - 1).rev() {
        envs[k] = right_env_step(&envs[k + 1], &weight.cores[k + 1], &sample.cores[k + 1]);
    }
    envs
}
