//! Small dense matrices: just enough linear algebra for the linear parts of a
//! slow-fast system (products, LU solves, exponentials, Lyapunov equations).

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn scalar(x: T) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] = out[(i, j)] + a * rhs[(k, j)];
                }
            }
        }
        out
    }

    /// `out = self * v`.
    pub fn mul_vec_into(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&a| a * s).collect())
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> T {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    /// Spectral norm, by power iteration on `MᵀM`.
    pub fn norm_2(&self) -> T {
        if self.rows == 1 && self.cols == 1 {
            return self.data[0].abs();
        }
        let mtm = self.transpose().matmul(self);
        let mut v = vec![T::one(); self.cols];
        let mut lambda = T::zero();
        for _ in 0..200 {
            let w = mtm.mul_vec(&v);
            let nw = crate::real::norm(&w);
            if nw == T::zero() {
                return T::zero();
            }
            v = w.iter().map(|&x| x / nw).collect();
            lambda = nw;
        }
        lambda.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Solves `self * X = rhs` by LU with partial pivoting.
    pub fn solve(&self, rhs: &Self) -> Result<Self> {
        if !self.is_square() || rhs.rows != self.rows {
            return Err(Error::Config("solve: shape mismatch".into()));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut b = rhs.clone();
        let scale = self.norm_1().max(T::min_positive_value());
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap())
                .unwrap();
            if a[(pivot, col)].abs() <= scale * T::epsilon() * T::lit(16.0) {
                return Err(Error::Domain("singular matrix in linear solve".into()));
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                }
                for j in 0..b.cols {
                    b.data.swap(col * b.cols + j, pivot * b.cols + j);
                }
            }
            let d = a[(col, col)];
            for i in col + 1..n {
                let factor = a[(i, col)] / d;
                if factor == T::zero() {
                    continue;
                }
                for j in col..n {
                    a[(i, j)] = a[(i, j)] - factor * a[(col, j)];
                }
                for j in 0..b.cols {
                    b[(i, j)] = b[(i, j)] - factor * b[(col, j)];
                }
            }
        }
        for i in (0..n).rev() {
            for j in 0..b.cols {
                let mut s = b[(i, j)];
                for k in i + 1..n {
                    s = s - a[(i, k)] * b[(k, j)];
                }
                b[(i, j)] = s / a[(i, i)];
            }
        }
        Ok(b)
    }

    /// Matrix exponential by scaling and squaring with a degree-8 diagonal
    /// Padé approximant (relative error well below 1e-12 after scaling to
    /// norm <= 1/2).
    pub fn expm(&self) -> Self {
        assert!(self.is_square(), "expm of non-square matrix");
        if self.rows == 1 {
            return Self::scalar(self.data[0].exp());
        }
        let n = self.rows;
        let norm = self.norm_1();
        let mut squarings = 0u32;
        let half = T::lit(0.5);
        let mut s = T::one();
        while norm * s > half {
            s = s * half;
            squarings += 1;
        }
        let x = self.scale(s);

        // c_k = (2q-k)! q! / ((2q)! k! (q-k)!)
        const Q: usize = 8;
        let mut c = [T::one(); Q + 1];
        for k in 1..=Q {
            let kk = T::from_usize_lossy(k);
            let qk = T::from_usize_lossy(Q - k + 1);
            let two_qk = T::from_usize_lossy(2 * Q - k + 1);
            c[k] = c[k - 1] * qk / (kk * two_qk);
        }
        let id = Self::identity(n);
        let mut num = id.scale(c[0]);
        let mut den = id.scale(c[0]);
        let mut pow = id;
        for (k, &ck) in c.iter().enumerate().skip(1) {
            pow = pow.matmul(&x);
            let term = pow.scale(ck);
            num = num.add(&term);
            den = if k % 2 == 0 { den.add(&term) } else { den.sub(&term) };
        }
        let mut e = den.solve(&num).expect("Pade denominator is nonsingular after scaling");
        for _ in 0..squarings {
            e = e.matmul(&e);
        }
        e
    }

    /// Solves the Lyapunov equation `B S + S Bᵀ = -Q` through its Kronecker
    /// form; adequate for the small fast dimensions handled here.
    pub fn lyapunov(&self, q: &Self) -> Result<Self> {
        let m = self.rows;
        if !self.is_square() || q.rows != m || q.cols != m {
            return Err(Error::Config("lyapunov: shape mismatch".into()));
        }
        if m == 1 {
            let b = self.data[0];
            if b == T::zero() {
                return Err(Error::Domain("lyapunov: singular operator".into()));
            }
            return Ok(Self::scalar(-q.data[0] / (b + b)));
        }
        // vec(S) row-major: index i*m + j.  (B S)_{ij} = sum_k B_ik S_kj,
        // (S Bᵀ)_{ij} = sum_k S_ik B_jk.
        let mm = m * m;
        let mut op = Self::zeros(mm, mm);
        for i in 0..m {
            for j in 0..m {
                let row = i * m + j;
                for k in 0..m {
                    op[(row, k * m + j)] = op[(row, k * m + j)] + self[(i, k)];
                    op[(row, i * m + k)] = op[(row, i * m + k)] + self[(j, k)];
                }
            }
        }
        let rhs = Self::from_vec(mm, 1, q.data.iter().map(|&x| -x).collect());
        let sol = op.solve(&rhs)?;
        let s = Self::from_vec(m, m, sol.data);
        // symmetrize against round-off
        Ok(s.add(&s.transpose()).scale(T::lit(0.5)))
    }

    /// Cholesky factor `L` with `L Lᵀ = self`; `None` if not positive definite.
    pub fn cholesky(&self) -> Option<Self> {
        if !self.is_square() {
            return None;
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= T::zero() || !s.is_finite() {
                        return None;
                    }
                    l[(i, j)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Some(l)
    }

    /// Cholesky factor that tolerates a positive semi-definite input (zero
    /// pivots produce zero columns).
    pub fn cholesky_semi(&self) -> Self {
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        let tiny = self.norm_1() * T::epsilon() * T::lit(64.0);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    l[(i, j)] = if s > tiny { s.sqrt() } else { T::zero() };
                } else if l[(j, j)] > T::zero() {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        l
    }

    /// True when every eigenvalue has negative real part, via Lyapunov's
    /// theorem: `B S + S Bᵀ = -I` has a positive definite solution.
    pub fn is_hurwitz(&self) -> bool {
        if self.rows == 1 {
            return self.data[0] < T::zero();
        }
        match self.lyapunov(&Self::identity(self.rows)) {
            Ok(s) => s.cholesky().is_some(),
            Err(_) => false,
        }
    }

    /// Largest real part of the spectrum, located by bisection on the
    /// Hurwitz test of `self - mu I`.
    pub fn spectral_abscissa(&self) -> T {
        assert!(self.is_square());
        if self.rows == 1 {
            return self.data[0];
        }
        let bound = self.norm_1() + T::one();
        let (mut lo, mut hi) = (-bound, bound);
        let id = Self::identity(self.rows);
        for _ in 0..100 {
            let mid = (lo + hi) * T::lit(0.5);
            if self.sub(&id.scale(mid)).is_hurwitz() {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= T::epsilon() * bound * T::lit(4.0) {
                break;
            }
        }
        (lo + hi) * T::lit(0.5)
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}
