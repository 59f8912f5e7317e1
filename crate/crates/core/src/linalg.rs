//! Small dense matrix utilities: row-major matrices, a cyclic Jacobi
//! eigensolver for symmetric matrices, and power-iteration spectral norms.
//!
//! Everything here is plain `f64` with deterministic iteration order, so
//! results are bit-reproducible across runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`, cache-friendly i-k-j loop order.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    dst[j] += a * src[j];
                }
            }
        }
        out
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn shape");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    dst[j] += a * src[j];
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt shape");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let b_row = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += a_row[k] * b_row[k];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut s = 0.0;
            for k in 0..self.cols {
                s += row[k] * v[k];
            }
            out[i] = s;
        }
        out
    }

    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t shape");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let vi = v[i];
            for k in 0..self.cols {
                out[k] += row[k] * vi;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (a, b) in m.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        m
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (a, b) in m.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        m
    }

    pub fn add_scaled(&mut self, other: &Mat, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn col_norm(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self[(i, j)] * self[(i, j)]).sum::<f64>().sqrt()
    }

    /// Subtract the mean of each column.
    pub fn center_columns(&self) -> Mat {
        let mut out = self.clone();
        for j in 0..self.cols {
            let mean = (0..self.rows).map(|i| self[(i, j)]).sum::<f64>() / self.rows as f64;
            for i in 0..self.rows {
                out[(i, j)] -= mean;
            }
        }
        out
    }

    /// Append a column on the right.
    pub fn hstack_col(&self, v: &[f64]) -> Mat {
        assert!(self.rows == v.len() || self.is_empty());
        let rows = if self.is_empty() { v.len() } else { self.rows };
        let mut out = Mat::zeros(rows, self.cols + 1);
        for i in 0..rows {
            for j in 0..self.cols {
                out[(i, j)] = self[(i, j)];
            }
            out[(i, self.cols)] = v[i];
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition `a = v diag(w) v^T` of a symmetric matrix by cyclic
/// Jacobi rotations. Eigenvalues are returned in descending order.
///
/// Exact to machine precision for the modest sizes used here; serves as the
/// trusted route wherever a spectral quantity is cross-checked.
pub fn jacobi_eigh(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.rows != a.cols {
        return Err(CoreError::DimensionMismatch(format!(
            "jacobi_eigh needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    if n == 0 {
        return Ok((vec![], Mat::zeros(0, 0)));
    }
    let mut m = a.clone();
    // Eigenvectors kept transposed (row j = eigenvector j) so rotations act
    // on contiguous rows.
    let mut vt = Mat::identity(n);
    let scale = a.frob_norm().max(f64::MIN_POSITIVE);

    // Rotate contiguous row pairs (p, q), p < q, of a row-major buffer.
    fn rotate_rows(data: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
        let (head, tail) = data.split_at_mut(q * n);
        let rp = &mut head[p * n..p * n + n];
        let rq = &mut tail[..n];
        for k in 0..n {
            let a = rp[k];
            let b = rq[k];
            rp[k] = c * a - s * b;
            rq[k] = s * a + c * b;
        }
    }

    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // m <- J^T m J: rotate row pair then column pair.
                rotate_rows(&mut m.data, n, p, q, c, s);
                for k in 0..n {
                    let a = m.data[k * n + p];
                    let b = m.data[k * n + q];
                    m.data[k * n + p] = c * a - s * b;
                    m.data[k * n + q] = s * a + c * b;
                }
                rotate_rows(&mut vt.data, n, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let w: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vs = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vs[(i, new_j)] = vt[(old_j, i)];
        }
    }
    Ok((w, vs))
}

/// Largest singular value of a dense matrix via Jacobi on the smaller Gram
/// matrix. Exact reference route.
pub fn spectral_norm_dense(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let gram = if a.rows <= a.cols { a.matmul_nt(a) } else { a.matmul_tn(a) };
    let (w, _) = jacobi_eigh(&gram).expect("square gram");
    w.first().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Top singular triple `(sigma, u, v)` of a dense matrix, via the Gram
/// eigendecomposition. Used to differentiate spectral normalization.
pub fn top_singular_triple(a: &Mat) -> (f64, Vec<f64>, Vec<f64>) {
    assert!(!a.is_empty());
    let (sigma, u, v);
    if a.rows <= a.cols {
        let gram = a.matmul_nt(a);
        let (w, vecs) = jacobi_eigh(&gram).expect("square gram");
        sigma = w[0].max(0.0).sqrt();
        u = vecs.col(0);
        let mut vv = a.matvec_t(&u);
        let n = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in &mut vv {
                *x /= n;
            }
        }
        v = vv;
    } else {
        let gram = a.matmul_tn(a);
        let (w, vecs) = jacobi_eigh(&gram).expect("square gram");
        sigma = w[0].max(0.0).sqrt();
        v = vecs.col(0);
        let mut uu = a.matvec(&v);
        let n = uu.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in &mut uu {
                *x /= n;
            }
        }
        u = uu;
    }
    (sigma, u, v)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of a linear operator given only `apply` and its
/// adjoint, by power iteration on `A^T A`.
///
/// The start vector comes from a fixed seed, so the result is deterministic.
/// Rayleigh quotients are monotone nondecreasing; iteration stops early once
/// their relative increment drops below `tol`. A zero operator returns 0.
pub fn spectral_norm_power_iter(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    input_dim: usize,
    iters: usize,
    tol: f64,
) -> f64 {
    assert!(iters >= 1, "power iteration needs at least one step");
    if input_dim == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9a11);
    let mut v: Vec<f64> = (0..input_dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let nv = norm2(&v);
    if nv == 0.0 {
        v[0] = 1.0;
    } else {
        for x in &mut v {
            *x /= nv;
        }
    }
    let mut sigma = 0.0f64;
    for _ in 0..iters {
        let av = apply(&v);
        let s = norm2(&av);
        if s == 0.0 {
            return 0.0;
        }
        let mut w = apply_t(&av);
        let nw = norm2(&w);
        if nw == 0.0 {
            return s;
        }
        for x in &mut w {
            *x /= nw;
        }
        v = w;
        let prev = sigma;
        sigma = s;
        if (sigma - prev).abs() <= tol * sigma.abs() && prev > 0.0 {
            break;
        }
    }
    // One more apply so the reported value corresponds to the final vector.
    norm2(&apply(&v))
}

/// Solve a small dense symmetric positive(-ish) system in place by Gaussian
/// elimination with partial pivoting. Returns `None` when singular.
pub fn solve_dense(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(a.rows, a.cols);
    assert_eq!(a.rows, b.len());
    let n = a.rows;
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[(col, col)].abs();
        for r in (col + 1)..n {
            if m[(r, col)].abs() > best {
                best = m[(r, col)].abs();
                piv = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let t = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = t;
            }
            rhs.swap(col, piv);
        }
        let d = m[(col, col)];
        for r in (col + 1)..n {
            let f = m[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m[(col, j)];
                m[(r, j)] -= f * v;
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = rhs[col];
        for j in (col + 1)..n {
            s -= m[(col, j)] * x[j];
        }
        x[col] = s / m[(col, col)];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}
