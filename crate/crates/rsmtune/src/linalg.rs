//! Dense matrix kernels sized for small experimental designs.
//!
//! Everything here operates on row-major `Mat` values of at most a few
//! hundred rows and a few dozen columns, so plain O(n^3) algorithms are
//! used throughout: Cholesky for well-conditioned normal equations,
//! Householder QR as the fallback for irregular designs, and cyclic
//! Jacobi rotations for symmetric eigendecomposition.

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// X^T X, exploiting symmetry.
    pub fn gram(&self) -> Mat {
        let m = self.cols;
        let mut g = Mat::zeros(m, m);
        for j in 0..m {
            for k in j..m {
                let mut acc = 0.0;
                for i in 0..self.rows {
                    acc += self.get(i, j) * self.get(i, k);
                }
                g.set(j, k, acc);
                g.set(k, j, acc);
            }
        }
        g
    }

    /// X^T y.
    pub fn t_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.get(i, j) * y[i];
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.get(i, j) * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub struct Cholesky {
    l: Mat,
}

/// Factors `a = L L^T`. Fails with the index of the first non-positive
/// pivot when `a` is not numerically positive definite.
pub fn cholesky(a: &Mat) -> Result<Cholesky, usize> {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j);
        }
        let dj = d.sqrt();
        l.set(j, j, dj);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / dj);
        }
    }
    Ok(Cholesky { l })
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        // forward: L z = b
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l.get(i, k) * z[k];
            }
            z[i] = acc / self.l.get(i, i);
        }
        // backward: L^T x = z
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in (i + 1)..n {
                acc -= self.l.get(k, i) * x[k];
            }
            x[i] = acc / self.l.get(i, i);
        }
        x
    }

    /// A^{-1}, column by column.
    pub fn inverse(&self) -> Mat {
        let n = self.dim();
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }

    /// ln det A = 2 Σ ln L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.l.get(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Crude condition estimate: (max L_ii / min L_ii)^2. Exact for
    /// diagonal matrices, adequate as a fallback trigger.
    pub fn condition_estimate(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..self.dim() {
            let d = self.l.get(i, i);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let r = hi / lo;
        r * r
    }
}

/// Householder QR of a tall matrix (rows >= cols), keeping the
/// reflectors for applying Q^T and the upper-triangular R.
pub struct Qr {
    /// Packed reflectors; column j of `qr` below the diagonal.
    qr: Mat,
    /// Diagonal of R (the packed matrix keeps reflector heads there).
    r_diag: Vec<f64>,
}

pub fn householder_qr(x: &Mat) -> Qr {
    let (n, m) = (x.rows(), x.cols());
    assert!(n >= m, "householder_qr needs rows >= cols");
    let mut qr = x.clone();
    let mut r_diag = vec![0.0; m];
    for j in 0..m {
        let mut nrm = 0.0f64;
        for i in j..n {
            nrm = nrm.hypot(qr.get(i, j));
        }
        if nrm == 0.0 {
            r_diag[j] = 0.0;
            continue;
        }
        let alpha = if qr.get(j, j) < 0.0 { nrm } else { -nrm };
        for i in j..n {
            qr.set(i, j, qr.get(i, j) / -alpha);
        }
        qr.set(j, j, qr.get(j, j) + 1.0);
        for k in (j + 1)..m {
            let mut s = 0.0;
            for i in j..n {
                s += qr.get(i, j) * qr.get(i, k);
            }
            s = -s / qr.get(j, j);
            for i in j..n {
                qr.set(i, k, qr.get(i, k) + s * qr.get(i, j));
            }
        }
        r_diag[j] = alpha;
    }
    Qr { qr, r_diag }
}

impl Qr {
    pub fn r_diag(&self) -> &[f64] {
        &self.r_diag
    }

    /// Column indices whose R pivot is negligible relative to the largest.
    pub fn near_null_columns(&self, rel_tol: f64) -> Vec<usize> {
        let max = self
            .r_diag
            .iter()
            .fold(0.0f64, |acc, d| acc.max(d.abs()));
        self.r_diag
            .iter()
            .enumerate()
            .filter(|(_, d)| d.abs() <= rel_tol * max)
            .map(|(j, _)| j)
            .collect()
    }

    /// Least-squares solve of `X b = y` via `R b = Q^T y`.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let (n, m) = (self.qr.rows(), self.qr.cols());
        assert_eq!(y.len(), n);
        let mut qty = y.to_vec();
        for j in 0..m {
            if self.qr.get(j, j) == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for i in j..n {
                s += self.qr.get(i, j) * qty[i];
            }
            s = -s / self.qr.get(j, j);
            for i in j..n {
                qty[i] += s * self.qr.get(i, j);
            }
        }
        let mut b = vec![0.0; m];
        for i in (0..m).rev() {
            let mut acc = qty[i];
            for k in (i + 1)..m {
                acc -= self.upper(i, k) * b[k];
            }
            b[i] = acc / self.r_diag[i];
        }
        b
    }

    #[inline]
    fn upper(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < j);
        self.qr.get(i, j)
    }

    /// (X^T X)^{-1} = R^{-1} R^{-T}.
    pub fn gram_inverse(&self) -> Mat {
        let m = self.qr.cols();
        // invert R by back-substitution, one unit column at a time
        let mut rinv = Mat::zeros(m, m);
        for j in 0..m {
            let mut col = vec![0.0; m];
            col[j] = 1.0;
            for i in (0..=j).rev() {
                let mut acc = col[i];
                for k in (i + 1)..=j {
                    acc -= self.r(i, k) * rinv.get(k, j);
                }
                rinv.set(i, j, acc / self.r_diag[i]);
            }
        }
        let mut g = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in j.max(i)..m {
                    acc += rinv.get(i, k) * rinv.get(j, k);
                }
                g.set(i, j, acc);
            }
        }
        g
    }

    #[inline]
    fn r(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.r_diag[i]
        } else {
            self.qr.get(i, j)
        }
    }

    /// ln det(X^T X) = 2 Σ ln |R_ii|.
    pub fn log_det_gram(&self) -> f64 {
        self.r_diag.iter().map(|d| d.abs().ln()).sum::<f64>() * 2.0
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `rel_tol * ||A||_F`. Returns unsorted eigenvalues and the matrix whose
/// columns are the matching eigenvectors.
pub fn jacobi_eigen(a: &Mat, rel_tol: f64, max_sweeps: usize) -> (Vec<f64>, Mat) {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut w = a.clone();
    let mut v = Mat::identity(n);
    if n <= 1 {
        return ((0..n).map(|i| w.get(i, i)).collect(), v);
    }
    let norm_a = a.frobenius_norm();
    let threshold = if norm_a == 0.0 { 0.0 } else { rel_tol * norm_a };

    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * w.get(p, q) * w.get(p, q);
            }
        }
        if off.sqrt() <= threshold {
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // smaller-root tangent keeps rotations well conditioned
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let wkp = w.get(k, p);
                    let wkq = w.get(k, q);
                    w.set(k, p, c * wkp - s * wkq);
                    w.set(k, q, s * wkp + c * wkq);
                }
                for k in 0..n {
                    let wpk = w.get(p, k);
                    let wqk = w.get(q, k);
                    w.set(p, k, c * wpk - s * wqk);
                    w.set(q, k, s * wpk + c * wqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| w.get(i, i)).collect(), v)
}
