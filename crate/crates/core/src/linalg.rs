//! Dense symmetric linear algebra helpers.
//!
//! Everything here works on column-major `nalgebra` matrices. Large products
//! go straight to `matrixmultiply` so that transposed operands never need to
//! be materialized.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let eig = m.clone().symmetric_eigen();
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `U diag(f(λ)) Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            scaled.column_mut(j).scale_mut(s);
        }
        mul_nt(&scaled, &self.vectors)
    }

    /// Coordinates of `v` in the eigenbasis, `Uᵀ v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(v)
    }

    /// `U c`.
    pub fn reconstruct(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.vectors * coords
    }
}

/// Principal square root of a symmetric PSD matrix.
///
/// Eigenvalues below `-1e-12 * λmax` are an error; smaller negative rounding
/// noise is set to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymEig::new(m);
    sqrt_from_eig(&eig)
}

pub(crate) fn sqrt_from_eig(eig: &SymEig) -> Result<DMatrix<f64>> {
    let scale = eig.max().abs().max(f64::MIN_POSITIVE);
    let lo = eig.min();
    if lo < -1e-12 * scale {
        return Err(Error::NotPositiveDefinite(lo));
    }
    Ok(eig.map(|l| l.max(0.0).sqrt()))
}

/// Largest relative asymmetry `max|a_ij - a_ji| / max|a_ij|`.
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut DMatrix<f64>,
) {
    debug_assert_eq!(c.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_mut(beta);
        return;
    }
    let csc = c.nrows() as isize;
    // SAFETY: the slices cover every element addressed by the given strides
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            1,
            csc,
        );
    }
}

fn normal(a: &DMatrix<f64>) -> (&[f64], isize, isize) {
    (a.as_slice(), 1, a.nrows() as isize)
}

fn transposed(a: &DMatrix<f64>) -> (&[f64], isize, isize) {
    (a.as_slice(), a.nrows() as isize, 1)
}

/// `a b`.
pub fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "mul: inner dimensions differ");
    let mut c = DMatrix::zeros(a.nrows(), b.ncols());
    gemm_raw(a.nrows(), a.ncols(), b.ncols(), 1.0, normal(a), normal(b), 0.0, &mut c);
    c
}

/// `aᵀ b`.
pub fn mul_tn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "mul_tn: inner dimensions differ");
    let mut c = DMatrix::zeros(a.ncols(), b.ncols());
    gemm_raw(a.ncols(), a.nrows(), b.ncols(), 1.0, transposed(a), normal(b), 0.0, &mut c);
    c
}

/// `a bᵀ`.
pub fn mul_nt(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "mul_nt: inner dimensions differ");
    let mut c = DMatrix::zeros(a.nrows(), b.nrows());
    gemm_raw(a.nrows(), a.ncols(), b.nrows(), 1.0, normal(a), transposed(b), 0.0, &mut c);
    c
}

/// `a b[r0..r0 + rows, :]ᵀ`, a product against a block of rows of `b`.
pub fn mul_nt_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, r0: usize, rows: usize) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "mul_nt_rows: inner dimensions differ");
    assert!(r0 + rows <= b.nrows(), "mul_nt_rows: row block out of range");
    let mut c = DMatrix::zeros(a.nrows(), rows);
    if rows == 0 {
        return c;
    }
    let ldb = b.nrows() as isize;
    gemm_raw(a.nrows(), a.ncols(), rows, 1.0, normal(a), (&b.as_slice()[r0..], ldb, 1), 0.0, &mut c);
    c
}

const GRAM_TILE: usize = 256;

/// `k += a aᵀ`, computing only the upper block triangle and mirroring it.
pub fn gram_rows_accumulate(k: &mut DMatrix<f64>, a: &DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(k.shape(), (n, n));
    let inner = a.ncols();
    if inner == 0 {
        return;
    }
    let lda = n as isize;
    let data = a.as_slice();
    let mut tile = DMatrix::zeros(0, 0);
    for i0 in (0..n).step_by(GRAM_TILE) {
        let mi = GRAM_TILE.min(n - i0);
        for j0 in (i0..n).step_by(GRAM_TILE) {
            let nj = GRAM_TILE.min(n - j0);
            if tile.shape() != (mi, nj) {
                tile = DMatrix::zeros(mi, nj);
            }
            gemm_raw(
                mi,
                inner,
                nj,
                1.0,
                (&data[i0..], 1, lda),
                (&data[j0..], lda, 1),
                0.0,
                &mut tile,
            );
            for jj in 0..nj {
                for ii in 0..mi {
                    let v = tile[(ii, jj)];
                    let (r, c) = (i0 + ii, j0 + jj);
                    if r <= c {
                        k[(r, c)] += v;
                        if r != c {
                            k[(c, r)] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `aᵀ a`.
pub fn gram_cols(a: &DMatrix<f64>) -> DMatrix<f64> {
    mul_tn(a, a)
}

/// Spectral norm of a general matrix, via the largest eigenvalue of `aᵀa`.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    let g = if a.nrows() >= a.ncols() { gram_cols(a) } else { mul_nt(a, a) };
    SymEig::new(&symmetrize(&g)).max().max(0.0).sqrt()
}
