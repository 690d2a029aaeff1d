//! Dense helpers on top of nalgebra: spectral norms, extreme eigenvalues,
//! pseudo-inverse and the orthogonal polar factor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest size for which the dense symmetric eigensolver is used in place of
/// power iteration.
pub const DENSE_EIGEN_MAX_DIM: usize = 256;

pub const POWER_MAX_ITER: usize = 10_000;
pub const POWER_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration for the dominant eigenvalue of a symmetric PSD matrix.
pub fn power_iteration(sym: &Mat, max_iter: usize, rel_tol: f64) -> PowerIteration {
    let m = sym.nrows();
    if m == 0 {
        return PowerIteration { value: 0.0, iterations: 0, converged: true };
    }
    // fixed pseudo-random start so that structured matrices (e.g. Fourier
    // Gram matrices annihilating the constant vector) are not missed
    let mut r = rng::seeded(0x5eed_1e55);
    let mut v = Vector::from_fn(m, |_, _| StandardNormal.sample(&mut r));
    v /= v.norm();
    let mut value = 0.0;
    for it in 1..=max_iter {
        let w = sym * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return PowerIteration { value: 0.0, iterations: it, converged: true };
        }
        v = w / norm;
        if it > 1 && (next - value).abs() <= rel_tol * next.abs() {
            return PowerIteration { value: next, iterations: it, converged: true };
        }
        value = next;
    }
    PowerIteration { value, iterations: max_iter, converged: false }
}

/// ‖B‖₂ of a symmetric PSD matrix. Power iteration, refined by the dense
/// eigensolver for m ≤ 256 or when power iteration stalls.
pub fn psd_spectral_norm(sym: &Mat) -> f64 {
    let pi = power_iteration(sym, POWER_MAX_ITER, POWER_REL_TOL);
    if sym.nrows() <= DENSE_EIGEN_MAX_DIM || !pi.converged {
        return max_eigenvalue(sym);
    }
    pi.value
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vals
}

pub fn min_eigenvalue(a: &Mat) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(a: &Mat) -> f64 {
    sym_eigenvalues(a).last().copied().unwrap_or(0.0)
}

/// Spectral norm of a symmetric (possibly indefinite) matrix.
pub fn sym_spectral_norm(a: &Mat) -> f64 {
    let vals = sym_eigenvalues(a);
    match (vals.first(), vals.last()) {
        (Some(lo), Some(hi)) => lo.abs().max(hi.abs()),
        _ => 0.0,
    }
}

/// Eigen-decomposition sorted by descending eigenvalue: (values, vectors as columns).
pub fn sym_eigen_desc(a: &Mat) -> (Vector, Mat) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Moore-Penrose pseudo-inverse; singular values below `rcond·σ_max` are dropped.
pub fn pseudo_inverse(a: &Mat, rcond: f64) -> Mat {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Mat::zeros(cols, rows);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let smax = svd.singular_values.max();
    let cutoff = rcond * smax;
    let mut out = Mat::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            // out += v_k u_kᵀ / s
            out.ger(1.0 / s, &vt.row(k).transpose(), &u.column(k), 1.0);
        }
    }
    out
}

/// Orthogonal polar factor U Vᵀ of a square matrix A = U Σ Vᵀ.
pub fn polar_factor(a: &Mat, min_singular: f64) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "polar factor needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smin = svd.singular_values.min();
    if smin <= min_singular {
        return Err(Error::Singular(format!(
            "smallest singular value {smin:e} below {min_singular:e}"
        )));
    }
    Ok(svd.u.expect("svd u") * svd.v_t.expect("svd v_t"))
}

pub fn frobenius_sq(a: &Mat) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn l1_norm(v: &Vector) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l0_norm(v: &Vector) -> usize {
    v.iter().filter(|x| **x != 0.0).count()
}

/// sign with sign(0) = 0.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ‖AᵀA − I‖_F
pub fn unitarity_error(a: &Mat) -> f64 {
    let gram = a.transpose() * a;
    let id = Mat::identity(a.ncols(), a.ncols());
    (gram - id).norm()
}

/// Induced ℓ1 operator norm (maximum absolute column sum).
pub fn induced_l1_norm(a: &Mat) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Random orthogonal matrix close to the identity: QR of I + scale·(G − Gᵀ),
/// signs fixed so the diagonal of R is positive.
pub fn random_rotation_near_identity(m: usize, scale: f64, rng: &mut rng::Rng) -> Mat {
    let g = Mat::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let skew = (&g - g.transpose()) * scale;
    let q = (Mat::identity(m, m) + skew).qr();
    let r = q.r();
    let mut qm = q.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            qm.column_mut(j).neg_mut();
        }
    }
    qm
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal(m: usize, rng: &mut rng::Rng) -> Mat {
    let g = Mat::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let q = g.qr();
    let r = q.r();
    let mut qm = q.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            qm.column_mut(j).neg_mut();
        }
    }
    qm
}
