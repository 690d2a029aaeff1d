//! LASSO problem definition, cost evaluation, soft-thresholding and the
//! synthetic dictionary / code generators.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::rng;

/// Columns must have unit ℓ2 norm to this precision.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Singular values below `PINV_RCOND·σ_max` are truncated in D†.
pub const PINV_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryKind {
    Gaussian,
    FourierAdversarial,
    UserSupplied,
}

/// n×m dictionary with unit-norm atoms as columns.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: Mat,
    seed: u64,
    kind: DictionaryKind,
}

impl Dictionary {
    /// Wraps a matrix whose columns already have unit norm.
    pub fn new(entries: Mat, kind: DictionaryKind, seed: u64) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidArgument("dictionary must be non-empty".into()));
        }
        for (j, col) in entries.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "column {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { entries, seed, kind })
    }

    /// Normalizes the columns of an arbitrary matrix. Columns already of unit
    /// norm are kept bit for bit, so saved dictionaries reload unchanged.
    pub fn from_matrix(mut entries: Mat, kind: DictionaryKind, seed: u64) -> Result<Self> {
        for (j, mut col) in entries.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!("column {j} cannot be normalized")));
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                col /= norm;
            }
        }
        Self::new(entries, kind, seed)
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }
    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    /// Signal dimension n.
    pub fn signal_dim(&self) -> usize {
        self.entries.nrows()
    }
    /// Number of atoms m.
    pub fn atoms(&self) -> usize {
        self.entries.ncols()
    }
    pub fn is_overcomplete(&self) -> bool {
        self.atoms() > self.signal_dim()
    }
}

/// Quantities shared by every problem on one dictionary: B = DᵀD, L = ‖B‖₂, D†.
#[derive(Debug)]
pub struct CodingOperator {
    pub dict: Dictionary,
    pub gram: Mat,
    pub lipschitz: f64,
    pub pinv: Mat,
}

impl CodingOperator {
    pub fn new(dict: Dictionary) -> Arc<Self> {
        let d = dict.entries();
        let gram = linalg::symmetrize(&(d.transpose() * d));
        let lipschitz = linalg::psd_spectral_norm(&gram);
        let pinv = linalg::pseudo_inverse(d, PINV_RCOND);
        Arc::new(Self { dict, gram, lipschitz, pinv })
    }

    pub fn atoms(&self) -> usize {
        self.dict.atoms()
    }

    pub fn signal_dim(&self) -> usize {
        self.dict.signal_dim()
    }

    pub fn problem(self: &Arc<Self>, x: Vector, lambda: f64) -> Result<LassoProblem> {
        check_dims("signal length", self.signal_dim(), x.len())?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        let d = self.dict.entries();
        let dtx = d.transpose() * &x;
        let y = &self.pinv * &x;
        Ok(LassoProblem { op: Arc::clone(self), x, y, dtx, lambda })
    }
}

/// F_x(z) = ½‖x − Dz‖² + λ‖z‖₁ on a fixed dictionary.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub op: Arc<CodingOperator>,
    pub x: Vector,
    /// D†x
    pub y: Vector,
    /// Dᵀx
    pub dtx: Vector,
    pub lambda: f64,
}

impl LassoProblem {
    pub fn dict(&self) -> &Mat {
        self.op.dict.entries()
    }
    pub fn gram(&self) -> &Mat {
        &self.op.gram
    }
    pub fn lipschitz(&self) -> f64 {
        self.op.lipschitz
    }
    pub fn atoms(&self) -> usize {
        self.op.atoms()
    }

    /// ∇E(z) = Bz − Dᵀx
    pub fn smooth_gradient(&self, z: &Vector) -> Vector {
        self.gram() * z - &self.dtx
    }

    /// ½‖x − Dz‖²
    pub fn data_fit(&self, z: &Vector) -> f64 {
        assert_eq!(z.len(), self.atoms(), "code length");
        0.5 * (&self.x - self.dict() * z).norm_squared()
    }

    pub fn cost(&self, z: &Vector) -> f64 {
        self.data_fit(z) + self.lambda * linalg::l1_norm(z)
    }
}

pub fn build_problem(dict: Dictionary, x: Vector, lambda: f64) -> Result<LassoProblem> {
    CodingOperator::new(dict).problem(x, lambda)
}

pub fn lasso_cost(p: &LassoProblem, z: &Vector) -> Result<f64> {
    check_dims("code length", p.atoms(), z.len())?;
    Ok(p.cost(z))
}

/// sign(u)(|u| − θ)₊
#[inline]
pub fn shrink(u: f64, theta: f64) -> f64 {
    if u > theta {
        u - theta
    } else if u < -theta {
        u + theta
    } else {
        0.0
    }
}

/// Coordinate-wise soft-thresholding h_θ(u).
pub fn soft_threshold(u: &Vector, theta: &Vector) -> Result<Vector> {
    check_dims("threshold length", u.len(), theta.len())?;
    if let Some(t) = theta.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative threshold {t}")));
    }
    Ok(u.zip_map(theta, shrink))
}

pub fn sample_gaussian_dictionary(n: usize, m: usize, seed: u64) -> Result<Dictionary> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("dictionary dimensions must be >= 1".into()));
    }
    let mut r = rng::seeded(seed);
    let entries = Mat::from_fn(n, m, |_, _| StandardNormal.sample(&mut r));
    Dictionary::from_matrix(entries, DictionaryKind::Gaussian, seed)
}

/// Frequencies ζ ∈ (0, ½), one per cos/sin atom pair, in seeded random order.
///
/// The grid has m/2 points (f − ½)/m for f = 1..=m/2; all of them are used.
/// The half-bin offset keeps ζ = ½ off the grid, where the sine atom vanishes.
pub fn fourier_frequencies(n: usize, m: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("n must be at least 2, got {n}")));
    }
    if m == 0 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("m must be even and positive, got {m}")));
    }
    let pairs = m / 2;
    let mut r = rng::seeded(seed);
    Ok(rand::seq::index::sample(&mut r, pairs, pairs)
        .into_iter()
        .map(|i| (i as f64 + 0.5) / m as f64)
        .collect())
}

/// Atoms are real sinusoids over the signal index: for each frequency ζ the
/// pair (cos 2πjζ)_j, (sin 2πjζ)_j, normalized. Neighbouring frequencies give
/// highly coherent atoms and the Gram eigenvectors are spread over all atoms.
pub fn adversarial_fourier_dictionary(n: usize, m: usize, seed: u64) -> Result<Dictionary> {
    let freqs = fourier_frequencies(n, m, seed)?;
    let mut entries = Mat::zeros(n, m);
    for (pair, &zeta) in freqs.iter().enumerate() {
        for j in 0..n {
            let phase = 2.0 * PI * j as f64 * zeta;
            entries[(j, 2 * pair)] = phase.cos();
            entries[(j, 2 * pair + 1)] = phase.sin();
        }
    }
    Dictionary::from_matrix(entries, DictionaryKind::FourierAdversarial, seed)
}

/// z_i = b_i a_i with b_i ~ Bernoulli(ρ), a_i ~ N(0, σ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliGaussianModel {
    pub rho: f64,
    pub sigma: f64,
    pub m: usize,
}

impl BernoulliGaussianModel {
    pub fn new(rho: f64, sigma: f64, m: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {rho}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { rho, sigma, m })
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Vector {
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        Vector::from_fn(self.m, |_, _| {
            let active = rng.random::<f64>() < self.rho;
            let amplitude = normal.sample(rng);
            if active {
                amplitude
            } else {
                0.0
            }
        })
    }
}

pub fn sample_codes(model: &BernoulliGaussianModel, count: usize, seed: u64) -> Vec<Vector> {
    let mut r = rng::seeded(seed);
    (0..count).map(|_| model.sample(&mut r)).collect()
}

/// Codes (m×count) and their signals X = DZ (n×count), samples as columns.
pub fn sample_dataset(
    dict: &Dictionary,
    model: &BernoulliGaussianModel,
    count: usize,
    seed: u64,
) -> Result<(Mat, Mat)> {
    check_dims("code model size", dict.atoms(), model.m)?;
    let codes = sample_codes(model, count, seed);
    let z = Mat::from_columns(&codes);
    let x = dict.entries() * &z;
    Ok((x, z))
}
