//! Factorized proximal splitting with B ≈ AᵀSA (A unitary, S diagonal) and
//! numerical evaluators for the associated convergence bounds.
//!
//! Throughout, ‖R‖ is the spectral norm and δ_A(z) = λ(‖Az‖₁ − ‖z‖₁).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::lasso::{shrink, LassoProblem};
use crate::linalg::{self, Mat, Vector};

/// Matrices with ‖AᵀA − I‖_F above this are flagged as non-unitary.
pub const UNITARY_TOL: f64 = 1e-6;
/// R counts as positive semidefinite when its smallest eigenvalue is at least −PSD_TOL.
pub const PSD_TOL: f64 = 1e-10;
/// Slack in `lhs ≤ rhs` comparisons.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Factorization {
    pub a: Mat,
    pub s: Vector,
    /// R = AᵀSA − B
    pub residual: Mat,
    /// smallest eigenvalue of R
    pub psd_margin: f64,
    /// ‖AᵀA − I‖_F
    pub unitarity_error: f64,
}

impl Factorization {
    pub fn new(a: Mat, s: Vector, gram: &Mat) -> Result<Self> {
        let m = gram.nrows();
        check_dims("A rows", m, a.nrows())?;
        check_dims("A cols", m, a.ncols())?;
        check_dims("S length", m, s.len())?;
        if let Some(bad) = s.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("S entries must be positive, found {bad}")));
        }
        let (residual, psd_margin) = residual(&a, &s, gram);
        let unitarity_error = linalg::unitarity_error(&a);
        Ok(Self { a, s, residual, psd_margin, unitarity_error })
    }

    /// (I, L·1): the factorization that reduces the step to ISTA.
    pub fn identity(gram: &Mat, lipschitz: f64) -> Result<Self> {
        let m = gram.nrows();
        Self::new(Mat::identity(m, m), Vector::from_element(m, lipschitz), gram)
    }

    pub fn is_unitary(&self) -> bool {
        self.unitarity_error <= UNITARY_TOL
    }

    pub fn is_psd(&self) -> bool {
        self.psd_margin >= -PSD_TOL
    }

    /// ‖R‖₂
    pub fn residual_norm(&self) -> f64 {
        linalg::sym_spectral_norm(&self.residual)
    }
}

/// λ(‖Az‖₁ − ‖z‖₁)
pub fn delta_a(a: &Mat, z: &Vector, lambda: f64) -> f64 {
    lambda * (linalg::l1_norm(&(a * z)) - linalg::l1_norm(z))
}

/// R = AᵀSA − B together with its smallest eigenvalue.
pub fn residual(a: &Mat, s: &Vector, gram: &Mat) -> (Mat, f64) {
    let sa = Mat::from_fn(a.nrows(), a.ncols(), |i, j| s[i] * a[(i, j)]);
    let r = linalg::symmetrize(&(a.transpose() * sa - gram));
    let margin = linalg::min_eigenvalue(&r);
    (r, margin)
}

/// Output of one factorized step plus the intermediates needed by the bounds.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub next: Vector,
    /// pre-threshold point u = Az − S⁻¹A∇E(z)
    pub pre: Vector,
    /// thresholded point w = h_{λ/S}(u), so next = Aᵀw
    pub shrunk: Vector,
}

pub fn factorized_step_detail(p: &LassoProblem, z: &Vector, f: &Factorization) -> StepDetail {
    factorized_kernel(p, z, &f.a, &f.s)
}

/// The factorized step for raw (A, S) without the residual bookkeeping.
pub fn factorized_kernel(p: &LassoProblem, z: &Vector, a: &Mat, s: &Vector) -> StepDetail {
    let grad = p.smooth_gradient(z);
    let az = a * z;
    let ag = a * grad;
    let pre = Vector::from_fn(z.len(), |i, _| az[i] - ag[i] / s[i]);
    let shrunk = Vector::from_fn(z.len(), |i, _| shrink(pre[i], p.lambda / s[i]));
    let next = a.transpose() * &shrunk;
    StepDetail { next, pre, shrunk }
}

/// z_{k+1} = Aᵀ h_{λ/S}(Az_k − S⁻¹A(Bz_k − Dᵀx)): the exact minimizer of the
/// surrogate F(z) + ½(z − z_k)ᵀR(z − z_k) + δ_A(z) when A is unitary.
pub fn factorized_step(p: &LassoProblem, z: &Vector, f: &Factorization) -> Vector {
    factorized_step_detail(p, z, f).next
}

/// Subgradient λ(Aᵀs_A − s) of δ_A at the output of a factorized step, where
/// s_A is the ℓ1 subgradient at Az_{k+1} certified by the step's optimality
/// condition and s ∈ ∂‖z_{k+1}‖₁ (matched to Aᵀs_A on zero coordinates).
pub fn certified_delta_subgradient(p: &LassoProblem, f: &Factorization, step: &StepDetail) -> Vector {
    let lambda = p.lambda;
    let s_a = Vector::from_fn(step.shrunk.len(), |i, _| {
        if step.shrunk[i] != 0.0 {
            linalg::sign(step.shrunk[i])
        } else if lambda > 0.0 {
            (step.pre[i] * f.s[i] / lambda).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    });
    let back = f.a.transpose() * s_a;
    let s = Vector::from_fn(back.len(), |i, _| {
        if step.next[i] != 0.0 {
            linalg::sign(step.next[i])
        } else {
            back[i].clamp(-1.0, 1.0)
        }
    });
    (back - s) * lambda
}

/// Inequality check with every contributing term kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub terms: BTreeMap<String, f64>,
    pub satisfied: bool,
    /// false when some residual R was not PSD; the evaluation is then not covered by the bound
    pub precondition_ok: bool,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64, terms: BTreeMap<String, f64>, precondition_ok: bool) -> Self {
        Self { lhs, rhs, satisfied: lhs <= rhs + BOUND_TOL, terms, precondition_ok }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms[name]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn quad(v: &Vector, r: &Mat) -> f64 {
    v.dot(&(r * v))
}

/// One factorized step from z_k:
/// F(z_{k+1}) − F(z*) ≤ ½‖R‖‖z_k − z*‖² + δ_A(z*) − δ_A(z_{k+1}).
pub fn prop1_check(p: &LassoProblem, z_k: &Vector, f: &Factorization, z_star: &Vector) -> BoundReport {
    let next = factorized_step(p, z_k, f);
    let lhs = p.cost(&next) - p.cost(z_star);
    let dist = z_k - z_star;
    let r_norm = f.residual_norm();
    let spectral = 0.5 * r_norm * dist.norm_squared();
    let quadratic = 0.5 * quad(&dist, &f.residual);
    let delta_star = delta_a(&f.a, z_star, p.lambda);
    let delta_next = delta_a(&f.a, &next, p.lambda);
    let rhs = spectral + delta_star - delta_next;
    let terms = BTreeMap::from([
        ("residual_spectral".to_string(), spectral),
        ("residual_quadratic".to_string(), quadratic),
        ("residual_norm".to_string(), r_norm),
        ("delta_star".to_string(), delta_star),
        ("delta_next".to_string(), delta_next),
        ("psd_margin".to_string(), f.psd_margin),
    ]);
    BoundReport::new(lhs, rhs, terms, f.is_psd())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzBounds {
    /// λ(√‖z‖₀ + √‖Az‖₀)
    pub sparse_bound: f64,
    /// (1 + ‖A‖₁)λ√m
    pub uniform_bound: f64,
    /// ‖λ(Aᵀsign(Az) − sign(z))‖₂ with sign(0) = 0
    pub subgrad_norm: f64,
}

pub fn lipschitz_bound(a: &Mat, z: &Vector, lambda: f64) -> LipschitzBounds {
    let az = a * z;
    let sparse_bound =
        lambda * ((linalg::l0_norm(z) as f64).sqrt() + (linalg::l0_norm(&az) as f64).sqrt());
    let uniform_bound = (1.0 + linalg::induced_l1_norm(a)) * lambda * (z.len() as f64).sqrt();
    let sub = a.transpose() * az.map(linalg::sign) - z.map(linalg::sign);
    LipschitzBounds { sparse_bound, uniform_bound, subgrad_norm: lambda * sub.norm() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelerationCheck {
    pub holds: bool,
    /// ‖B‖/2 − (‖R‖ + 2L_A(z_{k+1})/‖z* − z_k‖)
    pub margin: f64,
    pub lhs: f64,
    pub rhs: f64,
}

/// ‖R_k‖ + 2L_{A_k}(z_{k+1})/‖z* − z_k‖ ≤ ‖B‖/2 with the sparsity-based Lipschitz bound.
pub fn acceleration_condition(
    f: &Factorization,
    z_k: &Vector,
    z_next: &Vector,
    z_star: &Vector,
    gram: &Mat,
    lambda: f64,
) -> AccelerationCheck {
    let rhs = linalg::psd_spectral_norm(gram) / 2.0;
    let dist = (z_star - z_k).norm();
    if dist == 0.0 {
        return AccelerationCheck { holds: false, margin: f64::NEG_INFINITY, lhs: f64::INFINITY, rhs };
    }
    let lip = lipschitz_bound(&f.a, z_next, lambda).sparse_bound;
    let lhs = f.residual_norm() + 2.0 * lip / dist;
    AccelerationCheck { holds: lhs <= rhs, margin: rhs - lhs, lhs, rhs }
}

/// Bound on F(z_k) − F(z*) after running the factorized steps of `schedule` from z0.
///
/// `rhs` is the bound obtained by summing the one-step inequality
/// F(z_{n+1}) − F* ≤ ½[q_n(z_n) − q_n(z_{n+1}) − b_nᵀR_nb_n] + ⟨g_n, z* − z_{n+1}⟩
/// (q_n(z) = (z* − z)ᵀR_n(z* − z), b_n = z_{n+1} − z_n, g_n the certified
/// subgradient of δ_{A_n} at z_{n+1}) and combining it with the descent
/// inequality weighted by n. The terms also carry:
/// * `printed_rhs`: the α/β expression of the theorem statement, with
///   subgradient inner products in place of L_A‖·‖;
/// * `statement_rhs`: the same with the local Lipschitz constants L_A‖·‖;
/// * `spectral_rhs`: `rhs` with every quadratic form majorized by a spectral
///   norm and the non-positive terms dropped. For the (I, L·1) schedule on
///   an overcomplete dictionary it equals ‖B‖‖z* − z0‖²/(2k).
pub fn theorem1_bound(
    p: &LassoProblem,
    z0: &Vector,
    schedule: &[Factorization],
    z_star: &Vector,
) -> Result<BoundReport> {
    let k = schedule.len();
    if k == 0 {
        return Err(Error::InvalidArgument("schedule must contain at least one step".into()));
    }
    let lambda = p.lambda;
    let mut zs = vec![z0.clone()];
    let mut subgrads = Vec::with_capacity(k);
    for f in schedule {
        let step = factorized_step_detail(p, zs.last().unwrap(), f);
        subgrads.push(certified_delta_subgradient(p, f, &step));
        zs.push(step.next);
    }
    let d = |z: &Vector| z_star - z;
    let q = |i: usize, r: &Mat| quad(&d(&zs[i]), r);
    let inner: Vec<f64> = (0..k).map(|n| subgrads[n].dot(&d(&zs[n + 1]))).collect();
    let lip: Vec<f64> = (0..k).map(|n| subgrads[n].norm() * d(&zs[n + 1]).norm()).collect();
    let step_quad: Vec<f64> =
        (0..k).map(|n| quad(&(&zs[n + 1] - &zs[n]), &schedule[n].residual)).collect();
    let delta_change: Vec<f64> = (0..k)
        .map(|n| delta_a(&schedule[n].a, &zs[n + 1], lambda) - delta_a(&schedule[n].a, &zs[n], lambda))
        .collect();
    let r_change: Vec<Mat> =
        (1..k).map(|n| &schedule[n].residual - &schedule[n - 1].residual).collect();

    let initial_quadratic = q(0, &schedule[0].residual);
    let final_quadratic = q(k, &schedule[k - 1].residual);
    let switch_quadratic: f64 = (1..k).map(|n| q(n, &r_change[n - 1])).sum();
    let descent: f64 = (0..k).map(|n| n as f64 * (step_quad[n] + 2.0 * delta_change[n])).sum();
    let numerator = initial_quadratic - final_quadratic + switch_quadratic + 2.0 * inner.iter().sum::<f64>()
        - step_quad.iter().sum::<f64>()
        - descent;
    let two_k = 2.0 * k as f64;
    let rhs = numerator / two_k;

    // α, β as printed
    let alpha_with = |l: &[f64]| -> f64 { (1..k).map(|i| 2.0 * l[i] - q(i, &r_change[i - 1])).sum() };
    let beta: f64 = (0..k).map(|i| (i + 1) as f64 * (step_quad[i] + 2.0 * delta_change[i])).sum();
    let printed_rhs = (initial_quadratic + 2.0 * inner[0] + alpha_with(&inner) - beta) / two_k;
    let statement_rhs = (initial_quadratic + 2.0 * lip[0] + alpha_with(&lip) - beta) / two_k;

    let spectral_numerator = schedule[0].residual_norm() * d(z0).norm_squared()
        + (1..k)
            .map(|n| linalg::sym_spectral_norm(&r_change[n - 1]) * d(&zs[n]).norm_squared())
            .sum::<f64>()
        + 2.0 * lip.iter().sum::<f64>()
        - (0..k).map(|n| 2.0 * n as f64 * delta_change[n]).sum::<f64>();
    let spectral_rhs = spectral_numerator / two_k;

    let lhs = p.cost(&zs[k]) - p.cost(z_star);
    let precondition_ok = schedule.iter().all(Factorization::is_psd);
    let terms = BTreeMap::from([
        ("steps".to_string(), k as f64),
        ("initial_quadratic".to_string(), initial_quadratic),
        ("final_quadratic".to_string(), final_quadratic),
        ("switch_quadratic".to_string(), switch_quadratic),
        ("subgradient_terms".to_string(), inner.iter().sum()),
        ("lipschitz_terms".to_string(), lip.iter().sum()),
        ("descent_terms".to_string(), descent),
        ("alpha".to_string(), alpha_with(&inner)),
        ("alpha_statement".to_string(), alpha_with(&lip)),
        ("beta".to_string(), beta),
        ("printed_rhs".to_string(), printed_rhs),
        ("statement_rhs".to_string(), statement_rhs),
        ("spectral_rhs".to_string(), spectral_rhs),
    ]);
    Ok(BoundReport::new(lhs, rhs, terms, precondition_ok))
}

/// Theorem bound for a schedule whose first step uses `f0` and whose
/// remaining k − 1 steps are ISTA. Adds `corollary_printed_rhs`, the
/// closed-form expression of the one-step corollary.
pub fn corollary1_bound(
    p: &LassoProblem,
    z0: &Vector,
    f0: &Factorization,
    k: usize,
    z_star: &Vector,
) -> Result<BoundReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let ista = Factorization::identity(p.gram(), p.lipschitz())?;
    let mut schedule = vec![f0.clone()];
    schedule.extend(std::iter::repeat_n(ista, k - 1));
    let mut report = theorem1_bound(p, z0, &schedule, z_star)?;

    let step = factorized_step_detail(p, z0, f0);
    let z1 = &step.next;
    let lip = certified_delta_subgradient(p, f0, &step).norm();
    let d0 = z_star - z0;
    let d1 = z_star - z1;
    let printed = (quad(&d0, &f0.residual)
        + 2.0 * lip * (d1.norm() + (z1 - z0).norm())
        + quad(&d1, &f0.residual))
        / (2.0 * k as f64);
    report.terms.insert("corollary_printed_rhs".into(), printed);
    report.terms.insert("first_step_lipschitz".into(), lip);
    Ok(report)
}

/// Mean over samples (z0, z1, z*) of ½(z0 − z*)ᵀR(z0 − z*) + δ_A(z*) − δ_A(z1).
/// The flag is false when R is not PSD.
pub fn dataset_factorization_objective(
    f: &Factorization,
    samples: &[(Vector, Vector, Vector)],
    lambda: f64,
) -> (f64, bool) {
    if samples.is_empty() {
        return (0.0, f.is_psd());
    }
    let total: f64 = samples
        .iter()
        .map(|(z0, z1, zs)| {
            0.5 * quad(&(z0 - zs), &f.residual) + delta_a(&f.a, zs, lambda) - delta_a(&f.a, z1, lambda)
        })
        .sum();
    (total / samples.len() as f64, f.is_psd())
}
