//! Near-identity factorizations of generic Gram matrices: E_δ ensembles,
//! greedy column choice, Monte Carlo moment checks and the gap condition.
//!
//! A generic dictionary has K atoms drawn uniformly on the unit sphere of R^p.
//! Monte Carlo trials run in parallel; trial t draws from `rng::derived(seed, t)`
//! and results are summed in trial order.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_dims, Error, Result};
use crate::lasso::LassoProblem;
use crate::linalg::{self, Mat, Vector};
use crate::rng;
use crate::solvers::ista;

/// Below this norm the off-axis part of Be_i is treated as zero.
pub const DEGENERATE_DIRECTION: f64 = 1e-12;
/// Number of standard errors allowed between an estimate and its reference.
pub const MC_SIGMAS: f64 = 3.0;

/// Matrix whose column i is √(1−μ_i²)e_i + μ_i h_i with h_i ⊥ e_i unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EDeltaMatrix {
    pub a: Mat,
    pub delta: f64,
    pub mu_per_column: Vec<f64>,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta must lie in [0, 1), got {delta}")));
    }
    Ok(())
}

fn e_delta_column(i: usize, mu: f64, h: &Vector) -> Vector {
    let mut col = h * mu;
    col[i] += (1.0 - mu * mu).sqrt();
    col
}

/// Uniform unit vector orthogonal to e_i.
fn random_orthogonal_direction(k: usize, i: usize, r: &mut rng::Rng) -> Vector {
    loop {
        let mut h = Vector::from_fn(k, |_, _| StandardNormal.sample(r));
        h[i] = 0.0;
        let norm = h.norm();
        if norm > DEGENERATE_DIRECTION {
            return h / norm;
        }
    }
}

/// Samples A ⊂ E_δ with μ = δ on every column. `directions[i]` overrides the
/// random h_i; it is projected off e_i and normalized.
pub fn sample_e_delta(k: usize, delta: f64, seed: u64, directions: Option<&[Vector]>) -> Result<EDeltaMatrix> {
    check_delta(delta)?;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2, got {k}")));
    }
    if let Some(dirs) = directions {
        check_dims("direction count", k, dirs.len())?;
    }
    let mut r = rng::seeded(seed);
    let mut a = Mat::zeros(k, k);
    for i in 0..k {
        let h = match directions {
            Some(dirs) => {
                check_dims("direction length", k, dirs[i].len())?;
                let mut h = dirs[i].clone();
                h[i] = 0.0;
                let norm = h.norm();
                if norm <= DEGENERATE_DIRECTION {
                    return Err(Error::InvalidArgument(format!("direction {i} is parallel to e_{i}")));
                }
                h / norm
            }
            None => random_orthogonal_direction(k, i, &mut r),
        };
        a.set_column(i, &e_delta_column(i, delta, &h));
    }
    Ok(EDeltaMatrix { a, delta, mu_per_column: vec![delta; k] })
}

/// S_i = A_iᵀBA_i, the minimizer over diagonal S of ‖B − ASAᵀ‖_F for unitary A.
pub fn optimal_diagonal(a: &Mat, gram: &Mat) -> Result<Vector> {
    check_dims("A rows", gram.nrows(), a.nrows())?;
    check_dims("A cols", gram.ncols(), a.ncols())?;
    let ba = gram * a;
    Ok(Vector::from_fn(a.ncols(), |i, _| a.column(i).dot(&ba.column(i))))
}

/// √(1−δ²)e_i + δh_i with h_i the normalized off-axis part of Be_i, or e_i
/// when that part vanishes.
pub fn greedy_column(gram: &Mat, i: usize, delta: f64) -> Vector {
    let k = gram.nrows();
    let mut v = gram.column(i).into_owned();
    v[i] = 0.0;
    let norm = v.norm();
    if norm < DEGENERATE_DIRECTION {
        let mut e = Vector::zeros(k);
        e[i] = 1.0;
        return e;
    }
    e_delta_column(i, delta, &(v / norm))
}

pub fn greedy_factorization(gram: &Mat, delta: f64) -> Result<EDeltaMatrix> {
    check_delta(delta)?;
    let k = gram.nrows();
    let cols: Vec<Vector> = (0..k).map(|i| greedy_column(gram, i, delta)).collect();
    Ok(EDeltaMatrix { a: Mat::from_columns(&cols), delta, mu_per_column: vec![delta; k] })
}

fn diag_times(s: &Vector, a: &Mat) -> Mat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| s[i] * a[(i, j)])
}

/// ‖A⁻¹SA − B‖²_F with the true inverse.
pub fn frobenius_residual_inv(a: &Mat, s: &Vector, gram: &Mat) -> Result<f64> {
    let inv = a.clone().try_inverse().ok_or_else(|| Error::Singular("A is not invertible".into()))?;
    Ok(linalg::frobenius_sq(&(inv * diag_times(s, a) - gram)))
}

/// ‖AᵀSA − B‖²_F
pub fn frobenius_residual_transpose(a: &Mat, s: &Vector, gram: &Mat) -> f64 {
    linalg::frobenius_sq(&(a.tr_mul(&diag_times(s, a)) - gram))
}

/// ‖AᵀA − I‖_F
pub fn e_delta_unitarity_check(a: &EDeltaMatrix) -> f64 {
    linalg::unitarity_error(&a.a)
}

/// p×K matrix with columns uniform on the unit sphere.
pub fn generic_dictionary(p: usize, k: usize, r: &mut rng::Rng) -> Mat {
    let mut d = Mat::from_fn(p, k, |_, _| StandardNormal.sample(r));
    for mut c in d.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    d
}

fn generic_gram(p: usize, k: usize, seed: u64, trial: usize) -> Mat {
    let d = generic_dictionary(p, k, &mut rng::derived(seed, trial as u64));
    linalg::symmetrize(&d.tr_mul(&d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub name: String,
    pub estimate: f64,
    /// sample standard deviation / √trials
    pub std_error: f64,
    pub reference: f64,
    pub trials: usize,
    pub within_tolerance: bool,
    pub k: usize,
    pub p: Option<usize>,
    pub delta: Option<f64>,
    pub seed: u64,
}

pub const MC_CSV_HEADER: &str = "name,k,p,delta,trials,seed,estimate,std_error,reference,within_tolerance";

impl MCReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:?},{:?},{:?},{}",
            self.name,
            self.k,
            opt(self.p.map(|p| p.to_string())),
            opt(self.delta.map(|d| format!("{d:?}"))),
            self.trials,
            self.seed,
            self.estimate,
            self.std_error,
            self.reference,
            self.within_tolerance
        )
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn within(estimate: f64, se: f64, reference: f64) -> bool {
    (estimate - reference).abs() <= MC_SIGMAS * se + 1e-12 * (1.0 + reference.abs())
}

fn check_trials(trials: usize, min: usize) -> Result<()> {
    if trials < min {
        return Err(Error::InvalidArgument(format!("need at least {min} trials, got {trials}")));
    }
    Ok(())
}

/// K(K−1)/p + K
pub fn wishart_frobenius_reference(k: usize, p: usize) -> f64 {
    let (k, p) = (k as f64, p as f64);
    k * (k - 1.0) / p + k
}

/// E‖B‖²_F for generic dictionaries.
pub fn mc_wishart_frobenius(k: usize, p: usize, trials: usize, seed: u64) -> Result<MCReport> {
    check_trials(trials, 100)?;
    if k == 0 || p == 0 {
        return Err(Error::InvalidArgument("K and p must be positive".into()));
    }
    let values: Vec<f64> =
        (0..trials).into_par_iter().map(|t| linalg::frobenius_sq(&generic_gram(p, k, seed, t))).collect();
    let (estimate, std_error) = mean_and_se(&values);
    let reference = wishart_frobenius_reference(k, p);
    Ok(MCReport {
        name: "wishart_frobenius".into(),
        estimate,
        std_error,
        reference,
        trials,
        within_tolerance: within(estimate, std_error, reference),
        k,
        p: Some(p),
        delta: None,
        seed,
    })
}

/// √(2/p)Γ(K/2)/Γ((K−1)/2)
pub fn chi_mean_reference(k: usize, p: usize) -> f64 {
    let k = k as f64;
    (2.0 / p as f64).sqrt() * (ln_gamma(k / 2.0) - ln_gamma((k - 1.0) / 2.0)).exp()
}

/// Y_1 = √(‖Dᵀd_1‖² − 1), one draw per dictionary.
/// Returns the reports for E[Y] and E[Y²] = (K−1)/p.
///
/// On the sphere Y is only approximately χ_{K−1}/√p: the true mean sits
/// slightly above the reference (about 0.3% at K=10, p=20).
pub fn mc_chi_moment(k: usize, p: usize, trials: usize, seed: u64) -> Result<(MCReport, MCReport)> {
    check_trials(trials, 100)?;
    if k < 2 || p == 0 {
        return Err(Error::InvalidArgument(format!("need K >= 2 and p >= 1, got K={k}, p={p}")));
    }
    let pairs: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let d = generic_dictionary(p, k, &mut rng::derived(seed, t as u64));
            let y2: f64 = (1..k).map(|j| d.column(j).dot(&d.column(0)).powi(2)).sum();
            (y2.sqrt(), y2)
        })
        .collect();
    let firsts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let seconds: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let report = |name: &str, values: &[f64], reference: f64| {
        let (estimate, std_error) = mean_and_se(values);
        MCReport {
            name: name.into(),
            estimate,
            std_error,
            reference,
            trials,
            within_tolerance: within(estimate, std_error, reference),
            k,
            p: Some(p),
            delta: None,
            seed,
        }
    };
    Ok((
        report("chi_first_moment", &firsts, chi_mean_reference(k, p)),
        report("chi_second_moment", &seconds, (k - 1) as f64 / p as f64),
    ))
}

/// Which residual the greedy-factorization Monte Carlo evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// ‖A⁻¹SA − B‖²_F
    Inverse,
    /// ‖AᵀSA − B‖²_F
    Transpose,
}

impl ResidualForm {
    fn label(self) -> &'static str {
        match self {
            ResidualForm::Inverse => "inverse",
            ResidualForm::Transpose => "transpose",
        }
    }
}

/// K(K−1)/p − 4δ(K−1)√(K/p)
pub fn lemma1_leading_terms(k: usize, p: usize, delta: f64) -> f64 {
    let (k, p) = (k as f64, p as f64);
    k * (k - 1.0) / p - 4.0 * delta * (k - 1.0) * (k / p).sqrt()
}

/// Per-dictionary residuals of the greedy factorization at each δ. Every δ
/// sees the same dictionaries.
pub fn lemma1_samples(
    k: usize,
    p: usize,
    deltas: &[f64],
    trials: usize,
    seed: u64,
    form: ResidualForm,
) -> Result<Vec<Vec<f64>>> {
    for &d in deltas {
        check_delta(d)?;
    }
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let b = generic_gram(p, k, seed, t);
            deltas
                .iter()
                .map(|&d| {
                    let a = greedy_factorization(&b, d)?.a;
                    let s = optimal_diagonal(&a, &b)?;
                    match form {
                        ResidualForm::Inverse => frobenius_residual_inv(&a, &s, &b),
                        ResidualForm::Transpose => Ok(frobenius_residual_transpose(&a, &s, &b)),
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..deltas.len()).map(|j| per_trial.iter().map(|v| v[j]).collect()).collect())
}

/// E_D‖·‖²_F of the greedy factorization at δ against the leading terms
/// K(K−1)/p − 4δ(K−1)√(K/p). At δ = 0 the estimate must match within 3
/// standard errors. For δ > 0 the curvature C is fitted from the estimates at
/// 0, δ and 2δ, and the estimate must not exceed leading + max(C, 0)δ² + 3 s.e.
pub fn mc_lemma1(k: usize, p: usize, delta: f64, trials: usize, seed: u64, form: ResidualForm) -> Result<MCReport> {
    check_trials(trials, 2)?;
    check_delta(delta)?;
    let reference = lemma1_leading_terms(k, p, delta);
    let deltas = if delta == 0.0 { vec![0.0] } else { vec![0.0, delta, (2.0 * delta).min(0.999)] };
    let samples = lemma1_samples(k, p, &deltas, trials, seed, form)?;
    let stats: Vec<(f64, f64)> = samples.iter().map(|v| mean_and_se(v)).collect();
    let (estimate, std_error) = *stats.last().unwrap();
    let within_tolerance = if delta == 0.0 {
        within(estimate, std_error, reference)
    } else {
        let (e0, e1, e2) = (stats[0].0, stats[1].0, stats[2].0);
        let curvature = (e2 - 2.0 * e1 + e0) / (2.0 * delta * delta);
        stats[1].0 <= reference + curvature.max(0.0) * delta * delta + MC_SIGMAS * stats[1].1
    };
    let (estimate, std_error) = if delta == 0.0 { (estimate, std_error) } else { stats[1] };
    Ok(MCReport {
        name: format!("lemma1_{}", form.label()),
        estimate,
        std_error,
        reference,
        trials,
        within_tolerance,
        k,
        p: Some(p),
        delta: Some(delta),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub form: ResidualForm,
    pub deltas: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// least-squares slope of the means against δ
    pub slope: f64,
    /// −4(K−1)√(K/p)
    pub predicted: f64,
    pub relative_error: f64,
}

impl SlopeFit {
    pub fn negative(&self) -> bool {
        self.slope < 0.0
    }
}

/// Finite-difference slope in δ of the mean greedy residual.
pub fn lemma1_slope(
    k: usize,
    p: usize,
    deltas: &[f64],
    trials: usize,
    seed: u64,
    form: ResidualForm,
) -> Result<SlopeFit> {
    if deltas.len() < 2 {
        return Err(Error::InvalidArgument("need at least two delta values".into()));
    }
    let samples = lemma1_samples(k, p, deltas, trials, seed, form)?;
    let (means, std_errors): (Vec<f64>, Vec<f64>) = samples.iter().map(|v| mean_and_se(v)).unzip();
    let n = deltas.len() as f64;
    let dx = deltas.iter().sum::<f64>() / n;
    let my = means.iter().sum::<f64>() / n;
    let sxy: f64 = deltas.iter().zip(&means).map(|(x, y)| (x - dx) * (y - my)).sum();
    let sxx: f64 = deltas.iter().map(|x| (x - dx).powi(2)).sum();
    let slope = sxy / sxx;
    let predicted = -4.0 * (k as f64 - 1.0) * (k as f64 / p as f64).sqrt();
    Ok(SlopeFit {
        form,
        deltas: deltas.to_vec(),
        means,
        std_errors,
        slope,
        predicted,
        relative_error: ((slope - predicted) / predicted).abs(),
    })
}

/// Distribution of the iid code coordinates used for δ_A statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodeModel {
    StandardNormal,
    BernoulliGaussian { rho: f64, sigma: f64 },
}

impl CodeModel {
    fn sample(&self, k: usize, r: &mut rng::Rng) -> Vector {
        match *self {
            CodeModel::StandardNormal => Vector::from_fn(k, |_, _| StandardNormal.sample(r)),
            CodeModel::BernoulliGaussian { rho, sigma } => {
                let normal = Normal::new(0.0, sigma).expect("sigma validated");
                Vector::from_fn(k, |_, _| {
                    let active = r.random::<f64>() < rho;
                    let v = normal.sample(r);
                    if active {
                        v
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let CodeModel::BernoulliGaussian { rho, sigma } = *self {
            if !(0.0..=1.0).contains(&rho) || !(sigma > 0.0) {
                return Err(Error::InvalidArgument(format!("bad code model rho={rho}, sigma={sigma}")));
            }
        }
        Ok(())
    }
}

/// δ√(K−1) − δ²/2
pub fn lemma2_bound(k: usize, delta: f64) -> f64 {
    delta * ((k - 1) as f64).sqrt() - delta * delta / 2.0
}

/// E[δ_A(z)]/(λE‖z‖₁) = E[‖Az‖₁ − ‖z‖₁]/E‖z‖₁ with a fresh A ⊂ E_δ per
/// trial (or fixed directions when given). The standard error of the ratio
/// uses the delta method.
pub fn mc_lemma2(
    k: usize,
    delta: f64,
    trials: usize,
    model: CodeModel,
    seed: u64,
    directions: Option<&[Vector]>,
) -> Result<MCReport> {
    check_trials(trials, 2)?;
    check_delta(delta)?;
    model.validate()?;
    let pairs: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::derived(seed, t as u64);
            let a_seed: u64 = r.random();
            let a = sample_e_delta(k, delta, a_seed, directions)?;
            let z = model.sample(k, &mut r);
            let l1 = linalg::l1_norm(&z);
            Ok((linalg::l1_norm(&(&a.a * &z)) - l1, l1))
        })
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    if mb == 0.0 {
        return Err(Error::InvalidArgument("codes are identically zero".into()));
    }
    let ratio = ma / mb;
    let resid: Vec<f64> = pairs.iter().map(|(a, b)| a - ratio * b).collect();
    let (_, se_resid) = mean_and_se(&resid);
    let std_error = se_resid / mb;
    let reference = lemma2_bound(k, delta);
    Ok(MCReport {
        name: "lemma2".into(),
        estimate: ratio,
        std_error,
        reference,
        trials,
        within_tolerance: ratio <= reference + MC_SIGMAS * std_error + 1e-12,
        k,
        p: None,
        delta: Some(delta),
        seed,
    })
}

/// Mean of ‖AᵀA − I‖_F/(2δ√K) over random E_δ draws; within tolerance when
/// every ratio is at most 1.5 and the mean at most 1.2.
pub fn mc_e_delta_unitarity(k: usize, delta: f64, draws: usize, seed: u64) -> Result<MCReport> {
    check_trials(draws, 2)?;
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    let scale = 2.0 * delta * (k as f64).sqrt();
    let ratios: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|t| {
            let a = sample_e_delta(k, delta, rng::derived(seed, t as u64).random(), None)?;
            Ok(e_delta_unitarity_check(&a) / scale)
        })
        .collect::<Result<_>>()?;
    let (estimate, std_error) = mean_and_se(&ratios);
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(MCReport {
        name: "e_delta_unitarity".into(),
        estimate,
        std_error,
        reference: 1.0,
        trials: draws,
        within_tolerance: max <= 1.5 && estimate <= 1.2,
        k,
        p: None,
        delta: Some(delta),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// λ‖z‖₁
    pub lhs: f64,
    /// √(K(K−1)/p)‖z_k − z*‖²
    pub rhs: f64,
    pub margin: f64,
    pub holds: bool,
    /// λ(‖z‖₁ + ‖z*‖₁)
    pub theorem_lhs: f64,
    pub theorem_margin: f64,
    pub theorem_holds: bool,
}

pub fn gap_condition(z: &Vector, z_star: &Vector, z_k: &Vector, lambda: f64, k: usize, p: usize) -> GapEstimate {
    let rhs = (k as f64 * (k as f64 - 1.0) / p as f64).sqrt() * (z_k - z_star).norm_squared();
    let lhs = lambda * linalg::l1_norm(z);
    let theorem_lhs = lhs + lambda * linalg::l1_norm(z_star);
    GapEstimate {
        lhs,
        rhs,
        margin: rhs - lhs,
        holds: lhs <= rhs,
        theorem_lhs,
        theorem_margin: rhs - theorem_lhs,
        theorem_holds: theorem_lhs <= rhs,
    }
}

/// Gap condition along `iters` ISTA iterations from z0, with z = z_k, K = m and p = n.
pub fn gap_trace(p: &LassoProblem, z0: &Vector, z_star: &Vector, iters: usize) -> Vec<GapEstimate> {
    let trace = ista(p, z0, iters);
    let (k, n) = (p.atoms(), p.dict().nrows());
    trace
        .iterates
        .expect("ista keeps iterates")
        .iter()
        .map(|z| gap_condition(z, z_star, z, p.lambda, k, n))
        .collect()
}

/// True when the margins never increase before the first failure and a failure occurs.
pub fn non_increasing_to_failure(trace: &[GapEstimate]) -> bool {
    let Some(fail) = trace.iter().position(|g| !g.holds) else {
        return false;
    };
    trace[..=fail].windows(2).all(|w| w[1].margin <= w[0].margin + 1e-12 * (1.0 + w[0].margin.abs()))
}
