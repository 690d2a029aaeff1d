//! ISTA, FISTA, high-accuracy reference solutions and the one-layer linear
//! warm-start baseline.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;

use crate::error::{check_dims, Error, Result};
use crate::lasso::{shrink, CodingOperator, LassoProblem};
use crate::linalg::{self, Mat, Vector};
use crate::rng;

/// Per-iteration record of a solver run; `costs[k]` is F(z_k).
#[derive(Debug, Clone)]
pub struct SolverTrace {
    pub costs: Vec<f64>,
    pub iterates: Option<Vec<Vector>>,
    pub support_sizes: Vec<usize>,
    pub wall_time: f64,
    pub solution: Vector,
}

impl SolverTrace {
    fn start(p: &LassoProblem, z0: &Vector, keep_iterates: bool) -> Self {
        Self {
            costs: vec![p.cost(z0)],
            iterates: keep_iterates.then(|| vec![z0.clone()]),
            support_sizes: vec![linalg::l0_norm(z0)],
            wall_time: 0.0,
            solution: z0.clone(),
        }
    }

    fn push(&mut self, p: &LassoProblem, z: &Vector) {
        self.costs.push(p.cost(z));
        self.support_sizes.push(linalg::l0_norm(z));
        if let Some(it) = self.iterates.as_mut() {
            it.push(z.clone());
        }
    }

    pub fn iterations(&self) -> usize {
        self.costs.len() - 1
    }

    /// CSV with columns iteration,cost,cost_gap,support_size. `cost_gap` is
    /// left empty when no optimal value is supplied.
    pub fn to_csv(&self, optimal_cost: Option<f64>) -> String {
        let mut out = String::from("iteration,cost,cost_gap,support_size\n");
        for (k, (c, s)) in self.costs.iter().zip(&self.support_sizes).enumerate() {
            let gap = optimal_cost.map(|f| format!("{:?}", c - f)).unwrap_or_default();
            writeln!(out, "{k},{c:?},{gap},{s}").unwrap();
        }
        out
    }
}

/// One proximal gradient step with step size 1/L:
/// h_{λ/L}(z − (Bz − Dᵀx)/L).
pub fn ista_step(p: &LassoProblem, z: &Vector) -> Vector {
    let grad = p.smooth_gradient(z);
    let l = p.lipschitz();
    let theta = p.lambda / l;
    Vector::from_fn(z.len(), |i, _| shrink(z[i] - grad[i] / l, theta))
}

pub fn ista(p: &LassoProblem, z0: &Vector, iters: usize) -> SolverTrace {
    assert_eq!(z0.len(), p.atoms(), "initial code length");
    let t0 = Instant::now();
    let mut trace = SolverTrace::start(p, z0, true);
    let mut z = z0.clone();
    for _ in 0..iters {
        z = ista_step(p, &z);
        trace.push(p, &z);
    }
    trace.solution = z;
    trace.wall_time = t0.elapsed().as_secs_f64();
    trace
}

/// t_0 = 1, t_{k+1} = (1 + √(1 + 4t_k²))/2; returns t_0..t_{count-1}.
pub fn fista_momentum(count: usize) -> Vec<f64> {
    let mut ts = Vec::with_capacity(count);
    let mut t = 1.0f64;
    for _ in 0..count {
        ts.push(t);
        t = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
    }
    ts
}

/// Momentum weight (t_{k−1} − 1)/t_k applied when computing z_{k+1}; zero at k = 0.
pub fn fista_weight(ts: &[f64], k: usize) -> f64 {
    if k == 0 {
        0.0
    } else {
        (ts[k - 1] - 1.0) / ts[k]
    }
}

pub fn fista(p: &LassoProblem, z0: &Vector, iters: usize) -> SolverTrace {
    assert_eq!(z0.len(), p.atoms(), "initial code length");
    let t0 = Instant::now();
    let ts = fista_momentum(iters + 1);
    let mut trace = SolverTrace::start(p, z0, true);
    let mut prev = z0.clone();
    let mut z = z0.clone();
    for k in 0..iters {
        let w = fista_weight(&ts, k);
        let extrapolated = &z + (&z - &prev) * w;
        let next = ista_step(p, &extrapolated);
        prev = std::mem::replace(&mut z, next);
        trace.push(p, &z);
    }
    trace.solution = z;
    trace.wall_time = t0.elapsed().as_secs_f64();
    trace
}

/// ‖z − h_{λ/L}(z − ∇E(z)/L)‖₂
pub fn fixed_point_residual(p: &LassoProblem, z: &Vector) -> f64 {
    (z - ista_step(p, z)).norm()
}

pub const REFERENCE_TOL: f64 = 1e-12;
pub const REFERENCE_MAX_ITER: usize = 1_000_000;

/// High-accuracy minimizer: FISTA with gradient-based adaptive restart until
/// the fixed-point residual drops below `tol`.
pub fn reference_solution(p: &LassoProblem, tol: f64) -> Result<Vector> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let m = p.atoms();
    if p.dtx.amax() <= p.lambda {
        return Ok(Vector::zeros(m));
    }
    let mut z = Vector::zeros(m);
    let mut prev = z.clone();
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 0..REFERENCE_MAX_ITER {
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let extrapolated = &z + (&z - &prev) * ((t - 1.0) / t_next);
        let next = ista_step(p, &extrapolated);
        // restart when the step points against the momentum direction
        if (&extrapolated - &next).dot(&(&next - &z)) > 0.0 {
            t = 1.0;
        } else {
            t = t_next;
        }
        prev = std::mem::replace(&mut z, next);
        if it % 10 == 9 {
            residual = fixed_point_residual(p, &z);
            if residual <= tol {
                return Ok(z);
            }
        }
    }
    // plain ISTA polish is monotone; try it before giving up
    for _ in 0..1000 {
        z = ista_step(p, &z);
    }
    residual = residual.min(fixed_point_residual(p, &z));
    if residual <= tol {
        return Ok(z);
    }
    Err(Error::Convergence { iterations: REFERENCE_MAX_ITER, residual })
}

/// z_out = A⁰x, a learned starting point for ISTA.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    pub weights: Mat,
}

impl LinearBaseline {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self { weights: Mat::zeros(m, n) }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.weights * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearConfig {
    pub steps: usize,
    /// Step size as a fraction of 1/(L·E‖x‖²), the inverse curvature of the
    /// smooth part along A⁰.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { steps: 10_000, learning_rate: 0.01, batch_size: 1, seed: 0 }
    }
}

/// F_x(A⁰x) for one sample.
pub fn baseline_cost(op: &CodingOperator, baseline: &LinearBaseline, x: &Vector, lambda: f64) -> f64 {
    let z = baseline.apply(x);
    0.5 * (x - op.dict.entries() * &z).norm_squared() + lambda * linalg::l1_norm(&z)
}

/// Gradient of the smooth part ½‖x − DA⁰x‖² with respect to A⁰.
pub fn baseline_smooth_gradient(op: &CodingOperator, baseline: &LinearBaseline, x: &Vector) -> Mat {
    let z = baseline.apply(x);
    let g = op.dict.entries().transpose() * (op.dict.entries() * &z - x);
    &g * x.transpose()
}

fn baseline_gradient(op: &CodingOperator, baseline: &LinearBaseline, x: &Vector, lambda: f64) -> Mat {
    let z = baseline.apply(x);
    // subgradient 0 at the kinks of ‖A⁰x‖₁
    let g = op.dict.entries().transpose() * (op.dict.entries() * &z - x) + z.map(linalg::sign) * lambda;
    &g * x.transpose()
}

#[derive(Debug, Clone)]
pub struct LinearTraining {
    pub baseline: LinearBaseline,
    /// Mini-batch loss before each step.
    pub losses: Vec<f64>,
}

/// Stochastic (sub)gradient descent on the mean of F_x(A⁰x) over the columns of `samples`.
pub fn train_linear_baseline(
    op: &CodingOperator,
    samples: &Mat,
    lambda: f64,
    config: &LinearConfig,
) -> Result<LinearTraining> {
    check_dims("sample dimension", op.signal_dim(), samples.nrows())?;
    let count = samples.ncols();
    if count == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "training needs samples, a positive batch size and learning rate".into(),
        ));
    }
    let mean_sq = samples.column_iter().map(|c| c.norm_squared()).sum::<f64>() / count as f64;
    let curvature = op.lipschitz * mean_sq.max(f64::MIN_POSITIVE);
    let step = config.learning_rate / curvature;

    let mut baseline = LinearBaseline::zeros(op.atoms(), op.signal_dim());
    let mut r = rng::seeded(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    let mut initial = None;
    for s in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| r.random_range(0..count)).collect();
        let mut grad = Mat::zeros(op.atoms(), op.signal_dim());
        let mut loss = 0.0;
        for &i in &batch {
            let x = samples.column(i).into_owned();
            loss += baseline_cost(op, &baseline, &x, lambda);
            grad += baseline_gradient(op, &baseline, &x, lambda);
        }
        let b = batch.len() as f64;
        loss /= b;
        let init = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 1e6 * init.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence { step: s, loss, initial: init });
        }
        losses.push(loss);
        baseline.weights -= grad * (step / b);
    }
    Ok(LinearTraining { baseline, losses })
}

pub fn warm_started_ista(p: &LassoProblem, baseline: &LinearBaseline, iters: usize) -> SolverTrace {
    ista(p, &baseline.apply(&p.x), iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lasso::{
        build_problem, sample_dataset, sample_gaussian_dictionary, soft_threshold,
        BernoulliGaussianModel, Dictionary, DictionaryKind,
    };
    use crate::linalg::random_orthogonal;

    fn gaussian_problem(n: usize, m: usize, lambda: f64, seed: u64) -> LassoProblem {
        let d = sample_gaussian_dictionary(n, m, seed).unwrap();
        let model = BernoulliGaussianModel::new(0.1, 1.0, m).unwrap();
        let (x, _) = sample_dataset(&d, &model, 1, seed + 1000).unwrap();
        build_problem(d, x.column(0).into_owned(), lambda).unwrap()
    }

    fn orthonormal_problem(m: usize, lambda: f64, seed: u64) -> LassoProblem {
        let mut r = rng::seeded(seed);
        let q = random_orthogonal(m, &mut r);
        let d = Dictionary::from_matrix(q, DictionaryKind::UserSupplied, seed).unwrap();
        let x = Vector::from_fn(m, |i, _| ((i * 7 + 3) % 5) as f64 - 2.0);
        build_problem(d, x, lambda).unwrap()
    }

    #[test]
    fn zero_iterations() {
        let p = gaussian_problem(8, 12, 0.1, 1);
        let z0 = Vector::from_element(12, 0.1);
        let tr = ista(&p, &z0, 0);
        assert_eq!(tr.costs, vec![p.cost(&z0)]);
        assert_eq!(tr.solution, z0);
    }

    #[test]
    fn orthonormal_design_solved_in_one_step() {
        let p = orthonormal_problem(6, 0.3, 2);
        assert!((p.lipschitz() - 1.0).abs() < 1e-12);
        let closed = soft_threshold(&p.dtx, &Vector::from_element(6, 0.3)).unwrap();
        let tr = ista(&p, &Vector::zeros(6), 1);
        assert!((&tr.solution - &closed).norm() < 1e-12);
        let star = reference_solution(&p, 1e-12).unwrap();
        assert!((star - closed).norm() < 1e-11);
    }

    #[test]
    fn large_lambda_gives_zero_solution() {
        let p = gaussian_problem(8, 12, 0.1, 3);
        let lam = p.dtx.amax() * 1.01;
        let p = p.op.problem(p.x.clone(), lam).unwrap();
        assert_eq!(reference_solution(&p, 1e-12).unwrap(), Vector::zeros(12));
    }

    #[test]
    fn reference_solution_meets_residual() {
        for seed in 0..5 {
            let p = gaussian_problem(20, 30, 0.05, seed);
            let z = reference_solution(&p, 1e-12).unwrap();
            assert!(fixed_point_residual(&p, &z) <= 1e-12);
        }
        assert!(reference_solution(&gaussian_problem(4, 6, 0.1, 0), 0.0).is_err());
    }

    #[test]
    fn ista_is_monotone_and_respects_rate() {
        for seed in 0..5 {
            let p = gaussian_problem(16, 24, 0.05, seed);
            let star = reference_solution(&p, 1e-12).unwrap();
            let fstar = p.cost(&star);
            let z0 = Vector::zeros(24);
            let tr = ista(&p, &z0, 300);
            for w in tr.costs.windows(2) {
                assert!(w[1] <= w[0] + 1e-10);
            }
            let dist = (&star - &z0).norm_squared();
            for (k, c) in tr.costs.iter().enumerate().skip(1) {
                let bound = p.lipschitz() * dist / (2.0 * k as f64);
                assert!(c - fstar <= bound + 1e-9 * (1.0 + bound));
            }
        }
    }

    #[test]
    fn fista_first_step_and_momentum() {
        let ts = fista_momentum(3);
        assert_eq!(ts[0], 1.0);
        assert!((ts[1] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-15);
        let p = gaussian_problem(8, 12, 0.1, 4);
        let z0 = Vector::zeros(12);
        assert_eq!(fista(&p, &z0, 1).solution, ista(&p, &z0, 1).solution);
    }

    #[test]
    fn fista_beats_ista_at_hundred_iterations() {
        let mut wins = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let p = gaussian_problem(32, 50, 0.01, 100 + seed);
            let z0 = Vector::zeros(50);
            let fi = *fista(&p, &z0, 100).costs.last().unwrap();
            let is = *ista(&p, &z0, 100).costs.last().unwrap();
            if fi <= is + 1e-12 {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * seeds as f64, "fista won {wins}/{seeds}");
    }

    #[test]
    fn ista_and_fista_agree_in_the_limit() {
        let p = gaussian_problem(16, 24, 0.05, 9);
        let z0 = Vector::zeros(24);
        let a = *ista(&p, &z0, 10_000).costs.last().unwrap();
        let b = *fista(&p, &z0, 10_000).costs.last().unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn trace_csv_layout() {
        let p = gaussian_problem(4, 6, 0.1, 1);
        let tr = ista(&p, &Vector::zeros(6), 2);
        let csv = tr.to_csv(Some(0.0));
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,cost,cost_gap,support_size");
        assert_eq!(lines.len(), 4);
        assert!(tr.to_csv(None).lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn baseline_zero_cost_and_gradient() {
        let p = gaussian_problem(5, 8, 0.1, 5);
        let zero = LinearBaseline::zeros(8, 5);
        assert!((baseline_cost(&p.op, &zero, &p.x, 0.1) - 0.5 * p.x.norm_squared()).abs() < 1e-14);

        // central finite differences on the smooth part
        let mut r = rng::seeded(6);
        let a = LinearBaseline {
            weights: Mat::from_fn(8, 5, |_, _| r.random_range(-0.3..0.3)),
        };
        let g = baseline_smooth_gradient(&p.op, &a, &p.x);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..8 {
            for j in 0..5 {
                let mut plus = a.clone();
                plus.weights[(i, j)] += h;
                let mut minus = a.clone();
                minus.weights[(i, j)] -= h;
                let fd = (baseline_cost(&p.op, &plus, &p.x, 0.0)
                    - baseline_cost(&p.op, &minus, &p.x, 0.0))
                    / (2.0 * h);
                let denom = fd.abs().max(g[(i, j)].abs()).max(1e-8);
                worst = worst.max((fd - g[(i, j)]).abs() / denom);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn baseline_training_improves_on_zero() {
        let d = sample_gaussian_dictionary(16, 24, 7).unwrap();
        let model = BernoulliGaussianModel::new(0.2, 1.0, 24).unwrap();
        let (train, _) = sample_dataset(&d, &model, 500, 8).unwrap();
        let (test, _) = sample_dataset(&d, &model, 200, 9).unwrap();
        let op = CodingOperator::new(d);
        let cfg = LinearConfig { steps: 4000, learning_rate: 0.1, batch_size: 10, seed: 1 };
        let fit = train_linear_baseline(&op, &train, 0.05, &cfg).unwrap();
        let zero = LinearBaseline::zeros(24, 16);
        let mean = |b: &LinearBaseline| {
            test.column_iter()
                .map(|c| baseline_cost(&op, b, &c.into_owned(), 0.05))
                .sum::<f64>()
                / test.ncols() as f64
        };
        assert!(mean(&fit.baseline) < mean(&zero));
        let w = 200;
        let head: f64 = fit.losses[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = fit.losses[fit.losses.len() - w..].iter().sum::<f64>() / w as f64;
        assert!(tail < head);

        // warm start composes with ista
        let p = op.problem(test.column(0).into_owned(), 0.05).unwrap();
        let warm = warm_started_ista(&p, &fit.baseline, 3);
        let direct = ista(&p, &fit.baseline.apply(&p.x), 3);
        assert_eq!(warm.costs, direct.costs);
        assert_eq!(warm_started_ista(&p, &fit.baseline, 0).costs[0], p.cost(&fit.baseline.apply(&p.x)));
    }

    #[test]
    fn baseline_divergence_is_reported() {
        let d = sample_gaussian_dictionary(6, 8, 7).unwrap();
        let model = BernoulliGaussianModel::new(0.5, 1.0, 8).unwrap();
        let (train, _) = sample_dataset(&d, &model, 50, 8).unwrap();
        let op = CodingOperator::new(d);
        let cfg = LinearConfig { steps: 500, learning_rate: 50.0, batch_size: 5, seed: 1 };
        assert!(matches!(
            train_linear_baseline(&op, &train, 0.05, &cfg),
            Err(Error::Divergence { .. })
        ));
    }
}
