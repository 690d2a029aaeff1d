//! Acceptance suite: thirteen numbered criteria, one PASS/FAIL line each.
//! Runs as a plain binary (`harness = false`) so the lines are always shown;
//! exits non-zero when any criterion fails.

use std::fs;
use std::time::Instant;

use rand::Rng as _;
use statrs::function::gamma::ln_gamma;

use sparsecode_core::experiments::{self, ExperimentConfig, ExperimentKind, Method};
use sparsecode_core::factorized::{factorized_step, prop1_check, theorem1_bound, Factorization};
use sparsecode_core::generic_gap::{self, CodeModel, ResidualForm};
use sparsecode_core::lasso::{
    build_problem, sample_dataset, sample_gaussian_dictionary, BernoulliGaussianModel, DictionaryKind, LassoProblem,
};
use sparsecode_core::linalg::{self, Mat, Vector};
use sparsecode_core::nets::{self, Batch, NetKind, Network};
use sparsecode_core::rng;
use sparsecode_core::solvers::{fista, ista, reference_solution};

// Pinned tolerances.
const C1_PROBLEMS: usize = 50;
const C1_MAX_K: usize = 500;
const C1_REL_TOL: f64 = 1e-9;
const C2_PAIRS: usize = 1000;
const C2_MAX_M: usize = 16;
const C2_TOL: f64 = 1e-9;
const C3_TOL: f64 = 1e-9;
const C4_PROBLEMS: usize = 20;
const C4_DEPTH: usize = 10;
const C4_TOL: f64 = 1e-10;
const C5_SEEDS: u64 = 20;
const C5_STEP: f64 = 1e-6;
const C5_TOL: f64 = 1e-5;
const SIGMAS: f64 = 3.0;
const C6_TRIALS: usize = 2000;
const C7_TRIALS: usize = 5000;
const C8_TRIALS: usize = 2000;
const C8_DELTAS: [f64; 3] = [0.005, 0.01, 0.02];
const C8_SLOPE_REL_TOL: f64 = 0.25;
const C9_TRIALS: usize = 5000;
const C10_DEPTHS: [usize; 4] = [1, 2, 4, 7];
const C10_RATIO_AT_4: f64 = 0.5;
const C10_BUDGET_SECS: f64 = 20.0 * 60.0;
const C11_RATIO_AT_4: f64 = 0.5;
const C12_MONOTONE_FRACTION: f64 = 0.9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gaussian_problem(n: usize, m: usize, lambda: f64, rho: f64, sigma: f64, seed: u64) -> LassoProblem {
    let d = sample_gaussian_dictionary(n, m, seed).unwrap();
    let model = BernoulliGaussianModel::new(rho, sigma, m).unwrap();
    let (x, _) = sample_dataset(&d, &model, 1, seed.wrapping_add(7919)).unwrap();
    build_problem(d, x.column(0).into_owned(), lambda).unwrap()
}

fn ista_bound(p: &LassoProblem, z0: &Vector, z_star: &Vector, k: usize) -> f64 {
    p.lipschitz() * (z_star - z0).norm_squared() / (2.0 * k as f64)
}

fn c1_ista_rate() -> Verdict {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..C1_PROBLEMS {
        let p = gaussian_problem(64, 100, 0.01, 0.05, 10.0, 100 + i as u64);
        let star = reference_solution(&p, 1e-12).unwrap();
        let f_star = p.cost(&star);
        let z0 = Vector::zeros(100);
        let costs = ista(&p, &z0, C1_MAX_K).costs;
        for k in 1..=C1_MAX_K {
            let bound = ista_bound(&p, &z0, &star, k);
            let excess = costs[k] - f_star - bound;
            worst = worst.max(excess / (1.0 + bound.abs()));
            if excess > C1_REL_TOL * (1.0 + bound.abs()) {
                violations += 1;
            }
        }
    }
    verdict(
        violations == 0,
        format!("{violations} violations over {} (problem, k) pairs; max relative excess {worst:.3e}", C1_PROBLEMS * C1_MAX_K),
    )
}

/// A near-identity rotation with the smallest diagonal S making AᵀSA − B PSD, plus a random shift.
fn psd_factorization(gram: &Mat, scale: f64, r: &mut rng::Rng) -> Factorization {
    let m = gram.nrows();
    let a = linalg::random_rotation_near_identity(m, scale, r);
    let rotated = &a * gram * a.transpose();
    let diag = rotated.diagonal();
    let gap = Mat::from_diagonal(&diag) - &rotated;
    let shift = (-linalg::min_eigenvalue(&gap)).max(0.0) + 1e-8 + 0.1 * r.random::<f64>();
    Factorization::new(a, diag.add_scalar(shift), gram).unwrap()
}

fn soft(u: f64, t: f64) -> f64 {
    u.signum() * (u.abs() - t).max(0.0)
}

fn c2_proposition() -> Verdict {
    let mut r = rng::seeded(2024);
    let mut failures = 0;
    let mut not_psd = 0;
    let mut mismatch = 0.0f64;
    for t in 0..C2_PAIRS {
        let m = 2 + t % (C2_MAX_M - 1);
        let n = 1 + r.random_range(0..m);
        let lambda = 10f64.powf(r.random_range(-3.0..0.0));
        let p = gaussian_problem(n, m, lambda, 0.3, 1.0, 5000 + t as u64);
        let star = reference_solution(&p, 1e-12).unwrap();
        let f = psd_factorization(p.gram(), r.random_range(0.0..0.5), &mut r);
        if !f.is_psd() {
            not_psd += 1;
        }
        let scale = 10f64.powf(r.random_range(-2.0..1.0));
        let zk = &star + Vector::from_fn(m, |_, _| scale * r.random_range(-1.0..1.0));

        // independent evaluation of the step and both sides
        let s = &f.s;
        let grad = p.gram() * &zk - &p.dtx;
        let u = &f.a * &zk - (&f.a * grad).component_div(s);
        let w = Vector::from_fn(m, |i, _| soft(u[i], lambda / s[i]));
        let next = f.a.transpose() * w;
        let delta = |z: &Vector| lambda * ((&f.a * z).abs().sum() - z.abs().sum());
        let r_mat = f.a.transpose() * Mat::from_diagonal(s) * &f.a - p.gram();
        let r_norm = linalg::sym_spectral_norm(&linalg::symmetrize(&r_mat));
        let lhs = p.cost(&next) - p.cost(&star);
        let rhs = 0.5 * r_norm * (&zk - &star).norm_squared() + delta(&star) - delta(&next);
        if lhs > rhs + C2_TOL * (1.0 + rhs.abs()) {
            failures += 1;
        }
        let rep = prop1_check(&p, &zk, &f, &star);
        mismatch = mismatch.max((rep.lhs - lhs).abs()).max((rep.rhs - rhs).abs() / (1.0 + rhs.abs()));
        mismatch = mismatch.max((factorized_step(&p, &zk, &f) - &next).amax());
    }
    verdict(
        failures == 0 && not_psd == 0 && mismatch <= 1e-9,
        format!("{failures} failures over {C2_PAIRS} pairs (m <= {C2_MAX_M}); {not_psd} non-PSD; library vs oracle {mismatch:.2e}"),
    )
}

fn c3_identity_schedule() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let p = gaussian_problem(20, 30, 0.05, 0.2, 1.0, 300 + seed);
        let star = reference_solution(&p, 1e-13).unwrap();
        let f = Factorization::identity(p.gram(), p.lipschitz()).unwrap();
        let z0 = Vector::zeros(30);
        for k in [1usize, 5, 20] {
            let rep = theorem1_bound(&p, &z0, &vec![f.clone(); k], &star).unwrap();
            worst = worst.max((rep.term("spectral_rhs") - ista_bound(&p, &z0, &star, k)).abs());
        }
    }
    verdict(worst <= C3_TOL, format!("max |bound - L||z*-z0||^2/(2k)| = {worst:.2e} for k in {{1, 5, 20}}"))
}

fn c4_init_equivalence() -> Verdict {
    let mut worst = [0.0f64; 3];
    for i in 0..C4_PROBLEMS {
        let p = gaussian_problem(16, 24, 0.05, 0.2, 1.0, 400 + i as u64);
        let z0 = Vector::zeros(24);
        let ista_codes = ista(&p, &z0, C4_DEPTH).iterates.unwrap();
        let fista_codes = fista(&p, &z0, C4_DEPTH).iterates.unwrap();
        for (slot, (kind, reference)) in
            [(NetKind::Lista, &ista_codes), (NetKind::Lfista, &fista_codes), (NetKind::Facnet, &ista_codes)]
                .into_iter()
                .enumerate()
        {
            let net = Network::init(kind, &p.op, p.lambda, C4_DEPTH, 1.0);
            let codes = net.forward(&p);
            for (a, b) in codes.iter().zip(reference.iter()) {
                worst[slot] = worst[slot].max((a - b).amax());
            }
        }
    }
    verdict(
        worst.iter().all(|w| *w <= C4_TOL),
        format!("max coordinate difference lista/ista {:.1e}, lfista/fista {:.1e}, facnet/ista {:.1e}", worst[0], worst[1], worst[2]),
    )
}

fn c5_gradients() -> Verdict {
    let mut worst = [0.0f64; 3];
    let mut checked = 0;
    let mut skipped = 0;
    for seed in 0..C5_SEEDS {
        let op = sparsecode_core::lasso::CodingOperator::new(sample_gaussian_dictionary(5, 8, 600 + seed).unwrap());
        let model = BernoulliGaussianModel::new(0.3, 1.0, 8).unwrap();
        let b = Batch::sample(&op, &model, 6, 0.05, &mut rng::seeded(700 + seed)).unwrap();
        for (slot, kind) in NetKind::ALL.into_iter().enumerate() {
            let mut net = Network::init(kind, &op, 0.05, 3, 0.7);
            let mut r = rng::seeded(800 + seed);
            for t in net.tensors_mut() {
                for v in t.iter_mut() {
                    *v += 0.05 * r.random_range(-1.0..1.0);
                }
            }
            net.clamp_thresholds();
            let chk = nets::finite_difference_check(&net, &b, C5_STEP);
            worst[slot] = worst[slot].max(chk.max_rel_error);
            checked += chk.checked;
            skipped += chk.skipped;
        }
    }
    verdict(
        worst.iter().all(|w| *w <= C5_TOL) && checked > 10 * skipped,
        format!(
            "max relative error lista {:.1e}, lfista {:.1e}, facnet {:.1e}; {checked} coordinates checked, {skipped} skipped at kinks",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c6_wishart() -> Verdict {
    let rep = generic_gap::mc_wishart_frobenius(20, 10, C6_TRIALS, 6).unwrap();
    let exact = 20.0 * 19.0 / 10.0 + 20.0;
    let pass = (rep.estimate - exact).abs() <= SIGMAS * rep.std_error && exact == 58.0;
    verdict(pass, format!("estimate {:.4} +- {:.4} vs {exact}", rep.estimate, rep.std_error))
}

fn c7_chi() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (k, p)) in [(10usize, 20usize), (30, 50)].into_iter().enumerate() {
        let (first, second) = generic_gap::mc_chi_moment(k, p, C7_TRIALS, 70 + i as u64).unwrap();
        let (kf, pf) = (k as f64, p as f64);
        let mean = (2.0 / pf).sqrt() * (ln_gamma(kf / 2.0) - ln_gamma((kf - 1.0) / 2.0)).exp();
        let second_ref = (kf - 1.0) / pf;
        let ok1 = (first.estimate - mean).abs() <= SIGMAS * first.std_error;
        let ok2 = (second.estimate - second_ref).abs() <= SIGMAS * second.std_error;
        pass &= ok1 && ok2;
        parts.push(format!(
            "(K={k},p={p}) E[Y] {:.4} +- {:.4} vs {mean:.4}, E[Y^2] {:.4} +- {:.4} vs {second_ref:.4}",
            first.estimate, first.std_error, second.estimate, second.std_error
        ));
    }
    verdict(pass, parts.join("; "))
}

fn c8_lemma1() -> Verdict {
    let (k, p) = (20, 10);
    let seed = 8;
    let at_zero = generic_gap::mc_lemma1(k, p, 0.0, C8_TRIALS, seed, ResidualForm::Inverse).unwrap();
    let anchor = (k * (k - 1)) as f64 / p as f64;
    let anchor_ok = (at_zero.estimate - anchor).abs() <= SIGMAS * at_zero.std_error;
    let fit = generic_gap::lemma1_slope(k, p, &C8_DELTAS, C8_TRIALS, seed, ResidualForm::Inverse).unwrap();
    let predicted = -4.0 * (k as f64 - 1.0) * (k as f64 / p as f64).sqrt();
    let slope_ok = fit.slope < 0.0 && ((fit.slope - predicted) / predicted).abs() <= C8_SLOPE_REL_TOL;
    let transpose = generic_gap::lemma1_slope(k, p, &C8_DELTAS, C8_TRIALS, seed, ResidualForm::Transpose).unwrap();
    verdict(
        anchor_ok && slope_ok,
        format!(
            "delta=0 mean {:.3} +- {:.3} vs {anchor} ({}); slope of ||A^-1 S A - B||^2 {:.2} vs {predicted:.2} ({}); \
             [diagnostic] slope of ||A^T S A - B||^2 {:.2}",
            at_zero.estimate,
            at_zero.std_error,
            if anchor_ok { "ok" } else { "off" },
            fit.slope,
            if slope_ok { "ok" } else { "off" },
            transpose.slope
        ),
    )
}

fn c9_lemma2() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, delta) in [0.01, 0.05].into_iter().enumerate() {
        let rep = generic_gap::mc_lemma2(50, delta, C9_TRIALS, CodeModel::StandardNormal, 90 + i as u64, None).unwrap();
        let bound = delta * 49f64.sqrt() - delta * delta / 2.0;
        pass &= rep.estimate <= bound + SIGMAS * rep.std_error;
        parts.push(format!("delta={delta}: {:.2e} +- {:.1e} <= {bound:.4}", rep.estimate, rep.std_error));
    }
    verdict(pass, parts.join("; "))
}

fn c10_fig_layers() -> Verdict {
    let config = ExperimentConfig::preset(ExperimentKind::FigLayers);
    let start = Instant::now();
    let out = experiments::run_fig_layers(&config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut pass = config.depths == C10_DEPTHS && secs < C10_BUDGET_SECS;
    let mut parts = vec![format!("{secs:.0}s of {C10_BUDGET_SECS:.0}s budget")];
    for &rho in &config.rho_levels {
        let gap = |m: Method, d: usize| out.table.get(rho, m, d).unwrap().mean_cost_gap;
        for method in [Method::Lista, Method::Facnet] {
            let mut ok = C10_DEPTHS.iter().all(|&d| gap(method, d) <= gap(Method::Ista, d));
            let ratio = gap(method, 4) / gap(Method::Ista, 4);
            ok &= ratio < C10_RATIO_AT_4;
            pass &= ok;
            parts.push(format!("rho={rho} {}: depth-4 ratio {ratio:.3}", method.name()));
        }
    }
    verdict(pass, parts.join("; "))
}

fn c11_fig_adverse() -> Verdict {
    let config = ExperimentConfig {
        depths: vec![1, 4],
        methods: vec![Method::Ista, Method::Lista, Method::Facnet],
        ..ExperimentConfig::preset(ExperimentKind::FigAdverse)
    };
    let out = experiments::run_fig_adverse(&config).unwrap();
    let gap = |m: Method, d: usize| out.table.get(config.rho, m, d).unwrap().mean_cost_gap;
    let ratio4 = gap(Method::Facnet, 4) / gap(Method::Ista, 4);
    let ratio1 = gap(Method::Facnet, 1) / gap(Method::Ista, 1);
    let lista4 = gap(Method::Lista, 4) / gap(Method::Ista, 4);
    verdict(
        ratio4 >= C11_RATIO_AT_4 && ratio1 <= 1.0,
        format!("facnet/ista gap ratio at depth 4 {ratio4:.3} (lista {lista4:.3}), at depth 1 {ratio1:.3}"),
    )
}

fn c12_fig_gap() -> Verdict {
    let config = ExperimentConfig::preset(ExperimentKind::FigGap);
    let out = experiments::run_fig_gap(&config).unwrap();
    let gauss = out.summary(DictionaryKind::Gaussian).unwrap();
    let adv = out.summary(DictionaryKind::FourierAdversarial).unwrap();
    let (g0, a0) = (gauss.trace[0].mean_margin, adv.trace[0].mean_margin);
    let pass = (config.n, config.m, config.gap.problems) == (16, 32, 50)
        && g0 > a0
        && gauss.monotone_fraction >= C12_MONOTONE_FRACTION
        && adv.monotone_fraction >= C12_MONOTONE_FRACTION;
    verdict(
        pass,
        format!(
            "margin at iteration 0: gaussian {g0:.3} vs adversarial {a0:.3}; non-increasing to failure {:.0}% / {:.0}%",
            100.0 * gauss.monotone_fraction,
            100.0 * adv.monotone_fraction
        ),
    )
}

fn c13_determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let layers = ExperimentConfig {
        n: 16,
        m: 24,
        rho: 0.2,
        sigma: 1.0,
        lambda: 0.05,
        depths: vec![1, 3],
        test_size: 200,
        train: nets::TrainConfig { steps: 200, batch_size: 32, eval_every: 50, mu: 10.0, ..Default::default() },
        ..ExperimentConfig::preset(ExperimentKind::Custom)
    };
    let configs = [
        (layers, vec!["results.csv", "training.csv", "curves/rho0.2_facnet_d3.csv", "models/rho0.2_lfista_d3/layer2_W_m.mat"]),
        (ExperimentConfig::preset(ExperimentKind::FigGap), vec!["results.csv", "gap_summary.csv"]),
        (ExperimentConfig::preset(ExperimentKind::McVerify), vec!["results.csv", "diagnostics.csv"]),
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (i, (config, files)) in configs.into_iter().enumerate() {
        let dirs = [root.path().join(format!("{i}a")), root.path().join(format!("{i}b"))];
        for d in &dirs {
            let c = ExperimentConfig { output_dir: Some(d.clone()), ..config.clone() };
            experiments::run_experiment(&c).unwrap();
        }
        for f in files {
            compared += 1;
            if fs::read(dirs[0].join(f)).unwrap() != fs::read(dirs[1].join(f)).unwrap() {
                differing.push(format!("{}:{f}", config.experiment.name()));
            }
        }
    }
    verdict(differing.is_empty(), format!("{compared} output files compared, differing: {differing:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 13] = [
        ("ISTA rate bound", c1_ista_rate),
        ("factorized step inequality", c2_proposition),
        ("identity schedule bound", c3_identity_schedule),
        ("networks at initialization", c4_init_equivalence),
        ("gradient correctness", c5_gradients),
        ("Wishart moment", c6_wishart),
        ("chi moments", c7_chi),
        ("greedy factorization first order", c8_lemma1),
        ("l1 commutation bound", c9_lemma2),
        ("learned acceleration, Gaussian", c10_fig_layers),
        ("no sustained acceleration, adversarial", c11_fig_adverse),
        ("gap condition traces", c12_fig_gap),
        ("determinism", c13_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {:>2} {} {name}: {} ({secs:.1}s)",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
