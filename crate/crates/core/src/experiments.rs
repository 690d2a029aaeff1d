//! Experiment pipelines: config schema, the layer-wise comparison of classical
//! and learned solvers, gap-condition traces and the Monte Carlo bundle.
//!
//! Every pipeline is a pure function of its [`ExperimentConfig`]; random
//! streams are derived from `seed` (data) and `train.seed` (mini-batches).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generic_gap::{self, GapEstimate, MCReport, ResidualForm, SlopeFit};
use crate::lasso::{
    adversarial_fourier_dictionary, sample_dataset, sample_gaussian_dictionary, BernoulliGaussianModel,
    CodingOperator, Dictionary, DictionaryKind,
};
use crate::linalg::Vector;
use crate::nets::{self, Batch, EvalSet, GapSummary, NetKind, TrainConfig};
use crate::rng;
use crate::solvers::{self, LinearConfig, REFERENCE_TOL};

pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const TRAINING_FILE: &str = "training.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const GAP_SUMMARY_FILE: &str = "gap_summary.csv";
pub const RESULT_CSV_HEADER: &str = "rho,method,depth,mean_cost_gap,std_error,n_samples";
/// Cost gaps below this are a solver bug, not round-off.
pub const NEGATIVE_GAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FigLayers,
    FigAdverse,
    FigGap,
    McVerify,
    Custom,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FigLayers => "fig_layers",
            ExperimentKind::FigAdverse => "fig_adverse",
            ExperimentKind::FigGap => "fig_gap",
            ExperimentKind::McVerify => "mc_verify",
            ExperimentKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ista,
    Fista,
    Linear,
    Lista,
    Lfista,
    Facnet,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Ista, Method::Fista, Method::Linear, Method::Lista, Method::Lfista, Method::Facnet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ista => "ista",
            Method::Fista => "fista",
            Method::Linear => "linear",
            Method::Lista => "lista",
            Method::Lfista => "lfista",
            Method::Facnet => "facnet",
        }
    }

    pub fn net_kind(self) -> Option<NetKind> {
        match self {
            Method::Lista => Some(NetKind::Lista),
            Method::Lfista => Some(NetKind::Lfista),
            Method::Facnet => Some(NetKind::Facnet),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSettings {
    pub train_samples: usize,
    pub config: LinearConfig,
}

impl Default for LinearSettings {
    fn default() -> Self {
        Self { train_samples: 2000, config: LinearConfig { steps: 5000, learning_rate: 0.05, batch_size: 10, seed: 0 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapSettings {
    pub problems: usize,
    pub iterations: usize,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self { problems: 50, iterations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McSettings {
    pub wishart_trials: usize,
    pub chi_trials: usize,
    pub lemma1_trials: usize,
    pub lemma2_trials: usize,
    pub unitarity_draws: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        Self { wishart_trials: 2000, chi_trials: 5000, lemma1_trials: 2000, lemma2_trials: 5000, unitarity_draws: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    /// sparsity levels swept by fig_layers; `rho` alone when empty
    pub rho_levels: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub depths: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub test_size: usize,
    pub methods: Vec<Method>,
    /// dictionary for `custom` runs
    pub dictionary: DictionaryKind,
    pub linear: LinearSettings,
    pub gap: GapSettings,
    pub mc: McSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(ExperimentKind::Custom)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let train = TrainConfig { steps: 3000, batch_size: 100, mu: 100.0, eval_every: 200, ..TrainConfig::default() };
        let base = Self {
            experiment: kind,
            n: 64,
            m: 100,
            rho: 0.05,
            rho_levels: Vec::new(),
            sigma: 10.0,
            lambda: 0.01,
            depths: vec![1, 2, 4, 7],
            train,
            seed: 0,
            output_dir: None,
            test_size: 1000,
            methods: Method::ALL.to_vec(),
            dictionary: DictionaryKind::Gaussian,
            linear: LinearSettings::default(),
            gap: GapSettings::default(),
            mc: McSettings::default(),
        };
        match kind {
            ExperimentKind::FigLayers => Self { rho_levels: vec![0.05, 0.25], ..base },
            ExperimentKind::FigAdverse => Self { dictionary: DictionaryKind::FourierAdversarial, ..base },
            ExperimentKind::FigGap => Self {
                n: 16,
                m: 32,
                rho: 0.25,
                sigma: 1.0,
                lambda: 0.5,
                gap: GapSettings { problems: 50, iterations: 500 },
                ..base
            },
            ExperimentKind::McVerify | ExperimentKind::Custom => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(format!("experiment config: {what}")));
        if self.n == 0 || self.m == 0 {
            return bad(format!("dimensions must be positive, got n = {}, m = {}", self.n, self.m));
        }
        for &r in std::iter::once(&self.rho).chain(&self.rho_levels) {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("rho must lie in [0, 1], got {r}"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.depths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("depths must be strictly ascending, got {:?}", self.depths));
        }
        if self.test_size == 0 {
            return bad("test_size must be positive".into());
        }
        if self.gap.problems == 0 {
            return bad("gap.problems must be positive".into());
        }
        self.train.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn sparsity_levels(&self) -> Vec<f64> {
        if self.experiment == ExperimentKind::FigLayers && !self.rho_levels.is_empty() {
            self.rho_levels.clone()
        } else {
            vec![self.rho]
        }
    }

    fn with_depth_zero(&self) -> Vec<usize> {
        let mut d = self.depths.clone();
        if d.first() != Some(&0) {
            d.insert(0, 0);
        }
        d
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a config file on top of the preset for its experiment: keys in the
/// file replace preset values and nested objects are merged key by key.
/// `kind`, when given, overrides the file's `experiment` field.
pub fn load_config(text: &str, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let file: serde_json::Value = serde_json::from_str(text)?;
    if !file.is_object() {
        return Err(Error::InvalidArgument("config file must hold a JSON object".into()));
    }
    let kind = match (kind, file.get("experiment")) {
        (Some(k), _) => k,
        (None, Some(v)) => serde_json::from_value(v.clone())?,
        (None, None) => ExperimentKind::Custom,
    };
    let mut merged = serde_json::to_value(ExperimentConfig::preset(kind))?;
    merge_json(&mut merged, file);
    merged["experiment"] = serde_json::to_value(kind)?;
    Ok(serde_json::from_value(merged)?)
}

pub fn make_dictionary(kind: DictionaryKind, n: usize, m: usize, seed: u64) -> Result<Dictionary> {
    match kind {
        DictionaryKind::Gaussian => sample_gaussian_dictionary(n, m, seed),
        DictionaryKind::FourierAdversarial => adversarial_fourier_dictionary(n, m, seed),
        DictionaryKind::UserSupplied => {
            Err(Error::InvalidArgument("user-supplied dictionaries cannot be generated".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub rho: f64,
    pub method: Method,
    pub depth: usize,
    pub mean_cost_gap: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, rho: f64, method: Method, depth: usize, gap: GapSummary) -> Result<()> {
        if gap.mean < -NEGATIVE_GAP_TOL {
            return Err(Error::InvalidArgument(format!(
                "{} at depth {depth}: negative mean cost gap {:e}",
                method.name(),
                gap.mean
            )));
        }
        self.rows.push(ResultRow {
            rho,
            method,
            depth,
            mean_cost_gap: gap.mean,
            std_error: gap.std_error,
            n_samples: gap.n,
        });
        Ok(())
    }

    pub fn get(&self, rho: f64, method: Method, depth: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.rho == rho && r.method == method && r.depth == depth)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RESULT_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{:?},{},{},{:?},{:?},{}",
                r.rho,
                r.method.name(),
                r.depth,
                r.mean_cost_gap,
                r.std_error,
                r.n_samples
            )
            .unwrap();
        }
        out
    }
}

/// One trained cell of a layers experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub rho: f64,
    pub method: Method,
    pub depth: usize,
    pub best_step: usize,
    pub init_gap: f64,
    pub best_gap: f64,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LayersOutcome {
    pub table: ResultTable,
    pub training: Vec<TrainingRecord>,
}

fn training_csv(records: &[TrainingRecord]) -> String {
    let mut out = String::from("rho,method,depth,best_step,init_gap,best_gap,diverged_at\n");
    for r in records {
        writeln!(
            out,
            "{:?},{},{},{},{:?},{:?},{}",
            r.rho,
            r.method.name(),
            r.depth,
            r.best_step,
            r.init_gap,
            r.best_gap,
            r.diverged_at.map(|s| s.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    out
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_json()?)?;
    Ok(())
}

/// Mean gap of a classical solver at every requested iteration count.
fn classical_gaps(
    eval: &EvalSet,
    depths: &[usize],
    run: impl Fn(&crate::lasso::LassoProblem, usize) -> Vec<f64> + Sync,
) -> Result<Vec<GapSummary>> {
    let max = *depths.last().unwrap_or(&0);
    let per_sample: Vec<Vec<f64>> = (0..eval.len())
        .into_par_iter()
        .map(|j| {
            let p = eval.batch.problem(j)?;
            let costs = run(&p, max);
            Ok(depths.iter().map(|&d| costs[d] - eval.optimal[j]).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..depths.len())
        .map(|i| GapSummary::of(&per_sample.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect())
}

fn layers_for_setting(
    config: &ExperimentConfig,
    op: &Arc<CodingOperator>,
    rho: f64,
    setting: u64,
    out: &mut LayersOutcome,
) -> Result<()> {
    let model = BernoulliGaussianModel::new(rho, config.sigma, config.m)?;
    let lambda = config.lambda;
    let depths = config.with_depth_zero();
    let test = Batch::sample(op, &model, config.test_size, lambda, &mut rng::derived(config.seed, 10 * setting + 1))?;
    let eval = EvalSet::new(test)?;
    let dir = config.output_dir.as_deref();
    let tag = |method: Method, depth: usize| format!("rho{rho:?}_{}_d{depth}", method.name());

    for &method in &config.methods {
        match method {
            Method::Ista => {
                for (&d, g) in depths.iter().zip(classical_gaps(&eval, &depths, |p, k| solvers::ista(p, &Vector::zeros(p.atoms()), k).costs)?) {
                    out.table.push(rho, method, d, g)?;
                }
            }
            Method::Fista => {
                for (&d, g) in depths.iter().zip(classical_gaps(&eval, &depths, |p, k| solvers::fista(p, &Vector::zeros(p.atoms()), k).costs)?) {
                    out.table.push(rho, method, d, g)?;
                }
            }
            Method::Linear => {
                let data_seed = rng::derived(config.seed, 10 * setting + 2).random();
                let (samples, _) = sample_dataset(&op.dict, &model, config.linear.train_samples, data_seed)?;
                let fit = solvers::train_linear_baseline(op, &samples, lambda, &config.linear.config)?;
                // depth 0 is the zero code; depth k ≥ 1 is A⁰x followed by k − 1 ISTA steps
                let gaps = classical_gaps(&eval, &depths, |p, k| {
                    let mut costs = vec![p.cost(&Vector::zeros(p.atoms()))];
                    if k > 0 {
                        costs.extend(solvers::warm_started_ista(p, &fit.baseline, k - 1).costs);
                    }
                    costs
                })?;
                for (&d, g) in depths.iter().zip(gaps) {
                    out.table.push(rho, method, d, g)?;
                }
            }
            Method::Lista | Method::Lfista | Method::Facnet => {
                let kind = method.net_kind().expect("learned method");
                for &d in &depths {
                    if d == 0 {
                        let init = nets::Network::init(kind, op, lambda, 0, config.train.mu);
                        out.table.push(rho, method, 0, eval.network_gap(&init))?;
                        continue;
                    }
                    let trained = nets::train(kind, op, &model, lambda, d, &eval, &config.train)?;
                    out.table.push(rho, method, d, trained.best_gap)?;
                    out.training.push(TrainingRecord {
                        rho,
                        method,
                        depth: d,
                        best_step: trained.best_step,
                        init_gap: trained.init_gap.mean,
                        best_gap: trained.best_gap.mean,
                        diverged_at: trained.diverged_at,
                    });
                    if let Some(dir) = dir {
                        let curves = dir.join("curves");
                        fs::create_dir_all(&curves)?;
                        fs::write(curves.join(format!("{}.csv", tag(method, d))), nets::curve_csv(&trained.curve))?;
                        nets::save_network(dir.join("models").join(tag(method, d)), &trained.net, op)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn run_layers(config: &ExperimentConfig, kind: DictionaryKind) -> Result<LayersOutcome> {
    config.validate()?;
    let dict = make_dictionary(kind, config.n, config.m, config.seed)?;
    let op = CodingOperator::new(dict);
    let mut out = LayersOutcome { table: ResultTable::default(), training: Vec::new() };
    for (i, rho) in config.sparsity_levels().into_iter().enumerate() {
        layers_for_setting(config, &op, rho, i as u64, &mut out)?;
    }
    if let Some(dir) = config.output_dir.as_deref() {
        write_config(dir, config)?;
        fs::write(dir.join(RESULTS_FILE), out.table.to_csv())?;
        fs::write(dir.join(TRAINING_FILE), training_csv(&out.training))?;
    }
    Ok(out)
}

/// Classical, linear and learned solvers on a Gaussian dictionary, at every
/// sparsity level in `rho_levels`.
pub fn run_fig_layers(config: &ExperimentConfig) -> Result<LayersOutcome> {
    run_layers(config, DictionaryKind::Gaussian)
}

/// The layers pipeline on the adversarial Fourier dictionary.
pub fn run_fig_adverse(config: &ExperimentConfig) -> Result<LayersOutcome> {
    run_layers(config, DictionaryKind::FourierAdversarial)
}

pub fn run_custom(config: &ExperimentConfig) -> Result<LayersOutcome> {
    run_layers(config, config.dictionary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapTracePoint {
    pub iteration: usize,
    pub mean_margin: f64,
    pub std_error: f64,
    pub mean_theorem_margin: f64,
    pub holds_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTraceSummary {
    pub dictionary: DictionaryKind,
    pub trace: Vec<GapTracePoint>,
    /// fraction of problems whose margin is non-increasing up to the first failure
    pub monotone_fraction: f64,
    pub problems: usize,
}

#[derive(Debug, Clone)]
pub struct GapOutcome {
    pub summaries: Vec<GapTraceSummary>,
}

impl GapOutcome {
    pub fn summary(&self, kind: DictionaryKind) -> Option<&GapTraceSummary> {
        self.summaries.iter().find(|s| s.dictionary == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dictionary,iteration,mean_margin,std_error,mean_theorem_margin,holds_fraction\n");
        for s in &self.summaries {
            for p in &s.trace {
                writeln!(
                    out,
                    "{},{},{:?},{:?},{:?},{:?}",
                    dictionary_name(s.dictionary),
                    p.iteration,
                    p.mean_margin,
                    p.std_error,
                    p.mean_theorem_margin,
                    p.holds_fraction
                )
                .unwrap();
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("dictionary,problems,monotone_fraction,margin_at_0\n");
        for s in &self.summaries {
            let m0 = s.trace.first().map(|p| p.mean_margin).unwrap_or(f64::NAN);
            writeln!(out, "{},{},{:?},{:?}", dictionary_name(s.dictionary), s.problems, s.monotone_fraction, m0).unwrap();
        }
        out
    }
}

fn dictionary_name(kind: DictionaryKind) -> &'static str {
    match kind {
        DictionaryKind::Gaussian => "gaussian",
        DictionaryKind::FourierAdversarial => "fourier_adversarial",
        DictionaryKind::UserSupplied => "user_supplied",
    }
}

/// Per-iteration averages of equal-length gap traces and the fraction of
/// traces that are non-increasing up to their first failure.
pub fn summarize_gap_traces(traces: &[Vec<GapEstimate>]) -> (Vec<GapTracePoint>, f64) {
    let count = traces.len() as f64;
    let len = traces.iter().map(Vec::len).min().unwrap_or(0);
    let trace = (0..len)
        .map(|k| {
            let margins: Vec<f64> = traces.iter().map(|t| t[k].margin).collect();
            let (mean_margin, std_error) = generic_gap::mean_and_se(&margins);
            let mean_theorem_margin = traces.iter().map(|t| t[k].theorem_margin).sum::<f64>() / count;
            let holds_fraction = traces.iter().filter(|t| t[k].holds).count() as f64 / count;
            GapTracePoint { iteration: k, mean_margin, std_error, mean_theorem_margin, holds_fraction }
        })
        .collect();
    let monotone = traces.iter().filter(|t| generic_gap::non_increasing_to_failure(t)).count();
    (trace, monotone as f64 / count)
}

pub const GAP_TRACE_CSV_HEADER: &str = "iteration,mean_margin,std_error,mean_theorem_margin,holds_fraction";

pub fn gap_trace_csv(trace: &[GapTracePoint]) -> String {
    let mut out = format!("{GAP_TRACE_CSV_HEADER}\n");
    for p in trace {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            p.iteration, p.mean_margin, p.std_error, p.mean_theorem_margin, p.holds_fraction
        )
        .unwrap();
    }
    out
}

/// Gap-condition traces along ISTA from z₀ = 0, averaged over problems.
/// Problem i uses dictionary seed `seed + i` and the same code for both
/// dictionary kinds.
pub fn run_fig_gap(config: &ExperimentConfig) -> Result<GapOutcome> {
    config.validate()?;
    let model = BernoulliGaussianModel::new(config.rho, config.sigma, config.m)?;
    let problems = config.gap.problems;
    let iters = config.gap.iterations;
    let mut summaries = Vec::new();
    for kind in [DictionaryKind::Gaussian, DictionaryKind::FourierAdversarial] {
        let traces: Vec<Vec<GapEstimate>> = (0..problems)
            .into_par_iter()
            .map(|i| {
                let seed = config.seed.wrapping_add(i as u64);
                let dict = make_dictionary(kind, config.n, config.m, seed)?;
                let code = model.sample(&mut rng::derived(seed, 1));
                let x = dict.entries() * code;
                let op = CodingOperator::new(dict);
                let p = op.problem(x, config.lambda)?;
                let z_star = solvers::reference_solution(&p, REFERENCE_TOL)?;
                Ok(generic_gap::gap_trace(&p, &Vector::zeros(config.m), &z_star, iters))
            })
            .collect::<Result<_>>()?;
        let (trace, monotone_fraction) = summarize_gap_traces(&traces);
        summaries.push(GapTraceSummary {
            dictionary: kind,
            trace,
            monotone_fraction,
            problems,
        });
    }
    let out = GapOutcome { summaries };
    if let Some(dir) = config.output_dir.as_deref() {
        write_config(dir, config)?;
        fs::write(dir.join(RESULTS_FILE), out.to_csv())?;
        fs::write(dir.join(GAP_SUMMARY_FILE), out.summary_csv())?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct McOutcome {
    /// checks that decide the exit status
    pub reports: Vec<MCReport>,
    /// reported for reference only
    pub diagnostics: Vec<MCReport>,
}

impl McOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.within_tolerance)
    }

    fn csv(reports: &[MCReport]) -> String {
        let mut out = format!("{}\n", generic_gap::MC_CSV_HEADER);
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        Self::csv(&self.reports)
    }

    pub fn diagnostics_csv(&self) -> String {
        Self::csv(&self.diagnostics)
    }
}

pub const LEMMA1_DELTAS: [f64; 3] = [0.005, 0.01, 0.02];
/// relative tolerance on the fitted first-order slope
pub const SLOPE_REL_TOL: f64 = 0.25;

/// Least-squares slope fit as a report; the standard error treats the
/// per-δ means as independent.
pub fn slope_report(fit: &SlopeFit, k: usize, p: usize, trials: usize, seed: u64) -> MCReport {
    let n = fit.deltas.len() as f64;
    let dx = fit.deltas.iter().sum::<f64>() / n;
    let sxx: f64 = fit.deltas.iter().map(|x| (x - dx).powi(2)).sum();
    let var: f64 = fit.deltas.iter().zip(&fit.std_errors).map(|(x, s)| ((x - dx) / sxx).powi(2) * s * s).sum();
    let form = match fit.form {
        ResidualForm::Inverse => "inverse",
        ResidualForm::Transpose => "transpose",
    };
    MCReport {
        name: format!("lemma1_slope_{form}"),
        estimate: fit.slope,
        std_error: var.sqrt(),
        reference: fit.predicted,
        trials,
        within_tolerance: fit.negative() && fit.relative_error <= SLOPE_REL_TOL,
        k,
        p: Some(p),
        delta: None,
        seed,
    }
}

/// The Monte Carlo checks at their reference sizes. The first-order slope of
/// the inverse-form residual is a diagnostic: it vanishes for unit-diagonal
/// Gram matrices, so only the transpose-form slope is gated.
pub fn run_mc_verify(config: &ExperimentConfig) -> Result<McOutcome> {
    let s = &config.mc;
    let seed = config.seed;
    let stream = |i: u64| rng::derived(seed, 1000 + i).random::<u64>();
    let mut reports = vec![generic_gap::mc_wishart_frobenius(20, 10, s.wishart_trials, stream(0))?];
    for (i, (k, p)) in [(10, 20), (30, 50)].into_iter().enumerate() {
        let (first, second) = generic_gap::mc_chi_moment(k, p, s.chi_trials, stream(1 + i as u64))?;
        reports.push(first);
        reports.push(second);
    }
    let lemma1_seed = stream(3);
    reports.push(generic_gap::mc_lemma1(20, 10, 0.0, s.lemma1_trials, lemma1_seed, ResidualForm::Inverse)?);
    let transpose = generic_gap::lemma1_slope(20, 10, &LEMMA1_DELTAS, s.lemma1_trials, lemma1_seed, ResidualForm::Transpose)?;
    reports.push(slope_report(&transpose, 20, 10, s.lemma1_trials, lemma1_seed));
    for (i, delta) in [0.01, 0.05].into_iter().enumerate() {
        reports.push(generic_gap::mc_lemma2(
            50,
            delta,
            s.lemma2_trials,
            generic_gap::CodeModel::StandardNormal,
            stream(4 + i as u64),
            None,
        )?);
    }
    reports.push(generic_gap::mc_e_delta_unitarity(50, 0.01, s.unitarity_draws, stream(6))?);

    let inverse = generic_gap::lemma1_slope(20, 10, &LEMMA1_DELTAS, s.lemma1_trials, lemma1_seed, ResidualForm::Inverse)?;
    let diagnostics = vec![slope_report(&inverse, 20, 10, s.lemma1_trials, lemma1_seed)];

    let out = McOutcome { reports, diagnostics };
    if let Some(dir) = config.output_dir.as_deref() {
        write_config(dir, config)?;
        fs::write(dir.join(RESULTS_FILE), out.to_csv())?;
        fs::write(dir.join(DIAGNOSTICS_FILE), out.diagnostics_csv())?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Layers(LayersOutcome),
    Gap(GapOutcome),
    Mc(McOutcome),
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    Ok(match config.experiment {
        ExperimentKind::FigLayers => Outcome::Layers(run_fig_layers(config)?),
        ExperimentKind::FigAdverse => Outcome::Layers(run_fig_adverse(config)?),
        ExperimentKind::Custom => Outcome::Layers(run_custom(config)?),
        ExperimentKind::FigGap => Outcome::Gap(run_fig_gap(config)?),
        ExperimentKind::McVerify => Outcome::Mc(run_mc_verify(config)?),
    })
}
