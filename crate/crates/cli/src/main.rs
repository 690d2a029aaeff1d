//! `sparsecode`: data generation, solvers, training and the experiment
//! pipelines from the command line.
//!
//! Exit status: 0 on success, 1 on runtime errors (including failed
//! Monte Carlo checks), 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sparsecode_core::experiments::{self, ExperimentConfig, ExperimentKind, Method, Outcome, ResultTable};
use sparsecode_core::generic_gap;
use sparsecode_core::io::{self, Dataset, DatasetMeta};
use sparsecode_core::lasso::{sample_dataset, BernoulliGaussianModel, CodingOperator, Dictionary, DictionaryKind};
use sparsecode_core::nets::{self, Batch, EvalSet, NetKind, TrainConfig};
use sparsecode_core::solvers::{self, REFERENCE_TOL};
use sparsecode_core::Vector;

#[derive(Parser)]
#[command(name = "sparsecode", version, about = "Proximal solvers and unrolled networks for l1 sparse coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dictionary and write it to D.mat
    GenDict(GenDictArgs),
    /// Generate signals from Bernoulli-Gaussian codes on a dictionary
    GenData(GenDataArgs),
    /// Run ISTA or FISTA on one sample and write the cost trace
    Solve(SolveArgs),
    /// Train an unrolled network on a dataset's generative model
    Train(TrainArgs),
    /// Evaluate a saved network against ISTA on a dataset
    Eval(EvalArgs),
    /// Gap-condition trace along ISTA, averaged over a dataset
    Gap(GapArgs),
    /// Monte Carlo checks of the random-matrix moments and lemmas
    McVerify(ExperimentArgs),
    /// Layer-wise comparison on a Gaussian dictionary
    FigLayers(ExperimentArgs),
    /// Layer-wise comparison on the adversarial Fourier dictionary
    FigAdverse(ExperimentArgs),
    /// Gap-condition traces, Gaussian against adversarial dictionaries
    FigGap(ExperimentArgs),
    /// Run whichever experiment a config file names
    Run(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DictArg {
    Gaussian,
    FourierAdversarial,
}

impl From<DictArg> for DictionaryKind {
    fn from(d: DictArg) -> Self {
        match d {
            DictArg::Gaussian => DictionaryKind::Gaussian,
            DictArg::FourierAdversarial => DictionaryKind::FourierAdversarial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Ista,
    Fista,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Lista,
    Lfista,
    Facnet,
}

impl From<ArchArg> for NetKind {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Lista => NetKind::Lista,
            ArchArg::Lfista => NetKind::Lfista,
            ArchArg::Facnet => NetKind::Facnet,
        }
    }
}

#[derive(Args)]
struct GenDictArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: DictArg,
    /// signal dimension
    #[arg(long)]
    n: usize,
    /// number of atoms
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// existing dictionary file; generated from --kind/--n/--m otherwise
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: DictArg,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    dict: PathBuf,
    /// signals, one per column
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "ista")]
    method: SolverArg,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// column of the data file to solve
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// writes trace.csv here; stdout otherwise
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    /// JSON training config; the flags below override it
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// FacNet unitarity penalty weight
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// add layers one at a time
    #[arg(long)]
    greedy: bool,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.train_config {
            Some(path) => serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
            None => TrainConfig::default(),
        };
        self.apply(&mut c);
        Ok(c)
    }

    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.mu {
            c.mu = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.train_seed {
            c.seed = v;
        }
        if self.greedy {
            c.greedy = true;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// dataset directory written by gen-data; its samples are the test set
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long)]
    depth: usize,
    /// overrides the dataset's lambda
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    /// writes results.csv here; stdout otherwise
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GapArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// writes gap_trace.csv here; stdout otherwise
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// defaults to results/<experiment>
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// comma-separated sparsity levels (fig-layers)
    #[arg(long, value_delimiter = ',')]
    rho_levels: Option<Vec<f64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// comma-separated depths, ascending
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// comma-separated subset of ista,fista,linear,lista,lfista,facnet
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    test_size: Option<usize>,
    /// number of problems (fig-gap)
    #[arg(long)]
    problems: Option<usize>,
    /// ISTA iterations per trace (fig-gap)
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

impl ExperimentArgs {
    fn resolve(&self, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => experiments::load_config(&read(path)?, kind)
                .with_context(|| format!("parsing {}", path.display()))?,
            None => match kind {
                Some(k) => ExperimentConfig::preset(k),
                None => bail!("run needs --config"),
            },
        };
        if let Some(path) = &self.train.train_config {
            c.train = serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
        }
        self.train.apply(&mut c.train);
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = &self.$field { c.$field = v.clone(); })*};
        }
        set!(seed, n, m, rho, rho_levels, sigma, lambda, depths, methods, test_size);
        if let Some(v) = self.problems {
            c.gap.problems = v;
        }
        if let Some(v) = self.iterations {
            c.gap.iterations = v;
        }
        if let Some(dir) = &self.output_dir {
            c.output_dir = Some(dir.clone());
        }
        if c.output_dir.is_none() {
            c.output_dir = Some(Path::new("results").join(c.experiment.name()));
        }
        c.validate()?;
        Ok(c)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_matrix(path: &Path) -> Result<sparsecode_core::Mat> {
    io::load_matrix(path).with_context(|| format!("loading {}", path.display()))
}

fn emit(output_dir: Option<&Path>, file: &str, text: &str) -> Result<()> {
    match output_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(file);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_dict(a: &GenDictArgs) -> Result<()> {
    let dict = experiments::make_dictionary(a.kind.into(), a.n, a.m, a.seed)?;
    fs::create_dir_all(&a.output_dir)?;
    let path = a.output_dir.join(io::DICTIONARY_FILE);
    io::save_matrix(&path, dict.entries())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let dict = match &a.dict {
        Some(path) => Dictionary::from_matrix(load_matrix(path)?, DictionaryKind::UserSupplied, a.seed)?,
        None => experiments::make_dictionary(a.kind.into(), a.n, a.m, a.seed)?,
    };
    let model = BernoulliGaussianModel::new(a.rho, a.sigma, dict.atoms())?;
    let (samples, codes) = sample_dataset(&dict, &model, a.count, a.seed.wrapping_add(1))?;
    let meta = DatasetMeta {
        kind: dict.kind(),
        n: dict.signal_dim(),
        m: dict.atoms(),
        rho: a.rho,
        sigma: a.sigma,
        lambda: a.lambda,
        seed: a.seed,
    };
    io::save_dataset(&a.output_dir, &Dataset { meta, dict, samples, codes: Some(codes) })?;
    eprintln!("wrote dataset to {}", a.output_dir.display());
    Ok(())
}

fn solve(a: &SolveArgs) -> Result<()> {
    let dict = Dictionary::from_matrix(load_matrix(&a.dict)?, DictionaryKind::UserSupplied, 0)?;
    let data = load_matrix(&a.data)?;
    if a.sample >= data.ncols() {
        bail!("sample {} out of range: data has {} columns", a.sample, data.ncols());
    }
    let op = CodingOperator::new(dict);
    let p = op.problem(data.column(a.sample).into_owned(), a.lambda)?;
    let z0 = Vector::zeros(p.atoms());
    let trace = match a.method {
        SolverArg::Ista => solvers::ista(&p, &z0, a.iters),
        SolverArg::Fista => solvers::fista(&p, &z0, a.iters),
    };
    let optimal = p.cost(&solvers::reference_solution(&p, REFERENCE_TOL)?);
    emit(a.output_dir.as_deref(), "trace.csv", &trace.to_csv(Some(optimal)))
}

struct LoadedData {
    op: std::sync::Arc<CodingOperator>,
    meta: DatasetMeta,
    eval: EvalSet,
    lambda: f64,
}

fn load_eval(data_dir: &Path, lambda: Option<f64>) -> Result<LoadedData> {
    let ds = io::load_dataset(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let lambda = lambda.unwrap_or(ds.meta.lambda);
    let op = CodingOperator::new(ds.dict);
    let eval = EvalSet::new(Batch::new(&op, ds.samples, lambda)?)?;
    Ok(LoadedData { op, meta: ds.meta, eval, lambda })
}

fn train(a: &TrainArgs) -> Result<()> {
    let config = a.train.resolve()?;
    let data = load_eval(&a.data_dir, a.lambda)?;
    let model = BernoulliGaussianModel::new(data.meta.rho, data.meta.sigma, data.meta.m)?;
    let out = nets::train(a.arch.into(), &data.op, &model, data.lambda, a.depth, &data.eval, &config)?;
    fs::create_dir_all(&a.output_dir)?;
    nets::save_network(a.output_dir.join("model"), &out.net, &data.op)?;
    fs::write(a.output_dir.join("curve.csv"), nets::curve_csv(&out.curve))?;
    let summary = serde_json::json!({
        "arch": NetKind::from(a.arch),
        "depth": a.depth,
        "lambda": data.lambda,
        "train": config,
        "best_step": out.best_step,
        "best_gap": out.best_gap,
        "init_gap": out.init_gap,
        "diverged_at": out.diverged_at,
    });
    fs::write(a.output_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if let Some(step) = out.diverged_at {
        eprintln!("training diverged at step {step}; kept the best checkpoint");
    }
    eprintln!(
        "best mean cost gap {:e} at step {} (initialization {:e}); wrote {}",
        out.best_gap.mean,
        out.best_step,
        out.init_gap.mean,
        a.output_dir.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let net = nets::load_network(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let data = load_eval(&a.data_dir, a.lambda)?;
    let (m, n) = (data.op.atoms(), data.op.signal_dim());
    if net.num_params() != net.depth() * net.kind().params_per_layer(m, n) {
        bail!("model shape does not match the dataset dictionary ({n}x{m})");
    }
    let depth = net.depth();
    let method = match net.kind() {
        NetKind::Lista => Method::Lista,
        NetKind::Lfista => Method::Lfista,
        NetKind::Facnet => Method::Facnet,
    };
    let ista: Vec<f64> = (0..data.eval.len())
        .map(|j| {
            let p = data.eval.batch.problem(j)?;
            Ok(*solvers::ista(&p, &Vector::zeros(p.atoms()), depth).costs.last().unwrap() - data.eval.optimal[j])
        })
        .collect::<Result<_>>()?;
    let mut table = ResultTable::default();
    table.push(data.meta.rho, Method::Ista, depth, nets::GapSummary::of(&ista))?;
    table.push(data.meta.rho, method, depth, data.eval.network_gap(&net))?;
    emit(a.output_dir.as_deref(), experiments::RESULTS_FILE, &table.to_csv())
}

fn gap(a: &GapArgs) -> Result<()> {
    let data = load_eval(&a.data_dir, a.lambda)?;
    let traces = (0..data.eval.len())
        .map(|j| {
            let p = data.eval.batch.problem(j)?;
            let z_star = solvers::reference_solution(&p, REFERENCE_TOL)?;
            Ok(generic_gap::gap_trace(&p, &Vector::zeros(p.atoms()), &z_star, a.iters))
        })
        .collect::<Result<Vec<_>>>()?;
    let (trace, monotone) = experiments::summarize_gap_traces(&traces);
    eprintln!("margins non-increasing to failure in {:.1}% of samples", 100.0 * monotone);
    emit(a.output_dir.as_deref(), "gap_trace.csv", &experiments::gap_trace_csv(&trace))
}

fn experiment(a: &ExperimentArgs, kind: Option<ExperimentKind>) -> Result<()> {
    let config = a.resolve(kind)?;
    let dir = config.output_dir.clone().expect("resolved");
    match experiments::run_experiment(&config)? {
        Outcome::Layers(out) => {
            print!("{}", out.table.to_csv());
            for r in out.training.iter().filter(|r| r.diverged_at.is_some()) {
                eprintln!("{} depth {} diverged at step {}", r.method.name(), r.depth, r.diverged_at.unwrap());
            }
        }
        Outcome::Gap(out) => print!("{}", out.summary_csv()),
        Outcome::Mc(out) => {
            print!("{}", out.to_csv());
            eprint!("diagnostics (not gated):\n{}", out.diagnostics_csv());
            if !out.passed() {
                let failed: Vec<&str> =
                    out.reports.iter().filter(|r| !r.within_tolerance).map(|r| r.name.as_str()).collect();
                bail!("Monte Carlo checks out of tolerance: {}", failed.join(", "));
            }
        }
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenDict(a) => gen_dict(a),
        Command::GenData(a) => gen_data(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gap(a) => gap(a),
        Command::McVerify(a) => experiment(a, Some(ExperimentKind::McVerify)),
        Command::FigLayers(a) => experiment(a, Some(ExperimentKind::FigLayers)),
        Command::FigAdverse(a) => experiment(a, Some(ExperimentKind::FigAdverse)),
        Command::FigGap(a) => experiment(a, Some(ExperimentKind::FigGap)),
        Command::Run(a) => experiment(a, None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
