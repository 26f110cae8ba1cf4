//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, parse or configuration error, 3
//! numerical failure. Diagnostics go to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use crate::dataset::{
    apply_standardize, fit_standardize, parse_csv, parse_libsvm, synth_blobs, to_libsvm,
    LabelColumn, LabeledDataset, StandardizationStats, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    cross_validate, run_protocol, score_projected, sensitivity_sweep, with_thread_cap,
    AccuracyTable, ProtocolSpec, SweepParam, Variant,
};
use crate::gradcheck::{self, GradcheckSpec};
use crate::lbfgs::LbfgsConfig;
use crate::model_file::{dataset_digest, ModelFile, Provenance};
use crate::objective::Hyperparams;
use crate::solver::{fit, transform, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mmldf",
    version,
    about = "Max-margin discriminative feature learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a projection and classifier, write a model file.
    Train(TrainArgs),
    /// Project a dataset with a trained model, write CSV.
    Transform(TransformArgs),
    /// Train a linear SVM on projected training data, report test accuracy.
    Evaluate(EvaluateArgs),
    /// Seeded accuracy protocol over reduced dimensions (and optionally a
    /// hyperparameter sweep), written as CSV.
    Benchmark(BenchmarkArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset in LIBSVM format.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Libsvm,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "libsvm")]
    pub format: Format,
    /// CSV label column, by 0-based index or header name.
    #[arg(long, default_value = "0")]
    pub label_column: String,
    /// The CSV file has no header row.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long = "C", default_value_t = Hyperparams::default().c)]
    pub c: f64,
    #[arg(long, default_value_t = Hyperparams::default().eta)]
    pub eta: f64,
    #[arg(long, default_value_t = Hyperparams::default().lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = Hyperparams::default().rho)]
    pub rho: f64,
    #[arg(long, default_value_t = Hyperparams::default().eps_smooth)]
    pub eps_smooth: f64,
    #[arg(long, default_value_t = Hyperparams::default().omega_ridge)]
    pub omega_ridge: f64,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = TrainConfig::default().max_outer_iters)]
    pub max_iters: usize,
    /// Relative objective change that ends training.
    #[arg(long, default_value_t = TrainConfig::default().outer_tol)]
    pub tol: f64,
}

impl HyperArgs {
    fn hyperparams(&self, dim: usize) -> Hyperparams {
        Hyperparams {
            c: self.c,
            eta: self.eta,
            lambda: self.lambda,
            rho: self.rho,
            dim,
            eps_smooth: self.eps_smooth,
            omega_ridge: self.omega_ridge,
        }
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config(
                "--tol and --max-iters must be positive".into(),
            ));
        }
        Ok(TrainConfig {
            outer_tol: self.tol,
            max_outer_iters: self.max_iters,
            seed,
            ..TrainConfig::default()
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Train on a synthetic dataset instead, e.g. `classes=3,noise=20`; a bare flag uses the defaults.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub synth: Option<String>,
    #[command(flatten)]
    pub data_args: DataArgs,
    /// Target dimension `r`.
    #[arg(long)]
    pub dim: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training report path; defaults to the model path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// z-score features; the statistics are stored in the model.
    #[arg(long)]
    pub standardize: bool,
    /// Choose C, eta and rho by 3-fold cross-validation first.
    #[arg(long)]
    pub cv: bool,
    /// Record the wall-clock time in the model provenance.
    #[arg(long)]
    pub timestamp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub data_args: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub data_args: DataArgs,
    #[arg(long = "svm-C", default_value_t = ProtocolSpec::default().svm_c)]
    pub svm_c: f64,
    /// Feed the raw projected features to the SVM, without centering and
    /// global rescaling.
    #[arg(long)]
    pub no_rescale: bool,
    /// Report JSON path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Synthetic dataset instead of `--data`; a bare flag uses the default generator.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub synth: Option<String>,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
    #[command(flatten)]
    pub data_args: DataArgs,
    /// `start:stop:step` (inclusive) or a comma list.
    #[arg(long, default_value = "10:100:10")]
    pub dims: String,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 100)]
    pub train_count: usize,
    /// One or more of full, no_rho, no_eta_no_rho, mmpp, random.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    pub variant: Vec<String>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long = "svm-C", default_value_t = ProtocolSpec::default().svm_c)]
    pub svm_c: f64,
    #[arg(long)]
    pub cv: bool,
    #[arg(long, requires = "sweep_values")]
    pub sweep_param: Option<String>,
    #[arg(long, value_delimiter = ',', requires = "sweep_param")]
    pub sweep_values: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one table per variant, with its hyperparameters and per-trial accuracies, as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GradcheckSpec::default().n)]
    pub n: usize,
    #[arg(long, default_value_t = GradcheckSpec::default().d)]
    pub d: usize,
    #[arg(long, default_value_t = GradcheckSpec::default().r)]
    pub r: usize,
    /// Classes in the multi-class instance.
    #[arg(long = "K", default_value_t = GradcheckSpec::default().classes)]
    pub k: usize,
    #[arg(long, default_value_t = GradcheckSpec::default().eps_smooth)]
    pub eps_smooth: f64,
    /// Number of instances, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "")]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Transform(a) => cmd_transform(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn load_dataset(path: &Path, args: &DataArgs, dim: Option<usize>) -> Result<LabeledDataset> {
    let text = read_text(path)?;
    match args.format {
        Format::Libsvm => parse_libsvm(&text, dim),
        Format::Csv => {
            let col: LabelColumn = args.label_column.parse().expect("infallible");
            parse_csv(&text, &col, !args.no_header)
        }
    }
}

/// Re-indexes `ds` through `label_map`, the map of a trained model.
fn relabel(ds: &LabeledDataset, label_map: &[String]) -> Result<LabeledDataset> {
    let tokens: Vec<String> = ds
        .labels()
        .iter()
        .map(|&l| ds.label_map()[l].clone())
        .collect();
    LabeledDataset::with_label_map(ds.features().clone(), &tokens, label_map.to_vec())
}

fn check_dim(ds: &LabeledDataset, model: &ModelFile, what: &str) -> Result<()> {
    if ds.d() != model.shapes.d {
        return Err(Error::Config(format!(
            "{what} has {} features but the model expects {}",
            ds.d(),
            model.shapes.d
        )));
    }
    Ok(())
}

/// Standardizes with the model's statistics and projects.
fn project_with(model: &ModelFile, ds: &LabeledDataset) -> Result<Array2<f64>> {
    let x = model.stats().apply_matrix(ds.features())?;
    transform(&model.projection()?, x.view())
}

fn synthetic(spec: &str, seed: u64) -> Result<LabeledDataset> {
    synth_blobs(&SynthSpec::parse(spec)?, seed)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let raw = match (&a.data, &a.synth) {
        (Some(path), _) => load_dataset(path, &a.data_args, None)?,
        (None, Some(spec)) => synthetic(spec, a.seed)?,
        (None, None) => unreachable!("clap requires one of --data and --synth"),
    };
    let mut hp = a.hyper.hyperparams(a.dim);
    hp.validate(raw.d())?;
    let cfg = a.hyper.train_config(a.seed)?;
    let lbfgs = LbfgsConfig::default();
    let (ds, stats) = if a.standardize {
        let stats = fit_standardize(&raw);
        (apply_standardize(&raw, &stats)?, stats)
    } else {
        (raw.clone(), StandardizationStats::identity(raw.d()))
    };
    if a.cv {
        let spec = ProtocolSpec {
            seed: a.seed,
            train: cfg,
            lbfgs,
            ..ProtocolSpec::default()
        };
        let best = with_thread_cap(|| cross_validate(&ds, &hp, &spec, Variant::Full))??;
        eprintln!(
            "cross-validation picked C={} eta={} rho={} ({:.2}% over {} folds)",
            best.c, best.eta, best.rho, best.mean_acc, best.folds_used
        );
        hp.c = best.c;
        hp.eta = best.eta;
        hp.rho = best.rho;
    }
    let res = fit(&ds, &hp, &cfg, &lbfgs)?;
    let timestamp = a.timestamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    });
    let prov = Provenance {
        seed: a.seed,
        dataset_digest: dataset_digest(&raw),
        timestamp,
    };
    let model = ModelFile::new(&res, ds.label_map(), &stats, &hp, prov)?;
    model.write(&a.out)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.out.with_extension("report.json"));
    write_text(&report_path, &to_json(&res.report)?)?;
    let rep = &res.report;
    println!(
        "{} model: d={} r={} classes={} | {} outer iterations ({}), objective {:.6} -> {:.6}",
        match rep.mode {
            crate::solver::Mode::Binary => "binary",
            crate::solver::Mode::Multiclass => "multi-class",
        },
        ds.d(),
        hp.dim,
        ds.num_classes(),
        rep.outer_iters,
        if rep.converged {
            "converged"
        } else {
            "iteration limit"
        },
        rep.objective_trace.first().copied().unwrap_or(f64::NAN),
        rep.objective_trace.last().copied().unwrap_or(f64::NAN),
    );
    println!("wrote {} and {}", a.out.display(), report_path.display());
    Ok(())
}

fn format_rows(z: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in z.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_transform(a: &TransformArgs) -> Result<()> {
    let model = ModelFile::read(&a.model)?;
    let ds = load_dataset(&a.data, &a.data_args, Some(model.shapes.d))?;
    check_dim(&ds, &model, "data")?;
    let z = project_with(&model, &ds)?;
    write_text(&a.out, &format_rows(&z))?;
    println!(
        "wrote {} rows x {} columns to {}",
        z.nrows(),
        z.ncols(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluateReport {
    accuracy: f64,
    train_samples: usize,
    test_samples: usize,
    svm_c: f64,
    rescaled: bool,
    /// Whether the training file matches the model's recorded data digest.
    train_digest_matches: bool,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = ModelFile::read(&a.model)?;
    let d = Some(model.shapes.d);
    let train = load_dataset(&a.train, &a.data_args, d)?;
    let test = load_dataset(&a.test, &a.data_args, d)?;
    check_dim(&train, &model, "training data")?;
    check_dim(&test, &model, "test data")?;
    let matches = dataset_digest(&train) == model.provenance.dataset_digest;
    if !matches {
        eprintln!("note: training data differs from the data the model was fitted on");
    }
    let train = relabel(&train, &model.label_map)?;
    let test = relabel(&test, &model.label_map)?;
    let acc = score_projected(
        project_with(&model, &train)?,
        train.labels(),
        project_with(&model, &test)?,
        test.labels(),
        a.svm_c,
        !a.no_rescale,
    )?;
    println!("accuracy {acc:.4}%");
    if let Some(path) = &a.report {
        let rep = EvaluateReport {
            accuracy: acc,
            train_samples: train.n(),
            test_samples: test.n(),
            svm_c: a.svm_c,
            rescaled: !a.no_rescale,
            train_digest_matches: matches,
        };
        write_text(path, &to_json(&rep)?)?;
    }
    Ok(())
}

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_dims(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad --dims {text:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let parts: Vec<&str> = text.split(':').collect();
    let dims: Vec<usize> = match parts.as_slice() {
        [single] => single.split(',').map(num).collect::<Result<_>>()?,
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step == 0 || start > stop {
                return Err(bad());
            }
            (start..=stop).step_by(step).collect()
        }
        _ => return Err(bad()),
    };
    if dims.is_empty() {
        return Err(bad());
    }
    Ok(dims)
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let ds = match (&a.data, &a.synth) {
        (Some(path), _) => load_dataset(path, &a.data_args, None)?,
        (None, Some(spec)) => synthetic(spec, a.synth_seed)?,
        (None, None) => unreachable!("clap requires one of --data and --synth"),
    };
    let variants = a
        .variant
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let dims = parse_dims(&a.dims)?;
    let hp = a.hyper.hyperparams(dims[0]);
    hp.validate(ds.d())?;
    let spec = ProtocolSpec {
        dims,
        trials: a.trials,
        train_count: a.train_count,
        seed: a.seed,
        svm_c: a.svm_c,
        cross_validate: a.cv,
        train: a.hyper.train_config(a.seed)?,
        ..ProtocolSpec::default()
    };
    let sweep = match &a.sweep_param {
        Some(p) => Some((p.parse::<SweepParam>()?, a.sweep_values.clone())),
        None => None,
    };
    let mut tables = Vec::new();
    for v in variants {
        tables.push(match &sweep {
            Some((param, values)) => sensitivity_sweep(&ds, &hp, &spec, v, *param, values)?,
            None => run_protocol(&ds, &hp, &spec, v)?,
        });
    }
    let mut merged = tables[0].clone();
    for t in &tables[1..] {
        merged.rows.extend(t.rows.iter().cloned());
    }
    let csv = merged.to_csv()?;
    match &a.out {
        Some(path) => {
            write_text(path, &csv)?;
            summarize(&merged);
            eprintln!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    if let Some(path) = &a.json {
        write_text(path, &to_json(&tables)?)?;
    }
    Ok(())
}

fn summarize(table: &AccuracyTable) {
    for row in &table.rows {
        let param = row.param_value.map(|v| format!(" {v}")).unwrap_or_default();
        println!(
            "{:<14} r={:<4}{param} {:6.2} ± {:.2}",
            row.variant.name(),
            row.dim,
            row.mean_acc,
            row.std_acc
        );
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(Error::Config("--instances must be >= 1".into()));
    }
    let mut worst = 0.0_f64;
    for i in 0..a.instances {
        let spec = GradcheckSpec {
            n: a.n,
            d: a.d,
            r: a.r,
            classes: a.k,
            seed: a.seed.wrapping_add(i),
            eps_smooth: a.eps_smooth,
            ..GradcheckSpec::default()
        };
        let rep = gradcheck::run(&spec)?;
        println!(
            "seed {}: binary {:.3e}, multi-class (K={}) {:.3e}",
            spec.seed, rep.binary, a.k, rep.multiclass
        );
        worst = worst.max(rep.max_error());
    }
    println!("max relative error {worst:.3e} (limit 1e-5)");
    if worst <= 1e-5 {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: error {worst:.3e} exceeds 1e-5"
        )))
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ds = synthetic(&a.spec, a.seed)?;
    write_text(&a.out, &to_libsvm(&ds))?;
    println!(
        "wrote {} samples, {} features, {} classes to {}",
        ds.n(),
        ds.d(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}
