//! `shrinkgp` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numerical failure,
//! 4 violated invariant (bound or decomposition check).

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use shrinkgp::bound::verify_proposition;
use shrinkgp::checkpoint::Checkpoint;
use shrinkgp::config::{parse_structure, ModelKind, Prior, RunConfig};
use shrinkgp::data::{load_csv, load_csv_reader, run_synth, split, SplitSpec, SynthSpec, Task};
use shrinkgp::kernel::{build_pool, describe, BaseKernel, InitScheme, KernelExpr, PoolConfig};
use shrinkgp::pipeline::{fit, metrics_from_predictions, predict, AnyModel, Predictions};
use shrinkgp::report::{decompose, write_weights_csv};
use shrinkgp::trainer::{ElboBreakdown, LikelihoodKind};
use shrinkgp::Error;

#[derive(Parser)]
#[command(name = "shrinkgp", version, about = "Sparse GPs with per-kernel inducing groups and Horseshoe kernel selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic 1-D dataset from a known kernel.
    Synth(SynthArgs),
    /// Train a model and write trace, predictions, metrics, weights,
    /// decomposition and checkpoint.
    Train(TrainArgs),
    /// Predict with a checkpoint.
    Predict(ApplyArgs),
    /// Evaluate a checkpoint on a labelled CSV.
    Evaluate(ApplyArgs),
    /// Per-component decomposition of a trained MultiSVGP.
    Decompose(DecomposeArgs),
    /// Compare single- and multi-group approximation constants.
    VerifyBound(BoundArgs),
    /// Print the default kernel pool.
    Pool(PoolArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON `SynthSpec` for the generator (defaults: PER + SE×PER, 100 points).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Multisvgp,
    Svgp,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Horseshoe,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Random,
    Pca,
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV (header row, numeric columns).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run several seeds, each into `<out>/seed-<s>`.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    /// Worker threads for multi-seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    inducing: Option<usize>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    prior: Option<PriorArg>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Training fraction for the random split.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    freeze_inducing: bool,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV of grid inputs (columns named as in training); default: a
    /// 200-point grid over `--lo..--hi` for 1-D models.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    hi: f64,
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value = "SE")]
    k1: String,
    #[arg(long, default_value = "PER")]
    k2: String,
    /// Optional CSV; default: `--n` grid points on [−5, 5] with y = sin(x).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    json: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Factorization(_) | Error::Divergence { .. } => 3,
        Error::Assertion(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => apply(a, false),
        Command::Evaluate(a) => apply(a, true),
        Command::Decompose(a) => decompose_cmd(a),
        Command::VerifyBound(a) => bound_cmd(a),
        Command::Pool(a) => pool_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = shrinkgp::Result<T>;

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    let data = run_synth(&spec)?;
    fs::create_dir_all(&a.out)?;
    data.dataset.write_csv(File::create(a.out.join("data.csv"))?)?;
    write_json(&a.out.join("truth.json"), &data.truth)?;
    println!("wrote {} points to {}", data.dataset.len(), a.out.join("data.csv").display());
    Ok(())
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = &a.target {
        cfg.target = Some(t.clone());
    }
    if let Some(t) = a.task {
        cfg.task = match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        };
        cfg.training.likelihood = match cfg.task {
            Task::Regression => LikelihoodKind::Gaussian,
            Task::Classification => LikelihoodKind::Bernoulli,
        };
    }
    if let Some(v) = a.iterations {
        cfg.training.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.training.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.training.learning_rate = v;
    }
    if let Some(v) = a.inducing {
        cfg.inducing.count = Some(v);
    }
    if let Some(m) = a.model {
        cfg.pool.model = match m {
            ModelArg::Multisvgp => ModelKind::Multisvgp,
            ModelArg::Svgp => ModelKind::Svgp,
        };
    }
    if let Some(p) = a.prior {
        cfg.pool.prior = match p {
            PriorArg::Horseshoe => Prior::Horseshoe,
            PriorArg::None => Prior::None,
        };
    }
    if let Some(s) = a.split {
        cfg.split = match s {
            SplitArg::Pca => SplitSpec::PcaExtrapolation,
            SplitArg::Random => SplitSpec::Random { fraction: 0.9, seed: cfg.seed },
        };
    }
    if let Some(f) = a.train_fraction {
        match &mut cfg.split {
            SplitSpec::Random { fraction, .. } => *fraction = f,
            SplitSpec::PcaExtrapolation => return Err(Error::Config("--train-fraction applies to the random split".into())),
        }
    }
    if a.freeze_inducing {
        cfg.training.optimize_inducing = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_trace(path: &Path, trace: &[ElboBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iter", "elbo", "expected_loglik", "kl_u", "kl_w"]).map_err(csv_err)?;
    for (i, b) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format!("{:?}", b.elbo),
            format!("{:?}", b.expected_loglik),
            format!("{:?}", b.kl_inducing),
            format!("{:?}", b.kl_weights),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs (original units), optional target, then predictive columns.
fn write_predictions(path: &Path, columns: &[String], x: &DMatrix<f64>, y: Option<(&str, &DVector<f64>)>, p: &Predictions, task: Task) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = columns.to_vec();
    if let Some((name, _)) = y {
        header.push(name.to_string());
    }
    header.extend(["mean".into(), "latent_variance".into()]);
    header.push(match task {
        Task::Regression => "variance".into(),
        Task::Classification => "probability".into(),
    });
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..x.nrows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some((_, yv)) = y {
            rec.push(format!("{:?}", yv[i]));
        }
        rec.push(format!("{:?}", p.mean[i]));
        rec.push(format!("{:?}", p.latent_var[i]));
        rec.push(format!("{:?}", p.observed[i]));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn default_grid(x: &DMatrix<f64>, points: usize) -> Option<DMatrix<f64>> {
    if x.ncols() != 1 || points < 2 {
        return None;
    }
    let (lo, hi) = (x.column(0).min(), x.column(0).max());
    Some(DMatrix::from_fn(points, 1, |i, _| lo + (hi - lo) * i as f64 / (points - 1) as f64))
}

fn train_one(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (ds, st) = load_csv(data, cfg.target.as_deref(), cfg.task)?;
    let (train_set, test_set) = split(&ds, &cfg.split)?;
    let fitted = fit(cfg, &train_set)?;
    fs::create_dir_all(out)?;
    write_trace(&out.join("trace.csv"), &fitted.trace)?;
    write_json(&out.join("config.json"), cfg)?;
    let p = predict(&fitted.model, &st, &test_set.x, cfg.training.mc_samples_eval, cfg.seed)?;
    let y_test = st.inverse_mean(&test_set.y);
    let y_test = if cfg.task == Task::Classification { test_set.y.clone() } else { y_test };
    write_predictions(
        &out.join("predictions.csv"),
        &ds.input_columns,
        &st.inverse_x(&test_set.x),
        Some((&ds.target_column, &y_test)),
        &p,
        cfg.task,
    )?;
    let metrics = metrics_from_predictions(&fitted.model, &y_test, &p, cfg.task)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    if let AnyModel::MultiSvgp(m) = &fitted.model {
        write_weights_csv(m, File::create(out.join("weights.csv"))?)?;
        let raw_x = st.inverse_x(&ds.x);
        let grid = default_grid(&raw_x, 200).unwrap_or(raw_x);
        decompose(m, &grid, Some(&st))?.write_dir(&out.join("decomposition"))?;
    }
    let ck = Checkpoint::new(cfg, fitted.model, st, ds.input_columns.clone(), ds.target_column.clone())?;
    ck.save(&out.join("checkpoint"))?;
    println!("{}: {}", out.display(), serde_json::to_string(&metrics)?);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    if a.seeds.is_empty() {
        return train_one(&cfg, &a.data, &a.out);
    }
    let jobs = a.jobs.max(1);
    let runs: Vec<(RunConfig, PathBuf)> = a
        .seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            (c, a.out.join(format!("seed-{s}")))
        })
        .collect();
    let mut results: Vec<Result<()>> = Vec::with_capacity(runs.len());
    for chunk in runs.chunks(jobs) {
        let chunk_results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|(c, out)| scope.spawn(|| train_one(c, &a.data, out))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        results.extend(chunk_results);
    }
    // Report the first failure in seed order.
    results.into_iter().collect()
}

fn apply(a: ApplyArgs, evaluate: bool) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let task = ck.task;
    let raw = fs::read_to_string(&a.data)?;
    let header: Vec<String> = csv::Reader::from_reader(raw.as_bytes())
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let has_target = header.iter().any(|h| h == &ck.target_column);
    if evaluate && !has_target {
        return Err(Error::Config(format!("evaluation data has no column {:?}", ck.target_column)));
    }
    let (x_raw, y_raw) = if has_target {
        let ds = load_csv_reader(raw.as_bytes(), Some(&ck.target_column), task)?;
        (reorder(&ds.x, &ds.input_columns, &ck.input_columns)?, Some(ds.y))
    } else {
        // No target column: parse all columns as inputs via a dummy target.
        let with_dummy = append_dummy(&raw)?;
        let ds = load_csv_reader(with_dummy.as_bytes(), Some("__target"), Task::Regression)?;
        (reorder(&ds.x, &ds.input_columns, &ck.input_columns)?, None)
    };
    let xs = ck.standardizer.transform_x(&x_raw)?;
    let p = predict(&ck.model, &ck.standardizer, &xs, ck.config.training.mc_samples_eval, ck.config.seed)?;
    fs::create_dir_all(&a.out)?;
    let y_ref = y_raw.as_ref().map(|y| (ck.target_column.as_str(), y));
    write_predictions(&a.out.join("predictions.csv"), &ck.input_columns, &x_raw, y_ref, &p, task)?;
    if evaluate {
        let m = metrics_from_predictions(&ck.model, y_raw.as_ref().expect("target checked"), &p, task)?;
        write_json(&a.out.join("metrics.json"), &m)?;
        println!("{}", serde_json::to_string(&m)?);
    }
    Ok(())
}

fn append_dummy(raw: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len() + 64);
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push_str(line);
        out.push_str(if i == 0 { ",__target\n" } else { ",0\n" });
    }
    Ok(out)
}

fn reorder(x: &DMatrix<f64>, have: &[String], want: &[String]) -> Result<DMatrix<f64>> {
    let idx: Vec<usize> = want
        .iter()
        .map(|w| have.iter().position(|h| h == w).ok_or_else(|| Error::Config(format!("input column {w:?} missing"))))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(x.nrows(), idx.len(), |r, c| x[(r, idx[c])]))
}

fn decompose_cmd(a: DecomposeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let AnyModel::MultiSvgp(model) = &ck.model else {
        return Err(Error::Config("decomposition needs a MultiSVGP checkpoint".into()));
    };
    let grid = match &a.grid {
        Some(p) => {
            let raw = append_dummy(&fs::read_to_string(p)?)?;
            let ds = load_csv_reader(raw.as_bytes(), Some("__target"), Task::Regression)?;
            reorder(&ds.x, &ds.input_columns, &ck.input_columns)?
        }
        None => {
            if model.input_dim() != 1 {
                return Err(Error::Config("--grid is required for multi-dimensional inputs".into()));
            }
            if a.points < 2 || !(a.hi > a.lo) {
                return Err(Error::Config("grid needs at least 2 points and hi > lo".into()));
            }
            DMatrix::from_fn(a.points, 1, |i, _| a.lo + (a.hi - a.lo) * i as f64 / (a.points - 1) as f64)
        }
    };
    let d = decompose(model, &grid, Some(&ck.standardizer))?;
    d.write_dir(&a.out.join("decomposition"))?;
    write_weights_csv(model, File::create(a.out.join("weights.csv"))?)?;
    for c in d.components.iter().take(5) {
        println!("{:>2}. w = {:<10.4} {}", c.rank, c.weight, c.description);
    }
    Ok(())
}

fn kernel_from_structure(s: &str) -> Result<KernelExpr> {
    let kinds = parse_structure(s)?;
    Ok(KernelExpr::new(kinds.into_iter().map(BaseKernel::default_of).collect(), InitScheme::Weak))
}

fn bound_cmd(a: BoundArgs) -> Result<()> {
    let k1 = kernel_from_structure(&a.k1)?;
    let k2 = kernel_from_structure(&a.k2)?;
    let (x, y) = match &a.data {
        Some(p) => {
            let (ds, _) = load_csv(p, None, Task::Regression)?;
            (ds.x, ds.y)
        }
        None => {
            if a.n < 2 {
                return Err(Error::Config("--n must be at least 2".into()));
            }
            let x = DMatrix::from_fn(a.n, 1, |i, _| -5.0 + 10.0 * i as f64 / (a.n - 1) as f64);
            let y = x.column(0).map(f64::sin);
            (x, y)
        }
    };
    let r = verify_proposition(&k1, &k2, &x, &y, a.m, a.noise, a.delta, a.seed)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("bound.json"), r.to_json()? + "\n")?;
    print!("{}", r.table());
    if r.holds {
        println!("C_multi <= C_single holds (slack {:.3e})", r.slack);
        Ok(())
    } else {
        Err(Error::Assertion(format!("C_multi exceeds C_single by {:.3e}", -r.slack)))
    }
}

fn pool_cmd(a: PoolArgs) -> Result<()> {
    let pool = build_pool(&PoolConfig::default())?;
    let mut text = String::new();
    if a.json {
        text = pool.to_json()? + "\n";
    } else {
        for (i, k) in pool.members.iter().enumerate() {
            text += &format!("{:>2} {:<8} {:<7} {}\n", i, k.name(), format!("{:?}", k.init_scheme), describe(k));
        }
    }
    // A closed pipe (e.g. `| head`) is not an error.
    let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), text.as_bytes());
    Ok(())
}
