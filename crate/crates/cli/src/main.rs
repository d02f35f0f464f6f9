//! `mtoc`: train, evaluate and inspect multi-task one-class models.
//!
//! Exit status: 0 success, 1 validation error, 2 numerical or training
//! error, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtoc_core::harness::dataset::{load_csv, write_csv, DatasetBundle};
use mtoc_core::harness::experiment::{
    run_experiment, select_second_layer, sweep_regularization, DataLoader, DataSource, ExperimentConfig,
};
use mtoc_core::harness::gradcheck::{gradcheck, GradReport, GradTarget, HARD_FAIL};
use mtoc_core::harness::synth::SynthSpec;
use mtoc_core::model::{TrainedModel, Variant};
use mtoc_core::ocksr::auc;
use mtoc_core::persist::{load_model, save_model};
use mtoc_core::{Error, Mat, Result};

#[derive(Parser)]
#[command(name = "mtoc", version, about = "Multi-task one-class kernel null-space classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config's worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset CSV per repetition.
    Synth {
        /// Number of draws, seeds `seed..seed+count`.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Fit each configured variant on one dataset and save the models.
    Train {
        /// Dataset CSV; overrides the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the configured experiment, or score a saved model on a dataset.
    Eval {
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the experiment at every point of a first-layer ridge grid.
    Sweep {
        /// Comma-separated grid; the config's grid or the default otherwise.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// linear-B, nonlinear-A, nonlinear-theta, sparse-A or all.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        /// Instances per target.
        #[arg(long, default_value_t = 20)]
        count: u64,
    },
    /// Write a model's matrices as CSV and its metadata as JSON.
    Export {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth { count } => synth(c, *count),
        Command::Train { data } => train(c, data.as_deref()),
        Command::Eval {
            model: Some(m),
            data: Some(d),
        } => eval_model(c, m, d),
        Command::Eval { data, .. } => eval(c, data.as_deref()),
        Command::Sweep { grid, data } => sweep(c, grid.as_deref(), data.as_deref()),
        Command::Gradcheck {
            target,
            n,
            tasks,
            h,
            count,
        } => grad(c, target, *n, *tasks, *h, *count),
        Command::Export { model } => export(c, model),
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(Variant::ALL.to_vec(), DataSource::default()),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn loader(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<DataLoader> {
    match data {
        Some(p) => Ok(DataLoader::Fixed(load_csv(p)?)),
        None => DataLoader::from_config(cfg),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("value serializes"))?;
    Ok(())
}

fn synth(c: &Common, count: usize) -> Result<u8> {
    let cfg = load_config(c)?;
    let spec = match &cfg.data {
        DataSource::Synth(s) => s.clone(),
        _ if c.config.is_none() => SynthSpec::default(),
        _ => {
            return Err(Error::Parameter(
                "synth needs a config whose data source is synth".into(),
            ))
        }
    };
    spec.validate()?;
    let data = DataLoader::Synth { spec, base: cfg.seed };
    fs::create_dir_all(&c.out_dir)?;
    for rep in 0..count {
        let seed = cfg.seed + rep as u64;
        let path = c.out_dir.join(format!("synth_seed{seed}.csv"));
        write_csv(&data.bundle(rep)?, &path)?;
        println!("{}", path.display());
    }
    Ok(0)
}

fn train(c: &Common, data: Option<&Path>) -> Result<u8> {
    let cfg = load_config(c)?;
    cfg.validate(None)?;
    let bundle = loader(&cfg, data)?.bundle(0)?;
    fs::create_dir_all(&c.out_dir)?;
    for &v in &cfg.variants {
        let mut mc = cfg.model_config(v, None);
        let selected = select_second_layer(&cfg, &mut mc, &bundle, cfg.seed)?;
        let model = TrainedModel::fit(&mc, &bundle.train_features(), &bundle.train_task_ids(), bundle.tasks)?;
        let path = c.out_dir.join(format!("{v}.mtoc"));
        save_model(&model, &path)?;
        let mut line = format!(
            "{v}: {} iterations, training sse {:.6}, saved {}",
            model.trace.iterations(),
            model.training_sse()?,
            path.display()
        );
        if let Some(s) = selected {
            line.push_str(&format!(", cross-validated second-layer weight {s}"));
        }
        println!("{line}");
    }
    Ok(0)
}

fn print_means(table: &mtoc_core::harness::experiment::ResultTable) {
    for m in &table.means {
        println!(
            "{:<9} gamma {:<8e} mean auc {:.4} ({} runs, {} failed)",
            m.variant.as_str(),
            m.gamma,
            m.mean_auc,
            m.runs,
            m.failed
        );
    }
}

fn eval(c: &Common, data: Option<&Path>) -> Result<u8> {
    let cfg = load_config(c)?;
    let table = run_experiment(&cfg, &loader(&cfg, data)?, Some(&c.out_dir))?;
    print_means(&table);
    println!("results in {}", c.out_dir.join("results.csv").display());
    Ok(if table.failures() > 0 { 2 } else { 0 })
}

fn eval_model(c: &Common, model: &Path, data: &Path) -> Result<u8> {
    let model = load_model(model)?;
    let bundle: DatasetBundle = load_csv(data)?;
    bundle.validate_for_evaluation()?;
    if bundle.tasks != model.tasks || bundle.dim() != model.train_features.ncols() {
        return Err(Error::Input(format!(
            "dataset has {} tasks and {} features, model expects {} and {}",
            bundle.tasks,
            bundle.dim(),
            model.tasks,
            model.train_features.ncols()
        )));
    }
    fs::create_dir_all(&c.out_dir)?;
    let mut w = csv::Writer::from_path(c.out_dir.join("scores.csv")).map_err(csv_err)?;
    w.write_record(["task", "row", "score", "label"]).map_err(csv_err)?;
    let mut aucs = Vec::new();
    for t in 0..bundle.tasks {
        let ts = bundle.test_set(t);
        let s = model.score(&ts.features)?;
        let col: Vec<f64> = s.column(t).iter().copied().collect();
        for ((row, score), label) in ts.rows.iter().zip(&col).zip(&ts.labels) {
            let l = if *label { "target" } else { "nontarget" };
            w.write_record([t.to_string(), row.to_string(), score.to_string(), l.to_string()])
                .map_err(csv_err)?;
        }
        let a = auc(&col, &ts.labels)?;
        println!("task {t}: auc {a:.4}");
        aucs.push(a);
    }
    w.flush()?;
    println!("mean auc {:.4}", aucs.iter().sum::<f64>() / aucs.len() as f64);
    Ok(0)
}

fn sweep(c: &Common, grid: Option<&[f64]>, data: Option<&Path>) -> Result<u8> {
    let cfg = load_config(c)?;
    let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.grid());
    let (table, _) = sweep_regularization(&cfg, &loader(&cfg, data)?, &grid, Some(&c.out_dir))?;
    print_means(&table);
    println!("sweep in {}", c.out_dir.join("sweep.csv").display());
    Ok(if table.failures() > 0 { 2 } else { 0 })
}

fn grad(c: &Common, target: &str, n: usize, tasks: usize, h: f64, count: u64) -> Result<u8> {
    let targets = if target.eq_ignore_ascii_case("all") {
        GradTarget::ALL.to_vec()
    } else {
        vec![target.parse()?]
    };
    let base = c.seed.unwrap_or(0);
    let mut reports: Vec<GradReport> = Vec::new();
    for t in targets {
        for i in 0..count {
            let r = gradcheck(t, n, tasks, base + i, h)?;
            for note in &r.notes {
                eprintln!("{t}: {note}");
            }
            reports.push(r);
        }
        let worst = reports
            .iter()
            .filter(|r| r.target == t)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        println!("{t}: {count} instances, max relative error {worst:.3e}");
    }
    fs::create_dir_all(&c.out_dir)?;
    write_json(&c.out_dir.join("gradcheck.json"), &serde_json::json!(reports))?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!("{failed} instance(s) above {HARD_FAIL:e}");
        return Ok(2);
    }
    Ok(0)
}

fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn export(c: &Common, model: &Path) -> Result<u8> {
    let m = load_model(model)?;
    fs::create_dir_all(&c.out_dir)?;
    let mut files = vec![("A", &m.a), ("X", &m.train_features)];
    if let Some(b) = &m.b {
        files.push(("B", b));
    }
    if let Some(y) = &m.y_train {
        files.push(("Y", y));
    }
    for (name, mat) in &files {
        write_matrix(&c.out_dir.join(format!("{name}.csv")), mat)?;
    }
    let meta = serde_json::json!({
        "variant": m.variant().as_str(),
        "sigma": m.sigma,
        "theta": m.theta,
        "tasks": m.tasks,
        "task_ids": m.task_ids,
        "target_means": m.target_means,
        "fingerprint": m.fingerprint,
        "config": m.config.to_toml(),
        "matrices": files.iter().map(|(n, _)| format!("{n}.csv")).collect::<Vec<_>>(),
        "trace": m.trace,
    });
    write_json(&c.out_dir.join("model.json"), &meta)?;
    println!("exported {} matrices to {}", files.len(), c.out_dir.display());
    Ok(0)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}
