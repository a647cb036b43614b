use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use otrcl::checkpoint::Checkpoint;
use otrcl::data::io::{format_labels, load_dataset, read_matrix, save_dataset, write_matrix};
use otrcl::data::{generate, SynthConfig};
use otrcl::eval::correction_accuracy;
use otrcl::experiment::{check_compatible, evaluate_checkpoint, run, DataSource, EvalReport, ExperimentConfig};
use otrcl::linalg::argmax;
use otrcl::model::{correction_step, Modality, Mode, TrainConfig};
use otrcl::ot::{exact_ot_oracle, sinkhorn, CostMatrix, Marginal, SinkhornParams};
use otrcl::semantic::{select_confident, TargetMatrix};

#[derive(Parser)]
#[command(name = "otrcl", version, about = "Optimal-transport label correction for cross-modal retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Gen(GenArgs),
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate one checkpoint, or compare two.
    Eval(EvalArgs),
    /// Run one label-correction solve from a checkpoint.
    Correct(CorrectArgs),
    /// Solve an entropic OT problem from matrix files.
    Solve(SolveArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    dim_v: usize,
    #[arg(long, default_value_t = 32)]
    dim_t: usize,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Plc,
    Bhg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Ce,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; replaces the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Label noise of synthetic data.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    s_start: Option<f64>,
    #[arg(long)]
    s_end: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum, conflicts_with = "baseline")]
    ablate: Option<Ablation>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(required = true, num_args = 1..=2)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of samples that receive corrected labels.
    #[arg(long, default_value_t = 0.8)]
    mass: f64,
    /// Training configuration for the solver settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Cost matrix (OTRF1).
    cost: PathBuf,
    /// Row marginal (OTRF1 vector); uniform when omitted.
    #[arg(long)]
    alpha: Option<PathBuf>,
    /// Column marginal (OTRF1 vector); uniform when omitted.
    #[arg(long)]
    beta: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Also run the exhaustive assignment oracle (square costs up to 8x8).
    #[arg(long)]
    oracle: bool,
    /// Write the plan here (OTRF1).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Solve(a) => cmd_solve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<otrcl::Error>(), Some(otrcl::Error::Argument(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("OTRCL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().with_context(|| format!("OTRCL_THREADS={value:?} is not a count"))?;
    if threads == 0 {
        bail!("OTRCL_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let mut config = SynthConfig {
        n: a.n,
        n_val: a.n_val,
        n_test: a.n_test,
        k: a.k,
        d_v: a.dim_v,
        d_t: a.dim_t,
        noise_ratio: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    if let Some(s) = a.spread {
        config.cluster_spread = s;
    }
    let data = generate(&config)?;
    let manifest = save_dataset(&data, &a.out)?;
    let corrupted = data.corrupted_count().unwrap_or(0);
    println!(
        "{} train / {} val / {} test pairs, {} classes, {corrupted} corrupted labels ({:.1}%)",
        data.splits.train,
        data.splits.val,
        data.splits.test,
        data.classes,
        100.0 * corrupted as f64 / data.splits.train.max(1) as f64
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn experiment_from(a: &TrainArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &a.data {
        config.data = DataSource::Manifest(path.clone());
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(noise) = a.noise {
        match &mut config.data {
            DataSource::Synthetic(s) => s.noise_ratio = noise,
            DataSource::Manifest(_) => {
                return Err(otrcl::Error::Argument("--noise applies to synthetic data only".into()).into())
            }
        }
    }
    let t = &mut config.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.warmup_epochs, a.warmup);
    set(&mut t.lambda, a.lambda);
    set(&mut t.gamma, a.gamma);
    set(&mut t.s_start, a.s_start);
    set(&mut t.s_end, a.s_end);
    set(&mut t.epsilon_ot, a.epsilon);
    if a.baseline.is_some() {
        t.mode = Mode::CeBaseline;
    }
    match a.ablate {
        Some(Ablation::Plc) => t.mode = Mode::AblatePlc,
        Some(Ablation::Bhg) => {
            t.mode = Mode::AblateBhg;
            t.lambda = 0.0;
        }
        None => {}
    }
    if t.mode == Mode::CeBaseline {
        t.lambda = 0.0;
    }
    if let Some(out) = &a.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let config = experiment_from(&a)?;
    let Some(out) = config.out.clone() else {
        return Err(otrcl::Error::Argument("an output directory is required (--out or `out` in the config)".into()).into());
    };
    let summary = run(&config, &out)?;
    let m = &summary.metrics;
    let show = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("mode {:?}, {} epochs", m.mode, m.epochs.len());
    println!("test mAP i2t {} t2i {} mean {}", show(m.map_i2t), show(m.map_t2i), show(m.map_mean()));
    println!(
        "correction accuracy assigned {} all {}",
        show(m.correction_accuracy.assigned),
        show(m.correction_accuracy.all)
    );
    println!("outputs in {}", summary.out_dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    let mut reports = Vec::new();
    for path in &a.checkpoints {
        let ck = Checkpoint::load(path)?;
        reports.push(evaluate_checkpoint(&ck, &data).with_context(|| format!("evaluating {}", path.display()))?);
    }
    print!("{}", eval_table(&a.checkpoints, &reports));
    Ok(())
}

fn eval_table(paths: &[PathBuf], reports: &[EvalReport]) -> String {
    let rows: [(&str, fn(&EvalReport) -> Option<f64>); 6] = [
        ("test map_i2t", |r| r.map_i2t),
        ("test map_t2i", |r| r.map_t2i),
        ("test map_mean", |r| Some(0.5 * (r.map_i2t? + r.map_t2i?))),
        ("val map_i2t", |r| r.val_map_i2t),
        ("val map_t2i", |r| r.val_map_t2i),
        ("label_accuracy", |r| r.label_accuracy),
    ];
    let show = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
    let mut out = format!("{:<16}", "metric");
    for i in 1..=reports.len() {
        out += &format!(" {:>12}", format!("[{i}]"));
    }
    if reports.len() == 2 {
        out += &format!(" {:>12}", "[2]-[1]");
    }
    out.push('\n');
    for (name, get) in rows {
        out += &format!("{name:<16}");
        for r in reports {
            out += &format!(" {:>12}", show(get(r)));
        }
        if let [a, b] = reports {
            out += &format!(" {:>12}", show(get(b).zip(get(a)).map(|(b, a)| b - a)));
        }
        out.push('\n');
    }
    for (i, p) in paths.iter().enumerate() {
        out += &format!("[{}] {}\n", i + 1, p.display());
    }
    out
}

fn cmd_correct(a: CorrectArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(path) => ExperimentConfig::load(path)?.train,
        None => TrainConfig::default(),
    };
    set(&mut config.epsilon_ot, a.epsilon);
    config.sinkhorn().validate()?;
    if !(0.0..=1.0).contains(&a.mass) {
        return Err(otrcl::Error::Argument(format!("--mass must lie in [0, 1], got {}", a.mass)).into());
    }
    let data = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    check_compatible(&ck, &data)?;

    let range = data.splits.train_range();
    let z_v = ck.state.embed(data.view_v(range.clone()), Modality::Visual)?;
    let z_t = ck.state.embed(data.view_t(range.clone()), Modality::Text)?;
    let conf = select_confident(
        ck.state.predict(z_v.view()).view(),
        ck.state.predict(z_t.view()).view(),
        config.confident_per_class,
    )?;
    let noisy = data.one_hot(range.clone());
    let targets = TargetMatrix { values: ck.targets.clone().unwrap_or_else(|| noisy.clone()) };
    let current: Array2<f64> = ck.training_targets.clone().unwrap_or(noisy);
    let soft = correction_step(&conf, z_v.view(), z_t.view(), &targets, current.view(), a.mass, &config)?;

    let labels: Vec<usize> = (0..soft.values.nrows())
        .map(|i| if soft.is_assigned(i) { argmax(soft.values.row(i)) } else { argmax(current.row(i)) })
        .collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_matrix(&a.out.join("soft_labels.otrf"), &soft.values)?;
    fs::write(a.out.join("corrected_labels.txt"), format_labels(&labels))?;

    let assigned = (0..soft.values.nrows()).filter(|&i| soft.is_assigned(i)).count();
    println!("mass {} assigned to {assigned} of {} samples (converged: {})", soft.assigned_mass, labels.len(), soft.converged);
    if let Some(truth) = &data.true_labels {
        let acc = correction_accuracy(&soft, current.view(), &truth[range])?;
        let show = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("accuracy assigned {} all {}", show(acc.assigned), show(Some(acc.all)));
    }
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn read_marginal(path: Option<&Path>, len: usize) -> anyhow::Result<Marginal> {
    match path {
        None => Ok(Marginal::uniform(len)?),
        Some(p) => {
            let m = read_matrix(p)?;
            if m.nrows() != 1 && m.ncols() != 1 {
                bail!("{} must hold a single row or column, found {}x{}", p.display(), m.nrows(), m.ncols());
            }
            Ok(Marginal::new(m.iter().copied().collect::<Vec<f64>>())?)
        }
    }
}

fn cmd_solve(a: SolveArgs) -> anyhow::Result<()> {
    let cost = CostMatrix::new(read_matrix(&a.cost)?)?;
    let (m, n) = cost.dim();
    let alpha = read_marginal(a.alpha.as_deref(), m)?;
    let beta = read_marginal(a.beta.as_deref(), n)?;
    let params = SinkhornParams { epsilon: a.epsilon, max_iters: a.max_iters, tol: a.tol };
    let plan = sinkhorn(&cost, &alpha, &beta, &params)?;
    for row in plan.values.outer_iter() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
        println!("{}", cells.join(" "));
    }
    println!("objective {}", number(plan.objective(&cost)?));
    println!("converged {} after {} iterations, marginal violation {:e}", plan.converged, plan.iterations, plan.max_violation);
    if a.oracle {
        let (perm, objective) = exact_ot_oracle(&cost)?;
        let perm: Vec<String> = perm.iter().map(usize::to_string).collect();
        println!("oracle permutation {} objective {}", perm.join(" "), number(objective));
    }
    if let Some(out) = &a.out {
        write_matrix(out, &plan.values)?;
    }
    Ok(())
}

fn number(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-4 {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}
