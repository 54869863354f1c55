use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mamf_core::data::{gen_synthetic, import_csv_dir, read_dataset, write_dataset};
use mamf_core::eval::{self, run_algorithm, MetaTestPlan, SweepPlan, DEFAULT_ADAPT_EPOCHS, DEFAULT_SEEDS};
use mamf_core::model::{load_checkpoint, save_checkpoint};
use mamf_core::report::{read_results_csv, render_reports, RenderedFiles};
use mamf_core::tasks::{sample_tasks, TaskConfig};
use mamf_core::train::{self, META_TEST_LR};
use mamf_core::{
    write_atomic, Algorithm, EmbeddingDataset, Error, ErrorClass, EvalReport, Result, SeededRng,
    SyntheticSpec, TrainOverrides, TrainPlan,
};

mod config;

use config::{merge_overrides, pick, FileConfig, SyntheticSection, TaskCount};

const EFFECTIVE_CONFIG: &str = "effective_config.toml";
const CHECKPOINT_FILE: &str = "model.fprj";
const TRAIN_LOG: &str = "train_log.csv";

#[derive(Parser)]
#[command(version, about = "Few-shot fine-tuning of a contrastive projection head over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset.
    GenSynthetic(GenArgs),
    /// Convert a directory of CSV embeddings (with manifest.toml) to a dataset file.
    Import(ImportArgs),
    /// Print or save a sampled sequence of N-way tasks.
    SampleTasks(SampleArgs),
    /// Train one algorithm and save the checkpoint plus a loss log.
    Train(TrainArgs),
    /// Train (unless a checkpoint is given) and meta-test one algorithm.
    MetaTest(MetaTestArgs),
    /// Meta-test several algorithms over a range of N.
    Sweep(SweepArgs),
    /// Re-render tables and figures from a results CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML file with defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of classes.
    #[arg(long = "m", visible_alias = "M")]
    num_classes: Option<usize>,
    #[arg(long)]
    d_img: Option<usize>,
    #[arg(long)]
    d_txt: Option<usize>,
    #[arg(long)]
    d_joint: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_support: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    sigma_between: Option<f64>,
    #[arg(long)]
    sigma_within: Option<f64>,
    /// Add a label-revealing block to train images that is shuffled in support/query.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    spurious: Option<bool>,
    #[arg(long)]
    spurious_strength: Option<f64>,
    /// Mutually orthogonal, equal-norm class centroids.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    orthogonal: Option<bool>,
    #[arg(long)]
    prompt_template: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory holding manifest.toml and the CSV files it names.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    /// Classes per task.
    #[arg(long = "n", visible_alias = "N")]
    n: Option<usize>,
    /// Number of tasks, or "auto" for the coverage rule.
    #[arg(long = "t", visible_alias = "T")]
    t: Option<TaskCount>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset whose class count is used; alternatively give --m.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long = "m", visible_alias = "M")]
    num_classes: Option<usize>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverrideArgs {
    /// Classical epochs, MAMF epochs per task, or FOMAML passes.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    reset_adam_per_task: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    resample_each_pass: Option<bool>,
    #[arg(long)]
    support_fraction: Option<f64>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> TrainOverrides {
        TrainOverrides {
            epochs: self.epochs,
            lr: self.lr,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            batch_size: self.batch_size,
            scale: self.scale,
            normalize: self.normalize,
            reset_adam_per_task: self.reset_adam_per_task,
            resample_each_pass: self.resample_each_pass,
            support_fraction: self.support_fraction,
        }
    }
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, env = "MAMF_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// First evaluation seed; seeds run from here upwards.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_seeds: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[arg(long)]
    adapt_epochs: Option<usize>,
    #[arg(long, env = "MAMF_JOBS")]
    jobs: Option<usize>,
    /// Label written to the dataset column; defaults to the file stem.
    #[arg(long)]
    dataset_name: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct MetaTestArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Meta-test this model instead of training one per seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<Algorithm>>,
    /// Comma-separated N values; defaults to 2..M-1.
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// A results.csv written by meta-test or sweep.
    #[arg(long)]
    results: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Usage(format!("missing --{flag} (or `{}` in the config file)", flag.replace('-', "_"))))
}

fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let ds = read_dataset(path)?;
    info!("loaded {} ({} classes)", path.display(), ds.num_classes());
    Ok(ds)
}

fn dataset_label(name: Option<String>, path: &Path) -> String {
    name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn resolve_task(n: Option<usize>, t: Option<TaskCount>, num_classes: usize) -> Result<(TaskConfig, TaskCount)> {
    let n = required(n, "n")?;
    let t = t.unwrap_or(TaskCount::Auto);
    let cfg = match t {
        TaskCount::Auto => TaskConfig::auto(n, num_classes)?,
        TaskCount::Fixed(t) => TaskConfig::new(n, t, num_classes)?,
    };
    Ok((cfg, t))
}

fn eval_seeds(first: u64, count: usize) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(Error::Usage("num_seeds must be >= 1".into()));
    }
    (0..count as u64)
        .map(|i| {
            first
                .checked_add(i)
                .ok_or_else(|| Error::Usage(format!("seed range starting at {first} overflows")))
        })
        .collect()
}

fn echo_config(dir: &Path, cfg: &FileConfig) -> Result<()> {
    write_atomic(&dir.join(EFFECTIVE_CONFIG), cfg.to_toml()?.as_bytes())
}

fn print_rendered(files: &RenderedFiles) {
    println!("wrote {}", files.results_csv.display());
    println!("wrote {}", files.aggregate_csv.display());
    println!("wrote {}", files.accuracy_svg.display());
    if let Some(p) = &files.winner_svg {
        println!("wrote {}", p.display());
    }
}

fn synthetic_spec(s: &SyntheticSection) -> SyntheticSpec {
    let d = SyntheticSpec::default();
    SyntheticSpec {
        num_classes: s.num_classes.unwrap_or(d.num_classes),
        d_img: s.d_img.unwrap_or(d.d_img),
        d_txt: s.d_txt.unwrap_or(d.d_txt),
        d_joint: s.d_joint.unwrap_or(d.d_joint),
        n_train: s.n_train.unwrap_or(d.n_train),
        n_support: s.n_support.unwrap_or(d.n_support),
        n_query: s.n_query.unwrap_or(d.n_query),
        sigma_between: s.sigma_between.unwrap_or(d.sigma_between),
        sigma_within: s.sigma_within.unwrap_or(d.sigma_within),
        spurious: s.spurious.unwrap_or(d.spurious),
        spurious_strength: s.spurious_strength.unwrap_or(d.spurious_strength),
        orthogonal_centroids: s.orthogonal_centroids.unwrap_or(d.orthogonal_centroids),
        prompt_template: s.prompt_template.clone().unwrap_or(d.prompt_template),
    }
}

fn cmd_gen_synthetic(a: GenArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let f = &file.synthetic;
    let section = SyntheticSection {
        num_classes: pick(a.num_classes, f.num_classes),
        d_img: pick(a.d_img, f.d_img),
        d_txt: pick(a.d_txt, f.d_txt),
        d_joint: pick(a.d_joint, f.d_joint),
        n_train: pick(a.n_train, f.n_train),
        n_support: pick(a.n_support, f.n_support),
        n_query: pick(a.n_query, f.n_query),
        sigma_between: pick(a.sigma_between, f.sigma_between),
        sigma_within: pick(a.sigma_within, f.sigma_within),
        spurious: pick(a.spurious, f.spurious),
        spurious_strength: pick(a.spurious_strength, f.spurious_strength),
        orthogonal_centroids: pick(a.orthogonal, f.orthogonal_centroids),
        prompt_template: pick(a.prompt_template, f.prompt_template.clone()),
    };
    let spec = synthetic_spec(&section);
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let out = required(pick(a.out, file.out), "out")?;
    let ds = gen_synthetic(&spec, &mut SeededRng::new(seed))?;
    write_dataset(&ds, &out)?;
    let (n_train, n_support, n_query) = ds.split_counts();
    println!(
        "M={} d_img={} d_txt={} d_joint={} per-class train/support/query={n_train}/{n_support}/{n_query} spurious={} seed={seed}",
        ds.num_classes(),
        ds.d_img,
        ds.d_txt,
        ds.d_joint,
        if spec.spurious { "yes" } else { "no" },
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_import(a: ImportArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let dir = required(pick(a.input_dir, file.input_dir), "input-dir")?;
    let out = required(pick(a.out, file.out), "out")?;
    let ds = import_csv_dir(&dir)?;
    write_dataset(&ds, &out)?;
    let (n_train, n_support, n_query) = ds.split_counts();
    println!(
        "M={} d_img={} d_txt={} d_joint={} per-class train/support/query={n_train}/{n_support}/{n_query} pretrained_projection={}",
        ds.num_classes(),
        ds.d_img,
        ds.d_txt,
        ds.d_joint,
        if ds.pretrained_projection.is_some() { "yes" } else { "no" },
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sample_tasks(a: SampleArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let m = match (pick(a.dataset, file.dataset), pick(a.num_classes, file.num_classes)) {
        (Some(path), _) => load_dataset(&path)?.num_classes(),
        (None, Some(m)) => m,
        (None, None) => return Err(Error::Usage("give --dataset or --m".into())),
    };
    let (cfg, _) = resolve_task(pick(a.task.n, file.n), pick(a.task.t, file.t), m)?;
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let tasks = sample_tasks(m, &cfg, &mut SeededRng::child(seed, train::STREAM_TASKS))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("task table: {e}"));
    w.write_record(["task_id", "class_indices"]).map_err(csv_err)?;
    for (i, task) in tasks.iter().enumerate() {
        let classes: Vec<String> = task.class_indices.iter().map(|c| c.to_string()).collect();
        w.write_record([i.to_string(), classes.join(" ")]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("task table: {e}")))?;
    match pick(a.out, file.out) {
        Some(out) => {
            write_atomic(&out, &bytes)?;
            eprintln!("M={m} N={} T={} -> {}", cfg.n, cfg.t, out.display());
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let dataset = required(pick(a.dataset, file.dataset.clone()), "dataset")?;
    let algorithm = required(pick(a.algorithm, file.algorithm), "algorithm")?;
    let output_dir = required(pick(a.output.output_dir, file.output_dir.clone()), "output-dir")?;
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let overrides = merge_overrides(&a.overrides.to_overrides(), &file.train);
    let ds = load_dataset(&dataset)?;

    let n = pick(a.task.n, file.n);
    let t = pick(a.task.t, file.t);
    let needs_tasks = matches!(algorithm, Algorithm::Mamf | Algorithm::Fomaml);
    let (cfg, t_echo) = if needs_tasks {
        let (cfg, t) = resolve_task(n, t, ds.num_classes())?;
        (Some(cfg), Some(t))
    } else {
        (None, t)
    };
    let mut plan = overrides.apply(TrainPlan::for_algorithm(
        algorithm,
        cfg.unwrap_or(TaskConfig { n: ds.num_classes(), t: 1 }),
        seed,
    ));
    plan.task_config = cfg;
    let outcome = train::train(&ds, &plan)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let log_path = output_dir.join(TRAIN_LOG);
    let csv_err = |e: csv::Error| Error::Csv {
        path: log_path.clone(),
        source: e,
    };
    w.write_record(["step", "task_id", "loss"]).map_err(csv_err)?;
    for e in &outcome.log {
        w.write_record([e.step.to_string(), e.task_id.to_string(), e.loss.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&log_path, e.into_error()))?;
    let ckpt = output_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.model, &ckpt)?;
    write_atomic(&log_path, &bytes)?;
    echo_config(
        &output_dir,
        &FileConfig {
            dataset: Some(dataset),
            output_dir: Some(output_dir.clone()),
            algorithm: Some(algorithm),
            n: cfg.map(|c| c.n).or(n),
            t: t_echo,
            seed: Some(seed),
            train: overrides,
            ..FileConfig::default()
        },
    )?;
    let last = outcome.log.last().map(|e| e.loss.to_string()).unwrap_or_else(|| "n/a".into());
    println!("{algorithm}: {} Adam steps, final loss {last}", outcome.adam_steps);
    println!("wrote {}", ckpt.display());
    println!("wrote {}", log_path.display());
    Ok(())
}

struct EvalSettings {
    seed: u64,
    num_seeds: usize,
    adapt_lr: f64,
    adapt_epochs: usize,
    jobs: usize,
    dataset_name: String,
}

fn eval_settings(a: EvalArgs, file: &FileConfig, dataset: &Path) -> Result<EvalSettings> {
    let jobs = pick(a.jobs, file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Usage("jobs must be >= 1".into()));
    }
    Ok(EvalSettings {
        seed: pick(a.seed, file.seed).unwrap_or(0),
        num_seeds: pick(a.num_seeds, file.num_seeds).unwrap_or(DEFAULT_SEEDS.len()),
        adapt_lr: pick(a.adapt_lr, file.adapt_lr).unwrap_or(META_TEST_LR),
        adapt_epochs: pick(a.adapt_epochs, file.adapt_epochs).unwrap_or(DEFAULT_ADAPT_EPOCHS),
        jobs,
        dataset_name: dataset_label(pick(a.dataset_name, file.dataset_name.clone()), dataset),
    })
}

fn cmd_meta_test(a: MetaTestArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let dataset = required(pick(a.dataset, file.dataset.clone()), "dataset")?;
    let algorithm = required(pick(a.algorithm, file.algorithm), "algorithm")?;
    let output_dir = required(pick(a.output.output_dir, file.output_dir.clone()), "output-dir")?;
    let checkpoint = pick(a.checkpoint, file.checkpoint.clone());
    let overrides = merge_overrides(&a.overrides.to_overrides(), &file.train);
    let settings = eval_settings(a.eval, &file, &dataset)?;

    let ds = load_dataset(&dataset)?;
    let model = checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let (cfg, t) = resolve_task(pick(a.task.n, file.n), pick(a.task.t, file.t), ds.num_classes())?;
    let plan = MetaTestPlan {
        task_config: cfg,
        adapt_lr: settings.adapt_lr,
        adapt_epochs: settings.adapt_epochs,
        seeds: eval_seeds(settings.seed, settings.num_seeds)?,
        jobs: settings.jobs,
    };

    let zero_shot = match &ds.pretrained_projection {
        Some(_) => Some(eval::meta_test_zero_shot(&ds, &plan)?),
        None => None,
    };
    let mut report = match (algorithm, &model) {
        (Algorithm::ZeroShot, _) => zero_shot
            .clone()
            .ok_or_else(|| Error::Config("zero-shot needs a dataset with a pretrained projection".into()))?,
        (_, Some(model)) => eval::meta_test(model, &ds, &plan, algorithm)?,
        (_, None) => run_algorithm(&ds, algorithm, &plan, &overrides)?,
    }
    .labeled(&settings.dataset_name, "test");
    report.zero_shot_mean = zero_shot.map(|z| z.mean);

    let files = render_reports(std::slice::from_ref(&report), &output_dir)?;
    echo_config(
        &output_dir,
        &FileConfig {
            dataset: Some(dataset),
            dataset_name: Some(settings.dataset_name),
            output_dir: Some(output_dir.clone()),
            checkpoint,
            algorithm: Some(algorithm),
            n: Some(cfg.n),
            t: Some(t),
            seed: Some(settings.seed),
            num_seeds: Some(settings.num_seeds),
            jobs: Some(settings.jobs),
            adapt_lr: Some(settings.adapt_lr),
            adapt_epochs: Some(settings.adapt_epochs),
            train: overrides,
            ..FileConfig::default()
        },
    )?;
    print_summary(std::slice::from_ref(&report));
    print_rendered(&files);
    Ok(())
}

fn print_summary(reports: &[EvalReport]) {
    for r in reports {
        let zs = r.zero_shot_mean.map(|z| format!(" zero-shot {z:.4}")).unwrap_or_default();
        println!(
            "{:<9} N={:<2} T={:<3} mean {:.4} std {:.4}{zs}",
            r.algorithm.to_string(),
            r.n,
            r.t,
            r.mean,
            r.std
        );
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let dataset = required(pick(a.dataset, file.dataset.clone()), "dataset")?;
    let output_dir = required(pick(a.output.output_dir, file.output_dir.clone()), "output-dir")?;
    let algorithms = pick(a.algorithms, file.algorithms.clone()).unwrap_or_else(|| Algorithm::ALL.to_vec());
    let overrides = merge_overrides(&a.overrides.to_overrides(), &file.train);
    let n_values = pick(a.n_values, file.n_values.clone());
    let settings = eval_settings(a.eval, &file, &dataset)?;

    let ds = load_dataset(&dataset)?;
    let m = ds.num_classes();
    let n_values = n_values.unwrap_or_else(|| (2..m).collect());
    if n_values.is_empty() {
        return Err(Error::Usage(format!("no N values to sweep for M={m}")));
    }
    let plan = SweepPlan {
        algorithms: algorithms.clone(),
        n_values: n_values.clone(),
        seeds: eval_seeds(settings.seed, settings.num_seeds)?,
        adapt_lr: settings.adapt_lr,
        adapt_epochs: settings.adapt_epochs,
        jobs: settings.jobs,
        train: overrides.clone(),
        dataset_name: settings.dataset_name.clone(),
        split: "test".into(),
    };
    let reports = eval::sweep(&ds, &plan)?;
    let files = render_reports(&reports, &output_dir)?;
    echo_config(
        &output_dir,
        &FileConfig {
            dataset: Some(dataset),
            dataset_name: Some(settings.dataset_name),
            output_dir: Some(output_dir.clone()),
            algorithms: Some(algorithms),
            n_values: Some(n_values),
            t: Some(TaskCount::Auto),
            seed: Some(settings.seed),
            num_seeds: Some(settings.num_seeds),
            jobs: Some(settings.jobs),
            adapt_lr: Some(settings.adapt_lr),
            adapt_epochs: Some(settings.adapt_epochs),
            train: overrides,
            ..FileConfig::default()
        },
    )?;
    print_summary(&reports);
    print_rendered(&files);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let results = required(pick(a.results, file.results.clone()), "results")?;
    let output_dir = required(pick(a.output.output_dir, file.output_dir.clone()), "output-dir")?;
    let reports = read_results_csv(&results)?;
    let files = render_reports(&reports, &output_dir)?;
    echo_config(
        &output_dir,
        &FileConfig {
            results: Some(results),
            output_dir: Some(output_dir.clone()),
            ..FileConfig::default()
        },
    )?;
    print_summary(&reports);
    print_rendered(&files);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Import(a) => cmd_import(a),
        Command::SampleTasks(a) => cmd_sample_tasks(a),
        Command::Train(a) => cmd_train(a),
        Command::MetaTest(a) => cmd_meta_test(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
