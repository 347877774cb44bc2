//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::arch::{count_parameters, ActionVector, ArchitectureSpec};
use crate::config::RunConfig;
use crate::data::{self, synth, BaseDataset, Dataset, Split, SubsetSpec};
use crate::distill::{measure_teacher, train_model, train_student, DistillEvaluator, DistillMode, Teacher};
use crate::nn::Model;
use crate::policy::PolicyCheckpoint;
use crate::prune::{prune_baseline, reduce_filters, PruneSettings};
use crate::reinforce::{run_compression, EvaluationRecord, RunDirectory, StudentOutcome};
use crate::report::{self, TeacherRecord, TEACHER_FILE};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "compressnet", version, about = "Learned layer-removal compression of CNN teachers")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Validate and describe the work without touching the filesystem.
    #[arg(long)]
    dry_run: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    #[value(alias = "soft_and_hard")]
    SoftAndHard,
    #[value(alias = "hard_only")]
    HardOnly,
}

#[derive(Args, Debug, Clone)]
struct SearchOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    students: Option<usize>,
    /// Training epochs per student.
    #[arg(long)]
    epochs: Option<usize>,
    /// Distillation targets; `hard-only` trains students on labels alone.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    workers: Option<usize>,
    /// Filters removed from the best model after the search (0 disables).
    #[arg(long)]
    stage2_filters: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Format {
    Text,
    Csv,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DatasetArg {
    Cifar10,
    Cifar100,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured teacher and record its reference metrics.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Search for a compressed student with a freshly initialized policy.
    Compress {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchOverrides,
    },
    /// Search starting from a saved policy checkpoint.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchOverrides,
        /// Policy checkpoint to warm-start from.
        #[arg(long = "from")]
        from: PathBuf,
    },
    /// Iterative rank-and-prune baseline on the teacher.
    PruneBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        filters: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
    },
    /// Distill a fixed student architecture (the hand-designed KD baseline).
    TrainStudent {
        #[command(flatten)]
        common: Common,
        /// Student architecture JSON.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tabulate finished runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Also write the CSV table here.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Parse and check a configuration file, printing its materialized form.
    ValidateConfig {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Write a synthetic dataset in the CIFAR binary layout.
    SynthData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum, default_value = "cifar10")]
        dataset: DatasetArg,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dry_run: bool,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env().filter_level(level).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::TrainTeacher { common, epochs } => cmd_train_teacher(&common, epochs),
        Command::Compress { common, search } => cmd_compress(&common, &search, None),
        Command::Transfer { common, search, from } => cmd_compress(&common, &search, Some(&from)),
        Command::PruneBaseline { common, rounds, filters, finetune_epochs } => {
            cmd_prune(&common, rounds, filters, finetune_epochs)
        }
        Command::TrainStudent { common, arch, epochs } => cmd_train_student(&common, &arch, epochs),
        Command::Report { run_dirs, format, output, dry_run } => cmd_report(&run_dirs, format, output.as_deref(), dry_run),
        Command::ValidateConfig { config } => {
            let cfg = load_config(&Common { config, run_dir: None, seed: None, dry_run: true })?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::SynthData { root, dataset, train_per_class, test_per_class, seed, dry_run } => {
            let base = match dataset {
                DatasetArg::Cifar10 => BaseDataset::Cifar10,
                DatasetArg::Cifar100 => BaseDataset::Cifar100,
            };
            let classes = base.class_names().len();
            println!(
                "synthetic {}: {} train / {} test images under {}",
                base.name(),
                train_per_class * classes,
                test_per_class * classes,
                root.display()
            );
            if !dry_run {
                synth::write_dataset(base, &root, train_per_class, test_per_class, seed).map_err(anyhow::Error::from)?;
            }
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config).map_err(|e| usage(e.to_string()))?;
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn apply_search(cfg: &mut RunConfig, s: &SearchOverrides) -> Result<(), CliError> {
    if let Some(v) = s.iterations {
        cfg.search.iterations = v;
    }
    if let Some(v) = s.students {
        cfg.search.students_per_iteration = v;
    }
    if let Some(v) = s.epochs {
        cfg.distill.epochs = v;
    }
    if let Some(m) = s.mode {
        cfg.distill.mode = match m {
            ModeArg::SoftAndHard => DistillMode::SoftAndHard,
            ModeArg::HardOnly => DistillMode::HardOnly,
        };
    }
    if let Some(v) = s.workers {
        cfg.search.parallel_workers = v;
    }
    if let Some(v) = s.stage2_filters {
        cfg.prune.stage2_filters = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn limit(d: Dataset, per_class: Option<usize>) -> Dataset {
    match per_class {
        Some(n) => d.take_per_class(n),
        None => d,
    }
}

fn load_data(cfg: &RunConfig, spec: &SubsetSpec) -> anyhow::Result<(Dataset, Dataset)> {
    let root = cfg.data_root();
    let train = data::load_split(spec, Split::Train, &root)?;
    let test = data::load_split(spec, Split::Test, &root)?;
    Ok((limit(train, cfg.data.train_per_class), limit(test, cfg.data.test_per_class)))
}

fn load_teacher(cfg: &RunConfig) -> anyhow::Result<Model> {
    let path = &cfg.teacher.weights;
    if !path.exists() {
        return Err(anyhow!(
            "teacher weights {} not found; run `compressnet train-teacher --config ...` first",
            path.display()
        ));
    }
    let model = Model::load(path).with_context(|| format!("loading teacher {}", path.display()))?;
    let expected = cfg.teacher_arch()?;
    if model.arch() != &expected {
        return Err(anyhow!(
            "teacher weights {} do not match the configured architecture {}",
            path.display(),
            cfg.teacher.arch
        ));
    }
    Ok(model)
}

fn teacher_columns(cfg: &RunConfig) -> anyhow::Result<Option<Vec<usize>>> {
    let data = cfg.data_subset()?;
    let teacher = cfg.teacher_subset()?;
    Ok(if data == teacher { None } else { Some(data.columns_in(&teacher)?) })
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train_teacher(common: &Common, epochs: Option<usize>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.teacher.training.epochs = e;
    }
    let arch = cfg.teacher_arch().map_err(|e| usage(e.to_string()))?;
    let subset = cfg.teacher_subset().map_err(|e| usage(e.to_string()))?;
    println!(
        "teacher {} ({} parameters) on {}: {} epochs -> {}",
        cfg.teacher.arch,
        count_parameters(&arch).map_err(anyhow::Error::from)?,
        subset.name,
        cfg.teacher.training.epochs,
        cfg.teacher.weights.display()
    );
    if common.dry_run {
        return Ok(());
    }
    let (train, test) = load_data(&cfg, &subset)?;
    let mut model = Model::new(&arch, cfg.seed).map_err(anyhow::Error::from)?;
    let curve = train_model(&mut model, None, &train, &cfg.teacher.training.distill_config(), cfg.seed)
        .map_err(anyhow::Error::from)?;
    let teacher = Teacher::new(&model, None).map_err(anyhow::Error::from)?;
    let (reference, lat) = measure_teacher(&teacher, &test, cfg.latency).map_err(anyhow::Error::from)?;
    if let Some(parent) = cfg.teacher.weights.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    model.save(&cfg.teacher.weights).map_err(anyhow::Error::from)?;
    let record = TeacherRecord { dataset: subset.name.clone(), reference, latency_measurement: Some(lat) };
    let ref_path = cfg.teacher.weights.with_file_name(TEACHER_FILE);
    record.save(&ref_path).map_err(|e| anyhow!(e))?;
    println!(
        "final loss {:.4}; accuracy {:.4}, latency {:.3e} s, {} parameters",
        curve.last().copied().unwrap_or(f64::NAN),
        reference.accuracy,
        reference.latency,
        reference.parameters
    );
    Ok(())
}

fn cmd_compress(common: &Common, search: &SearchOverrides, from: Option<&Path>) -> CliResult {
    let mut cfg = load_config(common)?;
    if from.is_some() && search.iterations.is_none() {
        cfg.search.iterations = cfg.transfer.iterations;
    }
    apply_search(&mut cfg, search)?;
    let warm = match from {
        Some(path) => {
            if !path.exists() {
                return Err(usage(format!("checkpoint {} not found", path.display())));
            }
            Some(PolicyCheckpoint::load(path).map_err(|e| usage(format!("checkpoint {}: {e}", path.display())))?)
        }
        None => None,
    };
    let subset = cfg.data_subset().map_err(|e| usage(e.to_string()))?;
    println!(
        "{} on {}: {} iterations x {} students x {} epochs ({:?}) -> {}",
        if warm.is_some() { "transfer" } else { "compress" },
        subset.name,
        cfg.search.iterations,
        cfg.search.students_per_iteration,
        cfg.distill.epochs,
        cfg.distill.mode,
        cfg.run_dir.display()
    );
    if common.dry_run {
        return Ok(());
    }

    let model = load_teacher(&cfg)?;
    let search_arch = model.arch().with_num_classes(subset.num_classes());
    if let Some(ck) = &warm {
        let layers = search_arch.removable_count();
        if ck.layer_count != layers {
            return Err(anyhow!(
                "checkpoint was trained on {} removable layers, teacher has {layers}",
                ck.layer_count
            )
            .into());
        }
    }
    let (train, test) = load_data(&cfg, &subset)?;
    let mut teacher = Teacher::new(&model, teacher_columns(&cfg)?).map_err(anyhow::Error::from)?;
    if cfg.distill.cache_teacher_logits && cfg.distill.mode == DistillMode::SoftAndHard {
        teacher.cache_for(&train);
    }
    let run = RunDirectory::create(&cfg.run_dir).map_err(anyhow::Error::from)?;
    write_file(&cfg.run_dir.join("config.snapshot"), &cfg.to_toml())?;
    let (reference, lat) = measure_teacher(&teacher, &test, cfg.latency).map_err(anyhow::Error::from)?;
    TeacherRecord { dataset: subset.name.clone(), reference, latency_measurement: Some(lat) }
        .save(&cfg.run_dir.join(TEACHER_FILE))
        .map_err(|e| anyhow!(e))?;

    let evaluator = DistillEvaluator {
        teacher: &teacher,
        reference,
        train: &train,
        test: &test,
        config: cfg.distill,
        latency: cfg.latency,
        workers: cfg.search.parallel_workers,
    };
    let settings = cfg.search_settings(cfg.search.iterations);
    let outcome = run_compression(&settings, &search_arch, &evaluator, warm.as_ref(), Some(&run))
        .map_err(anyhow::Error::from)?;
    outcome
        .checkpoint
        .save(&cfg.run_dir.join("checkpoints").join("final"))
        .map_err(anyhow::Error::from)?;

    match &outcome.best {
        Some(best) => println!(
            "best reward {:.4e}: accuracy {:.4} (teacher {:.4}), {} parameters ({:.2}x smaller), latency {:.3e} s",
            best.reward,
            best.accuracy,
            reference.accuracy,
            best.parameters,
            reference.parameters as f64 / best.parameters as f64,
            best.latency
        ),
        None => println!("no student was evaluated"),
    }

    if cfg.prune.stage2_filters > 0 {
        if let (Some(best_model), Some(best)) = (&outcome.best_model, &outcome.best) {
            let finetune = crate::distill::DistillConfig {
                mode: DistillMode::HardOnly,
                epochs: cfg.prune.finetune_epochs,
                ..cfg.distill
            };
            let reduced = reduce_filters(best_model, &train, cfg.prune.stage2_filters, cfg.prune.filters_per_round, &finetune, cfg.seed)
                .map_err(anyhow::Error::from)?;
            let record = measure_student(&reduced, &test, &cfg, &reference, best.actions.clone())?;
            let dir = cfg.run_dir.join("best").join("reduced");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            reduced.arch().save(&dir.join("arch.json")).map_err(anyhow::Error::from)?;
            reduced.save(&dir.join("model_weights")).map_err(anyhow::Error::from)?;
            write_file(&dir.join("record.json"), &serde_json::to_string_pretty(&record).expect("record json"))?;
            println!(
                "stage-2 reduction: {} parameters, accuracy {:.4}",
                record.parameters, record.accuracy
            );
        }
    }
    Ok(())
}

fn measure_student(
    model: &Model,
    test: &Dataset,
    cfg: &RunConfig,
    reference: &crate::reward::TeacherReference,
    actions: ActionVector,
) -> anyhow::Result<EvaluationRecord> {
    let accuracy = crate::distill::evaluate_accuracy(model, test)?;
    let lat = crate::distill::measure_latency(model, model.input_len(), cfg.latency)?;
    let outcome = StudentOutcome {
        accuracy,
        latency: lat.median_seconds,
        parameters: count_parameters(model.arch())? as u64,
        train_epochs: cfg.prune.finetune_epochs,
        loss_curve: Vec::new(),
        latency_measurement: Some(lat),
        model: None,
    };
    Ok(EvaluationRecord::scored(actions, &outcome, reference, &cfg.reward)?)
}

fn cmd_prune(common: &Common, rounds: Option<usize>, filters: Option<usize>, finetune_epochs: Option<usize>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(v) = rounds {
        cfg.prune.rounds = v;
    }
    if let Some(v) = filters {
        cfg.prune.filters_per_round = v;
    }
    if let Some(v) = finetune_epochs {
        cfg.prune.finetune_epochs = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let subset = cfg.data_subset().map_err(|e| usage(e.to_string()))?;
    if subset != cfg.teacher_subset().map_err(|e| usage(e.to_string()))? {
        return Err(usage("prune-baseline needs the data subset to equal the teacher's dataset"));
    }
    println!(
        "prune baseline on {}: {} rounds x {} filters, {} fine-tune epochs -> {}",
        subset.name,
        cfg.prune.rounds,
        cfg.prune.filters_per_round,
        cfg.prune.finetune_epochs,
        cfg.run_dir.display()
    );
    if common.dry_run {
        return Ok(());
    }
    let model = load_teacher(&cfg)?;
    let (train, test) = load_data(&cfg, &subset)?;
    let teacher = Teacher::new(&model, None).map_err(anyhow::Error::from)?;
    fs::create_dir_all(&cfg.run_dir).with_context(|| format!("creating {}", cfg.run_dir.display()))?;
    write_file(&cfg.run_dir.join("config.snapshot"), &cfg.to_toml())?;
    let (reference, lat) = measure_teacher(&teacher, &test, cfg.latency).map_err(anyhow::Error::from)?;
    TeacherRecord { dataset: subset.name.clone(), reference, latency_measurement: Some(lat) }
        .save(&cfg.run_dir.join(TEACHER_FILE))
        .map_err(|e| anyhow!(e))?;
    let settings = PruneSettings {
        rounds: cfg.prune.rounds,
        filters_per_round: cfg.prune.filters_per_round,
        ranking_examples: cfg.prune.ranking_examples,
        finetune: crate::distill::DistillConfig {
            mode: DistillMode::HardOnly,
            epochs: cfg.prune.finetune_epochs,
            ..cfg.distill
        },
        latency: cfg.latency,
        thresholds: cfg.reward,
        seed: cfg.seed,
    };
    let (rows, _) = prune_baseline(&model, &reference, &train, &test, &settings, Some(&cfg.run_dir))
        .map_err(anyhow::Error::from)?;
    for r in &rows {
        println!(
            "round {}: {} parameters, accuracy {:.4}, latency {:.3e} s",
            r.round, r.record.parameters, r.record.accuracy, r.record.latency
        );
    }
    Ok(())
}

fn cmd_train_student(common: &Common, arch_path: &Path, epochs: Option<usize>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.distill.epochs = e;
    }
    let subset = cfg.data_subset().map_err(|e| usage(e.to_string()))?;
    let arch = ArchitectureSpec::load(arch_path)
        .map_err(|e| usage(format!("{}: {e}", arch_path.display())))?
        .with_num_classes(subset.num_classes());
    let report = crate::arch::validate(&arch);
    if !report.passed() {
        return Err(usage(format!("{}: {report}", arch_path.display())));
    }
    println!(
        "distilling {} ({} parameters) on {} for {} epochs -> {}",
        arch_path.display(),
        count_parameters(&arch).map_err(anyhow::Error::from)?,
        subset.name,
        cfg.distill.epochs,
        cfg.run_dir.display()
    );
    if common.dry_run {
        return Ok(());
    }
    let model = load_teacher(&cfg)?;
    let (train, test) = load_data(&cfg, &subset)?;
    let teacher = Teacher::new(&model, teacher_columns(&cfg)?).map_err(anyhow::Error::from)?;
    let (reference, lat) = measure_teacher(&teacher, &test, cfg.latency).map_err(anyhow::Error::from)?;
    let trained = train_student(&arch, Some(&teacher), &train, &cfg.distill, cfg.seed).map_err(anyhow::Error::from)?;
    let mut record = measure_student(&trained.model, &test, &cfg, &reference, ActionVector(Vec::new()))?;
    record.train_epochs = cfg.distill.epochs;
    record.loss_curve = trained.loss_curve;
    let best = cfg.run_dir.join("best");
    fs::create_dir_all(&best).with_context(|| format!("creating {}", best.display()))?;
    write_file(&cfg.run_dir.join("config.snapshot"), &cfg.to_toml())?;
    TeacherRecord { dataset: subset.name.clone(), reference, latency_measurement: Some(lat) }
        .save(&cfg.run_dir.join(TEACHER_FILE))
        .map_err(|e| anyhow!(e))?;
    arch.save(&best.join("arch.json")).map_err(anyhow::Error::from)?;
    trained.model.save(&best.join("model_weights")).map_err(anyhow::Error::from)?;
    write_file(&best.join("record.json"), &serde_json::to_string_pretty(&record).expect("record json"))?;
    println!("accuracy {:.4}, {} parameters", record.accuracy, record.parameters);
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], format: Format, output: Option<&Path>, dry_run: bool) -> CliResult {
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    let rows = report::build_rows(&refs);
    if matches!(format, Format::Text | Format::Both) {
        print!("{}", report::render_text(&rows));
    }
    if matches!(format, Format::Csv | Format::Both) {
        print!("{}", report::render_csv(&rows));
    }
    if let Some(path) = output {
        if dry_run {
            println!("would write {}", path.display());
        } else {
            write_file(path, &report::render_csv(&rows))?;
        }
    }
    if rows.iter().any(|r| !r.complete) {
        eprintln!("warning: some runs have no result record");
    }
    Ok(())
}
