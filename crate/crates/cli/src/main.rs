//! Command-line front end: dataset preparation, partitioning, federated
//! and centralized training, evaluation, reporting, and clustering.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (including
//! missing input paths).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedsr_core::data::{
    extract_patches, load_dataset, pregenerate_test_variants, save_ppm, ImageRecord, Manifest,
};
use fedsr_core::degrade::{DegradationType, TestParams};
use fedsr_core::evaluation::{
    diff_table, evaluate, matrix_from_csv, matrix_to_csv, per_image_to_csv, relative_to_csv,
    render_diff_table, PsnrMode,
};
use fedsr_core::federation::{run_centralized, run_federated, CentralDegradation, RoundReport};
use fedsr_core::partition::{build_partition, cluster_result_rows, PartitionPlan};
use fedsr_core::weights::ModelWeights;
use fedsr_core::Error;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "fedsr", version, about = "Federated blind super-resolution benchmark")]
struct Cli {
    /// Worker threads for client training (env: FEDSR_WORKERS)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut HR training patches and pre-generate the 8 test variants
    Prepare(PrepareArgs),
    /// Build a client partition plan from a config
    Partition(PartitionArgs),
    /// Run federated training over a partition plan
    Train(TrainArgs),
    /// Run the centralized baseline
    TrainCentral(TrainCentralArgs),
    /// Score a checkpoint against pre-generated test variants
    Eval(EvalArgs),
    /// Compare a run's evaluation matrix against a baseline matrix
    Report(ReportArgs),
    /// Cluster result-matrix rows by average linkage
    Cluster(ClusterArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of HR source images (.ppm)
    #[arg(long)]
    hr_dir: PathBuf,
    /// Output directory (patches/, hr/, one dir per variant, manifest.json)
    #[arg(long)]
    out: PathBuf,
    /// Downsampling factor
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// HR patch size in pixels
    #[arg(long, default_value_t = 128)]
    patch: usize,
    /// Patch grid stride in pixels
    #[arg(long, default_value_t = 128)]
    stride: usize,
    /// Master seed for the test-variant noise fields
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PartitionArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output partition plan (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Partition plan (JSON)
    #[arg(long)]
    partition: PathBuf,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCentralArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// Degradation regime for the single client
    #[arg(long, value_enum, default_value_t = CentralMode::Mixed)]
    degradation: CentralMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum CentralMode {
    Mixed,
    Clean,
    Blur,
    Noise,
    Jpeg,
}

impl CentralMode {
    fn resolve(self) -> CentralDegradation {
        match self {
            CentralMode::Mixed => CentralDegradation::Mixed,
            CentralMode::Clean => CentralDegradation::Single(DegradationType::Clean),
            CentralMode::Blur => CentralDegradation::Single(DegradationType::Blur),
            CentralMode::Noise => CentralDegradation::Single(DegradationType::Noise),
            CentralMode::Jpeg => CentralDegradation::Single(DegradationType::Jpeg),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint (.fsrw)
    #[arg(long)]
    weights: PathBuf,
    /// Directory holding manifest.json plus hr/ and variant dirs
    #[arg(long)]
    variants: PathBuf,
    /// Output directory (matrix.csv, per_image.csv)
    #[arg(long)]
    out: PathBuf,
    /// Dataset label for the matrix column
    #[arg(long, default_value = "test")]
    dataset: String,
    /// PSNR channel mode
    #[arg(long, value_enum, default_value_t = PsnrArg::Rgb)]
    psnr: PsnrArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PsnrArg {
    Rgb,
    Y,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing matrix.csv
    #[arg(long)]
    run: PathBuf,
    /// Baseline directory containing matrix.csv
    #[arg(long)]
    baseline: PathBuf,
    /// Output directory (heatmap.csv)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// One matrix.csv per run; each becomes one row vector
    #[arg(long, num_args = 1.., required = true)]
    matrices: Vec<PathBuf>,
    /// Number of clusters
    #[arg(long)]
    k: usize,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn resolve_workers(flag: Option<usize>) -> CliResult<usize> {
    if let Some(w) = flag {
        if w == 0 {
            return Err(CliError::Usage("--workers must be positive".to_string()));
        }
        return Ok(w);
    }
    match std::env::var("FEDSR_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&w| w > 0)
            .ok_or_else(|| {
                CliError::Usage(format!("FEDSR_WORKERS must be a positive integer, got '{v}'"))
            }),
        Err(_) => Ok(1),
    }
}

fn reports_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,client_id,n,loss\n");
    for report in reports {
        for c in &report.clients {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                report.round, c.client_id, c.sample_count, c.mean_loss
            ));
        }
    }
    out
}

fn cmd_prepare(args: &PrepareArgs) -> CliResult<()> {
    require_exists(&args.hr_dir, "HR image directory")?;
    if args.patch == 0 || args.stride == 0 {
        return Err(CliError::Usage(
            "--patch and --stride must be positive".to_string(),
        ));
    }
    let dataset = load_dataset(&args.hr_dir)?;
    if dataset.is_empty() {
        return Err(CliError::Usage(format!(
            "no .ppm images in {}",
            args.hr_dir.display()
        )));
    }

    let patch_dir = args.out.join("patches");
    ensure_dir(&patch_dir)?;
    let mut patch_count = 0usize;
    for record in &dataset {
        for (k, p) in extract_patches(record, args.patch, args.stride).iter().enumerate() {
            save_ppm(p, &patch_dir.join(format!("{}_{k:03}.ppm", record.id)))?;
            patch_count += 1;
        }
    }

    let manifest = pregenerate_test_variants(
        &dataset,
        args.scale,
        args.seed,
        &TestParams::default(),
        &args.out,
    )?;
    manifest.save(&args.out.join("manifest.json"))?;
    println!(
        "prepared {} images: {patch_count} patches, {} test variants",
        dataset.len(),
        manifest.variants.len()
    );
    Ok(())
}

fn cmd_partition(args: &PartitionArgs) -> CliResult<()> {
    require_exists(&args.config, "config file")?;
    let config = ExperimentConfig::load(&args.config)?;
    let hr_dir = PathBuf::from(&config.data.hr_dir);
    require_exists(&hr_dir, "training image directory")?;
    let ids: Vec<String> = load_dataset(&hr_dir)?.into_iter().map(|r| r.id).collect();
    let source = config.partition.resolve()?;
    let plan = build_partition(&ids, config.federation.num_clients, &source, config.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    plan.save(&args.out)?;
    for client in &plan.clients {
        println!(
            "client {}: {} ({} images)",
            client.id,
            client.degradation_type.name(),
            client.image_ids.len()
        );
    }
    Ok(())
}

/// Checkpoint rounds: every `interval`-th round plus the final one.
fn is_checkpoint_round(round: usize, interval: usize, total: usize) -> bool {
    round == total || (interval > 0 && round % interval == 0)
}

fn run_dir_setup(
    out: &Path,
    config: &ExperimentConfig,
) -> CliResult<(PathBuf, Vec<ImageRecord>)> {
    let hr_dir = PathBuf::from(&config.data.hr_dir);
    require_exists(&hr_dir, "training image directory")?;
    let dataset = load_dataset(&hr_dir)?;
    let ckpt_dir = out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    config.save(&out.join("config.json"))?;
    Ok((ckpt_dir, dataset))
}

fn save_final(
    out: &Path,
    ckpt_dir: &Path,
    config: &ExperimentConfig,
    weights: &ModelWeights,
    reports: &[RoundReport],
) -> CliResult<()> {
    // rounds=0 still leaves a scoreable checkpoint (the initial weights)
    if config.train.rounds == 0 {
        weights.save(&ckpt_dir.join("round_0.fsrw"))?;
    }
    write_text(&out.join("reports.csv"), &reports_csv(reports))?;
    if let Some(last) = reports.last() {
        println!(
            "finished round {} with global loss {:.6}",
            last.round, last.global_loss
        );
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, workers: usize) -> CliResult<()> {
    require_exists(&args.config, "config file")?;
    require_exists(&args.partition, "partition file")?;
    let config = ExperimentConfig::load(&args.config)?;
    let plan = PartitionPlan::load(&args.partition)?;
    let (ckpt_dir, dataset) = run_dir_setup(&args.out, &config)?;
    plan.save(&args.out.join("partition.json"))?;
    let train = config.train_config()?;
    let interval = config.train.checkpoint_interval;
    let total = train.rounds;
    let (weights, reports) = run_federated(&plan, &train, &dataset, workers, |round, w, _| {
        if is_checkpoint_round(round, interval, total) {
            w.save(&ckpt_dir.join(format!("round_{round}.fsrw")))?;
        }
        Ok(())
    })?;
    save_final(&args.out, &ckpt_dir, &config, &weights, &reports)
}

fn cmd_train_central(args: &TrainCentralArgs, workers: usize) -> CliResult<()> {
    require_exists(&args.config, "config file")?;
    let config = ExperimentConfig::load(&args.config)?;
    let (ckpt_dir, dataset) = run_dir_setup(&args.out, &config)?;
    let train = config.train_config()?;
    let interval = config.train.checkpoint_interval;
    let total = train.rounds;
    let (weights, reports) = run_centralized(
        &train,
        &dataset,
        args.degradation.resolve(),
        workers,
        |round, w, _| {
            if is_checkpoint_round(round, interval, total) {
                w.save(&ckpt_dir.join(format!("round_{round}.fsrw")))?;
            }
            Ok(())
        },
    )?;
    save_final(&args.out, &ckpt_dir, &config, &weights, &reports)
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    require_exists(&args.weights, "weights file")?;
    let manifest_path = args.variants.join("manifest.json");
    require_exists(&manifest_path, "variant manifest")?;
    let weights = ModelWeights::load(&args.weights)?;
    let manifest = Manifest::load(&manifest_path)?;
    let mode = match args.psnr {
        PsnrArg::Rgb => PsnrMode::Rgb,
        PsnrArg::Y => PsnrMode::Y,
    };
    let (matrix, per_image) = evaluate(&weights, &manifest, &args.variants, &args.dataset, mode)?;
    ensure_dir(&args.out)?;
    write_text(&args.out.join("matrix.csv"), &matrix_to_csv(&matrix))?;
    write_text(&args.out.join("per_image.csv"), &per_image_to_csv(&per_image))?;
    for (row, vals) in matrix.rows.iter().zip(&matrix.values) {
        println!("{row:<8} {:.2} dB", vals[0]);
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let run_path = args.run.join("matrix.csv");
    let base_path = args.baseline.join("matrix.csv");
    require_exists(&run_path, "run matrix")?;
    require_exists(&base_path, "baseline matrix")?;
    let load = |p: &Path| -> CliResult<_> {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(Error::io(p, e)))?;
        Ok(matrix_from_csv(&text)?)
    };
    let run = load(&run_path)?;
    let baseline = load(&base_path)?;
    let diff = diff_table(&run, &baseline)?;
    ensure_dir(&args.out)?;
    write_text(&args.out.join("heatmap.csv"), &relative_to_csv(&diff))?;
    print!("{}", render_diff_table(&run, &baseline)?);
    Ok(())
}

fn cmd_cluster(args: &ClusterArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in &args.matrices {
        require_exists(path, "matrix file")?;
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
        let matrix = matrix_from_csv(&text)?;
        rows.push(matrix.values.into_iter().flatten().collect::<Vec<f64>>());
    }
    let labels = cluster_result_rows(&rows, args.k)?;
    for (path, label) in args.matrices.iter().zip(&labels) {
        println!("{}\tcluster {label}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let workers = resolve_workers(cli.workers)?;
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Train(args) => cmd_train(args, workers),
        Command::TrainCentral(args) => cmd_train_central(args, workers),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Cluster(args) => cmd_cluster(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
