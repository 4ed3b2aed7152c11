//! gradibd: turn diagnosis-code trajectories into temporal graphs and
//! train the time-decay message-passing risk model on them.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use gradibd::checkpoint::{self, Checkpoint};
use gradibd::codec::CodeVocab;
use gradibd::cohort::{
    generate_synthetic, load_cohort, save_cohort, stratified_split, SynthConfig,
};
use gradibd::config::RunConfig;
use gradibd::graph::{GraphDump, GraphStats, IcdGraph};
use gradibd::manifest::RunManifest;
use gradibd::model::{self, canonical_ablations, ModelConfig, ModelParams};
use gradibd::selftest;
use gradibd::train::{
    self, cross_validate, encode_cohort, evaluate_ensemble, sensitivity_sweep, sweep_to_csv,
    trace_to_csv, vocab_from_records, EvalReport,
};

#[derive(Parser)]
#[command(
    name = "gradibd",
    version = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format v1, graph dump v1)"),
    about = "Visit-bucketized diagnosis graphs and a time-decay message-passing risk model"
)]
struct Cli {
    /// Cap worker threads for folds and per-patient passes
    /// (default: all cores; results are identical at any value).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled cohort (JSONL).
    #[command(name = "gen-cohort")]
    GenCohort(GenCohortArgs),
    /// Encode a cohort into per-patient bucket graphs.
    Encode(EncodeArgs),
    /// Cross-validation training; writes one checkpoint per fold.
    Train(TrainArgs),
    /// Evaluate a fold ensemble on a held-out test cohort.
    Eval(EvalArgs),
    /// Train and evaluate every ablation configuration.
    Ablate(AblateArgs),
    /// Re-train across prediction-interval lead times.
    Sweep(SweepArgs),
    /// Print parameter count and FLOP estimate for a config + cohort.
    Flops(FlopsArgs),
    /// Run the built-in numerical invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenCohortArgs {
    /// Output cohort file (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Number of patients.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Fraction of patients labeled positive.
    #[arg(long = "case-frac", default_value_t = 0.2)]
    case_frac: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Peak extra motif-code occurrences per visit at the anchor.
    #[arg(long = "motif-ramp", default_value_t = 2.0)]
    motif_ramp: f64,
    /// Disable the case signal entirely (labels become unlearnable).
    #[arg(long = "null-signal", default_value_t = false)]
    null_signal: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Output directory (graphs.jsonl, vocab.txt, manifest.json).
    #[arg(long)]
    out: PathBuf,
    /// Config file for tau; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse a saved vocabulary instead of building one.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Also write one sparse-matrix CSV per patient into this directory.
    #[arg(long = "dump-matrix")]
    dump_matrix: Option<PathBuf>,
    /// Config overrides, repeatable: --set key=value.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output directory (fold checkpoints, traces, vocab, manifest).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding fold_<i>.ckpt files from `train`.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Held-out test cohort (JSONL).
    #[arg(long)]
    test: PathBuf,
    /// Report file; per-fold score CSVs are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary path (default: vocab.txt next to the checkpoints).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated ablation axes out of cs,cf,td. All three run
    /// the six canonical rows; a subset toggles only those axes.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Held-out fraction for ensemble evaluation.
    #[arg(long = "test-fraction", default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated lead times in days, e.g. 30,60,90.
    #[arg(long)]
    leads: String,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "test-fraction", default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

struct AppError {
    code: &'static str,
    message: String,
}

type AppResult<T> = Result<T, AppError>;

fn app_err<E: Display>(code: &'static str) -> impl Fn(E) -> AppError {
    move |e| AppError {
        code,
        message: e.to_string(),
    }
}

macro_rules! from_error {
    ($type:ty, $code:literal) => {
        impl From<$type> for AppError {
            fn from(e: $type) -> Self {
                AppError {
                    code: $code,
                    message: e.to_string(),
                }
            }
        }
    };
}

from_error!(gradibd::cohort::CohortError, "Cohort");
from_error!(gradibd::codec::CodecError, "Codec");
from_error!(gradibd::config::ConfigError, "Config");
from_error!(gradibd::train::TrainError, "Train");
from_error!(gradibd::model::ModelError, "Model");
from_error!(gradibd::checkpoint::CheckpointError, "Checkpoint");
from_error!(gradibd::manifest::ManifestError, "Manifest");
from_error!(std::io::Error, "Io");
from_error!(serde_json::Error, "Json");

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let code = match e.kind() {
                ErrorKind::InvalidSubcommand => "UnknownCommand",
                ErrorKind::MissingRequiredArgument => "MissingFlag",
                ErrorKind::UnknownArgument => "UnknownFlag",
                _ => "Usage",
            };
            eprintln!("ERROR {code}: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(jobs) = cli.jobs {
        let capped = jobs.max(1);
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(capped)
            .build_global()
        {
            eprintln!("ERROR Jobs: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code, e.message);
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> AppResult<()> {
    match command {
        Command::GenCohort(args) => gen_cohort(args, argv),
        Command::Encode(args) => encode(args, argv),
        Command::Train(args) => train_cmd(args, argv),
        Command::Eval(args) => eval_cmd(args, argv),
        Command::Ablate(args) => ablate(args, argv),
        Command::Sweep(args) => sweep(args, argv),
        Command::Flops(args) => flops(args),
        Command::Selftest(args) => selftest_cmd(args),
    }
}

fn load_config(path: Option<&Path>, sets: &[String]) -> AppResult<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for assignment in sets {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(AppError {
                code: "Config",
                message: format!("--set expects key=value, got {assignment:?}"),
            });
        };
        config.set(key.trim(), value.trim())?;
    }
    config.model.validate()?;
    config.train.validate()?;
    if config.tau < 1 {
        return Err(AppError {
            code: "Config",
            message: format!("tau must be at least 1 day, got {}", config.tau),
        });
    }
    Ok(config)
}

fn ensure_dir(path: &Path) -> AppResult<()> {
    std::fs::create_dir_all(path).map_err(app_err("Io"))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_text(path: &Path, text: &str) -> AppResult<()> {
    std::fs::write(path, text).map_err(app_err("Io"))
}

fn gen_cohort(args: GenCohortArgs, argv: Vec<String>) -> AppResult<()> {
    let synth = SynthConfig {
        n_patients: args.n,
        case_fraction: args.case_frac,
        seed: args.seed,
        motif_ramp: if args.null_signal { 0.0 } else { args.motif_ramp },
        ..SynthConfig::default()
    };
    let records = generate_synthetic(&synth)?;
    let out_dir = parent_dir(&args.out);
    ensure_dir(&out_dir)?;
    save_cohort(&args.out, &records)?;
    let cases = records.iter().filter(|r| r.label == 1).count();
    info!(
        "wrote {} patients ({cases} cases) to {}",
        records.len(),
        args.out.display()
    );

    let mut config = RunConfig::default();
    config.train.seed = args.seed;
    let manifest = RunManifest::new(argv, &config);
    manifest.finish_and_save(&out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct GraphRow<'a> {
    patient_id: &'a str,
    label: u8,
    stats: GraphStats,
    graph: GraphDump,
}

fn encode(args: EncodeArgs, argv: Vec<String>) -> AppResult<()> {
    let config = load_config(args.config.as_deref(), &args.set)?;
    let records = load_cohort(&args.cohort)?;
    let mut manifest = RunManifest::new(argv, &config);
    manifest.add_input(&args.cohort)?;
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }

    ensure_dir(&args.out)?;
    let vocab = match &args.vocab {
        Some(p) => {
            let vocab = CodeVocab::load(p).map_err(app_err("Codec"))?;
            manifest.add_input(p)?;
            vocab
        }
        None => vocab_from_records(&records)?,
    };
    vocab.save(&args.out.join("vocab.txt")).map_err(app_err("Io"))?;

    let mut lines = String::new();
    let mut total_nodes = 0usize;
    let mut total_edges = 0u64;
    for record in &records {
        let matrix = gradibd::bucket::bucketize(record, &vocab, config.tau, 1095)?;
        let graph = IcdGraph::build(&matrix);
        let stats = graph.stats();
        total_nodes += stats.n_nodes;
        total_edges += stats.n_edges;
        let row = GraphRow {
            patient_id: &record.patient_id,
            label: record.label,
            stats,
            graph: GraphDump::from_graph(&graph, config.tau),
        };
        lines.push_str(&serde_json::to_string(&row)?);
        lines.push('\n');

        if let Some(dir) = &args.dump_matrix {
            ensure_dir(dir)?;
            let mut csv = String::from("code_id,bucket_index,frequency\n");
            for (bucket, code, frequency) in matrix.iter() {
                csv.push_str(&format!("{code},{bucket},{frequency}\n"));
            }
            write_text(&dir.join(format!("{}.csv", record.patient_id)), &csv)?;
        }
    }
    write_text(&args.out.join("graphs.jsonl"), &lines)?;
    info!(
        "encoded {} patients: {} nodes, {} edges, vocabulary {}",
        records.len(),
        total_nodes,
        total_edges,
        vocab.n()
    );
    manifest.finish_and_save(&args.out)?;
    Ok(())
}

fn train_cmd(args: TrainArgs, argv: Vec<String>) -> AppResult<()> {
    let config = load_config(Some(&args.config), &args.set)?;
    let records = load_cohort(&args.cohort)?;
    let mut manifest = RunManifest::new(argv, &config);
    manifest.add_input(&args.cohort)?;
    manifest.add_input(&args.config)?;

    ensure_dir(&args.out)?;
    let vocab = match &args.vocab {
        Some(p) => {
            let vocab = CodeVocab::load(p).map_err(app_err("Codec"))?;
            manifest.add_input(p)?;
            vocab
        }
        None => vocab_from_records(&records)?,
    };
    vocab.save(&args.out.join("vocab.txt")).map_err(app_err("Io"))?;

    let encoded = encode_cohort(&records, &vocab, config.tau)?;
    info!(
        "training {} folds on {} patients ({} codes)",
        config.train.folds,
        records.len(),
        vocab.n()
    );
    let outcomes = cross_validate(&encoded, &config.model, &config.train)?;
    for (i, outcome) in outcomes.iter().enumerate() {
        let path = args.out.join(format!("fold_{i}.ckpt"));
        checkpoint::save(
            &path,
            &Checkpoint {
                config: config.clone(),
                params: outcome.params.clone(),
                adam: outcome.adam.clone(),
            },
        )?;
        write_text(
            &args.out.join(format!("trace_{i}.csv")),
            &trace_to_csv(&outcome.trace),
        )?;
        info!(
            "fold {i}: best validation loss {:.6} at epoch {} ({} epochs run)",
            outcome.best_val_loss,
            outcome.best_epoch,
            outcome.trace.len()
        );
    }
    manifest.finish_and_save(&args.out)?;
    Ok(())
}

fn load_fold_checkpoints(dir: &Path) -> AppResult<Vec<Checkpoint>> {
    let mut indexed = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(app_err("Io"))? {
        let path = entry.map_err(app_err("Io"))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(index) = name
            .strip_prefix("fold_")
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|digits| digits.parse::<usize>().ok())
        {
            indexed.push((index, path));
        }
    }
    if indexed.is_empty() {
        return Err(AppError {
            code: "Checkpoint",
            message: format!("no fold_<i>.ckpt files in {}", dir.display()),
        });
    }
    indexed.sort_by_key(|(i, _)| *i);
    let mut checkpoints = Vec::with_capacity(indexed.len());
    for (_, path) in indexed {
        checkpoints.push(checkpoint::load(&path)?);
    }
    for other in &checkpoints[1..] {
        if other.config != checkpoints[0].config {
            return Err(AppError {
                code: "Checkpoint",
                message: "fold checkpoints disagree on run config".into(),
            });
        }
    }
    Ok(checkpoints)
}

fn print_report(report: &EvalReport) {
    println!("folds: {}", report.per_fold.len());
    for (name, ci) in [
        ("auroc", report.auroc),
        ("ap", report.ap),
        ("f1", report.f1),
    ] {
        println!(
            "{name}: {:.4} (95% CI {:.4} to {:.4})",
            ci.mean, ci.lo, ci.hi
        );
    }
}

fn eval_cmd(args: EvalArgs, argv: Vec<String>) -> AppResult<()> {
    let checkpoints = load_fold_checkpoints(&args.checkpoints)?;
    let config = checkpoints[0].config.clone();
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| args.checkpoints.join("vocab.txt"));
    let vocab = CodeVocab::load(&vocab_path).map_err(app_err("Codec"))?;
    let records = load_cohort(&args.test)?;

    let mut manifest = RunManifest::new(argv, &config);
    manifest.add_input(&args.test)?;
    manifest.add_input(&vocab_path)?;

    let encoded = encode_cohort(&records, &vocab, config.tau)?;
    let fold_params: Vec<ModelParams> = checkpoints.into_iter().map(|c| c.params).collect();
    let (report, fold_scores) =
        evaluate_ensemble(&fold_params, &encoded, &config.model, &config.train)?;

    let out_dir = parent_dir(&args.out);
    ensure_dir(&out_dir)?;
    write_text(&args.out, &serde_json::to_string_pretty(&report)?)?;
    for (i, scores) in fold_scores.iter().enumerate() {
        let csv = train::scores_to_csv(&encoded.patient_ids, &encoded.labels, scores);
        write_text(&out_dir.join(format!("fold_{i}_scores.csv")), &csv)?;
    }
    print_report(&report);
    manifest.finish_and_save(&out_dir)?;
    Ok(())
}

/// Expand `--grid` axes into model configurations. All three axes give
/// the six canonical rows; a strict subset toggles exactly those axes
/// over the base config.
fn grid_configs(grid: &str, base: &ModelConfig) -> AppResult<Vec<ModelConfig>> {
    let mut axes = Vec::new();
    for axis in grid.split(',') {
        let axis = axis.trim().to_ascii_lowercase();
        if axis.is_empty() {
            continue;
        }
        if !["cs", "cf", "td"].contains(&axis.as_str()) {
            return Err(AppError {
                code: "Config",
                message: format!("unknown ablation axis {axis:?}, expected cs, cf, td"),
            });
        }
        if !axes.contains(&axis) {
            axes.push(axis);
        }
    }
    if axes.is_empty() {
        return Err(AppError {
            code: "Config",
            message: "--grid lists no axes".into(),
        });
    }
    if axes.len() == 3 {
        return Ok(canonical_ablations(base));
    }
    let mut rows = vec![*base];
    for axis in &axes {
        let mut toggled = Vec::with_capacity(rows.len() * 2);
        for row in rows {
            for flag in [true, false] {
                let mut config = row;
                match axis.as_str() {
                    "cs" => config.use_code_similarity = flag,
                    "cf" => config.use_frequency = flag,
                    _ => config.use_time_decay = flag,
                }
                toggled.push(config);
            }
        }
        rows = toggled;
    }
    Ok(rows)
}

fn ablate(args: AblateArgs, argv: Vec<String>) -> AppResult<()> {
    let config = load_config(Some(&args.config), &args.set)?;
    let records = load_cohort(&args.cohort)?;
    let mut manifest = RunManifest::new(argv, &config);
    manifest.add_input(&args.cohort)?;
    manifest.add_input(&args.config)?;

    let rows = grid_configs(&args.grid, &config.model)?;
    let (train_records, test_records) =
        stratified_split(&records, args.test_fraction, config.train.seed)?;
    let vocab = vocab_from_records(&train_records)?;
    let encoded_train = encode_cohort(&train_records, &vocab, config.tau)?;
    let encoded_test = encode_cohort(&test_records, &vocab, config.tau)?;

    let mut csv = String::from(
        "label,cs,cf,td,auroc_mean,auroc_ci_lo,auroc_ci_hi,ap_mean,ap_ci_lo,ap_ci_hi,f1_mean,f1_ci_lo,f1_ci_hi\n",
    );
    for model_config in &rows {
        let outcomes = cross_validate(&encoded_train, model_config, &config.train)?;
        let fold_params: Vec<ModelParams> = outcomes.into_iter().map(|o| o.params).collect();
        let (report, _) =
            evaluate_ensemble(&fold_params, &encoded_test, model_config, &config.train)?;
        info!(
            "{}: auroc {:.4}, ap {:.4}, f1 {:.4}",
            model_config.ablation_label(),
            report.auroc.mean,
            report.ap.mean,
            report.f1.mean
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            model_config.ablation_label(),
            model_config.use_code_similarity,
            model_config.use_frequency,
            model_config.use_time_decay,
            report.auroc.mean,
            report.auroc.lo,
            report.auroc.hi,
            report.ap.mean,
            report.ap.lo,
            report.ap.hi,
            report.f1.mean,
            report.f1.lo,
            report.f1.hi,
        ));
    }
    let out_dir = parent_dir(&args.out);
    ensure_dir(&out_dir)?;
    write_text(&args.out, &csv)?;
    manifest.finish_and_save(&out_dir)?;
    Ok(())
}

fn sweep(args: SweepArgs, argv: Vec<String>) -> AppResult<()> {
    let config = load_config(Some(&args.config), &args.set)?;
    let records = load_cohort(&args.cohort)?;
    let mut manifest = RunManifest::new(argv, &config);
    manifest.add_input(&args.cohort)?;
    manifest.add_input(&args.config)?;

    let mut leads = Vec::new();
    for part in args.leads.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let lead: i64 = part.parse().map_err(app_err("Config"))?;
        if lead < 0 {
            return Err(AppError {
                code: "Config",
                message: format!("lead times must be non-negative, got {lead}"),
            });
        }
        leads.push(lead);
    }
    let rows = sensitivity_sweep(
        &records,
        &leads,
        &config.model,
        &config.train,
        config.tau,
        args.test_fraction,
    )?;
    for (lead, report) in &rows {
        info!("lead {lead}: auroc {:.4}", report.auroc.mean);
    }
    let out_dir = parent_dir(&args.out);
    ensure_dir(&out_dir)?;
    write_text(&args.out, &sweep_to_csv(&rows))?;
    manifest.finish_and_save(&out_dir)?;
    Ok(())
}

fn flops(args: FlopsArgs) -> AppResult<()> {
    let config = load_config(Some(&args.config), &args.set)?;
    let records = load_cohort(&args.cohort)?;
    let vocab = vocab_from_records(&records)?;
    let encoded = encode_cohort(&records, &vocab, config.tau)?;

    let params = model::count_params(&config.model, vocab.n());
    let mut total: u64 = 0;
    let mut peak: u64 = 0;
    for graph in &encoded.graphs {
        let flops = model::count_flops(&config.model, &graph.stats()).total();
        total += flops;
        peak = peak.max(flops);
    }
    let mean = total as f64 / encoded.graphs.len() as f64;

    println!("patients: {}", encoded.graphs.len());
    println!("vocabulary: {} codes (unknown slot included)", vocab.n());
    println!("parameters: {params}");
    println!("mean FLOPs per forward pass: {mean:.0}");
    println!("peak FLOPs per forward pass: {peak}");
    println!("total FLOPs over the cohort: {total}");
    println!("convention: {}", model::FLOP_CONVENTION);
    println!(
        "published reference for the clinical configuration: 23.495M FLOPs, \
         0.172M parameters (comparison only, not asserted)"
    );
    Ok(())
}

fn selftest_cmd(args: SelftestArgs) -> AppResult<()> {
    let results = selftest::run_all(args.seed);
    let mut failures = 0;
    for result in &results {
        let status = if result.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", result.name, result.detail);
        if !result.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(AppError {
            code: "Selftest",
            message: format!("{failures} of {} checks failed", results.len()),
        });
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
