//! `tailforge` CLI: long-tail dataset construction, 2-phase rebalanced
//! training, selection/augmentation inspection, evaluation, and the
//! ablation benchmark matrix.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tailforge::augment::{oversample_tail, render_recipe, write_recipes_csv, AugmentParams};
use tailforge::data::{
    frequency_match_counts, imbalance_ratio, make_pareto_longtail, read_manifest,
    split_head_tail, synth_gaussian_dataset, write_manifest, ClassDistribution, EmbeddingMatrix,
    FrequencyTable, Payload, SampleId,
};
use tailforge::error::{Error, Result};
use tailforge::eval::{
    emit_report, predict_test, read_results_json, run_bench, run_pipeline, topk1_accuracy,
};
use tailforge::herding::{read_selection_csv, undersample_heads, write_selection_csv};
use tailforge::ltt1;
use tailforge::tensor::Vector;
use tailforge::train::{Model, Strategy, TrainConfig};

#[derive(Parser)]
#[command(name = "tailforge", version, about = "Long-tailed classification toolkit")]
struct Cli {
    /// Training / synthesis seed (overrides the config file's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated seed list for multi-run commands, e.g. `1,2,3`.
    #[arg(long, global = true)]
    seeds: Option<String>,

    /// Output directory (or file, for `select`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Training config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct a Pareto long-tail class distribution (optionally
    /// frequency-matched) and print its summary.
    MakeLongtail(MakeLongtailArgs),
    /// Synthesize a Gaussian-cluster dataset for a distribution.
    Synth(SynthArgs),
    /// Run 2-phase training on a manifest.
    Train(TrainArgs),
    /// Herding selection for head classes; writes selection.csv.
    Select(SelectArgs),
    /// Generate tail-class CutMix recipes and preview renders.
    Augment(AugmentArgs),
    /// Evaluate a saved model bundle on a manifest's test split.
    Eval(EvalArgs),
    /// Run the (strategy x seed) ablation matrix and emit reports.
    Bench(BenchArgs),
    /// Merge results.json files into fresh results.csv / results.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct MakeLongtailArgs {
    /// Number of classes.
    classes: u32,
    /// Training-sample count of the largest class.
    n_max: u64,
    /// Training-sample count of the smallest class.
    n_min: u64,
    /// Pareto power value.
    #[arg(long, default_value_t = 6.0)]
    alpha: f64,
    /// Balanced test-split size per class.
    #[arg(long, default_value_t = 250)]
    test_per_class: u64,
    /// Frequency table CSV (`class_id,frequency`) to rescale the counts.
    #[arg(long)]
    freq: Option<PathBuf>,
    /// Distribution name recorded in artifacts.
    #[arg(long, default_value = "longtail")]
    name: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Distribution CSV (`class_id,count`) from make-longtail.
    #[arg(long)]
    dist: PathBuf,
    /// Feature dimension.
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Radius of the sphere class means are drawn on.
    #[arg(long, default_value_t = 3.0)]
    class_sep: f64,
    /// Balanced test-split size per class.
    #[arg(long, default_value_t = 250)]
    test_per_class: u64,
    /// Dataset name recorded in the manifest directory.
    #[arg(long, default_value = "synth")]
    name: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest directory.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Dataset manifest directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Rank-2 LTT1 embeddings aligned with the manifest train rows.
    #[arg(long)]
    embeddings: PathBuf,
    /// L2-normalize features before herding.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct AugmentArgs {
    /// Dataset manifest directory.
    #[arg(long)]
    manifest: PathBuf,
    /// selection.csv from `select`; its removed pool feeds the mixing.
    #[arg(long)]
    selection: PathBuf,
    /// Rank-2 LTT1 embeddings aligned with the manifest train rows.
    #[arg(long)]
    embeddings: PathBuf,
    /// Number of mixed source images per recipe.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Head batch size drawn per recipe.
    #[arg(long, default_value_t = 64)]
    batch_size_br: usize,
    #[arg(long, default_value_t = 0.1)]
    s_lo: f64,
    #[arg(long, default_value_t = 0.5)]
    s_hi: f64,
    /// Pick sources at random instead of by cosine similarity.
    #[arg(long)]
    random_sources: bool,
    /// Render the first N recipes as LTT1 previews.
    #[arg(long, default_value_t = 0)]
    preview: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Model bundle (LTT1) to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Strategy label recorded in the report.
    #[arg(long, default_value = "eval")]
    strategy_label: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset manifest directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated strategy list; defaults to every ablation arm.
    #[arg(long)]
    strategies: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// results.json files to merge.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_seeds(cli_seeds: &Option<String>, fallback: u64) -> Result<Vec<u64>> {
    match cli_seeds {
        None => Ok(vec![fallback]),
        Some(text) => {
            let seeds: Vec<u64> = text
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad seed `{s}`")))
                })
                .collect::<Result<_>>()?;
            if seeds.is_empty() {
                return Err(Error::InvalidArgument("empty seed list".into()));
            }
            Ok(seeds)
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_kv_str(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_distribution_csv(dist: &ClassDistribution, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["class_id", "count"])?;
    for (i, count) in dist.counts().iter().enumerate() {
        writer.write_record([(i + 1).to_string(), count.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

fn read_distribution_csv(path: &Path) -> Result<Vec<u64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != vec!["class_id", "count"] {
        return Err(Error::MalformedManifest(
            "distribution header must be `class_id,count`".into(),
        ));
    }
    let mut counts = Vec::new();
    for record in reader.records() {
        let record = record?;
        let count: u64 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedManifest("bad count in distribution".into()))?;
        counts.push(count);
    }
    Ok(counts)
}

fn summarize_distribution(dist: &ClassDistribution) {
    let split = split_head_tail(dist);
    let max = dist.counts().iter().max().unwrap();
    let min = dist.counts().iter().min().unwrap();
    println!(
        "classes={} total={} max={} min={} imbalance={} m={:.4} head={} tail={} boundary={}",
        dist.class_count(),
        dist.total_train(),
        max,
        min,
        imbalance_ratio(dist),
        split.m(),
        split.head_classes().len(),
        split.tail_classes().len(),
        split.boundary_classes().len(),
    );
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeLongtail(args) => {
            let seed = cli.seed.unwrap_or(0);
            let mut dist = make_pareto_longtail(args.classes, args.n_max, args.n_min, args.alpha, seed)?
                .with_test_per_class(args.test_per_class)
                .with_name(&args.name);
            if let Some(freq_path) = &args.freq {
                let table = FrequencyTable::read_csv(freq_path)?;
                let counts = frequency_match_counts(dist.counts(), &table)?;
                dist = ClassDistribution::new(&args.name, counts, args.test_per_class)?;
            }
            summarize_distribution(&dist);
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                write_distribution_csv(&dist, &out.join("distribution.csv"))?;
            }
            Ok(())
        }
        Command::Synth(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("synth requires --out".into()))?;
            let counts = read_distribution_csv(&args.dist)?;
            let dist = ClassDistribution::new(&args.name, counts, args.test_per_class)?;
            let seed = cli.seed.unwrap_or(0);
            let dataset = synth_gaussian_dataset(&dist, args.dim, args.class_sep, seed)?;
            write_manifest(&dataset, out)?;
            summarize_distribution(&dist);
            println!(
                "wrote {} samples to {}",
                dataset.samples().len(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("train requires --out".into()))?;
            let cfg = load_config(&cli)?;
            let dataset = read_manifest(&args.manifest)?;
            let run = run_pipeline(&dataset, &cfg, Some(out))?;
            if run.ros_fallback {
                eprintln!("warning: empty head-source pool, fell back to tail duplication");
            }
            println!(
                "strategy={} seed={} head={:.4} tail={:.4} overall={:.4}",
                run.report.strategy,
                run.report.seed,
                run.report.head_acc,
                run.report.tail_acc,
                run.report.overall_acc
            );
            Ok(())
        }
        Command::Select(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("select requires --out".into()))?;
            let dataset = read_manifest(&args.manifest)?;
            let train_ids: Vec<SampleId> = dataset
                .train_indices()
                .iter()
                .map(|&pos| dataset.sample(pos).id.clone())
                .collect();
            let embeddings = EmbeddingMatrix::read_ltt1(&args.embeddings, train_ids)?;
            let split = split_head_tail(dataset.distribution());
            let selection = undersample_heads(&dataset, &embeddings, &split, args.normalize)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            write_selection_csv(&selection, out)?;
            let kept: usize = selection.values().map(|s| s.selected.len()).sum();
            let removed: usize = selection.values().map(|s| s.removed.len()).sum();
            println!(
                "selected {kept} and removed {removed} samples across {} head classes",
                selection.len()
            );
            Ok(())
        }
        Command::Augment(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("augment requires --out".into()))?;
            let dataset = read_manifest(&args.manifest)?;
            let train_ids: Vec<SampleId> = dataset
                .train_indices()
                .iter()
                .map(|&pos| dataset.sample(pos).id.clone())
                .collect();
            let embeddings = EmbeddingMatrix::read_ltt1(&args.embeddings, train_ids)?;
            let selection = read_selection_csv(&args.selection)?;
            let split = split_head_tail(dataset.distribution());
            let pool: Vec<SampleId> = selection
                .values()
                .flat_map(|s| s.removed.iter().cloned())
                .collect();
            let params = AugmentParams {
                k: args.k,
                batch_size_br: args.batch_size_br,
                s_lo: args.s_lo,
                s_hi: args.s_hi,
                visual_aware: !args.random_sources,
                hard_tail_label: false,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let mut no_teacher = |_: &Payload| -> Result<Vector> {
                Err(Error::InvalidArgument(
                    "embeddings file does not cover every train sample".into(),
                ))
            };
            let plan = oversample_tail(
                &dataset,
                &split,
                &pool,
                &embeddings,
                &mut no_teacher,
                &params,
                &mut rng,
            )?;
            fs::create_dir_all(out)?;
            write_recipes_csv(&plan, &out.join("recipes.csv"))?;
            if plan.ros_fallback {
                eprintln!("warning: empty head-source pool, recipes are plain duplicates");
            }
            let mut previews = 0usize;
            for item in plan.items.iter() {
                if previews >= args.preview {
                    break;
                }
                if let tailforge::augment::TailItem::Mixed(recipe) = item {
                    let (payload, _) = render_recipe(recipe, &dataset)?;
                    let (dims, data): (Vec<u32>, &[f64]) = match &payload {
                        Payload::Features(v) => (vec![v.dim() as u32], v.as_slice()),
                        Payload::Image(img) => (
                            vec![img.height(), img.width(), img.channels()],
                            img.data(),
                        ),
                    };
                    ltt1::write_file(
                        &out.join(format!("preview_{previews:04}.ltt1")),
                        &dims,
                        data,
                    )?;
                    previews += 1;
                }
            }
            println!(
                "generated {} tail items ({} previews rendered)",
                plan.items.len(),
                previews
            );
            Ok(())
        }
        Command::Eval(args) => {
            let dataset = read_manifest(&args.manifest)?;
            let model = Model::load_bundle(&args.model)?;
            let split = split_head_tail(dataset.distribution());
            let (preds, labels) = predict_test(&model, &dataset)?;
            let mut report = topk1_accuracy(&preds, &labels, &split)?;
            report.strategy = args.strategy_label.clone();
            report.seed = cli.seed.unwrap_or(0);
            println!(
                "strategy={} head={:.4} tail={:.4} overall={:.4}",
                report.strategy, report.head_acc, report.tail_acc, report.overall_acc
            );
            if let Some(out) = &cli.out {
                emit_report(&[report], false, out)?;
            }
            Ok(())
        }
        Command::Bench(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("bench requires --out".into()))?;
            let cfg = load_config(&cli)?;
            let dataset = read_manifest(&args.manifest)?;
            let strategies: Vec<Strategy> = match &args.strategies {
                None => Strategy::ALL.to_vec(),
                Some(text) => text
                    .split(',')
                    .map(|s| Strategy::from_str(s.trim()))
                    .collect::<Result<_>>()?,
            };
            let seeds = parse_seeds(&cli.seeds, cfg.seed)?;
            let bench = run_bench(&dataset, &cfg, &strategies, &seeds, Some(out))?;
            if bench.ros_fallback {
                eprintln!("warning: empty head-source pool in at least one run");
            }
            print!("{}", bench.results_csv);
            Ok(())
        }
        Command::Report(args) => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("report requires --out".into()))?;
            let mut reports = Vec::new();
            for path in &args.inputs {
                reports.extend(read_results_json(path)?);
            }
            emit_report(&reports, false, out)?;
            println!("merged {} runs into {}", reports.len(), out.display());
            Ok(())
        }
    }
}
