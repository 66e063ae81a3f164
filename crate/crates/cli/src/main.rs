//! `sparsematch`: generate synthetic pairs, train, match, evaluate and
//! benchmark from the command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sparsematch::bench::{run_benchmark, BenchConfig, Variant};
use sparsematch::eval::evaluate;
use sparsematch::io::{
    load_dataset, load_weights, save_dataset, save_weights, write_atomic, KeypointFile, MatchesFile,
};
use sparsematch::synth::{generate_dataset, SceneConfig};
use sparsematch::training::{train_model, write_metrics_csv, TrainConfig};
use sparsematch::{Error, ForwardOptions, Model32, SampleSize};

const EXIT_FAILURE: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_DIMENSION: u8 = 3;
const EXIT_CHECKSUM: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "sparsematch", version, about = "Sparse attentional keypoint matcher")]
struct Cli {
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML file with optional [train] and [scene] tables.
    #[arg(long, global = true, env = "SPARSEMATCH_CONFIG")]
    config: Option<PathBuf>,

    /// Confidence a mutual best match must exceed.
    #[arg(long, global = true, default_value_t = 0.2)]
    threshold: f64,

    #[arg(long, global = true)]
    sinkhorn_iters: Option<usize>,

    /// Bottlenecks per image. Training defaults to the config value,
    /// inference to a size proportional to the keypoint count.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a directory of synthetic labelled pairs.
    GenData(GenDataArgs),
    /// Train on a pair directory and write a weights file.
    Train(TrainArgs),
    /// Match two keypoint files.
    Match(MatchArgs),
    /// Score a weights file on a labelled pair directory.
    Eval(EvalArgs),
    /// Time and count attention on random inputs of growing size.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long)]
    shared: Option<usize>,
    #[arg(long)]
    unmatched: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    out: PathBuf,
    /// Defaults used for keys the config file does not set.
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Per-iteration CSV log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    no_bilateral_context: bool,
    #[arg(long)]
    vanilla_attention: bool,
    #[arg(long)]
    random_sampling: bool,
}

#[derive(Args, Debug)]
struct MatchArgs {
    file_a: PathBuf,
    file_b: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Matches file to write; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Keypoints per image, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long, value_delimiter = ',')]
    variants: Vec<VariantArg>,
    /// Rows whose working set would exceed this many MiB are reported as NA.
    #[arg(long, default_value_t = 2048)]
    memory_mib: usize,
    /// CSV file to write; stdout when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Optional gnuplot data file, one block per variant.
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    DenseIca,
    SparseMkaca,
    FullPipeline,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::DenseIca => Variant::DenseIca,
            VariantArg::SparseMkaca => Variant::SparseMkaca,
            VariantArg::FullPipeline => Variant::FullPipeline,
        }
    }
}

/// Contents of the `--config` file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    train: Option<toml::Table>,
    scene: Option<SceneConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("config {}: {e}", path.display())).into())
    }

    /// Train settings: profile defaults overlaid with the `[train]` table.
    fn train(&self, profile: Profile) -> anyhow::Result<TrainConfig> {
        let base = match profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Full => TrainConfig::full(),
        };
        let Some(table) = &self.train else {
            return Ok(base);
        };
        let mut merged: toml::Table = toml::from_str(&base.to_toml())?;
        for (key, value) in table {
            merged.insert(key.clone(), value.clone());
        }
        Ok(TrainConfig::from_toml_str(&toml::to_string(&merged)?)?)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Parse(_)) => EXIT_PARSE,
        Some(Error::Dimension { .. }) => EXIT_DIMENSION,
        Some(Error::Checksum) => EXIT_CHECKSUM,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&cli.threshold) {
        bail!("--threshold must lie in [0, 1]");
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(args) => gen_data(cli, &file, args),
        Command::Train(args) => train(cli, &file, args),
        Command::Match(args) => match_pair(cli, args),
        Command::Eval(args) => eval(cli, args),
        Command::Bench(args) => bench(cli, args),
    }
}

fn print_json<S: Serialize>(value: &S) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(cli: &Cli, file: &FileConfig, args: &GenDataArgs) -> anyhow::Result<()> {
    let mut scene = file.scene.clone().unwrap_or_default();
    if let Some(s) = cli.seed {
        scene.seed = s;
    }
    if let Some(v) = args.shared {
        scene.num_shared_points = v;
    }
    if let Some(v) = args.unmatched {
        scene.num_unmatched_per_image = v;
    }
    if let Some(v) = args.noise {
        scene.descriptor_noise = v;
    }
    if let Some(v) = args.dim {
        scene.descriptor_dim = v;
    }
    let pairs = generate_dataset::<f64>(&scene, args.count)?;
    let manifest = save_dataset(&args.out, &scene, &pairs)?;
    if cli.json {
        print_json(&manifest)?;
    } else {
        println!("wrote {} pairs to {}", manifest.count, args.out.display());
    }
    Ok(())
}

fn train(cli: &Cli, file: &FileConfig, args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = file.train(args.profile)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(v) = cli.sinkhorn_iters {
        config.sinkhorn_iters = v;
    }
    if let Some(v) = cli.k {
        config.k = v;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    config.threshold = cli.threshold;
    config.no_bilateral_context |= args.no_bilateral_context;
    config.vanilla_attention |= args.vanilla_attention;
    config.random_sampling |= args.random_sampling;
    config.validate()?;

    let data = load_dataset::<f32>(&args.data)?;
    if let Some(p) = data.first() {
        if p.kps_a.dim() != config.dim {
            return Err(Error::Dimension {
                op: "train",
                lhs: (p.kps_a.len(), p.kps_a.dim()),
                rhs: (p.kps_a.len(), config.dim),
            }
            .into());
        }
    }
    let model = Model32::new(config.model_config(), config.seed)?;
    let every = (config.iterations / 20).max(1);
    let outcome = train_model(&config, model, &data, |row| {
        if row.iteration % every == 0 || row.iteration + 1 == config.iterations {
            log::info!(
                "iter {:>6}  loss {:.4}  match {:.4}  cls {:.4}",
                row.iteration,
                row.total,
                row.match_loss,
                row.cls_loss
            );
        }
    })?;
    save_weights(&outcome.model, &args.out)?;
    if let Some(path) = &args.metrics {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &outcome.metrics)?;
        write_atomic(path, &buf)?;
    }
    let last = outcome.metrics.last();
    if cli.json {
        print_json(&serde_json::json!({
            "config": config,
            "weights": args.out,
            "final": last,
        }))?;
    } else {
        println!(
            "trained {} iterations, weights in {}",
            config.iterations,
            args.out.display()
        );
        if let Some(r) = last {
            println!(
                "final loss {:.4} (match {:.4}, classification {:.4})",
                r.total, r.match_loss, r.cls_loss
            );
        }
    }
    Ok(())
}

fn inference_options(cli: &Cli, model: &Model32) -> ForwardOptions {
    ForwardOptions {
        sample_size: cli.k.map_or(SampleSize::TestTime, SampleSize::Fixed),
        sinkhorn_iters: cli.sinkhorn_iters.unwrap_or(model.config.sinkhorn_iters),
        sample_seed: cli.seed.unwrap_or(0),
    }
}

fn match_pair(cli: &Cli, args: &MatchArgs) -> anyhow::Result<()> {
    let file_a = KeypointFile::load(&args.file_a)?;
    let file_b = KeypointFile::load(&args.file_b)?;
    let model: Model32 = load_weights(&args.weights)?;
    for (f, path) in [(&file_a, &args.file_a), (&file_b, &args.file_b)] {
        if !f.keypoints.is_empty() && f.descriptor_dim() != model.config.dim {
            return Err(anyhow::Error::from(Error::Dimension {
                op: "match",
                lhs: (f.keypoints.len(), f.descriptor_dim()),
                rhs: (f.keypoints.len(), model.config.dim),
            })
            .context(format!("descriptors in {} do not fit the weights", path.display())));
        }
    }
    let a = file_a.to_set::<f32>()?;
    let b = file_b.to_set::<f32>()?;
    let pred = model.predict(&a, &b, &inference_options(cli, &model), cli.threshold)?;
    let out = MatchesFile::new(pred.assignment.matches, a.len(), b.len());
    match &args.out {
        Some(path) => {
            write_atomic(path, &out.to_json())?;
            if cli.json {
                print_json(&out.summary)?;
            } else {
                print_summary(&out);
            }
        }
        None => std::io::stdout().write_all(&out.to_json())?,
    }
    Ok(())
}

fn print_summary(out: &MatchesFile) {
    let s = &out.summary;
    let conf = s.mean_confidence.map_or("undefined".to_string(), |c| format!("{c:.4}"));
    println!(
        "{} matches between {} and {} keypoints, mean confidence {conf}",
        s.num_matches, s.keypoints_a, s.keypoints_b
    );
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".to_string(), |x| format!("{x:.4}"))
}

fn eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let pairs = load_dataset::<f32>(&args.data)?;
    let model: Model32 = load_weights(&args.weights)?;
    let report = evaluate(&model, &pairs, &inference_options(cli, &model), cli.threshold)?;
    if cli.json {
        print_json(&report)?;
    } else {
        println!("pairs                  {}", report.pairs);
        println!("precision              {}", fmt_opt(report.precision));
        println!("matching score         {:.4}", report.matching_score);
        println!("predictor precision    {}", fmt_opt(report.predictor_precision));
        println!("predictor recall       {}", fmt_opt(report.predictor_recall));
        println!(
            "correct / predicted    {} / {}",
            report.correct_matches, report.predicted_matches
        );
    }
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs) -> anyhow::Result<()> {
    let defaults = BenchConfig::default();
    let config = BenchConfig {
        dim: args.dim,
        heads: args.heads,
        k: cli.k.unwrap_or(defaults.k),
        repetitions: args.repetitions,
        seed: cli.seed.unwrap_or(defaults.seed),
        variants: if args.variants.is_empty() {
            defaults.variants
        } else {
            args.variants.iter().map(|&v| v.into()).collect()
        },
        memory_budget_bytes: args.memory_mib << 20,
        sinkhorn_iters: cli.sinkhorn_iters.unwrap_or(defaults.sinkhorn_iters),
    };
    let report = run_benchmark(&config, &args.n)?;
    if let Some(path) = &args.gnuplot {
        write_atomic(path, report.to_gnuplot().as_bytes())?;
    }
    match &args.csv {
        Some(path) => write_atomic(path, report.to_csv().as_bytes())?,
        None if !cli.json => print!("{}", report.to_csv()),
        None => {}
    }
    if cli.json {
        print_json(&report)?;
    }
    Ok(())
}
