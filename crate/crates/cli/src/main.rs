//! `attnvo`: train, evaluate, plot and explain the visual odometry network.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or I/O,
//! 4 numeric failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use attnvo::attribution::{self, AttributionSettings, Target};
use attnvo::dataset;
use attnvo::evaluation::{self, MetricReport, ReplayEstimator, Trajectory};
use attnvo::nn::VoNet;
use attnvo::plot::{self, Series};
use attnvo::training::{self, Checkpoint, TrainConfig, CONFIG_KEYS};
use attnvo::util::{atomic_write, create_dir};

use manifest::Manifest;

/// Environment variable consulted when no dataset root is given.
const DATA_ENV: &str = "ATTNVO_DATA";

#[derive(Parser, Debug)]
#[command(name = "attnvo", version, about = "Self-attention monocular visual odometry")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model. Config keys may also be given as `--key=value`.
    Train(TrainArgs),
    /// Run a checkpoint over sequences and score them on the KITTI benchmark.
    Evaluate(EvaluateArgs),
    /// Draw top-down trajectory plots from KITTI pose files.
    Plot(PlotArgs),
    /// Integrated-gradients overlays for consecutive frame pairs.
    Attribute(AttributeArgs),
    /// Top salient label category for each of a run of frames.
    Consistency(ConsistencyArgs),
    /// Write the synthetic mini dataset.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root (falls back to the config, then $ATTNVO_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, `KEY=VALUE` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Replay ground-truth motions instead of running a model.
    #[arg(long)]
    oracle: bool,
    /// Comma-separated sequence ids (default: the config's test sequences).
    #[arg(long, value_delimiter = ',')]
    sequences: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Pose files drawn into one plot, labelled by file stem.
    files: Vec<PathBuf>,
    /// Directory from `evaluate`: one plot per `<seq>_estimate.txt` /
    /// `<seq>_ground_truth.txt` pair.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long, default_value = "trajectory")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sequence: String,
    /// Interpolation steps.
    #[arg(long, default_value_t = attribution::DEFAULT_STEPS)]
    steps: usize,
    /// translation_norm, or one axis: tx ty tz rx ry rz.
    #[arg(long, default_value = "translation_norm")]
    target: String,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[command(flatten)]
    saliency: SaliencyArgs,
    /// First frame of the first pair.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Number of consecutive pairs.
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    /// Overlay opacity at the strongest pixel.
    #[arg(long, default_value_t = attribution::DEFAULT_PEAK_ALPHA)]
    peak_alpha: f64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    #[command(flatten)]
    saliency: SaliencyArgs,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Root holding `labels/` (default: the dataset root).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn classify(error: anyhow::Error) -> Failure {
    use attnvo::Error as E;
    let code = match error.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config { .. } | E::InvalidArgument(_) | E::Shape(_)) => 2,
        Some(E::Numeric { .. } | E::DegenerateRotation { .. }) => 4,
        Some(_) => 3,
        None if error.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 2,
    };
    Failure { code, error }
}

type CliResult<T> = Result<T, Failure>;

trait OrFail<T> {
    fn or_fail(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self) -> CliResult<T> {
        self.map_err(|e| classify(e.into()))
    }
}

/// Rewrites `--key=value` for known config keys into `--set key=value`.
fn rewrite_overrides(args: Vec<String>) -> Vec<String> {
    let mut rest = args.iter().skip(1);
    let mut subcommand = None;
    while let Some(a) = rest.next() {
        if a == "--log-level" {
            rest.next();
        } else if !a.starts_with('-') {
            subcommand = Some(a.as_str());
            break;
        }
    }
    if subcommand != Some("train") {
        return args;
    }
    let mut out = Vec::with_capacity(args.len());
    for a in args {
        if let Some((key, value)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if CONFIG_KEYS.contains(&key) {
                out.push("--set".into());
                out.push(format!("{key}={value}"));
                continue;
            }
        }
        out.push(a);
    }
    out
}

fn resolve_data(arg: &Option<PathBuf>, config: Option<&Path>) -> CliResult<PathBuf> {
    let root = arg
        .clone()
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| usage(anyhow!("no dataset root: pass --data, set dataset_root or ${DATA_ENV}")))?;
    if !root.is_dir() {
        return Err(Failure {
            code: 3,
            error: anyhow!("dataset root {} does not exist", root.display()),
        });
    }
    Ok(root)
}

fn prepare_out(out: &Path) -> CliResult<()> {
    create_dir(out).or_fail()
}

fn cmd_train(args: TrainArgs, mut manifest: Manifest) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).or_fail()?,
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v).or_fail()?;
    }
    cfg.validate().or_fail()?;
    let root = resolve_data(&args.data.data, cfg.dataset_root.as_deref())?;
    cfg.dataset_root = Some(root.clone());
    prepare_out(&args.out)?;
    atomic_write(&args.out.join("config.txt"), cfg.to_text().as_bytes()).or_fail()?;

    let data = training::prepare_data(&root, &cfg).or_fail()?;
    log::info!(
        "{} training windows, {} validation windows",
        data.train.len(),
        data.validation.len()
    );
    let mut model = VoNet::<f32>::new(cfg.model_config(), cfg.seed).or_fail()?;
    if let Some(w) = &cfg.encoder_weights {
        let n = model.import_encoder_weights(w).or_fail()?;
        log::info!("imported {n} encoder tensors from {}", w.display());
    }
    let parameters = model.num_parameters();
    log::info!("{parameters} parameters, attention {}", cfg.attention);
    let outcome = training::train(&cfg, &data, model, Some(&args.out)).or_fail()?;

    manifest.seed = Some(cfg.seed);
    manifest.config = Some(cfg.to_text());
    manifest.dataset_root = Some(root);
    manifest.set("attention", cfg.attention);
    manifest.set("parameters", parameters);
    manifest.set("best_epoch", outcome.best.epoch);
    manifest.set("best_validation_loss", outcome.best.validation_loss);
    manifest.set("epochs_run", outcome.curve.len());
    manifest.set("stopped_early", outcome.stopped_early);
    manifest.finish(&args.out).or_fail()
}

fn write_evaluation(out: &Path, id: &str, eval: &evaluation::SequenceEvaluation) -> CliResult<()> {
    let traj = out.join("trajectories");
    eval.estimate.save(&traj.join(format!("{id}_estimate.txt"))).or_fail()?;
    eval.ground_truth.save(&traj.join(format!("{id}_ground_truth.txt"))).or_fail()?;
    atomic_write(
        &out.join("losses").join(format!("{id}.csv")),
        evaluation::loss_csv(&eval.losses).as_bytes(),
    )
    .or_fail()
}

fn cmd_evaluate(args: EvaluateArgs, mut manifest: Manifest) -> CliResult<()> {
    let checkpoint = match &args.checkpoint {
        Some(dir) if !args.oracle => Some(Checkpoint::load(dir).or_fail()?),
        _ => None,
    };
    let cfg = checkpoint.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let root = resolve_data(&args.data.data, cfg.dataset_root.as_deref())?;
    let sequences = if args.sequences.is_empty() {
        cfg.test_sequences.clone()
    } else {
        args.sequences.clone()
    };
    prepare_out(&args.out)?;
    let mut report = MetricReport::default();
    for id in &sequences {
        let record = dataset::load_sequence(&root, id).or_fail()?;
        let eval = match &checkpoint {
            Some(c) => evaluation::evaluate_sequence(&c.model, &record, &c.covariance, cfg.image_size()),
            None => {
                let replay = ReplayEstimator {
                    twists: record.relative_twists().or_fail()?,
                };
                evaluation::evaluate_sequence(&replay, &record, &attnvo::objective::CovarianceMatrix::identity(), cfg.image_size())
            }
        }
        .or_fail()?;
        write_evaluation(&args.out, id, &eval)?;
        report.insert(id.clone(), eval.errors);
    }
    atomic_write(&args.out.join("metrics.csv"), report.to_csv().as_bytes()).or_fail()?;
    atomic_write(&args.out.join("metrics_detail.csv"), report.detail_csv().as_bytes()).or_fail()?;
    let table = report.to_table();
    atomic_write(&args.out.join("metrics.txt"), table.as_bytes()).or_fail()?;
    print!("{table}");

    manifest.seed = checkpoint.as_ref().map(|c| c.config.seed);
    manifest.config = checkpoint.as_ref().map(|c| c.config.to_text());
    manifest.dataset_root = Some(root);
    manifest.set("sequences", &sequences);
    manifest.set("oracle", checkpoint.is_none());
    manifest.finish(&args.out).or_fail()
}

fn load_trajectory(path: &Path) -> CliResult<Trajectory> {
    Trajectory::load(path).map_err(|e| {
        let code = match e {
            attnvo::Error::Io { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            error: anyhow::Error::new(e).context(format!("reading {}", path.display())),
        }
    })
}

fn cmd_plot(args: PlotArgs, manifest: Manifest) -> CliResult<()> {
    if args.files.is_empty() && args.trajectories.is_none() {
        return Err(usage(anyhow!("give pose files or --trajectories DIR")));
    }
    prepare_out(&args.out)?;
    if !args.files.is_empty() {
        let trajs: Vec<Trajectory> = args.files.iter().map(|f| load_trajectory(f)).collect::<CliResult<_>>()?;
        let labels: Vec<String> = args
            .files
            .iter()
            .map(|f| f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let series: Vec<Series> = labels
            .iter()
            .zip(&trajs)
            .map(|(label, trajectory)| Series { label, trajectory })
            .collect();
        let svg = plot::render_svg(&args.name, &series);
        atomic_write(&args.out.join(format!("{}.svg", args.name)), svg.as_bytes()).or_fail()?;
    }
    if let Some(dir) = &args.trajectories {
        let mut ids: Vec<String> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))
            .map_err(|e| Failure { code: 3, error: e })?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix("_estimate.txt").map(String::from))
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Failure {
                code: 3,
                error: anyhow!("no *_estimate.txt files in {}", dir.display()),
            });
        }
        for id in ids {
            let est = load_trajectory(&dir.join(format!("{id}_estimate.txt")))?;
            let gt = load_trajectory(&dir.join(format!("{id}_ground_truth.txt")))?;
            let svg = plot::render_svg(
                &format!("sequence {id}"),
                &[
                    Series {
                        label: "ground truth",
                        trajectory: &gt,
                    },
                    Series {
                        label: "estimate",
                        trajectory: &est,
                    },
                ],
            );
            atomic_write(&args.out.join(format!("{id}.svg")), svg.as_bytes()).or_fail()?;
        }
    }
    manifest.finish(&args.out).or_fail()
}

fn saliency_setup(s: &SaliencyArgs) -> CliResult<(Checkpoint, AttributionSettings)> {
    let target = Target::parse(&s.target).or_fail()?;
    if s.steps == 0 {
        return Err(usage(anyhow!("--steps must be at least 1")));
    }
    let ckpt = Checkpoint::load(&s.checkpoint).or_fail()?;
    let settings = AttributionSettings {
        target,
        steps: s.steps,
        image_size: ckpt.config.image_size(),
    };
    Ok((ckpt, settings))
}

fn cmd_attribute(args: AttributeArgs, mut manifest: Manifest) -> CliResult<()> {
    let (ckpt, settings) = saliency_setup(&args.saliency)?;
    let root = resolve_data(&args.data.data, ckpt.config.dataset_root.as_deref())?;
    let id = &args.saliency.sequence;
    let record = dataset::load_sequence(&root, id).or_fail()?;
    if args.pairs == 0 || args.frame + args.pairs >= record.len() {
        return Err(usage(anyhow!(
            "pairs {}..{} do not fit sequence {id} of {} frames",
            args.frame,
            args.frame + args.pairs,
            record.len()
        )));
    }
    prepare_out(&args.out)?;
    let mut summary = String::from("frame_index,output,baseline_output,attribution_sum,completeness_gap\n");
    let mut previous = dataset::preprocess(&record.image_paths[args.frame], settings.image_size).or_fail()?;
    for k in args.frame + 1..=args.frame + args.pairs {
        let current = dataset::preprocess(&record.image_paths[k], settings.image_size).or_fail()?;
        let map = attribution::attribute_pair(&ckpt.model, &previous, &current, settings.target, settings.steps).or_fail()?;
        let overlay = attribution::render_overlay(&attribution::frame_to_image(&current), &map.collapsed, args.peak_alpha).or_fail()?;
        let path = args.out.join("overlays").join(format!("{id}_{k:06}.png"));
        attribution::write_png(&path, &overlay).or_fail()?;
        summary.push_str(&format!(
            "{k},{},{},{},{}\n",
            map.output,
            map.baseline_output,
            map.total(),
            map.completeness_gap()
        ));
        previous = current;
    }
    atomic_write(&args.out.join(format!("attribution_{id}.csv")), summary.as_bytes()).or_fail()?;
    manifest.seed = Some(ckpt.config.seed);
    manifest.dataset_root = Some(root);
    manifest.set("sequence", id);
    manifest.set("steps", settings.steps);
    manifest.set("target", &args.saliency.target);
    manifest.finish(&args.out).or_fail()
}

fn cmd_consistency(args: ConsistencyArgs, mut manifest: Manifest) -> CliResult<()> {
    let (ckpt, settings) = saliency_setup(&args.saliency)?;
    let root = resolve_data(&args.data.data, ckpt.config.dataset_root.as_deref())?;
    let labels_root = args.labels.clone().unwrap_or_else(|| root.clone());
    let id = &args.saliency.sequence;
    let vocab = labels_root.join("labels").join("vocab.txt");
    let label_dir = labels_root.join("labels").join(id);
    if !vocab.is_file() || !label_dir.is_dir() {
        return Err(usage(anyhow!(
            "missing labels: need {} and {}",
            vocab.display(),
            label_dir.display()
        )));
    }
    let record = dataset::load_sequence(&root, id).or_fail()?;
    prepare_out(&args.out)?;
    let report = attribution::consistency_series(&ckpt.model, &record, &labels_root, args.start, args.frames, &settings).or_fail()?;
    let gaps = report.rows.iter().filter(|r| r.missing_labels()).count();
    if gaps > 0 {
        log::warn!("{gaps} frames had no label map");
    }
    atomic_write(&args.out.join(format!("consistency_{id}.csv")), report.to_csv().as_bytes()).or_fail()?;
    manifest.seed = Some(ckpt.config.seed);
    manifest.dataset_root = Some(root);
    manifest.set("sequence", id);
    manifest.set("frames", args.frames);
    manifest.set("label_gaps", gaps);
    manifest.finish(&args.out).or_fail()
}

fn cmd_fixture(args: FixtureArgs, manifest: Manifest) -> CliResult<()> {
    attnvo::fixture::write_fixture(&args.out, &attnvo::fixture::FixtureSpec::default()).or_fail()?;
    manifest.finish(&args.out).or_fail()
}

fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Plot(_) => "plot",
        Command::Attribute(_) => "attribute",
        Command::Consistency(_) => "consistency",
        Command::Fixture(_) => "fixture",
    };
    let manifest = Manifest::start(name, argv);
    match cli.command {
        Command::Train(a) => cmd_train(a, manifest),
        Command::Evaluate(a) => cmd_evaluate(a, manifest),
        Command::Plot(a) => cmd_plot(a, manifest),
        Command::Attribute(a) => cmd_attribute(a, manifest),
        Command::Consistency(a) => cmd_consistency(a, manifest),
        Command::Fixture(a) => cmd_fixture(a, manifest),
    }
}

fn main() -> ExitCode {
    let argv = rewrite_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
