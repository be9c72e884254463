use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ctforensics::config::PipelineConfig;
use ctforensics::grid::Split;
use ctforensics::pipeline::{self, RunOptions, VolumeStore};
use ctforensics::volume::{load_scan, ScanFormat};
use ctforensics::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(
    name = "ctforensics",
    version,
    about = "Detect small forged regions in CT scans"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true, env = "CTFORENSICS_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Validate inputs and report what would be done without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Config override as `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its patch manifest.
    BuildDataset,
    /// Train the patch detector on the local splits.
    TrainLocal,
    /// Write slice heatmaps for dataset splits or a single scan.
    Detect(DetectArgs),
    /// Fit PCA and the SVM on heatmaps of the global training split.
    TrainGlobal,
    /// Classify the test split, or a single scan.
    Classify(ScanArgs),
    /// Score stored predictions against the dataset ground truth.
    Evaluate,
    /// Every stage from dataset generation to evaluation.
    Run,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// A DICOM series directory or raw volume file instead of the dataset.
    #[arg(long)]
    scan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Dicom)]
    format: Format,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    scan: ScanArgs,
    /// Dataset splits to process.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SplitArg::TrainGlobal, SplitArg::Test])]
    splits: Vec<SplitArg>,
    /// Also write upscaled PGM previews.
    #[arg(long)]
    pgm: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Dicom,
    Raw,
}

impl From<Format> for ScanFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Dicom => ScanFormat::DicomSeries,
            Format::Raw => ScanFormat::RawVolume,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    TrainLocal,
    ValLocal,
    TrainGlobal,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::TrainLocal => Split::TrainLocal,
            SplitArg::ValLocal => Split::ValLocal,
            SplitArg::TrainGlobal => Split::TrainGlobal,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Io => 1,
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Model => 4,
    }
}

fn load_config(g: &GlobalArgs) -> ctforensics::Result<PipelineConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    PipelineConfig::load(g.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> ctforensics::Result<()> {
    let cfg = load_config(&cli.global)?;
    let opts = RunOptions {
        dry_run: cli.global.dry_run,
        force: cli.global.force,
    };
    if opts.dry_run {
        info!("dry run: nothing will be written");
    }
    match &cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml_string()?),
        Command::BuildDataset => {
            let (s, _) = pipeline::build_dataset(&cfg, opts)?;
            println!(
                "scans {} (tampered {}), manifest rows {}",
                s.scans, s.tampered, s.manifest_rows
            );
            for (split, n) in &s.scans_per_split {
                println!("  {split:?}: {n} scans");
            }
        }
        Command::TrainLocal => {
            let ds = pipeline::load_tables(&cfg)?;
            let mut store = VolumeStore::new(&cfg.paths.dataset_dir());
            if let Some(out) = pipeline::train_local(&cfg, &ds, &mut store, opts)? {
                let best = &out.log[out.best_epoch - 1];
                println!(
                    "best epoch {} of {} (val accuracy {:.4}){}",
                    out.best_epoch,
                    out.log.len(),
                    best.val_acc,
                    if out.stopped_early {
                        ", stopped early"
                    } else {
                        ""
                    }
                );
            }
        }
        Command::Detect(args) => {
            let net = pipeline::load_detector(&cfg)?;
            match &args.scan.scan {
                Some(path) => {
                    let vol = load_scan(path, args.scan.format.into())?;
                    let maps = pipeline::detect_volume(&net, &vol, &cfg.grid, &cfg.normalization)?;
                    let dir = cfg.paths.heatmaps_dir();
                    if dir.join(vol.scan_id()).exists() && !opts.force && !opts.dry_run {
                        return Err(Error::Exists(dir.join(vol.scan_id())));
                    }
                    if !opts.dry_run {
                        pipeline::write_heatmaps(&dir, vol.scan_id(), &maps, args.pgm)?;
                    }
                    println!("{}: {} heatmaps", vol.scan_id(), maps.len());
                }
                None => {
                    let ds = pipeline::load_tables(&cfg)?;
                    let mut store = VolumeStore::new(&cfg.paths.dataset_dir());
                    let splits: Vec<Split> = args.splits.iter().map(|&s| s.into()).collect();
                    let maps =
                        pipeline::detect_dataset(&cfg, &net, &ds, &mut store, &splits, opts)?;
                    if args.pgm && !opts.dry_run {
                        for (id, m) in &maps {
                            pipeline::write_heatmaps(&cfg.paths.heatmaps_dir(), id, m, true)?;
                        }
                    }
                    println!(
                        "{} scans, {} heatmaps",
                        maps.len(),
                        maps.values().map(Vec::len).sum::<usize>()
                    );
                }
            }
        }
        Command::TrainGlobal => {
            let ds = pipeline::load_tables(&cfg)?;
            let maps = pipeline::load_heatmaps(&cfg, &ds, &[Split::TrainGlobal])?;
            let s = pipeline::train_global(&cfg, &ds, &maps, opts)?;
            println!(
                "{} slices, {} components, best {:?} C={} gamma={:?} cv accuracy {:.4}",
                s.rows, s.model.pca.dims, s.best.kernel, s.best.c, s.best.gamma, s.best.cv_accuracy
            );
        }
        Command::Classify(args) => match &args.scan {
            Some(path) => {
                let (slices, scan) = pipeline::classify_scan(&cfg, path, args.format.into())?;
                for s in &slices {
                    println!(
                        "{} {:4} {} {:+.4}",
                        s.scan_id, s.slice_index, s.label_pred, s.score
                    );
                }
                println!(
                    "{}: {} ({} of {} slices positive)",
                    scan.scan_id,
                    if scan.tampered { "tampered" } else { "clean" },
                    scan.positive_slices,
                    scan.slices
                );
            }
            None => {
                let ds = pipeline::load_tables(&cfg)?;
                let maps = pipeline::load_heatmaps(&cfg, &ds, &[Split::Test])?;
                let model = pipeline::load_global(&cfg)?;
                let (_, scans) =
                    pipeline::classify_split(&cfg, &model, &ds, &maps, Split::Test, opts)?;
                for s in &scans {
                    println!(
                        "{} {}",
                        s.scan_id,
                        if s.tampered { "tampered" } else { "clean" }
                    );
                }
            }
        },
        Command::Evaluate => {
            let ds = pipeline::load_tables(&cfg)?;
            let outcomes = pipeline::read_outcomes(&cfg)?;
            let s = pipeline::evaluate(&cfg, &ds, &outcomes, opts)?;
            print!("{}", s.table);
        }
        Command::Run => {
            let s = pipeline::run_experiment(&cfg, opts)?;
            print!("{}", s.table);
            if let Some(rate) = s.localization_rate() {
                println!(
                    "peak within 2 cells: {:.4} ({} of {})",
                    rate, s.localized.0, s.localized.1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.global.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
