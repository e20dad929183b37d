use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use vessel_core::dataset::{
    load_dataset_with, test_split, train_split, write_json, DatasetId, LoadOptions, MapData, MapKind, MapMeta,
    MapStore, RetinalSample, StoredMap,
};
use vessel_core::eval::{evaluate_model, predict_full, MapSink, DEFAULT_THRESHOLD};
use vessel_core::forge::{erase_labels, ErasureConfig, ForgeRecord, VesselGraph};
use vessel_core::imageio;
use vessel_core::nn::Model;
use vessel_core::report::{self, Cell, CurveMetric, ExperimentGrid};
use vessel_core::sgl::{prepare_items, run_sgl, LabelSource, RunManifest, SglConfig};
use vessel_core::synth::{write_drive_layout, SynthConfig};

#[derive(Parser)]
#[command(
    name = "vessel",
    version,
    about = "Retinal vessel segmentation with study-group training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label erasing.
    Forge {
        #[command(subcommand)]
        action: ForgeAction,
    },
    /// Study-group training.
    Sgl {
        #[command(subcommand)]
        action: SglAction,
    },
    /// Scores a trained model on a dataset split and prints a TSV table.
    Evaluate(EvaluateArgs),
    /// Writes the learned enhancement of every image as an 8-bit PNG.
    ExportEnhancement(ExportArgs),
    /// Experiment grid over erase ratios and fold counts.
    Grid {
        #[command(subcommand)]
        action: GridAction,
    },
    /// Renders tables, curves or panels from a grid's stored results.
    Report(ReportArgs),
    /// Writes a synthetic dataset in the DRIVE layout.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    #[value(name = "DRIVE", alias = "drive")]
    Drive,
    #[value(name = "CHASE_DB1", alias = "chase_db1")]
    ChaseDb1,
}

impl From<DatasetArg> for DatasetId {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Drive => DatasetId::Drive,
            DatasetArg::ChaseDb1 => DatasetId::ChaseDb1,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "DRIVE")]
    dataset: DatasetArg,
    /// Directory holding DRIVE/ and CHASE_DB1/.
    #[arg(long, default_value = "data")]
    data_root: PathBuf,
    /// Accept images whose size differs from the dataset's native size.
    #[arg(long)]
    any_size: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<RetinalSample>> {
        let id = DatasetId::from(self.dataset);
        load_dataset_with(
            &self.data_root,
            id,
            LoadOptions {
                enforce_native_size: !self.any_size,
            },
        )
        .with_context(|| format!("loading {} from {}", id.dir_name(), self.data_root.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn pick(samples: &[RetinalSample], split: SplitArg) -> Vec<&RetinalSample> {
    match split {
        SplitArg::Train => train_split(samples),
        SplitArg::Test => test_split(samples),
    }
}

#[derive(Subcommand)]
enum ForgeAction {
    /// Erases thin segments from every label image in a directory.
    Erase {
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        thin_keep: f64,
        /// Directory of binary label images.
        #[arg(long = "in")]
        input: PathBuf,
        /// Map store root.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SglAction {
    /// Trains K members, pseudo-labels, trains the final model and scores it.
    Run(SglRunArgs),
}

#[derive(Args)]
struct SglRunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Train on erased labels with this ratio; 1 keeps them intact.
    #[arg(long)]
    erase_ratio: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    thin_keep: f64,
    /// Seeds folds, initialisation, patch sampling and erasure.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    member_epochs: Option<usize>,
    #[arg(long)]
    final_epochs: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long)]
    fov: bool,
    /// Skip the test-split evaluation.
    #[arg(long)]
    no_eval: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory (uses its final model) or a checkpoint file.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    /// Score inside the field-of-view mask only.
    #[arg(long)]
    fov: bool,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GridAction {
    /// Runs every cell without a stored result.
    Run {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Lists each cell's state.
    Status {
        #[arg(long)]
        grid: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Tables,
    Curves,
    Panels,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(value_enum)]
    kind: ReportKind,
    #[arg(long)]
    grid: PathBuf,
    /// Curves: which metric; both when omitted.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Panels: cell directory name such as r0.70_k8_s0.
    #[arg(long)]
    cell: Option<String>,
    /// Panels: comma separated sample ids.
    #[arg(long, value_delimiter = ',')]
    samples: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Dice,
    Auc,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    #[arg(long, default_value_t = 565)]
    width: usize,
    #[arg(long, default_value_t = 584)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Forge {
            action:
                ForgeAction::Erase {
                    ratio,
                    seed,
                    thin_keep,
                    input,
                    out,
                },
        } => forge_erase(ratio, seed, thin_keep, &input, &out),
        Command::Sgl {
            action: SglAction::Run(args),
        } => sgl_run(args),
        Command::Evaluate(args) => evaluate(args),
        Command::ExportEnhancement(args) => export_enhancement(args),
        Command::Grid {
            action: GridAction::Run { grid },
        } => grid_run(&grid),
        Command::Grid {
            action: GridAction::Status { grid },
        } => grid_status(&grid),
        Command::Report(args) => report(args),
        Command::Synth(a) => {
            let cfg = SynthConfig {
                width: a.width,
                height: a.height,
                seed: a.seed,
            };
            write_drive_layout(&a.out, &cfg, a.train, a.test)?;
            println!(
                "wrote {} + {} images to {}",
                a.train,
                a.test,
                a.out.join("DRIVE").display()
            );
            Ok(())
        }
    }
}

fn forge_erase(ratio: f64, seed: u64, thin_keep: f64, input: &Path, out: &Path) -> Result<()> {
    let cfg = ErasureConfig {
        ratio,
        thin_keep_fraction: thin_keep,
        seed,
    };
    cfg.validate()?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "gif" | "tif" | "tiff"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no label images in {}", input.display());
    }
    let run = format!("r{ratio:.2}_s{seed}");
    let store = MapStore::new(out);
    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("non UTF-8 file name")?
            .to_string();
        let label = imageio::read_binary(path)?;
        let graph = VesselGraph::build(&label);
        let erased = erase_labels(&label, &cfg, &id)?;
        let record = ForgeRecord::new(&id, &label, &graph, &erased);
        info!(
            "{id}: {} segments, cover width {}, kept {}, foreground {} -> {}",
            record.segments,
            record.cover_width,
            record.kept.len(),
            record.foreground_before,
            record.foreground_after
        );
        store.save(&StoredMap {
            sample_id: id,
            kind: MapKind::ErasedLabel,
            data: MapData::Binary(erased.mask),
            meta: MapMeta {
                run: run.clone(),
                fold: None,
                params: BTreeMap::new(),
            },
        })?;
        records.push(record);
    }
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        config: ErasureConfig,
        records: &'a [ForgeRecord],
    }
    let manifest = out.join(&run).join("manifest.json");
    write_json(
        &manifest,
        &Manifest {
            config: cfg,
            records: &records,
        },
    )?;
    println!("{} labels erased; manifest at {}", records.len(), manifest.display());
    Ok(())
}

fn sgl_run(a: SglRunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SglConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SglConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
        cfg.augmentation.seed = s;
    }
    if let Some(r) = a.erase_ratio {
        cfg.label_source = if r >= 1.0 {
            LabelSource::Clean
        } else {
            LabelSource::Erased {
                ratio: r,
                seed: cfg.seed,
                thin_keep_fraction: a.thin_keep,
            }
        };
    }
    if let Some(e) = a.member_epochs {
        cfg.member_epochs = e;
    }
    if let Some(e) = a.final_epochs {
        cfg.final_epochs = e;
    }
    if let Some(c) = a.base_channels {
        cfg.model.base_channels = c;
    }
    if let Some(c) = a.crop {
        cfg.augmentation.crop = c;
    }
    if let Some(b) = a.batch_size {
        cfg.optimizer.batch_size = b;
    }
    cfg.validate()?;

    let samples = a.data.load()?;
    let train = train_split(&samples);
    let (items, records) = prepare_items(&train, &cfg.label_source)?;
    if !records.is_empty() {
        write_json(&a.out.join("forge.json"), &records)?;
    }
    info!("training on {} images, K = {}", items.len(), cfg.k);
    let mut manifest = run_sgl(&items, &cfg, &a.out)?;
    if !a.no_eval {
        let test = test_split(&samples);
        let model = Model::load(&manifest.final_model.checkpoint)?;
        let store = MapStore::new(a.out.join("maps"));
        let sink = MapSink {
            store: &store,
            run: "test",
        };
        let report = evaluate_model(&model, &test, a.threshold, a.fov, Some(sink))?;
        std::fs::write(a.out.join("metrics.tsv"), report.to_tsv())?;
        print_summary(&report);
        manifest.metrics = Some(report);
        write_json(&a.out.join(RunManifest::FILE), &manifest)?;
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

fn print_summary(report: &vessel_core::eval::MetricsReport) {
    for (name, m) in [("micro", &report.micro), ("macro", &report.macro_)] {
        println!(
            "{name}: acc {:.4} auc {:.4} sens {:.4} spec {:.4} dice {:.4} iou {:.4}",
            m.accuracy, m.auc, m.sensitivity, m.specificity, m.dice, m.vessel_iou
        );
    }
}

fn load_model(run: &Path) -> Result<Model> {
    let path = if run.is_dir() {
        run.join("final.ckpt")
    } else {
        run.to_path_buf()
    };
    Model::load(&path).with_context(|| format!("loading model from {}", path.display()))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.run)?;
    let samples = a.data.load()?;
    let chosen = pick(&samples, a.split);
    if chosen.is_empty() {
        bail!("the chosen split is empty");
    }
    let report = evaluate_model(&model, &chosen, a.threshold, a.fov, None)?;
    let tsv = report.to_tsv();
    if let Some(out) = &a.out {
        std::fs::write(out, &tsv).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{tsv}");
    Ok(())
}

fn export_enhancement(a: ExportArgs) -> Result<()> {
    let model = load_model(&a.run)?;
    let samples = a.data.load()?;
    let chosen = pick(&samples, a.split);
    for s in &chosen {
        let (_, enh) = predict_full(&model, &s.image)?;
        imageio::write_rgb8(&a.out.join(format!("{}.png", s.id)), &enh)?;
    }
    println!("{} enhancement maps written to {}", chosen.len(), a.out.display());
    Ok(())
}

fn grid_run(path: &Path) -> Result<()> {
    let grid = ExperimentGrid::load(path)?;
    let summary = report::run_grid(&grid)?;
    println!(
        "grid {}: {} ran, {} already done, {} failed",
        grid.name,
        summary.ran.len(),
        summary.skipped.len(),
        summary.failed.len()
    );
    for (cell, err) in &summary.failed {
        eprintln!("  {}: {err}", cell.dir_name());
    }
    if !summary.failed.is_empty() {
        bail!("{} cells failed", summary.failed.len());
    }
    Ok(())
}

fn grid_status(path: &Path) -> Result<()> {
    let grid = ExperimentGrid::load(path)?;
    for (cell, state) in grid.states()? {
        let s = match state {
            report::CellState::Done(r) => format!("done (dice {:.4})", grid.aggregation.pick(&r.report).dice),
            report::CellState::Failed(e) => format!("failed: {e}"),
            report::CellState::Pending => "pending".into(),
        };
        println!("{}\t{s}", cell.dir_name());
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let grid = ExperimentGrid::load(&a.grid)?;
    match a.kind {
        ReportKind::Tables => print!("{}", report::emit_tables(&grid)?),
        ReportKind::Curves => {
            let metrics = match a.metric {
                Some(MetricArg::Dice) => vec![CurveMetric::Dice],
                Some(MetricArg::Auc) => vec![CurveMetric::Auc],
                None => vec![CurveMetric::Dice, CurveMetric::Auc],
            };
            for m in metrics {
                println!("{}", report::emit_curves(&grid, m)?.display());
            }
        }
        ReportKind::Panels => {
            let cell = Cell::parse(a.cell.as_deref().context("--cell is required for panels")?)?;
            if a.samples.is_empty() {
                bail!("--samples is required for panels");
            }
            for p in report::emit_panels(&grid, &cell, &a.samples)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
