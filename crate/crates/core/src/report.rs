//! The (ratio, K) experiment grid and the tables, curves and image panels
//! rendered from its stored results.
//!
//! Layout on disk, for a grid named `g`:
//!
//! ```text
//! <runs_dir>/g/labels/            erased training labels, one run per (r, seed)
//! <runs_dir>/g/cells/r0.70_k4_s0/ run/ (SGL run), maps/, result.json | failure.json
//! <reports_dir>/g/                tables, curves, panels
//! ```
//!
//! Everything under `reports_dir` is a pure function of the `result.json`
//! files and the stored maps, so re-emitting gives identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_dataset_with, read_json, test_split, train_split, write_json, DatasetId, LoadOptions, MapData, MapKind,
    MapMeta, MapStore, RetinalSample, StoredMap,
};
use crate::error::{Error, Result};
use crate::eval::{binarize, evaluate_model, MapSink, Metrics, MetricsReport};
use crate::imageio;
use crate::nn::Model;
use crate::raster::{Mask, Plane, RgbImage};
use crate::sgl::{prepare_items, run_sgl, LabelSource, RunManifest, SglConfig, TrainItem};

/// Marker for a table cell with no completed run.
pub const GAP: &str = "\u{2014}";

const COLUMNS: [&str; 6] = ["Accuracy", "AUC", "Sensitivity", "Specificity", "DICE", "Vessel-IoU"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Micro,
    Macro,
}

impl Aggregation {
    pub fn pick(self, report: &MetricsReport) -> &Metrics {
        match self {
            Aggregation::Micro => &report.micro,
            Aggregation::Macro => &report.macro_,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        }
    }
}

/// Grid description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    /// Grid id; names the run and report directories.
    pub name: String,
    pub dataset: DatasetId,
    pub data_root: PathBuf,
    pub enforce_native_size: bool,
    pub ratios: Vec<f64>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub threshold: f32,
    /// Score inside the field of view only.
    pub fov: bool,
    pub aggregation: Aggregation,
    pub thin_keep_fraction: f64,
    pub runs_dir: PathBuf,
    pub reports_dir: PathBuf,
    /// Base training setup; `k`, `seed` and `label_source` are set per cell.
    pub training: SglConfig,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            name: "grid".into(),
            dataset: DatasetId::Drive,
            data_root: PathBuf::from("data"),
            enforce_native_size: true,
            ratios: vec![1.0, 0.9, 0.7, 0.5],
            ks: vec![1, 2, 4, 8],
            seeds: vec![0],
            threshold: 0.5,
            fov: false,
            aggregation: Aggregation::Micro,
            thin_keep_fraction: 0.5,
            runs_dir: PathBuf::from("runs"),
            reports_dir: PathBuf::from("reports"),
            training: SglConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub ratio: f64,
    pub k: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("r{:.2}_k{}_s{}", self.ratio, self.k, self.seed)
    }

    /// Inverse of [`Cell::dir_name`].
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("cell {s:?} is not of the form r0.70_k4_s0"));
        let mut parts = s.split('_');
        let (r, k, seed) = (
            parts.next().ok_or_else(bad)?,
            parts.next().ok_or_else(bad)?,
            parts.next().ok_or_else(bad)?,
        );
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Cell {
            ratio: r.strip_prefix('r').and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            k: k.strip_prefix('k').and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            seed: seed.strip_prefix('s').and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        })
    }

    fn labels_run(&self) -> String {
        format!("r{:.2}_s{}", self.ratio, self.seed)
    }
}

/// A finished cell as stored in `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub report: MetricsReport,
    pub train_seconds: f64,
    pub train_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellFailure {
    cell: Cell,
    error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellState {
    Done(Box<CellResult>),
    Failed(String),
    Pending,
}

impl ExperimentGrid {
    pub const RESULT_FILE: &'static str = "result.json";
    const FAILURE_FILE: &'static str = "failure.json";

    /// Reads a grid file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grid: ExperimentGrid =
            toml::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut grid.data_root, &mut grid.runs_dir, &mut grid.reports_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::Parameter(format!(
                "grid name {:?} must be a plain file name",
                self.name
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Parameter(format!("ratio {r} is outside [0, 1]")));
        }
        if self.ks.contains(&0) {
            return Err(Error::Parameter("K must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Parameter("at least one seed is needed".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Ratios high to low, then K ascending, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut ratios = self.ratios.clone();
        ratios.sort_by(|a, b| b.total_cmp(a));
        ratios.dedup();
        let mut ks = self.ks.clone();
        ks.sort_unstable();
        ks.dedup();
        let mut cells = Vec::new();
        for &ratio in &ratios {
            for &k in &ks {
                for &seed in &self.seeds {
                    cells.push(Cell { ratio, k, seed });
                }
            }
        }
        cells
    }

    pub fn grid_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.grid_dir().join("cells").join(cell.dir_name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.reports_dir.join(&self.name)
    }

    /// Training configuration of one cell.
    pub fn cell_config(&self, cell: &Cell) -> SglConfig {
        let mut cfg = self.training.clone();
        cfg.k = cell.k;
        cfg.seed = cell.seed;
        cfg.model.seed = cell.seed;
        cfg.augmentation.seed = cell.seed;
        cfg.label_source = label_source(cell.ratio, cell.seed, self.thin_keep_fraction);
        cfg
    }

    pub fn state(&self, cell: &Cell) -> Result<CellState> {
        let dir = self.cell_dir(cell);
        let done = dir.join(Self::RESULT_FILE);
        if done.is_file() {
            return Ok(CellState::Done(Box::new(read_json(&done)?)));
        }
        let failed = dir.join(Self::FAILURE_FILE);
        if failed.is_file() {
            let f: CellFailure = read_json(&failed)?;
            return Ok(CellState::Failed(f.error));
        }
        Ok(CellState::Pending)
    }

    pub fn states(&self) -> Result<Vec<(Cell, CellState)>> {
        self.cells().into_iter().map(|c| Ok((c, self.state(&c)?))).collect()
    }

    fn load_samples(&self) -> Result<Vec<RetinalSample>> {
        load_dataset_with(
            &self.data_root,
            self.dataset,
            LoadOptions {
                enforce_native_size: self.enforce_native_size,
            },
        )
    }
}

/// Ratio 1 keeps the labels as they are.
fn label_source(ratio: f64, seed: u64, thin_keep_fraction: f64) -> LabelSource {
    if ratio >= 1.0 {
        LabelSource::Clean
    } else {
        LabelSource::Erased {
            ratio,
            seed,
            thin_keep_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridSummary {
    pub ran: Vec<Cell>,
    pub skipped: Vec<Cell>,
    pub failed: Vec<(Cell, String)>,
}

/// Runs every cell without a stored result. A failing cell is recorded in
/// its `failure.json` and retried on the next call; the other cells go on.
pub fn run_grid(grid: &ExperimentGrid) -> Result<GridSummary> {
    grid.validate()?;
    let mut summary = GridSummary::default();
    let mut pending = Vec::new();
    for cell in grid.cells() {
        match grid.state(&cell)? {
            CellState::Done(_) => summary.skipped.push(cell),
            _ => pending.push(cell),
        }
    }
    if pending.is_empty() {
        return Ok(summary);
    }
    let samples = grid.load_samples()?;
    let train = train_split(&samples);
    let test = test_split(&samples);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract(format!(
            "{} has {} training and {} test samples",
            grid.dataset.dir_name(),
            train.len(),
            test.len()
        )));
    }
    let mut labels: BTreeMap<String, Vec<TrainItem>> = BTreeMap::new();
    for cell in pending {
        log::info!("grid {}: cell {}", grid.name, cell.dir_name());
        let outcome =
            training_items(grid, &cell, &train, &mut labels).and_then(|items| run_cell(grid, &cell, items, &test));
        let dir = grid.cell_dir(&cell);
        match outcome {
            Ok(result) => {
                write_json(&dir.join(ExperimentGrid::RESULT_FILE), &result)?;
                let stale = dir.join(ExperimentGrid::FAILURE_FILE);
                if stale.is_file() {
                    std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
                }
                summary.ran.push(cell);
            }
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell.dir_name());
                write_json(
                    &dir.join(ExperimentGrid::FAILURE_FILE),
                    &CellFailure {
                        cell,
                        error: e.to_string(),
                    },
                )?;
                summary.failed.push((cell, e.to_string()));
            }
        }
    }
    Ok(summary)
}

/// Training items for a cell. Erased labels are made once per (ratio, seed),
/// stored under the grid's `labels/` directory and shared by every K.
fn training_items<'a>(
    grid: &ExperimentGrid,
    cell: &Cell,
    train: &[&RetinalSample],
    cache: &'a mut BTreeMap<String, Vec<TrainItem>>,
) -> Result<&'a [TrainItem]> {
    let run = cell.labels_run();
    if !cache.contains_key(&run) {
        let source = label_source(cell.ratio, cell.seed, grid.thin_keep_fraction);
        let store = MapStore::new(grid.grid_dir().join("labels"));
        let stored = matches!(source, LabelSource::Erased { .. })
            && train.iter().all(|s| store.contains(&run, MapKind::ErasedLabel, &s.id));
        let items = if stored {
            let mut items = Vec::with_capacity(train.len());
            for s in train {
                let MapData::Binary(label) = store.load(&run, &s.id, MapKind::ErasedLabel)?.data else {
                    return Err(Error::Integrity(format!("erased label for {} is not binary", s.id)));
                };
                items.push(TrainItem {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    label,
                });
            }
            items
        } else {
            let (items, records) = prepare_items(train, &source)?;
            if let Some(e) = source.erasure() {
                for it in &items {
                    store.save(&StoredMap {
                        sample_id: it.id.clone(),
                        kind: MapKind::ErasedLabel,
                        data: MapData::Binary(it.label.clone()),
                        meta: MapMeta {
                            run: run.clone(),
                            fold: None,
                            params: [
                                ("ratio".to_string(), serde_json::json!(e.ratio)),
                                (
                                    "thin_keep_fraction".to_string(),
                                    serde_json::json!(e.thin_keep_fraction),
                                ),
                                ("seed".to_string(), serde_json::json!(e.seed)),
                            ]
                            .into_iter()
                            .collect(),
                        },
                    })?;
                }
                write_json(&store.root().join(&run).join("records.json"), &records)?;
            }
            items
        };
        cache.insert(run.clone(), items);
    }
    Ok(&cache[&run])
}

fn run_cell(grid: &ExperimentGrid, cell: &Cell, items: &[TrainItem], test: &[&RetinalSample]) -> Result<CellResult> {
    let dir = grid.cell_dir(cell);
    let cfg = grid.cell_config(cell);
    let run_dir = dir.join("run");
    let mut manifest = run_sgl(items, &cfg, &run_dir)?;
    let model = Model::load(&manifest.final_model.checkpoint)?;
    let store = MapStore::new(dir.join("maps"));
    // Evaluation is always against the clean test labels.
    let report = evaluate_model(
        &model,
        test,
        grid.threshold,
        grid.fov,
        Some(MapSink {
            store: &store,
            run: "test",
        }),
    )?;
    let logs = manifest
        .members
        .iter()
        .chain([&manifest.final_model])
        .filter_map(|m| m.log.as_ref());
    let (train_seconds, train_steps) = logs.fold((0.0, 0), |(s, n), l| (s + l.seconds, n + l.steps));
    manifest.metrics = Some(report.clone());
    write_json(&run_dir.join(RunManifest::FILE), &manifest)?;
    Ok(CellResult {
        cell: *cell,
        report,
        train_seconds,
        train_steps,
    })
}

/// One (ratio, K) line of a table; values are averaged over the seeds that
/// finished.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub ratio: f64,
    pub k: usize,
    pub seeds: usize,
    pub values: Option<[f64; 6]>,
}

pub fn table_rows(grid: &ExperimentGrid, states: &[(Cell, CellState)]) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = Vec::new();
    let mut sums: Vec<[f64; 6]> = Vec::new();
    for (cell, state) in states {
        let idx = match rows.iter().position(|r| r.ratio == cell.ratio && r.k == cell.k) {
            Some(i) => i,
            None => {
                rows.push(TableRow {
                    ratio: cell.ratio,
                    k: cell.k,
                    seeds: 0,
                    values: None,
                });
                sums.push([0.0; 6]);
                rows.len() - 1
            }
        };
        if let CellState::Done(result) = state {
            let v = grid.aggregation.pick(&result.report).values();
            sums[idx].iter_mut().zip(v).for_each(|(s, x)| *s += x);
            rows[idx].seeds += 1;
        }
    }
    for (row, sum) in rows.iter_mut().zip(sums) {
        if row.seeds > 0 {
            row.values = Some(sum.map(|s| s / row.seeds as f64));
        }
    }
    rows
}

/// Text table in grid order with a gap marker for cells without results.
pub fn render_table(grid: &ExperimentGrid, rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} ({} aggregation, threshold {}{})",
        grid.dataset.dir_name(),
        grid.aggregation.name(),
        grid.threshold,
        if grid.fov { ", field of view" } else { "" }
    );
    let _ = write!(s, "{:<6}{:>4}", "r", "K");
    for c in COLUMNS {
        let _ = write!(s, "{c:>13}");
    }
    s.push('\n');
    for row in rows {
        let _ = write!(s, "{:<6.2}{:>4}", row.ratio, row.k);
        match row.values {
            Some(v) => v.iter().for_each(|x| {
                let _ = write!(s, "{x:>13.4}");
            }),
            None => (0..6).for_each(|_| {
                let _ = write!(s, "{GAP:>13}");
            }),
        }
        s.push('\n');
    }
    s
}

/// Writes `tables.txt` into the report directory and returns its text.
pub fn emit_tables(grid: &ExperimentGrid) -> Result<String> {
    let text = render_table(grid, &table_rows(grid, &grid.states()?));
    let dir = grid.report_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("tables.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMetric {
    Dice,
    Auc,
}

impl CurveMetric {
    fn column(self) -> usize {
        match self {
            CurveMetric::Dice => 4,
            CurveMetric::Auc => 1,
        }
    }

    fn label(self) -> &'static str {
        COLUMNS[self.column()]
    }
}

/// Metric against K, one series per ratio, taken from the table rows.
pub fn curve_series(rows: &[TableRow], metric: CurveMetric) -> Vec<(f64, Vec<(usize, f64)>)> {
    let mut out: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    for row in rows {
        let Some(v) = row.values else { continue };
        let point = (row.k, v[metric.column()]);
        match out.iter_mut().find(|(r, _)| *r == row.ratio) {
            Some((_, pts)) => pts.push(point),
            None => out.push((row.ratio, vec![point])),
        }
    }
    out
}

/// Writes `<dataset>_<metric>.svg` into the report directory.
pub fn emit_curves(grid: &ExperimentGrid, metric: CurveMetric) -> Result<PathBuf> {
    let rows = table_rows(grid, &grid.states()?);
    let series = curve_series(&rows, metric);
    let dir = grid.report_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!(
        "{}_{}.svg",
        grid.dataset.dir_name(),
        metric.label().to_lowercase()
    ));
    draw_curves(&path, grid, &series, metric).map_err(|e| Error::Plot(e.to_string()))?;
    Ok(path)
}

fn draw_curves(
    path: &Path,
    grid: &ExperimentGrid,
    series: &[(f64, Vec<(usize, f64)>)],
    metric: CurveMetric,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let ks: Vec<usize> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let (kmin, kmax) = (
        ks.iter().copied().min().unwrap_or(1) as f64,
        ks.iter().copied().max().unwrap_or(8) as f64,
    );
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let (ymin, ymax) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let (ylo, yhi) = if ys.is_empty() {
        (0.0, 1.0)
    } else {
        ((ymin - 0.02).max(0.0), (ymax + 0.02).min(1.0))
    };

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{} {} vs K", grid.dataset.dir_name(), metric.label()),
            ("sans-serif", 20),
        )
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d((kmin / 1.5..kmax * 1.5).log_scale(), ylo..yhi)?;
    chart
        .configure_mesh()
        .x_desc("K")
        .y_desc(metric.label())
        .x_label_formatter(&|k| format!("{k:.0}"))
        .y_label_formatter(&|v| format!("{v:.3}"))
        .draw()?;
    for (i, (ratio, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = points.iter().map(|&(k, v)| (k as f64, v)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
            .label(format!("r = {ratio:.2}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))?;
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

const TP: [f32; 3] = [1.0, 1.0, 1.0];
const TN: [f32; 3] = [0.0, 0.0, 0.0];
const FN: [f32; 3] = [1.0, 0.0, 0.0];
const FP: [f32; 3] = [0.0, 1.0, 0.0];

/// Four images side by side: raw, enhancement, probability, and the
/// thresholded map with misses in red and false alarms in green.
pub fn render_panel(raw: &RgbImage, enhanced: &RgbImage, prob: &Plane, gt: &Mask, threshold: f32) -> Result<RgbImage> {
    let (w, h) = raw.dims();
    if enhanced.dims() != (w, h) || prob.dims() != (w, h) || gt.dims() != (w, h) {
        return Err(Error::Shape("panel inputs differ in size".into()));
    }
    let pred = binarize(prob, threshold)?;
    Ok(RgbImage::from_fn(4 * w, h, |x, y| {
        let (col, px) = (x / w, x % w);
        match col {
            0 => raw.get(px, y),
            1 => enhanced.get(px, y),
            2 => [prob.get(px, y); 3],
            _ => match (pred.get(px, y), gt.get(px, y)) {
                (true, true) => TP,
                (false, false) => TN,
                (false, true) => FN,
                (true, false) => FP,
            },
        }
    }))
}

/// Writes one panel PNG per sample of a finished cell to
/// `<report_dir>/panels/<cell>/<sample>.png`.
pub fn emit_panels(grid: &ExperimentGrid, cell: &Cell, sample_ids: &[String]) -> Result<Vec<PathBuf>> {
    if !matches!(grid.state(cell)?, CellState::Done(_)) {
        return Err(Error::NotFound(format!("no finished run for cell {}", cell.dir_name())));
    }
    let samples = grid.load_samples()?;
    let store = MapStore::new(grid.cell_dir(cell).join("maps"));
    let out = grid.report_dir().join("panels").join(cell.dir_name());
    let mut written = Vec::new();
    for id in sample_ids {
        let s = samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::NotFound(format!("sample {id}")))?;
        if !store.contains("test", MapKind::Probability, id) {
            return Err(Error::NotFound(format!(
                "no prediction for sample {id} in cell {}",
                cell.dir_name()
            )));
        }
        let MapData::Gray(prob) = store.load("test", id, MapKind::Probability)?.data else {
            return Err(Error::Integrity(format!("probability map of {id} is not gray")));
        };
        let MapData::Rgb(enh) = store.load("test", id, MapKind::Enhancement)?.data else {
            return Err(Error::Integrity(format!("enhancement map of {id} is not RGB")));
        };
        let panel = render_panel(&s.image, &enh, &prob, &s.label, grid.threshold)?;
        let path = out.join(format!("{id}.png"));
        imageio::write_rgb8(&path, &panel)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Confusion, ImageRow};

    fn done(cell: Cell, dice: f64) -> (Cell, CellState) {
        let m = Metrics {
            accuracy: 0.9,
            auc: 0.95,
            sensitivity: 0.8,
            specificity: 0.97,
            dice,
            vessel_iou: dice / (2.0 - dice),
            counts: Confusion::default(),
        };
        let report = MetricsReport {
            threshold: 0.5,
            fov: false,
            rows: vec![ImageRow {
                sample_id: "01".into(),
                metrics: m,
            }],
            micro: m,
            macro_: m,
        };
        (
            cell,
            CellState::Done(Box::new(CellResult {
                cell,
                report,
                train_seconds: 0.0,
                train_steps: 0,
            })),
        )
    }

    #[test]
    fn default_grid_has_sixteen_cells_in_order() {
        let g = ExperimentGrid {
            ratios: vec![0.5, 1.0, 0.7, 0.9],
            ks: vec![8, 1, 4, 2],
            ..Default::default()
        };
        let cells = g.cells();
        assert_eq!(cells.len(), 16);
        assert_eq!((cells[0].ratio, cells[0].k), (1.0, 1));
        assert_eq!((cells[3].ratio, cells[3].k), (1.0, 8));
        assert_eq!((cells[15].ratio, cells[15].k), (0.5, 8));
    }

    #[test]
    fn cell_names_round_trip() {
        let c = Cell {
            ratio: 0.7,
            k: 4,
            seed: 3,
        };
        assert_eq!(c.dir_name(), "r0.70_k4_s3");
        assert_eq!(Cell::parse("r0.70_k4_s3").unwrap(), c);
        assert!(Cell::parse("r0.7_k4").is_err());
    }

    #[test]
    fn empty_grid_table_is_header_only() {
        let g = ExperimentGrid {
            ratios: vec![],
            ..Default::default()
        };
        let t = render_table(&g, &table_rows(&g, &[]));
        assert_eq!(t.lines().count(), 2);
        assert!(t.lines().nth(1).unwrap().contains("Vessel-IoU"));
    }

    #[test]
    fn gaps_are_marked_and_values_shared_with_curves() {
        let g = ExperimentGrid {
            ratios: vec![1.0],
            ks: vec![1, 2],
            ..Default::default()
        };
        let states = vec![
            done(
                Cell {
                    ratio: 1.0,
                    k: 1,
                    seed: 0,
                },
                0.8,
            ),
            (
                Cell {
                    ratio: 1.0,
                    k: 2,
                    seed: 0,
                },
                CellState::Pending,
            ),
        ];
        let rows = table_rows(&g, &states);
        let t = render_table(&g, &rows);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[2].contains("0.8000"));
        assert_eq!(lines[3].matches(GAP).count(), 6);
        let series = curve_series(&rows, CurveMetric::Dice);
        assert_eq!(series, vec![(1.0, vec![(1, 0.8)])]);
    }

    #[test]
    fn seeds_are_averaged() {
        let g = ExperimentGrid {
            ratios: vec![0.7],
            ks: vec![4],
            seeds: vec![0, 1],
            ..Default::default()
        };
        let states = vec![
            done(
                Cell {
                    ratio: 0.7,
                    k: 4,
                    seed: 0,
                },
                0.8,
            ),
            done(
                Cell {
                    ratio: 0.7,
                    k: 4,
                    seed: 1,
                },
                0.7,
            ),
        ];
        let rows = table_rows(&g, &states);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].seeds, 2);
        assert!((rows[0].values.unwrap()[4] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn panel_colors() {
        let raw = RgbImage::from_fn(3, 1, |_, _| [0.2, 0.3, 0.4]);
        let gt = Mask::from_fn(3, 1, |x, _| x < 2);
        let prob = Plane::from_vec(3, 1, vec![0.9, 0.1, 0.7]).unwrap();
        let p = render_panel(&raw, &raw, &prob, &gt, 0.5).unwrap();
        assert_eq!(p.dims(), (12, 1));
        assert_eq!(p.get(9, 0), TP);
        assert_eq!(p.get(10, 0), FN);
        assert_eq!(p.get(11, 0), FP);
        assert_eq!(p.get(6, 0), [0.9; 3]);
    }

    #[test]
    fn grid_toml_defaults() {
        let g: ExperimentGrid =
            toml::from_str("name = \"small\"\nks = [1, 2]\n[training]\nmember_epochs = 3\n").unwrap();
        assert_eq!(g.ratios, vec![1.0, 0.9, 0.7, 0.5]);
        assert_eq!(g.training.member_epochs, 3);
        assert_eq!(g.training.final_epochs, 100);
        assert_eq!(g.cells().len(), 8);
    }
}
