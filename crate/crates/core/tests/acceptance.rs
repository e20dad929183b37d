//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIP line per
//! criterion and fails if any criterion that ran did not pass.
//!
//! Set `VESSEL_DATA_ROOT` to a directory holding `DRIVE/` and `CHASE_DB1/`
//! to run the erasure check on the real labels and the full-scale run.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_core::augment::{crop_back_rgb, grid_multiple, pad_to_grid, AugmentationConfig, ElasticConfig};
use vessel_core::dataset::{load_dataset, train_split, DatasetId};
use vessel_core::eval::{auc, binarize, confusion_metrics, predict_full, Metrics};
use vessel_core::forge::{erase_with_graph, ErasureConfig, VesselGraph};
use vessel_core::nn::{joint_bce, loss_bce, Model, ModelConfig, OptimizerConfig, Segmenter};
use vessel_core::raster::{Mask, Plane, RgbImage};
use vessel_core::report::{
    emit_curves, emit_panels, emit_tables, run_grid, Cell, CellState, CurveMetric, ExperimentGrid, GAP,
};
use vessel_core::sgl::{check_no_leakage, infer_pseudo, split_folds, train_model, PseudoForm, SglConfig, TrainItem};
use vessel_core::synth::{synth_fundus, write_drive_layout, SynthConfig};

mod common;
use common::{brute_auc, brute_counts, gradient_check, random_case};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os("VESSEL_DATA_ROOT").map(PathBuf::from)
}

/// Written straight to stderr so the lines show up under the test
/// harness's output capture.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn run(n: usize, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Option<Check>) -> Verdict {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let verdict = match outcome {
        Ok(None) => Verdict::Skip("needs VESSEL_DATA_ROOT".into()),
        Ok(Some(Ok(detail))) => match limit {
            Some(l) if took > l => Verdict::Fail(format!("{detail}; took {took:.1?}, limit {l:?}")),
            _ => Verdict::Pass(detail),
        },
        Ok(Some(Err(e))) => Verdict::Fail(e),
        Err(panic) => Verdict::Fail(
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    let (tag, detail) = match &verdict {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => ("FAIL", d),
        Verdict::Skip(d) => ("SKIP", d),
    };
    report(&format!("{tag} [{n}] {title} ({took:.1?}): {detail}"));
    verdict
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (prob, gt) = random_case(&mut rng, 32, 32);
        let pred = binarize(&prob, 0.5).map_err(|e| e.to_string())?;
        let counts = confusion_metrics(&pred, &gt, None).map_err(|e| e.to_string())?;
        ensure!(
            counts == brute_counts(&pred, &gt),
            "pair {i}: counts {counts:?} differ from the oracle"
        );
        let a = auc(&prob, &gt, None).map_err(|e| e.to_string())?;
        worst = worst.max((a - brute_auc(&prob, &gt)).abs());
    }
    ensure!(worst <= 1e-9, "AUC differs from the pair oracle by {worst:e}");
    Ok(format!("200 pairs, counts exact, max AUC error {worst:.1e}"))
}

/// Training labels of DRIVE when available, else 20 synthetic DRIVE-sized
/// labels.
fn drive_training_labels() -> Result<(String, Vec<(String, Mask)>), String> {
    if let Some(root) = data_root() {
        let samples = load_dataset(&root, DatasetId::Drive).map_err(|e| e.to_string())?;
        let labels = train_split(&samples)
            .iter()
            .map(|s| (s.id.clone(), s.label.clone()))
            .collect();
        return Ok(("DRIVE training labels".into(), labels));
    }
    let cfg = SynthConfig::drive(7);
    let labels = (0..20u64)
        .map(|i| (format!("{}_training", 21 + i), synth_fundus(&cfg, 1000 + i).label))
        .collect();
    Ok(("20 synthetic 565x584 labels".into(), labels))
}

fn erasure_properties() -> Check {
    let (source, labels) = drive_training_labels()?;
    let ratios = [0.0, 0.3, 0.5, 0.7, 0.9, 1.0];
    let mut fraction = BTreeMap::new();
    let mut pixels = 0usize;
    for (id, label) in &labels {
        pixels += label.width() * label.height();
        let graph = VesselGraph::build(label);
        let mut previous: Option<Mask> = None;
        for &ratio in &ratios {
            let erase = |thin_keep_fraction| {
                erase_with_graph(
                    &graph,
                    label,
                    &ErasureConfig {
                        ratio,
                        thin_keep_fraction,
                        seed: 0,
                    },
                    id,
                )
                .map_err(|e| e.to_string())
            };
            let noisy = erase(0.5)?;
            ensure!(noisy.mask.is_subset_of(label), "{id}: r = {ratio} adds pixels");
            *fraction.entry((ratio * 10.0) as u32).or_insert(0usize) += noisy.mask.count();
            if ratio == 1.0 {
                ensure!(noisy.mask == *label, "{id}: r = 1 does not reproduce the label");
            }
            let strict = erase(0.0)?;
            ensure!(strict.mask.is_subset_of(label), "{id}: r = {ratio} adds pixels");
            if let Some(prev) = &previous {
                ensure!(prev.is_subset_of(&strict.mask), "{id}: not monotone at r = {ratio}");
            }
            previous = Some(strict.mask);
        }
    }
    let f = |r: u32| fraction[&r] as f64 / pixels as f64;
    ensure!(
        f(3) < f(7),
        "foreground at r = 0.3 ({}) is not below r = 0.7 ({})",
        f(3),
        f(7)
    );
    Ok(format!(
        "{source}; foreground {:.4} at r = 0.3, {:.4} at r = 0.7, {:.4} at r = 1",
        f(3),
        f(7),
        f(10)
    ))
}

fn padding_arithmetic() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut parts = Vec::new();
    for (id, m) in [(DatasetId::Drive, 37), (DatasetId::ChaseDb1, 63)] {
        let (w, h) = id.native_dims();
        ensure!(
            grid_multiple(w, h) == m,
            "{id}: m = {} instead of {m}",
            grid_multiple(w, h)
        );
        let img = RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let (padded, spec) = pad_to_grid(&img);
        ensure!(padded.dims() == (16 * m, 16 * m), "{id}: padded to {:?}", padded.dims());
        let back = crop_back_rgb(&padded, &spec).map_err(|e| e.to_string())?;
        ensure!(back == img, "{id}: crop after pad changed the image");
        parts.push(format!("{id} m = {m} ({}x{})", 16 * m, 16 * m));
    }
    Ok(parts.join(", ") + ", round trip exact")
}

fn gradients() -> Check {
    let plain = gradient_check(false);
    let concat = gradient_check(true);
    let worst = plain.max(concat);
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.1e} in f64"))
}

struct Stub {
    value: f32,
    trained_on: Vec<String>,
}

impl Segmenter for Stub {
    fn predict(&self, image: &RgbImage) -> vessel_core::Result<(RgbImage, Plane)> {
        let (w, h) = image.dims();
        Ok((image.clone(), Plane::filled(w, h, self.value)))
    }

    fn trained_on(&self) -> &[String] {
        &self.trained_on
    }
}

fn sgl_bookkeeping() -> Check {
    let ids: Vec<String> = (21..=40).map(|i| format!("{i}_training")).collect();
    let images: BTreeMap<String, RgbImage> = ids.iter().map(|id| (id.clone(), RgbImage::new(16, 16))).collect();
    let refs: BTreeMap<String, &RgbImage> = images.iter().map(|(k, v)| (k.clone(), v)).collect();
    for k in [2usize, 4, 8] {
        for seed in 0..5u64 {
            let a = split_folds(&ids, k, seed).map_err(|e| e.to_string())?;
            a.validate(&ids).map_err(|e| e.to_string())?;
            let members: Vec<Stub> = (0..k)
                .map(|f| Stub {
                    value: f as f32 / k as f32,
                    trained_on: a.complement(f),
                })
                .collect();
            let dyn_members: Vec<&dyn Segmenter> = members.iter().map(|m| m as &dyn Segmenter).collect();
            let set = infer_pseudo(&a, &dyn_members, &refs, PseudoForm::Soft).map_err(|e| e.to_string())?;
            ensure!(set.maps.len() == ids.len(), "K = {k}: {} pseudo labels", set.maps.len());
            for id in &ids {
                let f = set.producer[id];
                ensure!(a.fold_of(id) == Some(f), "K = {k}: {id} labelled by member {f}");
                ensure!(!members[f].trained_on.contains(id), "K = {k}: member {f} saw {id}");
            }
            let trained: Vec<Vec<String>> = members.iter().map(|m| m.trained_on.clone()).collect();
            check_no_leakage(&set.producer, &trained).map_err(|e| e.to_string())?;
            // A member that trained on everything must be caught.
            let mut leaky = trained.clone();
            leaky[0] = ids.clone();
            ensure!(
                check_no_leakage(&set.producer, &leaky).is_err(),
                "K = {k}: leakage not detected"
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 256;
        let p: Vec<f32> = (0..n).map(|_| rng.gen_range(0.001f32..0.999)).collect();
        let y: Vec<f32> = (0..n).map(|_| rng.gen_bool(0.15) as u8 as f32).collect();
        let q: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let lambda = rng.gen_range(0.0..3.0);
        let err = |e: vessel_core::Error| e.to_string();
        let lhs = joint_bce(&p, &y, &q, lambda).map_err(err)?;
        let rhs = joint_bce(&p, &y, &q, 0.0).map_err(err)? + lambda * loss_bce(&p, &q, None).map_err(err)?;
        worst = worst.max((lhs - rhs).abs());
    }
    ensure!(worst <= 1e-6, "decomposition off by {worst:e}");
    Ok(format!(
        "K in {{2, 4, 8}} x 5 seeds: folds and leakage hold; loss decomposition error {worst:.1e}"
    ))
}

fn dice_of(model: &dyn Segmenter, image: &RgbImage, label: &Mask) -> Result<f64, String> {
    let (prob, _) = predict_full(model, image).map_err(|e| e.to_string())?;
    let pred = binarize(&prob, 0.5).map_err(|e| e.to_string())?;
    let c = confusion_metrics(&pred, label, None).map_err(|e| e.to_string())?;
    Ok(Metrics::from_counts(c, 0.5).dice)
}

fn smoke_training() -> Check {
    // Single image overfit.
    let s = synth_fundus(
        &SynthConfig {
            width: 64,
            height: 64,
            seed: 1,
        },
        0,
    );
    let items = vec![TrainItem {
        id: "single".into(),
        image: s.image.clone(),
        label: s.label.clone(),
    }];
    let cfg = SglConfig {
        optimizer: OptimizerConfig {
            batch_size: 1,
            lr: 3e-3,
            ..OptimizerConfig::default()
        },
        model: ModelConfig {
            base_channels: 8,
            ..ModelConfig::default()
        },
        augmentation: AugmentationConfig::identity(64),
        ..SglConfig::default()
    };
    let (ck, _) =
        train_model(&items, None, 0.0, 300, &cfg, "final", vec!["single".into()], None).map_err(|e| e.to_string())?;
    let model = Model::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let overfit = dice_of(&model, &s.image, &s.label)?;
    ensure!(overfit > 0.95, "single-image training DICE {overfit:.4}");

    // Downscaled grid: one cell, K = 2, 128 px crops.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_drive_layout(
        &tmp.path().join("data"),
        &SynthConfig {
            width: 160,
            height: 160,
            seed: 4,
        },
        4,
        2,
    )
    .map_err(|e| e.to_string())?;
    let grid = ExperimentGrid {
        name: "smoke".into(),
        data_root: tmp.path().join("data"),
        enforce_native_size: false,
        ratios: vec![0.7],
        ks: vec![2],
        runs_dir: tmp.path().join("runs"),
        reports_dir: tmp.path().join("reports"),
        training: SglConfig {
            member_epochs: 10,
            final_epochs: 10,
            optimizer: OptimizerConfig {
                batch_size: 4,
                lr: 2e-3,
                ..OptimizerConfig::default()
            },
            model: ModelConfig {
                base_channels: 8,
                ..ModelConfig::default()
            },
            augmentation: AugmentationConfig {
                crop: 128,
                elastic: ElasticConfig {
                    alpha: 8.0,
                    sigma: 4.0,
                    probability: 0.3,
                },
                ..AugmentationConfig::default()
            },
            ..SglConfig::default()
        },
        ..ExperimentGrid::default()
    };
    let summary = run_grid(&grid).map_err(|e| e.to_string())?;
    ensure!(summary.failed.is_empty(), "cell failed: {:?}", summary.failed);
    let cell = Cell {
        ratio: 0.7,
        k: 2,
        seed: 0,
    };
    let CellState::Done(result) = grid.state(&cell).map_err(|e| e.to_string())? else {
        return Err("cell has no result".into());
    };
    let table = emit_tables(&grid).map_err(|e| e.to_string())?;
    ensure!(!table.contains(GAP), "table has gaps:\n{table}");
    ensure!(table.contains("0.70"), "table lacks the cell row:\n{table}");
    for metric in [CurveMetric::Dice, CurveMetric::Auc] {
        let svg = emit_curves(&grid, metric).map_err(|e| e.to_string())?;
        ensure!(svg.is_file(), "no curve at {}", svg.display());
    }
    let panels = emit_panels(&grid, &cell, &["01_test".into()]).map_err(|e| e.to_string())?;
    ensure!(panels.iter().all(|p| p.is_file()), "panel missing");
    let m = result.report.micro;
    ensure!(m.values().iter().all(|v| v.is_finite()), "non-finite metrics {m:?}");
    Ok(format!(
        "overfit DICE {overfit:.4}; K = 2 cell DICE {:.4} AUC {:.4} after {} steps in {:.0}s, report written",
        m.dice, m.auc, result.train_steps, result.train_seconds
    ))
}

/// Runs the published setups from `VESSEL_DATA_ROOT`. Results are kept in
/// `<root>/acceptance_runs` so an interrupted run resumes.
fn full_scale() -> Option<Check> {
    let root = data_root()?;
    Some((|| {
        let grid = |name: &str, dataset, ratios: Vec<f64>, ks: Vec<usize>| ExperimentGrid {
            name: name.into(),
            dataset,
            data_root: root.clone(),
            ratios,
            ks,
            runs_dir: root.join("acceptance_runs"),
            reports_dir: root.join("acceptance_reports"),
            ..ExperimentGrid::default()
        };
        let drive = grid("drive", DatasetId::Drive, vec![1.0, 0.7], vec![1, 8]);
        let chase = grid("chase", DatasetId::ChaseDb1, vec![1.0], vec![8]);
        let mut parts = Vec::new();
        let mut fails = Vec::new();
        let micro = |g: &ExperimentGrid, ratio: f64, k: usize| -> Result<Metrics, String> {
            run_grid(g).map_err(|e| e.to_string())?;
            match g.state(&Cell { ratio, k, seed: 0 }).map_err(|e| e.to_string())? {
                CellState::Done(r) => Ok(r.report.micro),
                CellState::Failed(e) => Err(e),
                CellState::Pending => Err("cell did not run".into()),
            }
        };
        for (g, dice, auc_target) in [(&drive, 0.8316, 0.9886), (&chase, 0.8271, 0.9920)] {
            let m = micro(g, 1.0, 8)?;
            parts.push(format!("{} K = 8 DICE {:.4} AUC {:.4}", g.dataset, m.dice, m.auc));
            if (m.dice - dice).abs() > 0.01 || (m.auc - auc_target).abs() > 0.003 {
                fails.push(format!("{} off target ({dice}, {auc_target})", g.dataset));
            }
        }
        let k8 = micro(&drive, 0.7, 8)?;
        let k1 = micro(&drive, 0.7, 1)?;
        parts.push(format!("r = 0.7 DICE K = 8 {:.4} vs K = 1 {:.4}", k8.dice, k1.dice));
        if k8.dice <= k1.dice {
            fails.push("no gain from K = 8 at r = 0.7".into());
        }
        let text = parts.join("; ");
        if fails.is_empty() {
            Ok(text)
        } else {
            Err(format!("{text}; {}", fails.join("; ")))
        }
    })())
}

#[test]
fn acceptance() {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let verdicts = [
        run(1, "metric oracles", min(1), || Some(metric_oracles())),
        run(2, "erasure properties", min(10), || Some(erasure_properties())),
        run(3, "padding arithmetic", min(1), || Some(padding_arithmetic())),
        run(4, "gradient check", min(5), || Some(gradients())),
        run(5, "study group bookkeeping", min(1), || Some(sgl_bookkeeping())),
        run(6, "smoke training", min(15), || Some(smoke_training())),
        run(7, "full-scale reproduction", None, full_scale),
    ];
    let failed = verdicts.iter().filter(|v| matches!(v, Verdict::Fail(_))).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
