//! Full-image inference and segmentation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{crop_back, crop_back_rgb, pad_to_grid};
use crate::dataset::{MapData, MapKind, MapMeta, MapStore, RetinalSample, StoredMap};
use crate::error::{Error, Result};
use crate::nn::Segmenter;
use crate::raster::{Mask, Plane, RgbImage};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Pads to the 16-pixel grid, runs the model and crops both maps back.
pub fn predict_full(model: &dyn Segmenter, image: &RgbImage) -> Result<(Plane, RgbImage)> {
    let (padded, spec) = pad_to_grid(image);
    let (enh, prob) = model.predict(&padded)?;
    Ok((crop_back(&prob, &spec)?, crop_back_rgb(&enh, &spec)?))
}

/// Pixel is on iff `prob >= threshold`.
pub fn binarize(prob: &Plane, threshold: f32) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(prob.threshold(threshold))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// `num / den`, with `0 / 0` read as full agreement.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub dice: f64,
    pub vessel_iou: f64,
    pub counts: Confusion,
}

impl Metrics {
    pub fn from_counts(c: Confusion, auc: f64) -> Self {
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            auc,
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            vessel_iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            counts: c,
        }
    }

    /// The six reported values in table order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.auc,
            self.sensitivity,
            self.specificity,
            self.dice,
            self.vessel_iou,
        ]
    }
}

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "auc", "sensitivity", "specificity", "dice", "vessel_iou"];

fn check_dims(a: (usize, usize), b: (usize, usize), region: Option<&Mask>) -> Result<()> {
    if a != b || region.is_some_and(|r| r.dims() != a) {
        return Err(Error::Shape(format!("prediction {a:?} vs ground truth {b:?}")));
    }
    Ok(())
}

/// Confusion counts over the region pixels (all pixels by default).
pub fn confusion_metrics(pred: &Mask, gt: &Mask, region: Option<&Mask>) -> Result<Confusion> {
    check_dims(pred.dims(), gt.dims(), region)?;
    let mut c = Confusion::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if region.is_some_and(|r| r.data()[i] == 0) {
            continue;
        }
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::UndefinedMetric("evaluation region is empty".into()));
    }
    Ok(c)
}

/// Rank statistic over `(score, is_vessel)` pairs with ties counted 1/2.
pub fn auc_from_scores(mut scored: Vec<(f32, bool)>) -> Result<f64> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = scored.iter().filter(|s| s.1).count() as f64;
    let neg = scored.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both vessel and background pixels".into(),
        ));
    }
    let mut acc = 0.0f64;
    let mut neg_below = 0.0f64;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        let (mut p, mut q) = (0.0, 0.0);
        while j < scored.len() && scored[j].0 == scored[i].0 {
            if scored[j].1 {
                p += 1.0;
            } else {
                q += 1.0;
            }
            j += 1;
        }
        acc += p * neg_below + 0.5 * p * q;
        neg_below += q;
        i = j;
    }
    Ok(acc / (pos * neg))
}

fn region_scores(prob: &Plane, gt: &Mask, region: Option<&Mask>, out: &mut Vec<(f32, bool)>) {
    for (i, (&p, &g)) in prob.data().iter().zip(gt.data()).enumerate() {
        if region.is_none_or(|r| r.data()[i] != 0) {
            out.push((p, g != 0));
        }
    }
}

pub fn auc(prob: &Plane, gt: &Mask, region: Option<&Mask>) -> Result<f64> {
    check_dims(prob.dims(), gt.dims(), region)?;
    let mut scored = Vec::with_capacity(prob.data().len());
    region_scores(prob, gt, region, &mut scored);
    auc_from_scores(scored)
}

/// One image to score.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub prob: &'a Plane,
    pub gt: &'a Mask,
    pub region: Option<&'a Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub sample_id: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f32,
    pub fov: bool,
    pub rows: Vec<ImageRow>,
    /// Pooled counts, AUC over pooled pixels.
    pub micro: Metrics,
    /// Mean of per-image values, summed counts.
    #[serde(rename = "macro")]
    pub macro_: Metrics,
}

/// Scores every image and aggregates both ways.
pub fn evaluate(items: &[EvalItem<'_>], threshold: f32, fov: bool) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(items.len());
    let mut pooled = Vec::new();
    let mut total = Confusion::default();
    for it in items {
        let pred = binarize(it.prob, threshold)?;
        let c = confusion_metrics(&pred, it.gt, it.region)?;
        let a = auc(it.prob, it.gt, it.region)?;
        region_scores(it.prob, it.gt, it.region, &mut pooled);
        total = total.add(&c);
        rows.push(ImageRow {
            sample_id: it.id.to_string(),
            metrics: Metrics::from_counts(c, a),
        });
    }
    let micro = Metrics::from_counts(total, auc_from_scores(pooled)?);
    let macro_ = macro_average(&rows);
    Ok(MetricsReport {
        threshold,
        fov,
        rows,
        micro,
        macro_,
    })
}

/// Pooled counts from per-image rows. AUC cannot be pooled from rows, so the
/// caller supplies it.
pub fn aggregate(rows: &[ImageRow], pooled_auc: f64) -> Result<(Metrics, Metrics)> {
    if rows.is_empty() {
        return Err(Error::Contract("no rows to aggregate".into()));
    }
    let total = rows
        .iter()
        .fold(Confusion::default(), |acc, r| acc.add(&r.metrics.counts));
    Ok((Metrics::from_counts(total, pooled_auc), macro_average(rows)))
}

fn macro_average(rows: &[ImageRow]) -> Metrics {
    let n = rows.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    Metrics {
        accuracy: mean(|m| m.accuracy),
        auc: mean(|m| m.auc),
        sensitivity: mean(|m| m.sensitivity),
        specificity: mean(|m| m.specificity),
        dice: mean(|m| m.dice),
        vessel_iou: mean(|m| m.vessel_iou),
        counts: rows
            .iter()
            .fold(Confusion::default(), |acc, r| acc.add(&r.metrics.counts)),
    }
}

/// Where [`evaluate_model`] keeps the maps it predicts.
pub struct MapSink<'a> {
    pub store: &'a MapStore,
    pub run: &'a str,
}

/// Runs `model` over `samples` and scores the result against their labels.
/// With `fov`, samples lacking a field-of-view mask are scored over all
/// pixels.
pub fn evaluate_model(
    model: &dyn Segmenter,
    samples: &[&RetinalSample],
    threshold: f32,
    fov: bool,
    sink: Option<MapSink<'_>>,
) -> Result<MetricsReport> {
    let mut probs = Vec::with_capacity(samples.len());
    for s in samples {
        let (prob, enh) = predict_full(model, &s.image)?;
        if let Some(sink) = &sink {
            let meta = MapMeta {
                run: sink.run.to_string(),
                fold: None,
                params: Default::default(),
            };
            for (kind, data) in [
                (MapKind::Probability, MapData::Gray(prob.clone())),
                (MapKind::Enhancement, MapData::Rgb(enh)),
            ] {
                sink.store.save(&StoredMap {
                    sample_id: s.id.clone(),
                    kind,
                    data,
                    meta: meta.clone(),
                })?;
            }
        }
        probs.push(prob);
    }
    let items: Vec<EvalItem<'_>> = samples
        .iter()
        .zip(&probs)
        .map(|(s, prob)| EvalItem {
            id: &s.id,
            prob,
            gt: &s.label,
            region: if fov { s.fov.as_ref() } else { None },
        })
        .collect();
    evaluate(&items, threshold, fov)
}

impl MetricsReport {
    /// Tab-separated per-image rows followed by `micro` and `macro` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sample");
        for n in METRIC_NAMES {
            s.push('\t');
            s.push_str(n);
        }
        s.push_str("\ttp\tfp\ttn\tfn\n");
        let mut line = |id: &str, m: &Metrics| {
            let _ = write!(s, "{id}");
            for v in m.values() {
                let _ = write!(s, "\t{v:.6}");
            }
            let c = m.counts;
            let _ = writeln!(s, "\t{}\t{}\t{}\t{}", c.tp, c.fp, c.tn, c.fn_);
        };
        for r in &self.rows {
            line(&r.sample_id, &r.metrics);
        }
        line("micro", &self.micro);
        line("macro", &self.macro_);
        s
    }
}
