//! Study-group training: K-fold member models label their held-out folds,
//! then a final model trains on the labels plus those pseudo labels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_patch, AugmentationConfig};
use crate::dataset::{read_json, write_json, MapData, MapKind, MapMeta, MapStore, RetinalSample, StoredMap};
use crate::error::{Error, Result};
use crate::eval::{predict_full, MetricsReport};
use crate::forge::{erase_with_graph, sample_rng, ErasureConfig, ForgeRecord, VesselGraph};
use crate::nn::{
    bce_logits, Adam, Model, ModelCheckpoint, ModelConfig, NetworkCache, OptimizerConfig, Segmenter, Tensor,
};
use crate::raster::{Mask, Plane, RgbImage};

/// Reproducible 64-bit seed for a named sub-task.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    sample_rng(seed, tag).next_u64()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|s| s == id))
    }

    /// Every id outside fold `k`, sorted.
    pub fn complement(&self, k: usize) -> Vec<String> {
        let mut v: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        v.sort();
        v
    }

    /// Checks the partition against `ids`.
    pub fn validate(&self, ids: &[String]) -> Result<()> {
        if self.folds.len() != self.k {
            return Err(Error::Integrity(format!(
                "{} folds for K = {}",
                self.folds.len(),
                self.k
            )));
        }
        let mut seen = BTreeSet::new();
        for f in &self.folds {
            for id in f {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Integrity(format!("sample {id} appears in two folds")));
                }
            }
        }
        let all: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        if seen != all {
            return Err(Error::Integrity("folds do not cover the training set".into()));
        }
        let sizes: Vec<usize> = self.folds.iter().map(Vec::len).collect();
        let (lo, hi) = (sizes.iter().min(), sizes.iter().max());
        if let (Some(lo), Some(hi)) = (lo, hi) {
            if hi - lo > 1 {
                return Err(Error::Integrity(format!("fold sizes {sizes:?} differ by more than 1")));
            }
        }
        Ok(())
    }
}

/// Shuffles with `seed` and deals ids round-robin into `k` folds.
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 || k > ids.len() {
        return Err(Error::Parameter(format!(
            "K = {k} needs 1 <= K <= {} training samples",
            ids.len()
        )));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldAssignment { k, folds, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSource {
    Clean,
    Erased {
        ratio: f64,
        seed: u64,
        #[serde(default = "default_thin_keep")]
        thin_keep_fraction: f64,
    },
}

fn default_thin_keep() -> f64 {
    0.5
}

impl LabelSource {
    pub fn erasure(&self) -> Option<ErasureConfig> {
        match *self {
            LabelSource::Clean => None,
            LabelSource::Erased {
                ratio,
                seed,
                thin_keep_fraction,
            } => Some(ErasureConfig {
                ratio,
                thin_keep_fraction,
                seed,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PseudoForm {
    Soft,
    Hard { threshold: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SglConfig {
    pub k: usize,
    pub lambda: f64,
    pub member_epochs: usize,
    pub final_epochs: usize,
    /// Patches drawn per training image per epoch.
    pub patches_per_image: usize,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub augmentation: AugmentationConfig,
    pub label_source: LabelSource,
    pub pseudo_form: PseudoForm,
    /// Fold split seed.
    pub seed: u64,
}

impl Default for SglConfig {
    fn default() -> Self {
        Self {
            k: 8,
            lambda: 1.0,
            member_epochs: 100,
            final_epochs: 100,
            patches_per_image: 8,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            augmentation: AugmentationConfig::default(),
            label_source: LabelSource::Clean,
            pseudo_form: PseudoForm::Soft,
            seed: 0,
        }
    }
}

impl SglConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("K must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.patches_per_image == 0 {
            return Err(Error::Parameter("patches_per_image must be positive".into()));
        }
        if let PseudoForm::Hard { threshold } = self.pseudo_form {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::Parameter(format!("pseudo threshold {threshold} outside (0, 1)")));
            }
        }
        if let Some(e) = self.label_source.erasure() {
            e.validate()?;
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.augmentation.validate()
    }

    /// Optimizer steps for `epochs` passes over `n` images.
    pub fn steps(&self, epochs: usize, n: usize) -> usize {
        (epochs * n * self.patches_per_image).div_ceil(self.optimizer.batch_size)
    }
}

/// One training image with the label it is trained against.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub image: RgbImage,
    pub label: Mask,
}

/// Training items for `source`. Erasure is applied per image.
pub fn prepare_items(samples: &[&RetinalSample], source: &LabelSource) -> Result<(Vec<TrainItem>, Vec<ForgeRecord>)> {
    let mut items = Vec::with_capacity(samples.len());
    let mut records = Vec::new();
    for s in samples {
        let label = match source.erasure() {
            None => s.label.clone(),
            Some(cfg) => {
                let graph = VesselGraph::build(&s.label);
                let erased = erase_with_graph(&graph, &s.label, &cfg, &s.id)?;
                records.push(ForgeRecord::new(&s.id, &s.label, &graph, &erased));
                erased.mask
            }
        };
        items.push(TrainItem {
            id: s.id.clone(),
            image: s.image.clone(),
            label,
        });
    }
    Ok((items, records))
}

#[derive(Debug, Clone, Default)]
pub struct PseudoLabelSet {
    pub maps: BTreeMap<String, Plane>,
    /// Fold whose member produced each map.
    pub producer: BTreeMap<String, usize>,
}

/// What a training run reports back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains a fresh model.
///
/// Each step draws `batch_size` patches; the loss per patch is
/// `BCE(p, label) + lambda * BCE(p, pseudo)`, averaged over the batch.
/// `tag` selects the initialisation and patch streams.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    items: &[TrainItem],
    pseudo: Option<&PseudoLabelSet>,
    lambda: f64,
    steps: usize,
    cfg: &SglConfig,
    tag: &str,
    trained_on: Vec<String>,
    fold: Option<usize>,
) -> Result<(ModelCheckpoint, TrainLog)> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("no training items".into()));
    }
    let mut pseudo_planes = Vec::with_capacity(items.len());
    for it in items {
        pseudo_planes.push(match pseudo {
            None => None,
            Some(p) => Some(
                p.maps
                    .get(&it.id)
                    .ok_or_else(|| Error::Contract(format!("no pseudo label for training sample {}", it.id)))?,
            ),
        });
    }
    let model_cfg = ModelConfig {
        seed: derive_seed(cfg.model.seed, tag),
        ..cfg.model.clone()
    };
    let mut net = model_cfg.build::<f32>()?;
    let mut opt = Adam::new(cfg.optimizer, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.augmentation.seed, tag));
    let batch = cfg.optimizer.batch_size;
    let scale = 1.0 / batch as f32;
    let n = cfg.augmentation.crop;
    let started = Instant::now();
    let mut losses = Vec::with_capacity(steps);
    let report_every = (steps / 20).max(1);
    for step in 0..steps {
        net.zero_grad();
        let mut loss = 0.0;
        for _ in 0..batch {
            let i = rng.gen_range(0..items.len());
            let it = &items[i];
            let patch = sample_patch(&it.image, &it.label, pseudo_planes[i], &cfg.augmentation, &mut rng)?;
            let x = Tensor::from_vec(1, 3, n, n, patch.image.data().to_vec());
            let y: Vec<f32> = patch.label.data().iter().map(|&v| v as f32).collect();
            let mut cache = NetworkCache::default();
            let (_, z) = net.forward(&x, Some(&mut cache));
            let (l, mut g) = match &patch.pseudo {
                Some(p) => bce_logits(&z.data, &[(&y, 1.0), (p.data(), lambda)])?,
                None => bce_logits(&z.data, &[(&y, 1.0)])?,
            };
            g.iter_mut().for_each(|v| *v *= scale);
            net.backward(&cache, &Tensor::from_vec(1, 1, n, n, g));
            loss += l / batch as f64;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(net.params_mut());
        losses.push(loss);
        if step % report_every == 0 || step + 1 == steps {
            log::info!("[{tag}] step {}/{steps} loss {loss:.5}", step + 1);
        }
    }
    let ckpt = ModelCheckpoint::from_network(&net, &model_cfg, trained_on, fold, steps as u64);
    Ok((
        ckpt,
        TrainLog {
            steps,
            losses,
            seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Member `k` trains on every fold except `k`, against labels only.
pub fn train_member(
    k: usize,
    assignment: &FoldAssignment,
    items: &[TrainItem],
    cfg: &SglConfig,
) -> Result<(ModelCheckpoint, TrainLog)> {
    if k >= assignment.k {
        return Err(Error::Parameter(format!(
            "fold {k} out of range for K = {}",
            assignment.k
        )));
    }
    let trained_on = assignment.complement(k);
    let keep: BTreeSet<&str> = trained_on.iter().map(String::as_str).collect();
    let subset: Vec<TrainItem> = items
        .iter()
        .filter(|it| keep.contains(it.id.as_str()))
        .cloned()
        .collect();
    if subset.len() != trained_on.len() {
        return Err(Error::Contract(
            "fold assignment names samples missing from the items".into(),
        ));
    }
    let steps = cfg.steps(cfg.member_epochs, subset.len());
    train_model(
        &subset,
        None,
        0.0,
        steps,
        cfg,
        &format!("member-{k}"),
        trained_on,
        Some(k),
    )
}

/// Labels each sample with the member that held it out.
pub fn infer_pseudo(
    assignment: &FoldAssignment,
    members: &[&dyn Segmenter],
    images: &BTreeMap<String, &RgbImage>,
    form: PseudoForm,
) -> Result<PseudoLabelSet> {
    if members.len() != assignment.k {
        return Err(Error::Contract(format!(
            "{} members for K = {}",
            members.len(),
            assignment.k
        )));
    }
    let mut out = PseudoLabelSet::default();
    for (k, fold) in assignment.folds.iter().enumerate() {
        let member = members[k];
        for id in fold {
            if member.trained_on().iter().any(|t| t == id) {
                return Err(Error::Leakage {
                    sample: id.clone(),
                    fold: k,
                });
            }
            let img = images
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("image for sample {id}")))?;
            let (prob, _) = predict_full(member, img)?;
            let map = match form {
                PseudoForm::Soft => prob,
                PseudoForm::Hard { threshold } => prob.threshold(threshold).to_plane(),
            };
            out.maps.insert(id.clone(), map);
            out.producer.insert(id.clone(), k);
        }
    }
    Ok(out)
}

/// Verifies from bookkeeping alone that no pseudo label came from a model
/// that trained on its sample.
pub fn check_no_leakage(producer: &BTreeMap<String, usize>, trained_on: &[Vec<String>]) -> Result<()> {
    for (sample, &k) in producer {
        let list = trained_on
            .get(k)
            .ok_or_else(|| Error::Integrity(format!("no member {k} for sample {sample}")))?;
        if list.contains(sample) {
            return Err(Error::Leakage {
                sample: sample.clone(),
                fold: k,
            });
        }
    }
    Ok(())
}

/// Final model on all items; the pseudo term is skipped when `pseudo` is
/// `None` (K = 1).
pub fn train_final(
    items: &[TrainItem],
    pseudo: Option<&PseudoLabelSet>,
    cfg: &SglConfig,
) -> Result<(ModelCheckpoint, TrainLog)> {
    let mut ids: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
    ids.sort();
    let steps = cfg.steps(cfg.final_epochs, items.len());
    train_model(items, pseudo, cfg.lambda, steps, cfg, "final", ids, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub fold: Option<usize>,
    pub checkpoint: PathBuf,
    pub trained_on: Vec<String>,
    pub log: Option<TrainLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: SglConfig,
    pub folds: FoldAssignment,
    pub members: Vec<ModelRecord>,
    pub pseudo_producer: BTreeMap<String, usize>,
    pub final_model: ModelRecord,
    /// Test metrics of the final model, filled in by whoever evaluates it.
    #[serde(default)]
    pub metrics: Option<MetricsReport>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(Self::FILE))
    }
}

pub const PSEUDO_RUN: &str = "pseudo";

fn load_or_train(
    path: &Path,
    expected: &[String],
    train: impl FnOnce() -> Result<(ModelCheckpoint, TrainLog)>,
) -> Result<(ModelCheckpoint, Option<TrainLog>)> {
    if path.is_file() {
        let ck = ModelCheckpoint::load(path)?;
        if ck.trained_on != expected {
            return Err(Error::Integrity(format!(
                "{} was trained on a different sample set",
                path.display()
            )));
        }
        log::info!("reusing {}", path.display());
        return Ok((ck, None));
    }
    let (ck, log) = train()?;
    ck.save(path)?;
    Ok((ck, Some(log)))
}

/// Runs the whole scheme into `out`. Finished members, pseudo labels and the
/// final model found there are reused.
pub fn run_sgl(items: &[TrainItem], cfg: &SglConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut ids: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
    ids.sort();
    let assignment = split_folds(&ids, cfg.k, cfg.seed)?;
    assignment.validate(&ids)?;
    let previous = RunManifest::load(out).ok();

    let mut members = Vec::new();
    let mut pseudo = None;
    if cfg.k > 1 {
        let mut models = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k {
            let path = out.join("members").join(format!("fold{k}.ckpt"));
            let expected = assignment.complement(k);
            let (ck, log) = load_or_train(&path, &expected, || train_member(k, &assignment, items, cfg))?;
            let log = log.or_else(|| {
                previous
                    .as_ref()
                    .and_then(|m| m.members.get(k))
                    .and_then(|r| r.log.clone())
            });
            members.push(ModelRecord {
                fold: Some(k),
                checkpoint: path,
                trained_on: ck.trained_on.clone(),
                log,
            });
            models.push(Model::from_checkpoint(&ck)?);
        }
        let store = MapStore::new(out.join("maps"));
        let missing: Vec<&TrainItem> = items
            .iter()
            .filter(|it| !store.contains(PSEUDO_RUN, MapKind::PseudoLabel, &it.id))
            .collect();
        if !missing.is_empty() {
            let images: BTreeMap<String, &RgbImage> = items.iter().map(|it| (it.id.clone(), &it.image)).collect();
            let refs: Vec<&dyn Segmenter> = models.iter().map(|m| m as &dyn Segmenter).collect();
            let set = infer_pseudo(&assignment, &refs, &images, cfg.pseudo_form)?;
            for (id, map) in set.maps {
                store.save(&StoredMap {
                    sample_id: id.clone(),
                    kind: MapKind::PseudoLabel,
                    data: MapData::Gray(map),
                    meta: MapMeta {
                        run: PSEUDO_RUN.into(),
                        fold: Some(set.producer[&id]),
                        params: BTreeMap::new(),
                    },
                })?;
            }
        }
        // Always train from the stored maps so a resumed run sees the same values.
        let mut set = PseudoLabelSet::default();
        for it in items {
            let stored = store.load(PSEUDO_RUN, &it.id, MapKind::PseudoLabel)?;
            let MapData::Gray(p) = stored.data else {
                return Err(Error::Integrity(format!("pseudo label for {} is not gray", it.id)));
            };
            set.maps.insert(it.id.clone(), p);
            set.producer
                .insert(it.id.clone(), assignment.fold_of(&it.id).expect("validated partition"));
        }
        let trained: Vec<Vec<String>> = members.iter().map(|m| m.trained_on.clone()).collect();
        check_no_leakage(&set.producer, &trained)?;
        pseudo = Some(set);
    }

    let path = out.join("final.ckpt");
    let (ck, log) = load_or_train(&path, &ids, || train_final(items, pseudo.as_ref(), cfg))?;
    // Metrics only stay valid while the final model does.
    let metrics = match log {
        Some(_) => None,
        None => previous.as_ref().and_then(|m| m.metrics.clone()),
    };
    let log = log.or_else(|| previous.as_ref().and_then(|m| m.final_model.log.clone()));
    let manifest = RunManifest {
        config: cfg.clone(),
        folds: assignment,
        members,
        pseudo_producer: pseudo.map(|p| p.producer).unwrap_or_default(),
        final_model: ModelRecord {
            fold: None,
            checkpoint: path,
            trained_on: ck.trained_on,
            log,
        },
        metrics,
    };
    write_json(&out.join(RunManifest::FILE), &manifest)?;
    Ok(manifest)
}
