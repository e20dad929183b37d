//! Dataset ingestion and the on-disk store for intermediate maps.
//!
//! Two directory layouts are recognised under `<root>/<DATASET>/`:
//!
//! * flat: `images/`, `labels/` and optional `masks/`, one file per sample,
//!   matched by file stem;
//! * the published DRIVE layout: `training/` and `test/`, each with
//!   `images/`, `1st_manual/` and `mask/`.
//!
//! Published CHASE_DB1 archives (images and `_1stHO` labels side by side in
//! one directory) are accepted as well.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::raster::{Mask, Plane, RgbImage};

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "gif", "jpg", "jpeg", "ppm", "bmp"];

/// Number of CHASE_DB1 images, in filename order, used for training.
pub const CHASE_TRAIN_COUNT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "DRIVE")]
    Drive,
    #[serde(rename = "CHASE_DB1")]
    ChaseDb1,
}

impl DatasetId {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Drive => "DRIVE",
            DatasetId::ChaseDb1 => "CHASE_DB1",
        }
    }

    /// Native (width, height) of every image in the dataset.
    pub fn native_dims(self) -> (usize, usize) {
        match self {
            DatasetId::Drive => (565, 584),
            DatasetId::ChaseDb1 => (999, 960),
        }
    }

    pub fn expected_counts(self) -> (usize, usize) {
        match self {
            DatasetId::Drive => (20, 20),
            DatasetId::ChaseDb1 => (20, 8),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "DRIVE" => Ok(DatasetId::Drive),
            "CHASE_DB1" | "CHASEDB1" | "CHASE" => Ok(DatasetId::ChaseDb1),
            other => Err(Error::Parameter(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct RetinalSample {
    pub id: String,
    pub image: RgbImage,
    pub label: Mask,
    /// Field-of-view mask when the dataset ships one.
    pub fov: Option<Mask>,
    pub split: Split,
    pub dataset: DatasetId,
}

impl RetinalSample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Reject images whose size differs from the dataset's native size.
    pub enforce_native_size: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            enforce_native_size: true,
        }
    }
}

/// Loads every sample of `name` under `root` with its split tag.
pub fn load_dataset(root: &Path, name: DatasetId) -> Result<Vec<RetinalSample>> {
    load_dataset_with(root, name, LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, name: DatasetId, opts: LoadOptions) -> Result<Vec<RetinalSample>> {
    let base = root.join(name.dir_name());
    let entries = discover(&base, name)?;
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let image = imageio::read_rgb(&entry.image)?;
        let label = imageio::read_binary(&entry.label)?;
        if image.dims() != label.dims() {
            return Err(Error::Integrity(format!(
                "{}: image is {:?} but label {} is {:?}",
                entry.id,
                image.dims(),
                entry.label.display(),
                label.dims()
            )));
        }
        if opts.enforce_native_size && image.dims() != name.native_dims() {
            return Err(Error::Integrity(format!(
                "{}: {} images are {:?}, found {:?}",
                entry.id,
                name,
                name.native_dims(),
                image.dims()
            )));
        }
        let fov = match &entry.fov {
            Some(path) => {
                let m = imageio::read_binary(path)?;
                if m.dims() != image.dims() {
                    return Err(Error::Integrity(format!(
                        "{}: fov mask {} has size {:?}",
                        entry.id,
                        path.display(),
                        m.dims()
                    )));
                }
                Some(m)
            }
            None => None,
        };
        samples.push(RetinalSample {
            id: entry.id,
            image,
            label,
            fov,
            split: entry.split,
            dataset: name,
        });
    }
    Ok(samples)
}

struct Entry {
    id: String,
    image: PathBuf,
    label: PathBuf,
    fov: Option<PathBuf>,
    split: Split,
}

/// id, image, label, fov mask, split when the layout fixes it.
type Found = (String, PathBuf, PathBuf, Option<PathBuf>, Option<Split>);

fn discover(base: &Path, name: DatasetId) -> Result<Vec<Entry>> {
    if !base.is_dir() {
        return Err(Error::MissingFile(base.to_path_buf()));
    }
    let flat = base.join("images");
    let mut raw: Vec<Found> = Vec::new();
    if flat.is_dir() {
        for (id, image) in list_images(&flat)? {
            let label = find_label(&base.join("labels"), &id)?;
            let fov = find_fov(&base.join("masks"), &id)?;
            raw.push((id, image, label, fov, None));
        }
    } else if base.join("training").is_dir() && base.join("test").is_dir() {
        for (dir, split) in [("training", Split::Train), ("test", Split::Test)] {
            let d = base.join(dir);
            for (id, image) in list_images(&d.join("images"))? {
                let label = find_label(&d.join("1st_manual"), &id)?;
                let fov = find_fov(&d.join("mask"), &id)?;
                raw.push((id, image, label, fov, Some(split)));
            }
        }
    } else {
        // Side-by-side archive: label files carry an observer suffix.
        for (id, image) in list_images(base)? {
            if id.ends_with("_1stHO") || id.ends_with("_2ndHO") || id.contains("_manual") {
                continue;
            }
            // The bare id is the image itself here.
            let stems: Vec<String> = label_stems(&id).into_iter().skip(1).collect();
            let label = find_with_stems(base, &stems)
                .ok_or_else(|| Error::MissingFile(base.join(format!("{id}_1stHO.png"))))?;
            raw.push((id, image, label, None, None));
        }
    }
    raw.sort_by(|a, b| a.0.cmp(&b.0));

    let mut entries = Vec::with_capacity(raw.len());
    for (i, (id, image, label, fov, split)) in raw.into_iter().enumerate() {
        let split = match split {
            Some(s) => s,
            None => assign_split(name, &id, i)?,
        };
        entries.push(Entry {
            id,
            image,
            label,
            fov,
            split,
        });
    }
    Ok(entries)
}

/// DRIVE's split is fixed by its file names (1-20 test, 21-40 training);
/// CHASE_DB1 puts the first 20 files in lexicographic order into training.
fn assign_split(name: DatasetId, id: &str, index: usize) -> Result<Split> {
    match name {
        DatasetId::Drive => {
            let lower = id.to_ascii_lowercase();
            if lower.contains("train") {
                return Ok(Split::Train);
            }
            if lower.contains("test") {
                return Ok(Split::Test);
            }
            let digits: String = id.chars().take_while(|c| c.is_ascii_digit()).collect();
            match digits.parse::<u32>() {
                Ok(n) if (1..=20).contains(&n) => Ok(Split::Test),
                Ok(n) if (21..=40).contains(&n) => Ok(Split::Train),
                _ => Err(Error::Integrity(format!("cannot infer DRIVE split for '{id}'"))),
            }
        }
        DatasetId::ChaseDb1 => Ok(if index < CHASE_TRAIN_COUNT {
            Split::Train
        } else {
            Split::Test
        }),
    }
}

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !has_image_ext(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.push((stem, path));
    }
    out.sort();
    Ok(out)
}

fn has_image_ext(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn label_stems(id: &str) -> Vec<String> {
    let mut stems = vec![id.to_string(), format!("{id}_1stHO"), format!("{id}_manual1")];
    let digits: String = id.chars().take_while(|c| c.is_ascii_digit()).collect();
    if !digits.is_empty() {
        stems.push(format!("{digits}_manual1"));
    }
    stems
}

fn find_with_stems(dir: &Path, stems: &[String]) -> Option<PathBuf> {
    for stem in stems {
        for ext in IMAGE_EXTENSIONS {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

fn find_label(dir: &Path, id: &str) -> Result<PathBuf> {
    let stems = label_stems(id);
    find_with_stems(dir, &stems).ok_or_else(|| Error::MissingFile(dir.join(format!("{id}.png"))))
}

fn find_fov(dir: &Path, id: &str) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    Ok(find_with_stems(dir, &[format!("{id}_mask"), id.to_string()]))
}

pub fn train_split(samples: &[RetinalSample]) -> Vec<&RetinalSample> {
    samples.iter().filter(|s| s.split == Split::Train).collect()
}

pub fn test_split(samples: &[RetinalSample]) -> Vec<&RetinalSample> {
    samples.iter().filter(|s| s.split == Split::Test).collect()
}

// ---------------------------------------------------------------------------
// Map store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    PseudoLabel,
    ErasedLabel,
    Probability,
    Enhancement,
}

impl MapKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            MapKind::PseudoLabel => "pseudo_label",
            MapKind::ErasedLabel => "erased_label",
            MapKind::Probability => "probability",
            MapKind::Enhancement => "enhancement",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapData {
    Binary(Mask),
    Gray(Plane),
    Rgb(RgbImage),
}

impl MapData {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            MapData::Binary(m) => m.dims(),
            MapData::Gray(p) => p.dims(),
            MapData::Rgb(r) => r.dims(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub run: String,
    pub fold: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredMap {
    pub sample_id: String,
    pub kind: MapKind,
    pub data: MapData,
    pub meta: MapMeta,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    sample_id: String,
    kind: MapKind,
    width: usize,
    height: usize,
    meta: MapMeta,
}

/// Maps at rest: `<root>/<run>/<kind>/<sample_id>.png` plus a JSON sidecar
/// holding the metadata.
///
/// Erased labels are 8-bit {0, 255}; pseudo labels and probabilities are
/// 16-bit gray; enhancement maps are 16-bit RGB.
#[derive(Debug, Clone)]
pub struct MapStore {
    root: PathBuf,
}

impl MapStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, run: &str, kind: MapKind, sample_id: &str) -> PathBuf {
        self.root
            .join(run)
            .join(kind.dir_name())
            .join(format!("{sample_id}.png"))
    }

    pub fn contains(&self, run: &str, kind: MapKind, sample_id: &str) -> bool {
        self.path_for(run, kind, sample_id).is_file()
    }

    pub fn save(&self, map: &StoredMap) -> Result<PathBuf> {
        let path = self.path_for(&map.meta.run, map.kind, &map.sample_id);
        match (map.kind, &map.data) {
            (MapKind::ErasedLabel, MapData::Binary(m)) => imageio::write_binary(&path, m)?,
            (MapKind::PseudoLabel | MapKind::Probability, MapData::Gray(p)) => imageio::write_gray16(&path, p)?,
            (MapKind::PseudoLabel | MapKind::Probability, MapData::Binary(m)) => {
                imageio::write_gray16(&path, &m.to_plane())?
            }
            (MapKind::Enhancement, MapData::Rgb(r)) => imageio::write_rgb16(&path, r)?,
            (kind, _) => return Err(Error::Contract(format!("{kind:?} cannot hold this map data"))),
        }
        let (width, height) = map.data.dims();
        let sidecar = Sidecar {
            sample_id: map.sample_id.clone(),
            kind: map.kind,
            width,
            height,
            meta: map.meta.clone(),
        };
        write_json(&path.with_extension("json"), &sidecar)?;
        Ok(path)
    }

    pub fn load(&self, run: &str, sample_id: &str, kind: MapKind) -> Result<StoredMap> {
        let path = self.path_for(run, kind, sample_id);
        if !path.is_file() {
            return Err(Error::NotFound(format!(
                "{} map for sample '{sample_id}' in run '{run}'",
                kind.dir_name()
            )));
        }
        let sidecar: Sidecar = read_json(&path.with_extension("json"))?;
        let data = match kind {
            MapKind::ErasedLabel => MapData::Binary(imageio::read_binary(&path)?),
            MapKind::PseudoLabel | MapKind::Probability => MapData::Gray(imageio::read_gray16(&path)?),
            MapKind::Enhancement => MapData::Rgb(imageio::read_rgb16(&path)?),
        };
        if data.dims() != (sidecar.width, sidecar.height) {
            return Err(Error::Integrity(format!(
                "{} does not match its sidecar dimensions",
                path.display()
            )));
        }
        Ok(StoredMap {
            sample_id: sidecar.sample_id,
            kind,
            data,
            meta: sidecar.meta,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drive_split_from_names() {
        assert_eq!(assign_split(DatasetId::Drive, "21_training", 0).unwrap(), Split::Train);
        assert_eq!(assign_split(DatasetId::Drive, "03_test", 0).unwrap(), Split::Test);
        assert_eq!(assign_split(DatasetId::Drive, "35", 0).unwrap(), Split::Train);
        assert!(assign_split(DatasetId::Drive, "foo", 0).is_err());
    }

    #[test]
    fn chase_split_by_position() {
        assert_eq!(
            assign_split(DatasetId::ChaseDb1, "Image_10R", 19).unwrap(),
            Split::Train
        );
        assert_eq!(assign_split(DatasetId::ChaseDb1, "Image_11L", 20).unwrap(), Split::Test);
    }

    #[test]
    fn dataset_names_parse() {
        assert_eq!("drive".parse::<DatasetId>().unwrap(), DatasetId::Drive);
        assert_eq!("CHASE_DB1".parse::<DatasetId>().unwrap(), DatasetId::ChaseDb1);
        assert!("STARE".parse::<DatasetId>().is_err());
    }

    #[test]
    fn binarization_is_idempotent() {
        let values: Vec<u8> = (0..=255).collect();
        let once = imageio::binarize_gray(256, 1, &values);
        let as_u8: Vec<u8> = once.data().iter().map(|&v| v * 255).collect();
        let twice = imageio::binarize_gray(256, 1, &as_u8);
        assert_eq!(once, twice);
        assert!(!once.get(127, 0));
        assert!(once.get(128, 0));
    }
}
