//! Dataset discovery for the DRIVE, STARE and custom directory layouts.
//!
//! Discovery only resolves paths; [`DatasetSplit::load`] decodes the files and
//! derives centerline masks. Derived masks are cached beside the vessel mask
//! as `<mask stem>.centerline.pgm` and regenerated when the mask is newer.
//!
//! Expected layouts (any of the [`SUPPORTED_EXTENSIONS`] per file):
//!
//! ```text
//! DRIVE   training/images/NN_training   training/1st_manual/NN_manual1   training/mask/NN_training_mask
//!         test/images/NN_test           test/1st_manual/NN_manual1       test/mask/NN_test_mask
//!                                       test/2nd_manual/NN_manual2 (optional)
//! STARE   stare-images/imNNNN           labels-ah/imNNNN.ah              labels-vk/imNNNN.vk (optional)
//! custom  images/STEM  masks/STEM  fov/STEM (optional); or train/ and test/ each holding that layout
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::SystemTime;

use crate::error::{Error, Result};
use crate::imaging::raster::{self, SUPPORTED_EXTENSIONS};
use crate::imaging::skeleton::skeletonize;
use crate::map::BinaryMap;
use crate::tensor::Tensor;

const DRIVE_SPLIT_SIZE: usize = 20;
const STARE_IMAGES: usize = 20;
const STARE_TRAIN: usize = 10;
const CENTERLINE_SUFFIX: &str = ".centerline";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Drive,
    Stare,
    Custom,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drive" => Ok(Layout::Drive),
            "stare" => Ok(Layout::Stare),
            "custom" => Ok(Layout::Custom),
            other => Err(Error::Config(format!("unknown dataset layout {other:?} (drive, stare, custom)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    DriveTrain,
    DriveTest,
    StareTrain,
    StareTest,
    CustomTrain,
    CustomTest,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::DriveTrain => "drive-train",
            SplitName::DriveTest => "drive-test",
            SplitName::StareTrain => "stare-train",
            SplitName::StareTest => "stare-test",
            SplitName::CustomTrain => "custom-train",
            SplitName::CustomTest => "custom-test",
        }
    }
}

/// Files making up one labelled example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemPaths {
    pub id: String,
    pub image: PathBuf,
    pub vessel_mask: PathBuf,
    pub fov: Option<PathBuf>,
    pub second_mask: Option<PathBuf>,
}

impl ItemPaths {
    pub fn centerline_cache(&self) -> PathBuf {
        centerline_cache_path(&self.vessel_mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub items: Vec<ItemPaths>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub vessel_mask: BinaryMap,
    pub centerline_mask: Option<BinaryMap>,
    pub fov_mask: Option<BinaryMap>,
}

impl LabeledImage {
    pub fn new(
        id: impl Into<String>,
        image: Tensor,
        vessel_mask: BinaryMap,
        centerline_mask: Option<BinaryMap>,
        fov_mask: Option<BinaryMap>,
    ) -> Result<Self> {
        let id = id.into();
        let [n, _, h, w] = image.dims4();
        if n != 1 {
            return Err(Error::Data(format!("{id}: expected a single image")));
        }
        for (what, m) in [
            ("vessel mask", Some(&vessel_mask)),
            ("centerline mask", centerline_mask.as_ref()),
            ("FOV mask", fov_mask.as_ref()),
        ] {
            if let Some(m) = m {
                if m.dims() != (h, w) {
                    return Err(Error::Data(format!("{id}: {what} is {}×{}, image is {h}×{w}", m.height(), m.width())));
                }
            }
        }
        Ok(LabeledImage { id, image, vessel_mask, centerline_mask, fov_mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vessel_mask.dims()
    }

    /// Centerline mask, derived from the vessel mask when not attached.
    pub fn centerline(&self) -> BinaryMap {
        self.centerline_mask.clone().unwrap_or_else(|| skeletonize(&self.vessel_mask))
    }
}

/// Whether derived centerline masks may be written next to the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Use a fresh cache file when present, otherwise derive in memory.
    ReadOnly,
    /// Derive and write missing or stale cache files.
    ReadWrite,
}

pub fn centerline_cache_path(mask: &Path) -> PathBuf {
    let stem = mask.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    mask.with_file_name(format!("{stem}{CENTERLINE_SUFFIX}.pgm"))
}

fn modified(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// Loads (or derives) the centerline mask for a vessel mask. Returns the mask
/// and whether a cache file was written.
pub fn centerline_for(mask_path: &Path, mask: &BinaryMap, policy: CachePolicy) -> Result<(BinaryMap, bool)> {
    let cache = centerline_cache_path(mask_path);
    let fresh = match (modified(&cache), modified(mask_path)) {
        (Some(c), Some(m)) => c >= m,
        _ => false,
    };
    if fresh {
        let cached = raster::load_mask(&cache)?;
        if cached.dims() == mask.dims() {
            return Ok((cached, false));
        }
    }
    let skeleton = skeletonize(mask);
    if policy == CachePolicy::ReadWrite {
        raster::save_mask(&cache, &skeleton)?;
        return Ok((skeleton, true));
    }
    Ok((skeleton, false))
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Decodes every item; colour images with one channel are replicated to RGB.
    pub fn load(&self, policy: CachePolicy) -> Result<Vec<LabeledImage>> {
        self.items.iter().map(|item| load_item(item, policy)).collect()
    }

    /// Writes missing or stale centerline caches; returns how many were written.
    pub fn prepare_centerlines(&self) -> Result<usize> {
        let mut written = 0;
        for item in &self.items {
            let mask = raster::load_mask(&item.vessel_mask)?;
            if centerline_for(&item.vessel_mask, &mask, CachePolicy::ReadWrite)?.1 {
                written += 1;
            }
        }
        Ok(written)
    }
}

pub fn load_item(item: &ItemPaths, policy: CachePolicy) -> Result<LabeledImage> {
    let image = to_rgb(raster::decode_image(&item.image)?)?;
    let vessel = raster::load_mask(&item.vessel_mask)?;
    let (centerline, _) = centerline_for(&item.vessel_mask, &vessel, policy)?;
    let fov = item.fov.as_ref().map(raster::load_mask).transpose()?;
    LabeledImage::new(item.id.clone(), image, vessel, Some(centerline), fov)
}

pub fn to_rgb(image: Tensor) -> Result<Tensor> {
    let [_, c, h, w] = image.dims4();
    match c {
        3 => image.reshape(&[3, h, w]),
        1 => Tensor::new(&[3, h, w], image.values().repeat(3)),
        other => Err(Error::Data(format!("expected 1 or 3 image channels, got {other}"))),
    }
}

/// Identifier shared by an image and its annotations: the file stem without
/// the known DRIVE/STARE role suffixes (`_training`, `_test`, `_manual1`,
/// `_mask`, `.ah`, `.vk`, `.centerline`, `_prob_*`, …).
pub fn dataset_id(file_name: &str) -> String {
    let mut stem = file_name.to_string();
    if let Some(pos) = stem.rfind('.') {
        let ext = &stem[pos + 1..];
        if SUPPORTED_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) || ["gif", "tif", "tiff"].contains(&ext) {
            stem.truncate(pos);
        }
    }
    if let Some(pos) = stem.find("_prob_") {
        stem.truncate(pos);
    }
    for suffix in ["_mask", "_labels", CENTERLINE_SUFFIX, ".ah", ".vk", "_manual1", "_manual2", "_training", "_test"] {
        if let Some(s) = stem.strip_suffix(suffix) {
            stem = s.to_string();
        }
    }
    stem
}

/// Looks up `dir/stem.<ext>` over the supported extensions.
fn find_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    SUPPORTED_EXTENSIONS.iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

/// Any file called `stem.*` at all, to explain a missing supported file.
fn find_any(dir: &Path, stem: &str) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    entries.filter_map(|e| e.ok().map(|e| e.path())).find(|p| p.file_stem().is_some_and(|s| s == stem))
}

fn require(dir: &Path, stem: &str, missing: &mut Vec<String>) -> Option<PathBuf> {
    let found = find_stem(dir, stem);
    if found.is_none() {
        let hint = match find_any(dir, stem) {
            Some(p) => format!(" (found {}, which needs conversion)", p.display()),
            None => String::new(),
        };
        missing.push(format!("{}/{stem}.{{{}}}{hint}", dir.display(), SUPPORTED_EXTENSIONS.join(",")));
    }
    found
}

/// Stems of supported images in `dir`, sorted by name; derived cache files are skipped.
fn image_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
        if !path.is_file()
            || !ext.is_some_and(|e| {
                SUPPORTED_EXTENSIONS.contains(&e.as_str()) || ["gif", "tif", "tiff"].contains(&e.as_str())
            })
        {
            continue;
        }
        let stem = path.file_stem().expect("file has a stem").to_string_lossy().into_owned();
        if stem.ends_with(CENTERLINE_SUFFIX) || stem.ends_with(".tmp") {
            continue;
        }
        stems.push(stem);
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Data(format!("dataset directory {} does not exist", dir.display())))
    }
}

fn missing_error(layout: &str, root: &Path, missing: Vec<String>) -> Error {
    Error::Data(format!(
        "{layout} dataset at {} is incomplete; expected but not found:\n  {}",
        root.display(),
        missing.join("\n  ")
    ))
}

/// Discovers the train and test splits of a dataset root.
pub fn load_dataset(root: impl AsRef<Path>, layout: Layout) -> Result<(DatasetSplit, DatasetSplit)> {
    let root = root.as_ref();
    require_dir(root)?;
    match layout {
        Layout::Drive => load_drive(root),
        Layout::Stare => load_stare(root),
        Layout::Custom => load_custom(root),
    }
}

fn load_drive(root: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut missing = Vec::new();
    let mut splits = Vec::new();
    for (sub, role, name, ids) in
        [("training", "training", SplitName::DriveTrain, 21..=40), ("test", "test", SplitName::DriveTest, 1..=20)]
    {
        let base = root.join(sub);
        let mut items = Vec::with_capacity(DRIVE_SPLIT_SIZE);
        for n in ids {
            let id = format!("{n:02}");
            let image = require(&base.join("images"), &format!("{id}_{role}"), &mut missing);
            let mask = require(&base.join("1st_manual"), &format!("{id}_manual1"), &mut missing);
            let fov = require(&base.join("mask"), &format!("{id}_{role}_mask"), &mut missing);
            let second = find_stem(&base.join("2nd_manual"), &format!("{id}_manual2"));
            if let (Some(image), Some(vessel_mask), Some(fov)) = (image, mask, fov) {
                items.push(ItemPaths { id, image, vessel_mask, fov: Some(fov), second_mask: second });
            }
        }
        splits.push(DatasetSplit { name, items });
    }
    if !missing.is_empty() {
        return Err(missing_error("DRIVE", root, missing));
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok((train, test))
}

fn load_stare(root: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let images_dir = root.join("stare-images");
    require_dir(&images_dir)?;
    let stems = image_stems(&images_dir)?;
    let mut missing = Vec::new();
    if stems.len() != STARE_IMAGES {
        missing.push(format!(
            "{STARE_IMAGES} images in {} (found {}: {})",
            images_dir.display(),
            stems.len(),
            stems.join(", ")
        ));
    }
    let mut items = Vec::new();
    for stem in &stems {
        let image = require(&images_dir, stem, &mut missing);
        let mask = require(&root.join("labels-ah"), &format!("{stem}.ah"), &mut missing);
        let second = find_stem(&root.join("labels-vk"), &format!("{stem}.vk"));
        if let (Some(image), Some(vessel_mask)) = (image, mask) {
            items.push(ItemPaths { id: stem.clone(), image, vessel_mask, fov: None, second_mask: second });
        }
    }
    if !missing.is_empty() {
        return Err(missing_error("STARE", root, missing));
    }
    let test = items.split_off(STARE_TRAIN);
    Ok((DatasetSplit { name: SplitName::StareTrain, items }, DatasetSplit { name: SplitName::StareTest, items: test }))
}

fn custom_items(dir: &Path, missing: &mut Vec<String>) -> Result<Vec<ItemPaths>> {
    let images_dir = dir.join("images");
    require_dir(&images_dir)?;
    let mut items = Vec::new();
    for stem in image_stems(&images_dir)? {
        let image = require(&images_dir, &stem, missing);
        let mask = require(&dir.join("masks"), &stem, missing);
        let fov = find_stem(&dir.join("fov"), &stem);
        if let (Some(image), Some(vessel_mask)) = (image, mask) {
            items.push(ItemPaths { id: stem, image, vessel_mask, fov, second_mask: None });
        }
    }
    Ok(items)
}

fn load_custom(root: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut missing = Vec::new();
    let (train, test) = if root.join("train").is_dir() {
        let train = custom_items(&root.join("train"), &mut missing)?;
        let test =
            if root.join("test").is_dir() { custom_items(&root.join("test"), &mut missing)? } else { Vec::new() };
        (train, test)
    } else {
        (custom_items(root, &mut missing)?, Vec::new())
    };
    if !missing.is_empty() {
        return Err(missing_error("custom", root, missing));
    }
    Ok((
        DatasetSplit { name: SplitName::CustomTrain, items: train },
        DatasetSplit { name: SplitName::CustomTest, items: test },
    ))
}
