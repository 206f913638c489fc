//! Dataset representation, manifest ingestion and prediction persistence.
//!
//! A dataset is described by one JSON manifest. Paths inside the manifest are
//! resolved relative to the manifest's own directory, so a dataset tree can be
//! moved as a unit. Slices are single-channel 8- or 16-bit PNG/TIFF images;
//! masks are 8-bit PNGs where zero is background and any nonzero value is
//! foreground.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Number of embryonic age groups in the coding `{0: E13.5, 1: E14.5, 2: E15.5, 3: E16.5}`.
pub const NUM_AGE_GROUPS: usize = 4;

pub const AGE_LABELS: [&str; NUM_AGE_GROUPS] = ["E13.5", "E14.5", "E15.5", "E16.5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeDims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSlice {
    pub z: usize,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub age_index: usize,
    pub dims: VolumeDims,
    pub slice_paths: Vec<PathBuf>,
    /// Sorted by `z`.
    pub annotated_slices: Vec<AnnotatedSlice>,
    pub cohort_tag: String,
}

impl VolumeRecord {
    pub fn mask_path(&self, z: usize) -> Option<&Path> {
        self.annotated_slices
            .binary_search_by_key(&z, |a| a.z)
            .ok()
            .map(|i| self.annotated_slices[i].mask_path.as_path())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub volumes: Vec<VolumeRecord>,
}

impl DatasetManifest {
    /// Distinct cohort tags in first-seen order.
    pub fn cohorts(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for v in &self.volumes {
            if !seen.contains(&v.cohort_tag) {
                seen.push(v.cohort_tag.clone());
            }
        }
        seen
    }
}

// On-disk form. Age is read as a signed integer so negative values surface as
// `BadAgeIndex` rather than a generic parse failure.
#[derive(Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    split: Split,
    volumes: Vec<VolumeEntry>,
}

#[derive(Serialize, Deserialize)]
struct VolumeEntry {
    volume_id: String,
    age_index: i64,
    cohort_tag: String,
    depth: usize,
    height: usize,
    width: usize,
    slice_paths: Vec<PathBuf>,
    annotated_slices: Vec<AnnotatedSlice>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_image(path: &Path, expected: (usize, usize)) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let found = (h as usize, w as usize);
    if found != expected {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Reads and validates a manifest. Every referenced image is checked for
/// existence and header dimensions.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut ids = HashSet::new();
    let mut volumes = Vec::with_capacity(file.volumes.len());
    for entry in file.volumes {
        if !(0..NUM_AGE_GROUPS as i64).contains(&entry.age_index) {
            return Err(Error::BadAgeIndex(entry.age_index));
        }
        if !ids.insert(entry.volume_id.clone()) {
            return Err(Error::Manifest(format!(
                "duplicate volume_id {}",
                entry.volume_id
            )));
        }
        let dims = VolumeDims::new(entry.depth, entry.height, entry.width);
        let mut record = VolumeRecord {
            volume_id: entry.volume_id,
            age_index: entry.age_index as usize,
            dims,
            slice_paths: entry
                .slice_paths
                .iter()
                .map(|p| resolve(base, p))
                .collect(),
            annotated_slices: entry
                .annotated_slices
                .into_iter()
                .map(|a| AnnotatedSlice {
                    z: a.z,
                    mask_path: resolve(base, &a.mask_path),
                })
                .collect(),
            cohort_tag: entry.cohort_tag,
        };
        record.annotated_slices.sort_by_key(|a| a.z);
        validate_record(&record)?;
        if file.split == Split::Train && record.annotated_slices.is_empty() {
            return Err(Error::NoAnnotatedSlices(record.volume_id));
        }
        volumes.push(record);
    }
    Ok(DatasetManifest {
        name: file.name,
        split: file.split,
        volumes,
    })
}

/// Checks the structural invariants of a record and the files it references.
pub fn validate_record(record: &VolumeRecord) -> Result<()> {
    let VolumeDims {
        depth,
        height,
        width,
    } = record.dims;
    if depth == 0 || height == 0 || width == 0 {
        return Err(Error::Manifest(format!(
            "volume {} has a zero dimension",
            record.volume_id
        )));
    }
    if record.slice_paths.len() != depth {
        return Err(Error::Manifest(format!(
            "volume {} lists {} slices but depth is {}",
            record.volume_id,
            record.slice_paths.len(),
            depth
        )));
    }
    let mut prev = None;
    for a in &record.annotated_slices {
        if a.z >= depth {
            return Err(Error::IndexOutOfRange {
                index: a.z,
                len: depth,
            });
        }
        if prev == Some(a.z) {
            return Err(Error::Manifest(format!(
                "volume {} annotates slice {} twice",
                record.volume_id, a.z
            )));
        }
        prev = Some(a.z);
    }
    for p in &record.slice_paths {
        check_image(p, (height, width))?;
    }
    for a in &record.annotated_slices {
        check_image(&a.mask_path, (height, width))?;
    }
    Ok(())
}

/// Writes a manifest, storing paths relative to the manifest directory where possible.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| relative_to(p, base);
    let file = ManifestFile {
        name: manifest.name.clone(),
        split: manifest.split,
        volumes: manifest
            .volumes
            .iter()
            .map(|v| VolumeEntry {
                volume_id: v.volume_id.clone(),
                age_index: v.age_index as i64,
                cohort_tag: v.cohort_tag.clone(),
                depth: v.dims.depth,
                height: v.dims.height,
                width: v.dims.width,
                slice_paths: v.slice_paths.iter().map(|p| rel(p)).collect(),
                annotated_slices: v
                    .annotated_slices
                    .iter()
                    .map(|a| AnnotatedSlice {
                        z: a.z,
                        mask_path: rel(&a.mask_path),
                    })
                    .collect(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

// Lexical relative path from `base` to `target`; falls back to `target`
// when the two share no common prefix.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

fn decode(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads slice `z` with intensities divided by the format maximum
/// (65535 for 16-bit, 255 for 8-bit).
pub fn load_slice(record: &VolumeRecord, z: usize) -> Result<Plane<f32>> {
    if z >= record.dims.depth {
        return Err(Error::IndexOutOfRange {
            index: z,
            len: record.dims.depth,
        });
    }
    let path = &record.slice_paths[z];
    let img = decode(path)?;
    let expected = (record.dims.height, record.dims.width);
    let found = (img.height() as usize, img.width() as usize);
    if found != expected {
        return Err(Error::ShapeMismatch {
            path: path.clone(),
            expected,
            found,
        });
    }
    let (h, w) = found;
    let plane = match img {
        DynamicImage::ImageLuma8(buf) => {
            Plane::from_vec(h, w, buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        other => {
            let buf = other.into_luma16();
            Plane::from_vec(
                h,
                w,
                buf.into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 65535.0)
                    .collect(),
            )
        }
    };
    Ok(plane)
}

/// Reads a mask file as {0, 1}.
pub fn load_mask(path: &Path) -> Result<Plane<u8>> {
    let img = decode(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Plane::from_vec(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| u8::from(v > 0)).collect(),
    ))
}

/// Loads the ground-truth mask of annotated slice `z`.
pub fn load_slice_mask(record: &VolumeRecord, z: usize) -> Result<Plane<u8>> {
    let path = record.mask_path(z).ok_or(Error::IndexOutOfRange {
        index: z,
        len: record.dims.depth,
    })?;
    let mask = load_mask(path)?;
    let expected = (record.dims.height, record.dims.width);
    if mask.shape() != expected {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            found: mask.shape(),
        });
    }
    Ok(mask)
}

/// Writes a binary mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask(mask: &Plane<u8>, path: &Path) -> Result<()> {
    if let Some(&bad) = mask.data().iter().find(|&&v| v > 1) {
        return Err(Error::NonBinaryMask(bad));
    }
    let img: GrayImage = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer sized from plane");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a 16-bit grayscale PNG from intensities in [0, 1].
pub fn write_slice_u16(slice: &Plane<f32>, path: &Path) -> Result<()> {
    let raw: Vec<u16> = slice
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(slice.width() as u32, slice.height() as u32, raw)
            .expect("buffer sized from plane");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Persists a predicted mask as `<out_dir>/<volume_id>/pred_<z>.png`.
pub fn save_prediction(volume_id: &str, z: usize, mask: &Plane<u8>, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join(volume_id).join(format!("pred_{z:05}.png"));
    write_mask(mask, &path)?;
    Ok(path)
}
