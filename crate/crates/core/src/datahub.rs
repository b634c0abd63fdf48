// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled image folders, the evaluation image pipeline, and persisted
//! center-neuron activation caches.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgops::{center_crop, resize_bilinear};
use crate::netgraph::{BlockAddress, NetworkHandle, TapPoint};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 5] = ["jpeg", "jpg", "png", "JPEG", "JPG"];

/// Environment variable overriding the activation cache directory.
pub const CACHE_DIR_ENV: &str = "RESSCALE_CACHE";

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Center-crop-and-resize applied to evaluation images.
///
/// Images are first resized so the shorter side equals `source_resolution`.
/// Percentage 0 is the canonical pipeline: a center crop to
/// `target_resolution`. Any other percentage center-crops to
/// [`crop_size_for`] pixels and resizes bilinearly to
/// `target_resolution`, magnifying the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalScaleTransform {
    pub percentage: u32,
    pub source_resolution: usize,
    pub target_resolution: usize,
}

/// Side of the center crop removing `percentage` percent of `source`.
pub fn crop_size_for(source: usize, percentage: u32) -> usize {
    assert!(percentage < 100, "percentage must be below 100");
    source - source * percentage as usize / 100
}

impl EvalScaleTransform {
    pub fn new(percentage: u32) -> Self {
        Self {
            percentage,
            source_resolution: 256,
            target_resolution: 224,
        }
    }

    pub fn canonical() -> Self {
        Self::new(0)
    }

    /// Same percentage with a different shorter-side size and output size.
    pub fn with_resolutions(self, source: usize, target: usize) -> Self {
        Self {
            source_resolution: source,
            target_resolution: target,
            ..self
        }
    }

    pub fn crop_size(&self) -> usize {
        if self.percentage == 0 {
            self.target_resolution
        } else {
            crop_size_for(self.source_resolution, self.percentage)
        }
    }

    pub fn descriptor(&self) -> String {
        format!("shorter={};crop={};out={}", self.source_resolution, self.crop_size(), self.target_resolution)
    }

    /// Applies the crop (and resize) to an image whose shorter side is
    /// already `source_resolution`.
    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Tensor<T> {
        let cropped = center_crop(img, self.crop_size());
        if self.percentage == 0 {
            cropped
        } else {
            resize_bilinear(&cropped, self.target_resolution, self.target_resolution, false)
        }
    }
}

/// One labeled image file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// A deterministic, class-stratified subset of a `root/<class>/<image>` tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSlice {
    pub root_path: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<DatasetEntry>,
    pub subset_fraction: f64,
    pub split_seed: u64,
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        out.push(entry.map_err(|e| Error::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Number of images kept from a class of `size` images.
pub fn stratified_count(size: usize, fraction: f64) -> usize {
    ((size as f64 * fraction).round() as usize).clamp(1, size)
}

/// Lists `root`, keeping `round(fraction × n)` images (at least one) of
/// every class, chosen by a seeded shuffle. Classes are numbered in sorted
/// directory-name order; entries are ordered by class then file name.
pub fn load_dataset(root: impl AsRef<Path>, subset_fraction: f64, split_seed: u64) -> Result<DatasetSlice> {
    let root = root.as_ref();
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::Dataset(format!("subset fraction {subset_fraction} outside (0, 1]")));
    }
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut entries = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_dir(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} contains no images", dir.display())));
        }
        let keep = stratified_count(files.len(), subset_fraction);
        let mut idx: Vec<usize> = (0..files.len()).collect();
        if keep < files.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ (label as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            idx.shuffle(&mut rng);
            idx.truncate(keep);
            idx.sort_unstable();
        }
        entries.extend(idx.into_iter().map(|i| DatasetEntry {
            path: files[i].clone(),
            label,
        }));
        class_names.push(name);
    }
    Ok(DatasetSlice {
        root_path: root.to_path_buf(),
        class_names,
        entries,
        subset_fraction,
        split_seed,
    })
}

/// Reads an image as `[1, 3, H, W]` RGB in `[0, 1]`, resized (triangle
/// filter) so its shorter side is `shorter_side` unless it already is. The
/// longer side is truncated as torchvision does.
pub fn load_image<T: Scalar>(path: &Path, shorter_side: usize) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let short = w.min(h) as usize;
    let rgb = if short == shorter_side {
        rgb
    } else {
        let (nw, nh) = if w <= h {
            (shorter_side as u32, (h as usize * shorter_side / w as usize) as u32)
        } else {
            ((w as usize * shorter_side / h as usize) as u32, shorter_side as u32)
        };
        image::imageops::resize(&rgb, nw, nh, image::imageops::FilterType::Triangle)
    };
    let (w, h) = rgb.dimensions();
    Ok(Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        T::lit(rgb.get_pixel(x as u32, y as u32).0[c] as f64)
    }))
}

impl DatasetSlice {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_count(&self) -> usize {
        self.entries.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Stable description of the slice's membership, for cache keys.
    pub fn descriptor(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.path.to_string_lossy().as_bytes());
            h.update(e.label.to_le_bytes());
        }
        format!("{}#{}", self.image_count(), &hex::encode(h.finalize())[..16])
    }

    /// Loads and transforms the images at `indices` into one batch.
    pub fn load_batch<T: Scalar>(&self, indices: &[usize], transform: &EvalScaleTransform) -> Result<Tensor<T>> {
        let images: Vec<Tensor<T>> = indices
            .par_iter()
            .map(|&i| {
                let entry = self
                    .entries
                    .get(i)
                    .ok_or_else(|| Error::Dataset(format!("image index {i} out of range ({} images)", self.image_count())))?;
                let img = load_image::<T>(&entry.path, transform.source_resolution)?;
                Ok(transform.apply(&img))
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&images))
    }

    /// Index ranges of consecutive batches of at most `batch_size`.
    pub fn batch_ranges(&self, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let step = batch_size.max(1);
        (0..self.image_count()).step_by(step).map(move |s| s..(s + step).min(self.image_count()))
    }
}

/// Everything an activation cache depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub weights_id: String,
    pub addr: BlockAddress,
    pub tap: TapPoint,
    pub preprocessing: String,
    pub transform: String,
    pub dataset: String,
    pub dtype: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("key serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Center-neuron activations of every channel at one tap over a slice.
/// Row `i` belongs to the slice's `i`-th image.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T> {
    pub key: CacheKey,
    pub image_count: usize,
    pub channel_count: usize,
    /// Row-major `[image_count, channel_count]`.
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheSidecar {
    key: CacheKey,
    image_count: usize,
    channel_count: usize,
    sha256: String,
}

/// Image index and its center activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedImage<T> {
    pub index: usize,
    pub value: T,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn value(&self, image: usize, channel: usize) -> T {
        self.values[image * self.channel_count + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<T> {
        (0..self.image_count).map(|i| self.value(i, channel)).collect()
    }

    /// Per-channel mean over images, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<T> {
        let n = self.image_count.max(1) as f64;
        (0..self.channel_count)
            .map(|c| T::lit((0..self.image_count).map(|i| self.value(i, c).as_f64()).sum::<f64>() / n))
            .collect()
    }

    fn paths(root: &Path, key: &CacheKey) -> (PathBuf, PathBuf) {
        let d = key.digest();
        (root.join(format!("{d}.bin")), root.join(format!("{d}.json")))
    }

    /// Writes the values and a JSON sidecar under `root`, keyed by the
    /// key's content hash.
    pub fn persist(&self, root: &Path) -> Result<PathBuf> {
        let (bin, meta) = Self::paths(root, &self.key);
        let mut raw = Vec::with_capacity(self.values.len() * T::BYTES);
        self.values.iter().for_each(|v| v.write_le(&mut raw));
        let sidecar = CacheSidecar {
            key: self.key.clone(),
            image_count: self.image_count,
            channel_count: self.channel_count,
            sha256: hex::encode(Sha256::digest(&raw)),
        };
        write_atomic(&bin, &raw)?;
        let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Cache(e.to_string()))?;
        write_atomic(&meta, &json)?;
        Ok(bin)
    }

    /// Loads the cache for `key` from `root`. Returns `None` when absent or
    /// when the stored key, shape or checksum does not validate.
    pub fn load(root: &Path, key: &CacheKey) -> Result<Option<Self>> {
        let (bin, meta) = Self::paths(root, key);
        if !bin.exists() || !meta.exists() {
            return Ok(None);
        }
        let text = std::fs::read(&meta).map_err(|e| Error::io(&meta, e))?;
        let Ok(sidecar) = serde_json::from_slice::<CacheSidecar>(&text) else {
            tracing::warn!(path = %meta.display(), "unreadable cache sidecar, recomputing");
            return Ok(None);
        };
        if &sidecar.key != key {
            return Ok(None);
        }
        let raw = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if raw.len() != sidecar.image_count * sidecar.channel_count * T::BYTES || hex::encode(Sha256::digest(&raw)) != sidecar.sha256 {
            tracing::warn!(path = %bin.display(), "cache checksum mismatch, recomputing");
            return Ok(None);
        }
        Ok(Some(Self {
            key: sidecar.key,
            image_count: sidecar.image_count,
            channel_count: sidecar.channel_count,
            values: raw.chunks_exact(T::BYTES).map(T::read_le).collect(),
        }))
    }
}

/// Cache directory: `$RESSCALE_CACHE` when set, else `default`.
pub fn cache_root(default: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| default.into())
}

pub fn cache_key<T: Scalar>(
    handle: &NetworkHandle<T>,
    slice: &DatasetSlice,
    addr: BlockAddress,
    tap: TapPoint,
    transform: &EvalScaleTransform,
) -> CacheKey {
    CacheKey {
        weights_id: handle.weights_id.clone(),
        addr,
        tap,
        preprocessing: handle.preprocess.descriptor(),
        transform: transform.descriptor(),
        dataset: slice.descriptor(),
        dtype: T::DTYPE.to_string(),
    }
}

/// Runs the slice through the network and records the center value of
/// every channel at `(addr, tap)`. `transform` defaults to the canonical
/// pipeline at the network's input resolution.
pub fn sweep_center_activations<T: Scalar>(
    handle: &NetworkHandle<T>,
    slice: &DatasetSlice,
    addr: BlockAddress,
    tap: TapPoint,
    transform: Option<&EvalScaleTransform>,
    batch_size: usize,
) -> Result<ActivationCache<T>> {
    let site = handle.resolve_tap(addr, tap)?;
    let transform = transform.copied().unwrap_or_else(|| canonical_for(handle));
    let mut values = Vec::with_capacity(slice.image_count() * site.channels);
    for range in slice.batch_ranges(batch_size) {
        let indices: Vec<usize> = range.collect();
        let batch = slice.load_batch::<T>(&indices, &transform)?;
        let map = handle.observe(&batch, site, &[])?;
        for (row, &img) in indices.iter().enumerate() {
            for c in 0..site.channels {
                let v = map.center_value(row, c);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{site} channel {c} on image {img}")));
                }
                values.push(v);
            }
        }
    }
    Ok(ActivationCache {
        key: cache_key(handle, slice, addr, tap, &transform),
        image_count: slice.image_count(),
        channel_count: site.channels,
        values,
    })
}

/// Loads a validating cache from `root` or sweeps and persists a new one.
pub fn cached_center_activations<T: Scalar>(
    handle: &NetworkHandle<T>,
    slice: &DatasetSlice,
    addr: BlockAddress,
    tap: TapPoint,
    transform: Option<&EvalScaleTransform>,
    batch_size: usize,
    root: &Path,
) -> Result<ActivationCache<T>> {
    let t = transform.copied().unwrap_or_else(|| canonical_for(handle));
    let key = cache_key(handle, slice, addr, tap, &t);
    if let Some(cache) = ActivationCache::load(root, &key)? {
        tracing::debug!(%addr, %tap, "activation cache hit");
        return Ok(cache);
    }
    let cache = sweep_center_activations(handle, slice, addr, tap, Some(&t), batch_size)?;
    cache.persist(root)?;
    Ok(cache)
}

/// Canonical transform for a network's input resolution, keeping the
/// 256/224 ratio between the resize and crop sizes.
pub fn canonical_for<T: Scalar>(handle: &NetworkHandle<T>) -> EvalScaleTransform {
    let target = handle.input_resolution;
    let source = if target == 224 { 256 } else { (target as f64 * 256.0 / 224.0).round() as usize };
    EvalScaleTransform::canonical().with_resolutions(source, target)
}

/// The `k` images with the largest center activation on `channel`,
/// descending, ties broken by ascending index.
pub fn top_k_activating_images<T: Scalar>(cache: &ActivationCache<T>, channel: usize, k: usize) -> Result<Vec<RankedImage<T>>> {
    if channel >= cache.channel_count {
        return Err(Error::Dataset(format!("channel {channel} out of range ({} channels)", cache.channel_count)));
    }
    if k > cache.image_count {
        return Err(Error::Dataset(format!("requested top {k} of {} images", cache.image_count)));
    }
    let mut ranked: Vec<RankedImage<T>> = cache
        .column(channel)
        .into_iter()
        .enumerate()
        .map(|(index, value)| RankedImage { index, value })
        .collect();
    ranked.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap_or(std::cmp::Ordering::Equal).then(a.index.cmp(&b.index)));
    ranked.truncate(k);
    Ok(ranked)
}
