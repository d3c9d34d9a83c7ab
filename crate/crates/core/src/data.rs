//! Dataset ingestion, splitting and normalization.
//!
//! Raw datasets keep 8-bit pixels. Conversion to a [`SplitDataset`] scales
//! them to `[0, 1]` and then applies a [`NormStats`] transform fitted on
//! the training split, so that cross-dataset evaluation can reuse it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::episodes::{rng_for, ClassRecord, Split, SplitDataset};
use crate::error::{Error, Result};

pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_SYNTH: u64 = 5;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

#[derive(Clone, Debug, PartialEq)]
pub struct RawClass {
    pub id: String,
    pub group: Option<String>,
    /// `C·H·W` bytes per image, channel-major.
    pub images: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub geometry: (usize, usize, usize),
    pub classes: Vec<RawClass>,
}

impl RawDataset {
    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.geometry;
        for class in &self.classes {
            if class.images.is_empty() {
                return Err(self.err(format!("class `{}` has no images", class.id)));
            }
            if class.images.iter().any(|im| im.len() != c * h * w) {
                return Err(self.err(format!("class `{}` has mis-sized images", class.id)));
            }
        }
        Ok(())
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Dataset {
            name: self.name.clone(),
            msg: msg.into(),
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, channels: usize, (h, w): (usize, usize)) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let resize = img.width() as usize != w || img.height() as usize != h;
    match channels {
        1 => {
            let mut g = img.into_luma8();
            if resize {
                g = image::imageops::resize(&g, w as u32, h as u32, FilterType::Triangle);
            }
            Ok(g.into_raw())
        }
        3 => {
            let mut rgb = img.into_rgb8();
            if resize {
                rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
            }
            Ok(interleaved_to_planar(rgb.as_raw(), 3))
        }
        n => Err(Error::config("in_channels", format!("images need 1 or 3 channels, got {n}"))),
    }
}

fn interleaved_to_planar(px: &[u8], channels: usize) -> Vec<u8> {
    let n = px.len() / channels;
    let mut out = vec![0; px.len()];
    for (i, chunk) in px.chunks(channels).enumerate() {
        for (c, v) in chunk.iter().enumerate() {
            out[c * n + i] = *v;
        }
    }
    out
}

fn planar_to_interleaved(px: &[u8], channels: usize) -> Vec<u8> {
    let n = px.len() / channels;
    let mut out = vec![0; px.len()];
    for c in 0..channels {
        for i in 0..n {
            out[i * channels + c] = px[c * n + i];
        }
    }
    out
}

fn load_class(dir: &Path, channels: usize, size: (usize, usize)) -> Result<Vec<Vec<u8>>> {
    let files: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "empty class directory, no images found".into(),
        });
    }
    files.iter().map(|f| decode(f, channels, size)).collect()
}

/// Loads `root/<group>/<class>/<image>` or `root/<class>/<image>` trees.
/// A directory directly holding images is a class; any other directory is
/// a group of classes. Classes are ordered by path.
pub fn load_image_tree(root: &Path, resize: (usize, usize), channels: usize) -> Result<RawDataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut classes = Vec::new();
    for sub in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = file_name(&sub);
        let entries = sorted_entries(&sub)?;
        let holds_images = entries.iter().any(|p| p.is_file() && is_image(p));
        if holds_images || entries.iter().all(|p| !p.is_dir()) {
            classes.push(RawClass {
                images: load_class(&sub, channels, resize)?,
                id: name,
                group: None,
            });
            continue;
        }
        for leaf in entries.into_iter().filter(|p| p.is_dir()) {
            classes.push(RawClass {
                id: format!("{name}/{}", file_name(&leaf)),
                group: Some(name.clone()),
                images: load_class(&leaf, channels, resize)?,
            });
        }
    }
    if classes.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            msg: "no class directories found".into(),
        });
    }
    Ok(RawDataset {
        name: file_name(root),
        geometry: (channels, resize.0, resize.1),
        classes,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "truncated IDX header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad IDX magic 0x{found:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair, one class per distinct label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;
    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("{n_labels} labels for {n} images"),
        });
    }
    let px = rows * cols;
    if images.len() != 16 + n * px {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: format!("expected {} payload bytes, found {}", n * px, images.len().saturating_sub(16)),
        });
    }
    if labels.len() != 8 + n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("expected {n} label bytes, found {}", labels.len().saturating_sub(8)),
        });
    }
    let mut by_label: BTreeMap<u8, Vec<Vec<u8>>> = BTreeMap::new();
    for (i, &label) in labels[8..].iter().enumerate() {
        by_label
            .entry(label)
            .or_default()
            .push(images[16 + i * px..16 + (i + 1) * px].to_vec());
    }
    Ok(RawDataset {
        name: file_name(images_path),
        geometry: (1, rows, cols),
        classes: by_label
            .into_iter()
            .map(|(label, images)| RawClass {
                id: label.to_string(),
                group: None,
                images,
            })
            .collect(),
    })
}

/// Bilinear resize of every image to `(h, w)`; identity when the size
/// already matches.
pub fn resize_dataset(raw: &RawDataset, (h, w): (usize, usize)) -> Result<RawDataset> {
    let (c, oh, ow) = raw.geometry;
    if (oh, ow) == (h, w) {
        return Ok(raw.clone());
    }
    let resize_one = |im: &Vec<u8>| -> Result<Vec<u8>> {
        let bad = || raw.err("image buffer does not match geometry");
        match c {
            1 => {
                let g = image::GrayImage::from_raw(ow as u32, oh as u32, im.clone()).ok_or_else(bad)?;
                Ok(image::imageops::resize(&g, w as u32, h as u32, FilterType::Triangle).into_raw())
            }
            3 => {
                let rgb = image::RgbImage::from_raw(ow as u32, oh as u32, planar_to_interleaved(im, 3))
                    .ok_or_else(bad)?;
                let out = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
                Ok(interleaved_to_planar(out.as_raw(), 3))
            }
            n => Err(raw.err(format!("cannot resize {n}-channel images"))),
        }
    };
    let classes = raw
        .classes
        .iter()
        .map(|cl| {
            Ok(RawClass {
                id: cl.id.clone(),
                group: cl.group.clone(),
                images: cl.images.iter().map(resize_one).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RawDataset {
        name: raw.name.clone(),
        geometry: (c, h, w),
        classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub geometry: (usize, usize, usize),
    /// Standard deviation of the per-pixel noise, in units of full scale.
    pub spread: f64,
    pub seed: u64,
}

/// Each class is a random template of a few Gaussian bumps; examples add
/// independent pixel noise of standard deviation `spread`.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<RawDataset> {
    if !(cfg.spread >= 0.0) || !cfg.spread.is_finite() {
        return Err(Error::config("synth_spread", "must be a non-negative number"));
    }
    if cfg.num_classes == 0 || cfg.per_class == 0 {
        return Err(Error::config("synth_classes", "need at least one class and example"));
    }
    let (c, h, w) = cfg.geometry;
    let mut rng = rng_for(cfg.seed, STREAM_SYNTH);
    let noise = Normal::new(0.0, cfg.spread.max(f64::MIN_POSITIVE)).expect("valid std");
    let classes = (0..cfg.num_classes)
        .map(|k| {
            let mut template = vec![0.12; c * h * w];
            for _ in 0..3 {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(1.5..(h.min(w) as f64 / 4.0).max(2.0));
                let amp = rng.random_range(0.4..0.9);
                let ch = rng.random_range(0..c);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        template[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
            let images = (0..cfg.per_class)
                .map(|_| {
                    template
                        .iter()
                        .map(|&t| {
                            let v = if cfg.spread > 0.0 { t + noise.sample(&mut rng) } else { t };
                            (v.clamp(0.0, 1.0) * 255.0).round() as u8
                        })
                        .collect()
                })
                .collect();
            RawClass {
                id: format!("blob{k:04}"),
                group: None,
                images,
            }
        })
        .collect();
    Ok(RawDataset {
        name: format!("blobs-{}", cfg.seed),
        geometry: cfg.geometry,
        classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Whole groups (alphabets) go to one side; falls back to `Classes`
    /// when any class lacks a group.
    Groups { train_fraction: f64 },
    Classes { train_fraction: f64 },
    /// Explicit class lists, one class id (or leaf directory name) per line.
    Files { train: PathBuf, test: PathBuf },
}

fn subset(raw: &RawDataset, keep: &HashSet<usize>, suffix: &str) -> RawDataset {
    RawDataset {
        name: format!("{}-{suffix}", raw.name),
        geometry: raw.geometry,
        classes: raw
            .classes
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, c)| c.clone())
            .collect(),
    }
}

fn train_count(n: usize, fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("train_fraction", "must lie in [0, 1]"));
    }
    let k = (n as f64 * fraction).round() as usize;
    Ok(k.clamp(1.min(n), n.saturating_sub(1)))
}

fn read_split_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Disjoint train/test class sets; a pure function of its inputs.
pub fn split(raw: &RawDataset, spec: &SplitSpec, seed: u64) -> Result<(RawDataset, RawDataset)> {
    let mut rng = rng_for(seed, STREAM_SPLIT);
    let train: HashSet<usize> = match spec {
        SplitSpec::Groups { train_fraction } if raw.classes.iter().all(|c| c.group.is_some()) => {
            let mut groups: Vec<&str> = raw
                .classes
                .iter()
                .filter_map(|c| c.group.as_deref())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            groups.shuffle(&mut rng);
            let k = train_count(groups.len(), *train_fraction)?;
            let chosen: HashSet<&str> = groups[..k].iter().copied().collect();
            (0..raw.classes.len())
                .filter(|&i| chosen.contains(raw.classes[i].group.as_deref().unwrap_or("")))
                .collect()
        }
        SplitSpec::Groups { train_fraction } | SplitSpec::Classes { train_fraction } => {
            let mut idx: Vec<usize> = (0..raw.classes.len()).collect();
            idx.shuffle(&mut rng);
            let k = train_count(idx.len(), *train_fraction)?;
            idx[..k].iter().copied().collect()
        }
        SplitSpec::Files { train, test } => {
            let lookup = class_lookup(raw);
            let resolve = |path: &Path| -> Result<HashSet<usize>> {
                read_split_file(path)?
                    .into_iter()
                    .map(|name| {
                        lookup.get(name.as_str()).copied().ok_or_else(|| Error::Format {
                            path: path.to_path_buf(),
                            msg: format!("unknown or ambiguous class `{name}`"),
                        })
                    })
                    .collect()
            };
            let tr = resolve(train)?;
            let te = resolve(test)?;
            if let Some(both) = tr.intersection(&te).next() {
                return Err(Error::Format {
                    path: test.clone(),
                    msg: format!("class `{}` listed for both splits", raw.classes[*both].id),
                });
            }
            let test_set = subset(raw, &te, "test");
            return Ok((subset(raw, &tr, "train"), test_set));
        }
    };
    let test: HashSet<usize> = (0..raw.classes.len()).filter(|i| !train.contains(i)).collect();
    Ok((subset(raw, &train, "train"), subset(raw, &test, "test")))
}

/// Full ids, plus leaf names that are unambiguous.
fn class_lookup(raw: &RawDataset) -> HashMap<&str, usize> {
    let mut leaf_counts: HashMap<&str, usize> = HashMap::new();
    for c in &raw.classes {
        *leaf_counts.entry(leaf(&c.id)).or_default() += 1;
    }
    let mut map = HashMap::new();
    for (i, c) in raw.classes.iter().enumerate() {
        if leaf_counts[leaf(&c.id)] == 1 {
            map.insert(leaf(&c.id), i);
        }
        map.insert(c.id.as_str(), i);
    }
    map
}

fn leaf(id: &str) -> &str {
    id.rsplit('/').next().unwrap_or(id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    Global,
    PerImage,
}

/// Affine pixel transform `(x − mean_c) / std_c`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub scope: NormScope,
    /// Per-channel; empty for per-image normalization.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Scales bytes to `[0, 1]` without normalizing.
pub fn to_unit_range(raw: &RawDataset, split: Split) -> Result<SplitDataset> {
    raw.validate()?;
    Ok(SplitDataset {
        name: raw.name.clone(),
        split,
        geometry: raw.geometry,
        classes: raw
            .classes
            .iter()
            .map(|c| ClassRecord {
                id: c.id.clone(),
                group: c.group.clone(),
                examples: c
                    .images
                    .iter()
                    .map(|im| im.iter().map(|&b| b as f64 / 255.0).collect())
                    .collect(),
            })
            .collect(),
    })
}

fn channel_moments<'a>(
    images: impl Iterator<Item = &'a Vec<f64>>,
    channels: usize,
) -> (Vec<f64>, Vec<f64>, usize) {
    let mut sum = vec![0.0; channels];
    let mut count = 0usize;
    let images: Vec<&Vec<f64>> = images.collect();
    for im in &images {
        let plane = im.len() / channels;
        for c in 0..channels {
            sum[c] += im[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
    let mut sq = vec![0.0; channels];
    for im in &images {
        let plane = im.len() / channels;
        for c in 0..channels {
            sq[c] += im[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let std = sq.iter().map(|s| (s / count.max(1) as f64).sqrt()).collect();
    (mean, std, count)
}

impl NormStats {
    pub fn fit(ds: &SplitDataset, scope: NormScope) -> Result<Self> {
        if ds.num_examples() == 0 {
            return Err(Error::Dataset {
                name: ds.name.clone(),
                msg: "cannot normalize an empty dataset".into(),
            });
        }
        match scope {
            NormScope::PerImage => Ok(Self {
                scope,
                mean: Vec::new(),
                std: Vec::new(),
            }),
            NormScope::Global => {
                let images = ds.classes.iter().flat_map(|c| c.examples.iter());
                let (mean, std, _) = channel_moments(images, ds.geometry.0);
                if std.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::Dataset {
                        name: ds.name.clone(),
                        msg: "zero pixel variance, cannot normalize".into(),
                    });
                }
                Ok(Self { scope, mean, std })
            }
        }
    }

    pub fn apply(&self, ds: &mut SplitDataset) -> Result<()> {
        let channels = ds.geometry.0;
        if self.scope == NormScope::Global && self.mean.len() != channels {
            return Err(Error::Dataset {
                name: ds.name.clone(),
                msg: format!(
                    "normalization fitted on {} channels, dataset has {channels}",
                    self.mean.len()
                ),
            });
        }
        for class in &mut ds.classes {
            for im in &mut class.examples {
                let (mean, std) = match self.scope {
                    NormScope::Global => (self.mean.clone(), self.std.clone()),
                    NormScope::PerImage => {
                        let (m, s, _) = channel_moments(std::iter::once(&*im), channels);
                        if s.iter().any(|v| !(*v > 0.0)) {
                            return Err(Error::Dataset {
                                name: ds.name.clone(),
                                msg: format!("class `{}` has a constant image", class.id),
                            });
                        }
                        (m, s)
                    }
                };
                let plane = im.len() / channels;
                for (i, v) in im.iter_mut().enumerate() {
                    let c = i / plane;
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
        Ok(())
    }
}

/// Fits normalization on `raw` and returns the transformed dataset.
pub fn normalize(raw: &RawDataset, scope: NormScope, split: Split) -> Result<(SplitDataset, NormStats)> {
    let mut ds = to_unit_range(raw, split)?;
    let stats = NormStats::fit(&ds, scope)?;
    stats.apply(&mut ds)?;
    Ok((ds, stats))
}

/// Pixel mean and standard deviation over a whole dataset, all channels
/// pooled.
pub fn pixel_moments(ds: &SplitDataset) -> (f64, f64) {
    let images = ds.classes.iter().flat_map(|c| c.examples.iter());
    let (m, s, _) = channel_moments(images, 1);
    (m[0], s[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_png(path: &Path, w: u32, h: u32, seed: u8) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([(x * 7 + y * 3) as u8 ^ seed]));
        img.save(path).unwrap();
    }

    fn tree(root: &Path, groups: &[&str], classes: usize, per: usize, size: u32) {
        for (gi, g) in groups.iter().enumerate() {
            for c in 0..classes {
                let dir = root.join(g).join(format!("character{c:02}"));
                fs::create_dir_all(&dir).unwrap();
                for e in 0..per {
                    write_png(&dir.join(format!("{e:02}.png")), size, size, (gi * 31 + c * 7 + e) as u8);
                }
            }
        }
    }

    #[test]
    fn two_level_tree_counts_classes() {
        let dir = tempfile::tempdir().unwrap();
        tree(dir.path(), &["alpha", "beta"], 3, 2, 12);
        let raw = load_image_tree(dir.path(), (28, 28), 1).unwrap();
        assert_eq!(raw.classes.len(), 6);
        assert_eq!(raw.geometry, (1, 28, 28));
        assert_eq!(raw.classes[0].id, "alpha/character00");
        assert_eq!(raw.classes[3].group.as_deref(), Some("beta"));
        let again = load_image_tree(dir.path(), (28, 28), 1).unwrap();
        assert_eq!(raw, again);
    }

    #[test]
    fn one_level_tree_and_identity_resize_are_lossless() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/0.png"), 16, 16, 3);
        let raw = load_image_tree(dir.path(), (16, 16), 1).unwrap();
        assert_eq!(raw.classes[0].group, None);
        let src = image::open(dir.path().join("a/0.png")).unwrap().into_luma8();
        let want: u64 = src.as_raw().iter().map(|&b| b as u64).sum();
        let got: u64 = raw.classes[0].images[0].iter().map(|&b| b as u64).sum();
        assert_eq!(got, want);
    }

    #[test]
    fn empty_leaf_and_bad_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("g/empty")).unwrap();
        fs::create_dir_all(dir.path().join("g/full")).unwrap();
        write_png(&dir.path().join("g/full/0.png"), 4, 4, 0);
        let err = load_image_tree(dir.path(), (4, 4), 1).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("c")).unwrap();
        fs::File::create(dir.path().join("c/broken.png"))
            .unwrap()
            .write_all(b"not a png")
            .unwrap();
        let err = load_image_tree(dir.path(), (4, 4), 1).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    fn write_idx(dir: &Path, images: &[[u8; 4]], labels: &[u8], image_magic: u32) -> (PathBuf, PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        let mut im = Vec::new();
        im.extend_from_slice(&image_magic.to_be_bytes());
        im.extend_from_slice(&(images.len() as u32).to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        for i in images {
            im.extend_from_slice(i);
        }
        fs::write(&ip, im).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]];
        let (ip, lp) = write_idx(dir.path(), &imgs, &[0, 0, 7], IDX_IMAGES_MAGIC);
        let raw = load_idx(&ip, &lp).unwrap();
        assert_eq!(raw.geometry, (1, 2, 2));
        assert_eq!(raw.num_images(), 3);
        assert_eq!(raw.classes.len(), 2);
        assert_eq!(raw.classes[0].id, "0");
        assert_eq!(raw.classes[0].images, vec![imgs[0].to_vec(), imgs[1].to_vec()]);
        assert_eq!(raw.classes[1].id, "7");
        assert_eq!(raw.classes[1].images, vec![imgs[2].to_vec()]);
    }

    #[test]
    fn idx_rejects_label_magic_in_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0; 4]], &[1], IDX_LABELS_MAGIC);
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("0x00000801") && err.contains("0x00000803"), "{err}");
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0; 4], [1; 4]], &[1], IDX_IMAGES_MAGIC);
        assert!(load_idx(&ip, &lp).is_err());
    }

    fn blobs(spread: f64, seed: u64) -> RawDataset {
        synth_blobs(&SynthConfig {
            num_classes: 2,
            per_class: 5,
            geometry: (1, 16, 16),
            spread,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn vanishing_spread_gives_identical_examples() {
        let raw = blobs(0.0, 1);
        for c in &raw.classes {
            assert!(c.images.iter().all(|im| im == &c.images[0]));
        }
        let raw = blobs(1e-9, 1);
        assert!(raw.classes[0].images.iter().all(|im| im == &raw.classes[0].images[0]));
    }

    #[test]
    fn large_spread_keeps_templates_distinct() {
        let a = blobs(0.0, 9);
        assert_ne!(a.classes[0].images[0], a.classes[1].images[0]);
        assert_eq!(blobs(2.0, 9), blobs(2.0, 9));
        assert!(synth_blobs(&SynthConfig { spread: -1.0, ..SynthConfig {
            num_classes: 1, per_class: 1, geometry: (1, 4, 4), spread: 0.0, seed: 0 } }).is_err());
    }

    #[test]
    fn fifty_classes_generate_quickly() {
        let t = std::time::Instant::now();
        let raw = synth_blobs(&SynthConfig {
            num_classes: 50,
            per_class: 20,
            geometry: (1, 28, 28),
            spread: 0.1,
            seed: 0,
        })
        .unwrap();
        assert_eq!(raw.num_images(), 1000);
        assert!(t.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn normalization_centres_and_is_idempotent() {
        let raw = blobs(0.05, 2);
        let (mut ds, _) = normalize(&raw, NormScope::Global, Split::Train).unwrap();
        let (m, s) = pixel_moments(&ds);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "{m} {s}");
        let before = ds.clone();
        let again = NormStats::fit(&ds, NormScope::Global).unwrap();
        again.apply(&mut ds).unwrap();
        for (a, b) in ds.classes.iter().zip(&before.classes) {
            for (x, y) in a.examples.iter().zip(&b.examples) {
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn stats_transfer_without_refitting() {
        let (_, stats) = normalize(&blobs(0.05, 2), NormScope::Global, Split::Train).unwrap();
        let mut other = to_unit_range(&blobs(0.3, 77), Split::Test).unwrap();
        stats.apply(&mut other).unwrap();
        let (m, _) = pixel_moments(&other);
        assert!(m.abs() > 1e-3, "{m}");
    }

    #[test]
    fn constant_dataset_cannot_be_normalized() {
        let raw = RawDataset {
            name: "flat".into(),
            geometry: (1, 2, 2),
            classes: vec![RawClass {
                id: "a".into(),
                group: None,
                images: vec![vec![7; 4]; 3],
            }],
        };
        assert!(normalize(&raw, NormScope::Global, Split::Train).is_err());
    }

    #[test]
    fn per_image_scope_normalizes_each_image() {
        let (ds, _) = normalize(&blobs(0.1, 3), NormScope::PerImage, Split::Train).unwrap();
        let im = &ds.classes[0].examples[0];
        let m = im.iter().sum::<f64>() / im.len() as f64;
        assert!(m.abs() < 1e-9);
    }

    fn grouped(groups: usize, per_group: usize) -> RawDataset {
        RawDataset {
            name: "g".into(),
            geometry: (1, 1, 1),
            classes: (0..groups * per_group)
                .map(|i| RawClass {
                    id: format!("g{}/c{}", i / per_group, i % per_group),
                    group: Some(format!("g{}", i / per_group)),
                    images: vec![vec![i as u8]],
                })
                .collect(),
        }
    }

    #[test]
    fn group_split_keeps_groups_whole_and_is_seeded() {
        let raw = grouped(50, 3);
        let (tr, te) = split(&raw, &SplitSpec::Groups { train_fraction: 0.6 }, 1).unwrap();
        let tg: HashSet<_> = tr.classes.iter().map(|c| c.group.clone()).collect();
        let eg: HashSet<_> = te.classes.iter().map(|c| c.group.clone()).collect();
        assert_eq!(tg.len(), 30);
        assert_eq!(eg.len(), 20);
        assert!(tg.is_disjoint(&eg));
        let (tr2, _) = split(&raw, &SplitSpec::Groups { train_fraction: 0.6 }, 1).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _) = split(&raw, &SplitSpec::Groups { train_fraction: 0.6 }, 2).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn file_split_resolves_ids_and_leaf_names() {
        let raw = grouped(2, 2);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("train.txt"), dir.path().join("test.txt"));
        fs::write(&a, "g0/c0\ng0/c1\n").unwrap();
        fs::write(&b, "g1/c0\n").unwrap();
        let (tr, te) = split(&raw, &SplitSpec::Files { train: a.clone(), test: b.clone() }, 0).unwrap();
        assert_eq!(tr.classes.len(), 2);
        assert_eq!(te.classes.len(), 1);
        // `c0` is ambiguous across groups.
        fs::write(&b, "c0\n").unwrap();
        assert!(split(&raw, &SplitSpec::Files { train: a, test: b }, 0).is_err());
    }
}
