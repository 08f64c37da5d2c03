//! Synthesis, persistence, and loading of the decoy Fashion-MNIST variants.
//!
//! A decoy image is a clean 28x28 garment image with a square patch of
//! high-intensity pixels stamped into one corner. The patch location is
//! either independent of the label (`random`) or a fixed function of it
//! (`classwise`). Every generated image carries two ground-truth masks: the
//! spurious-region mask (exactly the patch) and the object mask (the
//! garment foreground, minus any pixels the patch overwrote, so the two
//! masks never overlap).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::idx;

/// Image side length; the clean dataset and every mask are square.
pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

/// Environment variable naming the clean-dataset cache directory.
pub const DATA_DIR_ENV: &str = "XILBENCH_DATA_DIR";

#[derive(Debug, Error)]
pub enum DecoyError {
    #[error("invalid decoy spec: {0}")]
    InvalidSpec(String),
    #[error("clean image {index} has shape {got_h}x{got_w}, expected {side}x{side}")]
    BadCleanImage { index: usize, got_h: usize, got_w: usize, side: usize },
    #[error("empty object: clean image has no nonzero pixel")]
    EmptyObject,
    #[error("clean image {index} rejected: object mask empty after patch placement")]
    EmptyObjectAt { index: usize },
    #[error("checksum mismatch for {file}: recorded {recorded}, computed {computed}")]
    ChecksumMismatch { file: String, recorded: String, computed: String },
    #[error("metadata error in {path}: {message}")]
    Metadata { path: String, message: String },
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Corner of the image a decoy patch is flush against.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [
        Corner::TopLeft,
        Corner::TopRight,
        Corner::BottomLeft,
        Corner::BottomRight,
    ];

    pub fn code(self) -> u8 {
        match self {
            Corner::TopLeft => 0,
            Corner::TopRight => 1,
            Corner::BottomLeft => 2,
            Corner::BottomRight => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Top-left origin (row, col) of a `patch` x `patch` square flush
    /// against this corner of a `side` x `side` image.
    pub fn patch_origin(self, patch: usize, side: usize) -> (usize, usize) {
        let hi = side - patch;
        match self {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, hi),
            Corner::BottomLeft => (hi, 0),
            Corner::BottomRight => (hi, hi),
        }
    }
}

impl fmt::Display for Corner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Corner::TopLeft => "TL",
            Corner::TopRight => "TR",
            Corner::BottomLeft => "BL",
            Corner::BottomRight => "BR",
        };
        f.write_str(s)
    }
}

impl FromStr for Corner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TL" => Ok(Corner::TopLeft),
            "TR" => Ok(Corner::TopRight),
            "BL" => Ok(Corner::BottomLeft),
            "BR" => Ok(Corner::BottomRight),
            other => Err(format!("unknown corner {other:?}")),
        }
    }
}

/// Which decoy construction to use.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Patch corner drawn independently per image.
    Random,
    /// Patch corner a fixed function of the class label.
    Classwise,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Random => "random",
            Variant::Classwise => "classwise",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Variant::Random),
            "classwise" => Ok(Variant::Classwise),
            other => Err(format!("unknown variant {other:?} (expected random|classwise)")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Stream separator so train and test corners never share a sequence.
    fn corner_salt(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 0x9E37_79B9_7F4A_7C15,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|test)")),
        }
    }
}

/// Full description of a decoy construction. Generation is a pure function
/// of the clean images and this spec.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DecoySpec {
    pub variant: Variant,
    pub patch_size: usize,
    pub patch_intensity: u8,
    pub seed: u64,
    /// Class index -> corner; present exactly for the classwise variant.
    pub class_corner_map: Option<[Corner; NUM_CLASSES]>,
}

impl DecoySpec {
    pub const DEFAULT_PATCH_SIZE: usize = 4;
    pub const DEFAULT_PATCH_INTENSITY: u8 = 255;

    pub fn random(seed: u64) -> Self {
        Self {
            variant: Variant::Random,
            patch_size: Self::DEFAULT_PATCH_SIZE,
            patch_intensity: Self::DEFAULT_PATCH_INTENSITY,
            seed,
            class_corner_map: None,
        }
    }

    /// Classwise spec with the default class-to-corner assignment
    /// (class index modulo 4, in corner-code order TL, TR, BL, BR).
    pub fn classwise(seed: u64) -> Self {
        let map = std::array::from_fn(|c| Corner::ALL[c % 4]);
        Self {
            variant: Variant::Classwise,
            patch_size: Self::DEFAULT_PATCH_SIZE,
            patch_intensity: Self::DEFAULT_PATCH_INTENSITY,
            seed,
            class_corner_map: Some(map),
        }
    }

    pub fn for_variant(variant: Variant, seed: u64) -> Self {
        match variant {
            Variant::Random => Self::random(seed),
            Variant::Classwise => Self::classwise(seed),
        }
    }

    pub fn validate(&self) -> Result<(), DecoyError> {
        if self.patch_size < 1 || self.patch_size > IMAGE_SIDE {
            return Err(DecoyError::InvalidSpec(format!(
                "patch_size {} outside 1..={IMAGE_SIDE}",
                self.patch_size
            )));
        }
        match (self.variant, &self.class_corner_map) {
            (Variant::Classwise, None) => Err(DecoyError::InvalidSpec(
                "classwise variant requires a class_corner_map covering all 10 classes".into(),
            )),
            (Variant::Random, Some(_)) => Err(DecoyError::InvalidSpec(
                "random variant must not carry a class_corner_map".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Corner for image `index`. For the random variant this is a pure
    /// function of (seed, split, index): word `4 * index` of the ChaCha8
    /// stream keyed by `seed ^ split_salt`, reduced modulo 4. Any parallel
    /// generation schedule therefore produces identical output.
    pub fn corner_for(&self, split: Split, index: usize, label: u8) -> Corner {
        match self.variant {
            Variant::Classwise => self.class_corner_map.expect("validated")[label as usize],
            Variant::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ split.corner_salt());
                rng.set_word_pos(4 * index as u128);
                Corner::from_code((rng.next_u32() % 4) as u8).unwrap()
            }
        }
    }
}

/// One decoyed image with its label and ground-truth annotation masks.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AnnotatedImage {
    /// Grayscale pixels in 0..=255.
    pub pixels: Array2<u8>,
    /// Class index 0..=9.
    pub label: u8,
    /// 1 exactly on the decoy patch.
    pub spurious_mask: Array2<u8>,
    /// 1 on the garment foreground; disjoint from `spurious_mask`.
    pub object_mask: Array2<u8>,
    pub corner: Corner,
}

impl AnnotatedImage {
    /// Checks every per-image invariant; used by the dataset property suite.
    pub fn check_invariants(&self, spec: &DecoySpec) -> Result<(), String> {
        let ps = spec.patch_size;
        let (r0, c0) = self.corner.patch_origin(ps, IMAGE_SIDE);
        let mut spurious_count = 0usize;
        for ((i, j), &m) in self.spurious_mask.indexed_iter() {
            let inside = i >= r0 && i < r0 + ps && j >= c0 && j < c0 + ps;
            if m != (inside as u8) {
                return Err(format!("spurious mask mismatch at ({i},{j})"));
            }
            if m == 1 {
                spurious_count += 1;
                if self.pixels[(i, j)] != spec.patch_intensity {
                    return Err(format!("patch pixel ({i},{j}) is not at patch intensity"));
                }
                if self.object_mask[(i, j)] != 0 {
                    return Err(format!("object and spurious masks overlap at ({i},{j})"));
                }
            }
        }
        if spurious_count != ps * ps {
            return Err(format!("spurious mask has {spurious_count} ones, expected {}", ps * ps));
        }
        if !self.object_mask.iter().any(|&m| m == 1) {
            return Err("object mask is empty".into());
        }
        Ok(())
    }
}

/// Clean (pre-decoy) images with their labels and a content digest.
#[derive(Clone, Debug)]
pub struct CleanSet {
    pub images: Vec<Array2<u8>>,
    pub labels: Vec<u8>,
    /// SHA-256 over the raw pixel payload followed by the label payload.
    pub checksum: String,
}

impl CleanSet {
    pub fn new(images: Vec<Array2<u8>>, labels: Vec<u8>) -> Self {
        assert_eq!(images.len(), labels.len());
        let mut h = Sha256::new();
        for img in &images {
            h.update(img.as_slice().expect("standard layout"));
        }
        h.update(&labels);
        let checksum = hex_digest(h);
        Self { images, labels, checksum }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Truncated copy used by smoke-scale runs.
    pub fn take(&self, n: usize) -> CleanSet {
        CleanSet::new(
            self.images.iter().take(n).cloned().collect(),
            self.labels.iter().take(n).copied().collect(),
        )
    }
}

/// A generated split together with the spec that produced it.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub images: Vec<AnnotatedImage>,
    pub split: Split,
    pub spec: DecoySpec,
    pub source_checksum: String,
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        self.split == other.split
            && self.spec == other.spec
            && self.source_checksum == other.source_checksum
            && self.images == other.images
    }
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// SHA-256 over every image, label, mask, and corner in order; equal
    /// specs and clean inputs must reproduce this digest exactly.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            h.update(img.pixels.as_slice().unwrap());
            h.update([img.label]);
            h.update(img.spurious_mask.as_slice().unwrap());
            h.update(img.object_mask.as_slice().unwrap());
            h.update([img.corner.code()]);
        }
        hex_digest(h)
    }
}

fn hex_digest(h: Sha256) -> String {
    let bytes = h.finalize();
    let mut s = String::with_capacity(64);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn sha256_file(path: &Path) -> Result<String, DecoyError> {
    let bytes = std::fs::read(path)
        .map_err(|e| DecoyError::Io { path: path.display().to_string(), source: e })?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_digest(h))
}

/// Object mask of a clean image: 1 exactly where the pixel intensity is
/// greater than zero (the Fashion-MNIST background is exactly zero).
pub fn derive_object_mask(clean_pixels: &Array2<u8>) -> Result<Array2<u8>, DecoyError> {
    let mask = clean_pixels.mapv(|p| (p > 0) as u8);
    if !mask.iter().any(|&m| m == 1) {
        return Err(DecoyError::EmptyObject);
    }
    Ok(mask)
}

/// Stamps decoy patches onto every clean image, producing the annotated
/// bundle. Pure in (clean, spec, split): equal inputs give byte-identical
/// output.
pub fn generate_decoy(
    clean: &CleanSet,
    spec: &DecoySpec,
    split: Split,
) -> Result<DatasetBundle, DecoyError> {
    spec.validate()?;
    let mut images = Vec::with_capacity(clean.len());
    for (index, (pixels, &label)) in clean.images.iter().zip(&clean.labels).enumerate() {
        let (h, w) = pixels.dim();
        if h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(DecoyError::BadCleanImage { index, got_h: h, got_w: w, side: IMAGE_SIDE });
        }
        let mut object_mask =
            derive_object_mask(pixels).map_err(|_| DecoyError::EmptyObjectAt { index })?;
        let corner = spec.corner_for(split, index, label);
        let (r0, c0) = corner.patch_origin(spec.patch_size, IMAGE_SIDE);
        let mut out = pixels.clone();
        let mut spurious_mask = Array2::zeros((IMAGE_SIDE, IMAGE_SIDE));
        for i in r0..r0 + spec.patch_size {
            for j in c0..c0 + spec.patch_size {
                out[(i, j)] = spec.patch_intensity;
                spurious_mask[(i, j)] = 1;
                // patch overwrites the garment, so those pixels leave the object
                object_mask[(i, j)] = 0;
            }
        }
        if !object_mask.iter().any(|&m| m == 1) {
            return Err(DecoyError::EmptyObjectAt { index });
        }
        images.push(AnnotatedImage { pixels: out, label, spurious_mask, object_mask, corner });
    }
    Ok(DatasetBundle {
        images,
        split,
        spec: spec.clone(),
        source_checksum: clean.checksum.clone(),
    })
}

const FILE_IMAGES: &str = "images-idx3-ubyte";
const FILE_LABELS: &str = "labels-idx1-ubyte";
const FILE_SPURIOUS: &str = "spurious-masks-idx3-ubyte";
const FILE_OBJECT: &str = "object-masks-idx3-ubyte";
const FILE_CORNERS: &str = "corners-idx1-ubyte";
const FILE_METADATA: &str = "metadata.txt";

fn flat3(images: &[AnnotatedImage], f: impl Fn(&AnnotatedImage) -> &Array2<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * IMAGE_SIDE * IMAGE_SIDE);
    for img in images {
        out.extend_from_slice(f(img).as_slice().unwrap());
    }
    out
}

/// Writes a bundle as five IDX files plus a key-value metadata file that
/// records the spec and per-file SHA-256 checksums.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), DecoyError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| DecoyError::Io { path: dir.display().to_string(), source: e })?;
    let n = bundle.len() as u32;
    let side = IMAGE_SIDE as u32;
    let dims3 = [n, side, side];
    idx::write_u8(&dir.join(FILE_IMAGES), &dims3, &flat3(&bundle.images, |i| &i.pixels))?;
    let labels: Vec<u8> = bundle.images.iter().map(|i| i.label).collect();
    idx::write_u8(&dir.join(FILE_LABELS), &[n], &labels)?;
    idx::write_u8(&dir.join(FILE_SPURIOUS), &dims3, &flat3(&bundle.images, |i| &i.spurious_mask))?;
    idx::write_u8(&dir.join(FILE_OBJECT), &dims3, &flat3(&bundle.images, |i| &i.object_mask))?;
    let corners: Vec<u8> = bundle.images.iter().map(|i| i.corner.code()).collect();
    idx::write_u8(&dir.join(FILE_CORNERS), &[n], &corners)?;

    let mut meta = String::new();
    meta.push_str("format_version=1\n");
    meta.push_str(&format!("variant={}\n", bundle.spec.variant));
    meta.push_str(&format!("patch_size={}\n", bundle.spec.patch_size));
    meta.push_str(&format!("patch_intensity={}\n", bundle.spec.patch_intensity));
    meta.push_str(&format!("seed={}\n", bundle.spec.seed));
    if let Some(map) = &bundle.spec.class_corner_map {
        let parts: Vec<String> = map.iter().map(|c| c.to_string()).collect();
        meta.push_str(&format!("class_corner_map={}\n", parts.join(",")));
    }
    meta.push_str(&format!("split={}\n", bundle.split));
    meta.push_str(&format!("count={}\n", bundle.len()));
    meta.push_str(&format!("source_checksum={}\n", bundle.source_checksum));
    for file in [FILE_IMAGES, FILE_LABELS, FILE_SPURIOUS, FILE_OBJECT, FILE_CORNERS] {
        meta.push_str(&format!("checksum.{file}={}\n", sha256_file(&dir.join(file))?));
    }
    std::fs::write(dir.join(FILE_METADATA), meta)
        .map_err(|e| DecoyError::Io { path: dir.display().to_string(), source: e })
}

fn parse_metadata(path: &Path) -> Result<BTreeMap<String, String>, DecoyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DecoyError::Io { path: path.display().to_string(), source: e })?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DecoyError::Metadata {
            path: path.display().to_string(),
            message: format!("malformed line {line:?}"),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn meta_get<'m>(
    meta: &'m BTreeMap<String, String>,
    path: &Path,
    key: &str,
) -> Result<&'m str, DecoyError> {
    meta.get(key).map(String::as_str).ok_or_else(|| DecoyError::Metadata {
        path: path.display().to_string(),
        message: format!("missing key {key}"),
    })
}

/// Loads a bundle saved by [`save_bundle`], verifying every file checksum
/// before parsing. `load(save(b)) == b` bit-exactly.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, DecoyError> {
    let meta_path = dir.join(FILE_METADATA);
    let meta = parse_metadata(&meta_path)?;
    let bad = |message: String| DecoyError::Metadata {
        path: meta_path.display().to_string(),
        message,
    };

    for file in [FILE_IMAGES, FILE_LABELS, FILE_SPURIOUS, FILE_OBJECT, FILE_CORNERS] {
        let recorded = meta_get(&meta, &meta_path, &format!("checksum.{file}"))?.to_string();
        let computed = sha256_file(&dir.join(file))?;
        if recorded != computed {
            return Err(DecoyError::ChecksumMismatch { file: file.to_string(), recorded, computed });
        }
    }

    let variant: Variant = meta_get(&meta, &meta_path, "variant")?.parse().map_err(bad)?;
    let patch_size: usize =
        meta_get(&meta, &meta_path, "patch_size")?.parse().map_err(|e| bad(format!("{e}")))?;
    let patch_intensity: u8 =
        meta_get(&meta, &meta_path, "patch_intensity")?.parse().map_err(|e| bad(format!("{e}")))?;
    let seed: u64 = meta_get(&meta, &meta_path, "seed")?.parse().map_err(|e| bad(format!("{e}")))?;
    let class_corner_map = match meta.get("class_corner_map") {
        None => None,
        Some(s) => {
            let corners: Vec<Corner> =
                s.split(',').map(Corner::from_str).collect::<Result<_, _>>().map_err(bad)?;
            let arr: [Corner; NUM_CLASSES] = corners
                .try_into()
                .map_err(|_| bad("class_corner_map must list 10 corners".into()))?;
            Some(arr)
        }
    };
    let split: Split = meta_get(&meta, &meta_path, "split")?.parse().map_err(bad)?;
    let source_checksum = meta_get(&meta, &meta_path, "source_checksum")?.to_string();
    let spec = DecoySpec { variant, patch_size, patch_intensity, seed, class_corner_map };
    spec.validate()?;

    let (dims, pixels) = idx::read_u8(&dir.join(FILE_IMAGES), Some(3))?;
    let n = dims[0] as usize;
    let side = IMAGE_SIDE;
    if dims[1] as usize != side || dims[2] as usize != side {
        return Err(bad(format!("image dims {dims:?}, expected [*, {side}, {side}]")));
    }
    let (_, labels) = idx::read_u8(&dir.join(FILE_LABELS), Some(1))?;
    let (_, spurious) = idx::read_u8(&dir.join(FILE_SPURIOUS), Some(3))?;
    let (_, object) = idx::read_u8(&dir.join(FILE_OBJECT), Some(3))?;
    let (_, corners) = idx::read_u8(&dir.join(FILE_CORNERS), Some(1))?;
    if labels.len() != n || corners.len() != n {
        return Err(bad("label/corner count does not match image count".into()));
    }

    let npix = side * side;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let grab = |buf: &[u8]| {
            Array2::from_shape_vec((side, side), buf[i * npix..(i + 1) * npix].to_vec()).unwrap()
        };
        let corner = Corner::from_code(corners[i])
            .ok_or_else(|| bad(format!("image {i}: bad corner code {}", corners[i])))?;
        images.push(AnnotatedImage {
            pixels: grab(&pixels),
            label: labels[i],
            spurious_mask: grab(&spurious),
            object_mask: grab(&object),
            corner,
        });
    }
    Ok(DatasetBundle { images, split, spec, source_checksum })
}

/// Loads one clean Fashion-MNIST split from its standard IDX files
/// (`train-images-idx3-ubyte` / `train-labels-idx1-ubyte`, `t10k-...`).
pub fn load_clean_split(dir: &Path, split: Split) -> Result<CleanSet, DecoyError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (dims, pixels) = idx::read_u8(&dir.join(format!("{prefix}-images-idx3-ubyte")), Some(3))?;
    let (_, labels) = idx::read_u8(&dir.join(format!("{prefix}-labels-idx1-ubyte")), Some(1))?;
    let n = dims[0] as usize;
    let (h, w) = (dims[1] as usize, dims[2] as usize);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        images.push(
            Array2::from_shape_vec((h, w), pixels[i * h * w..(i + 1) * h * w].to_vec()).unwrap(),
        );
    }
    Ok(CleanSet::new(images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross_image() -> Array2<u8> {
        // a plus-shaped garment through the centre, away from all corners
        Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(i, j)| {
            if (10..18).contains(&i) || (10..18).contains(&j) {
                (40 + i + j) as u8
            } else {
                0
            }
        })
    }

    fn tiny_clean(n: usize) -> CleanSet {
        let images: Vec<Array2<u8>> = (0..n).map(|_| cross_image()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
        CleanSet::new(images, labels)
    }

    #[test]
    fn classwise_patch_lands_in_mapped_corner() {
        let clean = tiny_clean(10);
        let spec = DecoySpec::classwise(3);
        let bundle = generate_decoy(&clean, &spec, Split::Train).unwrap();
        // label 1 maps to TR under the modulo-4 default
        let img = &bundle.images[1];
        assert_eq!(img.corner, Corner::TopRight);
        let mut ones = 0;
        for i in 0..4 {
            for j in IMAGE_SIDE - 4..IMAGE_SIDE {
                assert_eq!(img.pixels[(i, j)], 255);
                assert_eq!(img.spurious_mask[(i, j)], 1);
                ones += 1;
            }
        }
        assert_eq!(ones, 16);
        assert_eq!(img.spurious_mask.iter().filter(|&&m| m == 1).count(), 16);
    }

    #[test]
    fn all_zero_clean_image_is_rejected_with_index() {
        let mut clean = tiny_clean(3);
        clean.images[2] = Array2::zeros((IMAGE_SIDE, IMAGE_SIDE));
        let clean = CleanSet::new(clean.images, clean.labels);
        let err = generate_decoy(&clean, &DecoySpec::random(1), Split::Train).unwrap_err();
        assert!(matches!(err, DecoyError::EmptyObjectAt { index: 2 }));
    }

    #[test]
    fn wrong_dimensions_rejected_with_index() {
        let images = vec![cross_image(), Array2::from_elem((27, 28), 9u8)];
        let clean = CleanSet { images, labels: vec![0, 1], checksum: "x".into() };
        let err = generate_decoy(&clean, &DecoySpec::random(1), Split::Train).unwrap_err();
        assert!(matches!(err, DecoyError::BadCleanImage { index: 1, got_h: 27, .. }));
    }

    #[test]
    fn generation_is_deterministic() {
        let clean = tiny_clean(40);
        let spec = DecoySpec::random(99);
        let a = generate_decoy(&clean, &spec, Split::Train).unwrap();
        let b = generate_decoy(&clean, &spec, Split::Train).unwrap();
        assert_eq!(a.digest(), b.digest());
        let other = generate_decoy(&clean, &DecoySpec::random(100), Split::Train).unwrap();
        assert_ne!(a.digest(), other.digest());
        // split changes the random corner stream
        let test = generate_decoy(&clean, &spec, Split::Test).unwrap();
        assert_ne!(a.digest(), test.digest());
    }

    #[test]
    fn derive_object_mask_examples() {
        let mut three = Array2::zeros((IMAGE_SIDE, IMAGE_SIDE));
        three[(5, 5)] = 1;
        three[(12, 20)] = 200;
        three[(27, 0)] = 55;
        let mask = derive_object_mask(&three).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 3);
        assert_eq!(mask[(5, 5)], 1);
        assert_eq!(mask[(12, 20)], 1);
        assert_eq!(mask[(27, 0)], 1);

        let full = Array2::from_elem((IMAGE_SIDE, IMAGE_SIDE), 255u8);
        assert!(derive_object_mask(&full).unwrap().iter().all(|&m| m == 1));

        let empty = Array2::zeros((IMAGE_SIDE, IMAGE_SIDE));
        assert!(matches!(derive_object_mask(&empty), Err(DecoyError::EmptyObject)));
    }

    #[test]
    fn spec_validation_rejects_inconsistent_maps() {
        let mut spec = DecoySpec::random(0);
        spec.class_corner_map = Some([Corner::TopLeft; NUM_CLASSES]);
        assert!(spec.validate().is_err());
        let mut spec = DecoySpec::classwise(0);
        spec.class_corner_map = None;
        assert!(spec.validate().is_err());
        let mut spec = DecoySpec::random(0);
        spec.patch_size = 0;
        assert!(spec.validate().is_err());
        spec.patch_size = IMAGE_SIDE + 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn per_image_invariants_hold_for_both_variants() {
        let clean = tiny_clean(48);
        for spec in [DecoySpec::random(5), DecoySpec::classwise(5)] {
            let bundle = generate_decoy(&clean, &spec, Split::Train).unwrap();
            for img in &bundle.images {
                img.check_invariants(&spec).unwrap();
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let clean = tiny_clean(10);
        let bundle = generate_decoy(&clean, &DecoySpec::classwise(11), Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(bundle, loaded);
        assert_eq!(bundle.digest(), loaded.digest());
    }

    #[test]
    fn corrupt_mask_file_is_named_in_the_error() {
        let clean = tiny_clean(6);
        let bundle = generate_decoy(&clean, &DecoySpec::random(11), Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let victim = dir.path().join(FILE_OBJECT);
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
        match load_bundle(dir.path()) {
            Err(DecoyError::ChecksumMismatch { file, .. }) => assert_eq!(file, FILE_OBJECT),
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn patch_overlap_removes_object_pixels() {
        // garment touching the TL corner: overwritten pixels leave the object mask
        let mut img = cross_image();
        for i in 0..6 {
            for j in 0..6 {
                img[(i, j)] = 100;
            }
        }
        let clean = CleanSet::new(vec![img], vec![0]);
        let spec = DecoySpec::classwise(0); // label 0 -> TL
        let bundle = generate_decoy(&clean, &spec, Split::Train).unwrap();
        let out = &bundle.images[0];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(out.object_mask[(i, j)], 0);
                assert_eq!(out.spurious_mask[(i, j)], 1);
            }
        }
        // garment pixels outside the patch survive
        assert_eq!(out.object_mask[(5, 5)], 1);
        out.check_invariants(&spec).unwrap();
    }
}
